//! Ice-gradient weight maps, the physical imaging pipeline, noise baselines
//! at a target SNR, particle-background masks, and the noisy intermediate
//! input for contrastive training.
//!
//! The physical image is `psf * [W . integral(S dz)]`: composite projection
//! first, ice weighting second, CTF filtering last. SNR is defined as
//! signal variance over noise variance throughout.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::optics::{apply_psf, CtfParams};
use crate::specimen::{is_rotation, project_particle, SpecimenLayout};
use crate::volume::{mean_var, DensityVolume, Micrograph};
use crate::{Error, Result};

/// Shape of the simulated ice-thickness gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IceGradientKind {
    /// Ramp along the given direction (radians, 0 = +x).
    Linear { direction: f64 },
    /// Falloff with distance from a center in pixels.
    Radial { center: [f64; 2] },
}

/// Parametric ice weight map: attenuation from 1 down to `min_weight`,
/// optionally smoothed with a broad Gaussian kernel and renormalized to
/// maximum 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IceGradientParams {
    pub kind: IceGradientKind,
    /// Weight at the thickest point, in (0, 1].
    pub min_weight: f64,
    /// Blur kernel sigma in pixels (0 = no blur).
    pub blur_sigma: f64,
}

impl IceGradientParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_weight > 0.0 && self.min_weight <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "min_weight {} outside (0, 1]",
                self.min_weight
            )));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "blur_sigma {} must be >= 0",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|w| w / norm).collect();

    let (h, w) = img.dim();
    let mut pass1 = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let xx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kw * img[[y, xx]];
            }
            pass1[[y, x]] = acc;
        }
    }
    let mut pass2 = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kw * pass1[[yy, x]];
            }
            pass2[[y, x]] = acc;
        }
    }
    pass2
}

/// Builds the ice weight map: a ramp (or radial falloff) from 1 down to
/// `min_weight`, blurred, then renormalized so the maximum is exactly 1.
pub fn make_ice_weight_map(p: &IceGradientParams, dims: (usize, usize)) -> Result<Micrograph> {
    p.validate()?;
    let (h, w) = dims;
    if h < 8 || w < 8 {
        return Err(Error::InvalidGrid(format!("weight map {h}x{w} below 8x8")));
    }
    let drop = 1.0 - p.min_weight;
    let raw = match p.kind {
        IceGradientKind::Linear { direction } => {
            let (dx, dy) = (direction.cos(), direction.sin());
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in 0..h {
                for x in 0..w {
                    let s = dx * x as f64 + dy * y as f64;
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            Array2::from_shape_fn((h, w), |(y, x)| {
                let s = (dx * x as f64 + dy * y as f64 - lo) / span;
                1.0 - drop * s
            })
        }
        IceGradientKind::Radial { center } => {
            let [cx, cy] = center;
            let corners = [
                (0.0, 0.0),
                (w as f64 - 1.0, 0.0),
                (0.0, h as f64 - 1.0),
                (w as f64 - 1.0, h as f64 - 1.0),
            ];
            let r_max = corners
                .iter()
                .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
                .fold(1e-12, f64::max);
            Array2::from_shape_fn((h, w), |(y, x)| {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                1.0 - drop * (r / r_max).min(1.0)
            })
        }
    };
    let blurred = gaussian_blur(&raw, p.blur_sigma);
    let max = blurred.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    Micrograph::new(blurred.mapv(|v| v / max), 1.0)
}

/// One particle's ground truth within a micrograph.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleAnnotation {
    /// Center `(x, y)` in pixels, sub-pixel precision.
    pub center: [f64; 2],
    pub rotation: nalgebra::Matrix3<f64>,
    pub conformation_index: usize,
    /// Micrograph defocus in Angstrom, repeated per particle for the TSV.
    pub defocus: f64,
}

/// Ground-truth annotations for a single micrograph, including the imaging
/// parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub height: usize,
    pub width: usize,
    pub particles: Vec<ParticleAnnotation>,
    pub ctf: CtfParams,
    pub ice: IceGradientParams,
}

impl AnnotationSet {
    /// Checks that every rotation is proper (tolerance 1e-6) and every
    /// center lies inside the micrograph.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.particles.iter().enumerate() {
            if !is_rotation(&p.rotation, 1e-6) {
                return Err(Error::InvalidParameter(format!(
                    "particle {i}: rotation is not orthogonal with det 1"
                )));
            }
            let [x, y] = p.center;
            if !(0.0..self.width as f64).contains(&x) || !(0.0..self.height as f64).contains(&y) {
                return Err(Error::InvalidParameter(format!(
                    "particle {i}: center ({x}, {y}) outside {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Formats a float with 9 significant digits, trimming trailing zeros
/// (printf `%.9g` style).
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.8e}", x);
        s.replace("e", "e+").replace("e+-", "e-")
    }
}

pub const ANNOTATION_TSV_HEADER: &str =
    "mic_id\tcx\tcy\tr00\tr01\tr02\tr10\tr11\tr12\tr20\tr21\tr22\tconf_idx\tdefocus_A";

/// Writes per-particle rows (no header) for one micrograph.
pub fn write_annotation_rows<W: Write>(out: &mut W, mic_id: &str, set: &AnnotationSet) -> Result<()> {
    for p in &set.particles {
        let r = &p.rotation;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            mic_id,
            fmt_sig9(p.center[0]),
            fmt_sig9(p.center[1]),
            fmt_sig9(r[(0, 0)]),
            fmt_sig9(r[(0, 1)]),
            fmt_sig9(r[(0, 2)]),
            fmt_sig9(r[(1, 0)]),
            fmt_sig9(r[(1, 1)]),
            fmt_sig9(r[(1, 2)]),
            fmt_sig9(r[(2, 0)]),
            fmt_sig9(r[(2, 1)]),
            fmt_sig9(r[(2, 2)]),
            p.conformation_index,
            fmt_sig9(p.defocus),
        )?;
    }
    Ok(())
}

/// A parsed annotation TSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub mic_id: String,
    pub center: [f64; 2],
    pub rotation: nalgebra::Matrix3<f64>,
    pub conformation_index: usize,
    pub defocus: f64,
}

/// Reads an annotation TSV (one header line, then per-particle rows).
pub fn read_annotations_tsv(path: &Path) -> Result<Vec<AnnotationRow>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 14 {
            return Err(Error::AnnotationParse {
                line: idx + 1,
                msg: format!("expected 14 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::AnnotationParse {
                line: idx + 1,
                msg: format!("bad {what}: {s:?}"),
            })
        };
        let mut r = [0.0; 9];
        for (k, slot) in r.iter_mut().enumerate() {
            *slot = parse(fields[3 + k], "rotation entry")?;
        }
        rows.push(AnnotationRow {
            mic_id: fields[0].to_string(),
            center: [parse(fields[1], "cx")?, parse(fields[2], "cy")?],
            rotation: nalgebra::Matrix3::from_row_slice(&r),
            conformation_index: fields[12].parse().map_err(|_| Error::AnnotationParse {
                line: idx + 1,
                msg: format!("bad conf_idx: {:?}", fields[12]),
            })?,
            defocus: parse(fields[13], "defocus")?,
        });
    }
    Ok(rows)
}

/// Imaging parameters recorded into the annotations of one micrograph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagingMeta {
    pub ctf: CtfParams,
    pub ice: IceGradientParams,
}

/// Runs the physical pipeline for one micrograph: composite projection,
/// elementwise ice weighting, then CTF filtering. The returned annotations
/// carry every placement plus the CTF and ice parameters used.
pub fn synthesize_physical(
    layout: &SpecimenLayout,
    conformations: &[DensityVolume],
    ice_map: &Micrograph,
    ctf_grid: &Array2<f64>,
    meta: &ImagingMeta,
) -> Result<(Micrograph, AnnotationSet)> {
    let clean = crate::specimen::composite_projection(layout, conformations)?;
    if ice_map.data().dim() != clean.data().dim() {
        return Err(Error::DimMismatch(format!(
            "ice map {:?} vs frame {:?}",
            ice_map.data().dim(),
            clean.data().dim()
        )));
    }
    let weighted = Micrograph::new(clean.data() * ice_map.data(), clean.pixel_size())?;
    let phy = apply_psf(&weighted, ctf_grid)?;
    let annotations = AnnotationSet {
        height: layout.height,
        width: layout.width,
        particles: layout
            .placements
            .iter()
            .map(|p| ParticleAnnotation {
                center: p.translation,
                rotation: p.rotation,
                conformation_index: p.conformation_index,
                defocus: meta.ctf.defocus,
            })
            .collect(),
        ctf: meta.ctf,
        ice: meta.ice,
    };
    Ok((phy, annotations))
}

/// Variance ratio `var(signal) / var(noisy - signal)`.
pub fn measure_snr(signal: &Micrograph, noisy: &Micrograph) -> Result<f64> {
    if signal.data().dim() != noisy.data().dim() {
        return Err(Error::DimMismatch(format!(
            "signal {:?} vs noisy {:?}",
            signal.data().dim(),
            noisy.data().dim()
        )));
    }
    let (_, var_s) = signal.mean_var();
    let diff: Vec<f64> = noisy
        .data()
        .iter()
        .zip(signal.data().iter())
        .map(|(n, s)| n - s)
        .collect();
    let (_, var_n) = mean_var(diff.iter().copied());
    if var_n == 0.0 {
        return Err(Error::InfiniteSnr);
    }
    Ok(var_s / var_n)
}

/// Noise mechanism for the traditional baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    Gaussian,
    Poisson,
    PoissonGaussian,
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseModel::Gaussian => "gaussian",
            NoiseModel::Poisson => "poisson",
            NoiseModel::PoissonGaussian => "poisson_gaussian",
        })
    }
}

/// Noise baseline specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    /// Target signal-to-noise ratio (variance ratio).
    pub target_snr: f64,
    /// For the mixed model: share of the noise variance carried by the
    /// Poisson term, in [0, 1].
    pub mix_ratio: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_snr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "target SNR {} must be > 0",
                self.target_snr
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidParameter(format!(
                "mix ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        Ok(())
    }
}

/// Per-pixel Poisson draws with rate `c * value`; returns raw counts.
pub(crate) fn draw_poisson_counts(
    values: &Array2<f64>,
    c: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    values.mapv(|v| {
        let lambda = c * v;
        if lambda <= 0.0 {
            0.0
        } else {
            Poisson::new(lambda).expect("positive rate").sample(rng)
        }
    })
}

/// Poisson noise calibrated so the measured SNR lands within 10% of the
/// target: closed-form count scale `c = snr * mean(m') / var(m')` on the
/// min-shifted image, with one multiplicative refinement pass on a trial
/// draw.
fn poisson_at_snr(
    m: &Micrograph,
    target_snr: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let min = m.data().iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let shifted = m.data().mapv(|v| v - min);
    let (mean_s, var_s) = mean_var(shifted.iter().copied());
    if var_s < 1e-24 || mean_s <= 0.0 {
        return Err(Error::DegeneratePoissonSignal);
    }
    let mut c = target_snr * mean_s / var_s;
    for pass in 0..2 {
        let counts = draw_poisson_counts(&shifted, c, rng);
        let out = counts.mapv(|k| k / c + min);
        let noise: Vec<f64> = out.iter().zip(m.data().iter()).map(|(a, b)| a - b).collect();
        let (_, var_n) = mean_var(noise.iter().copied());
        if var_n == 0.0 {
            return Err(Error::DegeneratePoissonSignal);
        }
        let (_, var_sig) = m.mean_var();
        let measured = var_sig / var_n;
        if pass == 1 || (measured - target_snr).abs() <= 0.1 * target_snr {
            return Ok(out);
        }
        // Measured SNR is linear in c; one correction centers it.
        c *= target_snr / measured;
    }
    unreachable!("loop returns on the final pass");
}

/// Adds detector noise at the target SNR. The input is untouched; draws are
/// deterministic given the RNG stream.
pub fn add_noise(m: &Micrograph, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<Micrograph> {
    spec.validate()?;
    let (_, var_sig) = m.mean_var();
    let total_noise_var = var_sig / spec.target_snr;
    let data = match spec.model {
        NoiseModel::Gaussian => add_gaussian(m.data(), total_noise_var, rng),
        NoiseModel::Poisson => poisson_at_snr(m, spec.target_snr, rng)?,
        NoiseModel::PoissonGaussian => {
            let mix = spec.mix_ratio;
            let after_poisson = if mix > 0.0 {
                poisson_at_snr(m, spec.target_snr / mix, rng)?
            } else {
                m.data().clone()
            };
            add_gaussian(&after_poisson, (1.0 - mix) * total_noise_var, rng)
        }
    };
    Micrograph::new(data, m.pixel_size())
}

fn add_gaussian(data: &Array2<f64>, noise_var: f64, rng: &mut impl Rng) -> Array2<f64> {
    if noise_var <= 0.0 {
        return data.clone();
    }
    let dist = Normal::new(0.0, noise_var.sqrt()).expect("positive std");
    data.mapv(|v| v + dist.sample(rng))
}

/// Thresholds a grid at `frac` of its maximum into exact 0/1 values.
pub fn binarize(img: &Array2<f64>, frac_of_max: f64) -> Array2<f64> {
    let max = img.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let thresh = frac_of_max * max;
    img.mapv(|v| if v >= thresh && v > 0.0 { 1.0 } else { 0.0 })
}

/// Builds the binary particle-background mask: the union over particles of
/// the pixels where that particle's own projection reaches
/// `threshold_frac` of its peak. Values are exactly 0 or 1.
pub fn make_particle_mask(
    layout: &SpecimenLayout,
    conformations: &[DensityVolume],
    threshold_frac: f64,
) -> Result<Micrograph> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold_frac {threshold_frac} outside (0, 1)"
        )));
    }
    let first = conformations
        .first()
        .ok_or_else(|| Error::InvalidParameter("need at least one conformation".into()))?;
    let d = first.side();
    let c = (d as f64 - 1.0) / 2.0;
    let mut mask = Array2::zeros((layout.height, layout.width));
    for p in &layout.placements {
        let v = conformations.get(p.conformation_index).ok_or({
            Error::BadConformationIndex {
                index: p.conformation_index,
                count: conformations.len(),
            }
        })?;
        let patch = project_particle(v, &p.rotation);
        let peak = patch.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        if peak <= 0.0 {
            continue;
        }
        let thresh = threshold_frac * peak;
        let inv = p.rotation.transpose();
        let [tx, ty] = p.translation;
        let x_range = ((tx - c).floor().max(0.0) as usize)
            ..(((tx + c).ceil() as usize + 2).min(layout.width));
        let y_range = ((ty - c).floor().max(0.0) as usize)
            ..(((ty + c).ceil() as usize + 2).min(layout.height));
        for y in y_range {
            for x in x_range.clone() {
                let mut acc = 0.0;
                for z in 0..d {
                    let r = nalgebra::Vector3::new(x as f64 - tx, y as f64 - ty, z as f64 - c);
                    let q = inv * r;
                    acc += crate::specimen::trilinear(v, q.x + c, q.y + c, q.z + c);
                }
                if acc >= thresh {
                    mask[[y, x]] = 1.0;
                }
            }
        }
    }
    Micrograph::new(mask, first.voxel_size())
}

/// The noisy intermediate input: the physical image plus zero-mean Gaussian
/// noise whose standard deviation is `noise_std_frac` of the signal's.
pub fn intermediate_input(
    i_phy: &Micrograph,
    noise_std_frac: f64,
    rng: &mut impl Rng,
) -> Result<Micrograph> {
    if !(noise_std_frac >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise_std_frac {noise_std_frac} must be >= 0"
        )));
    }
    if noise_std_frac == 0.0 {
        return Ok(i_phy.clone());
    }
    let (_, var) = i_phy.mean_var();
    let std = noise_std_frac * var.sqrt();
    Micrograph::new(add_gaussian(i_phy.data(), std * std, rng), i_phy.pixel_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::ctf_image;
    use crate::specimen::{composite_projection, sample_rotation, Placement};
    use nalgebra::Matrix3;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(d: usize, sigma: f64) -> DensityVolume {
        let c = (d as f64 - 1.0) / 2.0;
        DensityVolume::new(
            Array3::from_shape_fn((d, d, d), |(z, y, x)| {
                let r2 =
                    (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp()
            }),
            1.0,
        )
        .unwrap()
    }

    fn flat_ice() -> IceGradientParams {
        IceGradientParams {
            kind: IceGradientKind::Linear { direction: 0.0 },
            min_weight: 1.0,
            blur_sigma: 0.0,
        }
    }

    fn phantom(h: usize, w: usize) -> Micrograph {
        Micrograph::new(
            Array2::from_shape_fn((h, w), |(y, x)| {
                ((x as f64 * 0.17).sin() + (y as f64 * 0.11).cos()) * 3.0
            }),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn flat_gradient_is_all_ones() {
        let map = make_ice_weight_map(&flat_ice(), (16, 16)).unwrap();
        assert!(map.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_ramp_monotone_rows() {
        let p = IceGradientParams {
            kind: IceGradientKind::Linear { direction: 0.0 },
            min_weight: 0.5,
            blur_sigma: 0.0,
        };
        let map = make_ice_weight_map(&p, (16, 32)).unwrap();
        for y in 0..16 {
            assert!((map.data()[[y, 0]] - 1.0).abs() < 1e-12);
            assert!((map.data()[[y, 31]] - 0.5).abs() < 1e-12);
            for x in 1..32 {
                assert!(map.data()[[y, x]] <= map.data()[[y, x - 1]] + 1e-12);
            }
        }
    }

    #[test]
    fn blurred_map_renormalized_to_one() {
        let p = IceGradientParams {
            kind: IceGradientKind::Radial { center: [20.0, 12.0] },
            min_weight: 0.3,
            blur_sigma: 5.0,
        };
        let map = make_ice_weight_map(&p, (48, 64)).unwrap();
        let max = map.data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        assert!((max - 1.0).abs() < 1e-9);
        assert!(map.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn physical_pipeline_degenerates_to_composite() {
        let v = blob(16, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = SpecimenLayout {
            height: 64,
            width: 64,
            placements: vec![
                Placement {
                    rotation: sample_rotation(&mut rng),
                    translation: [20.0, 30.0],
                    conformation_index: 0,
                },
                Placement {
                    rotation: sample_rotation(&mut rng),
                    translation: [44.0, 18.0],
                    conformation_index: 0,
                },
            ],
            shortfall: 0,
        };
        let ice = make_ice_weight_map(&flat_ice(), (64, 64)).unwrap();
        let ones = Array2::from_elem((64, 64), 1.0);
        let meta = ImagingMeta {
            ctf: CtfParams::standard(15000.0, 1.0),
            ice: flat_ice(),
        };
        let (phy, ann) = synthesize_physical(&layout, &[v.clone()], &ice, &ones, &meta).unwrap();
        let clean = composite_projection(&layout, &[v]).unwrap();
        let max = clean.data().iter().fold(0f64, |a, &x| a.max(x.abs()));
        for (a, b) in phy.data().iter().zip(clean.data().iter()) {
            assert!((a - b).abs() <= 1e-6 * max);
        }
        assert_eq!(ann.particles.len(), 2);
        ann.validate().unwrap();
    }

    #[test]
    fn empty_layout_synthesizes_zero() {
        let layout = SpecimenLayout {
            height: 32,
            width: 32,
            placements: vec![],
            shortfall: 0,
        };
        let ice = make_ice_weight_map(&flat_ice(), (32, 32)).unwrap();
        let p = CtfParams::standard(12000.0, 1.0);
        let grid = ctf_image(&p, 32, 32).unwrap();
        let meta = ImagingMeta { ctf: p, ice: flat_ice() };
        let (phy, _) = synthesize_physical(&layout, &[blob(8, 1.5)], &ice, &grid, &meta).unwrap();
        assert!(phy.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ice_weighting_applies_before_psf() {
        // With ctf = 1 the pipeline reduces to ramp * composite.
        let v = blob(16, 2.0);
        let layout = SpecimenLayout {
            height: 64,
            width: 64,
            placements: vec![Placement {
                rotation: Matrix3::identity(),
                translation: [31.5, 31.5],
                conformation_index: 0,
            }],
            shortfall: 0,
        };
        let ramp_params = IceGradientParams {
            kind: IceGradientKind::Linear { direction: 0.5 },
            min_weight: 0.4,
            blur_sigma: 0.0,
        };
        let ice = make_ice_weight_map(&ramp_params, (64, 64)).unwrap();
        let ones = Array2::from_elem((64, 64), 1.0);
        let meta = ImagingMeta {
            ctf: CtfParams::standard(15000.0, 1.0),
            ice: ramp_params,
        };
        let (phy, _) = synthesize_physical(&layout, &[v.clone()], &ice, &ones, &meta).unwrap();
        let clean = composite_projection(&layout, &[v]).unwrap();
        let expect = clean.data() * ice.data();
        let max = expect.iter().fold(0f64, |a, &x| a.max(x.abs()));
        for (a, b) in phy.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-9 * max.max(1.0));
        }
        // Weighting never amplifies.
        for (w, (weighted, raw)) in ice
            .data()
            .iter()
            .zip(expect.iter().zip(clean.data().iter()))
        {
            assert!(*w <= 1.0 && weighted.abs() <= raw.abs() + 1e-15);
        }
    }

    #[test]
    fn measure_snr_unit_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signal = Micrograph::new(
            Array2::from_shape_fn((512, 512), |_| rng.gen_range(-1.7320508..1.7320508)),
            1.0,
        )
        .unwrap();
        let dist = Normal::new(0.0, signal.mean_var().1.sqrt()).unwrap();
        let noisy = Micrograph::new(
            signal.data().mapv(|v| v + dist.sample(&mut rng)),
            1.0,
        )
        .unwrap();
        let snr = measure_snr(&signal, &noisy).unwrap();
        assert!((snr - 1.0).abs() < 0.02, "snr {snr}");
    }

    #[test]
    fn measure_snr_zero_noise_is_error() {
        let m = phantom(32, 32);
        let err = measure_snr(&m, &m.clone()).unwrap_err();
        assert!(err.to_string().contains("infinite SNR"));
    }

    #[test]
    fn measure_snr_scale_invariant() {
        let signal = phantom(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = add_noise(
            &signal,
            &NoiseSpec {
                model: NoiseModel::Gaussian,
                target_snr: 0.5,
                mix_ratio: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        let s2 = Micrograph::new(signal.data().mapv(|v| 2.0 * v), 1.0).unwrap();
        let n2 = Micrograph::new(noisy.data().mapv(|v| 2.0 * v), 1.0).unwrap();
        let a = measure_snr(&signal, &noisy).unwrap();
        let b = measure_snr(&s2, &n2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gaussian_noise_hits_target_snr() {
        let signal = phantom(512, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NoiseSpec {
            model: NoiseModel::Gaussian,
            target_snr: 0.1,
            mix_ratio: 0.0,
        };
        let noisy = add_noise(&signal, &spec, &mut rng).unwrap();
        let snr = measure_snr(&signal, &noisy).unwrap();
        assert!((0.09..=0.11).contains(&snr), "snr {snr}");
    }

    #[test]
    fn huge_target_snr_is_identity_limit() {
        let signal = phantom(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NoiseSpec {
            model: NoiseModel::Gaussian,
            target_snr: 1e9,
            mix_ratio: 0.0,
        };
        let noisy = add_noise(&signal, &spec, &mut rng).unwrap();
        let scale = signal.data().iter().fold(0f64, |a, &v| a.max(v.abs()));
        for (a, b) in noisy.data().iter().zip(signal.data().iter()) {
            assert!((a - b).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn poisson_counts_variance_matches_mean() {
        let values = Array2::from_elem((1000, 1000), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let counts = draw_poisson_counts(&values, 100.0, &mut rng);
        let (mean, var) = mean_var(counts.iter().copied());
        assert!((mean - 100.0).abs() <= 2.0, "mean {mean}");
        assert!((var - mean).abs() <= 0.02 * mean, "var {var} mean {mean}");
    }

    #[test]
    fn poisson_noise_hits_target_snr() {
        let signal = phantom(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = NoiseSpec {
            model: NoiseModel::Poisson,
            target_snr: 0.1,
            mix_ratio: 1.0,
        };
        let noisy = add_noise(&signal, &spec, &mut rng).unwrap();
        let snr = measure_snr(&signal, &noisy).unwrap();
        assert!((0.09..=0.11).contains(&snr), "snr {snr}");
    }

    #[test]
    fn poisson_gaussian_mixture_hits_target_snr() {
        let signal = phantom(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = NoiseSpec {
            model: NoiseModel::PoissonGaussian,
            target_snr: 0.2,
            mix_ratio: 0.5,
        };
        let noisy = add_noise(&signal, &spec, &mut rng).unwrap();
        let snr = measure_snr(&signal, &noisy).unwrap();
        // Two mechanisms compound their calibration error.
        assert!((0.17..=0.23).contains(&snr), "snr {snr}");
    }

    #[test]
    fn poisson_on_constant_image_is_error() {
        let m = Micrograph::new(Array2::from_elem((32, 32), 5.0), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NoiseSpec {
            model: NoiseModel::Poisson,
            target_snr: 0.1,
            mix_ratio: 1.0,
        };
        let err = add_noise(&m, &spec, &mut rng).unwrap_err();
        assert!(err.to_string().contains("degenerate signal for Poisson"));
    }

    #[test]
    fn noise_is_seed_deterministic_and_pure() {
        let signal = phantom(64, 64);
        let before = signal.data().clone();
        let spec = NoiseSpec {
            model: NoiseModel::PoissonGaussian,
            target_snr: 0.5,
            mix_ratio: 0.3,
        };
        let a = add_noise(&signal, &spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let b = add_noise(&signal, &spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(signal.data(), &before);
    }

    #[test]
    fn mask_empty_layout_is_zero() {
        let layout = SpecimenLayout {
            height: 32,
            width: 32,
            placements: vec![],
            shortfall: 0,
        };
        let mask = make_particle_mask(&layout, &[blob(8, 1.5)], 0.1).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_small_threshold_covers_support() {
        // As threshold_frac -> 0+ the mask approaches the projection's
        // support footprint.
        let v = blob(16, 2.0);
        let layout = SpecimenLayout {
            height: 48,
            width: 48,
            placements: vec![Placement {
                rotation: Matrix3::identity(),
                translation: [23.5, 23.5],
                conformation_index: 0,
            }],
            shortfall: 0,
        };
        let mask = make_particle_mask(&layout, &[v.clone()], 1e-9).unwrap();
        let patch = project_particle(&v, &Matrix3::identity());
        for y in 0..48usize {
            for x in 0..48usize {
                let inside = (16..32).contains(&y) && (16..32).contains(&x);
                let expect = if inside && patch[[y - 16, x - 16]] > 0.0 { 1.0 } else { 0.0 };
                assert_eq!(mask.data()[[y, x]], expect, "at ({x}, {y})");
            }
        }
    }

    #[test]
    fn mask_disjoint_particles_area_adds() {
        let v = blob(16, 2.0);
        let mk = |centers: &[[f64; 2]]| SpecimenLayout {
            height: 96,
            width: 96,
            placements: centers
                .iter()
                .map(|&c| Placement {
                    rotation: Matrix3::identity(),
                    translation: c,
                    conformation_index: 0,
                })
                .collect(),
            shortfall: 0,
        };
        let both = make_particle_mask(&mk(&[[24.5, 24.5], [70.5, 70.5]]), &[v.clone()], 0.3).unwrap();
        let a = make_particle_mask(&mk(&[[24.5, 24.5]]), &[v.clone()], 0.3).unwrap();
        let b = make_particle_mask(&mk(&[[70.5, 70.5]]), &[v], 0.3).unwrap();
        let area = |m: &Micrograph| m.data().iter().filter(|&&x| x == 1.0).count();
        assert_eq!(area(&both), area(&a) + area(&b));
        assert!(both.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn binarize_is_idempotent() {
        let v = blob(16, 2.0);
        let patch = project_particle(&v, &Matrix3::identity());
        for frac in [0.1, 0.5, 0.9] {
            let mask = binarize(&patch, frac);
            for frac2 in [0.1, 0.5, 0.9] {
                assert_eq!(binarize(&mask, frac2), mask);
            }
        }
    }

    #[test]
    fn intermediate_input_zero_frac_is_identity() {
        let m = phantom(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = intermediate_input(&m, 0.0, &mut rng).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn intermediate_input_preserves_mean() {
        let m = phantom(1024, 1024);
        let (mean_in, var) = m.mean_var();
        let std = var.sqrt();
        let bound = 3.0 * std / 1024.0; // 3 sigma / sqrt(H*W)
        let a = intermediate_input(&m, 1.0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let b = intermediate_input(&m, 1.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        assert_ne!(a.data(), b.data());
        for out in [&a, &b] {
            let (mean_out, _) = out.mean_var();
            assert!((mean_out - mean_in).abs() < bound, "shift {}", mean_out - mean_in);
        }
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(512.0), "512");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-1.5), "-1.5");
        assert_eq!(fmt_sig9(15234.567), "15234.567");
        assert_eq!(fmt_sig9(0.123456789), "0.123456789");
        assert_eq!(fmt_sig9(1.0e12), "1.00000000e+12");
    }

    #[test]
    fn annotation_tsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let set = AnnotationSet {
            height: 128,
            width: 128,
            particles: (0..5)
                .map(|i| ParticleAnnotation {
                    center: [10.25 + i as f64 * 20.0, 100.0 - i as f64 * 15.5],
                    rotation: sample_rotation(&mut rng),
                    conformation_index: i % 2,
                    defocus: 15000.0 + i as f64,
                })
                .collect(),
            ctf: CtfParams::standard(15000.0, 1.0),
            ice: flat_ice(),
        };
        set.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        let mut buf = Vec::new();
        writeln!(&mut buf, "{}", ANNOTATION_TSV_HEADER).unwrap();
        write_annotation_rows(&mut buf, "mic_0000", &set).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let rows = read_annotations_tsv(&path).unwrap();
        assert_eq!(rows.len(), 5);
        for (row, p) in rows.iter().zip(set.particles.iter()) {
            assert_eq!(row.mic_id, "mic_0000");
            assert!((row.center[0] - p.center[0]).abs() < 1e-6);
            assert!((row.center[1] - p.center[1]).abs() < 1e-6);
            assert!(is_rotation(&row.rotation, 1e-6));
            assert_eq!(row.conformation_index, p.conformation_index);
            assert!((row.defocus - p.defocus).abs() < 1e-3);
        }
    }

    #[test]
    fn annotation_validation_rejects_out_of_bounds_center() {
        let set = AnnotationSet {
            height: 64,
            width: 64,
            particles: vec![ParticleAnnotation {
                center: [70.0, 10.0],
                rotation: Matrix3::identity(),
                conformation_index: 0,
                defocus: 10000.0,
            }],
            ctf: CtfParams::standard(10000.0, 1.0),
            ice: flat_ice(),
        };
        assert!(set.validate().is_err());
    }
}
