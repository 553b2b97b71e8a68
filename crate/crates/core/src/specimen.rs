//! Virtual-specimen construction: particle counts, uniform SO(3) poses,
//! non-overlapping placement, and projection into a clean micrograph.
//!
//! A specimen is a set of placed particle copies. Each copy carries a
//! rotation, a 2D projection-plane translation (the depth offset of a
//! particle is unobservable under orthogonal projection and is dropped),
//! and an index into the list of conformation volumes.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::volume::{DensityVolume, Micrograph};
use crate::{Error, Result};

/// Parameters controlling how many particles are placed and how close they
/// may get. Distances in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementConfig {
    /// Mean of the per-micrograph particle count.
    pub mu_n: f64,
    /// Standard deviation of the particle count.
    pub sigma_n: f64,
    /// Bounding-disc radius used for the overlap test.
    pub particle_radius: f64,
    /// Minimum center distance = `overlap_factor * 2 * particle_radius`.
    /// Values below 1 permit partial occlusion.
    pub overlap_factor: f64,
    /// Margin from the image border for particle centers.
    pub margin: f64,
    /// Consecutive rejected candidates before placement stops early.
    pub max_attempts_per_particle: usize,
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_n > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mu_n {} must be > 0",
                self.mu_n
            )));
        }
        if !(self.sigma_n >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_n {} must be >= 0",
                self.sigma_n
            )));
        }
        if !(self.particle_radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "particle radius {} must be > 0",
                self.particle_radius
            )));
        }
        if !(self.overlap_factor >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::InvalidParameter(
                "overlap factor and margin must be >= 0".into(),
            ));
        }
        if self.max_attempts_per_particle == 0 {
            return Err(Error::InvalidParameter(
                "max_attempts_per_particle must be positive".into(),
            ));
        }
        Ok(())
    }

    fn min_center_distance(&self) -> f64 {
        self.overlap_factor * 2.0 * self.particle_radius
    }
}

/// One placed particle copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub rotation: Matrix3<f64>,
    /// Projection-plane center `(x, y)` in pixels.
    pub translation: [f64; 2],
    pub conformation_index: usize,
}

/// All placements for one micrograph.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenLayout {
    pub height: usize,
    pub width: usize,
    pub placements: Vec<Placement>,
    /// Particles requested but not placed before the attempt budget ran out.
    pub shortfall: usize,
}

/// Draws a particle count from `Normal(mu_N, sigma_N^2)`, redrawing until
/// the value lies within two standard deviations of the mean, then rounds
/// and clamps to at least 1.
pub fn sample_particle_count(cfg: &PlacementConfig, rng: &mut impl Rng) -> usize {
    if cfg.sigma_n == 0.0 {
        return (cfg.mu_n.round().max(1.0)) as usize;
    }
    let dist = Normal::new(cfg.mu_n, cfg.sigma_n).expect("validated sigma");
    let (lo, hi) = (cfg.mu_n - 2.0 * cfg.sigma_n, cfg.mu_n + 2.0 * cfg.sigma_n);
    let value = std::iter::repeat_with(|| dist.sample(rng))
        .find(|v| (lo..=hi).contains(v))
        .expect("two-sigma window has positive mass");
    value.round().max(1.0) as usize
}

/// Draws a rotation uniformly from SO(3) via a unit quaternion built from
/// four independent standard normals.
pub fn sample_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q: [f64; 4] = [
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        ];
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if norm < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}

/// Places up to `n` particles by rejection sampling on the margin-inset
/// rectangle, accepting candidates no closer than the configured minimum
/// distance to every accepted center. Each accepted particle receives a
/// uniform SO(3) rotation and a conformation index uniform over
/// `n_conformations`. Stops early after `max_attempts_per_particle`
/// consecutive rejections; the unplaced remainder is reported as
/// `shortfall`, not an error.
pub fn place_particles(
    cfg: &PlacementConfig,
    dims: (usize, usize),
    n: usize,
    n_conformations: usize,
    rng: &mut impl Rng,
) -> Result<SpecimenLayout> {
    cfg.validate()?;
    if n_conformations == 0 {
        return Err(Error::InvalidParameter("need at least one conformation".into()));
    }
    let (height, width) = dims;
    let (x_lo, x_hi) = (cfg.margin, width as f64 - cfg.margin);
    let (y_lo, y_hi) = (cfg.margin, height as f64 - cfg.margin);
    if x_lo >= x_hi || y_lo >= y_hi {
        return Err(Error::ImageTooSmall);
    }

    let min_dist = cfg.min_center_distance();
    let min_dist_sq = min_dist * min_dist;
    let mut placements: Vec<Placement> = Vec::with_capacity(n);
    let mut consecutive_rejects = 0usize;
    while placements.len() < n {
        let cx = rng.gen_range(x_lo..x_hi);
        let cy = rng.gen_range(y_lo..y_hi);
        let ok = placements.iter().all(|p| {
            let dx = p.translation[0] - cx;
            let dy = p.translation[1] - cy;
            dx * dx + dy * dy >= min_dist_sq
        });
        if !ok {
            consecutive_rejects += 1;
            if consecutive_rejects >= cfg.max_attempts_per_particle {
                break;
            }
            continue;
        }
        consecutive_rejects = 0;
        placements.push(Placement {
            rotation: sample_rotation(rng),
            translation: [cx, cy],
            conformation_index: rng.gen_range(0..n_conformations),
        });
    }
    let shortfall = n - placements.len();
    Ok(SpecimenLayout {
        height,
        width,
        placements,
        shortfall,
    })
}

/// Trilinear sample of a volume at fractional voxel coordinates; points
/// outside the grid contribute zero.
pub(crate) fn trilinear(v: &DensityVolume, x: f64, y: f64, z: f64) -> f64 {
    let d = v.side() as isize;
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
    let data = v.data();
    let fetch = |zi: isize, yi: isize, xi: isize| -> f64 {
        if xi < 0 || yi < 0 || zi < 0 || xi >= d || yi >= d || zi >= d {
            0.0
        } else {
            data[[zi as usize, yi as usize, xi as usize]]
        }
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * fetch(z0 + dz, y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Projects a rotated particle along z: for each output pixel and each of D
/// depth steps, samples the volume at the inverse-rotated coordinates about
/// the volume center and sums. The patch side equals the volume side.
pub fn project_particle(v: &DensityVolume, rotation: &Matrix3<f64>) -> Array2<f64> {
    let d = v.side();
    let c = (d as f64 - 1.0) / 2.0;
    let inv = rotation.transpose();
    let mut patch = Array2::zeros((d, d));
    for py in 0..d {
        for px in 0..d {
            let mut acc = 0.0;
            for pz in 0..d {
                let r = Vector3::new(px as f64 - c, py as f64 - c, pz as f64 - c);
                let q = inv * r;
                acc += trilinear(v, q.x + c, q.y + c, q.z + c);
            }
            patch[[py, px]] = acc;
        }
    }
    patch
}

/// Adds a patch into a frame with its center at `(cx, cy)`, distributing
/// each patch pixel over the four neighboring frame pixels (bilinear splat).
pub(crate) fn splat_patch(frame: &mut Array2<f64>, patch: &Array2<f64>, cx: f64, cy: f64) {
    let (h, w) = frame.dim();
    let (ph, pw) = patch.dim();
    let ox = cx - (pw as f64 - 1.0) / 2.0;
    let oy = cy - (ph as f64 - 1.0) / 2.0;
    let (x0, y0) = (ox.floor(), oy.floor());
    let (fx, fy) = (ox - x0, oy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let weights = [
        (0isize, 0isize, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ];
    for (j, row) in patch.outer_iter().enumerate() {
        for (i, &value) in row.iter().enumerate() {
            if value == 0.0 {
                continue;
            }
            for &(ax, ay, wgt) in &weights {
                if wgt == 0.0 {
                    continue;
                }
                let xx = x0 + i as isize + ax;
                let yy = y0 + j as isize + ay;
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    frame[[yy as usize, xx as usize]] += value * wgt;
                }
            }
        }
    }
}

/// Composites all placed particle projections into one clean micrograph.
/// Every conformation must share the side length and voxel size of the
/// first; the output pixel size equals the voxel size.
pub fn composite_projection(
    layout: &SpecimenLayout,
    conformations: &[DensityVolume],
) -> Result<Micrograph> {
    let first = conformations
        .first()
        .ok_or_else(|| Error::InvalidParameter("need at least one conformation".into()))?;
    for v in conformations {
        if v.side() != first.side() || v.voxel_size() != first.voxel_size() {
            return Err(Error::DimMismatch(format!(
                "conformation {}@{} vs {}@{}",
                v.side(),
                v.voxel_size(),
                first.side(),
                first.voxel_size()
            )));
        }
    }
    let mut frame = Array2::zeros((layout.height, layout.width));
    for p in &layout.placements {
        let v = conformations.get(p.conformation_index).ok_or({
            Error::BadConformationIndex {
                index: p.conformation_index,
                count: conformations.len(),
            }
        })?;
        let patch = project_particle(v, &p.rotation);
        splat_patch(&mut frame, &patch, p.translation[0], p.translation[1]);
    }
    Micrograph::new(frame, first.voxel_size())
}

/// Checks the rotation invariants: orthogonality and unit determinant.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let gram = m * m.transpose();
    let mut max_dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram[(i, j)] - expect).abs());
        }
    }
    max_dev <= tol && (m.determinant() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_blob(d: usize, sigma: f64, voxel: f64) -> DensityVolume {
        let c = (d as f64 - 1.0) / 2.0;
        let data = Array3::from_shape_fn((d, d, d), |(z, y, x)| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            (-r2 / (2.0 * sigma * sigma)).exp()
        });
        DensityVolume::new(data, voxel).unwrap()
    }

    fn default_cfg() -> PlacementConfig {
        PlacementConfig {
            mu_n: 100.0,
            sigma_n: 10.0,
            particle_radius: 32.0,
            overlap_factor: 1.0,
            margin: 0.0,
            max_attempts_per_particle: 500,
        }
    }

    #[test]
    fn particle_count_degenerate_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PlacementConfig {
            sigma_n: 0.0,
            ..default_cfg()
        };
        for _ in 0..10 {
            assert_eq!(sample_particle_count(&cfg, &mut rng), 100);
        }
    }

    #[test]
    fn particle_count_two_sigma_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = default_cfg();
        for _ in 0..20_000 {
            let n = sample_particle_count(&cfg, &mut rng);
            assert!((80..=120).contains(&n), "count {n} outside [80, 120]");
        }
    }

    #[test]
    fn particle_count_clamps_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PlacementConfig {
            mu_n: 1.0,
            sigma_n: 5.0,
            ..default_cfg()
        };
        for _ in 0..5000 {
            assert!(sample_particle_count(&cfg, &mut rng) >= 1);
        }
    }

    #[test]
    fn rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = sample_rotation(&mut rng);
            assert!(is_rotation(&r, 1e-10));
        }
    }

    #[test]
    fn rotation_entrywise_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sum = Matrix3::<f64>::zeros();
        for _ in 0..n {
            sum += sample_rotation(&mut rng);
        }
        let mean = sum / n as f64;
        for i in 0..3 {
            for j in 0..3 {
                assert!(mean[(i, j)].abs() < 0.02, "mean[{i}{j}] = {}", mean[(i, j)]);
            }
        }
    }

    #[test]
    fn rotation_angle_matches_so3_density() {
        // Uniform SO(3) rotation angle has CDF (theta - sin theta) / pi.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut angles: Vec<f64> = (0..n)
            .map(|_| {
                let r = sample_rotation(&mut rng);
                ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
            })
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cdf = |t: f64| (t - t.sin()) / std::f64::consts::PI;
        let mut ks = 0.0f64;
        for (i, &t) in angles.iter().enumerate() {
            let f = cdf(t);
            ks = ks.max((f - i as f64 / n as f64).abs());
            ks = ks.max(((i + 1) as f64 / n as f64 - f).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn place_single_particle_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = PlacementConfig {
            margin: 40.0,
            ..default_cfg()
        };
        let layout = place_particles(&cfg, (256, 256), 1, 1, &mut rng).unwrap();
        assert_eq!(layout.placements.len(), 1);
        assert_eq!(layout.shortfall, 0);
        let [x, y] = layout.placements[0].translation;
        assert!((40.0..=216.0).contains(&x) && (40.0..=216.0).contains(&y));
    }

    #[test]
    fn placement_respects_min_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = place_particles(&default_cfg(), (1024, 1024), 50, 1, &mut rng).unwrap();
        assert_eq!(layout.placements.len(), 50);
        for (i, a) in layout.placements.iter().enumerate() {
            for b in &layout.placements[i + 1..] {
                let dx = a.translation[0] - b.translation[0];
                let dy = a.translation[1] - b.translation[1];
                assert!((dx * dx + dy * dy).sqrt() >= 64.0);
            }
        }
    }

    #[test]
    fn crowded_placement_reports_shortfall() {
        // Min distance 400 px on a 512x512 frame: disc packing admits at
        // most the four corners. Verify the returned layout exhaustively.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PlacementConfig {
            particle_radius: 200.0,
            margin: 0.0,
            max_attempts_per_particle: 2000,
            ..default_cfg()
        };
        let layout = place_particles(&cfg, (512, 512), 100, 1, &mut rng).unwrap();
        assert!(layout.placements.len() <= 4, "{} placed", layout.placements.len());
        assert_eq!(layout.shortfall, 100 - layout.placements.len());
        for (i, a) in layout.placements.iter().enumerate() {
            for b in &layout.placements[i + 1..] {
                let dx = a.translation[0] - b.translation[0];
                let dy = a.translation[1] - b.translation[1];
                assert!((dx * dx + dy * dy).sqrt() >= 400.0);
            }
        }
    }

    #[test]
    fn degenerate_frame_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PlacementConfig {
            margin: 300.0,
            ..default_cfg()
        };
        let err = place_particles(&cfg, (512, 512), 1, 1, &mut rng).unwrap_err();
        assert!(err.to_string().contains("image too small"));
    }

    #[test]
    fn identity_projection_is_z_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(0.0..1.0));
        let v = DensityVolume::new(data, 1.0).unwrap();
        let patch = project_particle(&v, &Matrix3::identity());
        let oracle = v.data().sum_axis(Axis(0));
        for (a, b) in patch.iter().zip(oracle.iter()) {
            assert_eq!(a, b, "lattice-aligned projection must be exact");
        }
    }

    #[test]
    fn spherical_phantom_projection_is_rotation_invariant() {
        // 4-sigma containment keeps edge clipping below the interpolation
        // error; the deviation is ~4e-4 at this size.
        let v = gaussian_blob(96, 12.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p1 = project_particle(&v, &sample_rotation(&mut rng));
        let p2 = project_particle(&v, &sample_rotation(&mut rng));
        let max = p1.iter().fold(0f64, |a, &x| a.max(x.abs()));
        let dev = p1
            .iter()
            .zip(p2.iter())
            .fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev <= 1e-3 * max, "relative deviation {}", dev / max);
    }

    #[test]
    fn projection_preserves_total_mass() {
        let v = gaussian_blob(24, 2.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let total: f64 = v.data().sum();
        for _ in 0..3 {
            let patch = project_particle(&v, &sample_rotation(&mut rng));
            let mass: f64 = patch.sum();
            assert!((mass - total).abs() <= 0.01 * total, "mass {mass} vs {total}");
        }
    }

    #[test]
    fn empty_layout_gives_zero_micrograph() {
        let layout = SpecimenLayout {
            height: 64,
            width: 64,
            placements: vec![],
            shortfall: 0,
        };
        let v = gaussian_blob(16, 2.0, 1.0);
        let m = composite_projection(&layout, &[v]).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn centered_particle_equals_padded_patch() {
        // Frame 128 and volume 32 are both even, so the patch origin is
        // integral and the splat reduces to direct placement.
        let v = gaussian_blob(32, 4.0, 1.0);
        let layout = SpecimenLayout {
            height: 128,
            width: 128,
            placements: vec![Placement {
                rotation: Matrix3::identity(),
                translation: [63.5, 63.5],
                conformation_index: 0,
            }],
            shortfall: 0,
        };
        let m = composite_projection(&layout, &[v.clone()]).unwrap();
        let patch = project_particle(&v, &Matrix3::identity());
        for y in 0..128 {
            for x in 0..128 {
                let expect = if (48..80).contains(&y) && (48..80).contains(&x) {
                    patch[[y - 48, x - 48]]
                } else {
                    0.0
                };
                assert_eq!(m.data()[[y, x]], expect);
            }
        }
    }

    #[test]
    fn composite_is_linear_in_the_layout() {
        let v = gaussian_blob(16, 2.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // Disjoint patch footprints: per-pixel sums have a single
        // contributor each, so the union is bit-identical to the sum.
        let centers_a = [[12.0, 12.0], [48.0, 12.0], [84.0, 12.0]];
        let centers_b = [[12.0, 60.0], [48.0, 60.0]];
        let mk = |rng: &mut ChaCha8Rng, centers: &[[f64; 2]]| SpecimenLayout {
            height: 96,
            width: 96,
            placements: centers
                .iter()
                .map(|&translation| Placement {
                    rotation: sample_rotation(rng),
                    translation,
                    conformation_index: 0,
                })
                .collect(),
            shortfall: 0,
        };
        let a = mk(&mut rng, &centers_a);
        let b = mk(&mut rng, &centers_b);
        let mut union = a.clone();
        union.placements.extend(b.placements.iter().cloned());
        let ma = composite_projection(&a, &[v.clone()]).unwrap();
        let mb = composite_projection(&b, &[v.clone()]).unwrap();
        let mu = composite_projection(&union, &[v.clone()]).unwrap();
        for ((x, y), z) in ma.data().iter().zip(mb.data().iter()).zip(mu.data().iter()) {
            assert_eq!(x + y, *z);
        }

        // Overlapping placements reassociate the per-pixel sums; the
        // results still agree to rounding.
        let c = mk(&mut rng, &[[40.0, 40.0], [46.0, 44.0]]);
        let d = mk(&mut rng, &[[43.0, 42.0]]);
        let mut union2 = c.clone();
        union2.placements.extend(d.placements.iter().cloned());
        let mc = composite_projection(&c, &[v.clone()]).unwrap();
        let md = composite_projection(&d, &[v.clone()]).unwrap();
        let mu2 = composite_projection(&union2, &[v]).unwrap();
        let max = mu2.data().iter().fold(0f64, |m, &x| m.max(x.abs()));
        for ((x, y), z) in mc.data().iter().zip(md.data().iter()).zip(mu2.data().iter()) {
            assert!((x + y - z).abs() <= 1e-12 * max);
        }
    }

    #[test]
    fn composite_rejects_bad_conformation_index() {
        let v = gaussian_blob(16, 2.0, 1.0);
        let layout = SpecimenLayout {
            height: 64,
            width: 64,
            placements: vec![Placement {
                rotation: Matrix3::identity(),
                translation: [32.0, 32.0],
                conformation_index: 3,
            }],
            shortfall: 0,
        };
        let err = composite_projection(&layout, &[v]).unwrap_err();
        assert!(err.to_string().contains("bad conformation index"));
    }

    #[test]
    fn same_seed_gives_identical_layout() {
        let cfg = default_cfg();
        let a = place_particles(&cfg, (512, 512), 20, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = place_particles(&cfg, (512, 512), 20, 3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    /// Brute-force oracle: voxel-accumulate every rotated copy into a 3D
    /// specimen grid, then sum along z.
    fn accumulate_then_project(
        layout: &SpecimenLayout,
        conformations: &[DensityVolume],
    ) -> Array2<f64> {
        let d = conformations[0].side();
        let c = (d as f64 - 1.0) / 2.0;
        let mut specimen = Array3::<f64>::zeros((d, layout.height, layout.width));
        for p in &layout.placements {
            let v = &conformations[p.conformation_index];
            let inv = p.rotation.transpose();
            let [tx, ty] = p.translation;
            let x_range = ((tx - c).floor().max(0.0) as usize)
                ..(((tx + c).ceil() as usize + 1).min(layout.width));
            let y_range = ((ty - c).floor().max(0.0) as usize)
                ..(((ty + c).ceil() as usize + 1).min(layout.height));
            for z in 0..d {
                for y in y_range.clone() {
                    for x in x_range.clone() {
                        let r = Vector3::new(x as f64 - tx, y as f64 - ty, z as f64 - c);
                        let q = inv * r;
                        specimen[[z, y, x]] += trilinear(v, q.x + c, q.y + c, q.z + c);
                    }
                }
            }
        }
        specimen.sum_axis(Axis(0))
    }

    #[test]
    fn composite_matches_accumulate_then_project_oracle() {
        let v = gaussian_blob(32, 4.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // Half-integer centers keep the patch origin integral, so the
        // comparison isolates the projection math from splat resampling.
        let layout = SpecimenLayout {
            height: 128,
            width: 128,
            placements: (0..3)
                .map(|i| Placement {
                    rotation: sample_rotation(&mut rng),
                    translation: [24.5 + 36.0 * i as f64, 30.5 + 30.0 * i as f64],
                    conformation_index: 0,
                })
                .collect(),
            shortfall: 0,
        };
        let fast = composite_projection(&layout, &[v.clone()]).unwrap();
        let oracle = accumulate_then_project(&layout, &[v]);
        let max = oracle.iter().fold(0f64, |a, &x| a.max(x.abs()));
        for (a, b) in fast.data().iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-4 * max, "{a} vs {b}");
        }
    }

    #[test]
    fn subpixel_splat_against_direct_sampling() {
        // With a fractional translation the splat is a bilinear
        // approximation of sampling the projection at shifted points;
        // a smooth blob keeps the two within a few percent of peak.
        let v = gaussian_blob(32, 4.0, 1.0);
        let layout = SpecimenLayout {
            height: 96,
            width: 96,
            placements: vec![Placement {
                rotation: Matrix3::identity(),
                translation: [47.3, 46.8],
                conformation_index: 0,
            }],
            shortfall: 0,
        };
        let fast = composite_projection(&layout, &[v.clone()]).unwrap();
        let oracle = accumulate_then_project(&layout, &[v]);
        let max = oracle.iter().fold(0f64, |a, &x| a.max(x.abs()));
        for (a, b) in fast.data().iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 0.02 * max, "{a} vs {b}");
        }
    }
}
