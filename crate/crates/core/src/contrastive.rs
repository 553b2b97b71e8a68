//! Mask-guided patch sampling and the patch-wise contrastive loss kernels.
//!
//! Queries come from the noisy intermediate image's features, positives from
//! the translated image's features at the same positions, and negatives from
//! the translated image's features at opposite-mask-label positions, summed
//! over encoder layers. The kernels operate on L2-normalized feature rows; a
//! deterministic multi-scale random-projection encoder is provided so the
//! losses can be exercised without a trained network.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::volume::Micrograph;
use crate::{Error, Result};

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.07;
/// Contrastive-term weight used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Queries per class used when none is configured.
pub const DEFAULT_QUERIES_PER_CLASS: usize = 256;

/// Mask-labeled query coordinates for one micrograph, plus per-query
/// negative index lists into the opposite-label pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSampleSet {
    pub patch_size: usize,
    /// `(x, y)` centers with mask label 1.
    pub particle_queries: Vec<(usize, usize)>,
    /// `(x, y)` centers with mask label 0.
    pub background_queries: Vec<(usize, usize)>,
    /// Per particle query: indices into `background_queries`.
    pub particle_negatives: Vec<Vec<usize>>,
    /// Per background query: indices into `particle_queries`.
    pub background_negatives: Vec<Vec<usize>>,
    pub requested_per_class: usize,
}

impl PatchSampleSet {
    /// Queries short of the request, per class (particle, background).
    pub fn shortfall(&self) -> (usize, usize) {
        (
            self.requested_per_class - self.particle_queries.len(),
            self.requested_per_class - self.background_queries.len(),
        )
    }
}

/// Draws `q_per_class` query centers per mask class with grid-stratified
/// sampling: the image is tiled into `ceil(sqrt(q))^2` cells and candidates
/// are drawn round-robin, uniformly without replacement within each
/// occupied cell. Centers keep `patch_size / 2` clear of the borders. A
/// class with fewer candidates than requested is reduced to availability
/// (reported via [`PatchSampleSet::shortfall`]); a class with none is an
/// error.
pub fn sample_patches_masked(
    mask: &Micrograph,
    q_per_class: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<PatchSampleSet> {
    if q_per_class == 0 || patch_size == 0 {
        return Err(Error::InvalidParameter(
            "q_per_class and patch_size must be positive".into(),
        ));
    }
    let (h, w) = mask.data().dim();
    let half = patch_size / 2;
    if 2 * half >= w || 2 * half >= h {
        return Err(Error::InvalidParameter(format!(
            "patch size {patch_size} too large for {h}x{w} mask"
        )));
    }

    let grid = (q_per_class as f64).sqrt().ceil() as usize;
    let cell_of = |x: usize, y: usize| -> usize {
        let cx = (x * grid / w).min(grid - 1);
        let cy = (y * grid / h).min(grid - 1);
        cy * grid + cx
    };

    // Bucket candidate centers per cell, separately per class.
    let mut particle_cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); grid * grid];
    let mut background_cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); grid * grid];
    for y in half..h - half {
        for x in half..w - half {
            let cell = cell_of(x, y);
            if mask.data()[[y, x]] >= 0.5 {
                particle_cells[cell].push((x, y));
            } else {
                background_cells[cell].push((x, y));
            }
        }
    }

    let draw = |cells: &mut [Vec<(usize, usize)>], rng: &mut dyn rand::RngCore| {
        let mut picked = Vec::with_capacity(q_per_class);
        while picked.len() < q_per_class {
            let before = picked.len();
            for cell in cells.iter_mut() {
                if picked.len() == q_per_class {
                    break;
                }
                if cell.is_empty() {
                    continue;
                }
                let k = rng.gen_range(0..cell.len());
                picked.push(cell.swap_remove(k));
            }
            if picked.len() == before {
                break; // every cell exhausted
            }
        }
        picked
    };

    if particle_cells.iter().all(|c| c.is_empty()) {
        return Err(Error::EmptyMaskClass("particle"));
    }
    if background_cells.iter().all(|c| c.is_empty()) {
        return Err(Error::EmptyMaskClass("background"));
    }
    let particle_queries = draw(&mut particle_cells, rng);
    let background_queries = draw(&mut background_cells, rng);

    // Every query's negatives are the whole opposite-label query set.
    let all_bg: Vec<usize> = (0..background_queries.len()).collect();
    let all_pt: Vec<usize> = (0..particle_queries.len()).collect();
    Ok(PatchSampleSet {
        patch_size,
        particle_negatives: vec![all_bg; particle_queries.len()],
        background_negatives: vec![all_pt; background_queries.len()],
        particle_queries,
        background_queries,
        requested_per_class: q_per_class,
    })
}

/// Multi-layer features: one `(n_positions, dim)` matrix of L2-normalized
/// rows per encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub layers: Vec<Array2<f64>>,
}

impl FeatureSet {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn position_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.dim().0)
    }
}

fn check_unit_rows(m: &Array2<f64>) -> Result<()> {
    for row in m.outer_iter() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::FeatureNotNormalized(norm));
        }
    }
    Ok(())
}

/// Loss term for one query given its positive/negative similarities already
/// divided by the temperature: `-log softmax` with max subtraction.
pub(crate) fn nce_term(s_pos: f64, s_neg: &[f64]) -> f64 {
    let m = s_neg.iter().fold(s_pos, |a, &v| a.max(v));
    let denom: f64 = (s_pos - m).exp() + s_neg.iter().map(|&v| (v - m).exp()).sum::<f64>();
    (m - s_pos) + denom.ln()
}

/// Patch-wise NCE cross-entropy over `Q` queries against `K` shared
/// negatives. All rows must be unit-norm (tolerance 1e-3).
pub fn nce_loss(
    v: &Array2<f64>,
    v_pos: &Array2<f64>,
    v_neg: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    validate_nce_inputs(v, v_pos, v_neg, tau)?;
    let mut total = 0.0;
    for (q, vq) in v.outer_iter().enumerate() {
        let s_pos = vq.dot(&v_pos.row(q)) / tau;
        let s_neg: Vec<f64> = v_neg.outer_iter().map(|nk| vq.dot(&nk) / tau).collect();
        total += nce_term(s_pos, &s_neg);
    }
    Ok(total)
}

fn validate_nce_inputs(
    v: &Array2<f64>,
    v_pos: &Array2<f64>,
    v_neg: &Array2<f64>,
    tau: f64,
) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau {tau} must be > 0")));
    }
    if v.dim() != v_pos.dim() || v.dim().1 != v_neg.dim().1 {
        return Err(Error::DimMismatch(format!(
            "queries {:?}, positives {:?}, negatives {:?}",
            v.dim(),
            v_pos.dim(),
            v_neg.dim()
        )));
    }
    if v.dim().0 == 0 || v_neg.dim().0 == 0 {
        return Err(Error::InvalidParameter(
            "need at least one query and one negative".into(),
        ));
    }
    check_unit_rows(v)?;
    check_unit_rows(v_pos)?;
    check_unit_rows(v_neg)?;
    Ok(())
}

/// Analytic gradient of [`nce_loss`] with respect to every input vector.
/// Returns `(grad_v, grad_v_pos, grad_v_neg)` with the input shapes.
pub fn nce_gradient(
    v: &Array2<f64>,
    v_pos: &Array2<f64>,
    v_neg: &Array2<f64>,
    tau: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    validate_nce_inputs(v, v_pos, v_neg, tau)?;
    let (q_count, dim) = v.dim();
    let k_count = v_neg.dim().0;
    let mut grad_v = Array2::zeros((q_count, dim));
    let mut grad_pos = Array2::zeros((q_count, dim));
    let mut grad_neg = Array2::zeros((k_count, dim));

    for (q, vq) in v.outer_iter().enumerate() {
        let s_pos = vq.dot(&v_pos.row(q)) / tau;
        let s_neg: Vec<f64> = v_neg.outer_iter().map(|nk| vq.dot(&nk) / tau).collect();
        let m = s_neg.iter().fold(s_pos, |a, &x| a.max(x));
        let e_pos = (s_pos - m).exp();
        let e_neg: Vec<f64> = s_neg.iter().map(|&x| (x - m).exp()).collect();
        let denom = e_pos + e_neg.iter().sum::<f64>();
        let p_pos = e_pos / denom;

        // d loss_q / d s_pos = p_pos - 1; d loss_q / d s_k = p_k.
        for d in 0..dim {
            let mut acc = (p_pos - 1.0) * v_pos[[q, d]];
            for (k, &ek) in e_neg.iter().enumerate() {
                acc += (ek / denom) * v_neg[[k, d]];
            }
            grad_v[[q, d]] = acc / tau;
            grad_pos[[q, d]] = (p_pos - 1.0) * vq[d] / tau;
        }
        for (k, &ek) in e_neg.iter().enumerate() {
            let pk = ek / denom;
            for d in 0..dim {
                grad_neg[[k, d]] += pk * vq[d] / tau;
            }
        }
    }
    Ok((grad_v, grad_pos, grad_neg))
}

/// The mask-guided contrastive loss: for every layer, particle-position
/// queries from `feat_inter` against same-position positives in `feat_syn`
/// and background-position negatives in `feat_syn`, plus the mirrored
/// background term.
pub fn mask_nce_loss(
    feat_inter: &FeatureSet,
    feat_syn: &FeatureSet,
    particle_positions: &[usize],
    background_positions: &[usize],
    tau: f64,
) -> Result<f64> {
    if feat_inter.layer_count() != feat_syn.layer_count() {
        return Err(Error::DimMismatch(format!(
            "layer counts {} vs {}",
            feat_inter.layer_count(),
            feat_syn.layer_count()
        )));
    }
    if particle_positions.is_empty() || background_positions.is_empty() {
        return Err(Error::InvalidParameter(
            "need positions in both classes".into(),
        ));
    }
    let mut total = 0.0;
    for (inter, syn) in feat_inter.layers.iter().zip(feat_syn.layers.iter()) {
        if inter.dim() != syn.dim() {
            return Err(Error::DimMismatch(format!(
                "layer shapes {:?} vs {:?}",
                inter.dim(),
                syn.dim()
            )));
        }
        let n = inter.dim().0;
        for &idx in particle_positions.iter().chain(background_positions) {
            if idx >= n {
                return Err(Error::DimMismatch(format!(
                    "position index {idx} outside feature set of {n}"
                )));
            }
        }
        let select = |m: &Array2<f64>, idx: &[usize]| -> Array2<f64> {
            let mut out = Array2::zeros((idx.len(), m.dim().1));
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row).assign(&m.row(i));
            }
            out
        };
        let q_p = select(inter, particle_positions);
        let pos_p = select(syn, particle_positions);
        let neg_p = select(syn, background_positions);
        total += nce_loss(&q_p, &pos_p, &neg_p, tau)?;

        let q_b = select(inter, background_positions);
        let pos_b = select(syn, background_positions);
        let neg_b = select(syn, particle_positions);
        total += nce_loss(&q_b, &pos_b, &neg_b, tau)?;
    }
    Ok(total)
}

/// Deterministic multi-scale encoder standing in for a trained feature
/// extractor: layer `l` takes the 8x8 patch around each position in an
/// `l`-times 2x mean-pooled pyramid (receptive field `2^l * 8` source
/// pixels), applies a seed-derived random linear map to `dim`, and
/// L2-normalizes.
pub fn reference_encoder(
    m: &Micrograph,
    positions: &[(usize, usize)],
    layers: usize,
    dim: usize,
    seed: u64,
) -> Result<FeatureSet> {
    const PATCH: usize = 8;
    const HALF: usize = PATCH / 2;
    if layers == 0 {
        return Ok(FeatureSet { layers: vec![] });
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("feature dim must be positive".into()));
    }

    // Mean-pool pyramid, level 0 = input.
    let mut pyramid: Vec<Array2<f64>> = vec![m.data().clone()];
    for l in 1..layers {
        let prev = &pyramid[l - 1];
        let (ph, pw) = prev.dim();
        let (nh, nw) = (ph / 2, pw / 2);
        if nh < PATCH || nw < PATCH {
            return Err(Error::InvalidParameter(format!(
                "image too small for {layers} pyramid levels"
            )));
        }
        let pooled = Array2::from_shape_fn((nh, nw), |(y, x)| {
            (prev[[2 * y, 2 * x]]
                + prev[[2 * y, 2 * x + 1]]
                + prev[[2 * y + 1, 2 * x]]
                + prev[[2 * y + 1, 2 * x + 1]])
                / 4.0
        });
        pyramid.push(pooled);
    }

    let mut feature_layers = Vec::with_capacity(layers);
    for (l, level) in pyramid.iter().enumerate() {
        let (lh, lw) = level.dim();
        // One fixed random projection per layer.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let proj = Array2::from_shape_fn((dim, PATCH * PATCH), |_| normal.sample(&mut rng));

        let mut rows = Array2::zeros((positions.len(), dim));
        for (i, &(x, y)) in positions.iter().enumerate() {
            let (cx, cy) = (x >> l, y >> l);
            if cx < HALF || cy < HALF || cx + HALF > lw || cy + HALF > lh {
                return Err(Error::PatchOutOfBounds { x, y, layer: l });
            }
            let mut flat = Array1::zeros(PATCH * PATCH);
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    flat[dy * PATCH + dx] = level[[cy - HALF + dy, cx - HALF + dx]];
                }
            }
            let f = proj.dot(&flat);
            let norm = f.dot(&f).sqrt();
            if norm < 1e-12 {
                rows[[i, 0]] = 1.0; // degenerate all-zero patch
            } else {
                rows.row_mut(i).assign(&(&f / norm));
            }
        }
        feature_layers.push(rows);
    }
    Ok(FeatureSet {
        layers: feature_layers,
    })
}

/// Value of the adversarial objective
/// `mean(log d_real) + mean(log(1 - d_fake))` for discriminator outputs in
/// (0, 1).
pub fn gan_objective_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidParameter("empty probability list".into()));
    }
    for &p in d_real.iter().chain(d_fake.iter()) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
    }
    let mean_real = d_real.iter().map(|p| p.ln()).sum::<f64>() / d_real.len() as f64;
    let mean_fake = d_fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(mean_real + mean_fake)
}

/// Total training objective: adversarial value plus `lambda` times the
/// contrastive loss.
pub fn total_objective(gan: f64, masknce: f64, lambda: f64) -> f64 {
    gan + lambda * masknce
}
