//! Scoring for particle picking and pose estimation: greedy pick matching,
//! precision-recall and AUPRC, Fourier shell correlation with resolution
//! thresholds, rigid rotation alignment, angular error, and the direct
//! pose-supervision loss.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;
use rustfft::FftDirection;

use crate::fft;
use crate::specimen::is_rotation;
use crate::synthesis::fmt_sig9;
use crate::volume::DensityVolume;
use crate::{Error, Result};

/// One candidate particle pick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pick {
    /// Center `(x, y)` in pixels.
    pub center: [f64; 2],
    pub confidence: f64,
}

/// A pick labeled by matching, in descending-confidence order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPick {
    pub confidence: f64,
    pub is_true_positive: bool,
}

/// Matching outcome: labeled picks sorted by descending confidence plus the
/// count of unmatched ground-truth particles.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labeled: Vec<LabeledPick>,
    pub false_negatives: usize,
}

/// Greedy one-to-one matching in descending confidence order (ties keep
/// input order): a pick is a true positive iff an unmatched ground-truth
/// center lies within `radius`; the nearest one is consumed.
pub fn match_picks(picks: &[Pick], gt: &[[f64; 2]], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "match radius {radius} must be > 0"
        )));
    }
    let mut order: Vec<usize> = (0..picks.len()).collect();
    order.sort_by(|&a, &b| {
        picks[b]
            .confidence
            .partial_cmp(&picks[a].confidence)
            .expect("finite confidences")
    });
    let mut taken = vec![false; gt.len()];
    let r2 = radius * radius;
    let labeled = order
        .iter()
        .map(|&i| {
            let [px, py] = picks[i].center;
            let mut best: Option<(usize, f64)> = None;
            for (j, &[gx, gy]) in gt.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let d2 = (px - gx).powi(2) + (py - gy).powi(2);
                if d2 <= r2 && best.map_or(true, |(_, bd)| d2 < bd) {
                    best = Some((j, d2));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            LabeledPick {
                confidence: picks[i].confidence,
                is_true_positive: best.is_some(),
            }
        })
        .collect();
    let false_negatives = taken.iter().filter(|&&t| !t).count();
    Ok(MatchResult {
        labeled,
        false_negatives,
    })
}

/// One point of the precision-recall curve at threshold `tau_k`: the picks
/// with confidence >= `tau_k` are counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall at every distinct confidence, descending.
pub fn pr_curve(labeled: &[LabeledPick], total_gt: usize) -> Result<Vec<PrPoint>> {
    if total_gt == 0 {
        return Err(Error::InvalidParameter("total_gt must be >= 1".into()));
    }
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite"));
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == threshold {
            if sorted[i].is_true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_gt as f64,
        });
    }
    Ok(points)
}

/// Area under the precision-recall curve:
/// `sum_k Pr(k) (Re(k) - Re(k-1))` with `Re(0) = 0`.
pub fn auprc(curve: &[PrPoint]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for p in curve {
        area += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    area
}

/// Per-shell Fourier correlation of two equally sized volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FscCurve {
    /// Volume side length the curve was computed from.
    pub side: usize,
    /// Correlation per integer shell radius, length `side / 2`.
    pub values: Vec<f64>,
}

/// Fourier shell correlation: for every integer-radius shell,
/// `Re(sum F1 conj(F2)) / sqrt(sum |F1|^2 sum |F2|^2)`. Shells where both
/// energies vanish score 1; shells where exactly one vanishes score 0.
pub fn fsc(v1: &DensityVolume, v2: &DensityVolume) -> Result<FscCurve> {
    if v1.side() != v2.side() {
        return Err(Error::DimMismatch(format!(
            "volumes {} vs {}",
            v1.side(),
            v2.side()
        )));
    }
    let d = v1.side();
    let f1 = fft::fft3(&v1.data().mapv(|v| Complex::new(v, 0.0)), FftDirection::Forward);
    let f2 = fft::fft3(&v2.data().mapv(|v| Complex::new(v, 0.0)), FftDirection::Forward);
    let n_shells = d / 2;
    let mut cross = vec![Complex::new(0.0, 0.0); n_shells];
    let mut e1 = vec![0.0f64; n_shells];
    let mut e2 = vec![0.0f64; n_shells];
    for kz in 0..d {
        let fz = fft::signed_freq(kz, d) as f64;
        for ky in 0..d {
            let fy = fft::signed_freq(ky, d) as f64;
            for kx in 0..d {
                let fx = fft::signed_freq(kx, d) as f64;
                let r = (fz * fz + fy * fy + fx * fx).sqrt().round() as usize;
                if r >= n_shells {
                    continue;
                }
                let (a, b) = (f1[[kz, ky, kx]], f2[[kz, ky, kx]]);
                cross[r] += a * b.conj();
                e1[r] += a.norm_sqr();
                e2[r] += b.norm_sqr();
            }
        }
    }
    let values = (0..n_shells)
        .map(|r| {
            let empty1 = e1[r] < 1e-20;
            let empty2 = e2[r] < 1e-20;
            match (empty1, empty2) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                (false, false) => cross[r].re / (e1[r] * e2[r]).sqrt(),
            }
        })
        .collect();
    Ok(FscCurve { side: d, values })
}

/// Resolution read off an FSC curve at a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    /// Interpolated crossing shell (frequency-voxel units).
    pub shell: f64,
    /// `side * voxel_size / shell`, in Angstrom.
    pub angstrom: f64,
    /// False when the curve never drops below the threshold; the Nyquist
    /// shell is reported in that case.
    pub crossed: bool,
}

/// Locates the first crossing below `threshold` by linear interpolation
/// between adjacent shells. Without a crossing, Nyquist (`side / 2`) is
/// reported with `crossed = false`.
pub fn resolution_at_threshold(curve: &FscCurve, threshold: f64, voxel_size: f64) -> Resolution {
    let d = curve.side as f64;
    let cross = curve.values.iter().position(|&v| v < threshold);
    match cross {
        Some(0) => Resolution {
            shell: 0.0,
            angstrom: f64::INFINITY,
            crossed: true,
        },
        Some(i) => {
            let (above, below) = (curve.values[i - 1], curve.values[i]);
            let shell = (i - 1) as f64 + (above - threshold) / (above - below);
            Resolution {
                shell,
                angstrom: d * voxel_size / shell,
                crossed: true,
            }
        }
        None => {
            let shell = d / 2.0;
            Resolution {
                shell,
                angstrom: d * voxel_size / shell,
                crossed: false,
            }
        }
    }
}

/// A particle pose: rotation plus in-plane translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: [f64; 2],
}

/// Solves `argmin_R sum_i || R_i_gt - R R_i_pred ||_F^2` in closed form via
/// the determinant-corrected polar factor of `sum_i R_i_gt R_i_pred^T`.
pub fn align_rotations(pred: &[Pose], gt: &[Pose]) -> Result<Matrix3<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::PoseCountMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParameter("need at least one pose".into()));
    }
    let mut m = Matrix3::<f64>::zeros();
    for (p, g) in pred.iter().zip(gt.iter()) {
        m += g.rotation * p.rotation.transpose();
    }
    let svd = m.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1.0) {
        return Err(Error::AlignmentIllConditioned);
    }
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let sign = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    Ok(u * correction * v_t)
}

/// Mean angular error between the images of `axis` under the ground-truth
/// and predicted rotations, in radians within [0, pi]. Apply
/// [`align_rotations`] to the predictions first.
pub fn rotation_error(pred: &[Pose], gt: &[Pose], axis: Vector3<f64>) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::PoseCountMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParameter("need at least one pose".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            let a = (g.rotation * axis).normalize();
            let b = (p.rotation * axis).normalize();
            a.dot(&b).clamp(-1.0, 1.0).acos()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Direct pose-supervision loss: batch mean of
/// `(1/9) ||R_gt - R_pred||_F^2 + (1/2) ||T_gt - T_pred||_1`.
pub fn pose_supervision_loss(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::PoseCountMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParameter("need at least one pose".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| {
            let dr = g.rotation - p.rotation;
            let fro2: f64 = dr.iter().map(|v| v * v).sum();
            let l1 = (g.translation[0] - p.translation[0]).abs()
                + (g.translation[1] - p.translation[1]).abs();
            fro2 / 9.0 + l1 / 2.0
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub const POSE_TSV_HEADER: &str = "idx\tr00\tr01\tr02\tr10\tr11\tr12\tr20\tr21\tr22\ttx\tty";

/// Writes a pose set as TSV (one header line, floats with 9 significant
/// digits).
pub fn write_poses_tsv<W: Write>(out: &mut W, poses: &[Pose]) -> Result<()> {
    writeln!(out, "{POSE_TSV_HEADER}")?;
    for (i, p) in poses.iter().enumerate() {
        let r = &p.rotation;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i,
            fmt_sig9(r[(0, 0)]),
            fmt_sig9(r[(0, 1)]),
            fmt_sig9(r[(0, 2)]),
            fmt_sig9(r[(1, 0)]),
            fmt_sig9(r[(1, 1)]),
            fmt_sig9(r[(1, 2)]),
            fmt_sig9(r[(2, 0)]),
            fmt_sig9(r[(2, 1)]),
            fmt_sig9(r[(2, 2)]),
            fmt_sig9(p.translation[0]),
            fmt_sig9(p.translation[1]),
        )?;
    }
    Ok(())
}

/// Reads a pose TSV written by [`write_poses_tsv`]; rotations are validated
/// to tolerance 1e-6.
pub fn read_poses_tsv(path: &Path) -> Result<Vec<Pose>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 12 {
            return Err(Error::AnnotationParse {
                line: idx + 1,
                msg: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::AnnotationParse {
                line: idx + 1,
                msg: format!("bad float {s:?}"),
            })
        };
        let mut r = [0.0; 9];
        for (k, slot) in r.iter_mut().enumerate() {
            *slot = parse(fields[1 + k])?;
        }
        let rotation = Matrix3::from_row_slice(&r);
        if !is_rotation(&rotation, 1e-6) {
            return Err(Error::AnnotationParse {
                line: idx + 1,
                msg: "rotation is not orthogonal with det 1".into(),
            });
        }
        poses.push(Pose {
            rotation,
            translation: [parse(fields[10])?, parse(fields[11])?],
        });
    }
    Ok(poses)
}

pub const PICK_TSV_HEADER: &str = "mic_id\tcx\tcy\tconfidence";

/// Reads picks grouped by micrograph id from a TSV with header
/// `mic_id  cx  cy  confidence`.
pub fn read_picks_tsv(path: &Path) -> Result<Vec<(String, Pick)>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut picks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::AnnotationParse {
                line: idx + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::AnnotationParse {
                line: idx + 1,
                msg: format!("bad float {s:?}"),
            })
        };
        picks.push((
            fields[0].to_string(),
            Pick {
                center: [parse(fields[1])?, parse(fields[2])?],
                confidence: parse(fields[3])?,
            },
        ));
    }
    Ok(picks)
}
