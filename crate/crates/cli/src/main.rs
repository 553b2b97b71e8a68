//! `cryosim`: generate annotated synthetic cryo-EM datasets and score
//! picking/pose results against them.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cryosim_cli::config::parse_config;
use cryosim_cli::pipeline::generate_dataset;
use cryosim_cli::resolve_workers;
use cryosim_core::contrastive::{
    mask_nce_loss, nce_gradient, nce_loss, reference_encoder, sample_patches_masked,
};
use cryosim_core::evalkit::{
    align_rotations, auprc, fsc, match_picks, pose_supervision_loss, pr_curve, read_picks_tsv,
    read_poses_tsv, resolution_at_threshold, rotation_error, FscCurve, LabeledPick, Pose,
};
use cryosim_core::mrc;
use cryosim_core::optics::{ctf_value, wavelength_from_voltage, CtfParams};
use cryosim_core::recon::{fbp_reconstruct, split_half_sets, Projection, ProjectionStack};
use cryosim_core::synthesis::read_annotations_tsv;

#[derive(Parser)]
#[command(
    name = "cryosim",
    version,
    about = "Physics-based cryo-EM dataset synthesis and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an annotated synthetic dataset from a config file.
    Generate {
        /// Dataset config (flat `section.key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: config, then $CRYOSIM_WORKERS, then all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a radial CTF profile as TSV (g, value).
    Ctf {
        /// Defocus in Angstrom (positive = underfocus).
        #[arg(long)]
        defocus_a: f64,
        #[arg(long, default_value_t = 300.0)]
        kv: f64,
        #[arg(long, default_value_t = 2.7)]
        cs_mm: f64,
        #[arg(long, default_value_t = 0.1)]
        amplitude_contrast: f64,
        #[arg(long, default_value_t = 0.0)]
        phase_shift_rad: f64,
        #[arg(long, default_value_t = 1.0)]
        pixel_size_a: f64,
        /// Number of profile samples from 0 to Nyquist.
        #[arg(long, default_value_t = 128)]
        points: usize,
    },
    /// Score picks against ground-truth annotations (AUPRC + PR curve).
    EvalPicks {
        /// Pick TSV: mic_id, cx, cy, confidence.
        #[arg(long)]
        picks: PathBuf,
        /// Annotation TSV produced by `generate`.
        #[arg(long)]
        annotations: PathBuf,
        /// Match radius in pixels.
        #[arg(long)]
        radius: f64,
        /// Keep only the highest-confidence N picks before scoring.
        #[arg(long)]
        top: Option<usize>,
        /// Write the PR curve here instead of stdout.
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
    /// Compare predicted poses against ground truth; optional half-map FSC.
    EvalPoses {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Skip the rigid rotation alignment before the angular error.
        #[arg(long)]
        no_align: bool,
        /// First half-map MRC for an FSC resolution readout.
        #[arg(long, requires = "half2")]
        half1: Option<PathBuf>,
        /// Second half-map MRC.
        #[arg(long, requires = "half1")]
        half2: Option<PathBuf>,
        /// FSC threshold for the resolution readout.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the FSC curve TSV here.
        #[arg(long)]
        fsc_out: Option<PathBuf>,
    },
    /// Reconstruct a volume from a particle stack with known poses.
    Fbp {
        /// Particle stack (MRC, NZ = frame count).
        #[arg(long)]
        stack: PathBuf,
        /// Pose TSV matching the stack order.
        #[arg(long)]
        poses: PathBuf,
        /// Output volume MRC.
        #[arg(long)]
        out: PathBuf,
        /// Also reconstruct two half-sets and report their FSC.
        #[arg(long)]
        halves: bool,
        /// Seed for the half-set split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the half-set FSC curve TSV here.
        #[arg(long)]
        fsc_out: Option<PathBuf>,
    },
    /// Sample mask-guided query coordinates (class, cx, cy TSV).
    MaskSample {
        /// Binary mask MRC (0/1).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 256)]
        queries: usize,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the TSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the mask-guided contrastive loss on an image pair and check
    /// the analytic gradient against finite differences.
    LossCheck {
        /// Noisy intermediate image (queries).
        #[arg(long)]
        inter: PathBuf,
        /// Translated/synthetic image (positives and negatives).
        #[arg(long)]
        syn: PathBuf,
        /// Binary particle-background mask.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 64)]
        queries: usize,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            config,
            seed,
            workers,
            out,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.workers = resolve_workers(workers, cfg.workers);
            let manifest = generate_dataset(&cfg)?;
            println!(
                "wrote {} artifacts for {} micrographs to {}",
                manifest.rows.len(),
                cfg.count,
                cfg.out_dir.display()
            );
            println!("manifest: {}", manifest.path.display());
            Ok(())
        }
        Command::Ctf {
            defocus_a,
            kv,
            cs_mm,
            amplitude_contrast,
            phase_shift_rad,
            pixel_size_a,
            points,
        } => {
            if points < 2 {
                bail!("--points must be at least 2");
            }
            let params = CtfParams {
                amplitude_contrast,
                lambda: wavelength_from_voltage(kv)?,
                defocus: defocus_a,
                cs: cs_mm * 1e7,
                phase_shift: phase_shift_rad,
                pixel_size: pixel_size_a,
            };
            params.validate()?;
            let g_max = 1.0 / (2.0 * pixel_size_a);
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            writeln!(out, "g_per_a\tctf")?;
            for i in 0..points {
                let g = g_max * i as f64 / (points - 1) as f64;
                writeln!(out, "{:.6}\t{:.9}", g, ctf_value(&params, g))?;
            }
            Ok(())
        }
        Command::EvalPicks {
            picks,
            annotations,
            radius,
            top,
            curve_out,
        } => {
            let mut all_picks = read_picks_tsv(&picks)?;
            let gt_rows = read_annotations_tsv(&annotations)?;
            if let Some(n) = top {
                all_picks.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());
                all_picks.truncate(n);
            }
            let total_gt = gt_rows.len();
            if total_gt == 0 {
                bail!("annotation file has no particles");
            }
            let mut gt_by_mic: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
            for row in &gt_rows {
                gt_by_mic.entry(row.mic_id.clone()).or_default().push(row.center);
            }
            let mut picks_by_mic: BTreeMap<String, Vec<cryosim_core::evalkit::Pick>> =
                BTreeMap::new();
            for (mic, pick) in all_picks {
                picks_by_mic.entry(mic).or_default().push(pick);
            }
            let mut labeled: Vec<LabeledPick> = Vec::new();
            for (mic, mic_picks) in &picks_by_mic {
                let empty = Vec::new();
                let gt = gt_by_mic.get(mic).unwrap_or(&empty);
                labeled.extend(match_picks(mic_picks, gt, radius)?.labeled);
            }
            let curve = pr_curve(&labeled, total_gt)?;
            println!("auprc\t{:.6}", auprc(&curve));
            let mut body = String::from("threshold\tprecision\trecall\n");
            for p in &curve {
                body.push_str(&format!(
                    "{:.6}\t{:.6}\t{:.6}\n",
                    p.threshold, p.precision, p.recall
                ));
            }
            match curve_out {
                Some(path) => std::fs::write(&path, body)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{body}"),
            }
            Ok(())
        }
        Command::EvalPoses {
            pred,
            gt,
            no_align,
            half1,
            half2,
            threshold,
            fsc_out,
        } => {
            let pred_poses = read_poses_tsv(&pred)?;
            let gt_poses = read_poses_tsv(&gt)?;
            let aligned: Vec<Pose> = if no_align {
                pred_poses.clone()
            } else {
                let r = align_rotations(&pred_poses, &gt_poses)?;
                pred_poses
                    .iter()
                    .map(|p| Pose {
                        rotation: r * p.rotation,
                        translation: p.translation,
                    })
                    .collect()
            };
            let rot = rotation_error(
                &aligned,
                &gt_poses,
                cryosim_core::nalgebra::Vector3::new(0.0, 0.0, 1.0),
            )?;
            let loss = pose_supervision_loss(&pred_poses, &gt_poses)?;
            println!("rot_rad\t{rot:.6}");
            println!("pose_loss\t{loss:.6}");
            if let (Some(h1), Some(h2)) = (half1, half2) {
                let v1 = mrc::read_volume(&h1)?;
                let v2 = mrc::read_volume(&h2)?;
                let curve = fsc(&v1, &v2)?;
                report_fsc(&curve, threshold, v1.voxel_size(), fsc_out.as_deref())?;
            }
            Ok(())
        }
        Command::Fbp {
            stack,
            poses,
            out,
            halves,
            seed,
            fsc_out,
        } => {
            let frames = mrc::read_stack(&stack)?;
            let pose_list = read_poses_tsv(&poses)?;
            if frames.len() != pose_list.len() {
                bail!(
                    "stack has {} frames but pose file has {} rows",
                    frames.len(),
                    pose_list.len()
                );
            }
            let side = frames
                .first()
                .map(|f| f.height())
                .ok_or_else(|| anyhow!("empty stack"))?;
            let stack = ProjectionStack {
                pixel_size: frames[0].pixel_size(),
                items: frames
                    .iter()
                    .zip(pose_list.iter())
                    .map(|(f, p)| Projection {
                        patch: f.data().clone(),
                        pose: *p,
                    })
                    .collect(),
            };
            let full = fbp_reconstruct(&stack, side)?;
            mrc::write_volume(&full, &out)?;
            println!("volume\t{}", out.display());
            if halves {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (a, b) = split_half_sets(&stack, &mut rng)?;
                let va = fbp_reconstruct(&a, side)?;
                let vb = fbp_reconstruct(&b, side)?;
                let stem = out.with_extension("");
                let path_a = PathBuf::from(format!("{}_half1.mrc", stem.display()));
                let path_b = PathBuf::from(format!("{}_half2.mrc", stem.display()));
                mrc::write_volume(&va, &path_a)?;
                mrc::write_volume(&vb, &path_b)?;
                println!("half1\t{}", path_a.display());
                println!("half2\t{}", path_b.display());
                let curve = fsc(&va, &vb)?;
                let default_fsc = PathBuf::from(format!("{}_fsc.tsv", stem.display()));
                report_fsc(
                    &curve,
                    0.5,
                    stack.pixel_size,
                    Some(fsc_out.as_deref().unwrap_or(&default_fsc)),
                )?;
            }
            Ok(())
        }
        Command::MaskSample {
            mask,
            queries,
            patch_size,
            seed,
            out,
        } => {
            let mask_img = mrc::read_micrograph(&mask)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = sample_patches_masked(&mask_img, queries, patch_size, &mut rng)?;
            let (short_p, short_b) = set.shortfall();
            if short_p > 0 || short_b > 0 {
                eprintln!(
                    "note: reduced to availability (particle -{short_p}, background -{short_b})"
                );
            }
            let mut body = String::from("class\tcx\tcy\n");
            for &(x, y) in &set.particle_queries {
                body.push_str(&format!("particle\t{x}\t{y}\n"));
            }
            for &(x, y) in &set.background_queries {
                body.push_str(&format!("background\t{x}\t{y}\n"));
            }
            match out {
                Some(path) => std::fs::write(&path, body)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{body}"),
            }
            Ok(())
        }
        Command::LossCheck {
            inter,
            syn,
            mask,
            queries,
            patch_size,
            layers,
            dim,
            tau,
            seed,
        } => {
            let inter_img = mrc::read_micrograph(&inter)?;
            let syn_img = mrc::read_micrograph(&syn)?;
            let mask_img = mrc::read_micrograph(&mask)?;
            if inter_img.data().dim() != syn_img.data().dim()
                || inter_img.data().dim() != mask_img.data().dim()
            {
                bail!("inter, syn, and mask images must share dimensions");
            }
            // Keep every sampled center in bounds at the coarsest pyramid
            // level.
            let needed = 10 * (1usize << layers.saturating_sub(1));
            let effective_patch = patch_size.max(needed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = sample_patches_masked(&mask_img, queries, effective_patch, &mut rng)?;
            let positions: Vec<(usize, usize)> = set
                .particle_queries
                .iter()
                .chain(set.background_queries.iter())
                .copied()
                .collect();
            let p_idx: Vec<usize> = (0..set.particle_queries.len()).collect();
            let b_idx: Vec<usize> = (set.particle_queries.len()..positions.len()).collect();
            let feat_inter = reference_encoder(&inter_img, &positions, layers, dim, seed)?;
            let feat_syn = reference_encoder(&syn_img, &positions, layers, dim, seed)?;
            let value = mask_nce_loss(&feat_inter, &feat_syn, &p_idx, &b_idx, tau)?;

            // Finite-difference check on a trimmed instance from the first
            // layer's features.
            let q = set.particle_queries.len().min(8);
            let k = set.background_queries.len().min(8);
            let rows = |m: &Array2<f64>, idx: &[usize]| -> Array2<f64> {
                let mut out = Array2::zeros((idx.len(), m.dim().1));
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).assign(&m.row(i));
                }
                out
            };
            let v = rows(&feat_inter.layers[0], &p_idx[..q]);
            let v_pos = rows(&feat_syn.layers[0], &p_idx[..q]);
            let v_neg = rows(&feat_syn.layers[0], &b_idx[..k]);
            let (gv, gp, gn) = nce_gradient(&v, &v_pos, &v_neg, tau)?;
            let max_grad = gv
                .iter()
                .chain(gp.iter())
                .chain(gn.iter())
                .fold(0f64, |a, &g| a.max(g.abs()));
            let h = 1e-5;
            let mut max_rel = 0f64;
            let mut probe = |m: &Array2<f64>, grads: &Array2<f64>, which: usize| -> Result<()> {
                for idx in 0..m.len() {
                    let (r, c) = (idx / m.dim().1, idx % m.dim().1);
                    let eval = |delta: f64| -> Result<f64> {
                        let mut alt = m.clone();
                        alt[[r, c]] += delta;
                        let loss = match which {
                            0 => nce_loss(&alt, &v_pos, &v_neg, tau),
                            1 => nce_loss(&v, &alt, &v_neg, tau),
                            _ => nce_loss(&v, &v_pos, &alt, tau),
                        }?;
                        Ok(loss)
                    };
                    let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                    max_rel = max_rel.max((grads[[r, c]] - fd).abs() / max_grad.max(1e-12));
                }
                Ok(())
            };
            probe(&v, &gv, 0)?;
            probe(&v_pos, &gp, 1)?;
            probe(&v_neg, &gn, 2)?;

            println!("metric\tvalue");
            println!("mask_nce\t{value:.6}");
            println!("grad_max_rel_err\t{max_rel:.3e}");
            println!("particle_queries\t{}", set.particle_queries.len());
            println!("background_queries\t{}", set.background_queries.len());
            Ok(())
        }
    }
}

fn report_fsc(
    curve: &FscCurve,
    threshold: f64,
    voxel_size: f64,
    out: Option<&std::path::Path>,
) -> Result<()> {
    for t in [threshold, 0.143] {
        let res = resolution_at_threshold(curve, t, voxel_size);
        println!(
            "fsc_resolution_shell@{t}\t{:.3}{}",
            res.shell,
            if res.crossed { "" } else { "\t(no crossing)" }
        );
        println!("fsc_resolution_a@{t}\t{:.3}", res.angstrom);
    }
    let mut body = String::from("shell\tfsc\n");
    for (r, v) in curve.values.iter().enumerate() {
        body.push_str(&format!("{r}\t{v:.6}\n"));
    }
    match out {
        Some(path) => {
            std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
            println!("fsc_curve\t{}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}
