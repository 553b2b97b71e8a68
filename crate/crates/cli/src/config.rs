//! Flat-key dataset configuration.
//!
//! The file format is line-oriented `section.key = value` with `#` comments.
//! Unknown keys are rejected with the offending line number. `volume.path`
//! may repeat to list several conformation volumes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cryosim_core::contrastive::{DEFAULT_LAMBDA, DEFAULT_QUERIES_PER_CLASS, DEFAULT_TAU};
use cryosim_core::specimen::PlacementConfig;
use cryosim_core::synthesis::{NoiseModel, NoiseSpec};

/// Per-dataset CTF distribution: shared hardware constants plus a Gaussian
/// defocus spread sampled per micrograph.
#[derive(Debug, Clone, PartialEq)]
pub struct CtfDistribution {
    pub kv: f64,
    pub cs_mm: f64,
    pub amplitude_contrast: f64,
    pub phase_shift_rad: f64,
    pub mu_defocus_a: f64,
    pub sigma_defocus_a: f64,
}

/// Ice-gradient sampling ranges; the direction (linear) or center (radial)
/// is drawn per micrograph.
#[derive(Debug, Clone, PartialEq)]
pub struct IceRanges {
    pub kind: IceKind,
    pub min_weight_lo: f64,
    pub min_weight_hi: f64,
    pub blur_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IceKind {
    Linear,
    Radial,
}

/// Everything `generate` needs for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub volume_paths: Vec<PathBuf>,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// 0 = use the environment default / all cores.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub emit_noisy: bool,
    pub emit_intermediate: bool,
    pub augment_rotations: bool,
    pub placement: PlacementConfig,
    pub ctf: CtfDistribution,
    pub ice: IceRanges,
    pub noise: NoiseSpec,
    pub intermediate_std_frac: f64,
    pub mask_threshold_frac: f64,
    pub lambda: f64,
    pub tau: f64,
    pub queries_per_class: usize,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_paths.is_empty() {
            bail!("missing required key `volume.path`");
        }
        for p in &self.volume_paths {
            if !p.exists() {
                bail!("volume path {} does not exist", p.display());
            }
        }
        if self.count < 1 {
            bail!("dataset.count must be >= 1");
        }
        if self.width < 64 || self.height < 64 {
            bail!("dataset dims {}x{} below 64", self.width, self.height);
        }
        if self.ice.min_weight_lo > self.ice.min_weight_hi {
            bail!("ice.min_weight_lo exceeds ice.min_weight_hi");
        }
        if !(self.ice.min_weight_lo > 0.0 && self.ice.min_weight_hi <= 1.0) {
            bail!("ice min_weight range must lie in (0, 1]");
        }
        self.placement
            .validate()
            .map_err(|e| anyhow!("placement: {e}"))?;
        self.noise.validate().map_err(|e| anyhow!("noise: {e}"))?;
        if !(self.mask_threshold_frac > 0.0 && self.mask_threshold_frac < 1.0) {
            bail!("mask.threshold_frac outside (0, 1)");
        }
        if !(self.intermediate_std_frac >= 0.0) {
            bail!("noise.inter_std_frac must be >= 0");
        }
        Ok(())
    }
}

fn defaults() -> DatasetConfig {
    DatasetConfig {
        volume_paths: vec![],
        count: 0,
        width: 1024,
        height: 1024,
        seed: 0,
        workers: 0,
        out_dir: PathBuf::from("out"),
        emit_noisy: true,
        emit_intermediate: true,
        augment_rotations: false,
        placement: PlacementConfig {
            mu_n: 100.0,
            sigma_n: 10.0,
            particle_radius: 32.0,
            overlap_factor: 1.0,
            margin: 0.0,
            max_attempts_per_particle: 500,
        },
        ctf: CtfDistribution {
            kv: 300.0,
            cs_mm: 2.7,
            amplitude_contrast: 0.1,
            phase_shift_rad: 0.0,
            mu_defocus_a: 15000.0,
            sigma_defocus_a: 2000.0,
        },
        ice: IceRanges {
            kind: IceKind::Linear,
            min_weight_lo: 0.5,
            min_weight_hi: 1.0,
            blur_sigma: 20.0,
        },
        noise: NoiseSpec {
            model: NoiseModel::Gaussian,
            target_snr: 0.1,
            mix_ratio: 0.5,
        },
        intermediate_std_frac: 1.0,
        mask_threshold_frac: 0.1,
        lambda: DEFAULT_LAMBDA,
        tau: DEFAULT_TAU,
        queries_per_class: DEFAULT_QUERIES_PER_CLASS,
    }
}

/// Parses a config file, applying defaults for every optional key and
/// rejecting unknown keys with their line number.
pub fn parse_config(path: &Path) -> Result<DatasetConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = defaults();
    let loc = |n: usize| format!("{}:{}", path.display(), n);

    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}: expected `key = value`, got {raw:?}", loc(n)))?;
        let key = key.trim();
        let value = value.trim();

        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| anyhow!("{}: key `{key}` expects {}, got {value:?}", loc(n), stringify!($ty)))?
            };
        }

        match key {
            "volume.path" => cfg.volume_paths.push(PathBuf::from(value)),
            "dataset.count" => cfg.count = parse!(usize),
            "dataset.width" => cfg.width = parse!(usize),
            "dataset.height" => cfg.height = parse!(usize),
            "dataset.seed" => cfg.seed = parse!(u64),
            "dataset.workers" => cfg.workers = parse!(usize),
            "dataset.out_dir" => cfg.out_dir = PathBuf::from(value),
            "dataset.emit_noisy" => cfg.emit_noisy = parse!(bool),
            "dataset.emit_intermediate" => cfg.emit_intermediate = parse!(bool),
            "dataset.augment_rotations" => cfg.augment_rotations = parse!(bool),
            "placement.mu_n" => cfg.placement.mu_n = parse!(f64),
            "placement.sigma_n" => cfg.placement.sigma_n = parse!(f64),
            "placement.radius_px" => cfg.placement.particle_radius = parse!(f64),
            "placement.overlap_factor" => cfg.placement.overlap_factor = parse!(f64),
            "placement.margin_px" => cfg.placement.margin = parse!(f64),
            "placement.max_attempts" => cfg.placement.max_attempts_per_particle = parse!(usize),
            "ctf.kv" => cfg.ctf.kv = parse!(f64),
            "ctf.cs_mm" => cfg.ctf.cs_mm = parse!(f64),
            "ctf.amplitude_contrast" => cfg.ctf.amplitude_contrast = parse!(f64),
            "ctf.phase_shift_rad" => cfg.ctf.phase_shift_rad = parse!(f64),
            "ctf.mu_defocus_a" => cfg.ctf.mu_defocus_a = parse!(f64),
            "ctf.sigma_defocus_a" => cfg.ctf.sigma_defocus_a = parse!(f64),
            "ice.kind" => {
                cfg.ice.kind = match value {
                    "linear" => IceKind::Linear,
                    "radial" => IceKind::Radial,
                    other => bail!("{}: ice.kind must be linear or radial, got {other:?}", loc(n)),
                }
            }
            "ice.min_weight_lo" => cfg.ice.min_weight_lo = parse!(f64),
            "ice.min_weight_hi" => cfg.ice.min_weight_hi = parse!(f64),
            "ice.blur_sigma" => cfg.ice.blur_sigma = parse!(f64),
            "noise.model" => {
                cfg.noise.model = match value {
                    "gaussian" => NoiseModel::Gaussian,
                    "poisson" => NoiseModel::Poisson,
                    "poisson_gaussian" => NoiseModel::PoissonGaussian,
                    other => bail!(
                        "{}: noise.model must be gaussian, poisson, or poisson_gaussian, got {other:?}",
                        loc(n)
                    ),
                }
            }
            "noise.snr" => cfg.noise.target_snr = parse!(f64),
            "noise.mix_ratio" => cfg.noise.mix_ratio = parse!(f64),
            "noise.inter_std_frac" => cfg.intermediate_std_frac = parse!(f64),
            "mask.threshold_frac" => cfg.mask_threshold_frac = parse!(f64),
            "loss.lambda" => cfg.lambda = parse!(f64),
            "loss.tau" => cfg.tau = parse!(f64),
            "loss.queries_per_class" => cfg.queries_per_class = parse!(usize),
            other => bail!("{}: unknown key `{other}`", loc(n)),
        }
    }

    if cfg.count == 0 {
        bail!("missing required key `dataset.count`");
    }
    cfg.validate()?;
    Ok(cfg)
}
