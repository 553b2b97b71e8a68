//! Dataset generation: per-micrograph RNG streams derived from the master
//! seed, a rayon work pool over micrograph indices, and a manifest listing
//! every artifact with its checksum and parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use cryosim_core::mrc;
use cryosim_core::optics::{ctf_image, sample_defocus, wavelength_from_voltage, CtfParams};
use cryosim_core::specimen::{place_particles, sample_particle_count};
use cryosim_core::synthesis::{
    add_noise, intermediate_input, make_ice_weight_map, make_particle_mask, synthesize_physical,
    write_annotation_rows, IceGradientKind, IceGradientParams, ImagingMeta,
    ANNOTATION_TSV_HEADER,
};
use cryosim_core::volume::{DensityVolume, Micrograph};

use crate::config::{DatasetConfig, IceKind};

pub const MANIFEST_TSV_HEADER: &str = "file\tkind\tmic_id\tsha256\tmaster_seed\tstream\t\
n_particles\tshortfall\tdefocus_a\tice_kind\tice_p0\tice_p1\tice_min_weight\tice_blur_sigma\t\
noise_model\ttarget_snr\tinter_std_frac";

/// One manifest row: a file plus the parameters that produced it.
#[derive(Debug, Clone)]
pub struct ArtifactRow {
    pub file: String,
    pub kind: String,
    pub mic_id: String,
    pub sha256: String,
    pub stream: Option<u64>,
    pub n_particles: usize,
    pub shortfall: usize,
    pub defocus_a: f64,
    pub ice_desc: (String, f64, f64, f64, f64),
    pub noise_desc: (String, f64, f64),
}

/// The assembled manifest, also written to `manifest.tsv`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub rows: Vec<ArtifactRow>,
}

struct MicOutput {
    files: Vec<(String, String, String)>, // (file, kind, sha256)
    annotation_rows: Vec<u8>,
    mic_id: String,
    stream: u64,
    n_particles: usize,
    shortfall: usize,
    defocus: f64,
    ice_desc: (String, f64, f64, f64, f64),
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

fn rotate_quarter_turns(data: &Array2<f64>, turns: usize) -> Array2<f64> {
    let mut out = data.clone();
    for _ in 0..turns % 4 {
        let (h, w) = out.dim();
        // Counterclockwise quarter turn: (y, x) -> (w - 1 - x, y).
        out = Array2::from_shape_fn((w, h), |(y, x)| out[[x, w - 1 - y]]);
    }
    out
}

fn generate_one(
    cfg: &DatasetConfig,
    volumes: &[DensityVolume],
    index: usize,
) -> Result<MicOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let dims = (cfg.height, cfg.width);
    let mic_id = format!("mic_{index:04}");

    let n = sample_particle_count(&cfg.placement, &mut rng);
    let layout = place_particles(&cfg.placement, dims, n, volumes.len(), &mut rng)?;
    let defocus = sample_defocus(cfg.ctf.mu_defocus_a, cfg.ctf.sigma_defocus_a, &mut rng)?;

    let kind = match cfg.ice.kind {
        IceKind::Linear => IceGradientKind::Linear {
            direction: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        IceKind::Radial => IceGradientKind::Radial {
            center: [
                rng.gen_range(0.0..cfg.width as f64),
                rng.gen_range(0.0..cfg.height as f64),
            ],
        },
    };
    let min_weight = if cfg.ice.min_weight_lo == cfg.ice.min_weight_hi {
        cfg.ice.min_weight_lo
    } else {
        rng.gen_range(cfg.ice.min_weight_lo..cfg.ice.min_weight_hi)
    };
    let ice_params = IceGradientParams {
        kind,
        min_weight,
        blur_sigma: cfg.ice.blur_sigma,
    };
    let ice_map = make_ice_weight_map(&ice_params, dims)?;

    let ctf_params = CtfParams {
        amplitude_contrast: cfg.ctf.amplitude_contrast,
        lambda: wavelength_from_voltage(cfg.ctf.kv)?,
        defocus,
        cs: cfg.ctf.cs_mm * 1e7,
        phase_shift: cfg.ctf.phase_shift_rad,
        pixel_size: volumes[0].voxel_size(),
    };
    let ctf_grid = ctf_image(&ctf_params, cfg.height, cfg.width)?;
    let meta = ImagingMeta {
        ctf: ctf_params,
        ice: ice_params,
    };

    let (phy, annotations) = synthesize_physical(&layout, volumes, &ice_map, &ctf_grid, &meta)?;
    let mask = make_particle_mask(&layout, volumes, cfg.mask_threshold_frac)?;

    let mut images: Vec<(String, Micrograph)> = vec![
        (format!("{mic_id}_phy.mrc"), phy.clone()),
        (format!("{mic_id}_mask.mrc"), mask),
    ];
    if cfg.emit_noisy {
        images.push((
            format!("{mic_id}_noisy.mrc"),
            add_noise(&phy, &cfg.noise, &mut rng)?,
        ));
    }
    if cfg.emit_intermediate {
        images.push((
            format!("{mic_id}_inter.mrc"),
            intermediate_input(&phy, cfg.intermediate_std_frac, &mut rng)?,
        ));
    }
    if cfg.augment_rotations {
        let base: Vec<(String, Micrograph)> = images.clone();
        for (name, img) in &base {
            for (turns, tag) in [(1usize, "r90"), (2, "r180"), (3, "r270")] {
                let rotated = Micrograph::new(
                    rotate_quarter_turns(img.data(), turns),
                    img.pixel_size(),
                )?;
                images.push((name.replace(".mrc", &format!("_{tag}.mrc")), rotated));
            }
        }
    }

    let mut files = Vec::with_capacity(images.len());
    for (name, img) in &images {
        let path = cfg.out_dir.join(name);
        mrc::write_micrograph(img, &path)?;
        let kind = name
            .trim_start_matches(&format!("{mic_id}_"))
            .trim_end_matches(".mrc")
            .to_string();
        files.push((name.clone(), kind, sha256_file(&path)?));
    }

    let mut annotation_rows = Vec::new();
    write_annotation_rows(&mut annotation_rows, &mic_id, &annotations)?;

    let ice_desc = match ice_params.kind {
        IceGradientKind::Linear { direction } => (
            "linear".to_string(),
            direction,
            0.0,
            ice_params.min_weight,
            ice_params.blur_sigma,
        ),
        IceGradientKind::Radial { center } => (
            "radial".to_string(),
            center[0],
            center[1],
            ice_params.min_weight,
            ice_params.blur_sigma,
        ),
    };
    Ok(MicOutput {
        files,
        annotation_rows,
        mic_id,
        stream: index as u64,
        n_particles: layout.placements.len(),
        shortfall: layout.shortfall,
        defocus,
        ice_desc,
    })
}

/// Generates the whole dataset described by `cfg` and writes
/// `manifest.tsv` last. Byte-identical across runs and worker counts: every
/// micrograph draws from its own counter-derived RNG stream.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    let volumes: Vec<DensityVolume> = cfg
        .volume_paths
        .iter()
        .map(|p| {
            mrc::read_volume(p).map_err(|e| anyhow!("loading volume {}: {e}", p.display()))
        })
        .collect::<Result<_>>()?;
    let first = &volumes[0];
    for (p, v) in cfg.volume_paths.iter().zip(volumes.iter()) {
        if v.side() != first.side() || v.voxel_size() != first.voxel_size() {
            return Err(anyhow!(
                "conformation volumes disagree on size: {} is {}@{} vs {}@{}",
                p.display(),
                v.side(),
                v.voxel_size(),
                first.side(),
                first.voxel_size()
            ));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("building worker pool")?;
    let outputs: Result<Vec<MicOutput>> = pool.install(|| {
        (0..cfg.count)
            .into_par_iter()
            .map(|i| generate_one(cfg, &volumes, i))
            .collect()
    });
    let outputs = outputs?;

    // Annotations for the whole dataset, in index order.
    let ann_name = "annotations.tsv";
    let ann_path = cfg.out_dir.join(ann_name);
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ann_path)?);
        writeln!(f, "{ANNOTATION_TSV_HEADER}")?;
        for out in &outputs {
            f.write_all(&out.annotation_rows)?;
        }
        f.flush()?;
    }

    let noise_desc = (
        cfg.noise.model.to_string(),
        cfg.noise.target_snr,
        cfg.intermediate_std_frac,
    );
    let mut rows = Vec::new();
    for out in &outputs {
        for (file, kind, sha) in &out.files {
            rows.push(ArtifactRow {
                file: file.clone(),
                kind: kind.clone(),
                mic_id: out.mic_id.clone(),
                sha256: sha.clone(),
                stream: Some(out.stream),
                n_particles: out.n_particles,
                shortfall: out.shortfall,
                defocus_a: out.defocus,
                ice_desc: out.ice_desc.clone(),
                noise_desc: noise_desc.clone(),
            });
        }
    }
    rows.push(ArtifactRow {
        file: ann_name.to_string(),
        kind: "annotations".to_string(),
        mic_id: "-".to_string(),
        sha256: sha256_file(&ann_path)?,
        stream: None,
        n_particles: outputs.iter().map(|o| o.n_particles).sum(),
        shortfall: outputs.iter().map(|o| o.shortfall).sum(),
        defocus_a: 0.0,
        ice_desc: ("-".to_string(), 0.0, 0.0, 0.0, 0.0),
        noise_desc: noise_desc.clone(),
    });

    let manifest_path = cfg.out_dir.join("manifest.tsv");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
        writeln!(f, "{MANIFEST_TSV_HEADER}")?;
        for r in &rows {
            let stream = r
                .stream
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".to_string());
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.3}\t{}\t{}\t{}",
                r.file,
                r.kind,
                r.mic_id,
                r.sha256,
                cfg.seed,
                stream,
                r.n_particles,
                r.shortfall,
                r.defocus_a,
                r.ice_desc.0,
                r.ice_desc.1,
                r.ice_desc.2,
                r.ice_desc.3,
                r.ice_desc.4,
                r.noise_desc.0,
                r.noise_desc.1,
                r.noise_desc.2,
            )?;
        }
        f.flush()?;
    }
    Ok(Manifest {
        path: manifest_path,
        rows,
    })
}
