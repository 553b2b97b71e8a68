//! Grid containers for density volumes and micrographs, plus intensity
//! normalization.
//!
//! Both containers own their samples as `f64` and carry a physical sampling
//! step in Angstrom. They are immutable values after construction; every
//! operation in the crate takes them by reference and returns new grids.

use ndarray::{Array2, Array3};

use crate::{Error, Result};

/// Cubic 3D scalar grid with a physical voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    side: usize,
    voxel_size: f64,
    data: Array3<f64>,
}

impl DensityVolume {
    /// Builds a volume, checking cubic shape (side >= 2), positive voxel
    /// size, and finite samples.
    pub fn new(data: Array3<f64>, voxel_size: f64) -> Result<Self> {
        let (nz, ny, nx) = data.dim();
        if nx != ny || ny != nz {
            return Err(Error::NonCubicVolume {
                nx: nx as i64,
                ny: ny as i64,
                nz: nz as i64,
            });
        }
        if nx < 2 {
            return Err(Error::InvalidGrid(format!("volume side {nx} < 2")));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "voxel size {voxel_size} must be > 0"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite voxel value".into()));
        }
        Ok(Self {
            side: nx,
            voxel_size,
            data,
        })
    }

    /// Side length in voxels (all three axes).
    pub fn side(&self) -> usize {
        self.side
    }

    /// Voxel size in Angstrom.
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Samples indexed `[z][y][x]` (x fastest-varying, matching MRC order).
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// 2D scalar grid with a physical pixel size.
///
/// Used for micrographs and for same-shaped derived planes (ice weight maps,
/// binary particle masks, noise baselines).
#[derive(Debug, Clone, PartialEq)]
pub struct Micrograph {
    pixel_size: f64,
    data: Array2<f64>,
}

impl Micrograph {
    /// Builds a micrograph, checking dims >= 8, positive pixel size, and
    /// finite samples.
    pub fn new(data: Array2<f64>, pixel_size: f64) -> Result<Self> {
        let (h, w) = data.dim();
        if h < 8 || w < 8 {
            return Err(Error::InvalidGrid(format!("micrograph {h}x{w} below 8x8")));
        }
        if !(pixel_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel size {pixel_size} must be > 0"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite pixel value".into()));
        }
        Ok(Self { pixel_size, data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Pixel size in Angstrom.
    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    /// Samples indexed `[y][x]`.
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Mean and population variance of the samples.
    pub fn mean_var(&self) -> (f64, f64) {
        mean_var(self.data.iter().copied())
    }
}

pub(crate) fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Affine-rescales a micrograph so the pre-clip mean and standard deviation
/// hit the targets, then clips to `[0, clip_max]`.
///
/// An input with standard deviation below 1e-12 maps to a constant image at
/// `target_mean` (clipped), avoiding the degenerate division.
pub fn normalize_intensity(
    m: &Micrograph,
    target_mean: f64,
    target_std: f64,
    clip_max: f64,
) -> Micrograph {
    let (mean, var) = m.mean_var();
    let std = var.sqrt();
    let out = if std < 1e-12 {
        Array2::from_elem(m.data().dim(), target_mean.clamp(0.0, clip_max))
    } else {
        let scale = target_std / std;
        m.data()
            .mapv(|v| ((v - mean) * scale + target_mean).clamp(0.0, clip_max))
    };
    Micrograph::new(out, m.pixel_size()).expect("normalized grid keeps valid shape")
}
