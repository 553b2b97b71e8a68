//! Volume reconstruction from posed projections by direct Fourier
//! inversion, plus half-set splitting for resolution estimation.
//!
//! Each projection is a central slice of the volume's Fourier transform.
//! Slices are phase-shifted to undo the in-plane translation, inserted into
//! the 3D frequency grid with trilinear gridding weights, normalized by the
//! accumulated weights (the division plays the reconstruction filter's
//! role), Hermitian-symmetrized, and inverted.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::FftDirection;

use crate::evalkit::Pose;
use crate::fft;
use crate::volume::DensityVolume;
use crate::{Error, Result};

/// One posed particle image.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Square patch, side = reconstruction size.
    pub patch: Array2<f64>,
    pub pose: Pose,
}

/// A set of posed projections sharing one pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub pixel_size: f64,
    pub items: Vec<Projection>,
}

/// Randomly permutes the stack and splits it into `ceil(n/2)` and
/// `floor(n/2)` halves. Deterministic given the RNG stream.
pub fn split_half_sets(
    stack: &ProjectionStack,
    rng: &mut impl Rng,
) -> Result<(ProjectionStack, ProjectionStack)> {
    let n = stack.items.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "cannot split {n} projections into half-sets"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let cut = n.div_ceil(2);
    let pick = |idx: &[usize]| ProjectionStack {
        pixel_size: stack.pixel_size,
        items: idx.iter().map(|&i| stack.items[i].clone()).collect(),
    };
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Reconstructs a `d^3` volume from posed projections via Fourier-slice
/// insertion. Patches must be `d x d`.
pub fn fbp_reconstruct(stack: &ProjectionStack, d: usize) -> Result<DensityVolume> {
    if stack.items.is_empty() {
        return Err(Error::EmptyStack);
    }
    for (i, item) in stack.items.iter().enumerate() {
        if item.patch.dim() != (d, d) {
            return Err(Error::DimMismatch(format!(
                "projection {i} is {:?}, expected {d}x{d}",
                item.patch.dim()
            )));
        }
    }

    let half = d as isize / 2;
    let center = (d as f64 - 1.0) / 2.0;
    let mut grid = Array3::<Complex<f64>>::from_elem((d, d, d), Complex::new(0.0, 0.0));
    let mut weights = Array3::<f64>::zeros((d, d, d));
    let two_pi = 2.0 * std::f64::consts::PI;

    for item in &stack.items {
        let spectrum = fft::fft2(&fft::to_complex2(&item.patch), FftDirection::Forward);
        let slice_to_volume = item.pose.rotation.transpose();
        let [tx, ty] = item.pose.translation;
        for ky in 0..d {
            let fy = fft::signed_freq(ky, d) as f64;
            for kx in 0..d {
                let fx = fft::signed_freq(kx, d) as f64;
                // Move the transform origin to the rotation center and undo
                // the in-plane shift, then rotate the slice frequency into
                // the volume frame.
                let phase = two_pi * (fx * (center + tx) + fy * (center + ty)) / d as f64;
                let value = spectrum[[ky, kx]] * Complex::from_polar(1.0, phase);
                let q = slice_to_volume * nalgebra::Vector3::new(fx, fy, 0.0);

                let base = [q.x.floor(), q.y.floor(), q.z.floor()];
                let frac = [q.x - base[0], q.y - base[1], q.z - base[2]];
                for corner in 0..8 {
                    let off = [(corner & 1) as isize, ((corner >> 1) & 1) as isize, ((corner >> 2) & 1) as isize];
                    let w = (0..3)
                        .map(|a| if off[a] == 0 { 1.0 - frac[a] } else { frac[a] })
                        .product::<f64>();
                    if w == 0.0 {
                        continue;
                    }
                    let sx = base[0] as isize + off[0];
                    let sy = base[1] as isize + off[1];
                    let sz = base[2] as isize + off[2];
                    if sx < -half || sx > half || sy < -half || sy > half || sz < -half || sz > half
                    {
                        continue;
                    }
                    let ix = sx.rem_euclid(d as isize) as usize;
                    let iy = sy.rem_euclid(d as isize) as usize;
                    let iz = sz.rem_euclid(d as isize) as usize;
                    grid[[iz, iy, ix]] += value * w;
                    weights[[iz, iy, ix]] += w;
                }
            }
        }
    }

    // Weight-normalize, then enforce Hermitian symmetry so the inversion
    // is real up to rounding.
    let mut normalized = Array3::<Complex<f64>>::from_elem((d, d, d), Complex::new(0.0, 0.0));
    for ((idx, &w), &g) in weights.indexed_iter().zip(grid.iter()) {
        if w >= 1e-8 {
            normalized[idx] = g / w;
        }
    }
    let mut symmetric = Array3::<Complex<f64>>::from_elem((d, d, d), Complex::new(0.0, 0.0));
    for kz in 0..d {
        for ky in 0..d {
            for kx in 0..d {
                let conj_idx = [(d - kz) % d, (d - ky) % d, (d - kx) % d];
                symmetric[[kz, ky, kx]] =
                    (normalized[[kz, ky, kx]] + normalized[conj_idx].conj()) * 0.5;
            }
        }
    }

    // Shift the origin back from the rotation center to index 0.
    for kz in 0..d {
        let fz = fft::signed_freq(kz, d) as f64;
        for ky in 0..d {
            let fy = fft::signed_freq(ky, d) as f64;
            for kx in 0..d {
                let fx = fft::signed_freq(kx, d) as f64;
                let phase = -two_pi * center * (fx + fy + fz) / d as f64;
                symmetric[[kz, ky, kx]] *= Complex::from_polar(1.0, phase);
            }
        }
    }

    let back = fft::fft3(&symmetric, FftDirection::Inverse);
    let scale = (d * d * d) as f64;
    DensityVolume::new(back.mapv(|v| v.re / scale), stack.pixel_size)
}
