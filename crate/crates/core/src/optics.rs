//! Contrast transfer function and point-spread-function application.
//!
//! The CTF model is the standard single-defocus form without astigmatism or
//! an envelope: `CTF(g) = -sqrt(1-w^2) sin(chi) - w cos(chi)` with the phase
//! `chi = pi lambda g^2 (df - lambda^2 g^2 Cs / 2) + phase_shift`. The PSF is
//! applied as a Fourier-domain multiplication.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftDirection;

use crate::fft;
use crate::volume::Micrograph;
use crate::{Error, Result};

/// Microscope and per-micrograph CTF parameters. Lengths in Angstrom,
/// angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtfParams {
    /// Relative amplitude (phase) contrast factor w, in [0, 1].
    pub amplitude_contrast: f64,
    /// Electron wavelength lambda.
    pub lambda: f64,
    /// Objective defocus (positive = underfocus).
    pub defocus: f64,
    /// Spherical aberration Cs.
    pub cs: f64,
    /// Additional phase shift.
    pub phase_shift: f64,
    /// Detector sampling.
    pub pixel_size: f64,
}

impl CtfParams {
    /// Common modern-microscope constants: 300 kV, Cs = 2.7 mm, w = 0.1,
    /// no phase plate.
    pub fn standard(defocus: f64, pixel_size: f64) -> Self {
        Self {
            amplitude_contrast: 0.1,
            lambda: wavelength_from_voltage(300.0).expect("300 kV is positive"),
            defocus,
            cs: 2.7e7,
            phase_shift: 0.0,
            pixel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "wavelength {} must be > 0",
                self.lambda
            )));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel size {} must be > 0",
                self.pixel_size
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude_contrast) {
            return Err(Error::InvalidParameter(format!(
                "amplitude contrast {} outside [0, 1]",
                self.amplitude_contrast
            )));
        }
        Ok(())
    }
}

/// Relativistic electron wavelength in Angstrom for an accelerating voltage
/// in kV.
pub fn wavelength_from_voltage(kv: f64) -> Result<f64> {
    if !(kv > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "voltage {kv} kV must be > 0"
        )));
    }
    let v = kv * 1e3;
    Ok(12.2639 / (v * (1.0 + 0.97845e-6 * v)).sqrt())
}

/// Frequency-dependent phase shift `chi` at spatial frequency magnitude `g`
/// (cycles per Angstrom).
pub fn chi(p: &CtfParams, g: f64) -> f64 {
    let g2 = g * g;
    std::f64::consts::PI * p.lambda * g2 * (p.defocus - 0.5 * p.lambda * p.lambda * g2 * p.cs)
        + p.phase_shift
}

/// CTF value at frequency magnitude `g`.
pub fn ctf_value(p: &CtfParams, g: f64) -> f64 {
    let x = chi(p, g);
    let w = p.amplitude_contrast;
    -(1.0 - w * w).sqrt() * x.sin() - w * x.cos()
}

/// CTF evaluated over the discrete Fourier frequency lattice of an `h` x
/// `w_px` image (standard DFT layout, negative frequencies in the upper
/// half). Radially symmetric: depends on frequency only through `|g|`.
pub fn ctf_image(p: &CtfParams, h: usize, w_px: usize) -> Result<Array2<f64>> {
    p.validate()?;
    if h < 8 || w_px < 8 {
        return Err(Error::InvalidGrid(format!("CTF grid {h}x{w_px} below 8x8")));
    }
    let fy: Vec<f64> = (0..h)
        .map(|k| fft::signed_freq(k, h) as f64 / (h as f64 * p.pixel_size))
        .collect();
    let fx: Vec<f64> = (0..w_px)
        .map(|k| fft::signed_freq(k, w_px) as f64 / (w_px as f64 * p.pixel_size))
        .collect();
    Ok(Array2::from_shape_fn((h, w_px), |(ky, kx)| {
        ctf_value(p, (fy[ky] * fy[ky] + fx[kx] * fx[kx]).sqrt())
    }))
}

/// Filters a micrograph with a frequency-domain kernel:
/// `IDFT(DFT(m) * c)`, real part. Linear in `m`.
pub fn apply_psf(m: &Micrograph, c: &Array2<f64>) -> Result<Micrograph> {
    if m.data().dim() != c.dim() {
        return Err(Error::DimMismatch(format!(
            "micrograph {:?} vs filter {:?}",
            m.data().dim(),
            c.dim()
        )));
    }
    let spectrum = fft::fft2(&fft::to_complex2(m.data()), FftDirection::Forward);
    let filtered = &spectrum * &c.mapv(|v| num_complex::Complex::new(v, 0.0));
    let n = (m.height() * m.width()) as f64;
    let back = fft::fft2(&filtered, FftDirection::Inverse);
    Micrograph::new(back.mapv(|v| v.re / n), m.pixel_size())
}

/// Draws a defocus from `Normal(mu, sigma^2)`, redrawing until positive.
pub fn sample_defocus(mu_df: f64, sigma_df: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(mu_df > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mean defocus {mu_df} must be > 0"
        )));
    }
    if sigma_df == 0.0 {
        return Ok(mu_df);
    }
    let dist = Normal::new(mu_df, sigma_df)
        .map_err(|e| Error::InvalidParameter(format!("defocus distribution: {e}")))?;
    Ok(std::iter::repeat_with(|| dist.sample(rng))
        .find(|&d| d > 0.0)
        .expect("normal distribution eventually yields a positive draw"))
}
