//! Internal FFT helpers over `ndarray` grids.
//!
//! Forward transforms are unnormalized; inverse transforms are unnormalized
//! too, so callers divide by the element count where needed.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

pub(crate) fn to_complex2(a: &Array2<f64>) -> Array2<Complex<f64>> {
    a.mapv(|v| Complex::new(v, 0.0))
}

fn transform_rows(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], len: usize, dir: FftDirection) {
    let fft = planner.plan_fft(len, dir);
    for lane in data.chunks_exact_mut(len) {
        fft.process(lane);
    }
}

/// 2D DFT along both axes (unnormalized).
pub(crate) fn fft2(a: &Array2<Complex<f64>>, dir: FftDirection) -> Array2<Complex<f64>> {
    let (h, w) = a.dim();
    let mut planner = FftPlanner::new();
    let mut buf = a.as_standard_layout().into_owned();
    transform_rows(&mut planner, buf.as_slice_mut().unwrap(), w, dir);
    let mut t = buf.reversed_axes().as_standard_layout().into_owned();
    transform_rows(&mut planner, t.as_slice_mut().unwrap(), h, dir);
    t.reversed_axes().as_standard_layout().into_owned()
}

/// 3D DFT along all axes (unnormalized).
pub(crate) fn fft3(a: &Array3<Complex<f64>>, dir: FftDirection) -> Array3<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let mut buf = a.as_standard_layout().into_owned();
    // Transform the last axis, then rotate axes so each takes a turn.
    for _ in 0..3 {
        let len = buf.dim().2;
        transform_rows(&mut planner, buf.as_slice_mut().unwrap(), len, dir);
        buf = buf.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    }
    buf
}

/// Signed DFT frequency index: `0..=n/2` stay, the rest wrap negative.
pub(crate) fn signed_freq(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}
