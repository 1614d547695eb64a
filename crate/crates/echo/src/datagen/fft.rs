//! Cached-plan 2D FFT over row-major complex buffers.
//!
//! Forward transforms are unnormalized; the inverse scales by `1/(h*w)` so
//! the pair round-trips. Used by the pseudo-spectral solver, spectral field
//! initialization, and energy-spectrum analysis.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1);
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn transposed(&self, data: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let (h, w) = (self.h, self.w);
        let mut out = vec![Complex::default(); data.len()];
        for i in 0..h {
            for j in 0..w {
                out[j * h + i] = data[i * w + j];
            }
        }
        out
    }

    fn apply(&self, data: &mut [Complex<f64>], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.h * self.w);
        row.process(data);
        let mut t = self.transposed(data);
        col.process(&mut t);
        // Transpose back: t is w rows of length h.
        for j in 0..self.w {
            for i in 0..self.h {
                data[i * self.w + j] = t[j * self.h + i];
            }
        }
    }

    /// In-place unnormalized forward transform.
    pub fn forward(&self, data: &mut [Complex<f64>]) {
        self.apply(data, &self.row_fwd, &self.col_fwd);
    }

    /// In-place inverse transform scaled by `1/(h*w)`.
    pub fn inverse(&self, data: &mut [Complex<f64>]) {
        self.apply(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.h * self.w) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

pub fn to_complex(real: &[f64]) -> Vec<Complex<f64>> {
    real.iter().map(|&r| Complex::new(r, 0.0)).collect()
}

/// Real parts of a spectrum known to be Hermitian-symmetric.
pub fn to_real(data: &[Complex<f64>]) -> Vec<f64> {
    data.iter().map(|c| c.re).collect()
}

/// Signed integer wavenumber of FFT bin `i` out of `n`.
pub fn wavenumber(i: usize, n: usize) -> isize {
    if i <= n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}
