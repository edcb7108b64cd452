//! DFT kernels shared by the delay-domain transform and the ADP features.
//!
//! Convention (documented once, used everywhere): the delay-domain transform
//! is the inverse DFT with 1/N scaling, `x_t = (1/N) * sum_l X_l e^{+j2pi l t / N}`,
//! and the angle transform along the antenna axis is the unnormalized forward
//! DFT, `A_k = sum_m x_m e^{-j2pi k m / N}`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// In-place inverse DFT with 1/N scaling along a contiguous row.
pub(crate) fn idft_row_scaled(row: &mut [Complex64]) {
    let n = row.len();
    if n == 0 {
        return;
    }
    plan_inverse(n).process(row);
    let scale = 1.0 / n as f64;
    for v in row.iter_mut() {
        *v *= scale;
    }
}

/// Unnormalized forward DFT of a short vector (used along the antenna axis,
/// where N is small enough that the direct evaluation is the simplest thing
/// that works on strided data).
pub(crate) fn dft_naive(input: &[Complex64], out: &mut [Complex64]) {
    let n = input.len();
    debug_assert_eq!(out.len(), n);
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, &x) in input.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * (k * m) as f64 / n as f64;
            acc += x * Complex64::from_polar(1.0, phase);
        }
        *o = acc;
    }
}
