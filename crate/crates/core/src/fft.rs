//! In-place 3D FFT on an `n^3` cube stored x-slowest (`(a * n + b) * n + c`).

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft3 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Unnormalized `X_k = sum_a x_a exp(-2 pi i k a / n)` along every axis.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(&*self.forward, data);
    }

    /// Unnormalized `x_a = sum_k X_k exp(+2 pi i k a / n)` along every axis.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(&*self.inverse, data);
    }

    fn apply(&self, plan: &dyn Fft<f64>, data: &mut [Complex64]) {
        let n = self.n;
        assert_eq!(data.len(), n * n * n);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // innermost axis is contiguous
        for line in data.chunks_exact_mut(n) {
            plan.process_with_scratch(line, &mut scratch);
        }
        let mut buf = vec![Complex64::default(); n];
        for a in 0..n {
            for c in 0..n {
                for b in 0..n {
                    buf[b] = data[(a * n + b) * n + c];
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                for b in 0..n {
                    data[(a * n + b) * n + c] = buf[b];
                }
            }
        }
        for b in 0..n {
            for c in 0..n {
                for a in 0..n {
                    buf[a] = data[(a * n + b) * n + c];
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                for a in 0..n {
                    data[(a * n + b) * n + c] = buf[a];
                }
            }
        }
    }
}
