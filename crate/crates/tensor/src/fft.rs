//! Unnormalized multi-dimensional complex DFT over contiguous blocks.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Plans for every axis of one block shape; reusable across blocks.
pub struct BlockFft {
    dims: Vec<usize>,
    plans: Vec<Arc<dyn Fft<f64>>>,
    scratch: Vec<Complex64>,
    line: Vec<Complex64>,
}

impl BlockFft {
    pub fn new(dims: &[usize], inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let plans: Vec<_> = dims
            .iter()
            .map(|&n| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .collect();
        let scratch_len = plans
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let max_n = dims.iter().copied().max().unwrap_or(0);
        Self {
            dims: dims.to_vec(),
            plans,
            scratch: vec![Complex64::default(); scratch_len],
            line: vec![Complex64::default(); max_n],
        }
    }

    pub fn block_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Transforms one block in place (e^{-iθ} forward, e^{+iθ} inverse, no scaling).
    pub fn process(&mut self, block: &mut [Complex64]) {
        debug_assert_eq!(block.len(), self.block_len());
        let d = self.dims.len();
        for axis in 0..d {
            let n = self.dims[axis];
            let stride: usize = self.dims[axis + 1..].iter().product();
            let outer: usize = self.dims[..axis].iter().product();
            let plan = &self.plans[axis];
            if stride == 1 {
                for chunk in block.chunks_exact_mut(n) {
                    plan.process_with_scratch(chunk, &mut self.scratch);
                }
                continue;
            }
            let line = &mut self.line[..n];
            for o in 0..outer {
                let base = o * n * stride;
                for s in 0..stride {
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = block[base + j * stride + s];
                    }
                    plan.process_with_scratch(line, &mut self.scratch);
                    for (j, v) in line.iter().enumerate() {
                        block[base + j * stride + s] = *v;
                    }
                }
            }
        }
    }
}
