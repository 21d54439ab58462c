//! Two-dimensional FFT over the trailing `n x n` axes of a tensor.
//!
//! Forward is the unnormalized DFT; inverse carries the `1/n^2` factor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, Direction), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, dir))
            .or_insert_with(|| match dir {
                Direction::Forward => planner.plan_fft_forward(n),
                Direction::Inverse => planner.plan_fft_inverse(n),
            })
            .clone()
    })
}

/// In-place 2D transform of one row-major `n x n` plane.
pub fn fft2_plane(plane: &mut [Complex64], n: usize, dir: Direction) {
    debug_assert_eq!(plane.len(), n * n);
    let fft = plan(n, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len().max(n)];
    fft.process_with_scratch(plane, &mut scratch);

    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            column[i] = plane[i * n + j];
        }
        fft.process_with_scratch(&mut column, &mut scratch);
        for i in 0..n {
            plane[i * n + j] = column[i];
        }
    }
    if dir == Direction::Inverse {
        let norm = 1.0 / (n * n) as f64;
        plane.iter_mut().for_each(|z| *z *= norm);
    }
}

/// Transforms every trailing `n x n` plane. Real input is promoted to complex.
pub fn fft2(field: &Tensor, dir: Direction) -> Result<Tensor> {
    let shape = field.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::Shape(format!(
            "fft2 needs trailing square axes, got {:?}",
            shape
        )));
    }
    let n = shape[shape.len() - 1];
    let mut out = field.to_complex();
    for plane in out.cx_mut().chunks_mut(n * n) {
        fft2_plane(plane, n, dir);
    }
    Ok(out)
}
