//! Singular values through Jacobi diagonalization of `A^T A`.
//!
//! The rotations are the symmetric Jacobi rotations of `A^T A`, applied
//! one-sidedly to the columns of `A` so that `A^T A` is never formed
//! explicitly; singular values are the final column norms.

use super::mat::Mat;

const MAX_SWEEPS: usize = 60;

pub fn singvals(a: &Mat) -> Vec<f64> {
    let (rows, cols) = (a.rows(), a.cols());
    // column-major copy
    let mut cols_data: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[(i, j)]).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols_data[p], &cols_data[q]);
                    let alpha: f64 = cp.iter().map(|x| x * x).sum();
                    let beta: f64 = cq.iter().map(|x| x * x).sum();
                    let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols_data.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
