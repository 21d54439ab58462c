//! Matrix exponential by degree-13 diagonal Padé approximation with
//! scaling and squaring, and the adjoint of its Fréchet derivative.

use std::cell::Cell;

use super::mat::Mat;
use crate::error::{Error, Result};

/// Largest 1-norm for which the unscaled degree-13 approximant is accurate
/// to unit roundoff in double precision.
pub const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

thread_local! {
    static EXPM_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`expm`] evaluations made on the current thread.
pub fn expm_call_count() -> u64 {
    EXPM_CALLS.with(|c| c.get())
}

pub fn reset_expm_call_count() {
    EXPM_CALLS.with(|c| c.set(0));
}

/// Number of squarings used for a matrix with the given 1-norm.
pub fn scaling_exponent(norm1: f64) -> u32 {
    if norm1 <= THETA_13 {
        0
    } else {
        (norm1 / THETA_13).log2().ceil().max(0.0) as u32
    }
}

pub fn expm(a: &Mat) -> Result<Mat> {
    EXPM_CALLS.with(|c| c.set(c.get() + 1));
    expm_uncounted(a)
}

fn expm_uncounted(a: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "expm needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let m = a.rows();
    let s = scaling_exponent(a.norm1());
    let a = a.scaled(0.5f64.powi(s as i32));

    let b = &PADE_13;
    let ident = Mat::identity(m);
    let a2 = a.matmul(&a);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let mut u_inner = a6.scaled(b[13]);
    u_inner.axpy(b[11], &a4);
    u_inner.axpy(b[9], &a2);
    let mut u_outer = a6.matmul(&u_inner);
    u_outer.axpy(b[7], &a6);
    u_outer.axpy(b[5], &a4);
    u_outer.axpy(b[3], &a2);
    u_outer.axpy(b[1], &ident);
    let u = a.matmul(&u_outer);

    let mut v_inner = a6.scaled(b[12]);
    v_inner.axpy(b[10], &a4);
    v_inner.axpy(b[8], &a2);
    let mut v = a6.matmul(&v_inner);
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &ident);

    let mut x = v.sub(&u).solve(&v.add(&u))?;
    for _ in 0..s {
        x = x.matmul(&x);
    }
    Ok(x)
}

/// Gradient of `<gbar, exp(a t)>` with respect to `a`.
///
/// Uses `L(X, E) = upper-right block of exp([[X, E], [0, X]])` and the fact
/// that the adjoint of `L(X, .)` is `L(X^T, .)`.
pub fn expm_adjoint(a: &Mat, t: f64, gbar: &Mat) -> Result<Mat> {
    if !a.is_square() || !gbar.is_square() || a.rows() != gbar.rows() {
        return Err(Error::Shape(format!(
            "expm_adjoint: A is {}x{}, Gbar is {}x{}",
            a.rows(),
            a.cols(),
            gbar.rows(),
            gbar.cols()
        )));
    }
    let m = a.rows();
    if gbar.as_slice().iter().all(|&g| g == 0.0) {
        return Ok(Mat::zeros(m, m));
    }
    let at = a.transpose().scaled(t);
    let mut block = Mat::zeros(2 * m, 2 * m);
    block.set_block(0, 0, &at);
    block.set_block(0, m, gbar);
    block.set_block(m, m, &at);
    let e = expm_uncounted(&block)?;
    Ok(e.block(0, m, m, m).scaled(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn taylor_oracle(a: &Mat, terms: usize) -> Mat {
        let m = a.rows();
        let mut sum = Mat::identity(m);
        let mut term = Mat::identity(m);
        for k in 1..terms {
            term = term.matmul(a).scaled(1.0 / k as f64);
            sum = sum.add(&term);
        }
        sum
    }

    fn random_mat(rng: &mut ChaCha8Rng, m: usize, norm1: f64) -> Mat {
        let raw: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Mat::from_vec(m, m, raw).unwrap();
        let scale = norm1 / a.norm1();
        a.scaled(scale)
    }

    #[test]
    fn zero_gives_identity() {
        let e = expm(&Mat::zeros(4, 4)).unwrap();
        assert_eq!(e, Mat::identity(4));
    }

    #[test]
    fn quarter_rotation() {
        let a = Mat::from_rows(&[&[0.0, -FRAC_PI_2], &[FRAC_PI_2, 0.0]]);
        let e = expm(&a).unwrap();
        let want = Mat::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(e.sub(&want).frobenius() < 1e-14);
    }

    #[test]
    fn matches_taylor_series_for_small_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_mat(&mut rng, 8, 0.9);
        let e = expm(&a).unwrap();
        let oracle = taylor_oracle(&a, 60);
        assert!(e.sub(&oracle).frobenius() / oracle.frobenius() < 1e-12);
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(expm(&Mat::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(expm_adjoint(&Mat::zeros(2, 2), 1.0, &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn scaling_exponent_policy() {
        assert_eq!(scaling_exponent(0.0), 0);
        assert_eq!(scaling_exponent(THETA_13), 0);
        assert_eq!(scaling_exponent(THETA_13 * 1.5), 1);
        assert_eq!(scaling_exponent(THETA_13 * 4.0), 2);
    }

    #[test]
    fn adjoint_of_zero_cotangent_is_zero() {
        let a = Mat::from_rows(&[&[0.3, 1.0], &[-0.2, 0.1]]);
        let g = expm_adjoint(&a, 0.5, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(g, Mat::zeros(2, 2));
    }

    #[test]
    fn adjoint_diagonal_case_decouples() {
        let a = Mat::from_diag(&[0.2, -0.7, 1.1]);
        let gbar = Mat::from_diag(&[1.0, -2.0, 0.5]);
        let g = expm_adjoint(&a, 1.0, &gbar).unwrap();
        for i in 0..3 {
            let want = gbar[(i, i)] * a[(i, i)].exp();
            assert!((g[(i, i)] - want).abs() < 1e-13 * want.abs().max(1.0));
            for j in 0..3 {
                if i != j {
                    assert!(g[(i, j)].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn expm_counter_ignores_adjoint_internals() {
        reset_expm_call_count();
        let a = Mat::identity(2);
        expm(&a).unwrap();
        expm_adjoint(&a, 1.0, &Mat::identity(2)).unwrap();
        assert_eq!(expm_call_count(), 1);
    }
}
