//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{forward, init_model, loss_and_grads, ModelConfig};
use crate::numkern::Tensor;
use crate::train::relative_l2;

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Magnitude below which a central difference with step `h` cannot resolve
/// a derivative of a loss of size `loss` to four digits.
pub fn resolution_floor(loss: f64, h: f64) -> f64 {
    1e4 * f64::EPSILON * loss.abs().max(1.0) / h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub path: String,
    /// Component index (complex tensors count `re`, `im` separately).
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub checked: usize,
    /// Components where both derivatives are below the resolution floor.
    pub below_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub h: f64,
    pub tol: f64,
    pub tensors: Vec<TensorReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` in every
/// component of `base`.
pub fn fd_compare(
    path: &str,
    base: &Tensor,
    analytic: &Tensor,
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<TensorReport> {
    let mut report = TensorReport {
        path: path.to_string(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
        checked: 0,
        below_resolution: 0,
    };
    let mut x = base.clone();
    for i in 0..base.n_components() {
        let v = base.component(i);
        x.set_component(i, v + h);
        let plus = loss(&x)?;
        x.set_component(i, v - h);
        let minus = loss(&x)?;
        x.set_component(i, v);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.component(i);
        if a.abs() < floor && numeric.abs() < floor {
            report.below_resolution += 1;
            continue;
        }
        report.checked += 1;
        let err = relative_error(a, numeric);
        if err > report.rel_err || report.checked == 1 {
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
            report.rel_err = err;
        }
    }
    Ok(report)
}

/// Full-model gradient check: random inputs and targets from `seed`, every
/// parameter component perturbed by `±h`.
pub fn check_gradients(config: &ModelConfig, seed: u64, h: f64, tol: f64) -> Result<GradReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let params = init_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = cfg.n;
    let mut field = |t: usize| {
        Tensor::from_real(&[t, n, n], (0..t * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let frames = field(cfg.t_in)?;
    let target = field(cfg.t_out)?;
    let times = cfg.times();
    let (loss0, grads) = loss_and_grads(&params, &frames, &target, &times)?;
    let floor = resolution_floor(loss0, h);

    let mut tensors = Vec::new();
    for (path, base) in params.tensors() {
        let analytic = &grads[path];
        let report = fd_compare(path, base, analytic, h, floor, |x| {
            let mut p = params.clone();
            *p.get_mut(path) = x.clone();
            relative_l2(&forward(&frames, &p, &times)?, &target)
        })?;
        tensors.push(report);
    }
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        h,
        tol,
        passed: max_rel_err <= tol,
        max_rel_err,
        tensors,
    })
}
