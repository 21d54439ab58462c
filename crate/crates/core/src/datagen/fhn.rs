//! FitzHugh–Nagumo reaction-diffusion on `[0, L)^2`:
//!
//! ```text
//! du/dt = Du lap u + u - u^3/3 - v
//! dv/dt = Dv lap v + eps (u + a - b v)
//! ```
//!
//! Diffusion enters through exact factors `exp(-D |k|^2 dt)`; the reaction
//! is advanced with Heun's method in integrating-factor form.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wavenumber;
use crate::error::{Error, Result};
use crate::numkern::{fft2_plane, Complex64, Direction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhnParams {
    #[serde(rename = "Du")]
    pub du: f64,
    #[serde(rename = "Dv")]
    pub dv: f64,
    pub eps: f64,
    pub a: f64,
    pub b: f64,
    pub length: f64,
    pub n: usize,
    pub dt_solver: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
    pub seed: u64,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            du: 0.01,
            dv: 0.005,
            eps: 0.01,
            a: 0.7,
            b: 0.8,
            length: 2.0 * std::f64::consts::PI,
            n: 32,
            dt_solver: 0.02,
            dt_snapshot: 1.0,
            snapshots: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FhnState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn forward(field: &[f64], n: usize) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_plane(&mut out, n, Direction::Forward);
    out
}

fn inverse_real(mut spec: Vec<Complex64>, n: usize) -> Vec<f64> {
    fft2_plane(&mut spec, n, Direction::Inverse);
    spec.into_iter().map(|z| z.re).collect()
}

fn reaction(p: &FhnParams, s: &FhnState) -> FhnState {
    let u = s
        .u
        .iter()
        .zip(&s.v)
        .map(|(&u, &v)| u - u * u * u / 3.0 - v)
        .collect();
    let v = s
        .u
        .iter()
        .zip(&s.v)
        .map(|(&u, &v)| p.eps * (u + p.a - p.b * v))
        .collect();
    FhnState { u, v }
}

struct Stepper<'a> {
    p: &'a FhnParams,
    n: usize,
    dt: f64,
    eu: Vec<f64>,
    ev: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(p: &'a FhnParams, dt: f64) -> Self {
        let n = p.n;
        let scale = 2.0 * std::f64::consts::PI / p.length;
        let ksq: Vec<f64> = (0..n * n)
            .map(|q| {
                let (kx, ky) = (wavenumber(q / n, n) * scale, wavenumber(q % n, n) * scale);
                kx * kx + ky * ky
            })
            .collect();
        Self {
            p,
            n,
            dt,
            eu: ksq.iter().map(|k| (-p.du * k * dt).exp()).collect(),
            ev: ksq.iter().map(|k| (-p.dv * k * dt).exp()).collect(),
        }
    }

    /// `x* = E(x + dt R(x))`, `x' = E x + dt/2 (E R(x) + R(x*))`
    fn step(&self, s: &FhnState) -> FhnState {
        let n = self.n;
        let r0 = reaction(self.p, s);
        let (uh, vh) = (forward(&s.u, n), forward(&s.v, n));
        let (ruh, rvh) = (forward(&r0.u, n), forward(&r0.v, n));
        let pred = |x: &[Complex64], r: &[Complex64], e: &[f64]| -> Vec<Complex64> {
            (0..x.len()).map(|q| e[q] * (x[q] + self.dt * r[q])).collect()
        };
        let star = FhnState {
            u: inverse_real(pred(&uh, &ruh, &self.eu), n),
            v: inverse_real(pred(&vh, &rvh, &self.ev), n),
        };
        let r1 = reaction(self.p, &star);
        let (r1u, r1v) = (forward(&r1.u, n), forward(&r1.v, n));
        let corr = |x: &[Complex64], r: &[Complex64], rs: &[Complex64], e: &[f64]| -> Vec<Complex64> {
            (0..x.len())
                .map(|q| e[q] * x[q] + 0.5 * self.dt * (e[q] * r[q] + rs[q]))
                .collect()
        };
        FhnState {
            u: inverse_real(corr(&uh, &ruh, &r1u, &self.eu), n),
            v: inverse_real(corr(&vh, &rvh, &r1v, &self.ev), n),
        }
    }
}

/// Full `(u, v)` states at `t = 0, dt_snapshot, ...`.
pub fn simulate_fhn(params: &FhnParams, init: FhnState) -> Result<Vec<FhnState>> {
    let n = params.n;
    if init.u.len() != n * n || init.v.len() != n * n {
        return Err(Error::Shape(format!("initial state must have {} values per field", n * n)));
    }
    let substeps = (params.dt_snapshot / params.dt_solver).round().max(1.0) as usize;
    let stepper = Stepper::new(params, params.dt_snapshot / substeps as f64);
    let mut state = init;
    let mut out = Vec::with_capacity(params.snapshots);
    out.push(state.clone());
    let mut step = 0;
    for _ in 1..params.snapshots {
        for _ in 0..substeps {
            state = stepper.step(&state);
            step += 1;
            if state.u.iter().chain(&state.v).any(|x| !x.is_finite()) {
                return Err(Error::SolverAbort {
                    step,
                    reason: "non-finite field".into(),
                });
            }
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// Gaussian field restricted to `|k| <= 4`, rescaled affinely onto `[-1, 1]`.
fn low_pass_field(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = forward(&noise, n);
    for (q, z) in spec.iter_mut().enumerate() {
        let (kx, ky) = (wavenumber(q / n, n), wavenumber(q % n, n));
        if kx * kx + ky * ky > 16.0 {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    let field = inverse_real(spec, n);
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        field.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
    } else {
        vec![0.0; field.len()]
    }
}

pub(crate) fn random_state(n: usize, rng: &mut ChaCha8Rng) -> FhnState {
    let u = low_pass_field(n, rng);
    let v = low_pass_field(n, rng);
    FhnState { u, v }
}
