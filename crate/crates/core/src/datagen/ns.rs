//! Pseudo-spectral vorticity solver on `[0, 2pi)^2`.
//!
//! `dw/dt = -(u . grad) w + nu lap w + f`, with `lap psi = -w`,
//! `u = (dpsi/dy, -dpsi/dx)`. Time stepping is integrating-factor RK4 with
//! the viscous term exact; the advection product is dealiased by the 2/3
//! rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wavenumber;
use crate::error::{Error, Result};
use crate::numkern::{fft2_plane, Complex64, Direction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsParams {
    pub nu: f64,
    pub n: usize,
    pub dt_solver: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
    pub forcing_amp: f64,
    pub seed: u64,
}

impl Default for NsParams {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            n: 32,
            dt_solver: 0.01,
            dt_snapshot: 1.0,
            snapshots: 20,
            forcing_amp: 0.1,
            seed: 0,
        }
    }
}

/// Precomputed spectral operators for one grid and step size.
pub struct NsSolver {
    n: usize,
    dt: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    inv_ksq: Vec<f64>,
    dealias: Vec<bool>,
    e_full: Vec<f64>,
    e_half: Vec<f64>,
    forcing: Vec<Complex64>,
}

fn forward(field: &[f64]) -> Vec<Complex64> {
    let n = (field.len() as f64).sqrt() as usize;
    let mut out: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_plane(&mut out, n, Direction::Forward);
    out
}

fn inverse_real(spec: &[Complex64]) -> Vec<f64> {
    let n = (spec.len() as f64).sqrt() as usize;
    let mut out = spec.to_vec();
    fft2_plane(&mut out, n, Direction::Inverse);
    out.into_iter().map(|z| z.re).collect()
}

impl NsSolver {
    pub fn new(params: &NsParams, dt: f64) -> Self {
        let n = params.n;
        let cutoff = n as f64 / 3.0;
        let mut kx = Vec::with_capacity(n * n);
        let mut ky = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                kx.push(wavenumber(i, n));
                ky.push(wavenumber(j, n));
            }
        }
        let ksq: Vec<f64> = kx.iter().zip(&ky).map(|(a, b)| a * a + b * b).collect();
        let inv_ksq = ksq.iter().map(|&k| if k == 0.0 { 0.0 } else { 1.0 / k }).collect();
        let dealias = kx
            .iter()
            .zip(&ky)
            .map(|(a, b)| a.abs() < cutoff && b.abs() < cutoff)
            .collect();
        let e_full = ksq.iter().map(|k| (-params.nu * k * dt).exp()).collect();
        let e_half = ksq.iter().map(|k| (-params.nu * k * dt * 0.5).exp()).collect();
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let f: Vec<f64> = (0..n * n)
            .map(|p| {
                let (x, y) = ((p / n) as f64 * h, (p % n) as f64 * h);
                params.forcing_amp * ((x + y).sin() + (x + y).cos())
            })
            .collect();
        Self {
            n,
            dt,
            kx,
            ky,
            inv_ksq,
            dealias,
            e_full,
            e_half,
            forcing: forward(&f),
        }
    }

    /// Velocity components in physical space.
    pub fn velocity(&self, w_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let u_hat: Vec<Complex64> = (0..w_hat.len())
            .map(|p| i * self.ky[p] * w_hat[p] * self.inv_ksq[p])
            .collect();
        let v_hat: Vec<Complex64> = (0..w_hat.len())
            .map(|p| -i * self.kx[p] * w_hat[p] * self.inv_ksq[p])
            .collect();
        (inverse_real(&u_hat), inverse_real(&v_hat))
    }

    /// Dealiased `-(u . grad) w + f` in spectral space, with the maximum speed.
    pub fn rhs(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, f64) {
        let i = Complex64::new(0.0, 1.0);
        let (u, v) = self.velocity(w_hat);
        let wx_hat: Vec<Complex64> = (0..w_hat.len()).map(|p| i * self.kx[p] * w_hat[p]).collect();
        let wy_hat: Vec<Complex64> = (0..w_hat.len()).map(|p| i * self.ky[p] * w_hat[p]).collect();
        let (wx, wy) = (inverse_real(&wx_hat), inverse_real(&wy_hat));
        let adv: Vec<f64> = (0..u.len()).map(|p| u[p] * wx[p] + v[p] * wy[p]).collect();
        let speed = u
            .iter()
            .zip(&v)
            .map(|(a, b)| a.abs().max(b.abs()))
            .fold(0.0, f64::max);
        let adv_hat = forward(&adv);
        let out = (0..w_hat.len())
            .map(|p| {
                let a = if self.dealias[p] { adv_hat[p] } else { Complex64::new(0.0, 0.0) };
                self.forcing[p] - a
            })
            .collect();
        (out, speed)
    }

    /// One integrating-factor RK4 step; `step` is only used in diagnostics.
    pub fn step(&self, w_hat: &mut [Complex64], step: usize) -> Result<()> {
        let h = self.dt;
        let dx = 2.0 * std::f64::consts::PI / self.n as f64;
        let (n1, speed) = self.rhs(w_hat);
        let cfl = speed * h / dx;
        if !cfl.is_finite() || cfl > 1.0 {
            return Err(Error::SolverAbort {
                step,
                reason: format!("CFL number {:.3} exceeds 1 (max speed {:.3e}, dt {})", cfl, speed, h),
            });
        }
        let len = w_hat.len();
        let v2: Vec<Complex64> = (0..len).map(|p| self.e_half[p] * (w_hat[p] + 0.5 * h * n1[p])).collect();
        let (n2, _) = self.rhs(&v2);
        let v3: Vec<Complex64> = (0..len).map(|p| self.e_half[p] * w_hat[p] + 0.5 * h * n2[p]).collect();
        let (n3, _) = self.rhs(&v3);
        let v4: Vec<Complex64> = (0..len)
            .map(|p| self.e_full[p] * w_hat[p] + self.e_half[p] * h * n3[p])
            .collect();
        let (n4, _) = self.rhs(&v4);
        for p in 0..len {
            w_hat[p] = self.e_full[p] * w_hat[p]
                + h / 6.0
                    * (self.e_full[p] * n1[p] + 2.0 * self.e_half[p] * (n2[p] + n3[p]) + n4[p]);
        }
        Ok(())
    }
}

/// Vorticity snapshots at `t = 0, dt_snapshot, ...` (`snapshots` of them,
/// starting with `w0`).
pub fn simulate_ns(params: &NsParams, w0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = params.n;
    if w0.len() != n * n {
        return Err(Error::Shape(format!("initial field has {} values, grid needs {}", w0.len(), n * n)));
    }
    let substeps = (params.dt_snapshot / params.dt_solver).round().max(1.0) as usize;
    let solver = NsSolver::new(params, params.dt_snapshot / substeps as f64);
    let mut w_hat = forward(w0);
    let mut out = Vec::with_capacity(params.snapshots);
    out.push(w0.to_vec());
    let mut step = 0;
    for _ in 1..params.snapshots {
        for _ in 0..substeps {
            solver.step(&mut w_hat, step)?;
            step += 1;
        }
        let w = inverse_real(&w_hat);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverAbort {
                step,
                reason: "non-finite vorticity".into(),
            });
        }
        out.push(w);
    }
    Ok(out)
}

/// Zero-mean, unit-variance Gaussian random field with spectral amplitude
/// `(|k|^2 + 9)^(-5/2)`.
pub fn random_vorticity(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = forward(&noise);
    for (p, z) in spec.iter_mut().enumerate() {
        let (kx, ky) = (wavenumber(p / n, n), wavenumber(p % n, n));
        *z *= (kx * kx + ky * ky + 9.0).powf(-2.5);
    }
    spec[0] = Complex64::new(0.0, 0.0);
    let field = inverse_real(&spec);
    let var = field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    field.into_iter().map(|v| v * scale).collect()
}

/// Spatial mean of `w^2`.
pub fn enstrophy(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64
}

#[cfg(test)]
pub(crate) fn spectrum_of(field: &[f64]) -> Vec<Complex64> {
    forward(field)
}
