//! Readouts of a trained generator: spectra, dissipation fits, universality
//! comparisons, long rollouts and evaluation timing.

pub mod render;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::generator::{apply_family, dominant_eigs, softplus, spectrum, DispersionPoint};
use crate::model::{
    decode, encode, forward_with, hermitian_embed, propagators, real_inverse, ModelParams,
};
use crate::numkern::{expm_call_count, linfit, r_squared, singvals, LinFit, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub max_re: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub rows: Vec<DispersionPoint>,
    pub summary: SpectrumSummary,
}

impl SpectrumReport {
    pub fn from_rows(rows: Vec<DispersionPoint>) -> Self {
        let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&DispersionPoint) -> f64| {
            rows.iter().map(g).fold(init, f)
        };
        let summary = SpectrumSummary {
            max_re: fold(f64::max, f64::NEG_INFINITY, |p| p.lambda.re),
            im_min: fold(f64::min, f64::INFINITY, |p| p.lambda.im),
            im_max: fold(f64::max, f64::NEG_INFINITY, |p| p.lambda.im),
            count: rows.len(),
        };
        Self { rows, summary }
    }
}

pub fn spectrum_report(params: &ModelParams) -> Result<SpectrumReport> {
    Ok(SpectrumReport::from_rows(spectrum(&params.generator(), &params.config.grid())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchFit {
    pub branch: usize,
    pub fit: LinFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationFit {
    /// Dominant `Re(lambda)` against `|k|^2`.
    pub dominant: LinFit,
    pub branches: Vec<BranchFit>,
    /// `(ksq, dominant Re(lambda))` per mode, in grid order.
    pub points: Vec<(f64, f64)>,
}

pub fn fit_dissipation(params: &ModelParams) -> Result<DissipationFit> {
    let gen = params.generator();
    let grid = params.config.grid();
    let dom = dominant_eigs(&gen, &grid)?;
    let re: Vec<f64> = dom.iter().map(|z| z.re).collect();
    let dominant = linfit(&grid.ksq, &re)?;
    let rows = spectrum(&gen, &grid)?;
    let mut branches = Vec::with_capacity(gen.r);
    for b in 0..gen.r {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|p| p.branch == b)
            .map(|p| (p.ksq, p.lambda.re))
            .unzip();
        branches.push(BranchFit { branch: b, fit: linfit(&x, &y)? });
    }
    Ok(DissipationFit {
        dominant,
        branches,
        points: grid.ksq.iter().cloned().zip(re).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub singvals_a: Vec<f64>,
    pub singvals_b: Vec<f64>,
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
    pub alpha_a: Vec<f64>,
    pub alpha_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalityReport {
    pub cosine_sim_s: f64,
    pub r2_singvals: f64,
    pub r2_sorted_d: f64,
    pub r2_sorted_alpha: f64,
    /// `[0, 1]`-normalized profiles.
    pub profiles: Profiles,
}

/// Min-max normalization onto `[0, 1]`; a constant profile maps to zeros.
pub fn normalize_profile(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// `<a, b> / (|a| |b|)`; NaN if either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        f64::NAN
    } else {
        dot / (na * nb)
    }
}

fn sorted_softplus(v: Option<&Vec<f64>>, r: usize) -> Vec<f64> {
    let mut out: Vec<f64> = match v {
        Some(v) => v.iter().map(|&x| softplus(x)).collect(),
        None => vec![0.0; r],
    };
    out.sort_by(f64::total_cmp);
    out
}

/// Compares the generators of two models. Profile R² uses model A as the
/// target and model B as the prediction.
pub fn compare_universality(a: &ModelParams, b: &ModelParams) -> Result<UniversalityReport> {
    let (ga, gb) = (a.generator(), b.generator());
    if ga.r != gb.r {
        return Err(Error::Incompatible(format!("channel counts differ: r = {} vs {}", ga.r, gb.r)));
    }
    let r = ga.r;
    let skew = |g: &crate::generator::GeneratorParams| g.skew().unwrap_or_else(|| crate::numkern::Mat::zeros(r, r));
    let (sa, sb) = (skew(&ga), skew(&gb));
    let cosine_sim_s = cosine_similarity(sa.as_slice(), sb.as_slice());
    let profiles = Profiles {
        singvals_a: normalize_profile(&singvals(&sa)),
        singvals_b: normalize_profile(&singvals(&sb)),
        d_a: normalize_profile(&sorted_softplus(ga.d.as_ref(), r)),
        d_b: normalize_profile(&sorted_softplus(gb.d.as_ref(), r)),
        alpha_a: normalize_profile(&sorted_softplus(ga.alpha.as_ref(), r)),
        alpha_b: normalize_profile(&sorted_softplus(gb.alpha.as_ref(), r)),
    };
    Ok(UniversalityReport {
        cosine_sim_s,
        r2_singvals: r_squared(&profiles.singvals_a, profiles.singvals_b.iter().cloned()),
        r2_sorted_d: r_squared(&profiles.d_a, profiles.d_b.iter().cloned()),
        r2_sorted_alpha: r_squared(&profiles.alpha_a, profiles.alpha_b.iter().cloned()),
        profiles,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub t: usize,
    /// Mean over samples of the spatial mean of the decoded field squared.
    pub enstrophy: f64,
    /// Mean over samples of `||C_t||^2`.
    pub latent_energy: f64,
}

/// Decoded enstrophy and latent energy at `t = 1..=t_max` for the given
/// held-out trajectories.
pub fn rollout_energy(params: &ModelParams, dataset: &Dataset, indices: &[usize], t_max: usize) -> Result<Vec<EnergyRow>> {
    if t_max == 0 {
        return Err(Error::Contract("t_max must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Contract("rollout needs at least one sample".into()));
    }
    let cfg = &params.config;
    let states = indices
        .iter()
        .map(|&i| encode(&dataset.window(i, 0, cfg.t_in)?, params))
        .collect::<Result<Vec<_>>>()?;
    let count = states.len() as f64;
    let mut rows = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let props = propagators(params, &[t as f64])?;
        let mut enstrophy = 0.0;
        let mut latent = 0.0;
        for s in &states {
            let ct = apply_family(&s.c0, &props.families[0])?;
            latent += ct.norm_sqr();
            let zt = real_inverse(&hermitian_embed(&s.full_spectrum, &ct)?)?;
            let y = decode(&zt, params)?;
            enstrophy += y.norm_sqr() / y.numel() as f64;
        }
        rows.push(EnergyRow {
            t,
            enstrophy: enstrophy / count,
            latent_energy: latent / count,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub horizon: f64,
    pub wall_ms: f64,
    pub expm_calls: u64,
}

pub const BENCH_WARMUPS: usize = 3;
pub const BENCH_RUNS: usize = 20;

/// Median wall time of `forward(frames, [t])` per horizon, after warmups.
/// Fails if the number of matrix exponentials depends on the horizon.
pub fn bench_time(params: &ModelParams, frames: &Tensor, horizons: &[f64]) -> Result<Vec<BenchRow>> {
    let expected = (params.config.m * params.config.m) as u64;
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let once = || -> Result<u64> {
            let before = expm_call_count();
            let props = propagators(params, &[h])?;
            forward_with(frames, params, &props)?;
            Ok(expm_call_count() - before)
        };
        for _ in 0..BENCH_WARMUPS {
            once()?;
        }
        let mut samples = Vec::with_capacity(BENCH_RUNS);
        let mut calls = 0;
        for _ in 0..BENCH_RUNS {
            let start = Instant::now();
            calls = once()?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        if calls != expected {
            return Err(Error::Contract(format!(
                "horizon {} used {} matrix exponentials, expected {}",
                h, calls, expected
            )));
        }
        samples.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            horizon: h,
            wall_ms: samples[samples.len() / 2],
            expm_calls: calls,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
