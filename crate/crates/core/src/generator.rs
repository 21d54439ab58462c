//! Per-mode Koopman generators `L_k = S - D_k` with `S` skew-symmetric and
//! `D_k` a positive diagonal that grows linearly in `|k|^2`, their matrix
//! exponentials, and spectrum extraction.
//!
//! Stability argument: for an eigenpair `(lambda, v)` of `S - D`,
//! `Re(lambda) |v|^2 = -v^H D v` because `S + S^T = 0`, so every eigenvalue
//! satisfies `-max(D) <= Re(lambda) <= -min(D)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{eig, expm, expm_adjoint, Complex64, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `L_k = S - D_k`
    Sd,
    /// `L_k = A + diag(b * |k|^2 / k_max^2)`, no structure imposed
    UnconstrainedL,
    /// `L_k = S` for every mode
    SOnly,
    /// `L_k = -D_k`
    DOnly,
}

impl Variant {
    /// Whether the field-of-values stability bound holds by construction.
    pub fn is_stable(self) -> bool {
        !matches!(self, Variant::UnconstrainedL)
    }

    pub fn uses_p(self) -> bool {
        !matches!(self, Variant::DOnly)
    }

    pub fn uses_d(self) -> bool {
        !matches!(self, Variant::SOnly)
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Variant::Sd | Variant::DOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sd => "sd",
            Variant::UnconstrainedL => "unconstrained_l",
            Variant::SOnly => "s_only",
            Variant::DOnly => "d_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(Variant::Sd),
            "unconstrained_l" | "unconstrained" => Ok(Variant::UnconstrainedL),
            "s_only" => Ok(Variant::SOnly),
            "d_only" => Ok(Variant::DOnly),
            other => Err(Error::Config(format!(
                "unknown variant {:?} (expected sd, unconstrained_l, s_only, d_only)",
                other
            ))),
        }
    }
}

pub const PATH_P: &str = "generator.P";
pub const PATH_D: &str = "generator.d";
pub const PATH_ALPHA: &str = "generator.alpha";

/// Raw (pre-softplus) generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub variant: Variant,
    pub r: usize,
    /// Free matrix behind `S`; the full matrix `A` for the unconstrained variant.
    pub p: Option<Mat>,
    /// Base damping; the unconstrained diagonal `b` for the unconstrained variant.
    pub d: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
}

impl GeneratorParams {
    pub fn new(variant: Variant, p: Option<Mat>, d: Option<Vec<f64>>, alpha: Option<Vec<f64>>) -> Result<Self> {
        let r = p
            .as_ref()
            .map(|m| m.rows())
            .or(d.as_ref().map(|v| v.len()))
            .ok_or_else(|| Error::Config("generator has no parameters".into()))?;
        let check = |present: bool, needed: bool, what: &str| -> Result<()> {
            if present != needed {
                return Err(Error::Config(format!(
                    "variant {} {} parameter {}",
                    variant.name(),
                    if needed { "requires" } else { "does not use" },
                    what
                )));
            }
            Ok(())
        };
        check(p.is_some(), variant.uses_p(), "P")?;
        check(d.is_some(), variant.uses_d(), "d")?;
        check(alpha.is_some(), variant.uses_alpha(), "alpha")?;
        if let Some(p) = &p {
            if !p.is_square() || p.rows() != r {
                return Err(Error::Shape(format!("P must be {}x{}", r, r)));
            }
        }
        for v in [&d, &alpha].into_iter().flatten() {
            if v.len() != r {
                return Err(Error::Shape(format!("damping vectors must have length {}", r)));
            }
        }
        Ok(Self {
            variant,
            r,
            p,
            d,
            alpha,
        })
    }

    /// Number of interpretable free parameters.
    pub fn interpretable_count(&self) -> usize {
        interpretable_count(self.variant, self.r)
    }

    /// Smallest base damping `min_i softplus(d_i)`; zero when the variant has none.
    pub fn min_base_damping(&self) -> f64 {
        match (&self.d, self.variant) {
            (Some(d), Variant::Sd | Variant::DOnly) => {
                d.iter().map(|&x| softplus(x)).fold(f64::INFINITY, f64::min)
            }
            _ => 0.0,
        }
    }

    pub fn skew(&self) -> Option<Mat> {
        match self.variant {
            Variant::Sd | Variant::SOnly => self.p.as_ref().map(build_skew),
            _ => None,
        }
    }
}

pub fn interpretable_count(variant: Variant, r: usize) -> usize {
    let skew = r * (r - 1) / 2;
    match variant {
        Variant::Sd => skew + 2 * r,
        Variant::SOnly => skew,
        Variant::DOnly => 2 * r,
        Variant::UnconstrainedL => r * r + r,
    }
}

/// Retained wavevectors `(k_x, k_y)` in `{0..M-1}^2`, in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeGrid {
    pub m: usize,
    pub wavevectors: Vec<(usize, usize)>,
    pub ksq: Vec<f64>,
    pub ksq_max: f64,
}

impl ModeGrid {
    pub fn new(m: usize) -> Self {
        let wavevectors: Vec<(usize, usize)> =
            (0..m).flat_map(|kx| (0..m).map(move |ky| (kx, ky))).collect();
        let ksq = wavevectors
            .iter()
            .map(|&(kx, ky)| (kx * kx + ky * ky) as f64)
            .collect();
        let top = m.saturating_sub(1);
        Self {
            m,
            wavevectors,
            ksq,
            ksq_max: (2 * top * top) as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.wavevectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavevectors.is_empty()
    }

    /// `|k|^2 / k_max^2`, zero on a single-mode grid.
    pub fn ksq_ratio(&self, k: usize) -> f64 {
        if self.ksq_max == 0.0 {
            0.0
        } else {
            self.ksq[k] / self.ksq_max
        }
    }
}

/// `log(1 + e^x)`, switching to `x + log(1 + e^-x)` above 20.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(P - P^T) / 2`, mirrored so that `X + X^T` is exactly zero.
pub fn build_skew(p: &Mat) -> Mat {
    let r = p.rows();
    let mut s = Mat::zeros(r, r);
    for i in 0..r {
        for j in i + 1..r {
            let v = 0.5 * (p[(i, j)] - p[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    s
}

/// Diagonal of `D_k`: `softplus(d) + softplus(alpha) * ksq / ksq_max`.
pub fn build_dissipation(d: &[f64], alpha: &[f64], ksq: f64, ksq_max: f64) -> Vec<f64> {
    let ratio = if ksq_max == 0.0 { 0.0 } else { ksq / ksq_max };
    d.iter()
        .zip(alpha)
        .map(|(&di, &ai)| softplus(di) + softplus(ai) * ratio)
        .collect()
}

/// One `r x r` generator per retained mode, in grid order.
pub fn assemble(params: &GeneratorParams, grid: &ModeGrid) -> Vec<Mat> {
    let r = params.r;
    let skew = params.skew();
    (0..grid.len())
        .map(|k| match params.variant {
            Variant::Sd | Variant::DOnly => {
                let d = params.d.as_deref().expect("validated");
                let alpha = params.alpha.as_deref().expect("validated");
                let diag = build_dissipation(d, alpha, grid.ksq[k], grid.ksq_max);
                let mut l = skew.clone().unwrap_or_else(|| Mat::zeros(r, r));
                for (i, v) in diag.iter().enumerate() {
                    l[(i, i)] -= v;
                }
                l
            }
            Variant::SOnly => skew.clone().expect("validated"),
            Variant::UnconstrainedL => {
                let mut l = params.p.clone().expect("validated");
                let b = params.d.as_deref().expect("validated");
                let ratio = grid.ksq_ratio(k);
                for (i, v) in b.iter().enumerate() {
                    l[(i, i)] += v * ratio;
                }
                l
            }
        })
        .collect()
}

/// `exp(L_k t)` for every mode, as an `(M^2, r, r)` tensor.
pub fn propagator_family(generators: &[Mat], t: f64, variant: Variant) -> Result<Tensor> {
    if t < 0.0 && variant.is_stable() {
        return Err(Error::Contract(format!(
            "negative time {} with stable variant {} would break contractivity",
            t,
            variant.name()
        )));
    }
    let r = generators.first().map_or(0, |g| g.rows());
    let mut data = Vec::with_capacity(generators.len() * r * r);
    for l in generators {
        data.extend_from_slice(expm(&l.scaled(t))?.as_slice());
    }
    Tensor::from_real(&[generators.len(), r, r], data)
}

/// `C_t[k] = exp(L_k t) C_0[k]` for a complex `(r, M, M)` coefficient block.
pub fn propagate(c0: &Tensor, params: &GeneratorParams, grid: &ModeGrid, t: f64) -> Result<Tensor> {
    let (r, m) = (params.r, grid.m);
    if c0.shape() != [r, m, m] || !c0.is_complex() {
        return Err(Error::Shape(format!(
            "propagate expects complex ({}, {}, {}), got {:?}",
            r,
            m,
            m,
            c0.shape()
        )));
    }
    let family = propagator_family(&assemble(params, grid), t, params.variant)?;
    apply_family(c0, &family)
}

/// Applies a precomputed `(M^2, r, r)` propagator family to `(r, M, M)` coefficients.
pub fn apply_family(c0: &Tensor, family: &Tensor) -> Result<Tensor> {
    let (r, mm) = (c0.shape()[0], family.shape()[0]);
    let (cd, pd) = (c0.cx(), family.re());
    let mut out = vec![Complex64::new(0.0, 0.0); r * mm];
    for k in 0..mm {
        let e = &pd[k * r * r..(k + 1) * r * r];
        for i in 0..r {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..r {
                acc += cd[j * mm + k] * e[i * r + j];
            }
            out[i * mm + k] = acc;
        }
    }
    Tensor::from_complex(c0.shape(), out)
}

/// Gradients of the raw generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads {
    pub p: Option<Mat>,
    pub d: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
}

/// Pulls per-mode generator cotangents `dL_k` back to `(P, d, alpha)`.
pub fn assemble_vjp(params: &GeneratorParams, grid: &ModeGrid, dl: &[Mat]) -> GeneratorGrads {
    let r = params.r;
    let mut dsum = Mat::zeros(r, r);
    for g in dl {
        dsum = dsum.add(g);
    }
    let skew_vjp = |ds: &Mat| {
        let mut dp = Mat::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    dp[(i, j)] = 0.5 * (ds[(i, j)] - ds[(j, i)]);
                }
            }
        }
        dp
    };
    match params.variant {
        Variant::Sd | Variant::DOnly => {
            let d = params.d.as_deref().expect("validated");
            let alpha = params.alpha.as_deref().expect("validated");
            let mut dd = vec![0.0; r];
            let mut dalpha = vec![0.0; r];
            for (k, g) in dl.iter().enumerate() {
                let ratio = grid.ksq_ratio(k);
                for i in 0..r {
                    let ddiag = -g[(i, i)];
                    dd[i] += ddiag;
                    dalpha[i] += ddiag * ratio;
                }
            }
            for i in 0..r {
                dd[i] *= sigmoid(d[i]);
                dalpha[i] *= sigmoid(alpha[i]);
            }
            GeneratorGrads {
                p: (params.variant == Variant::Sd).then(|| skew_vjp(&dsum)),
                d: Some(dd),
                alpha: Some(dalpha),
            }
        }
        Variant::SOnly => GeneratorGrads {
            p: Some(skew_vjp(&dsum)),
            d: None,
            alpha: None,
        },
        Variant::UnconstrainedL => {
            let mut db = vec![0.0; r];
            for (k, g) in dl.iter().enumerate() {
                let ratio = grid.ksq_ratio(k);
                for (i, v) in db.iter_mut().enumerate() {
                    *v += g[(i, i)] * ratio;
                }
            }
            GeneratorGrads {
                p: Some(dsum),
                d: Some(db),
                alpha: None,
            }
        }
    }
}

/// Routes propagator cotangents `dE_{k,t}` (one `(M^2, r, r)` tensor per
/// time) through the matrix-exponential adjoint and the assembly map.
pub fn generator_backward(
    params: &GeneratorParams,
    grid: &ModeGrid,
    times: &[f64],
    family_cotangents: &[Tensor],
) -> Result<GeneratorGrads> {
    let r = params.r;
    let generators = assemble(params, grid);
    let mut dl = vec![Mat::zeros(r, r); grid.len()];
    for (&t, cot) in times.iter().zip(family_cotangents) {
        let cd = cot.re();
        for (k, l) in generators.iter().enumerate() {
            let gbar = Mat::from_vec(r, r, cd[k * r * r..(k + 1) * r * r].to_vec())?;
            let scale = gbar.norm1();
            if scale == 0.0 {
                continue;
            }
            // linear in gbar; normalizing keeps the block exponential's norm small
            let adj = expm_adjoint(l, t, &gbar.scaled(1.0 / scale))?;
            dl[k].axpy(scale, &adj);
        }
    }
    Ok(assemble_vjp(params, grid, &dl))
}

/// One eigenvalue of one mode's generator, with its traced branch index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DispersionPoint {
    pub kx: usize,
    pub ky: usize,
    pub ksq: f64,
    pub lambda: Complex64,
    pub branch: usize,
}

fn mode_eigs(params: &GeneratorParams, grid: &ModeGrid) -> Result<Vec<Vec<Complex64>>> {
    assemble(params, grid)
        .iter()
        .enumerate()
        .map(|(k, l)| {
            eig(l).map(|e| e.values).map_err(|err| match err {
                Error::NoConvergence { iterations } => Error::ModeNoConvergence {
                    kx: grid.wavevectors[k].0,
                    ky: grid.wavevectors[k].1,
                    iterations,
                },
                other => other,
            })
        })
        .collect()
}

/// All `r * M^2` eigenvalues, with branches traced along increasing `|k|^2`
/// by greedy nearest-neighbour matching. Output is in grid order, then
/// branch order within each mode.
pub fn spectrum(params: &GeneratorParams, grid: &ModeGrid) -> Result<Vec<DispersionPoint>> {
    let eigs = mode_eigs(params, grid)?;
    let r = params.r;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid.ksq[a]
            .total_cmp(&grid.ksq[b])
            .then(grid.wavevectors[a].cmp(&grid.wavevectors[b]))
    });

    // assigned[k][branch] = eigenvalue
    let mut assigned: Vec<Vec<Complex64>> = vec![Vec::new(); grid.len()];
    let mut previous: Vec<Complex64> = Vec::new();
    for (step, &k) in order.iter().enumerate() {
        let vals = &eigs[k];
        let branches = if step == 0 {
            let mut v = vals.clone();
            v.sort_by(|a, b| a.im.total_cmp(&b.im).then(a.re.total_cmp(&b.re)));
            v
        } else {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(r * r);
            for (b, rep) in previous.iter().enumerate() {
                for (e, val) in vals.iter().enumerate() {
                    pairs.push(((val - rep).norm(), b, e));
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut out = vec![None; r];
            let mut used = vec![false; r];
            for (_, b, e) in pairs {
                if out[b].is_none() && !used[e] {
                    out[b] = Some(vals[e]);
                    used[e] = true;
                }
            }
            out.into_iter().map(|v| v.expect("complete matching")).collect()
        };
        previous = branches.clone();
        assigned[k] = branches;
    }

    let mut points = Vec::with_capacity(r * grid.len());
    for (k, branches) in assigned.into_iter().enumerate() {
        let (kx, ky) = grid.wavevectors[k];
        for (branch, lambda) in branches.into_iter().enumerate() {
            points.push(DispersionPoint {
                kx,
                ky,
                ksq: grid.ksq[k],
                lambda,
                branch,
            });
        }
    }
    Ok(points)
}

fn dominance_key(z: &Complex64) -> (f64, f64, f64) {
    (z.re, z.im.abs(), z.im)
}

/// Per mode, the eigenvalue with the largest real part (ties: larger `|Im|`,
/// then positive `Im`).
pub fn dominant_eigs(params: &GeneratorParams, grid: &ModeGrid) -> Result<Vec<Complex64>> {
    Ok(mode_eigs(params, grid)?
        .into_iter()
        .map(|vals| {
            vals.into_iter()
                .max_by(|a, b| {
                    let (ka, kb) = (dominance_key(a), dominance_key(b));
                    ka.0.total_cmp(&kb.0)
                        .then(ka.1.total_cmp(&kb.1))
                        .then(ka.2.total_cmp(&kb.2))
                })
                .expect("r >= 1")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::singvals;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, sigma: f64) -> Mat {
        let v = (0..r * r).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        Mat::from_vec(r, r, v).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, r: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..r).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn random_sd(rng: &mut ChaCha8Rng, r: usize) -> GeneratorParams {
        let p = random_mat(rng, r, 1.0);
        let d = random_vec(rng, r, -4.0, 2.0);
        let a = random_vec(rng, r, -4.0, 2.0);
        GeneratorParams::new(Variant::Sd, Some(p), Some(d), Some(a)).unwrap()
    }

    fn random_c0(rng: &mut ChaCha8Rng, r: usize, m: usize) -> Tensor {
        let v = (0..r * m * m)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor::from_complex(&[r, m, m], v).unwrap()
    }

    /// softplus^{-1}(y) = ln(e^y - 1)
    fn inv_softplus(y: f64) -> f64 {
        y.exp_m1().ln()
    }

    #[test]
    fn skew_of_symmetric_is_zero() {
        let p = Mat::from_rows(&[&[1.0, 2.0], &[2.0, -3.0]]);
        assert_eq!(build_skew(&p), Mat::zeros(2, 2));
    }

    #[test]
    fn skew_direct_formula() {
        let p = Mat::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        assert_eq!(build_skew(&p), Mat::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]));
    }

    #[test]
    fn skew_is_exact_at_r32() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = build_skew(&random_mat(&mut rng, 32, 1.0));
        assert_eq!(s.add(&s.transpose()), Mat::zeros(32, 32));
        assert_eq!(interpretable_count(Variant::Sd, 32) - 64, 496);
    }

    #[test]
    fn dissipation_endpoints() {
        let zeros = vec![0.0; 4];
        let ln2 = std::f64::consts::LN_2;
        let at0 = build_dissipation(&zeros, &zeros, 0.0, 242.0);
        let atmax = build_dissipation(&zeros, &zeros, 242.0, 242.0);
        assert!(at0.iter().all(|&v| (v - ln2).abs() < 1e-15));
        assert!(atmax.iter().all(|&v| (v - 2.0 * ln2).abs() < 1e-15));
        assert_eq!(interpretable_count(Variant::Sd, 32), 560);
        assert_eq!(2 * 32, 64);
    }

    #[test]
    fn softplus_branches() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((softplus(-3.0) - 0.048_587_351_573_742).abs() < 1e-12);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(20.5) - (20.5 + (-20.5f64).exp().ln_1p())).abs() < 1e-12);
    }

    #[test]
    fn mode_grid_matches_plotted_range() {
        let g = ModeGrid::new(12);
        assert_eq!(g.len(), 144);
        assert_eq!(g.ksq_max, 242.0);
        assert_eq!(g.ksq.iter().cloned().fold(0.0, f64::max), 242.0);
    }

    #[test]
    fn assemble_sd_two_by_two() {
        let p = Mat::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        let d = vec![inv_softplus(0.5), inv_softplus(1.5)];
        let params = GeneratorParams::new(Variant::Sd, Some(p), Some(d), Some(vec![0.0, 0.0])).unwrap();
        let l = &assemble(&params, &ModeGrid::new(2))[0];
        let want = Mat::from_rows(&[&[-0.5, 1.0], &[-1.0, -1.5]]);
        assert!(l.sub(&want).frobenius() < 1e-14, "{:?}", l);
    }

    #[test]
    fn s_only_is_mode_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = GeneratorParams::new(Variant::SOnly, Some(random_mat(&mut rng, 5, 1.0)), None, None).unwrap();
        let ls = assemble(&params, &ModeGrid::new(4));
        assert!(ls.iter().all(|l| l == &ls[0]));
    }

    #[test]
    fn d_only_diagonal_is_linear_in_ksq() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, a) = (random_vec(&mut rng, 3, -2.0, 2.0), random_vec(&mut rng, 3, -2.0, 2.0));
        let params = GeneratorParams::new(Variant::DOnly, None, Some(d), Some(a.clone())).unwrap();
        let grid = ModeGrid::new(3);
        let ls = assemble(&params, &grid);
        let kmax = grid.ksq.iter().position(|&v| v == grid.ksq_max).unwrap();
        for i in 0..3 {
            let diff = ls[0][(i, i)] - ls[kmax][(i, i)];
            assert!((diff - softplus(a[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn variant_parameter_presence_is_checked() {
        assert!(GeneratorParams::new(Variant::SOnly, Some(Mat::zeros(2, 2)), Some(vec![0.0; 2]), None).is_err());
        assert!(GeneratorParams::new(Variant::Sd, Some(Mat::zeros(2, 2)), Some(vec![0.0; 2]), None).is_err());
        assert!(GeneratorParams::new(Variant::DOnly, None, Some(vec![0.0; 2]), Some(vec![0.0; 3])).is_err());
    }

    #[test]
    fn propagate_zero_time_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_sd(&mut rng, 4);
        let grid = ModeGrid::new(3);
        let c0 = random_c0(&mut rng, 4, 3);
        assert_eq!(propagate(&c0, &params, &grid, 0.0).unwrap(), c0);
    }

    #[test]
    fn propagate_d_only_is_elementwise_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, a) = (random_vec(&mut rng, 3, -2.0, 1.0), random_vec(&mut rng, 3, -2.0, 1.0));
        let params = GeneratorParams::new(Variant::DOnly, None, Some(d.clone()), Some(a.clone())).unwrap();
        let grid = ModeGrid::new(3);
        let c0 = random_c0(&mut rng, 3, 3);
        let t = 1.7;
        let ct = propagate(&c0, &params, &grid, t).unwrap();
        for k in 0..grid.len() {
            let diag = build_dissipation(&d, &a, grid.ksq[k], grid.ksq_max);
            for i in 0..3 {
                let want = c0.cx()[i * 9 + k] * (-diag[i] * t).exp();
                assert!((ct.cx()[i * 9 + k] - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn propagate_semigroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_sd(&mut rng, 5);
        let grid = ModeGrid::new(3);
        let c0 = random_c0(&mut rng, 5, 3);
        let two_step = propagate(&propagate(&c0, &params, &grid, 0.4).unwrap(), &params, &grid, 1.1).unwrap();
        let one_step = propagate(&c0, &params, &grid, 1.5).unwrap();
        let err = two_step.cx().iter().zip(one_step.cx()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{}", err);
    }

    #[test]
    fn negative_time_rejected_for_stable_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_sd(&mut rng, 2);
        let c0 = random_c0(&mut rng, 2, 2);
        assert!(matches!(propagate(&c0, &params, &ModeGrid::new(2), -1.0), Err(Error::Contract(_))));
        let un = GeneratorParams::new(Variant::UnconstrainedL, Some(random_mat(&mut rng, 2, 0.5)), Some(vec![0.1, 0.2]), None).unwrap();
        assert!(propagate(&c0, &un, &ModeGrid::new(2), -1.0).is_ok());
    }

    #[test]
    fn contractivity_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let params = random_sd(&mut rng, 6);
            let grid = ModeGrid::new(4);
            let c0 = random_c0(&mut rng, 6, 4);
            let dmin = params.min_base_damping();
            for t in [0.5, 1.0, 5.0, 200.0] {
                let ct = propagate(&c0, &params, &grid, t).unwrap();
                assert!(ct.norm() <= (-t * dmin).exp() * c0.norm() + 1e-10);
            }
        }
    }

    #[test]
    fn commuting_case_is_scaled_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 0.3;
        let p = random_mat(&mut rng, 5, 1.0);
        let params = GeneratorParams::new(Variant::Sd, Some(p), Some(vec![inv_softplus(c); 5]), Some(vec![-800.0; 5])).unwrap();
        let l = &assemble(&params, &ModeGrid::new(1))[0];
        let x: Vec<f64> = random_vec(&mut rng, 5, -1.0, 1.0);
        for t in [0.5, 3.0, 20.0] {
            let e = expm(&l.scaled(t)).unwrap();
            let y = e.matvec(&x);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((ny - (-c * t).exp() * nx).abs() < 1e-10);
        }
    }

    #[test]
    fn stability_for_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = ModeGrid::new(4);
        for _ in 0..20 {
            let params = random_sd(&mut rng, 6);
            let bound = -params.min_base_damping() + 1e-9;
            for p in spectrum(&params, &grid).unwrap() {
                assert!(p.lambda.re <= bound);
            }
        }
    }

    #[test]
    fn spectrum_counts_and_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = ModeGrid::new(12);
        let sd = random_sd(&mut rng, 32);
        assert_eq!(spectrum(&sd, &grid).unwrap().len(), 4608);

        let grid = ModeGrid::new(4);
        let s_only = GeneratorParams::new(Variant::SOnly, Some(random_mat(&mut rng, 8, 0.5)), None, None).unwrap();
        assert!(spectrum(&s_only, &grid).unwrap().iter().all(|p| p.lambda.re.abs() < 1e-12));
        let d_only = GeneratorParams::new(Variant::DOnly, None, Some(random_vec(&mut rng, 8, -3.0, 1.0)), Some(random_vec(&mut rng, 8, -3.0, 1.0))).unwrap();
        assert!(spectrum(&d_only, &grid).unwrap().iter().all(|p| p.lambda.im.abs() < 1e-12));
    }

    #[test]
    fn spectrum_is_conjugate_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = random_sd(&mut rng, 7);
        let grid = ModeGrid::new(3);
        let pts = spectrum(&params, &grid).unwrap();
        for chunk in pts.chunks(7) {
            for p in chunk {
                let found = chunk.iter().any(|q| (q.lambda - p.lambda.conj()).norm() < 1e-9);
                assert!(found);
            }
        }
    }

    #[test]
    fn branch_ids_are_a_permutation_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = random_sd(&mut rng, 6);
        let pts = spectrum(&params, &ModeGrid::new(5)).unwrap();
        for chunk in pts.chunks(6) {
            let mut b: Vec<usize> = chunk.iter().map(|p| p.branch).collect();
            b.sort();
            assert_eq!(b, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dominant_for_d_only_and_sd_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (d, a) = (random_vec(&mut rng, 4, -2.0, 1.0), random_vec(&mut rng, 4, -2.0, 1.0));
        let params = GeneratorParams::new(Variant::DOnly, None, Some(d.clone()), Some(a.clone())).unwrap();
        let grid = ModeGrid::new(3);
        for (k, z) in dominant_eigs(&params, &grid).unwrap().iter().enumerate() {
            let diag = build_dissipation(&d, &a, grid.ksq[k], grid.ksq_max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((z.re + min).abs() < 1e-14 && z.im == 0.0);
        }

        let p = Mat::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        let sd = GeneratorParams::new(Variant::Sd, Some(p), Some(vec![0.0; 2]), Some(vec![0.0; 2])).unwrap();
        let z = dominant_eigs(&sd, &ModeGrid::new(1)).unwrap()[0];
        assert!((z - Complex64::new(-std::f64::consts::LN_2, 1.0)).norm() < 1e-14, "{}", z);
    }

    #[test]
    fn dominant_within_field_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = random_sd(&mut rng, 6);
        let grid = ModeGrid::new(4);
        let d = params.d.clone().unwrap();
        let a = params.alpha.clone().unwrap();
        for (k, z) in dominant_eigs(&params, &grid).unwrap().iter().enumerate() {
            let diag = build_dissipation(&d, &a, grid.ksq[k], grid.ksq_max);
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(z.re >= -max - 1e-12 && z.re <= -min + 1e-12);
        }
    }

    #[test]
    fn skew_singular_values_pair_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for r in [6usize, 7] {
            let s = build_skew(&random_mat(&mut rng, r, 1.0));
            let sv = singvals(&s);
            for pair in sv.chunks(2) {
                if pair.len() == 2 {
                    assert!((pair[0] - pair[1]).abs() < 1e-10);
                } else {
                    assert!(pair[0].abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn assemble_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let grid = ModeGrid::new(3);
        for variant in [Variant::Sd, Variant::SOnly, Variant::DOnly, Variant::UnconstrainedL] {
            let r = 3;
            let params = GeneratorParams::new(
                variant,
                variant.uses_p().then(|| random_mat(&mut rng, r, 1.0)),
                variant.uses_d().then(|| random_vec(&mut rng, r, -1.0, 1.0)),
                variant.uses_alpha().then(|| random_vec(&mut rng, r, -1.0, 1.0)),
            )
            .unwrap();
            let weights: Vec<Mat> = (0..grid.len()).map(|_| random_mat(&mut rng, r, 1.0)).collect();
            let objective = |p: &GeneratorParams| -> f64 {
                assemble(p, &grid)
                    .iter()
                    .zip(&weights)
                    .map(|(l, w)| l.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let grads = assemble_vjp(&params, &grid, &weights);
            let h = 1e-6;
            if let Some(gp) = &grads.p {
                for idx in 0..r * r {
                    let mut plus = params.clone();
                    plus.p.as_mut().unwrap().as_mut_slice()[idx] += h;
                    let mut minus = params.clone();
                    minus.p.as_mut().unwrap().as_mut_slice()[idx] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    assert!((fd - gp.as_slice()[idx]).abs() < 1e-7, "{:?} P[{}]", variant, idx);
                }
            }
            for (which, g) in [(0, &grads.d), (1, &grads.alpha)] {
                let Some(g) = g else { continue };
                for i in 0..r {
                    let bump = |delta: f64| {
                        let mut q = params.clone();
                        let v = if which == 0 { q.d.as_mut() } else { q.alpha.as_mut() };
                        v.unwrap()[i] += delta;
                        objective(&q)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-7, "{:?} vec{} [{}]", variant, which, i);
                }
            }
        }
    }
}
