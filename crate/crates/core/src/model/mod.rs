//! Encoder, generator propagation and decoder composed into one operator.
//!
//! ```text
//! frames (T_in, n, n) + coords ──lift──> 2 x spectral block ──proj──> Z0 (r, n, n)
//! FFT(Z0) ── {0..M-1}^2 block ──> C0 ── exp(L_k t) ──> C_t ── Hermitian embed ──> Z_t
//! Z_t ── pointwise r -> hidden -> 1 ──> prediction at time t
//! ```

mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    apply_family, assemble, generator_backward, propagator_family, GeneratorParams, ModeGrid, Variant,
    PATH_ALPHA, PATH_D, PATH_P,
};
use crate::gradtape::{NodeId, Tape};
use crate::numkern::{fft2, Complex64, Direction, Dtype, Mat, Tensor};

pub use checkpoint::{load_checkpoint, manifest_path, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest};

pub const SPECTRAL_BLOCKS: usize = 2;
/// Largest tolerated imaginary part after Hermitian reconstruction.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(rename = "T_in")]
    pub t_in: usize,
    #[serde(rename = "T_out")]
    pub t_out: usize,
    pub r: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub w: usize,
    pub hidden: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 64,
            t_in: 10,
            t_out: 10,
            r: 32,
            m: 12,
            w: 32,
            hidden: 128,
            variant: Variant::Sd,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by the gradient harness.
    pub fn tiny() -> Self {
        Self {
            n: 8,
            t_in: 2,
            t_out: 2,
            r: 2,
            m: 2,
            w: 4,
            hidden: 4,
            variant: Variant::Sd,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !self.n.is_power_of_two() {
            return Err(Error::Config(format!("n = {} must be a power of two >= 2", self.n)));
        }
        if self.m == 0 || 2 * self.m > self.n {
            return Err(Error::Config(format!(
                "M = {} violates 1 <= M ≤ n/2 with n = {}",
                self.m, self.n
            )));
        }
        for (key, v) in [
            ("T_in", self.t_in),
            ("T_out", self.t_out),
            ("r", self.r),
            ("w", self.w),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", key)));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> ModeGrid {
        ModeGrid::new(self.m)
    }

    /// Prediction times `1..=T_out` in snapshot units.
    pub fn times(&self) -> Vec<f64> {
        (1..=self.t_out).map(|t| t as f64).collect()
    }

    /// Parameter paths with shapes and dtypes, in initialization order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Dtype)> {
        let (w, r, m, h) = (self.w, self.r, self.m, self.hidden);
        let mut specs = vec![
            ("encoder.lift.weight".to_string(), vec![w, self.t_in + 2], Dtype::Real),
            ("encoder.lift.bias".to_string(), vec![w], Dtype::Real),
        ];
        for j in 0..SPECTRAL_BLOCKS {
            specs.push((format!("encoder.block{}.spectral.weight", j), vec![w, w, m, m], Dtype::Complex));
            specs.push((format!("encoder.block{}.pointwise.weight", j), vec![w, w], Dtype::Real));
            specs.push((format!("encoder.block{}.pointwise.bias", j), vec![w], Dtype::Real));
        }
        specs.push(("encoder.proj.weight".to_string(), vec![r, w], Dtype::Real));
        specs.push(("encoder.proj.bias".to_string(), vec![r], Dtype::Real));
        if self.variant.uses_p() {
            specs.push((PATH_P.to_string(), vec![r, r], Dtype::Real));
        }
        if self.variant.uses_d() {
            specs.push((PATH_D.to_string(), vec![r], Dtype::Real));
        }
        if self.variant.uses_alpha() {
            specs.push((PATH_ALPHA.to_string(), vec![r], Dtype::Real));
        }
        specs.push(("decoder.hidden.weight".to_string(), vec![h, r], Dtype::Real));
        specs.push(("decoder.hidden.bias".to_string(), vec![h], Dtype::Real));
        specs.push(("decoder.out.weight".to_string(), vec![1, h], Dtype::Real));
        specs.push(("decoder.out.bias".to_string(), vec![1], Dtype::Real));
        specs
    }
}

pub fn is_generator_path(path: &str) -> bool {
    path.starts_with("generator.")
}

/// All trainable tensors keyed by stable path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Builds a parameter set from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut out = BTreeMap::new();
        for (path, shape, dtype) in specs {
            let t = tensors
                .remove(&path)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {}", path)))?;
            if t.shape() != shape.as_slice() || t.dtype() != dtype {
                return Err(Error::Incompatible(format!(
                    "{}: expected {:?} {:?}, found {:?} {:?}",
                    path,
                    dtype,
                    shape,
                    t.dtype(),
                    t.shape()
                )));
            }
            out.insert(path, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Incompatible(format!("unexpected parameter {}", extra)));
        }
        Ok(Self { config, tensors: out })
    }

    pub fn get(&self, path: &str) -> &Tensor {
        self.tensors
            .get(path)
            .unwrap_or_else(|| panic!("no parameter {}", path))
    }

    pub fn get_mut(&mut self, path: &str) -> &mut Tensor {
        self.tensors
            .get_mut(path)
            .unwrap_or_else(|| panic!("no parameter {}", path))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::n_components).sum()
    }

    pub fn generator(&self) -> GeneratorParams {
        let r = self.config.r;
        let vec_of = |path: &str| self.tensors.get(path).map(|t| t.re().to_vec());
        let p = self
            .tensors
            .get(PATH_P)
            .map(|t| Mat::from_vec(r, r, t.re().to_vec()).expect("validated shape"));
        GeneratorParams::new(self.config.variant, p, vec_of(PATH_D), vec_of(PATH_ALPHA))
            .expect("validated parameter set")
    }

    pub fn interpretable_count(&self) -> usize {
        self.generator().interpretable_count()
    }

    /// FNV-1a over the bit patterns of every parameter, in path order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for v in t.components() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Seeded initialization.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spectral_scale = 1.0 / (config.w * config.w) as f64;
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut tensors = BTreeMap::new();
    let mut fan_in = 1;
    for (path, shape, dtype) in config.param_specs() {
        let numel: usize = shape.iter().product();
        let t = if path.contains(".spectral.") {
            let data = (0..numel)
                .map(|_| {
                    Complex64::new(
                        spectral_scale * rng.gen::<f64>(),
                        spectral_scale * rng.gen::<f64>(),
                    )
                })
                .collect();
            Tensor::from_complex(&shape, data)?
        } else if path == PATH_P {
            Tensor::from_real(&shape, (0..numel).map(|_| rng.sample(normal)).collect())?
        } else if path == PATH_D || path == PATH_ALPHA {
            Tensor::from_real(&shape, vec![-3.0; numel])?
        } else {
            // weights precede their bias, so the bias reuses the weight's fan-in
            if path.ends_with(".weight") {
                fan_in = shape[1];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_real(&shape, (0..numel).map(|_| rng.gen_range(-bound..bound)).collect())?
        };
        debug_assert_eq!(t.dtype(), dtype);
        tensors.insert(path, t);
    }
    ModelParams::from_tensors(config.clone(), tensors)
}

/// Encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// `(r, n, n)` real observable field
    pub z0: Tensor,
    /// `(r, n, n)` complex FFT of `z0`
    pub full_spectrum: Tensor,
    /// `(r, M, M)` retained block of `full_spectrum`
    pub c0: Tensor,
}

/// Propagator families `exp(L_k t)` for a set of times, shared by every
/// sample evaluated with the same parameters.
#[derive(Clone, Debug)]
pub struct Propagators {
    pub times: Vec<f64>,
    pub families: Vec<Tensor>,
}

/// Evaluates `|times| * M^2` matrix exponentials.
pub fn propagators(params: &ModelParams, times: &[f64]) -> Result<Propagators> {
    if times.is_empty() {
        return Err(Error::Contract("forward needs at least one time".into()));
    }
    let generators = assemble(&params.generator(), &params.config.grid());
    let families = times
        .iter()
        .map(|&t| propagator_family(&generators, t, params.config.variant))
        .collect::<Result<Vec<_>>>()?;
    Ok(Propagators {
        times: times.to_vec(),
        families,
    })
}

fn check_frames(frames: &Tensor, config: &ModelConfig) -> Result<()> {
    let want = [config.t_in, config.n, config.n];
    if frames.shape() != want || frames.is_complex() {
        return Err(Error::Shape(format!(
            "frames must be real {:?}, got {:?}",
            want,
            frames.shape()
        )));
    }
    Ok(())
}

/// Frames followed by the `x/n` and `y/n` coordinate channels.
fn with_coordinates(frames: &Tensor, n: usize) -> Tensor {
    let t_in = frames.shape()[0];
    let mut data = Vec::with_capacity((t_in + 2) * n * n);
    data.extend_from_slice(frames.re());
    data.extend((0..n * n).map(|p| (p / n) as f64 / n as f64));
    data.extend((0..n * n).map(|p| (p % n) as f64 / n as f64));
    Tensor::from_real(&[t_in + 2, n, n], data).expect("consistent shape")
}

/// Node ids of one recorded forward pass.
pub struct SampleGraph {
    pub tape: Tape,
    pub params: BTreeMap<String, NodeId>,
    pub families: Vec<NodeId>,
    pub z0: NodeId,
    pub full_spectrum: NodeId,
    pub c0: NodeId,
    /// One `(r, n, n)` latent field per time.
    pub latents: Vec<NodeId>,
    /// `(|times|, n, n)` prediction volume.
    pub pred: NodeId,
}

fn record_encoder(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    frames: &Tensor,
    config: &ModelConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    let n = config.n;
    let input = tape.leaf(with_coordinates(frames, n));
    let mut h = tape.affine_pointwise(input, ids["encoder.lift.weight"], ids["encoder.lift.bias"])?;
    for j in 0..SPECTRAL_BLOCKS {
        let f = tape.fft2_fwd(h)?;
        let block = tape.mode_truncate(f, config.m)?;
        let mixed = tape.spectral_weight_mul(block, ids[&format!("encoder.block{}.spectral.weight", j)])?;
        let embedded = tape.mode_embed(mixed, None, n, false)?;
        let spectral = tape.fft2_inv(embedded, true)?;
        let pointwise = tape.affine_pointwise(
            h,
            ids[&format!("encoder.block{}.pointwise.weight", j)],
            ids[&format!("encoder.block{}.pointwise.bias", j)],
        )?;
        let sum = tape.add(spectral, pointwise)?;
        h = tape.gelu(sum);
    }
    let z0 = tape.affine_pointwise(h, ids["encoder.proj.weight"], ids["encoder.proj.bias"])?;
    let full = tape.fft2_fwd(z0)?;
    let c0 = tape.mode_truncate(full, config.m)?;
    Ok((z0, full, c0))
}

fn record_decoder(tape: &mut Tape, ids: &BTreeMap<String, NodeId>, zt: NodeId) -> Result<NodeId> {
    tape.mlp_pointwise(
        zt,
        ids["decoder.hidden.weight"],
        ids["decoder.hidden.bias"],
        ids["decoder.out.weight"],
        ids["decoder.out.bias"],
    )
}

fn param_leaves(tape: &mut Tape, params: &ModelParams) -> BTreeMap<String, NodeId> {
    params
        .tensors
        .iter()
        .filter(|(path, _)| !is_generator_path(path))
        .map(|(path, t)| (path.clone(), tape.param(path, t.clone())))
        .collect()
}

/// Records encode, propagation at every precomputed time, and decode.
pub fn record_forward(params: &ModelParams, props: &Propagators, frames: &Tensor) -> Result<SampleGraph> {
    let config = &params.config;
    check_frames(frames, config)?;
    let mut tape = Tape::new();
    let ids = param_leaves(&mut tape, params);
    let (z0, full, c0) = record_encoder(&mut tape, &ids, frames, config)?;
    let mut families = Vec::with_capacity(props.families.len());
    let mut latents = Vec::with_capacity(props.families.len());
    let mut outputs = Vec::with_capacity(props.families.len());
    for family in &props.families {
        let e = tape.leaf(family.clone());
        let ct = tape.matexp_apply(c0, e)?;
        let spectrum = tape.mode_embed(ct, Some(full), config.n, true)?;
        let zt = tape.fft2_inv(spectrum, true)?;
        outputs.push(record_decoder(&mut tape, &ids, zt)?);
        families.push(e);
        latents.push(zt);
    }
    let pred = tape.concat_channels(&outputs)?;
    Ok(SampleGraph {
        tape,
        params: ids,
        families,
        z0,
        full_spectrum: full,
        c0,
        latents,
        pred,
    })
}

/// Prediction volume `(|times|, n, n)`; one propagator family per time.
pub fn forward(frames: &Tensor, params: &ModelParams, times: &[f64]) -> Result<Tensor> {
    let props = propagators(params, times)?;
    forward_with(frames, params, &props)
}

pub fn forward_with(frames: &Tensor, params: &ModelParams, props: &Propagators) -> Result<Tensor> {
    let g = record_forward(params, props, frames)?;
    Ok(g.tape.value(g.pred).clone())
}

pub fn encode(frames: &Tensor, params: &ModelParams) -> Result<LatentState> {
    check_frames(frames, &params.config)?;
    let mut tape = Tape::new();
    let ids = param_leaves(&mut tape, params);
    let (z0, full, c0) = record_encoder(&mut tape, &ids, frames, &params.config)?;
    Ok(LatentState {
        z0: tape.value(z0).clone(),
        full_spectrum: tape.value(full).clone(),
        c0: tape.value(c0).clone(),
    })
}

/// Coefficients `C_t` of the retained block.
pub fn propagate_latent(state: &LatentState, params: &ModelParams, t: f64) -> Result<Tensor> {
    let props = propagators(params, &[t])?;
    apply_family(&state.c0, &props.families[0])
}

/// Writes `c_t` into a copy of the full spectrum and restores Hermitian
/// symmetry from the retained block.
pub fn hermitian_embed(full_spectrum: &Tensor, ct: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let base = tape.leaf(full_spectrum.clone());
    let block = tape.leaf(ct.clone());
    let n = full_spectrum.shape()[1];
    let out = tape.mode_embed(block, Some(base), n, true)?;
    Ok(tape.value(out).clone())
}

/// Real inverse FFT, failing if the discarded imaginary part exceeds
/// [`IMAG_RESIDUE_TOL`].
pub fn real_inverse(spectrum: &Tensor) -> Result<Tensor> {
    let field = fft2(spectrum, Direction::Inverse)?;
    let residue = field.cx().iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue >= IMAG_RESIDUE_TOL {
        return Err(Error::Contract(format!(
            "reconstructed field has imaginary residue {:.3e}",
            residue
        )));
    }
    Ok(field.real_part())
}

/// Latent field `Z_t` in physical space.
pub fn spectral_step(state: &LatentState, params: &ModelParams, t: f64) -> Result<Tensor> {
    let ct = propagate_latent(state, params, t)?;
    real_inverse(&hermitian_embed(&state.full_spectrum, &ct)?)
}

/// Pointwise decoder `(r, n, n) -> (n, n)`.
pub fn decode(zt: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let r = params.config.r;
    if zt.shape().len() != 3 || zt.shape()[0] != r {
        return Err(Error::Shape(format!("decode expects {} channels, got {:?}", r, zt.shape())));
    }
    let mut tape = Tape::new();
    let ids = param_leaves(&mut tape, params);
    let x = tape.leaf(zt.clone());
    let y = record_decoder(&mut tape, &ids, x)?;
    let (n0, n1) = (zt.shape()[1], zt.shape()[2]);
    tape.value(y).clone().reshape(&[n0, n1])
}

/// Loss and unreduced gradients of one sample.
pub struct SampleGrads {
    pub loss: f64,
    /// Gradients of every non-generator parameter.
    pub params: BTreeMap<String, Tensor>,
    /// Cotangents of the propagator families, one per time.
    pub families: Vec<Tensor>,
}

pub fn sample_grads(
    params: &ModelParams,
    props: &Propagators,
    frames: &Tensor,
    target: &Tensor,
) -> Result<SampleGrads> {
    let mut g = record_forward(params, props, frames)?;
    let loss = g.tape.rel_l2_loss(g.pred, target)?;
    let mut grads = g.tape.backward(loss)?;
    let families = g
        .families
        .iter()
        .map(|&id| {
            grads
                .take_leaf(id)
                .unwrap_or_else(|| Tensor::zeros(g.tape.value(id).shape(), Dtype::Real))
        })
        .collect();
    let loss = g.tape.value(loss).re()[0];
    let mut named = grads.into_named();
    for (path, &id) in &g.params {
        named
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros_like(g.tape.value(id)));
    }
    Ok(SampleGrads {
        loss,
        params: named,
        families,
    })
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction follows sample order, so the result does not
/// depend on the thread count.
pub fn batch_grads(
    params: &ModelParams,
    props: &Propagators,
    samples: &[(&Tensor, &Tensor)],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_sample: Vec<SampleGrads> = samples
        .par_iter()
        .map(|(x, y)| sample_grads(params, props, x, y))
        .collect::<Result<_>>()?;
    let scale = 1.0 / samples.len() as f64;
    let mut iter = per_sample.into_iter();
    let first = iter.next().expect("non-empty");
    let (mut loss, mut grads, mut families) = (first.loss, first.params, first.families);
    for s in iter {
        loss += s.loss;
        for (path, g) in s.params {
            grads.get_mut(&path).expect("same parameter set").add_assign(&g);
        }
        for (acc, f) in families.iter_mut().zip(&s.families) {
            acc.add_assign(f);
        }
    }
    for g in grads.values_mut() {
        g.scale(scale);
    }
    for f in &mut families {
        f.scale(scale);
    }
    let gen = params.generator();
    let gg = generator_backward(&gen, &params.config.grid(), &props.times, &families)?;
    let r = params.config.r;
    if let Some(p) = gg.p {
        grads.insert(PATH_P.into(), Tensor::from_real(&[r, r], p.into_vec())?);
    }
    if let Some(d) = gg.d {
        grads.insert(PATH_D.into(), Tensor::from_real(&[r], d)?);
    }
    if let Some(a) = gg.alpha {
        grads.insert(PATH_ALPHA.into(), Tensor::from_real(&[r], a)?);
    }
    Ok((loss * scale, grads))
}

/// Relative L2 loss of one sample and its gradient with respect to every
/// parameter path.
pub fn loss_and_grads(
    params: &ModelParams,
    frames: &Tensor,
    target: &Tensor,
    times: &[f64],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let props = propagators(params, times)?;
    batch_grads(params, &props, &[(frames, target)])
}

/// Relative L2 loss of one sample without gradients.
pub fn sample_loss(params: &ModelParams, props: &Propagators, frames: &Tensor, target: &Tensor) -> Result<f64> {
    let pred = forward_with(frames, params, props)?;
    crate::train::relative_l2(&pred, target)
}

#[cfg(test)]
mod tests;
