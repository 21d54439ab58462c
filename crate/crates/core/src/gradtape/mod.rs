//! Define-by-run reverse-mode differentiation over the fixed operator set of
//! the model's forward pass.
//!
//! A [`Tape`] records nodes in creation order, which is a topological order,
//! so [`Tape::backward`] only needs a single reverse sweep. Complex tensors
//! are differentiated as pairs of real tensors: the cotangent of a complex
//! value `z` stores `dL/d(re z)` and `dL/d(im z)` in its real and imaginary
//! slots.

mod check;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkern::{fft2_plane, Complex64, Direction, Dtype, Tensor};

pub use check::{check_gradients, fd_compare, relative_error, resolution_floor, GradReport, TensorReport};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    AffinePointwise,
    Gelu,
    SpectralWeightMul,
    Fft2Fwd,
    Fft2Inv,
    ModeTruncate,
    ModeEmbed,
    MatexpApply,
    MlpPointwise,
    RelL2Loss,
    Add,
    ConcatChannels,
}

enum Op {
    Leaf { name: Option<String> },
    /// inputs: x (c_in, n, n), weight (c_out, c_in), bias (c_out)
    AffinePointwise,
    Gelu { deriv: Vec<f64> },
    /// inputs: x (c_in, m, m) complex, weight (c_in, c_out, m, m) complex
    SpectralWeightMul,
    Fft2Fwd { real_input: bool },
    Fft2Inv,
    ModeTruncate { m: usize },
    /// inputs: block (c, m, m) [, base (c, n, n)]
    ModeEmbed { n: usize, hermitian: bool },
    /// inputs: c0 (r, m, m) complex, propagators (m*m, r, r) real
    MatexpApply,
    /// inputs: x (c, n, n), w1 (h, c), b1 (h), w2 (o, h), b2 (o)
    MlpPointwise { act: Vec<f64>, deriv: Vec<f64> },
    RelL2Loss { target: Tensor, diff_norm: f64, target_norm: f64 },
    Add,
    ConcatChannels { sizes: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::AffinePointwise => OpKind::AffinePointwise,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::SpectralWeightMul => OpKind::SpectralWeightMul,
            Op::Fft2Fwd { .. } => OpKind::Fft2Fwd,
            Op::Fft2Inv => OpKind::Fft2Inv,
            Op::ModeTruncate { .. } => OpKind::ModeTruncate,
            Op::ModeEmbed { .. } => OpKind::ModeEmbed,
            Op::MatexpApply => OpKind::MatexpApply,
            Op::MlpPointwise { .. } => OpKind::MlpPointwise,
            Op::RelL2Loss { .. } => OpKind::RelL2Loss,
            Op::Add => OpKind::Add,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Cotangents of every leaf reached by a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Tensor>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id)
    }

    pub fn take_leaf(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_leaf.remove(&id)
    }

    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_leaf.get(id))
    }

    /// Gradients keyed by parameter path.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .filter_map(|(name, id)| self.by_leaf.remove(&id).map(|g| (name, g)))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * 0.398_942_280_401_432_7;
    (x * cdf, cdf + x * pdf)
}

/// Exact GELU `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::Shape(format!("{}: {}", what, detail))
}

fn conj_index(k: usize, n: usize) -> usize {
    (n - k) % n
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    /// Unnamed leaf (inputs, constants, or values whose cotangent is
    /// collected by id).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { name: None }, vec![], value)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            vec![],
            value,
        )
    }

    pub fn affine_pointwise(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[0] || bv.shape() != [ws[0]] {
            return Err(shape_err(
                "affine_pointwise",
                format!("x {:?}, weight {:?}, bias {:?}", xs, ws, bv.shape()),
            ));
        }
        let (c_in, c_out, p) = (xs[0], ws[0], xs[1] * xs[2]);
        let (xd, wd, bd) = (xv.re(), wv.re(), bv.re());
        let mut out = vec![0.0; c_out * p];
        for o in 0..c_out {
            let row = &mut out[o * p..(o + 1) * p];
            row.fill(bd[o]);
            for i in 0..c_in {
                let w = wd[o * c_in + i];
                for (y, xval) in row.iter_mut().zip(&xd[i * p..(i + 1) * p]) {
                    *y += w * xval;
                }
            }
        }
        let value = Tensor::from_real(&[c_out, xs[1], xs[2]], out)?;
        Ok(self.push(Op::AffinePointwise, vec![x, weight, bias], value))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.numel());
        let mut deriv = Vec::with_capacity(xv.numel());
        for &v in xv.re() {
            let (g, d) = gelu_parts(v);
            out.push(g);
            deriv.push(d);
        }
        let value = Tensor::from_real(xv.shape(), out).expect("same shape");
        self.push(Op::Gelu { deriv }, vec![x], value)
    }

    pub fn spectral_weight_mul(&mut self, x: NodeId, weight: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3
            || ws.len() != 4
            || ws[0] != xs[0]
            || ws[2] != xs[1]
            || ws[3] != xs[2]
            || !xv.is_complex()
            || !wv.is_complex()
        {
            return Err(shape_err(
                "spectral_weight_mul",
                format!("x {:?}, weight {:?}", xs, ws),
            ));
        }
        let (c_in, c_out, mm) = (ws[0], ws[1], ws[2] * ws[3]);
        let (xd, wd) = (xv.cx(), wv.cx());
        let mut out = vec![Complex64::new(0.0, 0.0); c_out * mm];
        for i in 0..c_in {
            let xi = &xd[i * mm..(i + 1) * mm];
            for o in 0..c_out {
                let w = &wd[(i * c_out + o) * mm..(i * c_out + o + 1) * mm];
                for ((y, a), b) in out[o * mm..(o + 1) * mm].iter_mut().zip(xi).zip(w) {
                    *y += a * b;
                }
            }
        }
        let value = Tensor::from_complex(&[c_out, xs[1], xs[2]], out)?;
        Ok(self.push(Op::SpectralWeightMul, vec![x, weight], value))
    }

    fn planes(shape: &[usize]) -> Result<usize> {
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(shape_err("fft2", format!("need trailing square axes, got {:?}", shape)));
        }
        Ok(shape[shape.len() - 1])
    }

    pub fn fft2_fwd(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let n = Self::planes(xv.shape())?;
        let real_input = !xv.is_complex();
        let mut value = xv.to_complex();
        for plane in value.cx_mut().chunks_mut(n * n) {
            fft2_plane(plane, n, Direction::Forward);
        }
        Ok(self.push(Op::Fft2Fwd { real_input }, vec![x], value))
    }

    /// Inverse FFT (with `1/n^2`); `real_output` keeps only the real part.
    pub fn fft2_inv(&mut self, x: NodeId, real_output: bool) -> Result<NodeId> {
        let xv = self.value(x);
        let n = Self::planes(xv.shape())?;
        let mut value = xv.to_complex();
        for plane in value.cx_mut().chunks_mut(n * n) {
            fft2_plane(plane, n, Direction::Inverse);
        }
        if real_output {
            value = value.real_part();
        }
        Ok(self.push(Op::Fft2Inv, vec![x], value))
    }

    /// Keeps the `{0..m-1}^2` block of each `n x n` plane.
    pub fn mode_truncate(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 3 || xs[1] != xs[2] || m > xs[1] || !xv.is_complex() {
            return Err(shape_err("mode_truncate", format!("x {:?}, m {}", xs, m)));
        }
        let (c, n) = (xs[0], xs[1]);
        let xd = xv.cx();
        let mut out = Vec::with_capacity(c * m * m);
        for ch in 0..c {
            for i in 0..m {
                out.extend_from_slice(&xd[ch * n * n + i * n..ch * n * n + i * n + m]);
            }
        }
        let value = Tensor::from_complex(&[c, m, m], out)?;
        Ok(self.push(Op::ModeTruncate { m }, vec![x], value))
    }

    /// Writes an `m x m` block into the `{0..m-1}^2` corner of an `n x n`
    /// spectrum (zeros, or a copy of `base`). With `hermitian`, every block
    /// coefficient at `k != 0` is also written conjugated at `-k`, so a
    /// Hermitian base stays Hermitian.
    pub fn mode_embed(
        &mut self,
        block: NodeId,
        base: Option<NodeId>,
        n: usize,
        hermitian: bool,
    ) -> Result<NodeId> {
        let bv = self.value(block);
        let bs = bv.shape();
        if bs.len() != 3 || bs[1] != bs[2] || 2 * bs[1] > n || !bv.is_complex() {
            return Err(shape_err("mode_embed", format!("block {:?}, n {}", bs, n)));
        }
        let (c, m) = (bs[0], bs[1]);
        let mut out = match base {
            Some(b) => {
                let basev = self.value(b);
                if basev.shape() != [c, n, n] || !basev.is_complex() {
                    return Err(shape_err(
                        "mode_embed",
                        format!("base {:?} vs expected {:?}", basev.shape(), [c, n, n]),
                    ));
                }
                basev.cx().to_vec()
            }
            None => vec![Complex64::new(0.0, 0.0); c * n * n],
        };
        let bd = bv.cx();
        for ch in 0..c {
            let plane = &mut out[ch * n * n..(ch + 1) * n * n];
            for i in 0..m {
                for j in 0..m {
                    let z = bd[ch * m * m + i * m + j];
                    plane[i * n + j] = z;
                    if hermitian && (i, j) != (0, 0) {
                        plane[conj_index(i, n) * n + conj_index(j, n)] = z.conj();
                    }
                }
            }
        }
        let value = Tensor::from_complex(&[c, n, n], out)?;
        let mut inputs = vec![block];
        inputs.extend(base);
        Ok(self.push(Op::ModeEmbed { n, hermitian }, inputs, value))
    }

    /// Per retained mode `k`, applies the real matrix `props[k]` to the real
    /// and imaginary parts of `c0[:, k]`.
    pub fn matexp_apply(&mut self, c0: NodeId, props: NodeId) -> Result<NodeId> {
        let (cv, pv) = (self.value(c0), self.value(props));
        let (cs, ps) = (cv.shape(), pv.shape());
        if cs.len() != 3
            || ps.len() != 3
            || ps[0] != cs[1] * cs[2]
            || ps[1] != cs[0]
            || ps[2] != cs[0]
            || !cv.is_complex()
            || pv.is_complex()
        {
            return Err(shape_err("matexp_apply", format!("c0 {:?}, propagators {:?}", cs, ps)));
        }
        let (r, mm) = (cs[0], ps[0]);
        let (cd, pd) = (cv.cx(), pv.re());
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
        let value = Tensor::from_complex(cs, out)?;
        Ok(self.push(Op::MatexpApply, vec![c0, props], value))
    }

    /// Pointwise two-layer network `w2 * gelu(w1 * x + b1) + b2`.
    pub fn mlp_pointwise(
        &mut self,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (w1v, b1v, w2v, b2v) = (self.value(w1), self.value(b1), self.value(w2), self.value(b2));
        let xs = xv.shape();
        let (h, o) = (w1v.shape()[0], w2v.shape()[0]);
        if xs.len() != 3
            || w1v.shape() != [h, xs[0]]
            || b1v.shape() != [h]
            || w2v.shape() != [o, h]
            || b2v.shape() != [o]
        {
            return Err(shape_err(
                "mlp_pointwise",
                format!(
                    "x {:?}, w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    xs,
                    w1v.shape(),
                    b1v.shape(),
                    w2v.shape(),
                    b2v.shape()
                ),
            ));
        }
        let (c, p) = (xs[0], xs[1] * xs[2]);
        let (xd, w1d, b1d, w2d, b2d) = (xv.re(), w1v.re(), b1v.re(), w2v.re(), b2v.re());
        let mut act = vec![0.0; h * p];
        let mut deriv = vec![0.0; h * p];
        let mut pre = vec![0.0; p];
        for hh in 0..h {
            pre.fill(b1d[hh]);
            for ch in 0..c {
                let w = w1d[hh * c + ch];
                for (y, xval) in pre.iter_mut().zip(&xd[ch * p..(ch + 1) * p]) {
                    *y += w * xval;
                }
            }
            for (idx, &v) in pre.iter().enumerate() {
                let (g, d) = gelu_parts(v);
                act[hh * p + idx] = g;
                deriv[hh * p + idx] = d;
            }
        }
        let mut out = vec![0.0; o * p];
        for oo in 0..o {
            let row = &mut out[oo * p..(oo + 1) * p];
            row.fill(b2d[oo]);
            for hh in 0..h {
                let w = w2d[oo * h + hh];
                for (y, a) in row.iter_mut().zip(&act[hh * p..(hh + 1) * p]) {
                    *y += w * a;
                }
            }
        }
        let value = Tensor::from_real(&[o, xs[1], xs[2]], out)?;
        Ok(self.push(Op::MlpPointwise { act, deriv }, vec![x, w1, b1, w2, b2], value))
    }

    /// `||pred - target||_F / ||target||_F` as a scalar node.
    pub fn rel_l2_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.is_complex() || target.is_complex() {
            return Err(shape_err(
                "rel_l2_loss",
                format!("pred {:?}, target {:?}", pv.shape(), target.shape()),
            ));
        }
        let target_norm = target.norm();
        if target_norm == 0.0 {
            return Err(Error::DegenerateTarget);
        }
        let diff_norm = pv
            .re()
            .iter()
            .zip(target.re())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let value = Tensor::scalar(diff_norm / target_norm);
        Ok(self.push(
            Op::RelL2Loss {
                target: target.clone(),
                diff_norm,
                target_norm,
            },
            vec![pred],
            value,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.dtype() != bv.dtype() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Concatenates real tensors along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] || v.is_complex() {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs trailing {:?}", v.shape(), tail),
                ));
            }
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.re());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend(&tail);
        let value = Tensor::from_real(&shape, data)?;
        Ok(self.push(Op::ConcatChannels { sizes }, parts.to_vec(), value))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.is_complex() {
            return Err(Error::Contract(format!(
                "backward needs a real scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = Tensor::from_real(lv.shape(), vec![1.0])?;
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product of every leaf with respect to `output`,
    /// seeded with cotangent `seed` (same shape and dtype as the output).
    pub fn backward_from(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let ov = self.value(output);
        if ov.shape() != seed.shape() || ov.dtype() != seed.dtype() {
            return Err(Error::Contract(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                ov.shape()
            )));
        }
        let mut cot: Vec<Option<Tensor>> = (0..=output).map(|_| None).collect();
        cot[output] = Some(seed);

        let mut grads = Gradients::default();
        for id in (0..=output).rev() {
            let Some(g) = cot[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf { name } = &node.op {
                if let Some(name) = name {
                    grads.names.insert(name.clone(), id);
                }
                grads.by_leaf.insert(id, g);
                continue;
            }
            for (input, contribution) in self.vjp(node, &g)? {
                match &mut cot[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(grads)
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let inp = &node.inputs;
        let out = match &node.op {
            Op::Leaf { .. } => vec![],
            Op::AffinePointwise => {
                let (xv, wv) = (self.value(inp[0]), self.value(inp[1]));
                let (c_in, c_out) = (xv.shape()[0], wv.shape()[0]);
                let p = xv.numel() / c_in;
                let (xd, wd, gd) = (xv.re(), wv.re(), g.re());
                let mut dx = vec![0.0; c_in * p];
                let mut dw = vec![0.0; c_out * c_in];
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    let go = &gd[o * p..(o + 1) * p];
                    db[o] = go.iter().sum();
                    for i in 0..c_in {
                        let xi = &xd[i * p..(i + 1) * p];
                        dw[o * c_in + i] = go.iter().zip(xi).map(|(a, b)| a * b).sum();
                        let w = wd[o * c_in + i];
                        for (d, gv) in dx[i * p..(i + 1) * p].iter_mut().zip(go) {
                            *d += w * gv;
                        }
                    }
                }
                vec![
                    (inp[0], Tensor::from_real(xv.shape(), dx)?),
                    (inp[1], Tensor::from_real(wv.shape(), dw)?),
                    (inp[2], Tensor::from_real(&[c_out], db)?),
                ]
            }
            Op::Gelu { deriv } => {
                let dx = g.re().iter().zip(deriv).map(|(a, b)| a * b).collect();
                vec![(inp[0], Tensor::from_real(g.shape(), dx)?)]
            }
            Op::SpectralWeightMul => {
                let (xv, wv) = (self.value(inp[0]), self.value(inp[1]));
                let ws = wv.shape();
                let (c_in, c_out, mm) = (ws[0], ws[1], ws[2] * ws[3]);
                let (xd, wd, gd) = (xv.cx(), wv.cx(), g.cx());
                let mut dx = vec![Complex64::new(0.0, 0.0); c_in * mm];
                let mut dw = vec![Complex64::new(0.0, 0.0); c_in * c_out * mm];
                for i in 0..c_in {
                    for o in 0..c_out {
                        let base = (i * c_out + o) * mm;
                        for k in 0..mm {
                            let go = gd[o * mm + k];
                            dx[i * mm + k] += go * wd[base + k].conj();
                            dw[base + k] = go * xd[i * mm + k].conj();
                        }
                    }
                }
                vec![
                    (inp[0], Tensor::from_complex(xv.shape(), dx)?),
                    (inp[1], Tensor::from_complex(ws, dw)?),
                ]
            }
            Op::Fft2Fwd { real_input } => {
                // adjoint of the unnormalized DFT is n^2 * inverse
                let n = g.shape()[g.shape().len() - 1];
                let mut dx = g.clone();
                let scale = (n * n) as f64;
                for plane in dx.cx_mut().chunks_mut(n * n) {
                    fft2_plane(plane, n, Direction::Inverse);
                    plane.iter_mut().for_each(|z| *z *= scale);
                }
                if *real_input {
                    dx = dx.real_part();
                }
                vec![(inp[0], dx)]
            }
            Op::Fft2Inv => {
                let input_real = !self.value(inp[0]).is_complex();
                let n = g.shape()[g.shape().len() - 1];
                let mut dx = g.to_complex();
                let scale = 1.0 / (n * n) as f64;
                for plane in dx.cx_mut().chunks_mut(n * n) {
                    fft2_plane(plane, n, Direction::Forward);
                    plane.iter_mut().for_each(|z| *z *= scale);
                }
                if input_real {
                    dx = dx.real_part();
                }
                vec![(inp[0], dx)]
            }
            Op::ModeTruncate { m } => {
                let xs = self.value(inp[0]).shape();
                let (c, n, m) = (xs[0], xs[1], *m);
                let mut dx = Tensor::zeros(xs, Dtype::Complex);
                let (dd, gd) = (dx.cx_mut(), g.cx());
                for ch in 0..c {
                    for i in 0..m {
                        dd[ch * n * n + i * n..ch * n * n + i * n + m]
                            .copy_from_slice(&gd[ch * m * m + i * m..ch * m * m + (i + 1) * m]);
                    }
                }
                vec![(inp[0], dx)]
            }
            Op::ModeEmbed { n, hermitian } => {
                let bs = self.value(inp[0]).shape();
                let (c, m, n) = (bs[0], bs[1], *n);
                let gd = g.cx();
                let mut db = vec![Complex64::new(0.0, 0.0); c * m * m];
                let mut dbase = inp.get(1).map(|_| gd.to_vec());
                for ch in 0..c {
                    let gp = &gd[ch * n * n..(ch + 1) * n * n];
                    for i in 0..m {
                        for j in 0..m {
                            let mut acc = gp[i * n + j];
                            if let Some(base) = dbase.as_mut() {
                                base[ch * n * n + i * n + j] = Complex64::new(0.0, 0.0);
                            }
                            if *hermitian && (i, j) != (0, 0) {
                                let mirror = conj_index(i, n) * n + conj_index(j, n);
                                acc += gp[mirror].conj();
                                if let Some(base) = dbase.as_mut() {
                                    base[ch * n * n + mirror] = Complex64::new(0.0, 0.0);
                                }
                            }
                            db[ch * m * m + i * m + j] = acc;
                        }
                    }
                }
                let mut v = vec![(inp[0], Tensor::from_complex(bs, db)?)];
                if let Some(base) = dbase {
                    v.push((inp[1], Tensor::from_complex(&[c, n, n], base)?));
                }
                v
            }
            Op::MatexpApply => {
                let (cv, pv) = (self.value(inp[0]), self.value(inp[1]));
                let (r, mm) = (cv.shape()[0], pv.shape()[0]);
                let (cd, pd, gd) = (cv.cx(), pv.re(), g.cx());
                let mut dc = vec![Complex64::new(0.0, 0.0); r * mm];
                let mut dp = vec![0.0; mm * r * r];
                for k in 0..mm {
                    let e = &pd[k * r * r..(k + 1) * r * r];
                    let de = &mut dp[k * r * r..(k + 1) * r * r];
                    for i in 0..r {
                        let gi = gd[i * mm + k];
                        for j in 0..r {
                            let cj = cd[j * mm + k];
                            // vector cotangent through E^T
                            dc[j * mm + k] += gi * e[i * r + j];
                            de[i * r + j] = gi.re * cj.re + gi.im * cj.im;
                        }
                    }
                }
                vec![
                    (inp[0], Tensor::from_complex(cv.shape(), dc)?),
                    (inp[1], Tensor::from_real(pv.shape(), dp)?),
                ]
            }
            Op::MlpPointwise { act, deriv } => {
                let xv = self.value(inp[0]);
                let (w1v, w2v) = (self.value(inp[1]), self.value(inp[3]));
                let (c, h, o) = (xv.shape()[0], w1v.shape()[0], w2v.shape()[0]);
                let p = xv.numel() / c;
                let (xd, w1d, w2d, gd) = (xv.re(), w1v.re(), w2v.re(), g.re());
                let mut dw2 = vec![0.0; o * h];
                let mut db2 = vec![0.0; o];
                let mut dpre = vec![0.0; h * p];
                for oo in 0..o {
                    let go = &gd[oo * p..(oo + 1) * p];
                    db2[oo] = go.iter().sum();
                    for hh in 0..h {
                        let a = &act[hh * p..(hh + 1) * p];
                        dw2[oo * h + hh] = go.iter().zip(a).map(|(x, y)| x * y).sum();
                        let w = w2d[oo * h + hh];
                        for (d, gv) in dpre[hh * p..(hh + 1) * p].iter_mut().zip(go) {
                            *d += w * gv;
                        }
                    }
                }
                for (d, dv) in dpre.iter_mut().zip(deriv) {
                    *d *= dv;
                }
                let mut dw1 = vec![0.0; h * c];
                let mut db1 = vec![0.0; h];
                let mut dx = vec![0.0; c * p];
                for hh in 0..h {
                    let dh = &dpre[hh * p..(hh + 1) * p];
                    db1[hh] = dh.iter().sum();
                    for ch in 0..c {
                        let xc = &xd[ch * p..(ch + 1) * p];
                        dw1[hh * c + ch] = dh.iter().zip(xc).map(|(a, b)| a * b).sum();
                        let w = w1d[hh * c + ch];
                        for (d, dv) in dx[ch * p..(ch + 1) * p].iter_mut().zip(dh) {
                            *d += w * dv;
                        }
                    }
                }
                vec![
                    (inp[0], Tensor::from_real(xv.shape(), dx)?),
                    (inp[1], Tensor::from_real(&[h, c], dw1)?),
                    (inp[2], Tensor::from_real(&[h], db1)?),
                    (inp[3], Tensor::from_real(&[o, h], dw2)?),
                    (inp[4], Tensor::from_real(&[o], db2)?),
                ]
            }
            Op::RelL2Loss {
                target,
                diff_norm,
                target_norm,
            } => {
                let pv = self.value(inp[0]);
                let scale = if *diff_norm == 0.0 {
                    0.0
                } else {
                    g.re()[0] / (diff_norm * target_norm)
                };
                let dx = pv
                    .re()
                    .iter()
                    .zip(target.re())
                    .map(|(a, b)| (a - b) * scale)
                    .collect();
                vec![(inp[0], Tensor::from_real(pv.shape(), dx)?)]
            }
            Op::Add => vec![(inp[0], g.clone()), (inp[1], g.clone())],
            Op::ConcatChannels { sizes } => {
                let gd = g.re();
                let plane: usize = g.shape()[1..].iter().product();
                let tail = &g.shape()[1..];
                let mut offset = 0;
                let mut v = Vec::with_capacity(sizes.len());
                for (&id, &c) in inp.iter().zip(sizes) {
                    let mut shape = vec![c];
                    shape.extend(tail);
                    v.push((
                        id,
                        Tensor::from_real(&shape, gd[offset..offset + c * plane].to_vec())?,
                    ));
                    offset += c * plane;
                }
                v
            }
        };
        Ok(out)
    }
}
