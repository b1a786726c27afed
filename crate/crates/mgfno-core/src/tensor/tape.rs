//! Define-by-run reverse-mode differentiation over tensor primitives.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; each
//! recording method computes its output eagerly and stores the adjoint
//! rule. [`Tape::backward`] walks the list in reverse once, after which
//! the tape is consumed — the next pass records a fresh tape.
//!
//! Complex cotangents use the pair convention: the adjoint carried for
//! a complex node is `dL/d(re) + i dL/d(im)`. Under that convention
//! the elementwise complex product propagates via the conjugate-product
//! rule, and the FFT adjoints are (scaled) transforms in the opposite
//! direction.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::tensor::dense::{ComplexTensor, Tensor};
use crate::tensor::fft;

/// Stable identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Handle to a node on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

#[derive(Debug, Clone)]
pub enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

impl Value {
    pub fn as_real(&self) -> &Tensor {
        match self {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("expected real node"),
        }
    }

    pub fn as_complex(&self) -> &ComplexTensor {
        match self {
            Value::Complex(c) => c,
            Value::Real(_) => panic!("expected complex node"),
        }
    }
}

/// Elementwise nonlinearities known to the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
    /// Compact-support bump built from shifted squared ReLUs; support
    /// is exactly [0, 3] and the function is C^1.
    Phi,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Phi => phi(x),
        }
    }

    /// One-sided derivative at the knots.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_prime(x),
            Activation::Phi => phi_prime(x),
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// phi(x) = relu(x)^2 - 3 relu(x-1)^2 + 3 relu(x-2)^2 - relu(x-3)^2
pub fn phi(x: f64) -> f64 {
    relu(x).powi(2) - 3.0 * relu(x - 1.0).powi(2) + 3.0 * relu(x - 2.0).powi(2)
        - relu(x - 3.0).powi(2)
}

pub fn phi_prime(x: f64) -> f64 {
    2.0 * relu(x) - 6.0 * relu(x - 1.0) + 6.0 * relu(x - 2.0) - 2.0 * relu(x - 3.0)
}

/// Mode layout of a spectral mixing step on a half spectrum.
#[derive(Debug, Clone)]
pub struct ModeMixLayout {
    /// Retained modes per spatial axis, lowest first.
    pub k_max: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Scale(NodeRef, f64),
    Mul(NodeRef, NodeRef),
    ComplexMul(NodeRef, NodeRef),
    MatMul(NodeRef, NodeRef),
    Linear { input: NodeRef, weight: NodeRef, bias: NodeRef },
    Rfft { input: NodeRef, axes: Vec<usize>, full_extents: Vec<usize> },
    Irfft { input: NodeRef, axes: Vec<usize>, full_extents: Vec<usize> },
    ModeMix { spectrum: NodeRef, weights: NodeRef, layout: ModeMixLayout },
    Truncate { input: NodeRef, axes: Vec<usize>, k_max: Vec<usize> },
    Activation { input: NodeRef, kind: Activation },
    Reshape { input: NodeRef },
    SumAll { input: NodeRef },
    RelL2 { pred: NodeRef, diff: Tensor, diff_norms: Vec<f64>, target_norms: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`]. Complex parameters are
/// reported in the interleaved `[..., 2]` real layout they are stored in.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn into_map(self) -> HashMap<ParamId, Tensor> {
        self.map
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeRef)>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeRef) -> &Value {
        &self.nodes[node.0].value
    }

    pub fn real(&self, node: NodeRef) -> &Tensor {
        self.nodes[node.0].value.as_real()
    }

    pub fn complex(&self, node: NodeRef) -> &ComplexTensor {
        self.nodes[node.0].value.as_complex()
    }

    fn push(&mut self, value: Value, op: Op) -> NodeRef {
        let id = NodeRef(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Record a constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeRef {
        self.push(Value::Real(t), Op::Leaf { param: None })
    }

    pub fn constant_complex(&mut self, c: ComplexTensor) -> NodeRef {
        self.push(Value::Complex(c), Op::Leaf { param: None })
    }

    /// Register a real trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<NodeRef> {
        self.register(id, Value::Real(t))
    }

    /// Register a complex trainable parameter from its interleaved
    /// `[..., 2]` storage.
    pub fn param_complex(&mut self, id: ParamId, interleaved: &Tensor) -> Result<NodeRef> {
        let c = ComplexTensor::from_interleaved(interleaved)?;
        self.register(id, Value::Complex(c))
    }

    fn register(&mut self, id: ParamId, value: Value) -> Result<NodeRef> {
        if self.params.iter().any(|(p, _)| *p == id) {
            return Err(CoreError::invalid(format!(
                "parameter id {} registered twice on one tape",
                id.0
            )));
        }
        let node = self.push(value, Op::Leaf { param: Some(id) });
        self.params.push((id, node));
        Ok(node)
    }

    fn binary_real(&mut self, a: NodeRef, b: NodeRef, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeRef> {
        let out = self.real(a).zip_map(self.real(b), f)?;
        Ok(self.push(Value::Real(out), op))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_real(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_real(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary_real(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> NodeRef {
        let out = self.real(a).scale(c);
        self.push(Value::Real(out), Op::Scale(a, c))
    }

    pub fn complex_mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let out = self.complex(a).mul(self.complex(b))?;
        Ok(self.push(Value::Complex(out), Op::ComplexMul(a, b)))
    }

    /// Plain matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (ta, tb) = (self.real(a), self.real(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(CoreError::shape(format!(
                "matmul on {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(ta.data(), tb.data(), out.data_mut(), m, k, n);
        Ok(self.push(Value::Real(out), Op::MatMul(a, b)))
    }

    /// Pointwise channel map: `out[g, o] = b[o] + sum_i v[g, i] w[o, i]`
    /// where `g` ranges over all leading positions. This is the 1x1
    /// convolution every lifting/projection/skip path uses.
    pub fn linear(&mut self, input: NodeRef, weight: NodeRef, bias: NodeRef) -> Result<NodeRef> {
        let v = self.real(input);
        let w = self.real(weight);
        let b = self.real(bias);
        if w.rank() != 2 || b.rank() != 1 {
            return Err(CoreError::shape("linear expects rank-2 weight, rank-1 bias".into()));
        }
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        if b.shape()[0] != co {
            return Err(CoreError::shape("linear bias length != out channels".into()));
        }
        let vs = v.shape();
        if vs.is_empty() || *vs.last().unwrap() != ci {
            return Err(CoreError::shape(format!(
                "linear input {:?} does not end in {} channels",
                vs, ci
            )));
        }
        let rows = v.len() / ci;
        let mut out_shape = vs.to_vec();
        *out_shape.last_mut().unwrap() = co;
        let mut out = Tensor::zeros(&out_shape);
        linear_forward(v.data(), w.data(), b.data(), out.data_mut(), rows, ci, co);
        Ok(self.push(Value::Real(out), Op::Linear { input, weight, bias }))
    }

    /// Real-input FFT along `axes` (half spectrum on the last axis).
    pub fn rfft(&mut self, input: NodeRef, axes: &[usize]) -> Result<NodeRef> {
        let x = self.real(input);
        let full_extents: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let spec = fft::rfft(x, axes)?;
        Ok(self.push(
            Value::Complex(spec),
            Op::Rfft { input, axes: axes.to_vec(), full_extents },
        ))
    }

    /// Inverse of [`Tape::rfft`]; conjugate symmetry is reconstructed so
    /// the output is exactly real.
    pub fn irfft(&mut self, input: NodeRef, axes: &[usize], full_extents: &[usize]) -> Result<NodeRef> {
        let x = self.complex(input);
        let out = fft::irfft(x, axes, full_extents)?;
        Ok(self.push(
            Value::Real(out),
            Op::Irfft { input, axes: axes.to_vec(), full_extents: full_extents.to_vec() },
        ))
    }

    /// Per-mode channel mixing on a half spectrum.
    ///
    /// 1-d: spectrum `[batch, m, ci]`, weights `[k, co, ci]`; modes
    /// `0..k` are mixed by their own complex matrix, the rest vanish.
    ///
    /// 2-d: spectrum `[batch, ny, mx, ci]`, weights `[2*ky, kx, co, ci]`;
    /// the first `ky` weight rows act on spectrum rows `0..ky`, the next
    /// `ky` rows on spectrum rows `ny-ky..ny` (the two retained corner
    /// blocks of the half spectrum).
    pub fn mode_mix(&mut self, spectrum: NodeRef, weights: NodeRef, layout: ModeMixLayout) -> Result<NodeRef> {
        let x = self.complex(spectrum);
        let w = self.complex(weights);
        let out = mode_mix_forward(x, w, &layout)?;
        Ok(self.push(Value::Complex(out), Op::ModeMix { spectrum, weights, layout }))
    }

    /// Zero all spectral entries outside the per-axis low-frequency
    /// blocks of a full spectrum.
    pub fn truncate(&mut self, input: NodeRef, axes: &[usize], k_max: &[usize]) -> Result<NodeRef> {
        let out = fft::truncate_modes(self.complex(input), axes, k_max)?;
        Ok(self.push(
            Value::Complex(out),
            Op::Truncate { input, axes: axes.to_vec(), k_max: k_max.to_vec() },
        ))
    }

    pub fn activation(&mut self, input: NodeRef, kind: Activation) -> NodeRef {
        let out = self.real(input).map(|x| kind.apply(x));
        self.push(Value::Real(out), Op::Activation { input, kind })
    }

    pub fn reshape(&mut self, input: NodeRef, shape: &[usize]) -> Result<NodeRef> {
        let out = self.real(input).reshape(shape)?;
        Ok(self.push(Value::Real(out), Op::Reshape { input }))
    }

    /// Sum of all entries, as a `[1]`-shaped scalar node.
    pub fn sum_all(&mut self, input: NodeRef) -> NodeRef {
        let s = self.real(input).sum();
        self.push(Value::Real(Tensor::scalar(s)), Op::SumAll { input })
    }

    /// Mean over the batch (axis 0) of per-sample relative L2 errors
    /// against a constant target. Differentiable training loss.
    pub fn relative_l2_loss(&mut self, pred: NodeRef, target: &Tensor) -> Result<NodeRef> {
        let p = self.real(pred);
        if p.shape() != target.shape() {
            return Err(CoreError::shape(format!(
                "loss shapes {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if p.rank() < 1 {
            return Err(CoreError::shape("loss input needs a batch axis".into()));
        }
        let batch = p.shape()[0];
        let per = p.len() / batch;
        let diff = p.sub(target)?;
        let mut diff_norms = Vec::with_capacity(batch);
        let mut target_norms = Vec::with_capacity(batch);
        let mut total = 0.0;
        for b in 0..batch {
            let d = &diff.data()[b * per..(b + 1) * per];
            let t = &target.data()[b * per..(b + 1) * per];
            let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if tn == 0.0 {
                return Err(CoreError::invalid(format!("zero-norm target in sample {b}")));
            }
            diff_norms.push(dn);
            target_norms.push(tn);
            total += dn / tn;
        }
        let value = Tensor::scalar(total / batch as f64);
        Ok(self.push(Value::Real(value), Op::RelL2 { pred, diff, diff_norms, target_norms }))
    }

    /// Reverse sweep from a scalar loss node. Consumes the tape: a
    /// second call without re-recording is rejected. Registered
    /// parameters the loss does not reach get zero gradients.
    pub fn backward(&mut self, loss: NodeRef) -> Result<Gradients> {
        if self.consumed {
            return Err(CoreError::TapeConsumed);
        }
        self.consumed = true;
        match &self.nodes[loss.0].value {
            Value::Real(t) if t.is_scalar() => {}
            Value::Real(t) => return Err(CoreError::NonScalarLoss(t.shape().to_vec())),
            Value::Complex(c) => return Err(CoreError::NonScalarLoss(c.shape().to_vec())),
        }

        let mut cots: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        cots[loss.0] = Some(Value::Real(Tensor::scalar(1.0)));

        for idx in (0..self.nodes.len()).rev() {
            let Some(cot) = cots[idx].take() else { continue };
            // Re-store: leaves keep their accumulated cotangent for extraction.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } => {
                    cots[idx] = Some(cot);
                }
                Op::Add(a, b) => {
                    let g = cot.as_real();
                    accumulate_real(&mut cots, a, g.clone());
                    accumulate_real(&mut cots, b, g.clone());
                }
                Op::Sub(a, b) => {
                    let g = cot.as_real();
                    accumulate_real(&mut cots, a, g.clone());
                    accumulate_real(&mut cots, b, g.scale(-1.0));
                }
                Op::Scale(a, c) => {
                    accumulate_real(&mut cots, a, cot.as_real().scale(c));
                }
                Op::Mul(a, b) => {
                    let g = cot.as_real();
                    let da = g.mul(self.real(b))?;
                    let db = g.mul(self.real(a))?;
                    accumulate_real(&mut cots, a, da);
                    accumulate_real(&mut cots, b, db);
                }
                Op::ComplexMul(a, b) => {
                    let g = cot.as_complex();
                    let da = g.mul(&self.complex(b).conj())?;
                    let db = g.mul(&self.complex(a).conj())?;
                    accumulate_complex(&mut cots, a, da);
                    accumulate_complex(&mut cots, b, db);
                }
                Op::MatMul(a, b) => {
                    let g = cot.as_real();
                    let ta = self.real(a);
                    let tb = self.real(b);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    // da = g . b^T ; db = a^T . g
                    let mut da = Tensor::zeros(&[m, k]);
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += g.data()[i * n + l] * tb.data()[j * n + l];
                            }
                            da.data_mut()[i * k + j] = s;
                        }
                    }
                    let mut db = Tensor::zeros(&[k, n]);
                    for j in 0..k {
                        for l in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.data()[i * k + j] * g.data()[i * n + l];
                            }
                            db.data_mut()[j * n + l] = s;
                        }
                    }
                    accumulate_real(&mut cots, a, da);
                    accumulate_real(&mut cots, b, db);
                }
                Op::Linear { input, weight, bias } => {
                    let g = cot.as_real();
                    let v = self.real(input);
                    let w = self.real(weight);
                    let (co, ci) = (w.shape()[0], w.shape()[1]);
                    let rows = v.len() / ci;
                    let mut dv = Tensor::zeros(v.shape());
                    let mut dw = Tensor::zeros(w.shape());
                    let mut db = Tensor::zeros(&[co]);
                    linear_backward(
                        v.data(), w.data(), g.data(),
                        dv.data_mut(), dw.data_mut(), db.data_mut(),
                        rows, ci, co,
                    );
                    accumulate_real(&mut cots, input, dv);
                    accumulate_real(&mut cots, weight, dw);
                    accumulate_real(&mut cots, bias, db);
                }
                Op::Rfft { input, axes, full_extents } => {
                    let g = cot.as_complex();
                    let last = *axes.last().unwrap();
                    let full_last = *full_extents.last().unwrap();
                    // adjoint of the slice-to-half step: zero-pad
                    let mut padded = zero_pad_axis(g, last, full_last);
                    for &a in axes.iter() {
                        fft::adjoint_of_forward_axis(&mut padded, a);
                    }
                    accumulate_real(&mut cots, input, padded.re_tensor());
                }
                Op::Irfft { input, axes, full_extents } => {
                    let g = cot.as_real();
                    let last = *axes.last().unwrap();
                    let full_last = *full_extents.last().unwrap();
                    let mut spec = g.to_complex();
                    fft::adjoint_of_inverse_axis(&mut spec, last);
                    let mut spec = fft::collapse_half_axis(&spec, last, fft::half_extent(full_last));
                    for &a in axes[..axes.len() - 1].iter() {
                        fft::adjoint_of_inverse_axis(&mut spec, a);
                    }
                    accumulate_complex(&mut cots, input, spec);
                }
                Op::ModeMix { spectrum, weights, layout } => {
                    let g = cot.as_complex();
                    let x = self.complex(spectrum);
                    let w = self.complex(weights);
                    let (dx, dw) = mode_mix_backward(x, w, g, &layout);
                    accumulate_complex(&mut cots, spectrum, dx);
                    accumulate_complex(&mut cots, weights, dw);
                }
                Op::Truncate { input, axes, k_max } => {
                    // projection is self-adjoint
                    let g = fft::truncate_modes(cot.as_complex(), &axes, &k_max)?;
                    accumulate_complex(&mut cots, input, g);
                }
                Op::Activation { input, kind } => {
                    let g = cot.as_real();
                    let x = self.real(input);
                    let dx = g.zip_map(&x.map(|v| kind.derivative(v)), |a, b| a * b)?;
                    accumulate_real(&mut cots, input, dx);
                }
                Op::Reshape { input } => {
                    let g = cot.as_real();
                    let back = g.reshape(self.real(input).shape())?;
                    accumulate_real(&mut cots, input, back);
                }
                Op::SumAll { input } => {
                    let g0 = cot.as_real().data()[0];
                    accumulate_real(&mut cots, input, Tensor::full(self.real(input).shape(), g0));
                }
                Op::RelL2 { pred, diff, diff_norms, target_norms } => {
                    let g0 = cot.as_real().data()[0];
                    let batch = diff_norms.len();
                    let per = diff.len() / batch;
                    let mut dp = Tensor::zeros(diff.shape());
                    for b in 0..batch {
                        let dn = diff_norms[b];
                        if dn == 0.0 {
                            continue;
                        }
                        let c = g0 / (batch as f64 * dn * target_norms[b]);
                        for i in 0..per {
                            dp.data_mut()[b * per + i] = c * diff.data()[b * per + i];
                        }
                    }
                    accumulate_real(&mut cots, pred, dp);
                }
            }
        }

        let mut map = HashMap::new();
        for (pid, node) in &self.params {
            let grad = match (cots[node.0].take(), &self.nodes[node.0].value) {
                (Some(Value::Real(g)), Value::Real(_)) => g,
                (Some(Value::Complex(g)), Value::Complex(_)) => g.to_interleaved(),
                (None, Value::Real(t)) => Tensor::zeros(t.shape()),
                (None, Value::Complex(c)) => {
                    let mut shape = c.shape().to_vec();
                    shape.push(2);
                    Tensor::zeros(&shape)
                }
                _ => unreachable!("cotangent kind always matches the leaf kind"),
            };
            map.insert(*pid, grad);
        }
        Ok(Gradients { map })
    }
}

fn accumulate_real(cots: &mut [Option<Value>], node: NodeRef, g: Tensor) {
    match &mut cots[node.0] {
        Some(Value::Real(acc)) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Value::Real(g)),
        _ => panic!("mixed real/complex cotangent"),
    }
}

fn accumulate_complex(cots: &mut [Option<Value>], node: NodeRef, g: ComplexTensor) {
    match &mut cots[node.0] {
        Some(Value::Complex(acc)) => {
            for (a, b) in acc.re_mut().iter_mut().zip(g.re()) {
                *a += b;
            }
            for (a, b) in acc.im_mut().iter_mut().zip(g.im()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Value::Complex(g)),
        _ => panic!("mixed real/complex cotangent"),
    }
}

fn zero_pad_axis(x: &ComplexTensor, axis: usize, full: usize) -> ComplexTensor {
    let dims = x.shape();
    let half = dims[axis];
    let mut out_shape = dims.to_vec();
    out_shape[axis] = full;
    let mut out = ComplexTensor::zeros(&out_shape);
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        for j in 0..half {
            let src = (o * half + j) * inner;
            let dst = (o * full + j) * inner;
            for i in 0..inner {
                out.re_mut()[dst + i] = x.re()[src + i];
                out.im_mut()[dst + i] = x.im()[src + i];
            }
        }
    }
    out
}

const PAR_ROWS_MIN: usize = 64;

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn linear_forward(v: &[f64], w: &[f64], b: &[f64], out: &mut [f64], rows: usize, ci: usize, co: usize) {
    let body = |(vrow, orow): (&[f64], &mut [f64])| {
        for o in 0..co {
            let wrow = &w[o * ci..(o + 1) * ci];
            let mut acc = b[o];
            for i in 0..ci {
                acc += vrow[i] * wrow[i];
            }
            orow[o] = acc;
        }
    };
    if rows >= PAR_ROWS_MIN {
        v.par_chunks(ci).zip(out.par_chunks_mut(co)).for_each(body);
    } else {
        v.chunks(ci).zip(out.chunks_mut(co)).for_each(body);
    }
}

fn linear_backward(
    v: &[f64],
    w: &[f64],
    g: &[f64],
    dv: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    rows: usize,
    ci: usize,
    co: usize,
) {
    // dv[g, i] = sum_o g[g, o] w[o, i]
    let dv_body = |(grow, dvrow): (&[f64], &mut [f64])| {
        for o in 0..co {
            let go = grow[o];
            if go == 0.0 {
                continue;
            }
            let wrow = &w[o * ci..(o + 1) * ci];
            for i in 0..ci {
                dvrow[i] += go * wrow[i];
            }
        }
    };
    if rows >= PAR_ROWS_MIN {
        g.par_chunks(co).zip(dv.par_chunks_mut(ci)).for_each(dv_body);
    } else {
        g.chunks(co).zip(dv.chunks_mut(ci)).for_each(dv_body);
    }

    // dw[o, i] = sum_g g[g, o] v[g, i]; db[o] = sum_g g[g, o]
    // Parallel over output-channel chunks; the reduction order over g is
    // fixed inside each chunk, so results do not depend on thread count.
    let dw_body = |(o0, (dw_chunk, db_chunk)): (usize, (&mut [f64], &mut [f64]))| {
        let cols = dw_chunk.len() / ci;
        for r in 0..rows {
            let vrow = &v[r * ci..(r + 1) * ci];
            let grow = &g[r * co..(r + 1) * co];
            for oc in 0..cols {
                let go = grow[o0 + oc];
                if go == 0.0 {
                    continue;
                }
                let drow = &mut dw_chunk[oc * ci..(oc + 1) * ci];
                for i in 0..ci {
                    drow[i] += go * vrow[i];
                }
                db_chunk[oc] += go;
            }
        }
    };
    let chunk = co.div_ceil(rayon::current_num_threads().max(1)).max(1);
    if rows * co >= 1 << 14 && co > 1 {
        dw.par_chunks_mut(chunk * ci)
            .zip(db.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(ci_idx, pair)| dw_body((ci_idx * chunk, pair)));
    } else {
        dw_body((0, (dw, db)));
    }
}

fn mode_mix_forward(x: &ComplexTensor, w: &ComplexTensor, layout: &ModeMixLayout) -> Result<ComplexTensor> {
    match layout.k_max.len() {
        1 => mode_mix_forward_1d(x, w, layout.k_max[0]),
        2 => mode_mix_forward_2d(x, w, layout.k_max[0], layout.k_max[1]),
        d => Err(CoreError::invalid(format!("mode mix supports 1 or 2 spatial axes, got {d}"))),
    }
}

fn mode_mix_forward_1d(x: &ComplexTensor, w: &ComplexTensor, k: usize) -> Result<ComplexTensor> {
    let [batch, m, ci] = *x.shape() else {
        return Err(CoreError::shape(format!("1-d spectrum must be [batch, m, ci], got {:?}", x.shape())));
    };
    let [wk, co, wci] = *w.shape() else {
        return Err(CoreError::shape(format!("1-d mode weights must be [k, co, ci], got {:?}", w.shape())));
    };
    if wk != k || wci != ci {
        return Err(CoreError::shape(format!(
            "mode weights {:?} incompatible with spectrum {:?} and k_max {k}",
            w.shape(),
            x.shape()
        )));
    }
    if k > m {
        return Err(CoreError::invalid(format!("grid too small for k_max: {m} stored modes < {k}")));
    }
    let mut out = ComplexTensor::zeros(&[batch, m, co]);
    for b in 0..batch {
        for mode in 0..k {
            let xoff = (b * m + mode) * ci;
            let ooff = (b * m + mode) * co;
            for o in 0..co {
                let woff = (mode * co + o) * ci;
                let mut sr = 0.0;
                let mut si = 0.0;
                for i in 0..ci {
                    let (wr, wi) = (w.re()[woff + i], w.im()[woff + i]);
                    let (xr, xi) = (x.re()[xoff + i], x.im()[xoff + i]);
                    sr += wr * xr - wi * xi;
                    si += wr * xi + wi * xr;
                }
                out.re_mut()[ooff + o] = sr;
                out.im_mut()[ooff + o] = si;
            }
        }
    }
    Ok(out)
}

/// Row indices of the two retained corner blocks along a full axis.
fn corner_rows(ny: usize, ky: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..ky).map(move |j| (j, j)).chain((0..ky).map(move |j| (ky + j, ny - ky + j)))
}

fn mode_mix_forward_2d(x: &ComplexTensor, w: &ComplexTensor, ky: usize, kx: usize) -> Result<ComplexTensor> {
    let [batch, ny, mx, ci] = *x.shape() else {
        return Err(CoreError::shape(format!("2-d spectrum must be [batch, ny, mx, ci], got {:?}", x.shape())));
    };
    let [wky2, wkx, co, wci] = *w.shape() else {
        return Err(CoreError::shape(format!("2-d mode weights must be [2ky, kx, co, ci], got {:?}", w.shape())));
    };
    if wky2 != 2 * ky || wkx != kx || wci != ci {
        return Err(CoreError::shape(format!(
            "mode weights {:?} incompatible with spectrum {:?} and k_max ({ky}, {kx})",
            w.shape(),
            x.shape()
        )));
    }
    if 2 * ky > ny || kx > mx {
        return Err(CoreError::invalid(format!(
            "grid too small for k_max: spectrum ({ny}, {mx}) vs cutoffs ({ky}, {kx})"
        )));
    }
    let mut out = ComplexTensor::zeros(&[batch, ny, mx, co]);
    for b in 0..batch {
        for (wrow, xrow) in corner_rows(ny, ky) {
            for mxi in 0..kx {
                let xoff = ((b * ny + xrow) * mx + mxi) * ci;
                let ooff = ((b * ny + xrow) * mx + mxi) * co;
                for o in 0..co {
                    let woff = ((wrow * kx + mxi) * co + o) * ci;
                    let mut sr = 0.0;
                    let mut si = 0.0;
                    for i in 0..ci {
                        let (wr, wi) = (w.re()[woff + i], w.im()[woff + i]);
                        let (xr, xi) = (x.re()[xoff + i], x.im()[xoff + i]);
                        sr += wr * xr - wi * xi;
                        si += wr * xi + wi * xr;
                    }
                    out.re_mut()[ooff + o] = sr;
                    out.im_mut()[ooff + o] = si;
                }
            }
        }
    }
    Ok(out)
}

fn mode_mix_backward(
    x: &ComplexTensor,
    w: &ComplexTensor,
    g: &ComplexTensor,
    layout: &ModeMixLayout,
) -> (ComplexTensor, ComplexTensor) {
    let mut dx = ComplexTensor::zeros(x.shape());
    let mut dw = ComplexTensor::zeros(w.shape());
    match layout.k_max.len() {
        1 => {
            let (batch, m, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, co) = (w.shape()[0], w.shape()[1]);
            let _ = m;
            for b in 0..batch {
                for mode in 0..k {
                    let xoff = (b * m + mode) * ci;
                    let goff = (b * m + mode) * co;
                    for o in 0..co {
                        let woff = (mode * co + o) * ci;
                        let (gr, gi) = (g.re()[goff + o], g.im()[goff + o]);
                        for i in 0..ci {
                            let (wr, wi) = (w.re()[woff + i], w.im()[woff + i]);
                            let (xr, xi) = (x.re()[xoff + i], x.im()[xoff + i]);
                            // dx += g * conj(w)
                            dx.re_mut()[xoff + i] += gr * wr + gi * wi;
                            dx.im_mut()[xoff + i] += gi * wr - gr * wi;
                            // dw += g * conj(x)
                            dw.re_mut()[woff + i] += gr * xr + gi * xi;
                            dw.im_mut()[woff + i] += gi * xr - gr * xi;
                        }
                    }
                }
            }
        }
        2 => {
            let (batch, ny, mx, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (ky, kx, co) = (w.shape()[0] / 2, w.shape()[1], w.shape()[2]);
            for b in 0..batch {
                for (wrow, xrow) in corner_rows(ny, ky) {
                    for mxi in 0..kx {
                        let xoff = ((b * ny + xrow) * mx + mxi) * ci;
                        let goff = ((b * ny + xrow) * mx + mxi) * co;
                        for o in 0..co {
                            let woff = ((wrow * kx + mxi) * co + o) * ci;
                            let (gr, gi) = (g.re()[goff + o], g.im()[goff + o]);
                            for i in 0..ci {
                                let (wr, wi) = (w.re()[woff + i], w.im()[woff + i]);
                                let (xr, xi) = (x.re()[xoff + i], x.im()[xoff + i]);
                                dx.re_mut()[xoff + i] += gr * wr + gi * wi;
                                dx.im_mut()[xoff + i] += gi * wr - gr * wi;
                                dw.re_mut()[woff + i] += gr * xr + gi * xi;
                                dw.im_mut()[woff + i] += gi * xr - gr * xi;
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("layout validated at record time"),
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape
            .param(ParamId(0), Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5, 9.0]))
            .unwrap();
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        assert_eq!(tape.real(loss).data()[0], 5.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn add_zero_is_identity_with_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::from_vec(vec![1.5, -0.5])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = tape.add(x, zero).unwrap();
        assert_eq!(tape.real(y).data(), &[1.5, -0.5]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_identity_left_factor() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 }));
        let w = tape
            .param(ParamId(0), Tensor::from_fn(&[3, 2], |i| (i[0] * 2 + i[1]) as f64))
            .unwrap();
        let prod = tape.matmul(eye, w).unwrap();
        assert_eq!(tape.real(prod).data(), tape.real(w).data());
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::scalar(2.0)).unwrap();
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(CoreError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(CoreError::NonScalarLoss(shape)) if shape == vec![3]
        ));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::scalar(1.0)).unwrap();
        let _unused = tape.param(ParamId(1), Tensor::from_vec(vec![5.0, 6.0])).unwrap();
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut tape = Tape::new();
        tape.param(ParamId(3), Tensor::scalar(1.0)).unwrap();
        assert!(tape.param(ParamId(3), Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn relative_l2_loss_examples() {
        // pred == target -> 0
        let mut tape = Tape::new();
        let t = Tensor::from_fn(&[2, 4], |i| (i[1] + 1) as f64);
        let p = tape.param(ParamId(0), t.clone()).unwrap();
        let loss = tape.relative_l2_loss(p, &t).unwrap();
        assert_eq!(tape.real(loss).data()[0], 0.0);

        // pred = 0 -> 1
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), Tensor::zeros(&[2, 4])).unwrap();
        let loss = tape.relative_l2_loss(p, &t).unwrap();
        assert!((tape.real(loss).data()[0] - 1.0).abs() < 1e-15);

        // pred = 1.01 * target -> 0.01
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t.scale(1.01)).unwrap();
        let loss = tape.relative_l2_loss(p, &t).unwrap();
        assert!((tape.real(loss).data()[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_target_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), Tensor::zeros(&[1, 3])).unwrap();
        assert!(tape.relative_l2_loss(p, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn phi_closed_form_values() {
        assert_eq!(phi(0.0), 0.0);
        assert_eq!(phi(-1.0), 0.0);
        assert_eq!(phi(3.0), 0.0);
        assert_eq!(phi(4.0), 16.0 - 27.0 + 12.0 - 1.0);
        assert_eq!(phi(1.0), 1.0);
        assert_eq!(phi(2.0), 1.0);
        assert!((phi(1.5) - 1.5).abs() < 1e-15);
    }
}
