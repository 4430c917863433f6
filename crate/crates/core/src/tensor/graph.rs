use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{contract, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<[f64]>),
    Pow { x: Var, p: f64, eps: f64 },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Softplus(Var),
    SumAll(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvInputGrad { g: Var, w: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, g: Var, geom: ConvGeom },
    Upsample { x: Var, k: usize },
    AvgPool { x: Var, k: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Embed { x: Var, axis: usize, start: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | MulConst(x, _) | Sigmoid(x) | Softplus(x) | SumAll(x)
            | Reshape(x) | BroadcastTo(x) | SumTo(x) | Transpose(x) => vec![*x],
            Pow { x, .. } | LeakyRelu { x, .. } | Upsample { x, .. } | AvgPool { x, .. } => vec![*x],
            Narrow { x, .. } | Embed { x, .. } => vec![*x],
            Conv { x, w, .. } => vec![*x, *w],
            ConvInputGrad { g, w, .. } => vec![*g, *w],
            ConvWeightGrad { x, g, .. } => vec![*x, *g],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations, in creation (hence topological) order.
///
/// A graph is built per forward/backward pass and dropped afterwards;
/// parameters are copied in as leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::Shape {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Elementwise product with a constant mask that carries no gradient.
    pub fn mul_const(&mut self, x: Var, mask: Arc<[f64]>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(contract("mul_const", "mask length differs from tensor size"));
        }
        let data = t.data().iter().zip(mask.iter()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::MulConst(x, mask)))
    }

    /// `(x + eps)^p`; the base must stay non-negative for fractional powers.
    pub fn pow(&mut self, x: Var, p: f64, eps: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.nodes[x.0].value.data().iter().any(|&v| v + eps < 0.0) {
            return Err(contract("pow", "negative base with fractional exponent"));
        }
        Ok(self.unary(x, Op::Pow { x, p, eps }, |v| (v + eps).powf(p)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), stable_softplus)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn check_broadcast(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
        if small.len() != big.len() || small.iter().zip(big).any(|(s, b)| *s != *b && *s != 1) {
            return Err(TensorError::Shape {
                op,
                expected: big.to_vec(),
                got: small.to_vec(),
            });
        }
        Ok(())
    }

    /// Expand size-1 axes to `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        Self::check_broadcast("broadcast_to", t.shape(), shape)?;
        if t.shape() == shape {
            return Ok(x);
        }
        let data = kernels::broadcast_to(t.data(), t.shape(), shape);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::BroadcastTo(x)))
    }

    /// Sum over axes so the result has `shape` (ranks must agree).
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        Self::check_broadcast("sum_to", shape, t.shape())?;
        if t.shape() == shape {
            return Ok(x);
        }
        let data = kernels::sum_to(t.data(), t.shape(), shape);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::SumTo(x)))
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(contract("transpose", "expects a matrix"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = kernels::transpose2(t.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x)))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`, plus optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(contract("conv2d", "input and weight must be rank 4"));
        }
        if sx[1] != sw[1] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: vec![sw[1]],
                got: vec![sx[1]],
            });
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(contract("conv2d", "kernel sizes must be odd"));
        }
        if stride == 0 {
            return Err(contract("conv2d", "stride must be at least 1"));
        }
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return Err(contract("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - kh) / stride + 1,
            ow: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let y = self.conv_raw(x, weight, geom);
        match bias {
            None => Ok(y),
            Some(b) => {
                if self.shape(b) != [geom.cout] {
                    return Err(TensorError::Shape {
                        op: "conv2d bias",
                        expected: vec![geom.cout],
                        got: self.shape(b).to_vec(),
                    });
                }
                let b4 = self.reshape(b, &[1, geom.cout, 1, 1])?;
                let bb = self.broadcast_to(b4, &geom.output_shape())?;
                self.add(y, bb)
            }
        }
    }

    fn conv_raw(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let data = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        self.push(Tensor::from_parts(geom.output_shape(), data), Op::Conv { x, w, geom })
    }

    fn conv_input_grad_raw(&mut self, g: Var, w: Var, geom: ConvGeom) -> Var {
        let data = kernels::conv_input_grad(&geom, self.value(g).data(), self.value(w).data());
        self.push(Tensor::from_parts(geom.input_shape(), data), Op::ConvInputGrad { g, w, geom })
    }

    fn conv_weight_grad_raw(&mut self, x: Var, g: Var, geom: ConvGeom) -> Var {
        let data = kernels::conv_weight_grad(&geom, self.value(x).data(), self.value(g).data());
        self.push(Tensor::from_parts(geom.weight_shape(), data), Op::ConvWeightGrad { x, g, geom })
    }

    fn spatial(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(contract(op, format!("expects [N,C,H,W], got {s:?}"))),
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.spatial("upsample", x)?;
        if k == 0 {
            return Err(contract("upsample", "factor must be positive"));
        }
        if k == 1 {
            return Ok(x);
        }
        let data = kernels::upsample(self.value(x).data(), n * c, h, w, k);
        Ok(self.push(Tensor::from_parts(vec![n, c, h * k, w * k], data), Op::Upsample { x, k }))
    }

    /// Average pooling over non-overlapping `k×k` windows.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.spatial("avg_pool", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(contract("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        if k == 1 {
            return Ok(x);
        }
        let data = kernels::avg_pool(self.value(x).data(), n * c, h, w, k);
        Ok(self.push(Tensor::from_parts(vec![n, c, h / k, w / k], data), Op::AvgPool { x, k }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(contract("concat", "axis out of range"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len() && s.iter().enumerate().all(|(i, d)| i == axis || *d == base[i]);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    expected: base.clone(),
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(contract("narrow", format!("range {start}+{len} outside {shape:?} on axis {axis}")));
        }
        let data = kernels::narrow(self.value(x).data(), &shape, axis, start, len);
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(Tensor::from_parts(out, data), Op::Narrow { x, axis, start }))
    }

    /// Zero-pad along `axis` to length `full`, placing `x` at `start`.
    pub fn embed(&mut self, x: Var, axis: usize, start: usize, full: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(contract("embed", "slice does not fit"));
        }
        let data = kernels::embed(self.value(x).data(), &shape, axis, start, full);
        let mut out = shape;
        out[axis] = full;
        Ok(self.push(Tensor::from_parts(out, data), Op::Embed { x, axis, start }))
    }

    // ---- composites -------------------------------------------------------

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.spatial("instance_norm", x)?;
        if h * w == 0 {
            return Err(contract("instance_norm", "zero spatial extent"));
        }
        let full = [n, c, h, w];
        let stat = [n, c, 1, 1];
        let inv_area = 1.0 / (h * w) as f64;
        let s = self.sum_to(x, &stat)?;
        let mu = self.scale(s, inv_area);
        let mu_b = self.broadcast_to(mu, &full)?;
        let xc = self.sub(x, mu_b)?;
        let sq = self.mul(xc, xc)?;
        let ss = self.sum_to(sq, &stat)?;
        let var = self.scale(ss, inv_area);
        let inv_std = self.pow(var, -0.5, eps)?;
        let inv_b = self.broadcast_to(inv_std, &full)?;
        self.mul(xc, inv_b)
    }

    /// `(1 + scale) ⊙ instance_norm(x) + bias`, all maps of the same shape as `x`.
    pub fn adain(&mut self, x: Var, scale_map: Var, bias_map: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        same_shape("adain", &shape, self.shape(scale_map))?;
        same_shape("adain", &shape, self.shape(bias_map))?;
        let normed = self.instance_norm(x, ADAIN_EPS)?;
        let gain = self.add_scalar(scale_map, 1.0);
        let scaled = self.mul(gain, normed)?;
        self.add(scaled, bias_map)
    }

    /// Normalize each row of `[N,D]` to unit root-mean-square.
    pub fn pixel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(contract("pixel_norm", "expects [N,D]"));
        }
        let sq = self.mul(x, x)?;
        let s = self.sum_to(sq, &[shape[0], 1])?;
        let ms = self.scale(s, 1.0 / shape[1] as f64);
        let inv = self.pow(ms, -0.5, eps)?;
        let inv_b = self.broadcast_to(inv, &shape)?;
        self.mul(x, inv_b)
    }

    /// `x · wᵀ + b` for `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let out = self.shape(y).to_vec();
                let b2 = self.reshape(b, &[1, out[1]])?;
                let bb = self.broadcast_to(b2, &out)?;
                self.add(y, bb)
            }
        }
    }

    /// `t·b + (1−t)·a`.
    pub fn lerp(&mut self, a: Var, b: Var, t: f64) -> Result<Var> {
        let sa = self.scale(a, 1.0 - t);
        let sb = self.scale(b, t);
        self.add(sa, sb)
    }

    // ---- differentiation --------------------------------------------------

    /// Whether `output` was computed (transitively) from `input`.
    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        if input.0 > output.0 {
            return false;
        }
        let mut reach = vec![false; output.0 + 1];
        reach[input.0] = true;
        for i in input.0 + 1..=output.0 {
            reach[i] = self.nodes[i].op.inputs().iter().any(|v| reach[v.0]);
        }
        reach[output.0]
    }

    /// Gradients of a scalar `output` with respect to `wrt`, recorded as new
    /// graph nodes so they can be differentiated again. Inputs that do not
    /// influence `output` receive a zero tensor.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_value = &self.nodes[output.0].value;
        if out_value.numel() != 1 {
            return Err(TensorError::NotScalar(out_value.shape().to_vec()));
        }
        for w in wrt {
            if !self.nodes[w.0].requires_grad {
                return Err(contract("grad", format!("node {} does not require grad", w.0)));
            }
        }
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(n);
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in start..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|v| relevant[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if relevant[output.0] {
            let seed = Tensor::full(self.shape(output), 1.0);
            grads[output.0] = Some(self.constant(seed));
        }
        for i in (start..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop(Var(i), &op, g, &relevant, &mut grads)?;
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect())
    }

    /// Gradient values of a scalar `output` with respect to `wrt`.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let gs = self.grad(output, wrt)?;
        Ok(gs.into_iter().map(|g| self.value(g).clone()).collect())
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], target: Var, contribution: Var) -> Result<()> {
        grads[target.0] = Some(match grads[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution)?,
        });
        Ok(())
    }

    fn backprop(&mut self, node: Var, op: &Op, g: Var, relevant: &[bool], grads: &mut [Option<Var>]) -> Result<()> {
        let rel = |v: &Var| relevant[v.0];
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rel(a) {
                    self.accumulate(grads, *a, g)?;
                }
                if rel(b) {
                    self.accumulate(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if rel(a) {
                    self.accumulate(grads, *a, g)?;
                }
                if rel(b) {
                    let ng = self.neg(g);
                    self.accumulate(grads, *b, ng)?;
                }
            }
            Op::Mul(a, b) => {
                if rel(a) {
                    let ga = self.mul(g, *b)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if rel(b) {
                    let gb = self.mul(g, *a)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(x, c) => {
                let gx = self.scale(g, *c);
                self.accumulate(grads, *x, gx)?;
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g)?,
            Op::MulConst(x, mask) => {
                let gx = self.mul_const(g, mask.clone())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Pow { x, p, eps } => {
                let d = self.pow(*x, p - 1.0, *eps)?;
                let d = self.scale(d, *p);
                let gx = self.mul(g, d)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::LeakyRelu { x, slope } => {
                let mask: Arc<[f64]> = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { *slope })
                    .collect();
                let gx = self.mul_const(g, mask)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let neg = self.neg(node);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(node, one_minus)?;
                let gx = self.mul(g, d)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(*x);
                let gx = self.mul(g, s)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                let ones = vec![1; shape.len()];
                let g1 = self.reshape(g, &ones)?;
                let gx = self.broadcast_to(g1, &shape)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.reshape(g, &shape)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::BroadcastTo(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.sum_to(g, &shape)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SumTo(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = self.broadcast_to(g, &shape)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::MatMul(a, b) => {
                if rel(a) {
                    let bt = self.transpose(*b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if rel(b) {
                    let at = self.transpose(*a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(x) => {
                let gx = self.transpose(g)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Conv { x, w, geom } => {
                if rel(x) {
                    let gx = self.conv_input_grad_raw(g, *w, *geom);
                    self.accumulate(grads, *x, gx)?;
                }
                if rel(w) {
                    let gw = self.conv_weight_grad_raw(*x, g, *geom);
                    self.accumulate(grads, *w, gw)?;
                }
            }
            Op::ConvInputGrad { g: up, w, geom } => {
                if rel(up) {
                    let gu = self.conv_raw(g, *w, *geom);
                    self.accumulate(grads, *up, gu)?;
                }
                if rel(w) {
                    let gw = self.conv_weight_grad_raw(g, *up, *geom);
                    self.accumulate(grads, *w, gw)?;
                }
            }
            Op::ConvWeightGrad { x, g: up, geom } => {
                if rel(x) {
                    let gx = self.conv_input_grad_raw(*up, g, *geom);
                    self.accumulate(grads, *x, gx)?;
                }
                if rel(up) {
                    let gu = self.conv_raw(*x, g, *geom);
                    self.accumulate(grads, *up, gu)?;
                }
            }
            Op::Upsample { x, k } => {
                let p = self.avg_pool(g, *k)?;
                let gx = self.scale(p, (k * k) as f64);
                self.accumulate(grads, *x, gx)?;
            }
            Op::AvgPool { x, k } => {
                let u = self.upsample(g, *k)?;
                let gx = self.scale(u, 1.0 / (k * k) as f64);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if rel(v) {
                        let gv = self.narrow(g, *axis, offset, len)?;
                        self.accumulate(grads, *v, gv)?;
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let gx = self.embed(g, *axis, *start, full)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Embed { x, axis, start } => {
                let len = self.shape(*x)[*axis];
                let gx = self.narrow(g, *axis, *start, len)?;
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }

    /// Per-sample squared norm of `∂output/∂input`, shape `[N]` for an input
    /// whose leading axis is the batch. Per-sample outputs (`[N]` or `[N,1]`)
    /// are summed first, which is exact when samples do not interact. The
    /// result stays differentiable with respect to every other leaf
    /// (double backpropagation).
    pub fn grad_norm_sq(&mut self, output: Var, input: Var) -> Result<Var> {
        if !self.depends_on(output, input) {
            return Err(TensorError::Disconnected);
        }
        let total = if self.value(output).numel() == 1 {
            output
        } else {
            self.sum(output)
        };
        let g = self.grad(total, &[input])?[0];
        let sq = self.mul(g, g)?;
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return self.reshape(sq, &[1]);
        }
        let mut per_sample = vec![1; shape.len()];
        per_sample[0] = shape[0];
        let s = self.sum_to(sq, &per_sample)?;
        self.reshape(s, &[shape[0]])
    }
}

/// Stabilizer added to the instance variance in AdaIN.
pub const ADAIN_EPS: f64 = 1e-8;
