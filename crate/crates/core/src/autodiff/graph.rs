//! Tensor-level reverse-mode tape.
//!
//! Every vector-Jacobian rule is itself expressed with tape ops, so the
//! gradient nodes produced by [`Graph::grad`] can be differentiated again.
//! That is what makes `∇_x ‖∇_θ ℓ‖²` a second call to `grad` on the same tape.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: expected shape {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value {value} produced by {op} in layer `{layer}`")]
    NonFinite {
        op: &'static str,
        layer: String,
        value: f64,
    },
    #[error("`{op}` is not twice differentiable; second-order gradients are undefined through it")]
    NotTwiceDifferentiable { op: &'static str },
    #[error("gradient requested of non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, stride: usize },
    ConvTranspose { g: usize, w: usize, stride: usize },
    ConvWeightGrad { x: usize, g: usize, stride: usize },
    AvgPool { x: usize, k: usize },
    Upsample { x: usize, k: usize },
    MaxPool { x: usize, argmax: Arc<Vec<usize>> },
    // `src` is the max-pool input; it is listed so a second pass that
    // reaches it fails loudly instead of silently treating argmax as constant.
    MaxUnpool { g: usize, src: usize },
    BroadcastChannel { x: usize },
    SumSpatial { x: usize },
    Reshape { x: usize },
    MatVec { w: usize, x: usize },
    MatTVec { w: usize, g: usize },
    Outer { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: f64 },
    AddConst { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Softplus { x: usize },
    Relu { x: usize },
    StepMask { x: usize },
    Softmax { x: usize },
    SoftmaxCrossEntropy { x: usize, label: usize },
    Sum { x: usize },
    BroadcastScalar { s: usize },
    ScalarMul { s: usize, x: usize },
    Dot { a: usize, b: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv_transpose",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::MaxPool { .. } => "max_pool",
            Op::MaxUnpool { .. } => "max_pool",
            Op::BroadcastChannel { .. } => "broadcast_channel",
            Op::SumSpatial { .. } => "sum_spatial",
            Op::Reshape { .. } => "reshape",
            Op::MatVec { .. } => "matvec",
            Op::MatTVec { .. } => "matvec_transposed",
            Op::Outer { .. } => "outer",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::AddConst { .. } => "add_const",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Relu { .. } => "relu",
            Op::StepMask { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum { .. } => "sum",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Dot { .. } => "dot",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Conv2d { x, w, .. } => [Some(x), Some(w)],
            ConvTranspose { g, w, .. } => [Some(g), Some(w)],
            ConvWeightGrad { x, g, .. } => [Some(x), Some(g)],
            MaxUnpool { g, src, .. } => [Some(g), Some(src)],
            MatVec { w, x } => [Some(w), Some(x)],
            MatTVec { w, g } => [Some(w), Some(g)],
            Outer { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } | Dot { a, b } => {
                [Some(a), Some(b)]
            }
            ScalarMul { s, x } => [Some(s), Some(x)],
            AvgPool { x, .. }
            | Upsample { x, .. }
            | MaxPool { x, .. }
            | BroadcastChannel { x }
            | SumSpatial { x }
            | Reshape { x }
            | Affine { x, .. }
            | AddConst { x }
            | Tanh { x }
            | Sigmoid { x }
            | Softplus { x }
            | Relu { x }
            | StepMask { x }
            | Softmax { x }
            | SoftmaxCrossEntropy { x, .. }
            | Sum { x } => [Some(x), None],
            BroadcastScalar { s } => [Some(s), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    layer: Arc<str>,
}

/// Append-only computation trace.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    layer: Arc<str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> AutodiffError {
    AutodiffError::Shape {
        op,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            layer: Arc::from("input"),
        }
    }

    /// Tags subsequently recorded nodes with a layer name used in error reports.
    pub fn set_layer(&mut self, name: &str) {
        self.layer = Arc::from(name);
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            layer: self.layer.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let value = Tensor::from_raw(shape, data);
        if let Some((_, bad)) = value.first_non_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                layer: self.layer.to_string(),
                value: bad,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            layer: self.layer.clone(),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: usize) -> &[f64] {
        self.nodes[v].value.data()
    }

    fn dims(&self, v: usize) -> &[usize] {
        self.nodes[v].value.shape()
    }

    fn dims3(&self, op: &'static str, v: usize) -> Result<(usize, usize, usize)> {
        match *self.dims(v) {
            [c, h, w] => Ok((c, h, w)),
            ref other => Err(shape_err(op, "[C, H, W]", other)),
        }
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn geom(&self, op: &'static str, x: usize, w: usize, stride: usize) -> Result<(usize, ConvGeom)> {
        let (c, h, wd) = self.dims3(op, x)?;
        let (o, kh, kw) = match *self.dims(w) {
            [o, wc, kh, kw] if wc == c && kh <= h && kw <= wd => (o, kh, kw),
            ref other => return Err(shape_err(op, format!("[O, {c}, kh<={h}, kw<={wd}]"), other)),
        };
        if stride == 0 {
            return Err(shape_err(op, "stride >= 1", stride));
        }
        Ok((
            o,
            ConvGeom {
                channels: c,
                height: h,
                width: wd,
                kh,
                kw,
                stride,
            },
        ))
    }

    // ---- forward ops -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (o, g) = self.geom("conv2d", x.0, w.0, stride)?;
        let y = kernels::conv2d(self.data(x.0), self.data(w.0), o, &g);
        self.push(Op::Conv2d { x: x.0, w: w.0, stride }, vec![o, g.out_h(), g.out_w()], y)
    }

    /// Adjoint of `conv2d` in its input. `like` supplies the `[C,H,W]`
    /// shape of the original input.
    fn conv_transpose(&mut self, gy: usize, w: usize, stride: usize, like: &[usize]) -> Result<Var> {
        let (o, c, kh, kw) = match *self.dims(w) {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref other => return Err(shape_err("conv_transpose", "[O, C, kh, kw]", other)),
        };
        let g = ConvGeom {
            channels: c,
            height: like[1],
            width: like[2],
            kh,
            kw,
            stride,
        };
        let expect = [o, g.out_h(), g.out_w()];
        if self.dims(gy) != expect {
            return Err(shape_err("conv_transpose", expect, self.dims(gy)));
        }
        let x = kernels::conv_transpose(self.data(gy), self.data(w), o, &g);
        self.push(Op::ConvTranspose { g: gy, w, stride }, vec![c, like[1], like[2]], x)
    }

    fn conv_weight_grad(&mut self, x: usize, gy: usize, stride: usize, kernel: (usize, usize)) -> Result<Var> {
        let (c, h, wd) = self.dims3("conv_weight_grad", x)?;
        let g = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh: kernel.0,
            kw: kernel.1,
            stride,
        };
        let o = match *self.dims(gy) {
            [o, oh, ow] if oh == g.out_h() && ow == g.out_w() => o,
            ref other => return Err(shape_err("conv_weight_grad", ["O", &g.out_h().to_string(), &g.out_w().to_string()], other)),
        };
        let gw = kernels::conv_weight_grad(self.data(x), self.data(gy), o, &g);
        self.push(Op::ConvWeightGrad { x, g: gy, stride }, vec![o, c, kernel.0, kernel.1], gw)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("avg_pool", x.0)?;
        if k == 0 || h < k || w < k {
            return Err(shape_err("avg_pool", format!("H, W >= {k}"), [c, h, w]));
        }
        let y = kernels::avg_pool(self.data(x.0), c, h, w, k);
        self.push(Op::AvgPool { x: x.0, k }, vec![c, h / k, w / k], y)
    }

    fn upsample(&mut self, g: usize, k: usize, like: &[usize]) -> Result<Var> {
        let (c, h, w) = (like[0], like[1], like[2]);
        if self.dims(g) != [c, h / k, w / k] {
            return Err(shape_err("upsample", [c, h / k, w / k], self.dims(g)));
        }
        let y = kernels::upsample(self.data(g), c, h, w, k);
        self.push(Op::Upsample { x: g, k }, like.to_vec(), y)
    }

    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("max_pool", x.0)?;
        if k == 0 || h < k || w < k {
            return Err(shape_err("max_pool", format!("H, W >= {k}"), [c, h, w]));
        }
        let (y, arg) = kernels::max_pool(self.data(x.0), c, h, w, k);
        self.push(
            Op::MaxPool {
                x: x.0,
                argmax: Arc::new(arg),
            },
            vec![c, h / k, w / k],
            y,
        )
    }

    fn max_unpool(&mut self, g: usize, src: usize, argmax: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.dims(src).to_vec();
        let mut out = vec![0.0; numel(&shape)];
        for (gv, &idx) in self.data(g).iter().zip(argmax.iter()) {
            out[idx] += gv;
        }
        self.push(Op::MaxUnpool { g, src }, shape, out)
    }

    /// Broadcasts a per-channel vector `[C]` over `[C, H, W]`.
    pub fn broadcast_channel(&mut self, b: Var, h: usize, w: usize) -> Result<Var> {
        let c = match *self.dims(b.0) {
            [c] => c,
            ref other => return Err(shape_err("broadcast_channel", "[C]", other)),
        };
        let mut out = Vec::with_capacity(c * h * w);
        for &v in self.data(b.0) {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        self.push(Op::BroadcastChannel { x: b.0 }, vec![c, h, w], out)
    }

    fn sum_spatial(&mut self, x: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("sum_spatial", x)?;
        let out: Vec<f64> = self.data(x).chunks(h * w).map(|ch| ch.iter().sum()).collect();
        self.push(Op::SumSpatial { x }, vec![c], out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", shape, self.shape(x)));
        }
        let data = self.data(x.0).to_vec();
        self.push(Op::Reshape { x: x.0 }, shape.to_vec(), data)
    }

    /// `w: [O, I]`, `x: [I]` → `[O]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (o, i) = match (self.dims(w.0), self.dims(x.0)) {
            (&[o, i], &[xi]) if i == xi => (o, i),
            (wd, xd) => return Err(shape_err("matvec", wd, xd)),
        };
        let mut y = vec![0.0; o];
        kernels::gemm(o, i, 1, self.data(w.0), false, self.data(x.0), false, &mut y, false);
        self.push(Op::MatVec { w: w.0, x: x.0 }, vec![o], y)
    }

    /// `w: [O, I]`, `g: [O]` → `wᵀ g: [I]`.
    fn matvec_t(&mut self, w: usize, g: usize) -> Result<Var> {
        let (o, i) = match (self.dims(w), self.dims(g)) {
            (&[o, i], &[go]) if o == go => (o, i),
            (wd, gd) => return Err(shape_err("matvec_transposed", wd, gd)),
        };
        let mut y = vec![0.0; i];
        kernels::gemm(i, o, 1, self.data(w), true, self.data(g), false, &mut y, false);
        self.push(Op::MatTVec { w, g }, vec![i], y)
    }

    fn outer(&mut self, a: usize, b: usize) -> Result<Var> {
        let (m, n) = match (self.dims(a), self.dims(b)) {
            (&[m], &[n]) => (m, n),
            (ad, bd) => return Err(shape_err("outer", ad, bd)),
        };
        let mut y = vec![0.0; m * n];
        kernels::gemm(m, 1, n, self.data(a), false, self.data(b), false, &mut y, false);
        self.push(Op::Outer { a, b }, vec![m, n], y)
    }

    fn zip(&mut self, op: Op, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let y = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| f(p, q)).collect();
        let shape = self.dims(a).to_vec();
        self.push(op, shape, y)
    }

    fn map(&mut self, op: Op, x: usize, f: impl Fn(f64) -> f64) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.dims(x).to_vec();
        self.push(op, shape, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add { a: a.0, b: b.0 }, a.0, b.0, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub { a: a.0, b: b.0 }, a.0, b.0, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul { a: a.0, b: b.0 }, a.0, b.0, |p, q| p * q)
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map(Op::Affine { x: x.0, scale }, x.0, |v| scale * v + shift)
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("add_const", self.shape(x), c.shape()));
        }
        let y = self.data(x.0).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddConst { x: x.0 }, shape, y)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Tanh { x: x.0 }, x.0, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Sigmoid { x: x.0 }, x.0, kernels::sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Softplus { x: x.0 }, x.0, kernels::softplus)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu { x: x.0 }, x.0, |v| v.max(0.0))
    }

    fn step_mask(&mut self, x: usize) -> Result<Var> {
        self.map(Op::StepMask { x }, x, |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(shape_err("softmax", "[K]", self.shape(x)));
        }
        let y = kernels::softmax(self.data(x.0));
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax { x: x.0 }, shape, y)
    }

    /// `logsumexp(x) − x[label]` as a scalar.
    pub fn softmax_cross_entropy(&mut self, x: Var, label: usize) -> Result<Var> {
        let k = match *self.shape(x) {
            [k] => k,
            ref other => return Err(shape_err("softmax_cross_entropy", "[K]", other)),
        };
        if label >= k {
            return Err(AutodiffError::Label { label, classes: k });
        }
        let xs = self.data(x.0);
        let loss = kernels::cross_entropy(xs, label);
        self.push(Op::SoftmaxCrossEntropy { x: x.0, label }, Vec::new(), vec![loss])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x.0).iter().sum();
        self.push(Op::Sum { x: x.0 }, Vec::new(), vec![s])
    }

    fn broadcast_scalar(&mut self, s: usize, shape: &[usize]) -> Result<Var> {
        let v = self.data(s)[0];
        self.push(Op::BroadcastScalar { s }, shape.to_vec(), vec![v; numel(shape)])
    }

    /// Scalar node times tensor node.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", "[]", self.shape(s)));
        }
        let c = self.data(s.0)[0];
        self.map(Op::ScalarMul { s: s.0, x: x.0 }, x.0, |v| c * v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a.0, b.0)?;
        let d = self.data(a.0).iter().zip(self.data(b.0)).map(|(p, q)| p * q).sum();
        self.push(Op::Dot { a: a.0, b: b.0 }, Vec::new(), vec![d])
    }

    // ---- reverse pass ------------------------------------------------

    /// Gradients of scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this graph and are differentiable again
    /// unless the path crosses an op without a second-order rule.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let end = output.0 + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if !needed[i] {
                needed[i] = self.nodes[i].op.inputs().iter().flatten().any(|&j| needed[j]);
            }
        }

        let mut adjoint: Vec<Option<usize>> = vec![None; end];
        let saved_layer = self.layer.clone();
        let seed_shape = self.shape(output).to_vec();
        let seed = self.leaf(Tensor::full(&seed_shape, 1.0));
        adjoint[output.0] = Some(seed.0);

        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.layer = self.nodes[i].layer.clone();
            for (slot, j) in op.inputs().iter().enumerate() {
                let Some(j) = *j else { continue };
                if !needed[j] {
                    continue;
                }
                let contrib = match self.vjp(&op, i, slot, g) {
                    Ok(v) => v,
                    Err(e) => {
                        self.layer = saved_layer;
                        return Err(e);
                    }
                };
                adjoint[j] = Some(match adjoint[j] {
                    None => contrib.0,
                    Some(prev) => self.add(Var(prev), contrib)?.0,
                });
            }
        }
        self.layer = saved_layer;

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(a) => Ok(Var(a)),
                None => {
                    let shape = self.shape(*w).to_vec();
                    Ok(self.leaf(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Contribution of node `out`'s adjoint `g` to input `slot` of `op`.
    fn vjp(&mut self, op: &Op, out: usize, slot: usize, g: usize) -> Result<Var> {
        let gv = Var(g);
        match *op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::Conv2d { x, w, stride } => {
                if slot == 0 {
                    let like = self.dims(x).to_vec();
                    self.conv_transpose(g, w, stride, &like)
                } else {
                    let k = self.kernel(w);
                    self.conv_weight_grad(x, g, stride, k)
                }
            }
            Op::ConvTranspose { g: a, w, stride } => {
                if slot == 0 {
                    self.conv2d(gv, Var(w), stride)
                } else {
                    let k = self.kernel(w);
                    self.conv_weight_grad(g, a, stride, k)
                }
            }
            Op::ConvWeightGrad { x, g: b, stride } => {
                if slot == 0 {
                    let like = self.dims(x).to_vec();
                    self.conv_transpose(b, g, stride, &like)
                } else {
                    self.conv2d(Var(x), gv, stride)
                }
            }
            Op::AvgPool { x, k } => {
                let like = self.dims(x).to_vec();
                self.upsample(g, k, &like)
            }
            Op::Upsample { k, .. } => self.avg_pool(gv, k),
            Op::MaxPool { x, ref argmax } => self.max_unpool(g, x, argmax.clone()),
            Op::MaxUnpool { .. } => Err(AutodiffError::NotTwiceDifferentiable { op: "max_pool" }),
            Op::BroadcastChannel { .. } => self.sum_spatial(g),
            Op::SumSpatial { x } => {
                let d = self.dims(x).to_vec();
                self.broadcast_channel(gv, d[1], d[2])
            }
            Op::Reshape { x } => {
                let d = self.dims(x).to_vec();
                self.reshape(gv, &d)
            }
            Op::MatVec { w, x } => {
                if slot == 0 {
                    self.outer(g, x)
                } else {
                    self.matvec_t(w, g)
                }
            }
            Op::MatTVec { w, g: b } => {
                if slot == 0 {
                    self.outer(b, g)
                } else {
                    self.matvec(Var(w), gv)
                }
            }
            Op::Outer { a, b } => {
                if slot == 0 {
                    self.matvec(gv, Var(b))
                } else {
                    self.matvec_t(g, a)
                }
            }
            Op::Add { .. } | Op::AddConst { .. } => Ok(gv),
            Op::Sub { .. } => {
                if slot == 0 {
                    Ok(gv)
                } else {
                    self.affine(gv, -1.0, 0.0)
                }
            }
            Op::Mul { a, b } => {
                let other = if slot == 0 { b } else { a };
                self.mul(gv, Var(other))
            }
            Op::Affine { scale, .. } => self.affine(gv, scale, 0.0),
            Op::Tanh { .. } => {
                // d tanh = 1 − y²
                let y = Var(out);
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0)?;
                self.mul(gv, d)
            }
            Op::Sigmoid { .. } => {
                let s = Var(out);
                let one_minus = self.affine(s, -1.0, 1.0)?;
                let d = self.mul(s, one_minus)?;
                self.mul(gv, d)
            }
            Op::Softplus { x } => {
                let s = self.sigmoid(Var(x))?;
                self.mul(gv, s)
            }
            Op::Relu { x } => {
                let m = self.step_mask(x)?;
                self.mul(gv, m)
            }
            Op::StepMask { .. } => Err(AutodiffError::NotTwiceDifferentiable { op: "relu" }),
            Op::Softmax { .. } => {
                // s ⊙ (g − ⟨g, s⟩)
                let s = Var(out);
                let u = self.mul(s, gv)?;
                let t = self.sum(u)?;
                let ts = self.scalar_mul(t, s)?;
                self.sub(u, ts)
            }
            Op::SoftmaxCrossEntropy { x, label } => {
                let p = self.softmax(Var(x))?;
                let k = self.dims(x)[0];
                let mut onehot = vec![0.0; k];
                onehot[label] = -1.0;
                let diff = self.add_const(p, &Tensor::from_raw(vec![k], onehot))?;
                self.scalar_mul(gv, diff)
            }
            Op::Sum { x } => {
                let d = self.dims(x).to_vec();
                self.broadcast_scalar(g, &d)
            }
            Op::BroadcastScalar { .. } => self.sum(gv),
            Op::ScalarMul { s, x } => {
                if slot == 0 {
                    self.dot(gv, Var(x))
                } else {
                    self.scalar_mul(Var(s), gv)
                }
            }
            Op::Dot { a, b } => {
                let other = if slot == 0 { b } else { a };
                self.scalar_mul(gv, Var(other))
            }
        }
    }

    fn kernel(&self, w: usize) -> (usize, usize) {
        let d = self.dims(w);
        (d[2], d[3])
    }
}
