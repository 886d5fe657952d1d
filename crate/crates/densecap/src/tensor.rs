//! Dense f64 tensors with a tape-based reverse-mode gradient graph.
//!
//! The graph is rebuilt on every forward pass. Nodes are appended in creation
//! order; `backward` walks them in exact reverse order, so topological order
//! is guaranteed by construction. Parameters live outside the graph in a
//! [`ParamStore`]; each forward pass leases them in as leaves and
//! [`Graph::flush_grads`] accumulates leaf gradients back into the store.

use crate::error::{Error, Result};
use rand::Rng;

/// Plain value tensor: row-major f64 data plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dim in shape {:?}", shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Uniform init in (-a, a) with a = 1/sqrt(fan_in), biases use fan_in of
    /// the layer input as well. Zero bias is just `zeros`.
    pub fn uniform_fanin<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

/// Identifier of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named trainable parameters. Gradients accumulate here across graphs until
/// explicitly zeroed (the optimizer zeroes them after each step).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(self.id_of(name).is_none(), "duplicate param {name}");
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is a single scalar
    ScalarRhs,
    /// lhs is a single scalar
    ScalarLhs,
    /// lhs [m, n], rhs has n elements (applied per row)
    RowRhs { m: usize, n: usize },
    /// lhs [c, h, w], rhs has c elements (applied per channel)
    ChanRhs { c: usize, hw: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Scale { a: usize, c: f64 },
    Sum { a: usize },
    Reshape { a: usize },
    Gather { a: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize>, cols: usize },
    ConcatCols { a: usize, b: usize, rows: usize, ca: usize, cb: usize },
    Conv2d {
        input: usize,
        kernels: usize,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        k_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    },
    MaxPool2 { a: usize, argmax: Vec<usize> },
    /// argmax holds, per output element, the flat index of the max in the
    /// input (None for empty bins).
    RoiPool { a: usize, argmax: Vec<Option<usize>> },
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { pred: usize, target: usize, rows: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic gradient tape. One instance per forward pass; single-threaded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { shape, value, grad, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<Var> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    /// Lease a stored parameter into the graph as a gradient-bearing leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.entry(id).value.clone();
        let v = self.leaf(t, true);
        self.param_leaves.push((id, v.0));
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.nodes[v.0].shape.clone(), data: self.nodes[v.0].value.clone() }
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let br = &bv[p * n..(p + 1) * n];
                    let or = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        or[j] += x * br[j];
                    }
                }
            }
        }
        let rg = self.req(&[a.0, b.0]);
        let v = self.push(vec![m, n], out, rg, Op::MatMul { a: a.0, b: b.0, m, k, n });
        self.check_finite(v, "matmul")
    }

    fn broadcast_of(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if sa == sb || na == nb {
            Ok(Broadcast::Same)
        } else if nb == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if na == 1 {
            Ok(Broadcast::ScalarLhs)
        } else if sa.len() == 2 && nb == sa[1] {
            Ok(Broadcast::RowRhs { m: sa[0], n: sa[1] })
        } else if sa.len() == 3 && nb == sa[0] {
            Ok(Broadcast::ChanRhs { c: sa[0], hw: sa[1] * sa[2] })
        } else {
            Err(Error::Shape(format!("elementwise {:?} vs {:?}", sa, sb)))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Broadcast) -> Op,
        name: &'static str,
    ) -> Result<Var> {
        let bc = self.broadcast_of(a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out: Vec<f64> = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarRhs => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::ScalarLhs => bv.iter().map(|&y| f(av[0], y)).collect(),
            Broadcast::RowRhs { m, n } => (0..m * n).map(|i| f(av[i], bv[i % n])).collect(),
            Broadcast::ChanRhs { hw, .. } => (0..av.len()).map(|i| f(av[i], bv[i / hw])).collect(),
        };
        let shape = if matches!(bc, Broadcast::ScalarLhs) {
            self.nodes[b.0].shape.clone()
        } else {
            self.nodes[a.0].shape.clone()
        };
        let rg = self.req(&[a.0, b.0]);
        let v = self.push(shape, out, rg, mk(a.0, b.0, bc));
        self.check_finite(v, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc }, "mul")
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        mk: impl Fn(usize) -> Op,
        name: &'static str,
    ) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        let v = self.push(shape, out, rg, mk(a.0));
        self.check_finite(v, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a }, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, |a| Op::Tanh { a }, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), |a| Op::Relu { a }, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, |a| Op::Exp { a }, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.unary(a, f64::ln, |a| Op::Log { a }, "log")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |a| Op::Scale { a, c }, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        let v = self.push(vec![1], vec![s], rg, Op::Sum { a: a.0 });
        self.check_finite(v, "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].shape, shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { a: a.0 }))
    }

    /// out[i] = a[idx[i]]; backward scatter-adds. Covers row selection and
    /// channel rearrangement.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != idx.len() {
            return Err(Error::Shape("gather index/shape mismatch".into()));
        }
        let an = self.nodes[a.0].value.len();
        if idx.iter().any(|&i| i >= an) {
            return Err(Error::Usage("gather index out of range".into()));
        }
        let value: Vec<f64> = idx.iter().map(|&i| self.nodes[a.0].value[i]).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape.to_vec(), value, rg, Op::Gather { a: a.0, idx }))
    }

    /// Select rows of a 2-D tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Shape("select_rows wants a matrix".into()));
        }
        let n = s[1];
        let mut idx = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Usage("row index out of range".into()));
            }
            idx.extend(r * n..(r + 1) * n);
        }
        self.gather(a, idx, &[rows.len(), n])
    }

    /// Stack matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of nothing".into()));
        }
        let cols = {
            let s = &self.nodes[parts[0].0].shape;
            if s.len() != 2 {
                return Err(Error::Shape("concat_rows wants matrices".into()));
            }
            s[1]
        };
        let mut rows = 0;
        let mut value = Vec::new();
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            rows += s[0];
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = self.req(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            vec![rows, cols],
            value,
            rg,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect(), cols },
        ))
    }

    /// Concatenate two matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat_cols {:?} vs {:?}", sa, sb)));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[a.0].value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&self.nodes[b.0].value[r * cb..(r + 1) * cb]);
        }
        let rg = self.req(&[a.0, b.0]);
        Ok(self.push(
            vec![rows, ca + cb],
            value,
            rg,
            Op::ConcatCols { a: a.0, b: b.0, rows, ca, cb },
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(Error::Shape(format!("conv2d input {:?} kernels {:?}", si, sk)));
        }
        let (in_c, in_h, in_w) = (si[0], si[1], si[2]);
        let (k_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; k_out * out_h * out_w];
        {
            let iv = &self.nodes[input.0].value;
            let kv = &self.nodes[kernels.0].value;
            for ko in 0..k_out {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = 0.0;
                        for c in 0..in_c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                let krow = ((ko * in_c + c) * kh + ky) * kw;
                                let irow = (c * in_h + iy as usize) * in_w;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= in_w as isize {
                                        continue;
                                    }
                                    acc += iv[irow + ix as usize] * kv[krow + kx];
                                }
                            }
                        }
                        out[(ko * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
        }
        let rg = self.req(&[input.0, kernels.0]);
        let v = self.push(
            vec![k_out, out_h, out_w],
            out,
            rg,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                in_c,
                in_h,
                in_w,
                k_out,
                kh,
                kw,
                stride,
                pad,
                out_h,
                out_w,
            },
        );
        self.check_finite(v, "conv2d")
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 on {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        {
            let v = &self.nodes[a.0].value;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                                if v[i] > best {
                                    best = v[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = (ch * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = bi;
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c, oh, ow], out, rg, Op::MaxPool2 { a: a.0, argmax }))
    }

    /// Max-pool an arbitrary box on a feature map into a fixed PxP grid.
    /// `fbox` is (x1, y1, x2, y2) in feature-map coordinates. Bin edges use
    /// floor/ceil; empty bins yield 0; gradient routes to argmax positions.
    pub fn roi_pool(&mut self, a: Var, fbox: (f64, f64, f64, f64), p: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Shape("roi_pool wants [C,H,W]".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (x1, y1, x2, y2) = fbox;
        if x2 <= 0.0 || y2 <= 0.0 || x1 >= w as f64 || y1 >= h as f64 {
            return Err(Error::Usage("roi box outside feature map".into()));
        }
        let x1 = x1.max(0.0);
        let y1 = y1.max(0.0);
        let x2 = x2.min(w as f64);
        let y2 = y2.min(h as f64);
        let bw = (x2 - x1) / p as f64;
        let bh = (y2 - y1) / p as f64;
        let mut out = vec![0.0; c * p * p];
        let mut argmax = vec![None; c * p * p];
        {
            let v = &self.nodes[a.0].value;
            for ch in 0..c {
                for by in 0..p {
                    let ys = ((y1 + by as f64 * bh).floor() as isize).max(0) as usize;
                    let ye = ((y1 + (by + 1) as f64 * bh).ceil() as usize).min(h);
                    for bx in 0..p {
                        let xs = ((x1 + bx as f64 * bw).floor() as isize).max(0) as usize;
                        let xe = ((x1 + (bx + 1) as f64 * bw).ceil() as usize).min(w);
                        let o = (ch * p + by) * p + bx;
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = None;
                        for y in ys..ye {
                            for x in xs..xe {
                                let i = (ch * h + y) * w + x;
                                if v[i] > best {
                                    best = v[i];
                                    bi = Some(i);
                                }
                            }
                        }
                        if let Some(i) = bi {
                            out[o] = best;
                            argmax[o] = Some(i);
                        }
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c, p, p], out, rg, Op::RoiPool { a: a.0, argmax }))
    }

    /// Mean over rows of -log softmax(logits)[target]. Numerically stable.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_ce logits {:?} vs {} targets",
                s,
                targets.len()
            )));
        }
        let (n, vsize) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= vsize) {
            return Err(Error::Usage(format!("target {} out of range {}", t, vsize)));
        }
        let mut probs = vec![0.0; n * vsize];
        let mut loss = 0.0;
        {
            let lv = &self.nodes[logits.0].value;
            for r in 0..n {
                let row = &lv[r * vsize..(r + 1) * vsize];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    probs[r * vsize + j] = e;
                    z += e;
                }
                for j in 0..vsize {
                    probs[r * vsize + j] /= z;
                }
                loss -= probs[r * vsize + targets[r]].max(f64::MIN_POSITIVE).ln();
            }
        }
        loss /= n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        let v = self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCe { logits: logits.0, targets: targets.to_vec(), probs },
        );
        self.check_finite(v, "softmax_cross_entropy")
    }

    /// Smooth-L1 per element, summed, then averaged over boxes (rows of a
    /// matrix; a vector counts as one box).
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (&self.nodes[pred.0].shape, &self.nodes[target.0].shape);
        if self.nodes[pred.0].value.len() != self.nodes[target.0].value.len() {
            return Err(Error::Shape(format!("smooth_l1 {:?} vs {:?}", sp, st)));
        }
        let rows = if sp.len() == 2 { sp[0] } else { 1 };
        let mut loss = 0.0;
        {
            let pv = &self.nodes[pred.0].value;
            let tv = &self.nodes[target.0].value;
            for (&p, &t) in pv.iter().zip(tv) {
                let d = (p - t).abs();
                loss += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        loss /= rows as f64;
        let rg = self.req(&[pred.0, target.0]);
        let v = self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SmoothL1 { pred: pred.0, target: target.0, rows },
        );
        self.check_finite(v, "smooth_l1")
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of every gradient-bearing leaf reachable from
    /// `loss`. Repeated calls without zeroing accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage("backward root must be scalar".into()));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = std::mem::take(&mut self.nodes[i].grad);
            match op {
                Op::Leaf => {
                    self.nodes[i].grad = g; // keep leaf grads readable
                    continue;
                }
                Op::MatMul { a, b, m, k, n } => {
                    if self.nodes[a].requires_grad {
                        let bv = self.nodes[b].value.clone();
                        let ga = &mut self.nodes[a].grad;
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[r * n + j] * bv[p * n + j];
                                }
                                ga[r * k + p] += acc;
                            }
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let av = self.nodes[a].value.clone();
                        let gb = &mut self.nodes[b].grad;
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += av[r * k + p] * g[r * n + j];
                                }
                                gb[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Add { a, b, bc } => {
                    self.accum_bcast(a, &g, bc, true, 1.0);
                    self.accum_bcast(b, &g, bc, false, 1.0);
                }
                Op::Sub { a, b, bc } => {
                    self.accum_bcast(a, &g, bc, true, 1.0);
                    self.accum_bcast(b, &g, bc, false, -1.0);
                }
                Op::Mul { a, b, bc } => {
                    if self.nodes[a].requires_grad {
                        let gm = self.mul_grad(&g, b, bc, true);
                        self.accum_bcast(a, &gm, bc, true, 1.0);
                    }
                    if self.nodes[b].requires_grad {
                        let gm = self.mul_grad(&g, a, bc, false);
                        self.accum_bcast(b, &gm, bc, false, 1.0);
                    }
                }
                Op::Sigmoid { a } => {
                    let ov = self.nodes[i].value.clone();
                    let ga = &mut self.nodes[a].grad;
                    for (j, &y) in ov.iter().enumerate() {
                        ga[j] += g[j] * y * (1.0 - y);
                    }
                }
                Op::Tanh { a } => {
                    let ov = self.nodes[i].value.clone();
                    let ga = &mut self.nodes[a].grad;
                    for (j, &y) in ov.iter().enumerate() {
                        ga[j] += g[j] * (1.0 - y * y);
                    }
                }
                Op::Relu { a } => {
                    let iv = self.nodes[a].value.clone();
                    let ga = &mut self.nodes[a].grad;
                    for (j, &x) in iv.iter().enumerate() {
                        if x > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
                Op::Exp { a } => {
                    let ov = self.nodes[i].value.clone();
                    let ga = &mut self.nodes[a].grad;
                    for (j, &y) in ov.iter().enumerate() {
                        ga[j] += g[j] * y;
                    }
                }
                Op::Log { a } => {
                    let iv = self.nodes[a].value.clone();
                    let ga = &mut self.nodes[a].grad;
                    for (j, &x) in iv.iter().enumerate() {
                        ga[j] += g[j] / x;
                    }
                }
                Op::Scale { a, c } => {
                    let ga = &mut self.nodes[a].grad;
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j] += gj * c;
                    }
                }
                Op::Sum { a } => {
                    let ga = &mut self.nodes[a].grad;
                    for gj in ga.iter_mut() {
                        *gj += g[0];
                    }
                }
                Op::Reshape { a } => {
                    let ga = &mut self.nodes[a].grad;
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j] += gj;
                    }
                }
                Op::Gather { a, idx } => {
                    let ga = &mut self.nodes[a].grad;
                    for (j, &src) in idx.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
                Op::ConcatRows { parts, cols: _ } => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        if self.nodes[p].requires_grad {
                            let gp = &mut self.nodes[p].grad;
                            for j in 0..n {
                                gp[j] += g[off + j];
                            }
                        }
                        off += n;
                    }
                }
                Op::ConcatCols { a, b, rows, ca, cb } => {
                    for r in 0..rows {
                        if self.nodes[a].requires_grad {
                            let ga = &mut self.nodes[a].grad;
                            for j in 0..ca {
                                ga[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                        if self.nodes[b].requires_grad {
                            let gb = &mut self.nodes[b].grad;
                            for j in 0..cb {
                                gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    in_c,
                    in_h,
                    in_w,
                    k_out,
                    kh,
                    kw,
                    stride,
                    pad,
                    out_h,
                    out_w,
                } => {
                    let kv = self.nodes[kernels].value.clone();
                    let iv = self.nodes[input].value.clone();
                    let gi = self.nodes[input].requires_grad;
                    let gk = self.nodes[kernels].requires_grad;
                    let mut gin = vec![0.0; iv.len()];
                    let mut gker = vec![0.0; kv.len()];
                    for ko in 0..k_out {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let go = g[(ko * out_h + oy) * out_w + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..in_c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= in_h as isize {
                                            continue;
                                        }
                                        let krow = ((ko * in_c + c) * kh + ky) * kw;
                                        let irow = (c * in_h + iy as usize) * in_w;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= in_w as isize {
                                                continue;
                                            }
                                            if gi {
                                                gin[irow + ix as usize] += go * kv[krow + kx];
                                            }
                                            if gk {
                                                gker[krow + kx] += go * iv[irow + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if gi {
                        let ga = &mut self.nodes[input].grad;
                        for (j, v) in gin.into_iter().enumerate() {
                            ga[j] += v;
                        }
                    }
                    if gk {
                        let ga = &mut self.nodes[kernels].grad;
                        for (j, v) in gker.into_iter().enumerate() {
                            ga[j] += v;
                        }
                    }
                }
                Op::MaxPool2 { a, argmax } => {
                    let ga = &mut self.nodes[a].grad;
                    for (j, &src) in argmax.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
                Op::RoiPool { a, argmax } => {
                    let ga = &mut self.nodes[a].grad;
                    for (j, src) in argmax.iter().enumerate() {
                        if let Some(s) = src {
                            ga[*s] += g[j];
                        }
                    }
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let n = targets.len();
                    let vsize = probs.len() / n;
                    let ga = &mut self.nodes[logits].grad;
                    for r in 0..n {
                        for j in 0..vsize {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            ga[r * vsize + j] += g[0] * (probs[r * vsize + j] - onehot) / n as f64;
                        }
                    }
                }
                Op::SmoothL1 { pred, target, rows } => {
                    let pv = self.nodes[pred].value.clone();
                    let tv = self.nodes[target].value.clone();
                    let scale = g[0] / rows as f64;
                    if self.nodes[pred].requires_grad {
                        let gp = &mut self.nodes[pred].grad;
                        for j in 0..pv.len() {
                            gp[j] += scale * smooth_l1_deriv(pv[j] - tv[j]);
                        }
                    }
                    if self.nodes[target].requires_grad {
                        let gt = &mut self.nodes[target].grad;
                        for j in 0..pv.len() {
                            gt[j] -= scale * smooth_l1_deriv(pv[j] - tv[j]);
                        }
                    }
                }
            }
            // interior node: grad consumed, leave zeroed
            self.nodes[i].grad = vec![0.0; self.nodes[i].value.len()];
        }
        Ok(())
    }

    fn mul_grad(&self, g: &[f64], other: usize, bc: Broadcast, other_is_rhs: bool) -> Vec<f64> {
        let ov = &self.nodes[other].value;
        match bc {
            Broadcast::Same => g.iter().zip(ov).map(|(&gj, &o)| gj * o).collect(),
            Broadcast::ScalarRhs => {
                if other_is_rhs {
                    g.iter().map(|&gj| gj * ov[0]).collect()
                } else {
                    g.iter().zip(ov).map(|(&gj, &o)| gj * o).collect()
                }
            }
            Broadcast::ScalarLhs => {
                if other_is_rhs {
                    g.iter().zip(ov).map(|(&gj, &o)| gj * o).collect()
                } else {
                    g.iter().map(|&gj| gj * ov[0]).collect()
                }
            }
            Broadcast::RowRhs { n, .. } => {
                if other_is_rhs {
                    g.iter().enumerate().map(|(j, &gj)| gj * ov[j % n]).collect()
                } else {
                    g.iter().zip(ov).map(|(&gj, &o)| gj * o).collect()
                }
            }
            Broadcast::ChanRhs { hw, .. } => {
                if other_is_rhs {
                    g.iter().enumerate().map(|(j, &gj)| gj * ov[j / hw]).collect()
                } else {
                    g.iter().zip(ov).map(|(&gj, &o)| gj * o).collect()
                }
            }
        }
    }

    /// Accumulate output-shaped grad `g` into node `target`, reducing over
    /// broadcast axes when the target was the broadcast (smaller) side.
    fn accum_bcast(&mut self, target: usize, g: &[f64], bc: Broadcast, is_lhs: bool, sign: f64) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let tn = self.nodes[target].value.len();
        let gt = &mut self.nodes[target].grad;
        let reduced = match bc {
            Broadcast::Same => false,
            Broadcast::ScalarRhs => !is_lhs,
            Broadcast::ScalarLhs => is_lhs,
            Broadcast::RowRhs { .. } | Broadcast::ChanRhs { .. } => !is_lhs,
        };
        if !reduced {
            for (j, &gj) in g.iter().enumerate() {
                gt[j] += sign * gj;
            }
            return;
        }
        match bc {
            Broadcast::ScalarRhs | Broadcast::ScalarLhs => {
                gt[0] += sign * g.iter().sum::<f64>();
            }
            Broadcast::RowRhs { n, .. } => {
                for (j, &gj) in g.iter().enumerate() {
                    gt[j % n] += sign * gj;
                }
            }
            Broadcast::ChanRhs { hw, .. } => {
                for (j, &gj) in g.iter().enumerate() {
                    gt[j / hw] += sign * gj;
                }
            }
            Broadcast::Same => unreachable!(),
        }
        let _ = tn;
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate leaf gradients of leased parameters back into the store.
    pub fn flush_grads(&self, store: &mut ParamStore) {
        for &(id, node) in &self.param_leaves {
            let g = &self.nodes[node].grad;
            let e = store.entry_mut(id);
            for (dst, &src) in e.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
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

fn smooth_l1_deriv(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// SGD with momentum: v <- momentum*v - lr*grad; w <- w + v.
/// Gradients are zeroed after each step.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for i in 0..store.len() {
            let e = store.entry_mut(ParamId(i));
            let v = &mut self.velocity[i];
            for j in 0..v.len() {
                v[j] = self.momentum * v[j] - self.learning_rate * e.grad[j];
                e.value.data[j] += v[j];
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g() -> Graph {
        Graph::new()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut gr = g();
        let i2 = gr.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = gr.constant(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = gr.matmul(i2, m).unwrap();
        assert_eq!(gr.value(r), &[3.0, 4.0, 5.0, 6.0]);

        let z = gr.constant(Tensor::zeros(&[2, 3]));
        let m32 = gr.constant(Tensor::from_vec(&[3, 2], vec![1.0; 6]).unwrap());
        let r = gr.matmul(z, m32).unwrap();
        assert_eq!(gr.value(r), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut gr = g();
        let a = gr.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = gr.constant(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let r = gr.matmul(a, b).unwrap();
        assert_eq!(gr.value(r), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut gr = g();
        let a = gr.constant(Tensor::zeros(&[2, 3]));
        let b = gr.constant(Tensor::zeros(&[2, 3]));
        assert!(gr.matmul(a, b).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut gr = g();
        let z = gr.constant(Tensor::scalar(0.0));
        let s = gr.sigmoid(z).unwrap();
        assert_eq!(gr.value(s), &[0.5]);
        let t = gr.tanh(z).unwrap();
        assert_eq!(gr.value(t), &[0.0]);
        let a = gr.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = gr.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let r = gr.add(a, b).unwrap();
        assert_eq!(gr.value(r), &[4.0, 6.0]);
    }

    #[test]
    fn log_domain_error() {
        let mut gr = g();
        let a = gr.constant(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        assert!(matches!(gr.log(a), Err(Error::Domain(_))));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut gr = g();
        let img = gr.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = gr.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let r = gr.conv2d(img, k, 1, 0).unwrap();
        assert_eq!(gr.value(r), &[1.0, 2.0, 3.0, 4.0]);

        let kz = gr.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let r = gr.conv2d(img, kz, 1, 0).unwrap();
        assert_eq!(gr.value(r), &[0.0; 4]);
    }

    #[test]
    fn conv2d_window_sums() {
        // 3x3 input, 2x2 ones kernel, stride 1, pad 0 -> 2x2 window sums
        let mut gr = g();
        let img = gr.constant(
            Tensor::from_vec(&[1, 3, 3], (1..=9).map(|x| x as f64).collect()).unwrap(),
        );
        let k = gr.constant(Tensor::filled(&[1, 1, 2, 2], 1.0));
        let r = gr.conv2d(img, k, 1, 0).unwrap();
        assert_eq!(gr.value(r), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_zero_stride_errors() {
        let mut gr = g();
        let img = gr.constant(Tensor::zeros(&[1, 2, 2]));
        let k = gr.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(gr.conv2d(img, k, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_output_dims_floor_formula() {
        for stride in 1..=3usize {
            for pad in 0..=2usize {
                for (h, w, kh, kw) in [(5, 7, 3, 3), (8, 8, 2, 4), (6, 5, 1, 1)] {
                    if kh > h + 2 * pad || kw > w + 2 * pad {
                        continue;
                    }
                    let mut gr = g();
                    let img = gr.constant(Tensor::zeros(&[2, h, w]));
                    let k = gr.constant(Tensor::zeros(&[3, 2, kh, kw]));
                    let r = gr.conv2d(img, k, stride, pad).unwrap();
                    let eh = (h + 2 * pad - kh) / stride + 1;
                    let ew = (w + 2 * pad - kw) / stride + 1;
                    assert_eq!(gr.shape(r), &[3, eh, ew]);
                }
            }
        }
    }

    #[test]
    fn softmax_ce_examples() {
        let mut gr = g();
        // uniform logits over V classes -> ln(V)
        let v = 7usize;
        let l = gr.constant(Tensor::zeros(&[1, v]));
        let r = gr.softmax_cross_entropy(l, &[3]).unwrap();
        assert!((gr.value(r)[0] - (v as f64).ln()).abs() < 1e-12);

        // dominant logit -> loss -> 0
        let l = gr.constant(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 100.0]).unwrap());
        let r = gr.softmax_cross_entropy(l, &[2]).unwrap();
        assert!(gr.value(r)[0] < 1e-12);

        // logits [1,2,3], target 2 -> 0.40760596...
        let l = gr.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let r = gr.softmax_cross_entropy(l, &[2]).unwrap();
        let expect = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((gr.value(r)[0] - expect).abs() < 1e-12);
        assert!((gr.value(r)[0] - 0.40760596444438079).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_target_out_of_range() {
        let mut gr = g();
        let l = gr.constant(Tensor::zeros(&[1, 3]));
        assert!(gr.softmax_cross_entropy(l, &[3]).is_err());
    }

    #[test]
    fn softmax_ce_grad_rows_sum_to_zero() {
        let mut gr = g();
        let l = gr.leaf(
            Tensor::from_vec(&[2, 4], vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1, 0.2, -2.0]).unwrap(),
            true,
        );
        let r = gr.softmax_cross_entropy(l, &[1, 3]).unwrap();
        gr.backward(r).unwrap();
        let grad = gr.grad(l);
        for row in 0..2 {
            let s: f64 = grad[row * 4..(row + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        let mut gr = g();
        let cases = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)];
        for (d, expect) in cases {
            let p = gr.constant(Tensor::from_vec(&[1], vec![d]).unwrap());
            let t = gr.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
            let r = gr.smooth_l1(p, t).unwrap();
            assert!((gr.value(r)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_square() {
        let mut gr = g();
        let w = gr.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = gr.sum(w).unwrap();
        gr.backward(s).unwrap();
        assert_eq!(gr.grad(w), &[1.0, 1.0, 1.0]);

        let mut gr = g();
        let w = gr.leaf(Tensor::scalar(3.0), true);
        let sq = gr.mul(w, w).unwrap();
        gr.backward(sq).unwrap();
        assert_eq!(gr.grad(w), &[6.0]);
    }

    #[test]
    fn backward_non_scalar_root_errors() {
        let mut gr = g();
        let w = gr.leaf(Tensor::zeros(&[2]), true);
        assert!(gr.backward(w).is_err());
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut gr = g();
        let w = gr.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let s = gr.sum(w).unwrap();
        gr.backward(s).unwrap();
        gr.backward(s).unwrap();
        assert_eq!(gr.grad(w), &[2.0, 2.0]);
    }

    /// Central finite-difference gradient oracle over a scalar-valued
    /// function of a flat parameter vector.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for j in 0..x.len() {
            xp[j] = x[j] + h;
            let fp = f(&xp);
            xp[j] = x[j] - h;
            let fm = f(&xp);
            xp[j] = x[j];
            out[j] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < 1e-5,
                "grad mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn finite_difference_composed_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // loss(x) built from matmul, sigmoid, tanh, relu, exp, mul, add, sum
        let build = |x: &[f64]| -> f64 {
            let mut gr = Graph::new();
            let a = gr
                .leaf(Tensor::from_vec(&[2, 3], x[..6].to_vec()).unwrap(), true);
            let b = gr
                .leaf(Tensor::from_vec(&[3, 2], x[6..12].to_vec()).unwrap(), true);
            let m = gr.matmul(a, b).unwrap();
            let s = gr.sigmoid(m).unwrap();
            let t = gr.tanh(m).unwrap();
            let p = gr.mul(s, t).unwrap();
            let r = gr.relu(p).unwrap();
            let e = gr.exp(r).unwrap();
            let q = gr.add(e, p).unwrap();
            let l = gr.sum(q).unwrap();
            gr.value(l)[0]
        };
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // analytic grads from the tape
        let mut gr = Graph::new();
        let a = gr.leaf(Tensor::from_vec(&[2, 3], x[..6].to_vec()).unwrap(), true);
        let b = gr.leaf(Tensor::from_vec(&[3, 2], x[6..12].to_vec()).unwrap(), true);
        let m = gr.matmul(a, b).unwrap();
        let s = gr.sigmoid(m).unwrap();
        let t = gr.tanh(m).unwrap();
        let p = gr.mul(s, t).unwrap();
        let r = gr.relu(p).unwrap();
        let e = gr.exp(r).unwrap();
        let q = gr.add(e, p).unwrap();
        let l = gr.sum(q).unwrap();
        gr.backward(l).unwrap();
        let mut analytic = gr.grad(a).to_vec();
        analytic.extend_from_slice(gr.grad(b));
        let numeric = fd_grad(&build, &x, 1e-6);
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn finite_difference_conv_pool_roi_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nk = 2 * 1 * 2 * 2;
        let ni = 1 * 4 * 4;
        let build = |x: &[f64]| -> f64 {
            let mut gr = Graph::new();
            let img = gr.leaf(Tensor::from_vec(&[1, 4, 4], x[..ni].to_vec()).unwrap(), true);
            let k = gr.leaf(Tensor::from_vec(&[2, 1, 2, 2], x[ni..].to_vec()).unwrap(), true);
            let c = gr.conv2d(img, k, 1, 1).unwrap(); // 2x5x5 -> pad makes odd, pool needs even
            let c = gr.roi_pool(c, (0.0, 0.0, 5.0, 5.0), 2).unwrap();
            let f = gr.reshape(c, &[1, 8]).unwrap();
            let ce = gr.softmax_cross_entropy(f, &[3]).unwrap();
            gr.value(ce)[0]
        };
        let x: Vec<f64> = (0..ni + nk).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut gr = Graph::new();
        let img = gr.leaf(Tensor::from_vec(&[1, 4, 4], x[..ni].to_vec()).unwrap(), true);
        let k = gr.leaf(Tensor::from_vec(&[2, 1, 2, 2], x[ni..].to_vec()).unwrap(), true);
        let c = gr.conv2d(img, k, 1, 1).unwrap();
        let c = gr.roi_pool(c, (0.0, 0.0, 5.0, 5.0), 2).unwrap();
        let f = gr.reshape(c, &[1, 8]).unwrap();
        let ce = gr.softmax_cross_entropy(f, &[3]).unwrap();
        gr.backward(ce).unwrap();
        let mut analytic = gr.grad(img).to_vec();
        analytic.extend_from_slice(gr.grad(k));
        let numeric = fd_grad(&build, &x, 1e-6);
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn backward_deterministic_across_runs() {
        let run = || {
            let mut gr = Graph::new();
            let a = gr.leaf(Tensor::from_vec(&[2, 2], vec![0.1, -0.4, 0.9, 1.4]).unwrap(), true);
            let s = gr.sigmoid(a).unwrap();
            let m = gr.matmul(s, a).unwrap();
            let l = gr.sum(m).unwrap();
            gr.backward(l).unwrap();
            gr.grad(a).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn roi_pool_quadrant_maxima() {
        // 4x4 ramp map, full box, P=2 -> per-quadrant maxima
        let mut gr = g();
        let fm = gr.constant(
            Tensor::from_vec(&[1, 4, 4], (0..16).map(|x| x as f64).collect()).unwrap(),
        );
        let r = gr.roi_pool(fm, (0.0, 0.0, 4.0, 4.0), 2).unwrap();
        assert_eq!(gr.value(r), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn roi_pool_identity_and_constant() {
        let mut gr = g();
        let fm = gr.constant(
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let r = gr.roi_pool(fm, (0.0, 0.0, 2.0, 2.0), 2).unwrap();
        assert_eq!(gr.value(r), &[1.0, 2.0, 3.0, 4.0]);

        let c = gr.constant(Tensor::filled(&[1, 4, 4], 0.7));
        let r = gr.roi_pool(c, (0.5, 0.5, 3.5, 3.5), 3).unwrap();
        assert!(gr.value(r).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn sgd_momentum_semantics() {
        // momentum 0, lr 1: w <- w - g
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut sgd = SgdState::new(&store, 1.0, 0.0).unwrap();
        store.entry_mut(id).grad = vec![0.5, -0.5];
        sgd.step(&mut store);
        assert_eq!(store.entry(id).value.data, vec![0.5, 2.5]);
        assert_eq!(store.entry(id).grad, vec![0.0, 0.0]);

        // zero grads, fresh state: params unchanged; nonzero velocity decays
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut sgd = SgdState::new(&store, 0.1, 0.9).unwrap();
        sgd.step(&mut store);
        assert_eq!(store.entry(id).value.data, vec![1.0]);
        sgd.velocity[0][0] = 1.0;
        sgd.step(&mut store);
        assert!((sgd.velocity[0][0] - 0.9).abs() < 1e-15);

        // two steps with momentum 0.98: second decrement includes 0.98*v1
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut sgd = SgdState::new(&store, 0.1, 0.98).unwrap();
        store.entry_mut(id).grad = vec![1.0];
        sgd.step(&mut store); // v1 = -0.1, w = -0.1
        store.entry_mut(id).grad = vec![1.0];
        sgd.step(&mut store); // v2 = 0.98*(-0.1) - 0.1 = -0.198, w = -0.298
        assert!((store.entry(id).value.data[0] + 0.298).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_forward_is_error() {
        let mut gr = g();
        let a = gr.constant(Tensor::from_vec(&[1], vec![1e308]).unwrap());
        let r = gr.exp(a);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
