//! Define-by-run computation graph over NCHW `f64` tensors with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for its lifetime: parameter nodes read their values
//! straight from the store, batch-norm running statistics are written back to it during the
//! forward pass, and [`Graph::backward`] accumulates parameter gradients into it.

use crate::kernels::{self, Window};
use crate::store::{EntryKind, ParamId, ParamStore};
use crate::TensorError;

pub type Shape4 = [usize; 4];

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics + running-stat updates (true) or running statistics (false).
    pub training: bool,
    /// Record what the backward pass needs.
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { training: true, grad: true };
    pub const EVAL: Mode = Mode { training: false, grad: false };
    /// Running statistics but still differentiable; used by gradient checks.
    pub const EVAL_GRAD: Mode = Mode { training: false, grad: true };
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, win: Window },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    MulConst(Var, Vec<f64>),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Resize(Var),
    MaxPool { x: Var, arg: Vec<u32> },
    GlobalAvgPool(Var),
    SumChannels(Var),
    SumAll(Var),
    Bce { pred: Var, target: Vec<f64> },
}

struct Node {
    shape: Shape4,
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub fn numel(s: Shape4) -> usize {
    s.iter().product()
}

fn broadcast_shape(a: Shape4, b: Shape4) -> Option<Shape4> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn bstrides(s: Shape4, out: Shape4) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for d in 0..4 {
        st[d] = if s[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
fn for_each_bcast(out: Shape4, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let base_a = n * sa[0] + c * sa[1] + h * sa[2];
                let base_b = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, base_a + w * sa[3], base_b + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn param_shape(shape: &[usize]) -> Shape4 {
    match shape.len() {
        4 => [shape[0], shape[1], shape[2], shape[3]],
        1 => [1, shape[0], 1, 1],
        0 => [1, 1, 1, 1],
        _ => {
            let n: usize = shape.iter().product();
            [1, n, 1, 1]
        }
    }
}

pub struct Graph<'s> {
    store: &'s mut ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Graph { store, nodes: Vec::new(), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.data(*id),
        }
    }

    pub fn to_vec(&self, v: Var) -> Vec<f64> {
        self.value(v).to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Shape4, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(data.len(), numel(shape));
        let needs_grad = self.mode.grad && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value: Value::Owned(data), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn input(&mut self, shape: Shape4, data: Vec<f64>) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(TensorError::Shape(format!("input of shape {shape:?} given {} values", data.len())));
        }
        self.nodes.push(Node { shape, value: Value::Owned(data), op: Op::Leaf, needs_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn zeros(&mut self, shape: Shape4) -> Var {
        self.nodes.push(Node { shape, value: Value::Owned(vec![0.0; numel(shape)]), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Shape4, value: f64) -> Var {
        self.nodes.push(Node { shape, value: Value::Owned(vec![value; numel(shape)]), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Node reading a store entry. 1-D entries appear with shape `[1, len, 1, 1]`.
    pub fn param(&mut self, id: ParamId) -> Var {
        let entry = self.store.entry(id);
        let shape = param_shape(&entry.shape);
        let needs_grad = self.mode.grad && entry.kind == EntryKind::Parameter;
        self.nodes.push(Node { shape, value: Value::Param(id), op: Op::Param(id), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let [co, ci, kh, kw] = self.shape(w);
        if ci != c || (kh, kw) != win.kernel {
            return Err(TensorError::Shape(format!(
                "conv2d: input {:?} vs weight {:?} (window {:?})",
                self.shape(x),
                self.shape(w),
                win.kernel
            )));
        }
        if let Some(b) = b {
            if numel(self.shape(b)) != co {
                return Err(TensorError::Shape(format!("conv2d: bias {:?} for {co} outputs", self.shape(b))));
            }
        }
        let (oh, ow) = win
            .output_size(h, wd)
            .ok_or_else(|| TensorError::Shape(format!("conv2d: window {win:?} larger than input {h}x{wd}")))?;
        let k = c * kh * kw;
        let p = oh * ow;
        let mut out = vec![0.0; n * co * p];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let mut col = if win.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            for s in 0..n {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let os = &mut out[s * co * p..(s + 1) * co * p];
                if win.is_pointwise() {
                    kernels::matmul(co, k, p, wv, false, xs, false, os, false);
                } else {
                    kernels::im2col(xs, c, h, wd, &win, oh, ow, &mut col);
                    kernels::matmul(co, k, p, wv, false, &col, false, os, false);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for s in 0..n {
                    for o in 0..co {
                        let plane = &mut out[(s * co + o) * p..(s * co + o + 1) * p];
                        plane.iter_mut().for_each(|v| *v += bv[o]);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push([n, co, oh, ow], out, Op::Conv { x, w, b, win }, &inputs))
    }

    /// Per-channel batch normalization. `gamma`/`beta` are `[1,C,1,1]` parameter nodes; the
    /// running statistics live in `running` = (mean, var) store buffers.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (ParamId, ParamId)) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(TensorError::Shape(format!("batch_norm: {c} channels vs affine {:?}", self.shape(gamma))));
        }
        let hw = h * w;
        let count = n * hw;
        let batch_stats = self.mode.training;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xv = self.value(x);
            if batch_stats {
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..n {
                        s += xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for smp in 0..n {
                        q += xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
            } else {
                mean.copy_from_slice(self.store.data(running.0));
                var.copy_from_slice(self.store.data(running.1));
            }
        }
        if batch_stats {
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let rm = self.store.data_mut(running.0);
            for ch in 0..c {
                rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean[ch];
            }
            let rv = self.store.data_mut(running.1);
            for ch in 0..c {
                rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let keep = self.mode.grad && (self.needs(x) || self.needs(gamma) || self.needs(beta));
        let mut out = vec![0.0; n * c * hw];
        let mut xhat = if keep { vec![0.0; n * c * hw] } else { Vec::new() };
        {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for smp in 0..n {
                for ch in 0..c {
                    let r = (smp * c + ch) * hw..(smp * c + ch + 1) * hw;
                    for i in r {
                        let xh = (xv[i] - mean[ch]) * inv_std[ch];
                        if keep {
                            xhat[i] = xh;
                        }
                        out[i] = g[ch] * xh + b[ch];
                    }
                }
            }
        }
        Ok(self.push([n, c, h, w], out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push(self.shape(x), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), out, Op::Sigmoid(x), &[x])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Shape4, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| TensorError::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = vec![0.0; numel(out)];
            for_each_bcast(out, bstrides(sa, out), bstrides(sb, out), |o, ia, ib| d[o] = f(va[ia], vb[ib]));
            d
        };
        Ok((out, data))
    }

    /// Elementwise sum with broadcasting over singleton dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, d, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with broadcasting over singleton dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * k).collect();
        self.push(self.shape(x), out, Op::Scale(x, k), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| 1.0 / v).collect();
        self.push(self.shape(x), out, Op::Recip(x), &[x])
    }

    /// Multiplies by a constant of the same shape; the constant is not differentiated.
    pub fn mul_const(&mut self, x: Var, k: Vec<f64>) -> Result<Var> {
        if k.len() != numel(self.shape(x)) {
            return Err(TensorError::Shape(format!("mul_const: {} factors for {:?}", k.len(), self.shape(x))));
        }
        let out: Vec<f64> = self.value(x).iter().zip(&k).map(|(a, b)| a * b).collect();
        Ok(self.push(self.shape(x), out, Op::MulConst(x, k), &[x]))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape(format!("concat: {:?} vs {:?}", self.shape(first), self.shape(v))));
            }
            c_total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for s in 0..n {
            for &v in xs {
                let vc = self.shape(v)[1];
                out.extend_from_slice(&self.value(v)[s * vc * hw..(s + 1) * vc * hw]);
            }
        }
        Ok(self.push([n, c_total, h, w], out, Op::Concat(xs.to_vec()), xs))
    }

    /// Channels `start..start+len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(TensorError::Shape(format!("narrow {start}+{len} of {c} channels")));
        }
        let hw = h * w;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&xv[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        Ok(self.push([n, len, h, w], out, Op::Narrow { x, start }, &[x]))
    }

    /// Bilinear resize (half-pixel centers, `align_corners = false`). Identity when sizes match.
    pub fn resize(&mut self, x: Var, size: (usize, usize)) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if size.0 == 0 || size.1 == 0 {
            return Err(TensorError::Shape(format!("resize to empty size {size:?}")));
        }
        if (h, w) == size {
            return Ok(x);
        }
        let (oh, ow) = size;
        let xv = self.value(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            kernels::resize_plane(&xv[p * h * w..(p + 1) * h * w], h, w, oh, ow, &mut out[p * oh * ow..(p + 1) * oh * ow]);
        }
        Ok(self.push([n, c, oh, ow], out, Op::Resize(x), &[x]))
    }

    pub fn max_pool(&mut self, x: Var, win: Window) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = win
            .output_size(h, w)
            .ok_or_else(|| TensorError::Shape(format!("max_pool: window {win:?} larger than {h}x{w}")))?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        for p in 0..n * c {
            let r = p * oh * ow..(p + 1) * oh * ow;
            kernels::max_pool_plane(&xv[p * h * w..(p + 1) * h * w], h, w, &win, oh, ow, &mut out[r.clone()], &mut arg[r]);
        }
        Ok(self.push([n, c, oh, ow], out, Op::MaxPool { x, arg }, &[x]))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let out: Vec<f64> = self.value(x).chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push([n, c, 1, 1], out, Op::GlobalAvgPool(x), &[x])
    }

    /// Sum over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xv = self.value(x);
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        self.push([n, 1, h, w], out, Op::SumChannels(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push([1, 1, 1, 1], vec![s], Op::SumAll(x), &[x])
    }

    /// Pixel-mean binary cross-entropy of probabilities `pred` against `target`,
    /// with `pred` clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let shape = self.shape(pred);
        if target.len() != numel(shape) {
            return Err(TensorError::Shape(format!("bce: prediction {shape:?} vs {} targets", target.len())));
        }
        let loss = bce_value(self.value(pred), &target);
        Ok(self.push([1, 1, 1, 1], vec![loss], Op::Bce { pred, target }, &[pred]))
    }

    /// Reverse pass from a single-element node; parameter gradients are added to the store.
    pub fn backward(self, root: Var) -> Result<()> {
        if numel(self.shape(root)) != 1 {
            return Err(TensorError::Shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        if !self.needs(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut param_grads: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, dout, &mut grads, &mut param_grads);
        }
        let store = self.store;
        for (id, g) in param_grads {
            store.accumulate_grad(id, &g);
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = numel(self.nodes[v.0].shape);
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn reduce_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, out: Shape4, contrib: &[f64]) {
        let s = self.shape(v);
        let slot = self.grad_slot(grads, v);
        if s == out {
            slot.iter_mut().zip(contrib).for_each(|(g, c)| *g += c);
        } else {
            let st = bstrides(s, out);
            for_each_bcast(out, st, st, |o, i, _| slot[i] += contrib[o]);
        }
    }

    fn backward_node(&self, node: &Node, dout: Vec<f64>, grads: &mut [Option<Vec<f64>>], param_grads: &mut Vec<(ParamId, Vec<f64>)>) {
        let out_shape = node.shape;
        let out_val = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => &[],
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => param_grads.push((*id, dout)),
            Op::Conv { x, w, b, win } => {
                let [n, c, h, wd] = self.shape(*x);
                let [co, _, kh, kw] = self.shape(*w);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let (k, p) = (c * kh * kw, oh * ow);
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = self.grad_slot(grads, *b);
                        for s in 0..n {
                            for o in 0..co {
                                gb[o] += dout[(s * co + o) * p..(s * co + o + 1) * p].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let pointwise = win.is_pointwise();
                let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
                if self.needs(*w) {
                    let mut gw = vec![0.0; co * k];
                    for s in 0..n {
                        let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                        let ds = &dout[s * co * p..(s + 1) * co * p];
                        if pointwise {
                            kernels::matmul(co, p, k, ds, false, xs, true, &mut gw, true);
                        } else {
                            kernels::im2col(xs, c, h, wd, win, oh, ow, &mut col);
                            kernels::matmul(co, p, k, ds, false, &col, true, &mut gw, true);
                        }
                    }
                    self.grad_slot(grads, *w).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
                if self.needs(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for s in 0..n {
                        let ds = &dout[s * co * p..(s + 1) * co * p];
                        let gxs = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                        if pointwise {
                            kernels::matmul(k, co, p, wv, true, ds, false, gxs, true);
                        } else {
                            kernels::matmul(k, co, p, wv, true, ds, false, &mut col, false);
                            kernels::col2im(&col, c, h, wd, win, oh, ow, gxs);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let count = (n * hw) as f64;
                let g = self.value(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for i in r {
                            sum_dy[ch] += dout[i];
                            sum_dy_xhat[ch] += dout[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    self.grad_slot(grads, *gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
                }
                if self.needs(*beta) {
                    self.grad_slot(grads, *beta).iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
                }
                if self.needs(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                            let k = g[ch] * inv_std[ch];
                            if *batch_stats {
                                let m_dy = sum_dy[ch] / count;
                                let m_dyx = sum_dy_xhat[ch] / count;
                                for i in r {
                                    gx[i] += k * (dout[i] - m_dy - xhat[i] * m_dyx);
                                }
                            } else {
                                for i in r {
                                    gx[i] += k * dout[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let gx = self.grad_slot(grads, *x);
                for ((g, d), y) in gx.iter_mut().zip(&dout).zip(out_val) {
                    if *y > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = self.grad_slot(grads, *x);
                for ((g, d), y) in gx.iter_mut().zip(&dout).zip(out_val) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.reduce_into(grads, v, out_shape, &dout);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sta, stb) = (bstrides(sa, out_shape), bstrides(sb, out_shape));
                if self.needs(*a) {
                    let mut c = vec![0.0; dout.len()];
                    for_each_bcast(out_shape, sta, stb, |o, _, ib| c[o] = dout[o] * vb[ib]);
                    self.reduce_into(grads, *a, out_shape, &c);
                }
                if self.needs(*b) {
                    let mut c = vec![0.0; dout.len()];
                    for_each_bcast(out_shape, sta, stb, |o, ia, _| c[o] = dout[o] * va[ia]);
                    self.reduce_into(grads, *b, out_shape, &c);
                }
            }
            Op::Scale(x, k) => {
                self.grad_slot(grads, *x).iter_mut().zip(&dout).for_each(|(g, d)| *g += k * d);
            }
            Op::Recip(x) => {
                let gx = self.grad_slot(grads, *x);
                for ((g, d), y) in gx.iter_mut().zip(&dout).zip(out_val) {
                    *g -= d * y * y;
                }
            }
            Op::MulConst(x, k) => {
                let gx = self.grad_slot(grads, *x);
                for ((g, d), m) in gx.iter_mut().zip(&dout).zip(k) {
                    *g += d * m;
                }
            }
            Op::Concat(xs) => {
                let [n, ct, h, w] = out_shape;
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let vc = self.shape(v)[1];
                    if self.needs(v) {
                        let gv = self.grad_slot(grads, v);
                        for s in 0..n {
                            let src = &dout[(s * ct + offset) * hw..(s * ct + offset + vc) * hw];
                            for (g, d) in gv[s * vc * hw..(s + 1) * vc * hw].iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    offset += vc;
                }
            }
            Op::Narrow { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let len = out_shape[1];
                let gx = self.grad_slot(grads, *x);
                for s in 0..n {
                    let dst = &mut gx[(s * c + start) * hw..(s * c + start + len) * hw];
                    for (g, d) in dst.iter_mut().zip(&dout[s * len * hw..(s + 1) * len * hw]) {
                        *g += d;
                    }
                }
            }
            Op::Resize(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let gx = self.grad_slot(grads, *x);
                for p in 0..n * c {
                    kernels::resize_plane_backward(&dout[p * oh * ow..(p + 1) * oh * ow], h, w, oh, ow, &mut gx[p * h * w..(p + 1) * h * w]);
                }
            }
            Op::MaxPool { x, arg } => {
                let [n, c, h, w] = self.shape(*x);
                let per = out_shape[2] * out_shape[3];
                let gx = self.grad_slot(grads, *x);
                for p in 0..n * c {
                    for j in 0..per {
                        gx[p * h * w + arg[p * per + j] as usize] += dout[p * per + j];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.shape(*x);
                let hw = h * w;
                let gx = self.grad_slot(grads, *x);
                for (p, d) in dout.iter().enumerate() {
                    gx[p * hw..(p + 1) * hw].iter_mut().for_each(|g| *g += d / hw as f64);
                }
            }
            Op::SumChannels(x) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let gx = self.grad_slot(grads, *x);
                for s in 0..n {
                    for ch in 0..c {
                        let dst = &mut gx[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        dst.iter_mut().zip(&dout[s * hw..(s + 1) * hw]).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dout[0];
                self.grad_slot(grads, *x).iter_mut().for_each(|g| *g += d);
            }
            Op::Bce { pred, target } => {
                let pv = self.value(*pred);
                let nn = pv.len() as f64;
                let d = dout[0];
                let gx = self.grad_slot(grads, *pred);
                for ((g, &p), &t) in gx.iter_mut().zip(pv).zip(target) {
                    if p > BCE_EPS && p < 1.0 - BCE_EPS {
                        *g += d * (p - t) / (p * (1.0 - p)) / nn;
                    }
                }
            }
        }
    }
}

pub const BCE_EPS: f64 = 1e-7;

/// Pixel-mean BCE with the probability clamp used by [`Graph::bce`].
pub fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
