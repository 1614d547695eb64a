//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A tape records one forward pass; `backward` sweeps it once in reverse.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order. Gradients accumulate by addition when a value feeds
//! several consumers, in fixed tape order, which keeps every training step
//! bitwise reproducible. A tape is single-threaded and is dropped after the
//! step; parameters live outside it in a [`ParamStore`].

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{col2im, im2col, upsample_zeros, upsample_zeros_grad, ConvSpec};
use super::store::{ParamId, ParamStore};
use super::{binary_op, reduce_to_shape, strides_of, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op<S: Scalar> {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Neg(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Matmul(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, eps: f64 },
    SumAll(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    Conv3d { x: Var, w: Var, spec: ConvSpec },
    UpsampleZeros { x: Var, factors: [usize; 3] },
    PairConv { feats: Var, kernels: Var, segs: Arc<Vec<u32>>, scale: Arc<Vec<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording of one forward computation, with space for its gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    param_cache: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input: gradients never flow into it or through its subtree.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Differentiable input that is not a parameter (used by gradient checks).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Parameter leaf. Repeated calls for the same id return the same node,
    /// so gradients from all uses accumulate.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf { param: Some(id) }, true);
        self.param_cache.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_op(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_op(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_op(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary_op(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::MulScalar(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a), ng)
    }

    /// Elementwise square root. Inputs must be positive where gradients flow.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c1 = S::of_f64(GELU_C1);
        let c2 = S::of_f64(GELU_C2);
        let half = S::of_f64(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (S::one() + (c1 * (x + c2 * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Matrix product. Either side may carry one leading batch dimension;
    /// an unbatched side is broadcast across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_fwd(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    /// Softmax over the last dimension, numerically stabilized by the row max.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = *x.shape().last().expect("softmax on scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let v = Tensor::from_vec(x.shape(), out);
        let ng = self.needs(a);
        self.push(v, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().expect("layer_norm on scalar");
        assert_eq!(self.value(gain).shape(), &[w]);
        assert_eq!(self.value(bias).shape(), &[w]);
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(w) {
            let (mean, inv_std) = row_stats(row, eps);
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv_std * g.data()[i] + b.data()[i]);
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    /// Group normalization of `[lead, .., C]`, statistics per (lead index,
    /// channel group). Keeping statistics inside each lead index means a
    /// time-leading layout stays causal: no frame sees another frame's moments.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert!(xv.ndim() >= 2, "group_norm input must have a lead dim and channels");
        let c = *xv.shape().last().unwrap();
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        assert_eq!(self.value(gain).shape(), &[c]);
        assert_eq!(self.value(bias).shape(), &[c]);
        let lead = xv.shape()[0];
        let spatial = xv.len() / (lead * c);
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        let cg = c / groups;
        let mut out = vec![S::zero(); xv.len()];
        let xd = xv.data();
        for l in 0..lead {
            for gr in 0..groups {
                let (mean, inv_std) = group_stats(xd, l, gr, spatial, c, cg, eps);
                for s in 0..spatial {
                    let base = (l * spatial + s) * c + gr * cg;
                    for ch in 0..cg {
                        let gi = gr * cg + ch;
                        out[base + ch] =
                            (xd[base + ch] - mean) * inv_std * g.data()[gi] + b.data()[gi];
                    }
                }
            }
        }
        let v = Tensor::from_vec(xv.shape(), out);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::GroupNorm { x, gain, bias, groups, eps }, ng)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let ng = self.needs(a);
        self.push(Tensor::scalar(acc), Op::SumAll(a), ng)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(axis < xv.ndim() && start + len <= xv.shape()[axis], "slice out of range");
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let src_stride = xv.shape()[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_stride + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::Slice { x, axis, start }, ng)
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape().to_vec();
        let mut total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                assert!(d == axis || a == b, "concat extent mismatch on dim {d}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let xv = self.value(v);
                let rows = xv.shape()[axis];
                let base = o * rows * inner;
                out.extend_from_slice(&xv.data()[base..base + rows * inner]);
            }
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::from_vec(&shape, out), Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    /// Reorder dimensions, materializing the result.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(perm.len(), xv.ndim());
        let v = permute_tensor(xv, perm);
        let ng = self.needs(x);
        self.push(v, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    /// View the same elements under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).reshape(shape);
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Row gather: `out[p, :] = x[idx[p], :]`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<u32>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "gather_rows wants [N, C]");
        let c = xv.shape()[1];
        let n = xv.shape()[0];
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            let i = i as usize;
            assert!(i < n, "gather index {i} out of {n} rows");
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[idx.len(), c], out), Op::GatherRows { x, idx }, ng)
    }

    /// Causal 3D convolution of `[T,H,W,Cin]` by weights `[kt*kh*kw*Cin, Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.shape(), &[spec.weight_rows(), spec.cout], "conv weight shape");
        let out_shape = spec.out_shape(xv.shape());
        let rows = out_shape[0] * out_shape[1] * out_shape[2];
        let col = im2col(xv.data(), xv.shape(), &spec);
        let mut out = vec![S::zero(); rows * spec.cout];
        let k = spec.weight_rows();
        S::gemm(
            rows,
            k,
            spec.cout,
            S::one(),
            &col,
            k as isize,
            1,
            wv.data(),
            spec.cout as isize,
            1,
            S::zero(),
            &mut out,
            spec.cout as isize,
            1,
        );
        let ng = self.needs(x) || self.needs(w);
        self.push(Tensor::from_vec(&out_shape, out), Op::Conv3d { x, w, spec }, ng)
    }

    /// Zero-stuffing upsample of `[T,H,W,C]` to `target` spatial-temporal extents.
    pub fn upsample_zeros(&mut self, x: Var, factors: [usize; 3], target: [usize; 3]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let c = xv.shape()[3];
        let out = upsample_zeros(xv.data(), xv.shape(), &factors, &target);
        let shape = [target[0], target[1], target[2], c];
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::UpsampleZeros { x, factors }, ng)
    }

    /// Segmented pair contraction used by continuous convolution:
    /// `out[q, o] = sum_{p in seg(q)} scale[p] * sum_i feats[p, i] * kernels[p, i*Cout + o]`.
    /// `segs` holds `Q + 1` offsets into the pair axis; `scale` folds any
    /// density normalization into a per-pair constant.
    pub fn pair_conv(
        &mut self,
        feats: Var,
        kernels: Var,
        segs: Arc<Vec<u32>>,
        scale: Arc<Vec<S>>,
        cout: usize,
    ) -> Var {
        let fv = self.value(feats);
        let kv = self.value(kernels);
        assert_eq!(fv.ndim(), 2);
        let p = fv.shape()[0];
        let cin = fv.shape()[1];
        assert_eq!(kv.shape(), &[p, cin * cout], "kernel matrix shape");
        assert_eq!(scale.len(), p);
        let q = segs.len() - 1;
        assert_eq!(*segs.last().unwrap() as usize, p, "segments must cover all pairs");
        let mut out = vec![S::zero(); q * cout];
        let fd = fv.data();
        let kd = kv.data();
        for qi in 0..q {
            let row = &mut out[qi * cout..(qi + 1) * cout];
            for pi in segs[qi] as usize..segs[qi + 1] as usize {
                let s = scale[pi];
                for i in 0..cin {
                    let f = s * fd[pi * cin + i];
                    let krow = &kd[(pi * cin + i) * cout..(pi * cin + i + 1) * cout];
                    for (o, &kv) in krow.iter().enumerate() {
                        row[o] = row[o] + f * kv;
                    }
                }
            }
        }
        let ng = self.needs(feats) || self.needs(kernels);
        self.push(
            Tensor::from_vec(&[q, cout], out),
            Op::PairConv { feats, kernels, segs, scale },
            ng,
        )
    }

    /// Reverse sweep from a one-element `root`, seeding its gradient with 1.
    pub fn backward(&mut self, root: Var) {
        self.backward_seeded(root, S::one());
    }

    /// Reverse sweep with an explicit seed (e.g. `1 / batch` for accumulation).
    pub fn backward_seeded(&mut self, root: Var, seed: S) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contribs = self.backprop_one(i, &g, &op);
            for (v, t) in contribs {
                self.accum(v, t);
            }
        }
    }

    /// Parameter gradients recorded by the last backward sweep.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    out.push((pid, g.clone()));
                }
            }
        }
        out
    }

    fn accum(&mut self, v: Var, t: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(self.nodes[v.0].value.shape(), t.shape());
        match &mut self.grads[v.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(t.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(t),
        }
    }

    fn backprop_one(&self, i: usize, g: &Tensor<S>, op: &Op<S>) -> Vec<(Var, Tensor<S>)> {
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, reduce_to_shape(g, self.value(*a).shape())));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_to_shape(g, self.value(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, reduce_to_shape(g, self.value(*a).shape())));
                }
                if self.needs(*b) {
                    let neg = g.map(|v| -v);
                    out.push((*b, reduce_to_shape(&neg, self.value(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = binary_op(g, self.value(*b), |x, y| x * y);
                    out.push((*a, reduce_to_shape(&da, self.value(*a).shape())));
                }
                if self.needs(*b) {
                    let db = binary_op(g, self.value(*a), |x, y| x * y);
                    out.push((*b, reduce_to_shape(&db, self.value(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let da = binary_op(g, self.value(*b), |x, y| x / y);
                    out.push((*a, reduce_to_shape(&da, self.value(*a).shape())));
                }
                if self.needs(*b) {
                    let y = binary_op(self.value(*a), self.value(*b), |x, y| x / (y * y));
                    let db = binary_op(g, &y, |x, y| -(x * y));
                    out.push((*b, reduce_to_shape(&db, self.value(*b).shape())));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::MulScalar(a, c) => out.push((*a, g.map(|v| v * *c))),
            Op::Neg(a) => out.push((*a, g.map(|v| -v))),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let half = S::of_f64(0.5);
                let da = binary_op(g, y, |gv, yv| gv * half / yv);
                out.push((*a, da));
            }
            Op::Relu(a) => {
                let da = binary_op(g, self.value(*a), |gv, xv| {
                    if xv > S::zero() {
                        gv
                    } else {
                        S::zero()
                    }
                });
                out.push((*a, da));
            }
            Op::Gelu(a) => {
                let c1 = S::of_f64(GELU_C1);
                let c2 = S::of_f64(GELU_C2);
                let half = S::of_f64(0.5);
                let three = S::of_f64(3.0);
                let da = binary_op(g, self.value(*a), |gv, x| {
                    let u = c1 * (x + c2 * x * x * x);
                    let t = u.tanh();
                    let d = half * (S::one() + t)
                        + half * x * (S::one() - t * t) * c1 * (S::one() + three * c2 * x * x);
                    gv * d
                });
                out.push((*a, da));
            }
            Op::Silu(a) => {
                let da = binary_op(g, self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (S::one() + x * (S::one() - s))
                });
                out.push((*a, da));
            }
            Op::Matmul(a, b) => {
                let (da, db) = matmul_bwd(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.needs(*a),
                    self.needs(*b),
                );
                if let Some(da) = da {
                    out.push((*a, da));
                }
                if let Some(db) = db {
                    out.push((*b, db));
                }
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let w = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.len()];
                for (r, (yr, gr)) in y.data().chunks(w).zip(g.data().chunks(w)).enumerate() {
                    let mut dot = S::zero();
                    for (yv, gv) in yr.iter().zip(gr.iter()) {
                        dot = dot + *yv * *gv;
                    }
                    for (j, (yv, gv)) in yr.iter().zip(gr.iter()).enumerate() {
                        dx[r * w + j] = *yv * (*gv - dot);
                    }
                }
                out.push((*a, Tensor::from_vec(y.shape(), dx)));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (dx, dg, db) = layer_norm_bwd(self.value(*x), self.value(*gain), g, *eps);
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::GroupNorm { x, gain, bias, groups, eps } => {
                let (dx, dg, db) =
                    group_norm_bwd(self.value(*x), self.value(*gain), g, *groups, *eps);
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                out.push((*a, Tensor::full(self.value(*a).shape(), gv)));
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let len = g.shape()[*axis];
                let outer: usize = xv.shape()[..*axis].iter().product();
                let inner: usize = xv.shape()[*axis + 1..].iter().product();
                let src_stride = xv.shape()[*axis] * inner;
                let mut dx = vec![S::zero(); xv.len()];
                for o in 0..outer {
                    let dst = o * src_stride + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*x, Tensor::from_vec(xv.shape(), dx)));
            }
            Op::Concat { xs, axis } => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let inner: usize = g.shape()[*axis + 1..].iter().product();
                let total = g.shape()[*axis];
                let mut offset = 0usize;
                for &v in xs {
                    let rows = self.value(v).shape()[*axis];
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(rows * outer * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g.data()[base..base + rows * inner]);
                        }
                        out.push((v, Tensor::from_vec(self.value(v).shape(), dv)));
                    }
                    offset += rows;
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, permute_tensor(g, &inv)));
            }
            Op::Reshape(x) => {
                out.push((*x, g.reshape(self.value(*x).shape())));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut dx = vec![S::zero(); xv.len()];
                for (p, &row) in idx.iter().enumerate() {
                    let dst = row as usize * c;
                    let src = p * c;
                    for ch in 0..c {
                        dx[dst + ch] = dx[dst + ch] + g.data()[src + ch];
                    }
                }
                out.push((*x, Tensor::from_vec(xv.shape(), dx)));
            }
            Op::Conv3d { x, w, spec } => {
                let xv = self.value(*x);
                let out_shape = spec.out_shape(xv.shape());
                let rows = out_shape[0] * out_shape[1] * out_shape[2];
                let k = spec.weight_rows();
                // The patch matrix is rebuilt here rather than stored, trading
                // one extra im2col for halved per-sample tape memory.
                if self.needs(*w) {
                    let col = im2col(xv.data(), xv.shape(), spec);
                    let mut dw = vec![S::zero(); k * spec.cout];
                    S::gemm(
                        k,
                        rows,
                        spec.cout,
                        S::one(),
                        &col,
                        1,
                        k as isize,
                        g.data(),
                        spec.cout as isize,
                        1,
                        S::zero(),
                        &mut dw,
                        spec.cout as isize,
                        1,
                    );
                    out.push((*w, Tensor::from_vec(&[k, spec.cout], dw)));
                }
                if self.needs(*x) {
                    let wv = self.value(*w);
                    let mut dcol = vec![S::zero(); rows * k];
                    S::gemm(
                        rows,
                        spec.cout,
                        k,
                        S::one(),
                        g.data(),
                        spec.cout as isize,
                        1,
                        wv.data(),
                        1,
                        spec.cout as isize,
                        S::zero(),
                        &mut dcol,
                        k as isize,
                        1,
                    );
                    let mut dx = vec![S::zero(); xv.len()];
                    col2im(&dcol, xv.shape(), spec, &mut dx);
                    out.push((*x, Tensor::from_vec(xv.shape(), dx)));
                }
            }
            Op::UpsampleZeros { x, factors } => {
                let xv = self.value(*x);
                let target = [g.shape()[0], g.shape()[1], g.shape()[2]];
                let dx = upsample_zeros_grad(g.data(), xv.shape(), factors, &target);
                out.push((*x, Tensor::from_vec(xv.shape(), dx)));
            }
            Op::PairConv { feats, kernels, segs, scale } => {
                let fv = self.value(*feats);
                let kv = self.value(*kernels);
                let p = fv.shape()[0];
                let cin = fv.shape()[1];
                let cout = kv.shape()[1] / cin;
                let q = segs.len() - 1;
                let gd = g.data();
                if self.needs(*feats) {
                    let mut df = vec![S::zero(); p * cin];
                    let kd = kv.data();
                    for qi in 0..q {
                        let grow = &gd[qi * cout..(qi + 1) * cout];
                        for pi in segs[qi] as usize..segs[qi + 1] as usize {
                            let s = scale[pi];
                            for ci in 0..cin {
                                let krow = &kd[(pi * cin + ci) * cout..(pi * cin + ci + 1) * cout];
                                let mut acc = S::zero();
                                for (o, &kvv) in krow.iter().enumerate() {
                                    acc = acc + kvv * grow[o];
                                }
                                df[pi * cin + ci] = df[pi * cin + ci] + s * acc;
                            }
                        }
                    }
                    out.push((*feats, Tensor::from_vec(&[p, cin], df)));
                }
                if self.needs(*kernels) {
                    let mut dk = vec![S::zero(); p * cin * cout];
                    let fd = fv.data();
                    for qi in 0..q {
                        let grow = &gd[qi * cout..(qi + 1) * cout];
                        for pi in segs[qi] as usize..segs[qi + 1] as usize {
                            let s = scale[pi];
                            for ci in 0..cin {
                                let f = s * fd[pi * cin + ci];
                                let drow =
                                    &mut dk[(pi * cin + ci) * cout..(pi * cin + ci + 1) * cout];
                                for (o, d) in drow.iter_mut().enumerate() {
                                    *d = *d + f * grow[o];
                                }
                            }
                        }
                    }
                    out.push((*kernels, Tensor::from_vec(&[p, cin * cout], dk)));
                }
            }
        }
        out
    }
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn row_stats<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let n = S::of_f64(row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, S::one() / (var + S::of_f64(eps)).sqrt())
}

fn group_stats<S: Scalar>(
    xd: &[S],
    l: usize,
    gr: usize,
    spatial: usize,
    c: usize,
    cg: usize,
    eps: f64,
) -> (S, S) {
    let n = S::of_f64((spatial * cg) as f64);
    let mut mean = S::zero();
    for s in 0..spatial {
        let base = (l * spatial + s) * c + gr * cg;
        for ch in 0..cg {
            mean = mean + xd[base + ch];
        }
    }
    mean = mean / n;
    let mut var = S::zero();
    for s in 0..spatial {
        let base = (l * spatial + s) * c + gr * cg;
        for ch in 0..cg {
            let d = xd[base + ch] - mean;
            var = var + d * d;
        }
    }
    var = var / n;
    (mean, S::one() / (var + S::of_f64(eps)).sqrt())
}

fn layer_norm_bwd<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    g: &Tensor<S>,
    eps: f64,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let w = *x.shape().last().unwrap();
    let wn = S::of_f64(w as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dg = vec![S::zero(); w];
    let mut db = vec![S::zero(); w];
    for (r, (xr, gr)) in x.data().chunks(w).zip(g.data().chunks(w)).enumerate() {
        let (mean, inv_std) = row_stats(xr, eps);
        let row_idx = r * w;
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..w {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = gr[j] * gain.data()[j];
            dg[j] = dg[j] + gr[j] * xhat;
            db[j] = db[j] + gr[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
        }
        for j in 0..w {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = gr[j] * gain.data()[j];
            dx[row_idx + j] =
                inv_std * (dxhat - sum_dxhat / wn - xhat * sum_dxhat_xhat / wn);
        }
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(&[w], dg),
        Tensor::from_vec(&[w], db),
    )
}

fn group_norm_bwd<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    g: &Tensor<S>,
    groups: usize,
    eps: f64,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = *x.shape().last().unwrap();
    let lead = x.shape()[0];
    let spatial = x.len() / (lead * c);
    let cg = c / groups;
    let n = S::of_f64((spatial * cg) as f64);
    let xd = x.data();
    let gd = g.data();
    let mut dx = vec![S::zero(); x.len()];
    let mut dgain = vec![S::zero(); c];
    let mut dbias = vec![S::zero(); c];
    for l in 0..lead {
        for gr in 0..groups {
            let (mean, inv_std) = group_stats(xd, l, gr, spatial, c, cg, eps);
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for s in 0..spatial {
                let base = (l * spatial + s) * c + gr * cg;
                for ch in 0..cg {
                    let gi = gr * cg + ch;
                    let xhat = (xd[base + ch] - mean) * inv_std;
                    let dxhat = gd[base + ch] * gain.data()[gi];
                    dgain[gi] = dgain[gi] + gd[base + ch] * xhat;
                    dbias[gi] = dbias[gi] + gd[base + ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            for s in 0..spatial {
                let base = (l * spatial + s) * c + gr * cg;
                for ch in 0..cg {
                    let gi = gr * cg + ch;
                    let xhat = (xd[base + ch] - mean) * inv_std;
                    let dxhat = gd[base + ch] * gain.data()[gi];
                    dx[base + ch] =
                        inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx),
        Tensor::from_vec(&[c], dgain),
        Tensor::from_vec(&[c], dbias),
    )
}

fn permute_tensor<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let _in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![S::zero(); x.len()];
    let mut idx = vec![0usize; in_shape.len()];
    let xd = x.data();
    for (lin, &v) in xd.iter().enumerate() {
        // Decode lin in input coordinates once per step via counting.
        let mut off = 0usize;
        for (d, &p) in perm.iter().enumerate() {
            off += idx[p] * out_strides[d];
        }
        out[off] = v;
        let _ = lin;
        for d in (0..in_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn matmul_fwd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
            let mut out = vec![S::zero(); m * n];
            gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
            Tensor::from_vec(&[m, n], out)
        }
        (3, 3) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            assert_eq!(b.shape()[0], bt, "matmul batch dims");
            let (k2, n) = (b.shape()[1], b.shape()[2]);
            assert_eq!(k, k2);
            let mut out = vec![S::zero(); bt * m * n];
            for i in 0..bt {
                gemm_nn(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::from_vec(&[bt, m, n], out)
        }
        (3, 2) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            assert_eq!(k, k2);
            // One GEMM over the flattened batch: (bt*m, k) x (k, n).
            let mut out = vec![S::zero(); bt * m * n];
            gemm_nn(bt * m, k, n, a.data(), b.data(), &mut out, false);
            Tensor::from_vec(&[bt, m, n], out)
        }
        (2, 3) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bt, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            assert_eq!(k, k2);
            let mut out = vec![S::zero(); bt * m * n];
            for i in 0..bt {
                gemm_nn(
                    m,
                    k,
                    n,
                    a.data(),
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::from_vec(&[bt, m, n], out)
        }
        (da, db) => panic!("matmul on ranks {da} and {db}"),
    }
}

fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], accum: bool) {
    let beta = if accum { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c += a^T b` where a is (k, m) row-major read transposed.
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], accum: bool) {
    let beta = if accum { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c += a b^T` where b is (n, k) row-major read transposed.
fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], accum: bool) {
    let beta = if accum { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

fn matmul_bwd<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &Tensor<S>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let mut da = None;
    let mut db = None;
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if need_a {
                let mut d = vec![S::zero(); m * k];
                gemm_nt(m, n, k, g.data(), b.data(), &mut d, false);
                da = Some(Tensor::from_vec(&[m, k], d));
            }
            if need_b {
                let mut d = vec![S::zero(); k * n];
                gemm_tn(k, m, n, a.data(), g.data(), &mut d, false);
                db = Some(Tensor::from_vec(&[k, n], d));
            }
        }
        (3, 3) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if need_a {
                let mut d = vec![S::zero(); bt * m * k];
                for i in 0..bt {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut d[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                da = Some(Tensor::from_vec(&[bt, m, k], d));
            }
            if need_b {
                let mut d = vec![S::zero(); bt * k * n];
                for i in 0..bt {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &mut d[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                db = Some(Tensor::from_vec(&[bt, k, n], d));
            }
        }
        (3, 2) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            if need_a {
                let mut d = vec![S::zero(); bt * m * k];
                gemm_nt(bt * m, n, k, g.data(), b.data(), &mut d, false);
                da = Some(Tensor::from_vec(&[bt, m, k], d));
            }
            if need_b {
                let mut d = vec![S::zero(); k * n];
                gemm_tn(k, bt * m, n, a.data(), g.data(), &mut d, false);
                db = Some(Tensor::from_vec(&[k, n], d));
            }
        }
        (2, 3) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bt, _, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if need_a {
                let mut d = vec![S::zero(); m * k];
                for i in 0..bt {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut d,
                        true,
                    );
                }
                da = Some(Tensor::from_vec(&[m, k], d));
            }
            if need_b {
                let mut d = vec![S::zero(); bt * k * n];
                for i in 0..bt {
                    gemm_tn(
                        k,
                        m,
                        n,
                        a.data(),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &mut d[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                db = Some(Tensor::from_vec(&[bt, k, n], d));
            }
        }
        _ => unreachable!(),
    }
    (da, db)
}
