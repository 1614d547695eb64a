//! Dense row-major tensors over `f32`/`f64` and a reverse-mode autodiff tape.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`.
//! All kernels are single-threaded with a fixed reduction order, so results
//! are bitwise reproducible for a given input.

mod conv;
pub mod gradcheck;
pub mod nn;
mod store;
mod tape;

pub use conv::ConvSpec;
pub use store::{ParamId, ParamStore};
pub use tape::{Tape, Var};

use std::fmt;
use std::sync::Arc;

/// Element type tag, serialized in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// `c = alpha * a@b + beta * c` on row-major buffers with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// Dense row-major tensor. Cloning is cheap: the buffer is shared until mutated.
#[derive(Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let g: f64 = StandardNormal.sample(rng);
            data.push(S::of_f64(g * std));
        }
        Tensor::from_vec(shape, data)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: rand::Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::of_f64(rng.gen_range(lo..hi)));
        }
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.into_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under trailing-dimension alignment, or `None` if
/// the shapes are incompatible. Aligned dimensions must be equal or 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        // A 1-dim stretches to the other size, including to 0 (empty tensors
        // arise from e.g. query chunks whose receptive fields are all empty).
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast dimensions).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let pad = out_shape.len() - shape.len();
    let mut bs = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        bs[pad + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    bs
}

/// Elementwise binary op with trailing-dimension broadcasting.
pub fn binary_op<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    if a.shape() == b.shape() {
        let out: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), out);
    }
    if b.len() == 1 {
        let y = b.data()[0];
        return a.map(|x| f(x, y));
    }
    if a.len() == 1 {
        let x = a.data()[0];
        return b.map(|y| f(x, y));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("incompatible broadcast {:?} vs {:?}", a.shape(), b.shape()));
    // Fast path: b is a contiguous suffix of a (or vice versa), e.g. [n,w]*[w].
    if out_shape == a.shape() && a.len().is_multiple_of(b.len()) && is_suffix(b.shape(), a.shape()) {
        let bn = b.len();
        let out: Vec<S> =
            a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % bn])).collect();
        return Tensor::from_vec(&out_shape, out);
    }
    if out_shape == b.shape() && b.len().is_multiple_of(a.len()) && is_suffix(a.shape(), b.shape()) {
        let an = a.len();
        let out: Vec<S> =
            b.data().iter().enumerate().map(|(i, &y)| f(a.data()[i % an], y)).collect();
        return Tensor::from_vec(&out_shape, out);
    }
    // General strided path.
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (ad, bd) = (a.data(), b.data());
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(ad[oa], bd[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sum `grad` (of shape `from`) down to `to`, undoing a broadcast.
pub fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, to: &[usize]) -> Tensor<S> {
    let from = grad.shape();
    if from == to {
        return grad.clone();
    }
    let mut out = vec![S::zero(); to.iter().product()];
    let st = broadcast_strides(to, from);
    let n = grad.len();
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    let gd = grad.data();
    for item in gd.iter().take(n) {
        out[ot] = out[ot] + *item;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    Tensor::from_vec(to, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 3]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shapes(&[1], &[7, 5]), Some(vec![7, 5]));
        // A 1-dim broadcasts down to an empty dim, never up from it.
        assert_eq!(broadcast_shapes(&[0, 8], &[8]), Some(vec![0, 8]));
        assert_eq!(broadcast_shapes(&[0, 8], &[2, 8]), None);
    }

    #[test]
    fn binary_op_on_empty_rows() {
        let a = Tensor::<f64>::zeros(&[0, 3]);
        let b = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let out = binary_op(&a, &b, |x, y| x + y);
        assert_eq!(out.shape(), &[0, 3]);
        assert_eq!(out.len(), 0);
    }

    #[test]
    fn binary_broadcast_matches_manual() {
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_vec(&[3], vec![10., 20., 30.]);
        let c = binary_op(&a, &b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);

        let col = Tensor::<f64>::from_vec(&[2, 1], vec![100., 200.]);
        let d = binary_op(&a, &col, |x, y| x + y);
        assert_eq!(d.data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6., 15.]);
        let r3 = reduce_to_shape(&g, &[1]);
        assert_eq!(r3.data(), &[21.]);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        // 1e-12 relative agreement in f64 between the GEMM backend and an
        // independently written reference, across shapes and seeds.
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (m, k, n) =
                (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..12));
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0f64; m * n];
            f64::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[i * k + l] * b[l * n + j];
                    }
                    let denom = acc.abs().max(1.0);
                    assert!(
                        (c[i * n + j] - acc).abs() / denom < 1e-12,
                        "gemm mismatch at ({i},{j}): {} vs {acc}",
                        c[i * n + j]
                    );
                }
            }
        }
    }
}
