//! Small trainable building blocks shared across the model: linear layers and
//! two-layer MLPs. Layers own parameter ids, not tensors; the tensors live in
//! the [`ParamStore`] so one registry drives the optimizer and checkpoints.

use rand::Rng;

use super::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Activation applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Silu,
    Relu,
}

/// Affine map `x @ w + b` with `w: [in, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform Kaiming-style init: `U(-a, a)` with `a = sqrt(1 / fan_in)`.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let a = (1.0 / fan_in as f64).sqrt();
        let w = store.register(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], -a, a, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    /// All-zero init; used for modulation heads that must start as identity.
    pub fn new_zeros<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = t.param(store, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(store, b);
                t.add(y, b)
            }
            None => y,
        }
    }
}

/// `in -> hidden -> out` with one activation in between.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Act,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: (usize, usize, usize),
        act: Act,
        rng: &mut R,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng);
        Mlp { fc1, fc2, act }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.fc1.forward(t, store, x);
        let h = apply_act(t, self.act, h);
        self.fc2.forward(t, store, h)
    }
}

pub fn apply_act<S: Scalar>(t: &mut Tape<S>, act: Act, x: Var) -> Var {
    match act {
        Act::Gelu => t.gelu(x),
        Act::Silu => t.silu(x),
        Act::Relu => t.relu(x),
    }
}

/// Per-element affine norm parameters (gain starts at 1, bias at 0).
pub struct NormAffine {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormAffine {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), Tensor::full(&[dim], S::one()));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[dim]));
        NormAffine { gain, bias }
    }
}
