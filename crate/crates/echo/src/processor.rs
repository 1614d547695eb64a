//! Velocity-field transformer over flattened latent space-time tokens.
//!
//! A stack of pre-norm attention blocks predicts the flow-matching velocity
//! for every latent token. Conditioning enters three ways: observed tokens
//! are spliced into the sequence in place of noised ones (with a mask bit
//! appended so the model can tell the roles apart), the denoising index `r`
//! and optional PDE coefficients modulate every block through zero-initialized
//! scale/shift/gate projections, and factorized sinusoidal embeddings mark
//! each token's (space, time) slot. Gates start at zero, so an untrained
//! stack is the final projection of the embedded input.

use rand::Rng;

use crate::tensor::nn::{Linear, Mlp, NormAffine};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Width of the sinusoidal feature vector for the denoising index.
const R_FEATURES: usize = 64;
/// The denoising index lives in [0,1]; stretching it before the sinusoids
/// spreads it across the frequency bands.
const R_SCALE: f64 = 1000.0;

/// Static architecture of the token transformer.
#[derive(Debug, Clone, Copy)]
pub struct ProcessorConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden width of each block MLP, as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Channel width of latent tokens entering and leaving the model.
    pub token_dim: usize,
    /// Number of PDE coefficients conditioned on (0 disables the pathway).
    pub n_gamma: usize,
    /// Append an observed/unobserved bit to every token.
    pub mask_channel: bool,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        ProcessorConfig {
            depth: 8,
            width: 256,
            heads: 8,
            mlp_ratio: 2,
            token_dim: 32,
            n_gamma: 0,
            mask_channel: true,
        }
    }
}

impl ProcessorConfig {
    pub fn token_in_dim(&self) -> usize {
        self.token_dim + usize::from(self.mask_channel)
    }
}

/// Per-call conditioning: denoising index, standardized PDE coefficients,
/// and the latent-temporal observation mask.
pub struct Conditioning<'a> {
    pub r: f64,
    pub gamma: Option<&'a [f64]>,
    pub obs_mask: &'a [bool],
}

/// Classic transformer embedding: interleaved sine/cosine pairs with
/// geometrically spaced frequencies.
pub fn sinusoidal_features(pos: f64, dim: usize) -> Vec<f64> {
    sinusoid_family(pos, dim, 0.0)
}

/// `band_shift` slides the whole frequency ladder; distinct shifts give
/// distinct families so summed embeddings of two indices stay injective.
/// Odd dims drop the last cosine channel.
fn sinusoid_family(pos: f64, dim: usize, band_shift: f64) -> Vec<f64> {
    let half = dim.div_ceil(2);
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = (10_000f64).powf(-(i as f64 + band_shift) / half as f64);
        out[2 * i] = (pos * omega).sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = (pos * omega).cos();
        }
    }
    out
}

/// Factorized space-time positions for `m * t` tokens in time-major order
/// (token `n = j * m + s`): embedding = sinusoid(space s) + sinusoid(time j).
/// The temporal family sits half a band lower in frequency so swapping the
/// space and time indices cannot produce the same sum.
pub fn position_table<S: Scalar>(m_tokens: usize, t_tokens: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(m_tokens * t_tokens * dim);
    for j in 0..t_tokens {
        let pt = sinusoid_family(j as f64, dim, 0.5);
        for s in 0..m_tokens {
            let ps = sinusoid_family(s as f64, dim, 0.0);
            data.extend(ps.iter().zip(&pt).map(|(a, b)| S::of_f64(a + b)));
        }
    }
    Tensor::from_vec(&[m_tokens * t_tokens, dim], data)
}

/// Splice observed and noised tokens by latent time index, add positional
/// embeddings, and append the mask bit when enabled. Both inputs are
/// `[T' * M', token_dim]` in time-major order; the result feeds [`Processor`].
pub fn assemble_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    z_obs: Var,
    z_noised: Var,
    obs_mask: &[bool],
    m_tokens: usize,
    mask_channel: bool,
) -> Var {
    let shape = tape.value(z_obs).shape().to_vec();
    assert_eq!(shape, tape.value(z_noised).shape(), "token tensors must agree");
    assert_eq!(shape.len(), 2);
    let d = shape[1];
    let t_tokens = shape[0] / m_tokens;
    assert_eq!(t_tokens * m_tokens, shape[0], "token count must be M' * T'");
    assert_eq!(obs_mask.len(), t_tokens, "mask length must equal T'");

    let mut rows: Vec<Var> = Vec::with_capacity(t_tokens);
    for (j, &obs) in obs_mask.iter().enumerate() {
        let src = if obs { z_obs } else { z_noised };
        rows.push(tape.slice(src, 0, j * m_tokens, m_tokens));
    }
    let content = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0) };
    let pos = tape.constant(position_table(m_tokens, t_tokens, d));
    let embedded = tape.add(content, pos);
    if !mask_channel {
        return embedded;
    }
    let mut bits = Vec::with_capacity(t_tokens * m_tokens);
    for &obs in obs_mask {
        bits.extend(std::iter::repeat_n(S::of_f64(f64::from(obs)), m_tokens));
    }
    let bits = tape.constant(Tensor::from_vec(&[t_tokens * m_tokens, 1], bits));
    tape.concat(&[embedded, bits], 1)
}

/// One pre-norm attention + MLP block with zero-initialized modulation.
struct DitBlock {
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    modulation: Linear,
    heads: usize,
}

impl DitBlock {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ProcessorConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        DitBlock {
            qkv: Linear::new(store, &format!("{name}.qkv"), w, 3 * w, rng),
            proj: Linear::new(store, &format!("{name}.proj"), w, w, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), w, cfg.mlp_ratio * w, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_ratio * w, w, rng),
            modulation: Linear::new_zeros(store, &format!("{name}.mod"), w, 6 * w),
            heads: cfg.heads,
        }
    }

    fn attention<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let shape = t.value(x).shape().to_vec();
        let (n, w) = (shape[0], shape[1]);
        let dh = w / self.heads;
        let qkv = self.qkv.forward(t, store, x);
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = t.slice(qkv, 1, i * w, w);
            let part = t.reshape(part, &[n, self.heads, dh]);
            split.push(t.permute(part, &[1, 0, 2]));
        }
        let (q, k, v) = (split[0], split[1], split[2]);
        let kt = t.permute(k, &[0, 2, 1]);
        let scores = t.matmul(q, kt);
        let scores = t.mul_scalar(scores, S::of_f64(1.0 / (dh as f64).sqrt()));
        let attn = t.softmax(scores);
        let out = t.matmul(attn, v);
        let out = t.permute(out, &[1, 0, 2]);
        let out = t.reshape(out, &[n, w]);
        self.proj.forward(t, store, out)
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var, cond: Var) -> Var {
        let w = t.value(x).shape()[1];
        let modulated = self.modulation.forward(t, store, cond);
        let part = |t: &mut Tape<S>, i: usize| t.slice(modulated, 1, i * w, w);

        let sc1 = part(t, 0);
        let sh1 = part(t, 1);
        let g1 = part(t, 2);
        let h = ln_plain(t, x);
        let sc1p = t.add_scalar(sc1, S::one());
        let h = t.mul(h, sc1p);
        let h = t.add(h, sh1);
        let h = self.attention(t, store, h);
        let h = t.mul(h, g1);
        let x = t.add(x, h);

        let sc2 = part(t, 3);
        let sh2 = part(t, 4);
        let g2 = part(t, 5);
        let h = ln_plain(t, x);
        let sc2p = t.add_scalar(sc2, S::one());
        let h = t.mul(h, sc2p);
        let h = t.add(h, sh2);
        let h = self.fc1.forward(t, store, h);
        let h = t.gelu(h);
        let h = self.fc2.forward(t, store, h);
        let h = t.mul(h, g2);
        t.add(x, h)
    }
}

/// Layer norm without learned affine; modulation supplies scale and shift.
fn ln_plain<S: Scalar>(t: &mut Tape<S>, x: Var) -> Var {
    let w = *t.value(x).shape().last().unwrap();
    let gain = t.constant(Tensor::full(&[w], S::one()));
    let bias = t.constant(Tensor::zeros(&[w]));
    t.layer_norm(x, gain, bias, LN_EPS)
}

/// Token transformer predicting per-token flow-matching velocities.
pub struct Processor {
    pub cfg: ProcessorConfig,
    proj_in: Linear,
    r_embed: Mlp,
    gamma_embed: Option<Mlp>,
    blocks: Vec<DitBlock>,
    final_norm: NormAffine,
    proj_out: Linear,
}

impl Processor {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: ProcessorConfig,
        rng: &mut R,
    ) -> Self {
        assert_eq!(cfg.width % cfg.heads, 0, "width must divide into heads");
        let proj_in = Linear::new(store, &format!("{name}.proj_in"), cfg.token_in_dim(), cfg.width, rng);
        let r_embed = Mlp::new(
            store,
            &format!("{name}.r_embed"),
            (R_FEATURES, cfg.width, cfg.width),
            crate::tensor::nn::Act::Silu,
            rng,
        );
        let gamma_embed = (cfg.n_gamma > 0).then(|| {
            Mlp::new(
                store,
                &format!("{name}.gamma_embed"),
                (cfg.n_gamma, cfg.width, cfg.width),
                crate::tensor::nn::Act::Silu,
                rng,
            )
        });
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(store, &format!("{name}.block{i}"), &cfg, rng))
            .collect();
        let final_norm = NormAffine::new(store, &format!("{name}.final_norm"), cfg.width);
        let proj_out = Linear::new(store, &format!("{name}.proj_out"), cfg.width, cfg.token_dim, rng);
        Processor { cfg, proj_in, r_embed, gamma_embed, blocks, final_norm, proj_out }
    }

    /// Summed conditioning embedding `[1, width]` from `r` and standardized
    /// PDE coefficients.
    fn conditioning<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        store: &ParamStore<S>,
        r: f64,
        gamma: Option<&[f64]>,
    ) -> Var {
        let feats: Vec<S> =
            sinusoidal_features(R_SCALE * r, R_FEATURES).into_iter().map(S::of_f64).collect();
        let feats = t.constant(Tensor::from_vec(&[1, R_FEATURES], feats));
        let mut c = self.r_embed.forward(t, store, feats);
        match (&self.gamma_embed, gamma) {
            (Some(mlp), Some(g)) => {
                assert_eq!(g.len(), self.cfg.n_gamma, "coefficient count mismatch");
                let gv: Vec<S> = g.iter().map(|&v| S::of_f64(v)).collect();
                let gv = t.constant(Tensor::from_vec(&[1, self.cfg.n_gamma], gv));
                let ge = mlp.forward(t, store, gv);
                c = t.add(c, ge);
            }
            (Some(_), None) => panic!("model conditioned on coefficients but none given"),
            (None, Some(_)) => panic!("model has no coefficient pathway"),
            (None, None) => {}
        }
        c
    }

    /// Assembled tokens `[N, token_in_dim]` to velocities `[N, token_dim]`.
    pub fn forward<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: Var,
        r: f64,
        gamma: Option<&[f64]>,
    ) -> Var {
        assert_eq!(
            t.value(tokens).shape()[1],
            self.cfg.token_in_dim(),
            "token width must match the configuration"
        );
        let cond = self.conditioning(t, store, r, gamma);
        let cond = t.silu(cond);
        let mut x = self.proj_in.forward(t, store, tokens);
        for block in &self.blocks {
            x = block.forward(t, store, x, cond);
        }
        let gain = t.param(store, self.final_norm.gain);
        let bias = t.param(store, self.final_norm.bias);
        let x = t.layer_norm(x, gain, bias, LN_EPS);
        self.proj_out.forward(t, store, x)
    }
}
