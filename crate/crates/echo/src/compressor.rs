//! Hierarchical causal compression of grid latents and its mirror.
//!
//! The encoder stacks stride-2 spatial compressions, then stride-2 causal
//! temporal compressions, with a residual block between consecutive
//! compression layers and a final pointwise projection to the token width.
//! Temporal convolutions pad only the past, so a latent at temporal index `j`
//! never depends on physical frames later than `j * 2^temporal_levels`. The
//! decoder mirrors the encoder with zero-stuffing upsamples followed by the
//! same causal convolutions, recovering the exact input extents (odd spatial
//! extents are left-padded to even before striding and cropped on the way
//! back).
//!
//! Temporal anchors sit at multiples of the stride, so frames after the last
//! anchor `s_t * (T' - 1)` never enter any latent. Window lengths congruent
//! to 1 modulo the temporal stride keep the newest frame covered.

use rand::Rng;

use crate::tensor::nn::{Linear, NormAffine};
use crate::tensor::{ConvSpec, ParamStore, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Static architecture of one compressor.
#[derive(Debug, Clone, Copy)]
pub struct CompressorConfig {
    /// Channel width of the incoming grid latent.
    pub base_channels: usize,
    /// Number of stride-2 spatial compression layers.
    pub spatial_levels: usize,
    /// Number of stride-2 causal temporal compression layers.
    pub temporal_levels: usize,
    /// Width of the final latent tokens.
    pub token_dim: usize,
    /// Kernel extent on the axes each block operates on.
    pub kernel_size: usize,
    /// Channel groups for group normalization (clamped to divide the width).
    pub groups: usize,
    /// Append a pointwise channel MLP with residual add to each residual block.
    pub global_context: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig {
            base_channels: 16,
            spatial_levels: 2,
            temporal_levels: 1,
            token_dim: 32,
            kernel_size: 3,
            groups: 8,
            global_context: true,
        }
    }
}

impl CompressorConfig {
    /// Total temporal stride between physical frames and latent indices.
    pub fn temporal_stride(&self) -> usize {
        1 << self.temporal_levels
    }

    /// Channel width after all compression layers.
    pub fn top_channels(&self) -> usize {
        self.base_channels << self.spatial_levels
    }
}

/// `(n_points * n_frames * n_channels) / (M' * T' * d)` where `M'` and `T'`
/// are the compressed extents of a `grid_h x grid_w` latent over `n_frames`.
pub fn compression_ratio(
    cfg: &CompressorConfig,
    n_points: usize,
    n_frames: usize,
    n_channels: usize,
    grid_h: usize,
    grid_w: usize,
) -> f64 {
    let (t, h, w) = latent_extents(cfg, n_frames, grid_h, grid_w);
    (n_points * n_frames * n_channels) as f64 / ((h * w * t * cfg.token_dim) as f64)
}

/// Latent extents `(T', H', W')` for an input of `t` frames on an `h x w` grid.
pub fn latent_extents(cfg: &CompressorConfig, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
    let (mut t, mut h, mut w) = (t, h, w);
    for _ in 0..cfg.spatial_levels {
        h = (h + h % 2) / 2;
        w = (w + w % 2) / 2;
    }
    for _ in 0..cfg.temporal_levels {
        t = t.div_ceil(2);
    }
    (t, h, w)
}

/// Input extents recorded before each compression step, in encoder order.
/// The decoder walks this in reverse to invert every stride exactly.
fn shape_plan(cfg: &CompressorConfig, t: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut plan = Vec::new();
    let (mut t, mut h, mut w) = (t, h, w);
    for _ in 0..cfg.spatial_levels {
        plan.push((t, h, w));
        h = (h + h % 2) / 2;
        w = (w + w % 2) / 2;
    }
    for _ in 0..cfg.temporal_levels {
        plan.push((t, h, w));
        t = t.div_ceil(2);
    }
    plan
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Convolution weights plus bias.
struct ConvLayer {
    w: crate::tensor::ParamId,
    b: crate::tensor::ParamId,
    spec: ConvSpec,
}

impl ConvLayer {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let rows = spec.weight_rows();
        let a = (1.0 / rows as f64).sqrt();
        let w = store.register(format!("{name}.w"), Tensor::uniform(&[rows, spec.cout], -a, a, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[spec.cout]));
        ConvLayer { w, b, spec }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.conv3d(x, w, self.spec);
        t.add(y, b)
    }
}

/// Group normalization followed by GELU; statistics stay within each time
/// index, so normalization cannot leak information across frames.
struct NormAct {
    affine: NormAffine,
    groups: usize,
}

impl NormAct {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        NormAct {
            affine: NormAffine::new(store, name, channels),
            groups: gcd(groups, channels),
        }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let g = t.param(store, self.affine.gain);
        let b = t.param(store, self.affine.bias);
        let y = t.group_norm(x, g, b, self.groups, NORM_EPS);
        t.gelu(y)
    }
}

/// Pointwise linear over the channel axis of a `[T, H, W, C]` tensor.
fn pointwise<S: Scalar>(
    t: &mut Tape<S>,
    store: &ParamStore<S>,
    lin: &Linear,
    x: Var,
) -> Var {
    let shape = t.value(x).shape().to_vec();
    let c = *shape.last().unwrap();
    let n: usize = shape.iter().product::<usize>() / c;
    let flat = t.reshape(x, &[n, c]);
    let y = lin.forward(t, store, flat);
    let c_out = t.value(y).shape()[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = c_out;
    t.reshape(y, &out_shape)
}

/// `x + pointwise(gelu(causal_conv(norm_act(x))))`, with a pointwise skip
/// projection when the channel count changes, and an optional channel-MLP
/// context stage.
struct ResidualBlock {
    norm: NormAct,
    conv: ConvLayer,
    pw: Linear,
    skip: Option<Linear>,
    context: Option<(Linear, Linear)>,
}

impl ResidualBlock {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &CompressorConfig,
        rng: &mut R,
    ) -> Self {
        let k = cfg.kernel_size;
        let spec = ConvSpec { kt: k, kh: k, kw: k, st: 1, sh: 1, sw: 1, cin, cout };
        let conv = ConvLayer::new(store, &format!("{name}.conv"), spec, rng);
        let pw = Linear::new(store, &format!("{name}.pw"), cout, cout, rng);
        let skip = (cin != cout).then(|| Linear::new(store, &format!("{name}.skip"), cin, cout, rng));
        let context = cfg.global_context.then(|| {
            (
                Linear::new(store, &format!("{name}.ctx1"), cout, 2 * cout, rng),
                Linear::new(store, &format!("{name}.ctx2"), 2 * cout, cout, rng),
            )
        });
        ResidualBlock { norm: NormAct::new(store, &format!("{name}.norm"), cin, cfg.groups), conv, pw, skip, context }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.norm.forward(t, store, x);
        let h = self.conv.forward(t, store, h);
        let h = t.gelu(h);
        let h = pointwise(t, store, &self.pw, h);
        let base = match &self.skip {
            Some(p) => pointwise(t, store, p, x),
            None => x,
        };
        let y = t.add(base, h);
        match &self.context {
            Some((c1, c2)) => {
                let u = pointwise(t, store, c1, y);
                let u = t.gelu(u);
                let u = pointwise(t, store, c2, u);
                t.add(y, u)
            }
            None => y,
        }
    }
}

enum EncStep {
    Space { norm: NormAct, conv: ConvLayer },
    Time { norm: NormAct, conv: ConvLayer },
    Res(ResidualBlock),
}

enum DecStep {
    Space { norm: NormAct, conv: ConvLayer },
    Time { norm: NormAct, conv: ConvLayer },
    Res(ResidualBlock),
}

/// Hierarchical encoder/decoder pair over `[T, H, W, C]` grid latents.
pub struct Compressor {
    pub cfg: CompressorConfig,
    enc: Vec<EncStep>,
    to_tokens: Linear,
    from_tokens: Linear,
    dec: Vec<DecStep>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Space,
    Time,
}

impl Compressor {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: CompressorConfig,
        rng: &mut R,
    ) -> Self {
        let k = cfg.kernel_size;
        let kinds: Vec<Kind> = std::iter::repeat_n(Kind::Space, cfg.spatial_levels)
            .chain(std::iter::repeat_n(Kind::Time, cfg.temporal_levels))
            .collect();

        let mut enc = Vec::new();
        let mut c = cfg.base_channels;
        for (i, kind) in kinds.iter().enumerate() {
            if i > 0 {
                enc.push(EncStep::Res(ResidualBlock::new(
                    store,
                    &format!("{name}.enc{i}.res"),
                    c,
                    c,
                    &cfg,
                    rng,
                )));
            }
            match kind {
                Kind::Space => {
                    let spec =
                        ConvSpec { kt: 1, kh: k, kw: k, st: 1, sh: 2, sw: 2, cin: c, cout: 2 * c };
                    enc.push(EncStep::Space {
                        norm: NormAct::new(store, &format!("{name}.enc{i}.norm"), c, cfg.groups),
                        conv: ConvLayer::new(store, &format!("{name}.enc{i}.conv"), spec, rng),
                    });
                    c *= 2;
                }
                Kind::Time => {
                    let spec = ConvSpec { kt: k, kh: 1, kw: 1, st: 2, sh: 1, sw: 1, cin: c, cout: c };
                    enc.push(EncStep::Time {
                        norm: NormAct::new(store, &format!("{name}.enc{i}.norm"), c, cfg.groups),
                        conv: ConvLayer::new(store, &format!("{name}.enc{i}.conv"), spec, rng),
                    });
                }
            }
        }
        let to_tokens = Linear::new(store, &format!("{name}.to_tokens"), c, cfg.token_dim, rng);
        let from_tokens = Linear::new(store, &format!("{name}.from_tokens"), cfg.token_dim, c, rng);

        let mut dec = Vec::new();
        for (i, kind) in kinds.iter().rev().enumerate() {
            if i > 0 {
                dec.push(DecStep::Res(ResidualBlock::new(
                    store,
                    &format!("{name}.dec{i}.res"),
                    c,
                    c,
                    &cfg,
                    rng,
                )));
            }
            match kind {
                Kind::Time => {
                    let spec = ConvSpec { kt: k, kh: 1, kw: 1, st: 1, sh: 1, sw: 1, cin: c, cout: c };
                    dec.push(DecStep::Time {
                        norm: NormAct::new(store, &format!("{name}.dec{i}.norm"), c, cfg.groups),
                        conv: ConvLayer::new(store, &format!("{name}.dec{i}.conv"), spec, rng),
                    });
                }
                Kind::Space => {
                    let spec =
                        ConvSpec { kt: 1, kh: k, kw: k, st: 1, sh: 1, sw: 1, cin: c, cout: c / 2 };
                    dec.push(DecStep::Space {
                        norm: NormAct::new(store, &format!("{name}.dec{i}.norm"), c, cfg.groups),
                        conv: ConvLayer::new(store, &format!("{name}.dec{i}.conv"), spec, rng),
                    });
                    c /= 2;
                }
            }
        }
        assert_eq!(c, cfg.base_channels);
        Compressor { cfg, enc, to_tokens, from_tokens, dec }
    }

    /// `[T, H, W, base_channels]` to `[T', H', W', token_dim]`.
    pub fn encode<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let shape = t.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "compressor wants [T,H,W,C]");
        assert_eq!(shape[3], self.cfg.base_channels, "unexpected channel width");
        let mut h = x;
        for step in &self.enc {
            h = match step {
                EncStep::Res(block) => block.forward(t, store, h),
                EncStep::Space { norm, conv } => {
                    let a = norm.forward(t, store, h);
                    let a = pad_to_even(t, a);
                    conv.forward(t, store, a)
                }
                EncStep::Time { norm, conv } => {
                    let a = norm.forward(t, store, h);
                    conv.forward(t, store, a)
                }
            };
        }
        let z = pointwise(t, store, &self.to_tokens, h);
        let (lt, lh, lw) = latent_extents(&self.cfg, shape[0], shape[1], shape[2]);
        debug_assert_eq!(t.value(z).shape(), &[lt, lh, lw, self.cfg.token_dim]);
        z
    }

    /// Mirror of [`encode`]: `[T', H', W', token_dim]` back to
    /// `[t_out, h_out, w_out, base_channels]`. The physical extents cannot be
    /// derived from the latent alone (strides round up), so they are passed in.
    pub fn decode<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        store: &ParamStore<S>,
        z: Var,
        t_out: usize,
        h_out: usize,
        w_out: usize,
    ) -> Var {
        let plan = shape_plan(&self.cfg, t_out, h_out, w_out);
        let (lt, lh, lw) = latent_extents(&self.cfg, t_out, h_out, w_out);
        assert_eq!(
            t.value(z).shape(),
            &[lt, lh, lw, self.cfg.token_dim],
            "latent extents do not match the requested output extents"
        );
        let mut h = pointwise(t, store, &self.from_tokens, z);
        let mut level = plan.len();
        for step in &self.dec {
            h = match step {
                DecStep::Res(block) => block.forward(t, store, h),
                DecStep::Time { norm, conv } => {
                    level -= 1;
                    let (t_in, _, _) = plan[level];
                    let a = norm.forward(t, store, h);
                    let cur = t.value(a).shape().to_vec();
                    let up = t.upsample_zeros(a, [2, 1, 1], [t_in, cur[1], cur[2]]);
                    conv.forward(t, store, up)
                }
                DecStep::Space { norm, conv } => {
                    level -= 1;
                    let (_, h_in, w_in) = plan[level];
                    let (hp, wp) = (h_in + h_in % 2, w_in + w_in % 2);
                    let a = norm.forward(t, store, h);
                    let cur = t.value(a).shape().to_vec();
                    let up = t.upsample_zeros(a, [1, 2, 2], [cur[0], hp, wp]);
                    let y = conv.forward(t, store, up);
                    // Crop the to-even padding of the mirrored encoder level.
                    let y = t.slice(y, 1, hp - h_in, h_in);
                    t.slice(y, 2, wp - w_in, w_in)
                }
            };
        }
        assert_eq!(level, 0);
        let shape = t.value(h).shape();
        assert_eq!(shape, &[t_out, h_out, w_out, self.cfg.base_channels]);
        h
    }
}

/// Left-pad odd spatial extents of `[T, H, W, C]` with one zero row/column.
fn pad_to_even<S: Scalar>(t: &mut Tape<S>, x: Var) -> Var {
    let shape = t.value(x).shape().to_vec();
    let mut out = x;
    if shape[1] % 2 == 1 {
        let pad = t.constant(Tensor::zeros(&[shape[0], 1, shape[2], shape[3]]));
        out = t.concat(&[pad, out], 1);
    }
    if shape[2] % 2 == 1 {
        let h_now = t.value(out).shape()[1];
        let pad = t.constant(Tensor::zeros(&[shape[0], h_now, 1, shape[3]]));
        out = t.concat(&[pad, out], 2);
    }
    out
}
