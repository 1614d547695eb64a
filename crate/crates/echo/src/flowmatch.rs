//! Flow-matching objective on latent trajectories with randomized
//! observation masks.
//!
//! Training draws a mask marking ~20% of latent time slots as observed, mixes
//! clean tokens with Gaussian noise along the straight probability path
//! `z_r = r * z + (1 - r) * eps` on the unobserved slots, and regresses the
//! model's velocity prediction onto the constant path derivative `z - eps`.
//! Observed slots always carry clean tokens and never contribute to the loss.

use rand::Rng;

use crate::processor::{assemble_tokens, Processor};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Fraction of latent time slots held observed during training.
pub const OBSERVED_FRACTION: f64 = 0.2;

/// Observation mask at both physical-frame and latent-time resolution.
///
/// A latent slot is observed only when every physical frame mapping to it
/// (frame `t` maps to slot `t / temporal_stride`) is observed; a partially
/// observed slot would otherwise leak unobserved frames into conditioning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMask {
    /// Per physical frame: `true` = observed.
    pub physical: Vec<bool>,
    /// Per latent time slot: `true` = observed.
    pub latent: Vec<bool>,
    /// Physical frames per latent slot.
    pub temporal_stride: usize,
}

impl TaskMask {
    /// Derive the latent mask from a physical one with the all-frames rule.
    pub fn from_physical(physical: &[bool], temporal_stride: usize) -> Self {
        assert!(temporal_stride >= 1);
        assert!(!physical.is_empty());
        let t_latent = physical.len().div_ceil(temporal_stride);
        let latent = (0..t_latent)
            .map(|j| {
                physical[j * temporal_stride..((j + 1) * temporal_stride).min(physical.len())]
                    .iter()
                    .all(|&o| o)
            })
            .collect();
        TaskMask { physical: physical.to_vec(), latent, temporal_stride }
    }

    /// Expand a latent-resolution mask to frames: a frame inherits the flag
    /// of its slot. Round-trips with [`TaskMask::from_physical`].
    pub fn from_latent(latent: &[bool], temporal_stride: usize, n_frames: usize) -> Self {
        assert!(temporal_stride >= 1);
        assert_eq!(n_frames.div_ceil(temporal_stride), latent.len(), "frame count mismatch");
        let physical = (0..n_frames).map(|t| latent[t / temporal_stride]).collect();
        TaskMask { physical, latent: latent.to_vec(), temporal_stride }
    }

    pub fn n_observed_latent(&self) -> usize {
        self.latent.iter().filter(|&&o| o).count()
    }
}

/// Draw a latent-resolution training mask with exactly
/// `round(OBSERVED_FRACTION * t_latent)` observed slots, uniformly without
/// replacement. Returned at stride 1 (latent and physical views coincide).
pub fn sample_training_mask<R: Rng>(t_latent: usize, rng: &mut R) -> TaskMask {
    assert!(t_latent >= 1);
    let n_obs = (OBSERVED_FRACTION * t_latent as f64).round() as usize;
    let mut latent = vec![false; t_latent];
    for i in rand::seq::index::sample(rng, t_latent, n_obs) {
        latent[i] = true;
    }
    TaskMask { physical: latent.clone(), latent, temporal_stride: 1 }
}

/// One training point along the probability path.
pub struct FlowSample<S: Scalar> {
    pub z_r: Tensor<S>,
    pub eps: Tensor<S>,
    pub r: f64,
    pub mask: TaskMask,
}

/// Interpolate `r * z_clean + (1 - r) * eps` on unobserved latent slots;
/// observed slots keep the clean tokens. The leading axis indexes latent time.
pub fn make_path_point<S: Scalar>(
    z_clean: &Tensor<S>,
    eps: &Tensor<S>,
    r: f64,
    latent_mask: &[bool],
) -> Tensor<S> {
    assert_eq!(z_clean.shape(), eps.shape(), "path endpoints must share a shape");
    assert_eq!(z_clean.shape()[0], latent_mask.len(), "mask must cover the leading axis");
    let slot = z_clean.len() / latent_mask.len();
    let mut out = z_clean.clone();
    let (zd, ed, od) = (z_clean.data(), eps.data(), out.data_mut());
    for (j, &obs) in latent_mask.iter().enumerate() {
        if obs {
            continue;
        }
        for i in j * slot..(j + 1) * slot {
            od[i] = S::of_f64(r * zd[i].into_f64() + (1.0 - r) * ed[i].into_f64());
        }
    }
    out
}

/// Draw `(mask, eps, r)` for one trajectory and build the path point.
pub fn draw_flow_sample<S: Scalar, R: Rng>(z_clean: &Tensor<S>, rng: &mut R) -> FlowSample<S> {
    let t_latent = z_clean.shape()[0];
    let mask = sample_training_mask(t_latent, rng);
    let eps = Tensor::randn(z_clean.shape(), 1.0, rng);
    let r: f64 = rng.gen();
    let z_r = make_path_point(z_clean, &eps, r, &mask.latent);
    FlowSample { z_r, eps, r, mask }
}

/// Mean squared error between a velocity prediction and `z_clean - eps`,
/// restricted to unobserved latent slots. `velocity` is `[T' * m, d]` in
/// time-major order; the targets are `[T', m, d]`.
pub fn masked_velocity_loss<S: Scalar>(
    tape: &mut Tape<S>,
    velocity: Var,
    z_clean: &Tensor<S>,
    eps: &Tensor<S>,
    latent_mask: &[bool],
) -> Var {
    assert_eq!(z_clean.shape(), eps.shape());
    assert_eq!(z_clean.shape().len(), 3, "targets must be [T', m, d]");
    let (t_latent, m, d) = (z_clean.shape()[0], z_clean.shape()[1], z_clean.shape()[2]);
    assert_eq!(tape.value(velocity).shape(), &[t_latent * m, d]);
    assert_eq!(latent_mask.len(), t_latent);

    let n_unobs = latent_mask.iter().filter(|&&o| !o).count();
    if n_unobs == 0 {
        return tape.constant(Tensor::zeros(&[1]));
    }
    let target: Vec<S> = z_clean
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| S::of_f64(z.into_f64() - e.into_f64()))
        .collect();
    let target = tape.constant(Tensor::from_vec(&[t_latent * m, d], target));
    let weights: Vec<S> = latent_mask
        .iter()
        .flat_map(|&obs| std::iter::repeat_n(if obs { S::zero() } else { S::one() }, m))
        .collect();
    let weights = tape.constant(Tensor::from_vec(&[t_latent * m, 1], weights));

    let diff = tape.sub(velocity, target);
    let sq = tape.mul(diff, diff);
    let masked = tape.mul(sq, weights);
    let total = tape.sum_all(masked);
    tape.mul_scalar(total, S::of_f64(1.0 / (n_unobs * m * d) as f64))
}

/// Full training objective for one latent trajectory `[T', m, d]`: draw a
/// sample, assemble conditioning tokens, run the model, reduce the masked
/// error. Returns the loss variable and the drawn sample for inspection.
pub fn fm_loss<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    model: &Processor,
    z_clean: &Tensor<S>,
    gamma: Option<&[f64]>,
    rng: &mut R,
) -> (Var, FlowSample<S>) {
    assert_eq!(z_clean.shape().len(), 3, "latent trajectory must be [T', m, d]");
    let (t_latent, m, d) = (z_clean.shape()[0], z_clean.shape()[1], z_clean.shape()[2]);
    let sample = draw_flow_sample(z_clean, rng);

    let clean = tape.constant(z_clean.reshape(&[t_latent * m, d]));
    let noised = tape.constant(sample.z_r.reshape(&[t_latent * m, d]));
    let tokens = assemble_tokens(
        tape,
        clean,
        noised,
        &sample.mask.latent,
        m,
        model.cfg.mask_channel,
    );
    let velocity = model.forward(tape, store, tokens, sample.r, gamma);
    let loss = masked_velocity_loss(tape, velocity, z_clean, &sample.eps, &sample.mask.latent);
    (loss, sample)
}
