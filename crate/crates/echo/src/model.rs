//! End-to-end model: continuous encoder onto a regular latent grid, causal
//! space-time compressor, velocity transformer, and continuous decoder.
//!
//! The pieces are assembled around one [`ParamStore`] so a single checkpoint
//! carries the whole pipeline. Field snapshots come and go as point sets with
//! per-point channel values; everything in between lives on regular grids.

use rand::Rng;

use crate::compressor::{latent_extents, Compressor, CompressorConfig};
use crate::contconv::{ContConv, ContConvSpec, Normalize};
use crate::geometry::{NeighborIndex, PointSet, RegularGrid};
use crate::processor::{Processor, ProcessorConfig};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// One field snapshot: where it was sampled and the channel values there.
#[derive(Debug, Clone)]
pub struct FrameData<S: Scalar> {
    pub points: PointSet,
    /// `[n_points, channels]`.
    pub values: Tensor<S>,
}

impl<S: Scalar> FrameData<S> {
    pub fn new(points: PointSet, values: Tensor<S>) -> Self {
        assert_eq!(values.shape().len(), 2);
        assert_eq!(values.shape()[0], points.len(), "one value row per point");
        FrameData { points, values }
    }

    /// Same points, all-zero values; stands in for unobserved frames.
    pub fn zeroed(&self) -> Self {
        FrameData { points: self.points.clone(), values: Tensor::zeros(self.values.shape()) }
    }
}

/// Everything needed to rebuild the full pipeline.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Latent grid extents `[height, width]` over the unit box.
    pub grid: [usize; 2],
    /// Physical field channels.
    pub channels: usize,
    /// Receptive-field radius of the point encoder.
    pub enc_radius: f64,
    /// Receptive-field radius of the point decoder (over grid nodes).
    pub dec_radius: f64,
    pub max_neighbors: usize,
    pub normalize: Normalize,
    pub kernel_hidden: usize,
    pub compressor: CompressorConfig,
    pub processor: ProcessorConfig,
    /// Standardization of PDE coefficients fed to the processor.
    pub gamma_mean: Vec<f64>,
    pub gamma_std: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let compressor = CompressorConfig::default();
        let processor = ProcessorConfig {
            depth: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 2,
            token_dim: compressor.token_dim,
            n_gamma: 0,
            mask_channel: true,
        };
        ModelConfig {
            grid: [32, 32],
            channels: 1,
            enc_radius: 0.05,
            dec_radius: 0.05,
            max_neighbors: 64,
            normalize: Normalize::Density,
            kernel_hidden: 64,
            compressor,
            processor,
            gamma_mean: Vec::new(),
            gamma_std: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// Latent extents for a window of `n_frames`.
    pub fn latent_shape(&self, n_frames: usize) -> (usize, usize, usize) {
        latent_extents(&self.compressor, n_frames, self.grid[0], self.grid[1])
    }

    /// Spatial tokens per latent time slot.
    pub fn m_tokens(&self) -> usize {
        let (_, h, w) = self.latent_shape(1);
        h * w
    }

    pub fn temporal_stride(&self) -> usize {
        self.compressor.temporal_stride()
    }

    /// Map raw PDE coefficients to the standardized values the processor
    /// expects. Identity when no statistics have been recorded.
    pub fn standardize_gamma(&self, gamma: &[f64]) -> Vec<f64> {
        assert_eq!(gamma.len(), self.processor.n_gamma, "coefficient count mismatch");
        if self.gamma_mean.is_empty() {
            return gamma.to_vec();
        }
        assert_eq!(self.gamma_mean.len(), gamma.len());
        gamma
            .iter()
            .zip(self.gamma_mean.iter().zip(&self.gamma_std))
            .map(|(&g, (&m, &s))| (g - m) / s.max(1e-12))
            .collect()
    }
}

/// The assembled pipeline. Parameters live in the [`ParamStore`] that was
/// passed to [`EchoModel::new`].
pub struct EchoModel {
    pub cfg: ModelConfig,
    pub encoder: ContConv,
    pub compressor: Compressor,
    pub processor: Processor,
    pub decoder: ContConv,
    grid: RegularGrid,
}

impl EchoModel {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, cfg: ModelConfig, rng: &mut R) -> Self {
        assert_eq!(
            cfg.processor.token_dim, cfg.compressor.token_dim,
            "processor and compressor must agree on the token width"
        );
        let enc_spec = ContConvSpec {
            cin: cfg.channels,
            cout: cfg.compressor.base_channels,
            radius: cfg.enc_radius,
            max_neighbors: cfg.max_neighbors,
            normalize: cfg.normalize,
            kernel_hidden: cfg.kernel_hidden,
            ..ContConvSpec::default()
        };
        let dec_spec = ContConvSpec {
            cin: cfg.compressor.base_channels,
            cout: cfg.channels,
            radius: cfg.dec_radius,
            max_neighbors: cfg.max_neighbors,
            normalize: cfg.normalize,
            kernel_hidden: cfg.kernel_hidden,
            ..ContConvSpec::default()
        };
        let encoder = ContConv::new(store, "encoder", 2, enc_spec, rng);
        let compressor = Compressor::new(store, "compressor", cfg.compressor, rng);
        let processor = Processor::new(store, "processor", cfg.processor, rng);
        let decoder = ContConv::new(store, "decoder", 2, dec_spec, rng);
        let grid = RegularGrid::new(&cfg.grid);
        EchoModel { cfg, encoder, compressor, processor, decoder, grid }
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    /// Point frames to a latent block `[T', H', W', token_dim]`.
    pub fn encode_window<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        frames: &[FrameData<S>],
    ) -> Var {
        assert!(!frames.is_empty());
        let (h, w) = (self.cfg.grid[0], self.cfg.grid[1]);
        let mut stacked = Vec::with_capacity(frames.len());
        for frame in frames {
            assert_eq!(frame.points.dim(), 2, "fields live on 2-d point sets");
            assert_eq!(frame.values.shape()[1], self.cfg.channels);
            let index = NeighborIndex::new(&frame.points, self.cfg.enc_radius);
            let feats = tape.constant(frame.values.clone());
            let enc = self.encoder.encode(tape, store, feats, &frame.points, &index, &self.grid);
            stacked.push(tape.reshape(enc, &[1, h, w, self.cfg.compressor.base_channels]));
        }
        let x = if stacked.len() == 1 { stacked[0] } else { tape.concat(&stacked, 0) };
        self.compressor.encode(tape, store, x)
    }

    /// Latent block back to per-frame values at the query points:
    /// `n_frames` tensors of `[n_queries, channels]`.
    pub fn decode_window<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        z: Var,
        n_frames: usize,
        queries: &PointSet,
    ) -> Vec<Var> {
        let (h, w) = (self.cfg.grid[0], self.cfg.grid[1]);
        let x = self.compressor.decode(tape, store, z, n_frames, h, w);
        let grid_points = self.grid.to_points();
        let index = NeighborIndex::new(&grid_points, self.cfg.dec_radius);
        let c0 = self.cfg.compressor.base_channels;
        (0..n_frames)
            .map(|t| {
                let frame = tape.slice(x, 0, t, 1);
                let frame = tape.reshape(frame, &[h * w, c0]);
                self.decoder.decode(tape, store, frame, &self.grid, &index, queries)
            })
            .collect()
    }

    /// Autoencoder path: encode a window, decode it at the query points.
    pub fn reconstruct<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        frames: &[FrameData<S>],
        queries: &PointSet,
    ) -> Vec<Var> {
        let z = self.encode_window(tape, store, frames);
        self.decode_window(tape, store, z, frames.len(), queries)
    }

    /// Off-tape convenience: encode a window and return the latent values.
    pub fn encode_window_values<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        frames: &[FrameData<S>],
    ) -> Tensor<S> {
        let mut tape = Tape::new();
        let z = self.encode_window(&mut tape, store, frames);
        tape.value(z).clone()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Small but structurally complete model used across test modules.
    pub(crate) fn tiny_model(seed: u64) -> (ParamStore<f64>, EchoModel) {
        let compressor = CompressorConfig {
            base_channels: 4,
            spatial_levels: 1,
            temporal_levels: 1,
            token_dim: 6,
            kernel_size: 3,
            groups: 2,
            global_context: false,
        };
        let processor = ProcessorConfig {
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            token_dim: 6,
            n_gamma: 0,
            mask_channel: true,
        };
        let cfg = ModelConfig {
            grid: [4, 4],
            channels: 2,
            enc_radius: 0.3,
            dec_radius: 0.3,
            max_neighbors: 16,
            normalize: Normalize::Density,
            kernel_hidden: 8,
            compressor,
            processor,
            gamma_mean: Vec::new(),
            gamma_std: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = EchoModel::new(&mut store, cfg, &mut rng);
        (store, model)
    }

    pub(crate) fn random_frames(
        n_frames: usize,
        n_points: usize,
        channels: usize,
        seed: u64,
    ) -> Vec<FrameData<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_frames)
            .map(|_| {
                let coords: Vec<f64> = (0..n_points * 2).map(|_| rng.gen::<f64>()).collect();
                let points = PointSet::new(2, coords);
                let values = Tensor::uniform(&[n_points, channels], -1.0, 1.0, &mut rng);
                FrameData::new(points, values)
            })
            .collect()
    }

    #[test]
    fn encode_decode_shapes_line_up() {
        let (store, model) = tiny_model(0);
        let frames = random_frames(5, 30, 2, 1);
        let mut tape = Tape::new();
        let z = model.encode_window(&mut tape, &store, &frames);
        // 5 frames halve (ceil) to 3 slots; the 4x4 grid halves to 2x2.
        assert_eq!(tape.value(z).shape(), &[3, 2, 2, 6]);

        let queries = frames[0].points.clone();
        let out = model.decode_window(&mut tape, &store, z, 5, &queries);
        assert_eq!(out.len(), 5);
        for v in &out {
            assert_eq!(tape.value(*v).shape(), &[30, 2]);
            assert!(tape.value(*v).all_finite());
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (store, model) = tiny_model(2);
        let frames = random_frames(3, 20, 2, 3);
        let queries = frames[1].points.clone();
        let run = || {
            let mut tape = Tape::new();
            let out = model.reconstruct(&mut tape, &store, &frames, &queries);
            out.iter().flat_map(|v| tape.value(*v).data().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reconstruction_loss_reaches_every_parameter_family() {
        let (store, model) = tiny_model(4);
        let frames = random_frames(3, 15, 2, 5);
        let queries = frames[0].points.clone();
        let mut tape = Tape::new();
        let out = model.reconstruct(&mut tape, &store, &frames, &queries);
        let mut loss = None;
        for (v, f) in out.iter().zip(&frames) {
            let target = tape.constant(f.values.clone());
            let d = tape.sub(*v, target);
            let sq = tape.mul(d, d);
            let s = tape.sum_all(sq);
            loss = Some(match loss {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        tape.backward(loss.unwrap());
        let grads = tape.param_grads();
        for prefix in ["encoder", "compressor", "decoder"] {
            let touched = grads.iter().any(|(id, g)| {
                store.name(*id).starts_with(prefix) && g.data().iter().any(|&x| x != 0.0)
            });
            assert!(touched, "no nonzero gradient reached {prefix}");
        }
    }

    #[test]
    fn gamma_standardization_applies_recorded_stats() {
        let (_, mut model) = tiny_model(6);
        model.cfg.processor.n_gamma = 2;
        assert_eq!(model.cfg.standardize_gamma(&[0.3, 0.7]), vec![0.3, 0.7]);
        model.cfg.gamma_mean = vec![0.1, 0.5];
        model.cfg.gamma_std = vec![0.2, 0.1];
        let s = model.cfg.standardize_gamma(&[0.3, 0.7]);
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
    }
}
