//! Continuous convolution between scattered points and grid nodes.
//!
//! The kernel is a small MLP evaluated at continuous offsets, so one layer
//! handles any observation layout: the encoder convolves point features onto
//! regular latent nodes, and the decoder convolves latent nodes back onto
//! arbitrary query positions. For output location `q` with receptive field
//! `RF(q)`:
//!
//! ```text
//! out_o(q) = sum_{p in RF(q)} scale_p * sum_i f_i(x_p) * k_{i,o}(q - x_p)
//! ```
//!
//! where `scale_p` is 1 (raw sum) or a normalized Gaussian density weight
//! that makes the output a weighted average, stable when the sampling density
//! of the input points changes.

use std::sync::Arc;

use rand::Rng;

use crate::geometry::{chunk_ranges, Neighbor, NeighborIndex, PointSet, RegularGrid};
use crate::tensor::nn::Linear;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// How receptive-field sums are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Literal unnormalized sum over the receptive field.
    None,
    /// Divide by the sum of Gaussian weights `exp(-|offset|^2 / radius^2)`,
    /// making the output robust to changes in sampling density.
    Density,
}

/// Geometry and capacity settings of one continuous convolution.
#[derive(Debug, Clone, Copy)]
pub struct ContConvSpec {
    pub cin: usize,
    pub cout: usize,
    /// Receptive-field radius (l-infinity ball) in unit-box coordinates.
    pub radius: f64,
    /// Cap on receptive-field size; nearest points win.
    pub max_neighbors: usize,
    pub normalize: Normalize,
    /// Queries are processed in blocks of this many to bound peak memory.
    pub chunk_size: usize,
    /// Hidden width of the kernel MLP.
    pub kernel_hidden: usize,
}

impl Default for ContConvSpec {
    fn default() -> Self {
        ContConvSpec {
            cin: 1,
            cout: 1,
            radius: 0.01,
            max_neighbors: 64,
            normalize: Normalize::Density,
            chunk_size: 4096,
            kernel_hidden: 64,
        }
    }
}

/// Two-hidden-layer MLP mapping an offset to a `[cin, cout]` kernel matrix.
pub struct KernelMlp {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl KernelMlp {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        KernelMlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            fc3: Linear::new(store, &format!("{name}.fc3"), hidden, cin * cout, rng),
        }
    }

    fn forward<S: Scalar>(&self, t: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.fc1.forward(t, store, x);
        let h = t.gelu(h);
        let h = self.fc2.forward(t, store, h);
        let h = t.gelu(h);
        self.fc3.forward(t, store, h)
    }
}

/// Kernel function of a continuous convolution.
pub enum Kernel {
    Mlp(KernelMlp),
    /// Every kernel entry equals this value regardless of offset. Used by
    /// oracle tests and diagnostics, where a learned kernel would obscure
    /// the geometry being checked.
    Constant(f64),
}

/// Continuous convolution layer; the trainable state is its kernel MLP.
pub struct ContConv {
    pub spec: ContConvSpec,
    pub kernel: Kernel,
    dim: usize,
}

impl ContConv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        spec: ContConvSpec,
        rng: &mut R,
    ) -> Self {
        let kernel = Kernel::Mlp(KernelMlp::new(
            store,
            &format!("{name}.kernel"),
            dim,
            spec.kernel_hidden,
            spec.cin,
            spec.cout,
            rng,
        ));
        ContConv { spec, kernel, dim }
    }

    /// Layer whose kernel is identically `value`; registers no parameters.
    pub fn with_constant_kernel(dim: usize, spec: ContConvSpec, value: f64) -> Self {
        ContConv { spec, kernel: Kernel::Constant(value), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Kernel matrices for a batch of raw offsets `[P, D]`, shaped
    /// `[P, cin, cout]`. Offsets are divided by the radius before entering
    /// the MLP; the rescaling is absorbed into the learned kernel and keeps
    /// MLP inputs within `[-1, 1]`.
    pub fn kernel_eval<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        offsets: Var,
    ) -> Var {
        let n = tape.value(offsets).shape()[0];
        assert_eq!(tape.value(offsets).shape(), &[n, self.dim]);
        let (cin, cout) = (self.spec.cin, self.spec.cout);
        match &self.kernel {
            Kernel::Mlp(mlp) => {
                let scaled = tape.mul_scalar(offsets, S::of_f64(1.0 / self.spec.radius));
                let flat = mlp.forward(tape, store, scaled);
                tape.reshape(flat, &[n, cin, cout])
            }
            Kernel::Constant(v) => tape.constant(Tensor::full(&[n, cin, cout], S::of_f64(*v))),
        }
    }

    /// Convolve `feats` (one row per source point) onto `queries`.
    /// `index` must be built over `sources` with this layer's radius.
    /// Queries with an empty receptive field output exact zeros.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        feats: Var,
        sources: &PointSet,
        index: &NeighborIndex,
        queries: &PointSet,
    ) -> Var {
        assert_eq!(sources.dim(), self.dim);
        assert_eq!(queries.dim(), self.dim);
        assert_eq!(
            tape.value(feats).shape(),
            &[sources.len(), self.spec.cin],
            "feature rows must match source points"
        );
        assert_eq!(index.radius(), self.spec.radius, "index built with a different radius");

        let n_q = queries.len();
        let mut chunks = Vec::new();
        let mut hits: Vec<Neighbor> = Vec::new();
        let inv_r2 = 1.0 / (self.spec.radius * self.spec.radius);
        for range in chunk_ranges(n_q, self.spec.chunk_size) {
            let mut segs: Vec<u32> = Vec::with_capacity(range.len() + 1);
            segs.push(0);
            let mut idx: Vec<u32> = Vec::new();
            let mut offsets: Vec<S> = Vec::new();
            let mut weights: Vec<f64> = Vec::new();
            for qi in range.clone() {
                let center = queries.point(qi);
                index.query(center, self.spec.max_neighbors, &mut hits);
                for h in &hits {
                    let p = sources.point(h.id as usize);
                    for d in 0..self.dim {
                        offsets.push(S::of_f64(center[d] - p[d]));
                    }
                    weights.push((-h.d2 * inv_r2).exp());
                    idx.push(h.id);
                }
                segs.push(idx.len() as u32);
            }
            let scale = match self.spec.normalize {
                Normalize::None => vec![S::one(); weights.len()],
                Normalize::Density => {
                    let mut s = vec![S::zero(); weights.len()];
                    for q in 0..range.len() {
                        let (a, b) = (segs[q] as usize, segs[q + 1] as usize);
                        let total: f64 = weights[a..b].iter().sum();
                        if total > 0.0 {
                            for i in a..b {
                                s[i] = S::of_f64(weights[i] / total);
                            }
                        }
                    }
                    s
                }
            };
            let n_pairs = idx.len();
            let off_t = tape.constant(Tensor::from_vec(&[n_pairs, self.dim], offsets));
            let kernels = self.kernel_eval(tape, store, off_t);
            let kflat = tape.reshape(kernels, &[n_pairs, self.spec.cin * self.spec.cout]);
            let gathered = tape.gather_rows(feats, Arc::new(idx));
            let out =
                tape.pair_conv(gathered, kflat, Arc::new(segs), Arc::new(scale), self.spec.cout);
            chunks.push(out);
        }
        if chunks.len() == 1 {
            chunks[0]
        } else {
            tape.concat(&chunks, 0)
        }
    }

    /// Encoder direction: scattered point features onto grid nodes,
    /// returning `[grid.len(), cout]` in node-id order.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        feats: Var,
        points: &PointSet,
        index: &NeighborIndex,
        grid: &RegularGrid,
    ) -> Var {
        self.forward(tape, store, feats, points, index, &grid.to_points())
    }

    /// Decoder direction: grid-node features onto arbitrary query points.
    /// Queries must lie inside the unit box.
    pub fn decode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        grid_feats: Var,
        grid: &RegularGrid,
        index: &NeighborIndex,
        queries: &PointSet,
    ) -> Var {
        for i in 0..queries.len() {
            let p = queries.point(i);
            assert!(
                p.iter().all(|&c| (0.0..=1.0).contains(&c)),
                "query {i} outside the unit box: {p:?}"
            );
        }
        self.forward(tape, store, grid_feats, &grid.to_points(), index, queries)
    }
}

/// Radius that gives roughly `target` expected neighbors at the lowest
/// sampling density the encoder will see, clamped below by the default.
pub fn auto_radius(min_points: usize, dim: usize, target: f64) -> f64 {
    // Expected points in an l-infinity ball of radius r: n * (2r)^dim.
    let r = 0.5 * (target / min_points as f64).powf(1.0 / dim as f64);
    r.max(0.01)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_grad_params, rel_err};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_points(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> PointSet {
        PointSet::new(2, (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn setup(
        normalize: Normalize,
        chunk_size: usize,
        seed: u64,
    ) -> (ParamStore<f64>, ContConv, PointSet, PointSet, Tensor<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spec = ContConvSpec {
            cin: 2,
            cout: 3,
            radius: 0.3,
            max_neighbors: 64,
            normalize,
            chunk_size,
            kernel_hidden: 8,
        };
        let mut store = ParamStore::new();
        let conv = ContConv::new(&mut store, "cc", 2, spec, &mut rng);
        let sources = random_points(5, &mut rng);
        let queries = RegularGrid::new(&[3, 3]).to_points();
        let feats = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng);
        (store, conv, sources, queries, feats)
    }

    /// Straight reimplementation: loops over queries and points, evaluates the
    /// kernel MLP with scalar arithmetic, applies the same normalization.
    fn oracle(
        store: &ParamStore<f64>,
        spec: &ContConvSpec,
        sources: &PointSet,
        queries: &PointSet,
        feats: &Tensor<f64>,
    ) -> Vec<f64> {
        let get = |n: &str| store.get(store.find(n).unwrap()).data().to_vec();
        let (w1, b1) = (get("cc.kernel.fc1.w"), get("cc.kernel.fc1.b"));
        let (w2, b2) = (get("cc.kernel.fc2.w"), get("cc.kernel.fc2.b"));
        let (w3, b3) = (get("cc.kernel.fc3.w"), get("cc.kernel.fc3.b"));
        let h = spec.kernel_hidden;
        let gelu =
            |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let dense = |x: &[f64], w: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
            (0..n_out)
                .map(|j| {
                    b[j] + x.iter().enumerate().map(|(i, &v)| v * w[i * n_out + j]).sum::<f64>()
                })
                .collect()
        };
        let kernel_at = |off: &[f64]| -> Vec<f64> {
            let u: Vec<f64> = off.iter().map(|o| o / spec.radius).collect();
            let h1: Vec<f64> = dense(&u, &w1, &b1, h).into_iter().map(gelu).collect();
            let h2: Vec<f64> = dense(&h1, &w2, &b2, h).into_iter().map(gelu).collect();
            dense(&h2, &w3, &b3, spec.cin * spec.cout)
        };
        let mut out = vec![0.0; queries.len() * spec.cout];
        for q in 0..queries.len() {
            let center = queries.point(q);
            let mut pairs: Vec<(usize, Vec<f64>, f64)> = Vec::new();
            for p in 0..sources.len() {
                let x = sources.point(p);
                let linf =
                    center.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
                if linf <= spec.radius {
                    let off: Vec<f64> = center.iter().zip(x).map(|(a, b)| a - b).collect();
                    let d2: f64 = off.iter().map(|o| o * o).sum();
                    pairs.push((p, off, (-d2 / (spec.radius * spec.radius)).exp()));
                }
            }
            let total_w: f64 = pairs.iter().map(|(_, _, w)| w).sum();
            for (p, off, w) in &pairs {
                let scale = match spec.normalize {
                    Normalize::None => 1.0,
                    Normalize::Density => {
                        if total_w > 0.0 {
                            w / total_w
                        } else {
                            0.0
                        }
                    }
                };
                let k = kernel_at(off);
                for o in 0..spec.cout {
                    let mut acc = 0.0;
                    for i in 0..spec.cin {
                        acc += feats.data()[p * spec.cin + i] * k[i * spec.cout + o];
                    }
                    out[q * spec.cout + o] += scale * acc;
                }
            }
        }
        out
    }

    fn run_forward(
        store: &ParamStore<f64>,
        conv: &ContConv,
        sources: &PointSet,
        queries: &PointSet,
        feats: &Tensor<f64>,
    ) -> Vec<f64> {
        let index = NeighborIndex::new(sources, conv.spec.radius);
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let out = conv.forward(&mut tape, store, f, sources, &index, queries);
        tape.value(out).data().to_vec()
    }

    #[test]
    fn encode_matches_double_loop_oracle() {
        for (mode, seed) in
            [(Normalize::None, 0u64), (Normalize::Density, 1), (Normalize::None, 2)]
        {
            let (store, conv, sources, queries, feats) = setup(mode, 4096, seed);
            let got = run_forward(&store, &conv, &sources, &queries, &feats);
            let want = oracle(&store, &conv.spec, &sources, &queries, &feats);
            let mut nonzero = 0;
            for (g, w) in got.iter().zip(&want) {
                assert!(rel_err(*g, *w) < 1e-12, "oracle mismatch: {g} vs {w} (mode {mode:?})");
                nonzero += (*w != 0.0) as usize;
            }
            assert!(nonzero > 0, "degenerate case: all outputs zero");
        }
    }

    #[test]
    fn decode_matches_double_loop_oracle() {
        // Roles swapped: grid nodes are the sources, scattered points query.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let spec = ContConvSpec {
            cin: 3,
            cout: 2,
            radius: 0.45,
            max_neighbors: 64,
            normalize: Normalize::Density,
            chunk_size: 4096,
            kernel_hidden: 8,
        };
        let mut store = ParamStore::<f64>::new();
        let conv = ContConv::new(&mut store, "cc", 2, spec, &mut rng);
        let grid = RegularGrid::new(&[3, 3]);
        let g = Tensor::uniform(&[9, 3], -1.0, 1.0, &mut rng);
        let queries = random_points(10, &mut rng);
        let index_pts = grid.to_points();
        let index = NeighborIndex::new(&index_pts, spec.radius);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let out = conv.decode(&mut tape, &store, gv, &grid, &index, &queries);
        let got = tape.value(out).data().to_vec();
        let want = oracle(&store, &spec, &grid.to_points(), &queries, &g);
        for (gv, wv) in got.iter().zip(&want) {
            assert!(rel_err(*gv, *wv) < 1e-12, "decode oracle mismatch: {gv} vs {wv}");
        }
    }

    #[test]
    fn constant_kernel_sums_features() {
        // One point in range with f = 2.0 and kernel = 1 gives 2.0 per output
        // channel under either normalization (a single weight normalizes to 1).
        let spec = ContConvSpec {
            cin: 1,
            cout: 3,
            radius: 0.2,
            normalize: Normalize::None,
            ..Default::default()
        };
        let conv = ContConv::with_constant_kernel(2, spec, 1.0);
        let store = ParamStore::<f64>::new();
        let sources = PointSet::new(2, vec![0.52, 0.48]);
        let queries = PointSet::new(2, vec![0.5, 0.5]);
        let feats = Tensor::full(&[1, 1], 2.0);
        let out = run_forward(&store, &conv, &sources, &queries, &feats);
        assert_eq!(out, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn empty_receptive_field_gives_zeros() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let spec = ContConvSpec { cin: 1, cout: 2, radius: 0.05, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let conv = ContConv::new(&mut store, "cc", 2, spec, &mut rng);
        let sources = PointSet::new(2, vec![0.1, 0.1]);
        let queries = PointSet::new(2, vec![0.9, 0.9, 0.12, 0.12]);
        let feats = Tensor::full(&[1, 1], 5.0);
        let out = run_forward(&store, &conv, &sources, &queries, &feats);
        assert_eq!(&out[..2], &[0.0, 0.0], "isolated query must be exactly zero");
        assert!(out[2] != 0.0 || out[3] != 0.0, "covered query should be nonzero");
    }

    #[test]
    fn decode_at_node_with_tight_radius_returns_node_value() {
        // Radius below the node spacing makes the constant kernel delta-like:
        // a query placed exactly on a node sees only that node.
        let grid = RegularGrid::new(&[4, 4]);
        let spec = ContConvSpec {
            cin: 1,
            cout: 1,
            radius: 0.1,
            normalize: Normalize::Density,
            ..Default::default()
        };
        let conv = ContConv::with_constant_kernel(2, spec, 1.0);
        let store = ParamStore::<f64>::new();
        let g = Tensor::from_vec(&[16, 1], (0..16).map(|v| v as f64).collect::<Vec<_>>());
        let queries = PointSet::new(2, grid.to_points().point(6).to_vec());
        let index_pts = grid.to_points();
        let index = NeighborIndex::new(&index_pts, spec.radius);
        let mut tape = Tape::new();
        let gv = tape.constant(g);
        let out = conv.decode(&mut tape, &store, gv, &grid, &index, &queries);
        assert_eq!(tape.value(out).data(), &[6.0]);
    }

    #[test]
    fn normalized_constant_field_decodes_to_constant() {
        // Constant grid values and a constant kernel: density normalization
        // makes the output the same constant at any query position.
        let grid = RegularGrid::new(&[4, 4]);
        let spec = ContConvSpec {
            cin: 1,
            cout: 1,
            radius: 0.3,
            normalize: Normalize::Density,
            ..Default::default()
        };
        let conv = ContConv::with_constant_kernel(2, spec, 1.0);
        let store = ParamStore::<f64>::new();
        let g = Tensor::full(&[16, 1], 3.25);
        let queries = PointSet::new(2, vec![0.5, 0.5, 0.13, 0.77, 0.9, 0.02, 0.33, 0.33]);
        let index_pts = grid.to_points();
        let index = NeighborIndex::new(&index_pts, spec.radius);
        let mut tape = Tape::new();
        let gv = tape.constant(g);
        let out = conv.decode(&mut tape, &store, gv, &grid, &index, &queries);
        for v in tape.value(out).data() {
            assert!((v - 3.25).abs() < 1e-12, "expected 3.25, got {v}");
        }
    }

    #[test]
    fn permutation_of_points_is_invariant() {
        let (store, conv, sources, queries, feats) = setup(Normalize::Density, 4096, 6);
        let base = run_forward(&store, &conv, &sources, &queries, &feats);
        let perm: Vec<usize> = (0..sources.len()).rev().collect();
        let permuted = sources.select(&perm);
        let mut fdata = vec![0.0; feats.len()];
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..2 {
                fdata[new_row * 2 + c] = feats.data()[old_row * 2 + c];
            }
        }
        let out = run_forward(
            &store,
            &conv,
            &permuted,
            &queries,
            &Tensor::from_vec(&[sources.len(), 2], fdata),
        );
        for (g, w) in out.iter().zip(&base) {
            assert!(rel_err(*g, *w) < 1e-12, "permutation changed output: {g} vs {w}");
        }
    }

    #[test]
    fn perturbing_point_outside_receptive_field_is_invisible() {
        let (store, conv, sources, queries, feats) = setup(Normalize::Density, 4096, 12);
        let base = run_forward(&store, &conv, &sources, &queries, &feats);
        // Find a (query, point) pair with the point well outside that query's
        // receptive field.
        let r = conv.spec.radius;
        let mut far = None;
        'outer: for q in 0..queries.len() {
            for p in 0..sources.len() {
                let c = queries.point(q);
                let x = sources.point(p);
                let linf = (c[0] - x[0]).abs().max((c[1] - x[1]).abs());
                if linf > 1.5 * r {
                    far = Some((q, p));
                    break 'outer;
                }
            }
        }
        let (q, p) = far.expect("setup should contain a far pair");
        // Nudge the far point; it must stay outside the query's box.
        let mut coords = sources.coords().to_vec();
        for d in 0..2 {
            let sign = if coords[p * 2 + d] < 0.5 { -1.0 } else { 1.0 };
            coords[p * 2 + d] = (coords[p * 2 + d] + 0.05 * sign).clamp(0.0, 1.0);
        }
        let c = queries.point(q);
        let linf = (c[0] - coords[p * 2]).abs().max((c[1] - coords[p * 2 + 1]).abs());
        assert!(linf > r, "perturbed point must remain outside the receptive field");
        let out = run_forward(&store, &conv, &PointSet::new(2, coords), &queries, &feats);
        for o in 0..conv.spec.cout {
            assert_eq!(
                out[q * conv.spec.cout + o],
                base[q * conv.spec.cout + o],
                "output at an unaffected query must be bitwise unchanged"
            );
        }
    }

    #[test]
    fn chunk_size_does_not_change_output() {
        let reference = {
            let (store, conv, sources, queries, feats) = setup(Normalize::Density, 4096, 7);
            run_forward(&store, &conv, &sources, &queries, &feats)
        };
        for chunk in [1usize, 3, 5, 16] {
            let (store, conv, sources, queries, feats) = setup(Normalize::Density, chunk, 7);
            let out = run_forward(&store, &conv, &sources, &queries, &feats);
            assert_eq!(out, reference, "chunk size {chunk} changed the result");
        }
    }

    #[test]
    fn neighbor_cap_keeps_nearest() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let spec = ContConvSpec {
            cin: 2,
            cout: 3,
            radius: 0.3,
            max_neighbors: 64,
            normalize: Normalize::None,
            chunk_size: 4096,
            kernel_hidden: 8,
        };
        let mut store = ParamStore::<f64>::new();
        let mut conv = ContConv::new(&mut store, "cc", 2, spec, &mut rng);
        let sources = random_points(13, &mut rng);
        let feats = Tensor::uniform(&[13, 2], -1.0, 1.0, &mut rng);
        let queries = PointSet::new(2, vec![0.5, 0.5]);

        conv.spec.max_neighbors = 2;
        let got = run_forward(&store, &conv, &sources, &queries, &feats);

        // Oracle: nearest two in-radius points by Euclidean distance, then id.
        let center = [0.5, 0.5];
        let mut cands: Vec<(f64, usize)> = (0..sources.len())
            .filter(|&p| {
                let x = sources.point(p);
                (center[0] - x[0]).abs().max((center[1] - x[1]).abs()) <= conv.spec.radius
            })
            .map(|p| {
                let x = sources.point(p);
                ((center[0] - x[0]).powi(2) + (center[1] - x[1]).powi(2), p)
            })
            .collect();
        assert!(cands.len() > 2, "test setup should overflow the cap");
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cands.truncate(2);
        let mut keep: Vec<usize> = cands.iter().map(|&(_, p)| p).collect();
        keep.sort_unstable();
        let kept_sources = sources.select(&keep);
        let mut kf = Vec::new();
        for &p in &keep {
            kf.extend_from_slice(&feats.data()[p * 2..p * 2 + 2]);
        }
        conv.spec.max_neighbors = 64;
        let want =
            run_forward(&store, &conv, &kept_sources, &queries, &Tensor::from_vec(&[2, 2], kf));
        for (g, w) in got.iter().zip(&want) {
            assert!(rel_err(*g, *w) < 1e-12, "cap mismatch {g} vs {w}");
        }
    }

    #[test]
    fn gradients_through_kernel_and_features() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let spec = ContConvSpec {
            cin: 2,
            cout: 2,
            radius: 0.4,
            max_neighbors: 16,
            normalize: Normalize::Density,
            chunk_size: 3,
            kernel_hidden: 6,
        };
        let mut store = ParamStore::<f64>::new();
        let conv = ContConv::new(&mut store, "cc", 2, spec, &mut rng);
        let sources = random_points(8, &mut rng);
        let queries = PointSet::new(2, vec![0.3, 0.3, 0.7, 0.6, 0.1, 0.9]);
        let feats = Tensor::uniform(&[8, 2], -1.0, 1.0, &mut rng);
        let index = NeighborIndex::new(&sources, spec.radius);

        let err = check_grad_params(&mut store, |t, s| {
            let f = t.input(feats.clone());
            let out = conv.forward(t, s, f, &sources, &index, &queries);
            let sq = t.mul(out, out);
            t.sum_all(sq)
        });
        assert!(err < 1e-6, "contconv param grad err {err}");

        // Gradient with respect to the features input (decoder path).
        let grad_feats = {
            let mut t = Tape::new();
            let f = t.input(feats.clone());
            let out = conv.forward(&mut t, &store, f, &sources, &index, &queries);
            let sq = t.mul(out, out);
            let l = t.sum_all(sq);
            t.backward(l);
            t.grad(f).unwrap().clone()
        };
        let mut worst = 0.0f64;
        for j in 0..feats.len() {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut fd = feats.clone();
                fd.data_mut()[j] += delta;
                let mut t = Tape::new();
                let f = t.constant(fd);
                let out = conv.forward(&mut t, &store, f, &sources, &index, &queries);
                let sq = t.mul(out, out);
                let l = t.sum_all(sq);
                t.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(grad_feats.data()[j], fd));
        }
        assert!(worst < 1e-5, "contconv feature grad err {worst}");
    }

    #[test]
    fn density_mode_stable_when_sampling_doubles() {
        // The same smooth field sampled twice as densely should encode to
        // nearly the same grid values under density normalization; raw sums
        // scale roughly with the point count instead.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let field = |x: f64, y: f64| [x + 0.5 * y, y - 0.25 * x];
        let mut make = |n: usize| {
            let pts = random_points(n, &mut rng);
            let feats: Vec<f64> = pts.coords().chunks(2).flat_map(|p| field(p[0], p[1])).collect();
            let f = Tensor::from_vec(&[n, 2], feats);
            (pts, f)
        };
        let (sparse, f_sparse) = make(400);
        let (dense, f_dense) = make(800);
        let queries = RegularGrid::new(&[5, 5]).to_points();

        let run = |mode: Normalize, pts: &PointSet, feats: &Tensor<f64>| {
            let mut store = ParamStore::<f64>::new();
            let mut krng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let spec = ContConvSpec {
                cin: 2,
                cout: 2,
                radius: 0.15,
                max_neighbors: usize::MAX,
                normalize: mode,
                chunk_size: 4096,
                kernel_hidden: 8,
            };
            let conv = ContConv::new(&mut store, "cc", 2, spec, &mut krng);
            // A freshly initialized kernel is zero-mean, so sampled sums are
            // dominated by noise; shift the output bias to mimic a trained
            // interpolation kernel (mean 1, smooth variation).
            let b3 = store.find("cc.kernel.fc3.b").unwrap();
            let shifted = store.get(b3).map(|v| v + 1.0);
            store.set(b3, shifted);
            run_forward(&store, &conv, pts, &queries, feats)
        };
        let rel_gap = |a: &[f64], b: &[f64]| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            num / den
        };
        let gap_density = rel_gap(
            &run(Normalize::Density, &sparse, &f_sparse),
            &run(Normalize::Density, &dense, &f_dense),
        );
        let gap_raw = rel_gap(
            &run(Normalize::None, &sparse, &f_sparse),
            &run(Normalize::None, &dense, &f_dense),
        );
        assert!(gap_density < 0.10, "density-normalized gap too large: {gap_density}");
        assert!(gap_raw > 5.0 * gap_density, "raw sums should be far less stable: {gap_raw}");
    }

    #[test]
    fn auto_radius_bounds() {
        // 4 expected neighbors among n uniform points: n * (2r)^2 = 4.
        let r = auto_radius(400, 2, 4.0);
        assert!((r - 0.05).abs() < 1e-12);
        assert_eq!(auto_radius(1_000_000, 2, 4.0), 0.01, "clamped at the floor");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn prop_chunking_invariant(seed in 0u64..50, chunk in 1usize..40) {
            let (store, conv, sources, queries, feats) = setup(Normalize::Density, 4096, seed);
            let reference = run_forward(&store, &conv, &sources, &queries, &feats);
            let (store2, mut conv2, s2, q2, f2) = setup(Normalize::Density, 4096, seed);
            conv2.spec.chunk_size = chunk;
            let out = run_forward(&store2, &conv2, &s2, &q2, &f2);
            prop_assert_eq!(out, reference);
        }
    }
}
