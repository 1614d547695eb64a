//! Point sets, the regular latent grid, and radius queries between them.
//!
//! Coordinates are normalized to the unit box `[0, 1]^D` and ordered like the
//! field arrays: coordinate `d` of grid node index `(i_0, .., i_{D-1})` is
//! `(i_d + 0.5) / extent_d`, with node ids row-major (last index fastest).
//! A point sampled from field cell `(r, c)` of an `[H, W]` grid therefore has
//! coordinates `((r + 0.5) / H, (c + 0.5) / W)`.

use std::ops::Range;

/// Scattered observation locations in `[0, 1]^D`, stored flat row-major.
#[derive(Debug, Clone)]
pub struct PointSet {
    coords: Vec<f64>,
    dim: usize,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && dim <= 3, "supported dimensions are 1..=3, got {dim}");
        assert_eq!(coords.len() % dim, 0, "coordinate buffer not a multiple of dim");
        PointSet { coords, dim }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Keep the points at the given (sorted or unsorted) indices.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            coords.extend_from_slice(self.point(i));
        }
        PointSet { coords, dim: self.dim }
    }
}

/// Regular grid of latent nodes over the unit box; nodes sit at cell centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegularGrid {
    extents: Vec<usize>,
}

impl RegularGrid {
    pub fn new(extents: &[usize]) -> Self {
        assert!(!extents.is_empty() && extents.len() <= 3, "grid rank must be 1..=3");
        assert!(extents.iter().all(|&e| e > 0), "zero grid extent");
        RegularGrid { extents: extents.to_vec() }
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node position, row-major node id.
    pub fn node(&self, mut id: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        for d in (0..self.extents.len()).rev() {
            let e = self.extents[d];
            out[d] = ((id % e) as f64 + 0.5) / e as f64;
            id /= e;
        }
    }

    /// All node positions as a point set, in node-id order.
    pub fn to_points(&self) -> PointSet {
        let d = self.dim();
        let mut coords = vec![0.0; self.len() * d];
        let mut buf = vec![0.0; d];
        for id in 0..self.len() {
            self.node(id, &mut buf);
            coords[id * d..(id + 1) * d].copy_from_slice(&buf);
        }
        PointSet::new(d, coords)
    }
}

/// One point returned by a radius query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    /// Squared Euclidean distance to the query center.
    pub d2: f64,
}

/// Uniform spatial hash over the unit box. Bucket width is at least the query
/// radius, so any radius ball is covered by the 3^D block of cells around the
/// center. Queries return points inside the l-infinity ball of the given
/// radius; when capped, the nearest by Euclidean distance win, ties broken by
/// ascending point id, so results are deterministic.
pub struct NeighborIndex<'a> {
    points: &'a PointSet,
    cells_per_dim: usize,
    radius: f64,
    buckets: Vec<Vec<u32>>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(points: &'a PointSet, radius: f64) -> Self {
        assert!(radius > 0.0 && radius.is_finite(), "radius must be positive, got {radius}");
        // floor(1/r) cells of width >= r each; cap the grid so tiny radii do
        // not explode memory.
        let cells_per_dim = ((1.0 / radius).floor() as usize).clamp(1, 256);
        let dim = points.dim();
        let n_buckets = cells_per_dim.pow(dim as u32);
        let mut buckets = vec![Vec::new(); n_buckets];
        for i in 0..points.len() {
            let b = bucket_of(points.point(i), cells_per_dim);
            buckets[b].push(i as u32);
        }
        NeighborIndex { points, cells_per_dim, radius, buckets }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Points with `max_d |x_d - center_d| <= radius`, nearest first, at most
    /// `max_neighbors` of them.
    pub fn query(&self, center: &[f64], max_neighbors: usize, out: &mut Vec<Neighbor>) {
        out.clear();
        if max_neighbors == 0 {
            return;
        }
        let dim = self.points.dim();
        debug_assert_eq!(center.len(), dim);
        let nc = self.cells_per_dim;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for d in 0..dim {
            let c = cell_coord(center[d], nc);
            lo[d] = c.saturating_sub(1);
            hi[d] = (c + 1).min(nc - 1);
        }
        // Fixed lexicographic cell order keeps candidate order deterministic.
        let visit = |bucket: usize, out: &mut Vec<Neighbor>| {
            for &id in &self.buckets[bucket] {
                let p = self.points.point(id as usize);
                let mut linf: f64 = 0.0;
                let mut d2 = 0.0;
                for d in 0..dim {
                    let diff = center[d] - p[d];
                    linf = linf.max(diff.abs());
                    d2 += diff * diff;
                }
                if linf <= self.radius {
                    out.push(Neighbor { id, d2 });
                }
            }
        };
        match dim {
            1 => {
                for x in lo[0]..=hi[0] {
                    visit(x, out);
                }
            }
            2 => {
                for x in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        visit(x * nc + y, out);
                    }
                }
            }
            _ => {
                for x in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        for z in lo[2]..=hi[2] {
                            visit((x * nc + y) * nc + z, out);
                        }
                    }
                }
            }
        }
        if out.len() > max_neighbors {
            out.sort_unstable_by(|a, b| {
                a.d2.partial_cmp(&b.d2).unwrap().then(a.id.cmp(&b.id))
            });
            out.truncate(max_neighbors);
        }
        // Stable id order within the kept set makes downstream reduction
        // order independent of the sort.
        out.sort_unstable_by_key(|n| n.id);
    }
}

fn cell_coord(x: f64, cells: usize) -> usize {
    let c = (x * cells as f64).floor();
    (c.max(0.0) as usize).min(cells - 1)
}

fn bucket_of(p: &[f64], cells: usize) -> usize {
    let mut b = 0usize;
    for &x in p {
        b = b * cells + cell_coord(x, cells);
    }
    b
}

/// Split `0..total` into consecutive chunks of at most `chunk` items.
/// Processing queries chunk by chunk bounds peak memory; results must not
/// depend on the chunk size, which the convolution tests assert.
pub fn chunk_ranges(total: usize, chunk: usize) -> impl Iterator<Item = Range<usize>> {
    assert!(chunk > 0, "chunk size must be positive");
    (0..total.div_ceil(chunk)).map(move |i| i * chunk..((i + 1) * chunk).min(total))
}
