//! Gray-Scott reaction-diffusion on a periodic unit square:
//! `dA/dt = dA_coef * lap(A) - A B^2 + feed (1 - A)`,
//! `dB/dt = dB_coef * lap(B) + A B^2 - (feed + kill) B`,
//! advanced by explicit Euler with the 5-point periodic Laplacian.

use rand::Rng;

use super::DatagenError;

#[derive(Debug, Clone, Copy)]
pub struct GrayScottConfig {
    /// Grid extent per side; cells are `1/n` wide.
    pub n: usize,
    pub delta_a: f64,
    pub delta_b: f64,
    pub feed: f64,
    pub kill: f64,
    pub dt: f64,
    /// Euler steps between saved frames.
    pub substeps: usize,
    pub frames: usize,
    /// Steps run before the first saved frame so patterns are developed.
    pub burn_in: usize,
}

impl Default for GrayScottConfig {
    fn default() -> Self {
        GrayScottConfig {
            n: 64,
            delta_a: 2e-5,
            delta_b: 1e-5,
            feed: 0.04,
            kill: 0.06,
            dt: 1.0,
            substeps: 250,
            frames: 40,
            burn_in: 500,
        }
    }
}

impl GrayScottConfig {
    /// Explicit-scheme stability bound with a 0.9 safety factor.
    pub fn max_stable_dt(&self) -> f64 {
        let h = 1.0 / self.n as f64;
        0.9 * h * h / (4.0 * self.delta_a.max(self.delta_b))
    }
}

/// One explicit Euler step; fields are row-major `n x n`.
pub fn gray_scott_step(a: &[f64], b: &[f64], cfg: &GrayScottConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.n;
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * n);
    debug_assert!(cfg.dt <= cfg.max_stable_dt(), "dt violates the diffusion stability bound");
    let inv_h2 = (n * n) as f64;
    let mut a2 = vec![0.0; n * n];
    let mut b2 = vec![0.0; n * n];
    for i in 0..n {
        let up = if i == 0 { n - 1 } else { i - 1 } * n;
        let down = if i == n - 1 { 0 } else { i + 1 } * n;
        let row = i * n;
        for j in 0..n {
            let left = row + if j == 0 { n - 1 } else { j - 1 };
            let right = row + if j == n - 1 { 0 } else { j + 1 };
            let c = row + j;
            let lap_a = (a[up + j] + a[down + j] + a[left] + a[right] - 4.0 * a[c]) * inv_h2;
            let lap_b = (b[up + j] + b[down + j] + b[left] + b[right] - 4.0 * b[c]) * inv_h2;
            let react = a[c] * b[c] * b[c];
            a2[c] = a[c] + cfg.dt * (cfg.delta_a * lap_a - react + cfg.feed * (1.0 - a[c]));
            b2[c] = b[c] + cfg.dt * (cfg.delta_b * lap_b + react - (cfg.feed + cfg.kill) * b[c]);
        }
    }
    (a2, b2)
}

/// Homogeneous `A = 1, B = 0` state seeded with a few random square blobs of
/// activator; the classic way to kick off pattern formation.
pub fn gray_scott_init<R: Rng>(cfg: &GrayScottConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.n;
    let mut a = vec![1.0; n * n];
    let mut b = vec![0.0; n * n];
    let blobs = rng.gen_range(4..=10);
    let side = (n / 10).max(2);
    for _ in 0..blobs {
        let ci = rng.gen_range(0..n);
        let cj = rng.gen_range(0..n);
        for di in 0..side {
            for dj in 0..side {
                let idx = ((ci + di) % n) * n + (cj + dj) % n;
                a[idx] = 0.5;
                b[idx] = 0.25 + 0.05 * rng.gen::<f64>();
            }
        }
    }
    (a, b)
}

/// Full trajectory: burn-in, then `frames` saved states of both channels.
/// Frames are `[n*n, 2]` row-major with channel order `(A, B)`.
pub fn gray_scott_trajectory<R: Rng>(
    cfg: &GrayScottConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, DatagenError> {
    let (mut a, mut b) = gray_scott_init(cfg, rng);
    for _ in 0..cfg.burn_in {
        (a, b) = gray_scott_step(&a, &b, cfg);
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    for frame in 0..cfg.frames {
        if !(a.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())) {
            return Err(DatagenError::NonFinite { frame });
        }
        let mut packed = Vec::with_capacity(a.len() * 2);
        for (&av, &bv) in a.iter().zip(&b) {
            packed.push(av);
            packed.push(bv);
        }
        frames.push(packed);
        if frame + 1 < cfg.frames {
            for _ in 0..cfg.substeps {
                (a, b) = gray_scott_step(&a, &b, cfg);
            }
        }
    }
    Ok(frames)
}
