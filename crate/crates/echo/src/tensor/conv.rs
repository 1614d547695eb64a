//! Lowering of causal 3D convolutions to GEMM via im2col.
//!
//! Field layout is `[T, H, W, C]` row-major. Time is padded on the left only
//! (`kt - 1` zeros), so an output frame never reads a later input frame.
//! Space is zero-padded symmetrically by `k / 2`.

use super::Scalar;

/// Static description of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvSpec {
    /// Number of weight rows: one per (kt, kh, kw, cin) tap.
    pub fn weight_rows(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    /// Output shape for an input `[t, h, w, cin]`.
    pub fn out_shape(&self, in_shape: &[usize]) -> [usize; 4] {
        assert_eq!(in_shape.len(), 4, "conv input must be [T,H,W,C]");
        assert_eq!(in_shape[3], self.cin, "conv input channels");
        let t = (in_shape[0] - 1) / self.st + 1;
        let h = (in_shape[1] + 2 * (self.kh / 2) - self.kh) / self.sh + 1;
        let w = (in_shape[2] + 2 * (self.kw / 2) - self.kw) / self.sw + 1;
        [t, h, w, self.cout]
    }
}

/// Patch matrix `[out_t*out_h*out_w, weight_rows]` for `x` of shape `in_shape`.
pub fn im2col<S: Scalar>(x: &[S], in_shape: &[usize], spec: &ConvSpec) -> Vec<S> {
    let (t_in, h_in, w_in, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let out = spec.out_shape(in_shape);
    let k = spec.weight_rows();
    let mut col = vec![S::zero(); out[0] * out[1] * out[2] * k];
    let (ph, pw) = (spec.kh / 2, spec.kw / 2);
    let mut row = 0usize;
    for ot in 0..out[0] {
        // Causal: output ot reads inputs [ot*st - (kt-1), ot*st].
        let t_base = (ot * spec.st) as isize - (spec.kt as isize - 1);
        for oh in 0..out[1] {
            let h_base = (oh * spec.sh) as isize - ph as isize;
            for ow in 0..out[2] {
                let w_base = (ow * spec.sw) as isize - pw as isize;
                let dst_row = &mut col[row * k..(row + 1) * k];
                let mut dst = 0usize;
                for dt in 0..spec.kt {
                    let ti = t_base + dt as isize;
                    for dh in 0..spec.kh {
                        let hi = h_base + dh as isize;
                        for dw in 0..spec.kw {
                            let wi = w_base + dw as isize;
                            if ti >= 0
                                && (ti as usize) < t_in
                                && hi >= 0
                                && (hi as usize) < h_in
                                && wi >= 0
                                && (wi as usize) < w_in
                            {
                                let src =
                                    ((ti as usize * h_in + hi as usize) * w_in + wi as usize) * c;
                                dst_row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                            }
                            dst += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto the input gradient.
pub fn col2im<S: Scalar>(dcol: &[S], in_shape: &[usize], spec: &ConvSpec, dx: &mut [S]) {
    let (t_in, h_in, w_in, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let out = spec.out_shape(in_shape);
    let k = spec.weight_rows();
    let (ph, pw) = (spec.kh / 2, spec.kw / 2);
    let mut row = 0usize;
    for ot in 0..out[0] {
        let t_base = (ot * spec.st) as isize - (spec.kt as isize - 1);
        for oh in 0..out[1] {
            let h_base = (oh * spec.sh) as isize - ph as isize;
            for ow in 0..out[2] {
                let w_base = (ow * spec.sw) as isize - pw as isize;
                let src_row = &dcol[row * k..(row + 1) * k];
                let mut src = 0usize;
                for dt in 0..spec.kt {
                    let ti = t_base + dt as isize;
                    for dh in 0..spec.kh {
                        let hi = h_base + dh as isize;
                        for dw in 0..spec.kw {
                            let wi = w_base + dw as isize;
                            if ti >= 0
                                && (ti as usize) < t_in
                                && hi >= 0
                                && (hi as usize) < h_in
                                && wi >= 0
                                && (wi as usize) < w_in
                            {
                                let dst =
                                    ((ti as usize * h_in + hi as usize) * w_in + wi as usize) * c;
                                for ch in 0..c {
                                    dx[dst + ch] = dx[dst + ch] + src_row[src + ch];
                                }
                            }
                            src += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Zero-stuffing upsample: `out[i*ft, j*fh, l*fw, :] = x[i, j, l, :]`, all other
/// positions zero. `target` may exceed `(n-1)*f + 1` by up to `f - 1` per axis,
/// which appends trailing zeros so strided convolutions invert exactly.
pub fn upsample_zeros<S: Scalar>(
    x: &[S],
    in_shape: &[usize],
    factors: &[usize; 3],
    target: &[usize; 3],
) -> Vec<S> {
    let (t, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    for a in 0..3 {
        let lo = (in_shape[a] - 1) * factors[a] + 1;
        assert!(
            target[a] >= lo && target[a] < lo + factors[a],
            "upsample target {:?} unreachable from {:?} with factors {:?}",
            target,
            &in_shape[..3],
            factors
        );
    }
    let mut out = vec![S::zero(); target[0] * target[1] * target[2] * c];
    for it in 0..t {
        for ih in 0..h {
            for iw in 0..w {
                let src = ((it * h + ih) * w + iw) * c;
                let dst = ((it * factors[0] * target[1] + ih * factors[1]) * target[2]
                    + iw * factors[2])
                    * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Gradient of [`upsample_zeros`]: gather the strided positions.
pub fn upsample_zeros_grad<S: Scalar>(
    dy: &[S],
    in_shape: &[usize],
    factors: &[usize; 3],
    target: &[usize; 3],
) -> Vec<S> {
    let (t, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = vec![S::zero(); t * h * w * c];
    for it in 0..t {
        for ih in 0..h {
            for iw in 0..w {
                let dst = ((it * h + ih) * w + iw) * c;
                let src = ((it * factors[0] * target[1] + ih * factors[1]) * target[2]
                    + iw * factors[2])
                    * c;
                dx[dst..dst + c].copy_from_slice(&dy[src..src + c]);
            }
        }
    }
    dx
}
