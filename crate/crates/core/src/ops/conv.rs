//! Cross-correlation over rectangular regions.
//!
//! A plain convolution is the single-region case. A patch-wise (region) convolution splits the
//! map into a grid of rectangles; each rectangle is convolved with its own weight set and its own
//! zero padding, so nothing leaks across patch borders.

use rayon::prelude::*;

use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// An input rectangle and the output rectangle it produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvRegion {
    pub input: Rect,
    pub output: Rect,
}

/// Dimensions shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Range of output columns `ox` whose input column `ox*s + k - p` lies inside `[0, len)`.
#[inline]
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // ox*s + k - p <= in_len - 1
    let hi = if in_len + pad < k + 1 {
        0
    } else {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

struct Plane<'a> {
    spec: &'a ConvSpec,
    region: ConvRegion,
    in_w: usize,
    out_w: usize,
}

impl Plane<'_> {
    /// Visits every (output index, input index, kernel index) triple of the region.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        let (ir, or) = (self.region.input, self.region.output);
        for ky in 0..self.spec.kernel_h {
            let (y_lo, y_hi) = valid_range(or.h, ir.h, ky, s, p);
            for kx in 0..self.spec.kernel_w {
                let (x_lo, x_hi) = valid_range(or.w, ir.w, kx, s, p);
                if x_lo >= x_hi {
                    continue;
                }
                let kidx = ky * self.spec.kernel_w + kx;
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - p;
                    let out_row = (or.y0 + oy) * self.out_w + or.x0;
                    let in_row = (ir.y0 + iy) * self.in_w + ir.x0 + x_lo * s + kx - p;
                    f(kidx, out_row + x_lo, in_row, x_hi - x_lo, s);
                }
            }
        }
    }
}

/// Forward pass. `weights` is `[R, O, C, kh, kw]` and `bias` is `[R, O]` for `R = regions.len()`.
pub fn forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
    dims: ConvDims,
    regions: &[ConvRegion],
) -> Vec<f64> {
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);
    let ksize = spec.kernel_h * spec.kernel_w;
    let in_plane = dims.in_h * dims.in_w;
    let out_plane = dims.out_h * dims.out_w;
    let mut out = vec![0.0; dims.batch * c_out * out_plane];
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(no, plane)| {
            let (n, o) = (no / c_out, no % c_out);
            for (r, region) in regions.iter().enumerate() {
                let b = bias[r * c_out + o];
                let or = region.output;
                for y in 0..or.h {
                    let row = (or.y0 + y) * dims.out_w + or.x0;
                    plane[row..row + or.w].fill(b);
                }
                let geo = Plane {
                    spec,
                    region: *region,
                    in_w: dims.in_w,
                    out_w: dims.out_w,
                };
                for c in 0..c_in {
                    let src = &input[(n * c_in + c) * in_plane..][..in_plane];
                    let kernel = &weights[((r * c_out + o) * c_in + c) * ksize..][..ksize];
                    geo.for_each(|k, out_at, in_at, len, s| {
                        let wv = kernel[k];
                        let dst = &mut plane[out_at..out_at + len];
                        if s == 1 {
                            for (d, &x) in dst.iter_mut().zip(&src[in_at..in_at + len]) {
                                *d += wv * x;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * src[in_at + j * s];
                            }
                        }
                    });
                }
            }
        });
    out
}

/// Gradients of a region convolution: `(d_input, d_weights, d_bias)`.
pub fn backward(
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    spec: &ConvSpec,
    dims: ConvDims,
    regions: &[ConvRegion],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);
    let ksize = spec.kernel_h * spec.kernel_w;
    let in_plane = dims.in_h * dims.in_w;
    let out_plane = dims.out_h * dims.out_w;
    let geo = |region: ConvRegion| Plane {
        spec,
        region,
        in_w: dims.in_w,
        out_w: dims.out_w,
    };

    let mut d_input = vec![0.0; dims.batch * c_in * in_plane];
    d_input
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(nc, plane)| {
            let (n, c) = (nc / c_in, nc % c_in);
            for (r, region) in regions.iter().enumerate() {
                let g = geo(*region);
                for o in 0..c_out {
                    let dout = &grad_out[(n * c_out + o) * out_plane..][..out_plane];
                    let kernel = &weights[((r * c_out + o) * c_in + c) * ksize..][..ksize];
                    g.for_each(|k, out_at, in_at, len, s| {
                        let wv = kernel[k];
                        for j in 0..len {
                            plane[in_at + j * s] += wv * dout[out_at + j];
                        }
                    });
                }
            }
        });

    let mut d_weights = vec![0.0; regions.len() * c_out * c_in * ksize];
    d_weights
        .par_chunks_mut(c_in * ksize)
        .enumerate()
        .for_each(|(ro, chunk)| {
            let (r, o) = (ro / c_out, ro % c_out);
            let g = geo(regions[r]);
            for n in 0..dims.batch {
                let dout = &grad_out[(n * c_out + o) * out_plane..][..out_plane];
                for c in 0..c_in {
                    let src = &input[(n * c_in + c) * in_plane..][..in_plane];
                    let dk = &mut chunk[c * ksize..][..ksize];
                    g.for_each(|k, out_at, in_at, len, s| {
                        let mut acc = 0.0;
                        for j in 0..len {
                            acc += dout[out_at + j] * src[in_at + j * s];
                        }
                        dk[k] += acc;
                    });
                }
            }
        });

    let mut d_bias = vec![0.0; regions.len() * c_out];
    for (r, region) in regions.iter().enumerate() {
        let or = region.output;
        for o in 0..c_out {
            let mut acc = 0.0;
            for n in 0..dims.batch {
                let dout = &grad_out[(n * c_out + o) * out_plane..][..out_plane];
                for y in 0..or.h {
                    let row = (or.y0 + y) * dims.out_w + or.x0;
                    acc += dout[row..row + or.w].iter().sum::<f64>();
                }
            }
            d_bias[r * c_out + o] = acc;
        }
    }
    (d_input, d_weights, d_bias)
}
