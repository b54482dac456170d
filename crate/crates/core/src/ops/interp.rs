//! Bilinear resizing and center cropping of spatial maps.
//!
//! Resizing uses corner-aligned sampling: output pixel `o` reads input coordinate
//! `o * (in - 1) / (out - 1)`, so the corner pixels of input and output coincide.

/// Output side for scaling `size` by `alpha`.
pub fn scaled_size(size: usize, alpha: f64) -> usize {
    (alpha * size as f64).round() as usize
}

/// Center-crop offset and side for keeping ratio `beta` of `size`.
pub fn crop_window(size: usize, beta: f64) -> (usize, usize) {
    let side = (beta * size as f64).round() as usize;
    let side = side.min(size);
    ((size - side) / 2, side)
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    (0..out_len)
        .map(|o| {
            let src = if out_len > 1 {
                o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for y in &ty {
            for xt in &tx {
                let top = src[y.lo * w + xt.lo] * (1.0 - xt.frac) + src[y.lo * w + xt.hi] * xt.frac;
                let bot = src[y.hi * w + xt.lo] * (1.0 - xt.frac) + src[y.hi * w + xt.hi] * xt.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    out
}

pub fn resize_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut d = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut d[p * h * w..][..h * w];
        let g = &grad_out[p * oh * ow..][..oh * ow];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, xt) in tx.iter().enumerate() {
                let v = g[yi * ow + xi];
                dst[y.lo * w + xt.lo] += v * (1.0 - y.frac) * (1.0 - xt.frac);
                dst[y.lo * w + xt.hi] += v * (1.0 - y.frac) * xt.frac;
                dst[y.hi * w + xt.lo] += v * y.frac * (1.0 - xt.frac);
                dst[y.hi * w + xt.hi] += v * y.frac * xt.frac;
            }
        }
    }
    d
}

pub fn crop_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    (ch, cw): (usize, usize),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * ch * cw);
    for p in 0..planes {
        for y in 0..ch {
            let row = p * h * w + (top + y) * w + left;
            out.extend_from_slice(&x[row..row + cw]);
        }
    }
    out
}

pub fn crop_backward(
    grad_out: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    (ch, cw): (usize, usize),
) -> Vec<f64> {
    let mut d = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ch {
            let row = p * h * w + (top + y) * w + left;
            d[row..row + cw].copy_from_slice(&grad_out[(p * ch + y) * cw..][..cw]);
        }
    }
    d
}
