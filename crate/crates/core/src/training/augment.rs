//! Similarity-transform, crop and flip augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::interp;
use crate::tensor::Tensor;

/// Left/right landmark correspondences used by horizontal flips.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipTable {
    pairs: Vec<(usize, usize)>,
}

impl FlipTable {
    /// One `i j` pair per line; `#` starts a comment. Unlisted landmarks map to themselves.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(format!("bad index '{t}'"))))
                .collect::<Result<_>>()?;
            match nums[..] {
                [a, b] if a != b => pairs.push((a, b)),
                _ => return Err(err("expected two distinct indices".into())),
            }
        }
        let mut seen: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                msg: "an index appears in more than one pair".into(),
            });
        }
        Ok(FlipTable { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Table for the 49-landmark layout.
    pub fn default_49() -> Self {
        Self::parse(
            include_str!("../../config/flip_49.txt"),
            Path::new("flip_49.txt"),
        )
        .expect("bundled flip table parses")
    }

    pub fn toy() -> Self {
        Self::parse(
            crate::dataio::synth::toy_flip_text(),
            Path::new("toy_flip.txt"),
        )
        .expect("toy flip table parses")
    }

    /// `perm[i]` is the landmark that becomes index `i` after flipping.
    pub fn permutation(&self, n: usize) -> Result<Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        for &(a, b) in &self.pairs {
            if a >= n || b >= n {
                return Err(Error::Config(format!(
                    "flip pair ({a}, {b}) out of range for {n} landmarks"
                )));
            }
            perm.swap(a, b);
        }
        Ok(perm)
    }
}

/// Ranges of the random similarity transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum translation as a fraction of the side.
    pub max_translation: f64,
    /// Side of the transformed face relative to the network input (200/176 at full scale).
    pub margin: f64,
    pub flip: bool,
    pub crop_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 15.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_translation: 0.05,
            margin: 200.0 / 176.0,
            flip: true,
            crop_retries: 10,
        }
    }
}

/// A 2x3 affine map `p' = A p + t` in pixel coordinates (x to the right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Rotation by `angle` radians and uniform `scale` about `center`, then translation.
    pub fn about(center: (f64, f64), angle: f64, scale: f64, shift: (f64, f64)) -> Self {
        let (s, c) = angle.sin_cos();
        let a = [[scale * c, -scale * s], [scale * s, scale * c]];
        let t = [
            center.0 - a[0][0] * center.0 - a[0][1] * center.1 + shift.0,
            center.1 - a[1][0] * center.0 - a[1][1] * center.1 + shift.1,
        ];
        Similarity { a, t }
    }

    /// Uniform scaling of both axes by `sx`, `sy` (pixel-corner aligned).
    pub fn stretch(sx: f64, sy: f64) -> Self {
        Similarity {
            a: [[sx, 0.0], [0.0, sy]],
            t: [0.0, 0.0],
        }
    }

    pub fn then(&self, next: &Similarity) -> Similarity {
        let a = &next.a;
        Similarity {
            a: [
                [
                    a[0][0] * self.a[0][0] + a[0][1] * self.a[1][0],
                    a[0][0] * self.a[0][1] + a[0][1] * self.a[1][1],
                ],
                [
                    a[1][0] * self.a[0][0] + a[1][1] * self.a[1][0],
                    a[1][0] * self.a[0][1] + a[1][1] * self.a[1][1],
                ],
            ],
            t: [
                a[0][0] * self.t[0] + a[0][1] * self.t[1] + next.t[0],
                a[1][0] * self.t[0] + a[1][1] * self.t[1] + next.t[1],
            ],
        }
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Result<Similarity> {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::Numeric("singular transform".into()));
        }
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        Ok(Similarity {
            a: inv,
            t: [
                -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
                -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
            ],
        })
    }
}

/// Resamples a `[C, H, W]` image into an `out_h x out_w` grid through `transform` (source to
/// destination) with bilinear interpolation and zero fill outside the source.
pub fn warp(image: &Tensor, transform: &Similarity, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::shape(
                "warp",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    let inv = transform.inverse()?;
    let src = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for v in 0..out_h {
        for u in 0..out_w {
            let (x, y) = inv.apply((u as f64, v as f64));
            if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
                continue;
            }
            let x = x.clamp(0.0, (w - 1) as f64);
            let y = y.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * out_h + v) * out_w + u] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Mirrors a `[C, H, W]` image horizontally and its landmarks, reindexing with `perm`.
pub fn flip(image: &Tensor, landmarks: &[f64], perm: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::shape(
                "flip",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    if landmarks.len() != 2 * perm.len() {
        return Err(Error::shape(
            "flip",
            "landmark count differs from the flip table size",
        ));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    let mut lm = vec![0.0; landmarks.len()];
    for (i, &j) in perm.iter().enumerate() {
        lm[2 * i] = (w - 1) as f64 - landmarks[2 * j];
        lm[2 * i + 1] = landmarks[2 * j + 1];
    }
    Ok((Tensor::new(&[c, h, w], out)?, lm))
}

fn map_landmarks(t: &Similarity, landmarks: &[f64]) -> Vec<f64> {
    landmarks
        .chunks_exact(2)
        .flat_map(|p| {
            let (x, y) = t.apply((p[0], p[1]));
            [x, y]
        })
        .collect()
}

/// Deterministic preprocessing: scales an image of any size to `side x side`.
pub fn fit(image: &Tensor, landmarks: &[f64], side: usize) -> Result<(Tensor, Vec<f64>)> {
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        s => {
            return Err(Error::shape(
                "fit",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    if h == side && w == side {
        return Ok((image.clone(), landmarks.to_vec()));
    }
    let t = Similarity::stretch(
        (side - 1) as f64 / (w.max(2) - 1) as f64,
        (side - 1) as f64 / (h.max(2) - 1) as f64,
    );
    Ok((warp(image, &t, side, side)?, map_landmarks(&t, landmarks)))
}

/// Random similarity transform into a `margin * side` square, random `side x side` crop
/// keeping every landmark inside (center crop after `crop_retries` failures), and optional flip.
pub fn augment<R: Rng>(
    image: &Tensor,
    landmarks: &[f64],
    side: usize,
    cfg: &AugmentConfig,
    perm: &[usize],
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    if !cfg.enabled {
        return fit(image, landmarks, side);
    }
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        s => {
            return Err(Error::shape(
                "augment",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    let big = interp::scaled_size(side, cfg.margin).max(side);
    let base = Similarity::stretch(
        (big - 1) as f64 / (w.max(2) - 1) as f64,
        (big - 1) as f64 / (h.max(2) - 1) as f64,
    );
    let centre = ((big - 1) as f64 / 2.0, (big - 1) as f64 / 2.0);
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let scale = if cfg.max_scale > cfg.min_scale {
        rng.random_range(cfg.min_scale..cfg.max_scale)
    } else {
        cfg.min_scale
    };
    let max_t = cfg.max_translation * big as f64;
    let shift = (
        rng.random_range(-1.0..=1.0) * max_t,
        rng.random_range(-1.0..=1.0) * max_t,
    );
    let t = base.then(&Similarity::about(centre, angle, scale, shift));
    let warped = warp(image, &t, big, big)?;
    let lm = map_landmarks(&t, landmarks);

    let slack = big - side;
    let fits = |top: usize, left: usize| {
        lm.chunks_exact(2).all(|p| {
            let (x, y) = (p[0] - left as f64, p[1] - top as f64);
            x >= 0.0 && y >= 0.0 && x <= (side - 1) as f64 && y <= (side - 1) as f64
        })
    };
    let mut offset = None;
    for _ in 0..cfg.crop_retries {
        let (top, left) = (rng.random_range(0..=slack), rng.random_range(0..=slack));
        if fits(top, left) {
            offset = Some((top, left));
            break;
        }
    }
    let (top, left) = offset.unwrap_or((slack / 2, slack / 2));
    let cropped = interp::crop_forward(warped.data(), 3, (big, big), (top, left), (side, side));
    let mut lm: Vec<f64> = lm
        .chunks_exact(2)
        .flat_map(|p| [p[0] - left as f64, p[1] - top as f64])
        .collect();
    let mut img = Tensor::new(&[3, side, side], cropped)?;
    if cfg.flip && rng.random_bool(0.5) {
        (img, lm) = flip(&img, &lm, perm)?;
    }
    Ok((img, lm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(
            &[c, h, w],
            (0..c * h * w).map(|i| i as f64 / 100.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_warp() {
        let img = ramp(3, 5, 4);
        assert_eq!(warp(&img, &Similarity::IDENTITY, 5, 4).unwrap(), img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(3, 4, 6);
        let lm = vec![1.0, 2.0, 3.5, 0.5, 5.0, 3.0];
        let perm = vec![1, 0, 2];
        let (a, la) = flip(&img, &lm, &perm).unwrap();
        assert_eq!(la, vec![1.5, 0.5, 4.0, 2.0, 0.0, 3.0]);
        let (b, lb) = flip(&a, &la, &perm).unwrap();
        assert_eq!((b, lb), (img, lm));
    }

    #[test]
    fn rotation_moves_pixels_with_landmarks() {
        // A single bright pixel goes where its coordinates are mapped.
        let mut img = Tensor::zeros(&[1, 9, 9]);
        img.set(&[0, 2, 6], 1.0);
        let t = Similarity::about((4.0, 4.0), std::f64::consts::FRAC_PI_2, 1.0, (0.0, 0.0));
        let out = warp(&img, &t, 9, 9).unwrap();
        let (x, y) = t.apply((6.0, 2.0));
        let (x, y) = (x.round() as usize, y.round() as usize);
        assert_eq!((x, y), (6, 6));
        assert!((out.get(&[0, y, x]) - 1.0).abs() < 1e-9);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = ramp(3, 8, 8);
        let lm = vec![1.0, 2.0];
        let cfg = AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            augment(&img, &lm, 8, &cfg, &[0], &mut rng).unwrap(),
            (img, lm)
        );
    }

    #[test]
    fn augmented_landmarks_stay_inside() {
        let img = ramp(3, 32, 32);
        let lm = vec![10.0, 12.0, 20.0, 12.0, 16.0, 22.0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig::default();
        for _ in 0..20 {
            let (out, l) = augment(&img, &lm, 32, &cfg, &[1, 0, 2], &mut rng).unwrap();
            assert_eq!(out.shape(), &[3, 32, 32]);
            assert!(l.iter().all(|&v| (0.0..=31.0).contains(&v)));
        }
    }

    #[test]
    fn flip_tables() {
        assert_eq!(
            FlipTable::toy().permutation(10).unwrap(),
            vec![1, 0, 5, 4, 3, 2, 6, 8, 7, 9]
        );
        let p = FlipTable::default_49().permutation(49).unwrap();
        assert!((0..49).all(|i| p[p[i]] == i));
        assert!(FlipTable::parse("1 1\n", Path::new("f")).is_err());
        assert!(FlipTable::parse("0 1\n1 2\n", Path::new("f")).is_err());
    }
}
