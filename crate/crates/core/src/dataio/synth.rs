//! Synthetic face-like images with known landmarks and AU labels.
//!
//! Each face is an ellipse carrying dark blobs for brows, eyes, nose and mouth. Every AU
//! deforms part of that geometry:
//!
//! | AU | effect |
//! |----|--------|
//! | 1  | brows raised |
//! | 6  | eyes narrowed, cheeks brightened |
//! | 12 | lip corners pulled up and out |
//! | 26 | jaw dropped, mouth opened |
//!
//! Landmarks are the blob positions after deformation, so the labels are a deterministic
//! function of the rendered geometry. Output is a pure function of [`SynthConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, Dataset, Manifest, SampleRecord};
use crate::attention::RuleTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOY_LANDMARKS: usize = 10;
pub const TOY_AUS: usize = 4;
pub const TOY_AU_IDS: [u32; TOY_AUS] = [1, 6, 12, 26];
/// Outer eye corners of the toy layout.
pub const TOY_EYE_CORNERS: [usize; 2] = [2, 5];

/// Neutral layout in unit coordinates: brows (0, 1), left eye outer/inner (2, 3), right eye
/// inner/outer (4, 5), nose tip (6), lip corners (7, 8), lower lip (9).
const NEUTRAL: [(f64, f64); TOY_LANDMARKS] = [
    (0.32, 0.30),
    (0.68, 0.30),
    (0.22, 0.42),
    (0.42, 0.42),
    (0.58, 0.42),
    (0.78, 0.42),
    (0.50, 0.57),
    (0.36, 0.72),
    (0.64, 0.72),
    (0.50, 0.78),
];

const TOY_RULES: &str = "\
# au  anchor_a dx_a dy_a  anchor_b dx_b dy_b
1   0    0    -0.1   1    0    -0.1
6   2+3  0    0.2    4+5  0    0.2
12  7    0    0      8    0    0
26  9    -0.1 0      9    0.1  0
";

const TOY_FLIP: &str = "0 1\n2 5\n3 4\n7 8\n";

/// AU center rules for the toy layout.
pub fn toy_rules() -> RuleTable {
    RuleTable::parse(TOY_RULES, Path::new("toy_rules.txt")).expect("toy rules parse")
}

/// Left/right landmark pairs of the toy layout, in the flip-table text format.
pub fn toy_flip_text() -> &'static str {
    TOY_FLIP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub frames: usize,
    /// Image side in pixels.
    pub side: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Occurrence probability of each AU.
    pub rates: [f64; TOY_AUS],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 8,
            frames: 8,
            side: 32,
            seed: 0,
            noise: 0.01,
            rates: [0.5, 0.4, 0.5, 0.35],
        }
    }
}

/// A generated dataset with its manifest records and empirical AU rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    pub records: Vec<SampleRecord>,
    pub rates: Vec<f64>,
}

struct Subject {
    shift: (f64, f64),
    scale: f64,
    skin: [f64; 3],
}

fn gauss(dx: f64, dy: f64, sx: f64, sy: f64) -> f64 {
    (-0.5 * ((dx / sx).powi(2) + (dy / sy).powi(2))).exp()
}

fn landmarks(subject: &Subject, labels: &[f64], jitter: (f64, f64)) -> Vec<(f64, f64)> {
    let mut p = NEUTRAL.to_vec();
    if labels[0] > 0.5 {
        p[0].1 -= 0.07;
        p[1].1 -= 0.07;
    }
    if labels[1] > 0.5 {
        for q in &mut p[2..6] {
            q.1 -= 0.02;
        }
    }
    if labels[2] > 0.5 {
        p[7].0 -= 0.05;
        p[7].1 -= 0.05;
        p[8].0 += 0.05;
        p[8].1 -= 0.05;
    }
    if labels[3] > 0.5 {
        p[9].1 += 0.08;
    }
    p.iter()
        .map(|&(x, y)| {
            (
                0.5 + (x - 0.5) * subject.scale + subject.shift.0 + jitter.0,
                0.5 + (y - 0.5) * subject.scale + subject.shift.1 + jitter.1,
            )
        })
        .collect()
}

fn render(side: usize, subject: &Subject, pts: &[(f64, f64)], labels: &[f64]) -> Vec<f64> {
    let s = side as f64;
    let plane = side * side;
    let mut img = vec![0.0; 3 * plane];
    let center = (0.5 + subject.shift.0, 0.55 + subject.shift.1);
    let radii = (0.40 * subject.scale, 0.48 * subject.scale);
    let eye_sy = if labels[1] > 0.5 { 0.012 } else { 0.028 };
    let mouth_sy = if labels[3] > 0.5 { 0.05 } else { 0.02 };
    for row in 0..side {
        for col in 0..side {
            let (x, y) = ((col as f64 + 0.5) / s, (row as f64 + 0.5) / s);
            let inside =
                ((x - center.0) / radii.0).powi(2) + ((y - center.1) / radii.1).powi(2) <= 1.0;
            let mut rgb = if inside { subject.skin } else { [0.15; 3] };
            let mut dark = 0.0;
            for &b in &pts[0..2] {
                dark += gauss(x - b.0, y - b.1, 0.07, 0.02);
            }
            for (a, b) in [(2, 3), (4, 5)] {
                let m = ((pts[a].0 + pts[b].0) / 2.0, (pts[a].1 + pts[b].1) / 2.0);
                dark += gauss(x - m.0, y - m.1, 0.07, eye_sy);
                if labels[1] > 0.5 {
                    rgb[0] += 0.25 * gauss(x - m.0, y - m.1 - 0.12, 0.06, 0.04);
                }
            }
            dark += 0.6 * gauss(x - pts[6].0, y - pts[6].1, 0.025, 0.03);
            let mouth = (
                (pts[7].0 + pts[8].0) / 2.0,
                (pts[7].1 + pts[8].1 + 2.0 * pts[9].1) / 4.0,
            );
            let half = (pts[8].0 - pts[7].0) / 2.0;
            dark += gauss(x - mouth.0, y - mouth.1, half * 0.7, mouth_sy);
            for &c in &pts[7..9] {
                dark += 0.7 * gauss(x - c.0, y - c.1, 0.025, 0.025);
            }
            let keep = (1.0 - 0.8 * dark.min(1.0)).max(0.0);
            for (c, v) in rgb.iter().enumerate() {
                img[c * plane + row * side + col] = v * keep;
            }
        }
    }
    img
}

/// Generates `subjects x frames` samples. Every random draw comes from one generator seeded
/// with `cfg.seed`, in subject-major order.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.subjects == 0 || cfg.frames == 0 || cfg.side < 8 {
        return Err(Error::Config(format!(
            "synthetic dataset needs subjects, frames > 0 and side >= 8, got {}x{} at {}",
            cfg.subjects, cfg.frames, cfg.side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let side = cfg.side;
    let s = side as f64;
    let mut data = Dataset::default();
    let mut records = Vec::new();
    for si in 0..cfg.subjects {
        let tone = rng.random_range(0.55..0.8);
        let subject = Subject {
            shift: (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
            scale: rng.random_range(0.94..1.06),
            skin: [
                tone,
                tone * rng.random_range(0.7..0.85),
                tone * rng.random_range(0.55..0.7),
            ],
        };
        for fi in 0..cfg.frames {
            let labels: Vec<f64> = cfg
                .rates
                .iter()
                .map(|&p| {
                    if rng.random_bool(p.clamp(0.0, 1.0)) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let jitter = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let pts = landmarks(&subject, &labels, jitter);
            let mut img = render(side, &subject, &pts, &labels);
            for v in img.iter_mut() {
                let n = if cfg.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                // Quantized so that the in-memory image equals its 8-bit file.
                *v = ((*v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
            let coords: Vec<f64> = pts
                .iter()
                .flat_map(|&(x, y)| [x * s - 0.5, y * s - 0.5])
                .collect();
            data.images.push(Tensor::new(&[3, side, side], img)?);
            data.landmarks.push(coords.clone());
            data.labels.push(labels.clone());
            data.subjects.push(format!("s{si:02}"));
            records.push(SampleRecord {
                image: PathBuf::from(format!("images/s{si:02}_f{fi:02}.ppm")),
                subject: format!("s{si:02}"),
                landmarks: coords,
                labels,
            });
        }
    }
    let rates = data.rates();
    Ok(SynthData {
        dataset: data,
        records,
        rates,
    })
}

/// Writes `manifest.csv`, `images/`, `rates.txt`, `rules.txt` and `flip.txt` under `dir`.
pub fn write_synth(dir: &Path, synth: &SynthData) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (r, img) in synth.records.iter().zip(&synth.dataset.images) {
        super::save_ppm(&dir.join(&r.image), img)?;
    }
    let manifest = Manifest {
        base: dir.to_path_buf(),
        au_ids: TOY_AU_IDS.to_vec(),
        n_align: TOY_LANDMARKS,
        records: synth.records.clone(),
    };
    let path = dir.join("manifest.csv");
    write_manifest(&path, &manifest)?;
    let rates: String = TOY_AU_IDS
        .iter()
        .zip(&synth.rates)
        .map(|(id, r)| format!("au{id} {r}\n"))
        .collect();
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rates.txt", &rates)?;
    write("rules.txt", TOY_RULES)?;
    write("flip.txt", TOY_FLIP)?;
    Ok(path)
}
