//! Evaluation metrics and subject-exclusive cross-validation splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Binary labels: `frames x n_au`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub frames: usize,
    pub n_au: usize,
    pub values: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(frames: usize, n_au: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != frames * n_au {
            return Err(Error::shape(
                "LabelMatrix",
                format!("{} values for {frames} x {n_au}", values.len()),
            ));
        }
        Ok(LabelMatrix {
            frames,
            n_au,
            values,
        })
    }

    /// Builds a matrix from rows of 0/1 (or probabilities, thresholded at 0.5).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_au = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_au) {
            return Err(Error::shape("LabelMatrix", "ragged rows"));
        }
        let values = rows.iter().flatten().map(|&v| u8::from(v >= 0.5)).collect();
        Self::new(rows.len(), n_au, values)
    }

    pub fn get(&self, frame: usize, au: usize) -> u8 {
        self.values[frame * self.n_au + au]
    }

    /// Stacks matrices frame-wise.
    pub fn concat(parts: &[LabelMatrix]) -> Result<Self> {
        let n_au = parts.first().map_or(0, |p| p.n_au);
        if parts.iter().any(|p| p.n_au != n_au) {
            return Err(Error::shape("LabelMatrix::concat", "AU counts differ"));
        }
        let values: Vec<u8> = parts
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect();
        Self::new(values.len() / n_au.max(1), n_au, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `2pr / (p + r)`; `None` when p, r or their sum is undefined or zero.
    pub fn f1_from_pr(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }

    /// `2TP / (2TP + FP + FN)`; `None` when the denominator is zero.
    pub fn f1_from_counts(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }
}

fn check_same(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<()> {
    if truth.frames != pred.frames || truth.n_au != pred.n_au {
        return Err(Error::shape(
            "metrics",
            format!(
                "truth is {}x{}, prediction {}x{}",
                truth.frames, truth.n_au, pred.frames, pred.n_au
            ),
        ));
    }
    Ok(())
}

pub fn confusion(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<Vec<Confusion>> {
    check_same(truth, pred)?;
    let mut out = vec![Confusion::default(); truth.n_au];
    for f in 0..truth.frames {
        for (k, c) in out.iter_mut().enumerate() {
            match (truth.get(f, k), pred.get(f, k)) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced F1 to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_au: Vec<AuF1>,
    pub average: f64,
}

/// Frame-based F1 per AU and averaged over AUs.
pub fn f1_frame(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<F1Report> {
    let per_au: Vec<AuF1> = confusion(truth, pred)?
        .iter()
        .map(|c| {
            let f1 = c.f1_from_pr();
            AuF1 {
                precision: c.precision().unwrap_or(0.0),
                recall: c.recall().unwrap_or(0.0),
                f1: f1.unwrap_or(0.0),
                undefined: f1.is_none(),
            }
        })
        .collect();
    let average = mean(per_au.iter().map(|a| a.f1));
    Ok(F1Report { per_au, average })
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub per_au: Vec<f64>,
    pub average: f64,
}

pub fn accuracy(truth: &LabelMatrix, pred: &LabelMatrix) -> Result<AccuracyReport> {
    let frames = truth.frames.max(1) as f64;
    let per_au: Vec<f64> = confusion(truth, pred)?
        .iter()
        .map(|c| (c.tp + c.tn) as f64 / frames)
        .collect();
    let average = mean(per_au.iter().copied());
    Ok(AccuracyReport { per_au, average })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    /// Mean of the per-face normalized errors, in percent.
    pub mean_error: f64,
    /// Percentage of faces whose normalized error exceeds 10%.
    pub failure_rate: f64,
    pub per_face: Vec<f64>,
    /// Faces skipped for a non-positive inter-ocular distance.
    pub skipped: usize,
}

/// Landmark error normalized by inter-ocular distance. Faces with `d_o <= 0` are skipped.
pub fn alignment_metrics(
    truth: &[Vec<f64>],
    pred: &[Vec<f64>],
    inter_ocular: &[f64],
) -> Result<AlignmentReport> {
    if truth.len() != pred.len() || truth.len() != inter_ocular.len() {
        return Err(Error::shape("alignment_metrics", "face counts differ"));
    }
    let mut per_face = Vec::with_capacity(truth.len());
    let mut skipped = 0;
    for ((t, p), &d) in truth.iter().zip(pred).zip(inter_ocular) {
        if t.len() != p.len() || t.len() % 2 != 0 || t.is_empty() {
            return Err(Error::shape("alignment_metrics", "landmark vectors differ"));
        }
        if !(d > 0.0) {
            log::warn!("skipping face with inter-ocular distance {d}");
            skipped += 1;
            continue;
        }
        let errs = t
            .chunks_exact(2)
            .zip(p.chunks_exact(2))
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]));
        per_face.push(100.0 * mean(errs.collect::<Vec<_>>().into_iter()) / d);
    }
    let failures = per_face.iter().filter(|&&e| e > 10.0).count();
    Ok(AlignmentReport {
        mean_error: mean(per_face.iter().copied()),
        failure_rate: if per_face.is_empty() {
            0.0
        } else {
            100.0 * failures as f64 / per_face.len() as f64
        },
        per_face,
        skipped,
    })
}

/// `1` where `intensity >= threshold`.
pub fn dichotomize(intensities: &[f64], threshold: f64) -> Vec<f64> {
    intensities
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect()
}

/// Assignment of subjects to folds.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    /// `(train, test)` frame indices for fold `fold`.
    pub fn indices(&self, subjects: &[String], fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..subjects.len()).partition(|&i| self.fold_of(&subjects[i]) != Some(fold))
    }
}

/// Shuffles distinct subjects with `seed` and deals them round-robin into `k` folds.
pub fn make_folds<S: AsRef<str>>(subjects: &[S], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut unique: Vec<String> = subjects.iter().map(|s| s.as_ref().to_string()).collect();
    unique.sort();
    unique.dedup();
    if k == 0 || k > unique.len() {
        return Err(Error::Config(format!(
            "cannot split {} subjects into {k} folds",
            unique.len()
        )));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = unique
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldSplit { k, assignment })
}

/// Scores cross-validation by concatenating every fold's frames and scoring once.
pub fn aggregate_folds(folds: &[(LabelMatrix, LabelMatrix)]) -> Result<(F1Report, AccuracyReport)> {
    let truth = LabelMatrix::concat(&folds.iter().map(|f| f.0.clone()).collect::<Vec<_>>())?;
    let pred = LabelMatrix::concat(&folds.iter().map(|f| f.1.clone()).collect::<Vec<_>>())?;
    Ok((f1_frame(&truth, &pred)?, accuracy(&truth, &pred)?))
}

/// Aligned text table with one column per AU plus `Avg`, followed by `key=value` lines.
pub fn report(
    au_ids: &[u32],
    f1: &F1Report,
    acc: &AccuracyReport,
    align: Option<&AlignmentReport>,
) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<10}", "metric");
    for id in au_ids {
        let _ = write!(s, "{:>8}", format!("AU{id}"));
    }
    let _ = writeln!(s, "{:>8}", "Avg");
    let mut row = |name: &str, vals: &mut dyn Iterator<Item = f64>, avg: f64| {
        let _ = write!(s, "{name:<10}");
        for v in vals {
            let _ = write!(s, "{:>8.1}", 100.0 * v);
        }
        let _ = writeln!(s, "{:>8.1}", 100.0 * avg);
    };
    row("F1-frame", &mut f1.per_au.iter().map(|a| a.f1), f1.average);
    row("accuracy", &mut acc.per_au.iter().copied(), acc.average);
    if let Some(a) = align {
        let _ = writeln!(
            s,
            "mean error {:.2}%  failure rate {:.2}%",
            a.mean_error, a.failure_rate
        );
    }
    for (id, (f, a)) in au_ids.iter().zip(f1.per_au.iter().zip(&acc.per_au)) {
        let flag = if f.undefined { " f1_undefined=1" } else { "" };
        let _ = writeln!(s, "au={id} f1={:.6} accuracy={:.6}{flag}", f.f1, a);
    }
    let _ = writeln!(s, "au=avg f1={:.6} accuracy={:.6}", f1.average, acc.average);
    if let Some(a) = align {
        let _ = writeln!(
            s,
            "mean_error={:.6} failure_rate={:.6} skipped={}",
            a.mean_error, a.failure_rate, a.skipped
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[u8]) -> LabelMatrix {
        LabelMatrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_f1() {
        let r = f1_frame(&col(&[1, 1, 0, 0]), &col(&[1, 0, 1, 0])).unwrap();
        assert_eq!(r.per_au[0].precision, 0.5);
        assert_eq!(r.per_au[0].recall, 0.5);
        assert_eq!(r.average, 0.5);
    }

    #[test]
    fn f1_edge_cases() {
        let t = col(&[1, 0, 1, 0]);
        assert_eq!(f1_frame(&t, &t).unwrap().average, 1.0);
        let r = f1_frame(&t, &col(&[0; 4])).unwrap();
        assert_eq!(r.average, 0.0);
        assert!(r.per_au[0].undefined);
    }

    #[test]
    fn accuracy_counts() {
        let t = col(&[1, 0, 1, 0]);
        assert_eq!(accuracy(&t, &t).unwrap().average, 1.0);
        assert_eq!(accuracy(&t, &col(&[0, 1, 0, 1])).unwrap().average, 0.0);
        assert_eq!(accuracy(&t, &col(&[1, 0, 1, 1])).unwrap().average, 0.75);
    }

    #[test]
    fn alignment_boundary() {
        let truth = vec![vec![0.0, 0.0, 10.0, 0.0]];
        let exact = alignment_metrics(&truth, &truth, &[10.0]).unwrap();
        assert_eq!((exact.mean_error, exact.failure_rate), (0.0, 0.0));
        let off = vec![vec![1.0, 0.0, 11.0, 0.0]];
        let r = alignment_metrics(&truth, &off, &[10.0]).unwrap();
        assert!((r.mean_error - 10.0).abs() < 1e-12);
        assert_eq!(r.failure_rate, 0.0);
    }

    #[test]
    fn one_failure_in_five() {
        let t = vec![vec![0.0, 0.0]; 5];
        let mut p = t.clone();
        p[2] = vec![1.5, 0.0];
        let r = alignment_metrics(&t, &p, &[10.0; 5]).unwrap();
        assert!((r.failure_rate - 20.0).abs() < 1e-12);
        let skip = alignment_metrics(&t, &p, &[10.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
        assert_eq!(skip.skipped, 1);
    }

    #[test]
    fn dichotomize_rule() {
        assert_eq!(
            dichotomize(&[0.0, 1.0, 2.0, 5.0], 2.0),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn folds() {
        let subjects: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let a = make_folds(&subjects, 3, 7).unwrap();
        assert_eq!(a, make_folds(&subjects, 3, 7).unwrap());
        for f in 0..3 {
            assert_eq!(a.assignment.values().filter(|&&v| v == f).count(), 2);
        }
        assert!(make_folds(&subjects, 7, 0).is_err());
        let (train, test) = a.indices(&subjects, 0);
        assert_eq!((train.len(), test.len()), (4, 2));
    }

    #[test]
    fn report_lines() {
        let t = col(&[1, 0]);
        let f = f1_frame(&t, &t).unwrap();
        let a = accuracy(&t, &t).unwrap();
        let text = report(&[12], &f, &a, None);
        assert!(text.contains("au=12 f1=1.000000 accuracy=1.000000"));
        assert!(text.contains("AU12"));
    }
}
