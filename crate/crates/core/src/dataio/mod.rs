//! Dataset ingestion: the manifest format, image files, in-memory datasets and the synthetic
//! generator.
//!
//! # Manifest format
//!
//! A comma-separated file with a header row:
//!
//! ```text
//! image,subject,x0,y0,x1,y1,...,x{n-1},y{n-1},au<id>,au<id>,...
//! ```
//!
//! `image` is a path relative to the manifest's directory, `subject` an arbitrary identifier,
//! `x{i}`/`y{i}` landmark pixel coordinates and every `au<id>` column an occurrence label
//! (binary, or an intensity 0 to 5 that is dichotomized at load time).

pub mod image;
pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::inter_ocular;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::{load_image, save_pgm, save_ppm};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Image path as written in the manifest.
    pub image: PathBuf,
    pub subject: String,
    /// `2 n_align` interleaved pixel coordinates.
    pub landmarks: Vec<f64>,
    pub labels: Vec<f64>,
}

impl SampleRecord {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.landmarks
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Directory image paths are resolved against.
    pub base: PathBuf,
    pub au_ids: Vec<u32>,
    pub n_align: usize,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.base.join(&record.image)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Abort on the first bad record instead of collecting it.
    pub fail_fast: bool,
    /// Reject records whose image file does not exist.
    pub check_images: bool,
    pub n_align: Option<usize>,
    pub n_au: Option<usize>,
}

#[derive(Debug)]
pub struct Loaded {
    pub manifest: Manifest,
    /// Records that failed validation, with their line numbers.
    pub rejected: Vec<Error>,
}

fn header_layout(headers: &csv::StringRecord, path: &Path) -> Result<(usize, Vec<u32>)> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "image" || cols[1] != "subject" {
        return Err(err("header must start with 'image,subject'".into()));
    }
    let mut n_align = 0;
    while 2 + 2 * n_align + 1 < cols.len()
        && cols[2 + 2 * n_align] == format!("x{n_align}")
        && cols[3 + 2 * n_align] == format!("y{n_align}")
    {
        n_align += 1;
    }
    let au_ids = cols[2 + 2 * n_align..]
        .iter()
        .map(|c| {
            c.strip_prefix("au")
                .and_then(|id| id.parse().ok())
                .ok_or_else(|| err(format!("unexpected column '{c}'")))
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok((n_align, au_ids))
}

/// Reads and validates a manifest. Malformed records are reported with their line numbers,
/// either immediately (`fail_fast`) or in [`Loaded::rejected`].
pub fn load_manifest(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = Manifest {
        base,
        ..Manifest::default()
    };
    if text.trim().is_empty() {
        return Ok(Loaded {
            manifest,
            rejected: Vec::new(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let (n_align, au_ids) = header_layout(&headers, path)?;
    let header_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    if let Some(n) = opts.n_align.filter(|&n| n != n_align) {
        return Err(header_err(format!(
            "{n_align} landmarks in header, {n} expected"
        )));
    }
    if let Some(n) = opts.n_au.filter(|&n| n != au_ids.len()) {
        return Err(header_err(format!(
            "{} AU columns in header, {n} expected",
            au_ids.len()
        )));
    }
    manifest.n_align = n_align;
    manifest.au_ids = au_ids;
    let width = headers.len();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let (line, parsed) = match row {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line() as usize);
                (line, parse_record(&rec, width, n_align, &manifest))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                (line, Err(e.to_string()))
            }
        };
        let checked = parsed.and_then(|r| {
            if opts.check_images && !manifest.resolve(&r).is_file() {
                Err(format!(
                    "image '{}' not found",
                    manifest.resolve(&r).display()
                ))
            } else {
                Ok(r)
            }
        });
        match checked {
            Ok(r) => manifest.records.push(r),
            Err(msg) => {
                let e = Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg,
                };
                if opts.fail_fast {
                    return Err(e);
                }
                log::warn!("{e}");
                rejected.push(e);
            }
        }
    }
    Ok(Loaded { manifest, rejected })
}

fn parse_record(
    rec: &csv::StringRecord,
    width: usize,
    n_align: usize,
    manifest: &Manifest,
) -> std::result::Result<SampleRecord, String> {
    if rec.len() != width {
        let coords = rec.len().saturating_sub(2 + manifest.au_ids.len());
        return Err(format!(
            "{} fields, expected {width} ({} coordinates + {} labels); this row has {coords} coordinates",
            rec.len(),
            2 * n_align,
            manifest.au_ids.len()
        ));
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        rec[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("column {} ('{}') is not a finite number", i + 1, &rec[i]))
    };
    if rec[0].is_empty() {
        return Err("empty image path".into());
    }
    let landmarks = (2..2 + 2 * n_align)
        .map(num)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels = (2 + 2 * n_align..width)
        .map(num)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if let Some(l) = labels.iter().find(|&&l| !(0.0..=5.0).contains(&l)) {
        return Err(format!("label {l} outside 0..=5"));
    }
    Ok(SampleRecord {
        image: PathBuf::from(&rec[0]),
        subject: rec[1].to_string(),
        landmarks,
        labels,
    })
}

/// Writes a manifest; image paths are written as stored in the records.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["image".to_string(), "subject".to_string()];
    for i in 0..manifest.n_align {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    header.extend(manifest.au_ids.iter().map(|id| format!("au{id}")));
    let data_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(data_err)?;
    for r in &manifest.records {
        if r.landmarks.len() != 2 * manifest.n_align || r.labels.len() != manifest.au_ids.len() {
            return Err(Error::Data(format!(
                "record '{}' does not match the manifest layout",
                r.image.display()
            )));
        }
        let mut row = vec![r.image.to_string_lossy().into_owned(), r.subject.clone()];
        row.extend(r.landmarks.iter().chain(&r.labels).map(|v| v.to_string()));
        w.write_record(&row).map_err(data_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Images, landmarks and binary labels held in memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    /// `[3, H, W]` images.
    pub images: Vec<Tensor>,
    pub landmarks: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub subjects: Vec<String>,
}

impl Dataset {
    /// Loads every image of `manifest` (in parallel) and dichotomizes labels at `threshold`.
    pub fn from_manifest(manifest: &Manifest, threshold: f64) -> Result<Self> {
        let images = manifest
            .records
            .par_iter()
            .map(|r| load_image(&manifest.resolve(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            landmarks: manifest
                .records
                .iter()
                .map(|r| r.landmarks.clone())
                .collect(),
            labels: manifest
                .records
                .iter()
                .map(|r| crate::metrics::dichotomize(&r.labels, threshold))
                .collect(),
            subjects: manifest.records.iter().map(|r| r.subject.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_au(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            landmarks: indices.iter().map(|&i| self.landmarks[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Empirical positive rate of each AU.
    pub fn rates(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.n_au())
            .map(|k| self.labels.iter().map(|l| l[k]).sum::<f64>() / n)
            .collect()
    }

    /// Ground-truth inter-ocular distance of sample `i`.
    pub fn inter_ocular(&self, i: usize, eyes: [usize; 2]) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self.landmarks[i]
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .collect();
        inter_ocular(&pts, (eyes[0], eyes[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            base: PathBuf::new(),
            au_ids: vec![1, 12],
            n_align: 2,
            records: vec![
                SampleRecord {
                    image: "a.ppm".into(),
                    subject: "s1".into(),
                    landmarks: vec![1.5, 2.25, 3.0, 4.125],
                    labels: vec![0.0, 3.0],
                },
                SampleRecord {
                    image: "dir/b.ppm".into(),
                    subject: "s2".into(),
                    landmarks: vec![0.1, 0.2, 1e-3, 175.99999999],
                    labels: vec![1.0, 0.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = manifest();
        write_manifest(&p, &m).unwrap();
        let loaded = load_manifest(&p, &LoadOptions::default()).unwrap();
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.manifest.records, m.records);
        assert_eq!(loaded.manifest.au_ids, m.au_ids);
        assert_eq!(loaded.manifest.base, dir.path());
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, &LoadOptions::default())
            .unwrap()
            .manifest
            .is_empty());
        std::fs::write(&p, "image,subject,x0,y0,au1\n").unwrap();
        assert!(load_manifest(&p, &LoadOptions::default())
            .unwrap()
            .manifest
            .is_empty());
    }

    #[test]
    fn short_row_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,subject,x0,y0,au1\na.ppm,s,1,2,0\nb.ppm,s,1,1\n").unwrap();
        let loaded = load_manifest(&p, &LoadOptions::default()).unwrap();
        assert_eq!(loaded.manifest.len(), 1);
        match &loaded.rejected[0] {
            Error::Parse { line, .. } => assert_eq!(*line, 3),
            e => panic!("{e}"),
        }
        let strict = LoadOptions {
            fail_fast: true,
            ..LoadOptions::default()
        };
        assert!(load_manifest(&p, &strict).is_err());
    }

    #[test]
    fn missing_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,subject,x0,y0,au1\nnope.ppm,s,1,2,0\n").unwrap();
        let opts = LoadOptions {
            check_images: true,
            ..LoadOptions::default()
        };
        assert_eq!(load_manifest(&p, &opts).unwrap().rejected.len(), 1);
    }

    #[test]
    fn header_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "image,subject,x0,y0,au1\n").unwrap();
        let opts = LoadOptions {
            n_align: Some(49),
            ..LoadOptions::default()
        };
        assert!(load_manifest(&p, &opts).is_err());
        std::fs::write(&p, "image,subject,x0,y0,z\n").unwrap();
        assert!(load_manifest(&p, &LoadOptions::default()).is_err());
    }
}
