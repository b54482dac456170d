//! Portable anymap (PPM/PGM) reading and writing.
//!
//! Binary (`P5`, `P6`) and plain (`P2`, `P3`) variants are read, with 8- or 16-bit samples.
//! Grayscale images are broadcast to three identical channels. Writing always produces binary
//! 8-bit files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data(format!("{}: {}", path.display(), msg.into()))
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn tokens(bytes: &[u8], mut pos: usize, count: usize) -> Option<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        out.push(std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?);
    }
    Some((out, pos))
}

fn header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        return Err(corrupt(path, "not a PGM/PPM file"));
    }
    let (vals, pos) = tokens(bytes, 2, 3).ok_or_else(|| corrupt(path, "truncated header"))?;
    let (width, height, maxval) = (vals[0], vals[1], vals[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt(
            path,
            format!("bad header {width}x{height} maxval {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from binary data.
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Loads an image as a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Decodes PGM/PPM bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = header(bytes, path)?;
    let channels = if matches!(h.magic[1], b'3' | b'6') {
        3
    } else {
        1
    };
    let count = h.width * h.height * channels;
    let samples: Vec<usize> = match h.magic[1] {
        b'5' | b'6' => {
            let wide = h.maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let body = bytes
                .get(h.data_start..h.data_start + need)
                .ok_or_else(|| corrupt(path, "truncated pixel data"))?;
            if wide {
                body.chunks_exact(2)
                    .map(|p| u16::from_be_bytes([p[0], p[1]]) as usize)
                    .collect()
            } else {
                body.iter().map(|&b| b as usize).collect()
            }
        }
        _ => {
            let (vals, _) = tokens(bytes, h.data_start - 1, count)
                .ok_or_else(|| corrupt(path, "truncated pixel data"))?;
            vals
        }
    };
    if samples.iter().any(|&s| s > h.maxval) {
        return Err(corrupt(path, "sample exceeds maxval"));
    }
    let plane = h.width * h.height;
    let maxval = h.maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let s = if channels == 3 {
                samples[3 * i + c]
            } else {
                samples[i]
            };
            data[c * plane + i] = s as f64 / maxval;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor as a binary PPM, clamping to `[0, 1]`.
pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(Error::shape(
                "save_ppm",
                format!("expected [3, H, W], got {s:?}"),
            ))
        }
    };
    if c != 3 {
        return Err(Error::shape(
            "save_ppm",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel row-major grid as a binary PGM.
pub fn save_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(
            "save_pgm",
            format!("{} values for a {width}x{height} image", values.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_red() {
        let bytes = b"P6\n2 2\n255\n\xff\x00\x00\xff\x00\x00\xff\x00\x00\xff\x00\x00";
        let t = decode(bytes, Path::new("red.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(&t.data()[..4], &[1.0; 4]);
        assert!(t.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_broadcasts() {
        let t = decode(b"P2 # comment\n2 1\n4\n0 4\n", Path::new("g.pgm")).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit() {
        let t = decode(b"P5\n1 1\n1000\n\x01\xf4", Path::new("w.pgm")).unwrap();
        assert!((t.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_corrupt() {
        assert!(decode(b"P7\n", Path::new("x")).is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00", Path::new("x")).is_err());
        assert!(decode(b"P5\n1 1\n10\n\x20", Path::new("x")).is_err());
    }

    #[test]
    fn round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..3 * 5 * 4)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        let t = Tensor::new(&[3, 5, 4], data).unwrap();
        save_ppm(&p, &t).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
    }
}
