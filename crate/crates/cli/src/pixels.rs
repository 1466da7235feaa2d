//! Pixel sources for `featurize`: PPM images (both the ASCII `P3` and the
//! binary `P6` flavor) and JSON pixel lists. Everything is normalized to
//! RGB triples in `0..=1` before the color pipeline sees it.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Load RGB pixels from a file, deciding the format by content: PPM files
/// start with their magic, anything else must parse as a JSON array of
/// `[r, g, b]` triples.
pub fn load_pixels(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read pixel file {}", path.display()))?;
    let pixels = if bytes.starts_with(b"P3") || bytes.starts_with(b"P6") {
        parse_ppm(&bytes).with_context(|| format!("bad PPM file {}", path.display()))?
    } else {
        parse_json_pixels(&bytes)
            .with_context(|| format!("bad pixel list {}", path.display()))?
    };
    if pixels.is_empty() {
        bail!("{} holds no pixels", path.display());
    }
    Ok(pixels)
}

/// A JSON array of `[r, g, b]` triples. Values may be `0..=1` floats or
/// `0..=255` integers; anything above 1 switches the whole list to the
/// integer scale.
fn parse_json_pixels(bytes: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let triples: Vec<[f64; 3]> = serde_json::from_slice(bytes)?;
    let mut max = 0.0f64;
    for [r, g, b] in &triples {
        for v in [r, g, b] {
            if !v.is_finite() || *v < 0.0 {
                bail!("pixel value {v} is negative or not finite");
            }
            max = max.max(*v);
        }
    }
    let scale = if max > 1.0 { 255.0 } else { 1.0 };
    if max > 255.0 {
        bail!("pixel value {max} exceeds the 0..=255 integer scale");
    }
    Ok(triples.iter().map(|[r, g, b]| (r / scale, g / scale, b / scale)).collect())
}

/// Whitespace- and comment-aware token reader over a PPM header.
struct Tokens<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Tokens<'a> {
    fn skip_filler(&mut self) {
        loop {
            while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_whitespace() {
                self.at += 1;
            }
            if self.at < self.bytes.len() && self.bytes[self.at] == b'#' {
                while self.at < self.bytes.len() && self.bytes[self.at] != b'\n' {
                    self.at += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_filler();
        let start = self.at;
        while self.at < self.bytes.len()
            && !self.bytes[self.at].is_ascii_whitespace()
            && self.bytes[self.at] != b'#'
        {
            self.at += 1;
        }
        if start == self.at {
            bail!("truncated header");
        }
        std::str::from_utf8(&self.bytes[start..self.at]).context("non-ASCII header token")
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let token = self.token()?;
        token.parse().with_context(|| format!("{what} {token:?} is not a number"))
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let mut tokens = Tokens { bytes, at: 0 };
    let magic = tokens.token()?;
    let width = tokens.number("width")?;
    let height = tokens.number("height")?;
    let maxval = tokens.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        bail!("maxval {maxval} outside 1..=65535");
    }
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .context("image dimensions overflow")?;
    let scale = maxval as f64;

    let raw = match magic {
        "P3" => {
            let mut raw = Vec::with_capacity(samples);
            for _ in 0..samples {
                raw.push(tokens.number("sample")?);
            }
            raw
        }
        "P6" => {
            // Exactly one whitespace byte separates the header from the
            // raster.
            tokens.skip_filler();
            let per_sample = if maxval < 256 { 1 } else { 2 };
            let data = &bytes[tokens.at..];
            if data.len() < samples * per_sample {
                bail!(
                    "raster holds {} bytes, needs {}",
                    data.len(),
                    samples * per_sample
                );
            }
            data.chunks_exact(per_sample)
                .take(samples)
                .map(|c| {
                    if per_sample == 1 {
                        c[0] as usize
                    } else {
                        usize::from(u16::from_be_bytes([c[0], c[1]]))
                    }
                })
                .collect()
        }
        other => bail!("unknown magic {other:?}"),
    };
    for &v in &raw {
        if v > maxval {
            bail!("sample {v} exceeds maxval {maxval}");
        }
    }
    Ok(raw
        .chunks_exact(3)
        .map(|px| (px[0] as f64 / scale, px[1] as f64 / scale, px[2] as f64 / scale))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn ascii_ppm_parses_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "a.ppm",
            b"P3 # tiny\n2 1\n# maxval next\n255\n255 0 0  0 0 255\n",
        );
        let pixels = load_pixels(&path).unwrap();
        assert_eq!(pixels, vec![(1.0, 0.0, 0.0), (0.0, 0.0, 1.0)]);
    }

    #[test]
    fn binary_ppm_parses_one_and_two_byte_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut one = b"P6 2 1 255\n".to_vec();
        one.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let pixels = load_pixels(&write(&dir, "one.ppm", &one)).unwrap();
        assert_eq!(pixels, vec![(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)]);

        let mut two = b"P6 1 1 65535\n".to_vec();
        two.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let pixels = load_pixels(&write(&dir, "two.ppm", &two)).unwrap();
        assert_eq!(pixels[0].0, 1.0);
        assert_eq!(pixels[0].1, 0.0);
        assert!((pixels[0].2 - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut short = b"P6 2 2 255\n".to_vec();
        short.extend_from_slice(&[1, 2, 3]);
        let err = load_pixels(&write(&dir, "short.ppm", &short)).unwrap_err();
        assert!(format!("{err:#}").contains("raster"));
    }

    #[test]
    fn sample_above_maxval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "a.ppm", b"P3 1 1 7\n8 0 0\n");
        let err = load_pixels(&path).unwrap_err();
        assert!(format!("{err:#}").contains("exceeds maxval"));
    }

    #[test]
    fn json_floats_and_ints_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let floats = write(&dir, "f.json", b"[[1.0, 0.0, 0.5]]");
        assert_eq!(load_pixels(&floats).unwrap(), vec![(1.0, 0.0, 0.5)]);
        let ints = write(&dir, "i.json", b"[[255, 0, 51]]");
        assert_eq!(load_pixels(&ints).unwrap(), vec![(1.0, 0.0, 0.2)]);
    }

    #[test]
    fn empty_and_negative_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(&dir, "e.json", b"[]");
        assert!(format!("{:#}", load_pixels(&empty).unwrap_err()).contains("no pixels"));
        let negative = write(&dir, "n.json", b"[[-1, 0, 0]]");
        assert!(load_pixels(&negative).is_err());
    }
}
