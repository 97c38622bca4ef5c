//! Binary PGM/PPM image files and the [−1, 1] value convention.
//!
//! Grayscale images round-trip through P5, three-channel through P6, both
//! 8-bit. In-memory images are channel-major [C,H,W] with values in
//! [−1, 1]; files store the usual interleaved byte layout.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// A decoded image: channel-major values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!(
                "only 1- or 3-channel images are supported, got {channels}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Image(format!(
                "value buffer {} does not match {channels}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            values,
        })
    }
}

fn byte_to_value(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn value_to_byte(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Read a binary P5 (grayscale) or P6 (RGB) file.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    parse_pnm(&raw).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn parse_pnm(raw: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        // skip whitespace and '#' comments to end of line
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let width: usize = token()?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token()?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    // exactly one whitespace byte separates header from data
    pos += 1;
    let need = channels * width * height;
    let data = raw
        .get(pos..pos + need)
        .ok_or_else(|| "truncated pixel data".to_string())?;
    let mut values = vec![0.0; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let byte = data[(y * width + x) * channels + c];
                values[c * height * width + y * width + x] = byte_to_value(byte);
            }
        }
    }
    Image::new(channels, height, width, values).map_err(|e| e.to_string())
}

/// Write a binary P5/P6 file, clamping values into [−1, 1].
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::new();
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", img.width, img.height).as_bytes());
    let hw = img.height * img.width;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.push(value_to_byte(img.values[c * hw + y * img.width + x]));
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let values: Vec<f64> = (0..16).map(|i| byte_to_value((i * 16) as u8)).collect();
        let img = Image::new(1, 4, 4, values).unwrap();
        write_pnm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let values: Vec<f64> = (0..3 * 4).map(|i| byte_to_value((i * 20) as u8)).collect();
        let img = Image::new(3, 2, 2, values).unwrap();
        write_pnm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut raw = b"P5 # magic\n# a comment line\n2 2\n255\n".to_vec();
        raw.extend_from_slice(&[0, 85, 170, 255]);
        let img = parse_pnm(&raw).unwrap();
        assert_eq!(img.width, 2);
        assert!((img.values[0] + 1.0).abs() < 1e-12);
        assert!((img.values[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamping_on_write() {
        assert_eq!(value_to_byte(1.7), 255);
        assert_eq!(value_to_byte(-3.0), 0);
        assert_eq!(value_to_byte(0.0), 128);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_pnm(b"P4\n2 2\n255\n____").is_err());
        assert!(parse_pnm(b"P5\n2 2\n255\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(read_pnm(&dir.path().join("missing.pgm")).is_err());
    }
}
