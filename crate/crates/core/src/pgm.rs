//! Binary PGM (P5) grayscale images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Encodes `pixels` (row-major, nominally `[0, 1]`) as 8-bit P5. Values are
/// clamped before quantization.
pub fn encode(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dim(
            "pgm",
            format!("{} pixels for a {width}x{height} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let bytes = encode(width, height, pixels)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Decodes a P5 file with maxval 255 into `(width, height, pixels in [0,1])`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PGM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("not a binary PGM (magic {:?})", fields[0].1),
        });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Format {
            offset: fields[i].0 as u64,
            msg: format!("bad header number {:?}", fields[i].1),
        })
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format {
            offset: fields[3].0 as u64,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("raster truncated: need {need} bytes"),
        });
    }
    let pixels = bytes[pos..pos + need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((width, height, pixels))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let px = [0.0, 1.0, 0.5, 2.0, -1.0, 0.25];
        let bytes = encode(3, 2, &px).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, back) = decode(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back[3], 1.0);
        assert_eq!(back[4], 0.0);
        assert!((back[2] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(encode(2, 2, &[0.0]).is_err());
    }
}
