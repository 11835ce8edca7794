//! Binary PGM (P5) images with 8-bit samples.

use crate::error::{Error, Result};
use crate::image::GrayImage;

fn bad(msg: impl Into<String>) -> Error {
    Error::format("PGM", msg)
}

/// Parses a P5 image, mapping samples linearly to `[0, 1]`.
pub fn decode(buf: &[u8]) -> Result<GrayImage> {
    let mut at = 0;
    let mut token = || -> Result<String> {
        loop {
            while at < buf.len() && buf[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < buf.len() && buf[at] == b'#' {
                while at < buf.len() && buf[at] != b'\n' {
                    at += 1;
                }
                continue;
            }
            break;
        }
        let start = at;
        while at < buf.len() && !buf[at].is_ascii_whitespace() && buf[at] != b'#' {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..at]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("expected magic P5"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| bad(format!("invalid {what} {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err(bad(format!("empty image {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} unsupported, need 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if at >= buf.len() || !buf[at].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    let raster = &buf[at + 1..];
    let n = w.checked_mul(h).ok_or_else(|| bad("dims overflow"))?;
    if raster.len() < n {
        return Err(bad(format!("raster has {} bytes, need {n}", raster.len())));
    }
    let data = raster[..n].iter().map(|&b| (b as f64 / maxval as f64).min(1.0)).collect();
    GrayImage::new(w, h, data)
}

/// Encodes with maxval 255, rounding and clamping to `[0, 1]`.
pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantized() {
        let img = GrayImage::new(3, 2, vec![0.0, 1.0, 0.5, 0.2, 2.0, -1.0]).unwrap();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.data[0], 0.0);
        assert_eq!(back.data[1], 1.0);
        assert_eq!(back.data[2], 128.0 / 255.0);
        assert_eq!(back.data[4], 1.0);
        assert_eq!(back.data[5], 0.0);
    }

    #[test]
    fn header_comments_and_maxval() {
        let mut b = b"P5 # made by hand\n# another\n2 1\n# c\n15\n".to_vec();
        b.extend([15, 5]);
        let img = decode(&b).unwrap();
        assert_eq!(img.data, vec![1.0, 1.0 / 3.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\n0 1\n255\n").is_err());
    }
}
