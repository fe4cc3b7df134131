//! Binary PPM (P6, maxval 255) encoding.

use std::path::Path;

use crate::error::{Result, StatError};
use crate::io::write_atomic;

/// Interleaved RGB bytes with their geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.bytes);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let bad = |reason: &str| StatError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Option<String> {
        // whitespace and '#' comments separate header fields
        loop {
            match bytes.get(*pos)? {
                b'#' => {
                    while *bytes.get(*pos)? != b'\n' {
                        *pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => *pos += 1,
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            *pos += 1;
        }
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| bad("missing magic"))?;
    if magic != "P6" {
        return Err(bad(&format!("expected magic P6, found {magic:?}")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let t = token(&mut pos).ok_or_else(|| bad(&format!("missing {name}")))?;
        t.parse::<usize>()
            .map_err(|_| bad(&format!("invalid {name} {t:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    // exactly one whitespace byte precedes the raster
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad(&format!(
            "raster has {} bytes, expected {need}",
            raster.len()
        )));
    }
    Ok(RgbImage {
        width,
        height,
        bytes: raster[..need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| StatError::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_comments() {
        let img = RgbImage {
            width: 2,
            height: 1,
            bytes: vec![0, 10, 20, 255, 128, 7],
        };
        let enc = encode_ppm(&img);
        assert_eq!(decode_ppm(&enc, Path::new("x")).unwrap(), img);

        let mut commented = b"P6 # made by hand\n2 1\n# maxval next\n255\n".to_vec();
        commented.extend_from_slice(&img.bytes);
        assert_eq!(decode_ppm(&commented, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn malformed_headers() {
        for bad in [
            &b"P3\n1 1\n255\n\x00\x00\x00"[..],
            b"P6\n1 x\n255\n\x00\x00\x00",
            b"P6\n1 1\n65535\n\x00\x00\x00",
            b"P6\n2 2\n255\n\x00\x00\x00",
            b"P6\n1",
            b"",
        ] {
            assert!(matches!(
                decode_ppm(bad, Path::new("bad.ppm")),
                Err(StatError::Image { .. })
            ));
        }
    }
}
