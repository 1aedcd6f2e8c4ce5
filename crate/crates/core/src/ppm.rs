//! Binary PPM (`P6`, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB raster, rows top to bottom, pixels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn header_error(reason: impl Into<String>) -> Error {
    Error::Image {
        path: "<memory>".into(),
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_error("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P6" {
        return Err(header_error("not a binary PPM (P6)"));
    }
    let mut number = |what: &str| -> Result<usize> {
        next_token()?
            .parse()
            .map_err(|_| header_error(format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(header_error(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = pos + 1;
    let need = width * height * 3;
    if width == 0 || height == 0 || bytes.len() < raster || bytes.len() - raster != need {
        return Err(header_error(format!(
            "raster size mismatch for {width}x{height}"
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: bytes[raster..].to_vec(),
    })
}

pub fn write(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Image { reason, .. } => Error::Image {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_plain_p6() {
        let img = RgbImage::new(2, 1);
        assert_eq!(&encode(&img)[..11], b"P6\n2 1\n255\n");
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode(&bytes).unwrap().get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(w in 1usize..6, h in 1usize..6, seed in any::<u8>()) {
            let mut img = RgbImage::new(w, h);
            for (i, b) in img.data.iter_mut().enumerate() {
                *b = seed.wrapping_add((i * 37) as u8);
            }
            prop_assert_eq!(decode(&encode(&img)).unwrap(), img);
        }
    }
}
