//! Binary PPM (P6, RGB) and PGM (P5, grayscale) reading and writing.
//! Masks are P5 files restricted to the values 0 and 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seg::BinaryMask;
use crate::tensor::Tensor;

/// 8-bit raster, row-major, samples interleaved per pixel (HWC).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image wants {} samples, got {}",
                height * width * channels,
                samples.len()
            )));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            samples,
        })
    }

    /// Planar C x H x W float tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] =
                        self.samples[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        Tensor::new(vec![c, h, w], data).expect("consistent dims")
    }

    /// Quantize a C x H x W float tensor in `[0, 1]` back to 8-bit.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match t.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "expected C x H x W tensor, got {:?}",
                    t.shape()
                )))
            }
        };
        let mut samples = vec![0u8; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0);
                    samples[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        ImageBuffer::new(h, w, c, samples)
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Format(format!("{}: {msg}", self.path.display()))
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_int(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail("expected an integer in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail("bad integer in header"))
    }
}

fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 {
        return Err(Error::Format(format!("{}: not a PNM file", path.display())));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::Format(format!(
                "{}: expected P5 or P6 magic",
                path.display()
            )))
        }
    };
    let mut p = HeaderParser {
        bytes,
        pos: 2,
        path,
    };
    let width = p.read_int()?;
    let height = p.read_int()?;
    let maxval = p.read_int()?;
    if maxval != 255 {
        return Err(p.fail(&format!("max value must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.fail("missing whitespace before payload"));
    }
    let payload = &bytes[p.pos + 1..];
    let want = width * height * channels;
    if payload.len() < want {
        return Err(p.fail(&format!(
            "truncated payload: want {want} bytes, got {}",
            payload.len()
        )));
    }
    if payload.len() > want {
        return Err(p.fail("trailing bytes after payload"));
    }
    ImageBuffer::new(height, width, channels, payload.to_vec())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(path, &bytes)
}

pub fn save_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = Vec::with_capacity(img.samples.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)
        .expect("write to vec cannot fail");
    out.extend_from_slice(&img.samples);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load a bilevel P5 mask: every sample must be exactly 0 or 255.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = load_image(path)?;
    if img.channels != 1 {
        return Err(Error::Format(format!(
            "{}: masks must be single-channel P5",
            path.display()
        )));
    }
    let mut pixels = Vec::with_capacity(img.samples.len());
    for (i, &s) in img.samples.iter().enumerate() {
        match s {
            0 => pixels.push(false),
            255 => pixels.push(true),
            other => {
                return Err(Error::Format(format!(
                    "{}: mask sample {i} is {other}, masks must be bilevel 0/255",
                    path.display()
                )))
            }
        }
    }
    BinaryMask::new(img.height, img.width, pixels)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let samples: Vec<u8> = mask.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
    let img = ImageBuffer::new(mask.height, mask.width, 1, samples)?;
    save_image(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_p6_bytes_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        std::fs::write(&path, &bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.samples, (1..=12).collect::<Vec<u8>>());
    }

    #[test]
    fn image_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = ImageBuffer::new(3, 5, 3, (0..45).map(|i| (i * 7 % 256) as u8).collect())
            .unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
        // file itself is stable byte-for-byte on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        save_image(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn mask_roundtrip_and_bilevel_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = BinaryMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);

        // a gray value is rejected
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_mask(&path), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_headers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        for bytes in [
            b"P4\n1 1\n255\n\0".to_vec(),
            b"P6\n1 1\n254\n\0\0\0".to_vec(),
            b"P6\n2 2\n255\n\0\0\0".to_vec(), // truncated
        ] {
            std::fs::write(&path, &bytes).unwrap();
            assert!(load_image(&path).is_err(), "{bytes:?}");
        }
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 200]);
        std::fs::write(&path, &bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.samples, vec![9, 200]);
    }

    #[test]
    fn tensor_conversion_roundtrips_exactly() {
        let img = ImageBuffer::new(4, 3, 3, (0..36).map(|i| (i * 11 % 256) as u8).collect())
            .unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 4, 3]);
        let back = ImageBuffer::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }
}
