//! Minimal 8-bit RGB raster with binary PPM (P6) encoding.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    Size { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != height * width * 3 {
            return Err(ImageError::Size {
                got: pixels.len(),
                expected: height * width * 3,
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            pixels: rgb.repeat(height * width),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the rectangle `[y0, y1) × [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        let mut pixels = Vec::with_capacity((y1 - y0) * (x1 - x0) * 3);
        for y in y0..y1 {
            pixels.extend_from_slice(
                &self.pixels[(y * self.width + x0) * 3..(y * self.width + x1) * 3],
            );
        }
        Self {
            height: y1 - y0,
            width: x1 - x0,
            pixels,
        }
    }

    /// `P6\n<w> <h>\n255\n` followed by raw bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Ppm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(ImageError::Ppm(format!("unsupported magic {}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ImageError::Ppm(format!("bad number `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(ImageError::Ppm(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes
            .get(pos + 1..)
            .ok_or_else(|| ImageError::Ppm("missing raster".into()))?;
        Self::new(height, width, data.to_vec())
    }

    /// Box-filtered downsample to `size × size`, channels scaled to `[0, 1]`,
    /// returned as `size × size × 3` row-major.
    pub fn downsample_unit(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size * size * 3];
        for oy in 0..size {
            let (y0, y1) = (
                oy * self.height / size,
                ((oy + 1) * self.height / size).max(oy * self.height / size + 1),
            );
            for ox in 0..size {
                let (x0, x1) = (
                    ox * self.width / size,
                    ((ox + 1) * self.width / size).max(ox * self.width / size + 1),
                );
                let mut acc = [0.0; 3];
                for y in y0..y1.min(self.height) {
                    for x in x0..x1.min(self.width) {
                        let px = self.get(y, x);
                        for c in 0..3 {
                            acc[c] += px[c] as f64;
                        }
                    }
                }
                let count = ((y1.min(self.height) - y0) * (x1.min(self.width) - x0)) as f64 * 255.0;
                for c in 0..3 {
                    out[(oy * size + ox) * 3 + c] = acc[c] / count;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::filled(3, 2, [1, 2, 3]);
        img.set(2, 1, [255, 0, 7]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 3\n255\n"));
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
        assert!(RgbImage::from_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn downsample_constant() {
        let img = RgbImage::filled(8, 8, [255, 0, 51]);
        let d = img.downsample_unit(2);
        assert_eq!(&d[..3], &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn crop_rect() {
        let mut img = RgbImage::filled(4, 4, [0, 0, 0]);
        img.set(1, 2, [9, 9, 9]);
        let c = img.crop(1, 2, 2, 3);
        assert_eq!((c.height, c.width), (1, 1));
        assert_eq!(c.get(0, 0), [9, 9, 9]);
    }
}
