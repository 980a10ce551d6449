//! Float images and binary PNM (P5 greyscale / P6 RGB) files.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × channels` pixels in `[0, 1]`, channel-last row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!(
                "invalid image geometry {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self::new(width, height, channels, vec![v; width * height * channels]).unwrap()
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).unwrap()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Converts between greyscale and RGB.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let n = self.width * self.height;
        let data = match (self.channels, channels) {
            (3, 1) => (0..n)
                .map(|i| {
                    let p = &self.data[i * 3..i * 3 + 3];
                    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
                })
                .collect(),
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            _ => unreachable!("channel counts are validated at construction"),
        };
        Image::new(self.width, self.height, channels, data).unwrap()
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut out = vec![0.0; width * height * c];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let src = |v: f64, n: usize| {
            let v = v.clamp(0.0, (n - 1) as f64);
            let lo = v.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, v - lo as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = src((y as f64 + 0.5) * sy - 0.5, self.height);
            for x in 0..width {
                let (x0, x1, fx) = src((x as f64 + 0.5) * sx - 0.5, self.width);
                for ch in 0..c {
                    let top = self.at(x0, y0, ch) * (1.0 - fx) + self.at(x1, y0, ch) * fx;
                    let bot = self.at(x0, y1, ch) * (1.0 - fx) + self.at(x1, y1, ch) * fx;
                    out[(y * width + x) * c + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(width, height, c, out).unwrap()
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pnm()).map_err(|e| Error::io(path, e))
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
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
                return Err(Error::Data("truncated PNM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Data(format!("unsupported PNM magic {m:?}"))),
        };
        let num = |s: String| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad PNM header field {s:?}")))
        };
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Data(format!("unsupported PNM maxval {maxval}")));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let n = width * height * channels;
        if body.len() < n {
            return Err(Error::Data(format!(
                "PNM body has {} bytes, expected {n}",
                body.len()
            )));
        }
        let data = body[..n]
            .iter()
            .map(|&b| b as f64 / maxval as f64)
            .collect();
        Image::new(width, height, channels, data)
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_is_exact_on_8bit_values() {
        let img = Image::from_fn(5, 3, |x, y| ((x * 37 + y * 11) % 256) as f64 / 255.0);
        let back = Image::from_pnm(&img.to_pnm()).unwrap();
        assert_eq!(back, img);
        let rgb = img.with_channels(3);
        assert_eq!(Image::from_pnm(&rgb.to_pnm()).unwrap(), rgb);
    }

    #[test]
    fn pnm_header_comments_and_errors() {
        let img = Image::from_pnm(b"P5\n# c\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert!(Image::from_pnm(b"P3\n1 1\n255\n0").is_err());
        assert!(Image::from_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = Image::filled(9, 7, 1, 0.25);
        let r = c.resize(4, 5);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let img = Image::from_fn(6, 6, |x, y| (x + y) as f64 / 10.0);
        assert_eq!(img.resize(6, 6), img);
    }

    #[test]
    fn resize_halves_by_averaging_pairs() {
        let img = Image::from_fn(4, 1, |x, _| x as f64);
        let r = img.resize(2, 1);
        assert_eq!(r.data, vec![0.5, 2.5]);
    }
}
