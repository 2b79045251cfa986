//! RGB image tensors and the binary PPM/PGM codecs used for all image I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `height x width x 3` image, channels innermost, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Values are clamped into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * 3]).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Sub-image `[x, x+w) x [y, y+h)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Data(format!(
                "crop ({x},{y},{w},{h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::new(h, w, data)
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for oy in 0..out_h {
            let (y0, y1, fy) = taps(oy, sy, self.height);
            for ox in 0..out_w {
                let (x0, x1, fx) = taps(ox, sx, self.width);
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Self::new(out_h, out_w, data).expect("positive dims")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| quantize(*v)));
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_pnm_header(bytes)?;
        if magic != "P6" {
            return Err(Error::Data(format!("expected binary PPM (P6), found {magic}")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
        }
        let need = width * height * 3;
        if body.len() < need {
            return Err(Error::Data(format!(
                "PPM truncated: need {need} bytes, have {}",
                body.len()
            )));
        }
        let scale = maxval as f64;
        let data = body[..need].iter().map(|&b| b as f64 / scale).collect();
        Self::new(height, width, data)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_pnm_header(bytes)?;
        if magic != "P5" || maxval != 255 {
            return Err(Error::Data(format!(
                "expected 8-bit binary PGM, found {magic} maxval {maxval}"
            )));
        }
        if body.len() < width * height {
            return Err(Error::Data("PGM truncated".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: body[..width * height].to_vec(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Splits a binary PNM header into (magic, width, height, maxval, raster).
fn parse_pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(Error::Data("PNM has no raster".into()));
    }
    let body = &bytes[i + 1..];
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PNM header field '{s}'")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 {
        return Err(Error::Data("PNM with zero dimension".into()));
    }
    Ok((fields[0].clone(), w, h, maxval, body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend([x as f64 / w as f64, y as f64 / h as f64, 0.5]);
            }
        }
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn values_are_clamped() {
        let img = ImageTensor::new(1, 1, vec![-1.0, 0.5, 7.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn ppm_round_trip_is_quantized_identity() {
        let img = gradient(5, 7);
        let back = ImageTensor::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!((back.height(), back.width()), (5, 7));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let again = ImageTensor::from_ppm_bytes(&back.to_ppm_bytes()).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let bytes = b"P6\n# comment\n1 1\n255\n\x10\x20\x30";
        let img = ImageTensor::from_ppm_bytes(bytes).unwrap();
        assert_eq!(img.get(0, 0, 2), 0x30 as f64 / 255.0);
        assert!(ImageTensor::from_ppm_bytes(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(ImageTensor::from_ppm_bytes(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = gradient(4, 6);
        assert_ne!(img.flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = ImageTensor::filled(1, 1, 0.25).resize(8, 8);
        assert!(img.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pgm_round_trip() {
        let g = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 20, 30, 40, 255],
        };
        assert_eq!(GrayImage::from_pgm_bytes(&g.to_pgm_bytes()).unwrap(), g);
    }
}
