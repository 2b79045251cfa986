//! Random resized crop plus horizontal flip, drawn once per pair and applied
//! identically to both modalities so patch positions still correspond.

use rand::Rng;

use crate::data::sample::PairedSample;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Crop area as a fraction of the image.
pub const CROP_SCALE: (f64, f64) = (0.7, 1.0);
/// Crop aspect ratio (w / h) range.
pub const CROP_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const FLIP_PROB: f64 = 0.5;
const CROP_ATTEMPTS: usize = 10;

/// Crop window in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One draw of augmentation parameters, in image-relative units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// `(x, y, w, h)` as fractions of width/height.
    pub window: (f64, f64, f64, f64),
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            window: (0.0, 0.0, 1.0, 1.0),
            flip: false,
        }
    }

    /// Draws a random resized crop window for a `width x height` image.
    pub fn draw<R: Rng>(rng: &mut R, width: usize, height: usize) -> Self {
        let area = (width * height) as f64;
        let (lr0, lr1) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
        let mut window = None;
        for _ in 0..CROP_ATTEMPTS {
            let target = area * rng.gen_range(CROP_SCALE.0..=CROP_SCALE.1);
            let aspect = rng.gen_range(lr0..=lr1).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if w > 0 && h > 0 && w <= width && h <= height {
                let x = rng.gen_range(0..=width - w);
                let y = rng.gen_range(0..=height - h);
                window = Some((x, y, w, h));
                break;
            }
        }
        let (x, y, w, h) = window.unwrap_or((0, 0, width, height));
        let (fw, fh) = (width as f64, height as f64);
        Self {
            window: (x as f64 / fw, y as f64 / fh, w as f64 / fw, h as f64 / fh),
            flip: rng.gen_bool(FLIP_PROB),
        }
    }

    /// Pixel window on an image of the given size.
    pub fn window_for(&self, width: usize, height: usize) -> CropWindow {
        let (fx, fy, fw, fh) = self.window;
        let x = (fx * width as f64).round() as usize;
        let y = (fy * height as f64).round() as usize;
        let w = ((fw * width as f64).round() as usize).clamp(1, width - x.min(width - 1));
        let h = ((fh * height as f64).round() as usize).clamp(1, height - y.min(height - 1));
        CropWindow {
            x: x.min(width - 1),
            y: y.min(height - 1),
            w,
            h,
        }
    }

    /// Crops, resizes to `out x out` and optionally flips.
    pub fn apply(&self, img: &ImageTensor, out: usize) -> Result<(ImageTensor, CropWindow)> {
        let win = self.window_for(img.width(), img.height());
        let mut res = img.crop(win.x, win.y, win.w, win.h)?.resize(out, out);
        if self.flip {
            res = res.flip_horizontal();
        }
        Ok((res, win))
    }
}

/// What was applied to each modality of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRecord {
    pub wl: (CropWindow, bool),
    pub nbi: (CropWindow, bool),
    pub wl_size: (usize, usize),
    pub nbi_size: (usize, usize),
}

impl AugmentRecord {
    /// Same flip and the same relative window (to within a pixel when the
    /// two images differ in size).
    pub fn is_synchronized(&self) -> bool {
        if self.wl.1 != self.nbi.1 {
            return false;
        }
        if self.wl_size == self.nbi_size {
            return self.wl.0 == self.nbi.0;
        }
        let rel = |w: CropWindow, (sw, sh): (usize, usize)| {
            [
                w.x as f64 / sw as f64,
                w.y as f64 / sh as f64,
                w.w as f64 / sw as f64,
                w.h as f64 / sh as f64,
            ]
        };
        let (a, b) = (rel(self.wl.0, self.wl_size), rel(self.nbi.0, self.nbi_size));
        let px = 1.0
            / self
                .wl_size
                .0
                .min(self.wl_size.1)
                .min(self.nbi_size.0)
                .min(self.nbi_size.1) as f64;
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= px + 1e-12)
    }
}

/// Applies one augmentation draw to both images of a pair and returns the
/// result at `out x out`.
pub fn augment<R: Rng>(sample: &PairedSample, rng: &mut R, out: usize) -> Result<(PairedSample, AugmentRecord)> {
    let params = AugmentParams::draw(rng, sample.wl.width(), sample.wl.height());
    let (wl, wl_win) = params.apply(&sample.wl, out)?;
    let (nbi, nbi_win) = params.apply(&sample.nbi, out)?;
    let record = AugmentRecord {
        wl: (wl_win, params.flip),
        nbi: (nbi_win, params.flip),
        wl_size: (sample.wl.width(), sample.wl.height()),
        nbi_size: (sample.nbi.width(), sample.nbi.height()),
    };
    if !record.is_synchronized() {
        return Err(Error::Contract(format!(
            "augmentation of {} is not pair-synchronized",
            sample.id
        )));
    }
    Ok((
        PairedSample {
            wl,
            nbi,
            bbox_wl: None,
            bbox_nbi: None,
            ..sample.clone()
        },
        record,
    ))
}
