use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Hyperplastic lesion.
pub const LABEL_HYPERPLASTIC: usize = 0;
/// Adenomatous lesion.
pub const LABEL_ADENOMATOUS: usize = 1;

/// Pixel rectangle `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn full(image: &ImageTensor) -> Self {
        Self {
            x: 0,
            y: 0,
            w: image.width(),
            h: image.height(),
        }
    }

    pub fn fits(&self, image: &ImageTensor) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= image.width() && self.y + self.h <= image.height()
    }

    /// The same region after a horizontal flip of an image `width` wide.
    pub fn mirrored(&self, width: usize) -> Self {
        Self {
            x: width - self.x - self.w,
            ..*self
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses `x:y:w:h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Data(format!("bad bbox '{s}', expected x:y:w:h"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let v: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v[2] == 0 || v[3] == 0 {
            return Err(Error::Data(format!("empty bbox '{s}'")));
        }
        Ok(Self {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        })
    }
}

/// One WL/NBI image pair sharing a label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub wl: ImageTensor,
    pub nbi: ImageTensor,
    pub label: usize,
    pub subject_id: String,
    pub bbox_wl: Option<BBox>,
    pub bbox_nbi: Option<BBox>,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        if self.label > LABEL_ADENOMATOUS {
            return Err(Error::Data(format!("label {} not in {{0, 1}}", self.label)));
        }
        for (name, bbox, img) in [("wl", &self.bbox_wl, &self.wl), ("nbi", &self.bbox_nbi, &self.nbi)] {
            if let Some(b) = bbox {
                if !b.fits(img) {
                    return Err(Error::Data(format!(
                        "{name} bbox {b} outside {}x{} image",
                        img.width(),
                        img.height()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Crops each modality to its own box and resizes both to `size x size`.
/// Without a box the image is only resized.
pub fn crop_bbox(sample: &PairedSample, size: usize) -> Result<PairedSample> {
    let crop = |img: &ImageTensor, bbox: Option<BBox>, name: &str| -> Result<ImageTensor> {
        match bbox {
            Some(b) => Ok(img.crop(b.x, b.y, b.w, b.h)?.resize(size, size)),
            None => {
                log::warn!("sample {}: no {name} bbox, resizing whole image", sample.id);
                Ok(img.resize(size, size))
            }
        }
    };
    Ok(PairedSample {
        wl: crop(&sample.wl, sample.bbox_wl, "wl")?,
        nbi: crop(&sample.nbi, sample.bbox_nbi, "nbi")?,
        bbox_wl: None,
        bbox_nbi: None,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> PairedSample {
        let data: Vec<f64> = (0..w * h * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        PairedSample {
            id: "s".into(),
            wl: img.clone(),
            nbi: img.flip_horizontal(),
            label: 1,
            subject_id: "p1".into(),
            bbox_wl: None,
            bbox_nbi: None,
        }
    }

    #[test]
    fn bbox_parse_and_display() {
        let b: BBox = "3:4:10:12".parse().unwrap();
        assert_eq!(
            b,
            BBox {
                x: 3,
                y: 4,
                w: 10,
                h: 12
            }
        );
        assert_eq!(b.to_string(), "3:4:10:12");
        assert!("1:2:3".parse::<BBox>().is_err());
        assert!("1:2:0:3".parse::<BBox>().is_err());
        assert!("a:2:3:4".parse::<BBox>().is_err());
    }

    #[test]
    fn full_bbox_crop_is_resize_only() {
        let mut s = sample(20, 16);
        s.bbox_wl = Some(BBox::full(&s.wl));
        s.bbox_nbi = Some(BBox::full(&s.nbi));
        let c = crop_bbox(&s, 8).unwrap();
        assert_eq!(c.wl, s.wl.resize(8, 8));
        assert_eq!(c.nbi, s.nbi.resize(8, 8));
    }

    #[test]
    fn one_pixel_bbox_gives_constant_image() {
        let mut s = sample(20, 16);
        s.bbox_wl = Some(BBox { x: 5, y: 7, w: 1, h: 1 });
        s.bbox_nbi = Some(BBox { x: 0, y: 0, w: 1, h: 1 });
        let c = crop_bbox(&s, 8).unwrap();
        for ch in 0..3 {
            let v = s.wl.get(7, 5, ch);
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(c.wl.get(y, x, ch), v);
                }
            }
        }
    }

    #[test]
    fn crop_then_flip_equals_flip_then_mirrored_crop() {
        let s = sample(24, 18);
        let b = BBox {
            x: 3,
            y: 2,
            w: 13,
            h: 11,
        };
        let a = s.wl.crop(b.x, b.y, b.w, b.h).unwrap().resize(16, 16).flip_horizontal();
        let m = b.mirrored(24);
        let f = s.wl.flip_horizontal();
        let c = f.crop(m.x, m.y, m.w, m.h).unwrap().resize(16, 16);
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn validate_rejects_out_of_bounds_bbox() {
        let mut s = sample(10, 10);
        s.bbox_nbi = Some(BBox { x: 5, y: 5, w: 6, h: 2 });
        assert!(s.validate().is_err());
        s.bbox_nbi = Some(BBox { x: 4, y: 5, w: 6, h: 2 });
        s.validate().unwrap();
    }
}
