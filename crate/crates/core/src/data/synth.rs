//! Synthetic paired-modality lesions.
//!
//! Each image is a lesion-centred crop: a tissue background with smooth
//! illumination, an elliptical lesion, and a class cue inside the lesion
//! (a colour tint plus a texture: stripes for adenomatous, spots for
//! hyperplastic). The NBI rendering draws the cue at full contrast; the WL
//! rendering attenuates it, lays a random colour cast over the lesion and
//! adds sensor noise, so the label is easy to read from NBI and hard from
//! WL. Subjects share lesion geometry (size and
//! elongation); colour and lighting vary per image, so no nuisance
//! attribute identifies a subject and with it a label.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::sample::{BBox, PairedSample, LABEL_ADENOMATOUS, LABEL_HYPERPLASTIC};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenConfig {
    pub image_size: usize,
    pub hyperplastic: usize,
    pub adenomatous: usize,
    pub subjects: usize,
    pub seed: u64,
    /// Cue strength in the NBI rendering.
    pub nbi_contrast: f64,
    /// Fraction of the NBI cue that survives in WL.
    pub wl_attenuation: f64,
    /// Standard deviation of the additive WL pixel noise.
    pub wl_noise: f64,
    /// Amplitude of the WL-only colour cast over the lesion.
    pub wl_clutter: f64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            hyperplastic: 200,
            adenomatous: 200,
            subjects: 40,
            seed: 0,
            nbi_contrast: 2.0,
            wl_attenuation: 0.6,
            wl_noise: 0.05,
            wl_clutter: 0.2,
        }
    }
}

impl SyntheticGenConfig {
    pub fn total(&self) -> usize {
        self.hyperplastic + self.adenomatous
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("synthetic image_size must be >= 8".into()));
        }
        if self.total() == 0 {
            return Err(Error::Config("no samples requested".into()));
        }
        let classes = (self.hyperplastic > 0) as usize + (self.adenomatous > 0) as usize;
        if self.subjects < classes || self.subjects > self.total() {
            return Err(Error::Config(format!(
                "{} subjects for {} samples in {classes} classes",
                self.subjects,
                self.total()
            )));
        }
        if !(self.wl_attenuation >= 0.0 && self.wl_noise >= 0.0 && self.nbi_contrast >= 0.0 && self.wl_clutter >= 0.0) {
            return Err(Error::Config(
                "contrast, attenuation, noise and clutter must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Subjects per class: proportional to the class sizes, at least one
    /// for each non-empty class.
    fn subject_split(&self) -> (usize, usize) {
        if self.hyperplastic == 0 {
            return (0, self.subjects);
        }
        if self.adenomatous == 0 {
            return (self.subjects, 0);
        }
        let s1 = ((self.subjects * self.adenomatous) as f64 / self.total() as f64).round() as usize;
        let s1 = s1.clamp(1, self.subjects - 1);
        (self.subjects - s1, s1)
    }
}

/// Blob geometry shared by a subject's lesions.
#[derive(Debug, Clone)]
struct SubjectStyle {
    radius: f64,
    aspect: f64,
}

impl SubjectStyle {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            radius: rng.gen_range(0.28..0.40),
            aspect: rng.gen_range(0.75..1.0),
        }
    }
}

/// Per-image appearance.
struct Appearance {
    tissue: [f64; 3],
    gain: f64,
    vignette: f64,
    lesion_shift: [f64; 3],
}

impl Appearance {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            tissue: [
                rng.gen_range(0.62..0.82),
                rng.gen_range(0.34..0.50),
                rng.gen_range(0.30..0.44),
            ],
            gain: rng.gen_range(0.8..1.1),
            vignette: rng.gen_range(0.1..0.3),
            lesion_shift: [
                rng.gen_range(0.0..0.08),
                rng.gen_range(-0.05..0.0),
                rng.gen_range(-0.04..0.0),
            ],
        }
    }
}

/// Per-class tint of the lesion (multiplied by the contrast).
const TINT: [[f64; 3]; 2] = [
    [0.05, 0.06, 0.08],    // hyperplastic: paler
    [-0.10, -0.09, -0.03], // adenomatous: darker, brownish
];
/// Per-channel texture amplitude (multiplied by the contrast).
const TEXTURE_AMP: [f64; 3] = [0.09, 0.11, 0.06];

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders one pair. `label` picks the cue; all geometry comes from `rng`.
fn render(
    cfg: &SyntheticGenConfig,
    style: &SubjectStyle,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, ImageTensor) {
    let n = cfg.image_size;
    let size = n as f64;
    let look = Appearance::draw(rng);
    let cx = size * (0.5 + rng.gen_range(-0.08..0.08));
    let cy = size * (0.5 + rng.gen_range(-0.08..0.08));
    let ra = size * style.radius * rng.gen_range(0.9..1.1);
    let rb = ra * style.aspect;
    let rot = rng.gen_range(0.0..PI);
    let (sr, cr) = rot.sin_cos();
    // smooth background blotches
    let blotches: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.04),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..2.0) * 2.0 * PI / size,
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let period = rng.gen_range(4.0..6.0);
    let orient = rng.gen_range(0.0..PI);
    let (so, co) = orient.sin_cos();
    let phase_u = rng.gen_range(0.0..2.0 * PI);
    let phase_v = rng.gen_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let cast: [f64; 3] = std::array::from_fn(|_| cfg.wl_clutter * rng.gen_range(-1.0..1.0));

    let mut nbi = Vec::with_capacity(n * n * 3);
    let mut wl = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let u = (dx * cr + dy * sr) / ra;
            let v = (-dx * sr + dy * cr) / rb;
            let r = (u * u + v * v).sqrt();
            let mask = (1.0 / (1.0 + ((r - 1.0) * 8.0).exp())).clamp(0.0, 1.0);
            let rc = ((dx * dx + dy * dy).sqrt() / (0.75 * size)).min(1.0);
            let light = look.gain * (1.0 - look.vignette * rc * rc);
            let blotch: f64 = blotches
                .iter()
                .map(|(amp, ang, freq, ph)| amp * ((px * ang.cos() + py * ang.sin()) * freq + ph).sin())
                .sum();
            let (tu, tv) = (px * co + py * so, -px * so + py * co);
            let texture = if label == LABEL_ADENOMATOUS {
                (2.0 * PI * tu / period + phase_u).sin()
            } else {
                let s = ((2.0 * PI * tu / period + phase_u).cos() * (2.0 * PI * tv / period + phase_v).cos()).max(0.0);
                2.0 * s * s - 0.5
            };
            let eps = if cfg.wl_noise > 0.0 { cfg.wl_noise } else { 0.0 };
            for c in 0..3 {
                let base = (look.tissue[c] + blotch + mask * look.lesion_shift[c]) * light;
                let cue = mask * (TINT[label][c] + TEXTURE_AMP[c] * texture) * cfg.nbi_contrast * light;
                nbi.push(base + cue);
                let mut w = base + cfg.wl_attenuation * cue + mask * cast[c] * light;
                if eps > 0.0 {
                    w += eps * noise.sample(rng);
                }
                wl.push(w);
            }
        }
    }
    (
        ImageTensor::new(n, n, wl).expect("valid dims"),
        ImageTensor::new(n, n, nbi).expect("valid dims"),
    )
}

/// Generates the dataset. A pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticGenConfig) -> Result<Vec<PairedSample>> {
    cfg.validate()?;
    let (s0, s1) = cfg.subject_split();
    let styles: Vec<SubjectStyle> = (0..cfg.subjects)
        .map(|i| SubjectStyle::draw(&mut sample_rng(cfg.seed, 1_000_000 + i as u64)))
        .collect();
    // subjects 0..s0 are hyperplastic, s0..s0+s1 adenomatous
    let mut plan = Vec::with_capacity(cfg.total());
    let (mut k0, mut k1) = (0, 0);
    while k0 < cfg.hyperplastic || k1 < cfg.adenomatous {
        if k0 < cfg.hyperplastic {
            plan.push((LABEL_HYPERPLASTIC, k0 % s0));
            k0 += 1;
        }
        if k1 < cfg.adenomatous {
            plan.push((LABEL_ADENOMATOUS, s0 + k1 % s1));
            k1 += 1;
        }
    }
    Ok(plan
        .into_iter()
        .enumerate()
        .map(|(i, (label, subject))| {
            let mut rng = sample_rng(cfg.seed, i as u64);
            let (wl, nbi) = render(cfg, &styles[subject], label, &mut rng);
            let bbox = Some(BBox::full(&wl));
            PairedSample {
                id: format!("synth_{i:05}"),
                wl,
                nbi,
                label,
                subject_id: format!("subj_{subject:03}"),
                bbox_wl: bbox,
                bbox_nbi: bbox,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::subjects;

    fn small() -> SyntheticGenConfig {
        SyntheticGenConfig {
            image_size: 16,
            hyperplastic: 6,
            adenomatous: 9,
            subjects: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_subjects() {
        let cfg = small();
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.len(), 15);
        assert_eq!(s.iter().filter(|x| x.label == 1).count(), 9);
        assert_eq!(subjects(&s).len(), 5);
        for x in &s {
            x.validate().unwrap();
        }
        // a subject never mixes labels
        for sub in subjects(&s) {
            let labels: Vec<_> = s.iter().filter(|x| x.subject_id == sub).map(|x| x.label).collect();
            assert!(labels.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn seed_determines_output() {
        let cfg = small();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticGenConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn no_attenuation_noise_or_clutter_means_identical_modalities() {
        let cfg = SyntheticGenConfig {
            wl_attenuation: 1.0,
            wl_noise: 0.0,
            wl_clutter: 0.0,
            ..small()
        };
        for s in generate_synthetic(&cfg).unwrap() {
            assert_eq!(s.wl, s.nbi);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SyntheticGenConfig { subjects: 0, ..small() }.validate().is_err());
        assert!(SyntheticGenConfig {
            subjects: 100,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticGenConfig {
            wl_noise: -1.0,
            ..small()
        }
        .validate()
        .is_err());
    }
}
