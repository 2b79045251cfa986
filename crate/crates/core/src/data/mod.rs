//! Paired WL/NBI samples: loading, synthetic generation, augmentation and
//! subject-level splits.

pub mod augment;
pub mod manifest;
pub mod sample;
pub mod split;
pub mod synth;

pub use augment::{augment, AugmentParams, AugmentRecord};
pub use manifest::{load_manifest, write_dataset, LoadMode};
pub use sample::{crop_bbox, BBox, PairedSample, LABEL_ADENOMATOUS, LABEL_HYPERPLASTIC};
pub use split::{subject_kfold, subjects, FoldSplit};
pub use synth::{generate_synthetic, SyntheticGenConfig};
