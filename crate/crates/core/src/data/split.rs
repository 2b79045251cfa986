//! Subject-level k-fold cross-validation: every image of a subject lands in
//! the same fold, so no subject is ever seen in training and validation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sample::PairedSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    /// Validation subjects of each fold.
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Sample indices (train, val) for `fold`. With a single fold there is
    /// nothing to hold out, so both sides are every sample.
    pub fn indices(&self, samples: &[PairedSample], fold: usize) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..samples.len()).collect();
        if self.k() == 1 {
            return (all.clone(), all);
        }
        let val: HashSet<&str> = self.folds[fold].iter().map(String::as_str).collect();
        all.into_iter()
            .partition(|&i| !val.contains(samples[i].subject_id.as_str()))
    }

    /// Subjects on the training side of `fold`.
    pub fn train_subjects(&self, fold: usize) -> Vec<&str> {
        if self.k() == 1 {
            return self.folds[0].iter().map(String::as_str).collect();
        }
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().map(String::as_str))
            .collect()
    }
}

/// Distinct subjects in order of first appearance.
pub fn subjects(samples: &[PairedSample]) -> Vec<String> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.subject_id.as_str()))
        .map(|s| s.subject_id.clone())
        .collect()
}

/// Shuffles subjects with a seeded generator and deals them round-robin
/// into `k` folds.
pub fn subject_kfold(samples: &[PairedSample], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut subs = subjects(samples);
    if subs.len() < k {
        return Err(Error::Config(format!("{} subjects cannot fill {k} folds", subs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subs.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, s) in subs.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;

    fn samples(subjects: usize, per: usize) -> Vec<PairedSample> {
        let img = ImageTensor::filled(2, 2, 0.5);
        (0..subjects * per)
            .map(|i| PairedSample {
                id: format!("{i}"),
                wl: img.clone(),
                nbi: img.clone(),
                label: i % 2,
                subject_id: format!("s{}", i % subjects),
                bbox_wl: None,
                bbox_nbi: None,
            })
            .collect()
    }

    #[test]
    fn ten_subjects_five_folds() {
        let s = samples(10, 3);
        let split = subject_kfold(&s, 5, 1).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<_> = split.folds.concat();
        all.sort();
        let mut expect = subjects(&s);
        expect.sort();
        assert_eq!(all, expect);
        assert_eq!(split, subject_kfold(&s, 5, 1).unwrap());
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(subject_kfold(&samples(3, 2), 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn indices_partition_samples() {
        let s = samples(10, 4);
        let split = subject_kfold(&s, 5, 9).unwrap();
        for f in 0..5 {
            let (tr, va) = split.indices(&s, f);
            assert_eq!(tr.len() + va.len(), s.len());
            assert_eq!(va.len(), 8);
            let trs: HashSet<_> = tr.iter().map(|&i| &s[i].subject_id).collect();
            assert!(va.iter().all(|&i| !trs.contains(&s[i].subject_id)));
        }
    }
}
