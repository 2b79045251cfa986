//! End-to-end finite-difference check of the paired training loss with
//! respect to model parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{total_loss, AlignMode};
use crate::autodiff::gradcheck::{check_scalar_fn, random_tensor, sample_coords, GradCheckReport};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{AlignConfig, CrossModalModel};
use crate::vit::ModelConfig;

/// Coordinates always drawn from the first response-map query projection,
/// on top of the uniformly sampled ones.
const SAM_COORDS: usize = 4;

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let data = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageTensor::new(size, size, data).expect("valid dims")
}

fn flat_params(model: &CrossModalModel) -> Vec<f64> {
    model
        .stores()
        .iter()
        .flat_map(|s| s.iter().flat_map(|p| p.tensor.data().iter().copied()))
        .collect()
}

fn set_flat(model: &mut CrossModalModel, flat: &[f64]) {
    let mut off = 0;
    for s in model.stores_mut() {
        for p in s.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

fn loss_of(model: &CrossModalModel, wl: &ImageTensor, nbi: &ImageTensor, label: usize, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward_pair(&mut g, &bound, wl, nbi, AlignMode::CgaSam)?;
    let loss = total_loss(&mut g, &out, label, AlignMode::CgaSam, lambda)?;
    Ok(g.value(loss.total).item())
}

/// Checks d(total loss)/d(param) on `coords` random parameter coordinates
/// plus a few entries of the first SAM query projection. The SAM
/// projections are redrawn at a larger scale so the response maps are far
/// from uniform and their gradients are not vanishingly small.
pub fn check_model_gradient(
    cfg: &ModelConfig,
    align: &AlignConfig,
    lambda: f64,
    seed: u64,
    coords: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CrossModalModel::new(cfg.clone(), align, seed)?;
    if let Some(head) = &mut model.alignment {
        for p in head.params.iter_mut() {
            let t = random_tensor(&mut rng, p.tensor.shape());
            for (dst, src) in p.tensor.data_mut().iter_mut().zip(t.data()) {
                *dst = 0.25 * src;
            }
        }
    }
    let wl = random_image(&mut rng, cfg.image_size);
    let nbi = random_image(&mut rng, cfg.image_size);
    let label = rng.gen_range(0..cfg.num_classes);

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward_pair(&mut g, &bound, &wl, &nbi, AlignMode::CgaSam)?;
    let loss = total_loss(&mut g, &out, label, AlignMode::CgaSam, lambda)?;
    g.backward(loss.total)?;
    model.zero_grad();
    model.accumulate_grads(&g, &bound);
    let analytic: Vec<f64> = model
        .stores()
        .iter()
        .flat_map(|s| {
            s.iter().flat_map(|p| {
                p.tensor
                    .grad()
                    .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
            })
        })
        .collect();
    let x = flat_params(&model);
    let mut picked = sample_coords(&mut rng, x.len(), coords);
    let backbone_len = model.backbone.params.num_values();
    if x.len() > backbone_len {
        let wq = model
            .alignment
            .as_ref()
            .map_or(0, |h| h.params.iter().next().map_or(0, |p| p.tensor.numel()));
        picked.extend(
            sample_coords(&mut rng, wq, SAM_COORDS)
                .into_iter()
                .map(|i| backbone_len + i),
        );
        picked.sort_unstable();
        picked.dedup();
    }

    let mut probe = model.clone();
    for s in probe.stores_mut() {
        s.set_requires_grad(false);
    }
    let mut failure: Option<Error> = None;
    let report = check_scalar_fn(
        "model_total_loss",
        &x,
        &analytic,
        |v| {
            set_flat(&mut probe, v);
            loss_of(&probe, &wl, &nbi, label, lambda).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        Some(&picked),
        tolerance,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::MODEL_TOLERANCE;

    #[test]
    fn tiny_model_passes() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 96,
            heads: 6,
            layers: 1,
            mlp_hidden: 32,
            num_classes: 2,
            half_width: true,
        };
        let r = check_model_gradient(&cfg, &AlignConfig::default(), 0.3, 3, 20, MODEL_TOLERANCE).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.coordinates >= 20);
    }
}
