use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal_core::autodiff::{Graph, Tensor};
use xmodal_core::image::ImageTensor;
use xmodal_core::model::{AlignConfig, CrossModalModel};
use xmodal_core::vit::{Modality, ModelConfig, Vit};

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    ImageTensor::new(
        size,
        size,
        (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn vit_small_preset_geometry_and_size() {
    let cfg = ModelConfig::vit_small();
    assert_eq!(
        (cfg.num_patches(), cfg.embed_dim, cfg.heads, cfg.head_dim()),
        (196, 384, 6, 64)
    );
    let n = Vit::zeroed(cfg).unwrap().num_params() as f64;
    assert!((n - 21.67e6).abs() / 21.67e6 < 0.05, "{n} parameters");
}

#[test]
fn desk_preset_keeps_the_structural_relations() {
    let cfg = ModelConfig::desk();
    assert_eq!(cfg.embed_dim, 3 * cfg.patch_size * cfg.patch_size / 2);
    assert_eq!(cfg.head_dim() * cfg.heads, cfg.embed_dim);
    assert_eq!(cfg.num_patches(), 64);
}

#[test]
fn blocks_are_permutation_equivariant_over_tokens() {
    let cfg = ModelConfig::desk();
    let vit = Vit::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = cfg.tokens();
    let x: Vec<f64> = (0..n * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(3, 17);
    let permuted: Vec<f64> = perm
        .iter()
        .flat_map(|&r| x[r * cfg.embed_dim..(r + 1) * cfg.embed_dim].iter().copied())
        .collect();

    let run = |data: Vec<f64>| {
        let mut g = Graph::new();
        let b = vit.bind(&mut g);
        let mut v = g.constant(Tensor::new(&[n, cfg.embed_dim], data).unwrap());
        for layer in 0..cfg.layers {
            v = vit.block_forward(&mut g, &b, layer, v, None).unwrap();
        }
        g.value(v).data().to_vec()
    };
    let y = run(x);
    let yp = run(permuted);
    for (i, &r) in perm.iter().enumerate() {
        for j in 0..cfg.embed_dim {
            let (a, b) = (yp[i * cfg.embed_dim + j], y[r * cfg.embed_dim + j]);
            assert!((a - b).abs() < 1e-10, "row {i} col {j}: {a} vs {b}");
        }
    }
}

#[test]
fn modality_tag_does_not_change_the_forward_pass() {
    let vit = Vit::new(ModelConfig::desk(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let img = random_image(&mut rng, 64);
        assert_eq!(
            vit.infer(&img, Modality::Wl).unwrap(),
            vit.infer(&img, Modality::Nbi).unwrap()
        );
    }
}

#[test]
fn pruning_keeps_wl_logits_bit_identical() {
    let cfg = ModelConfig {
        layers: 2,
        ..ModelConfig::desk()
    };
    let align = AlignConfig {
        levels: vec![0, 1],
        sam_dim: None,
    };
    let full = CrossModalModel::new(cfg, &align, 6).unwrap();
    let pruned = full.pruned();
    assert!(pruned.is_pruned() && !full.is_pruned());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let img = random_image(&mut rng, 64);
        assert_eq!(full.infer(&img).unwrap().logits, pruned.infer(&img).unwrap().logits);
    }
    assert!(pruned.response_map(&random_image(&mut rng, 64), Modality::Wl).is_err());
}

#[test]
fn class_attention_is_a_distribution_over_patches() {
    let vit = Vit::new(ModelConfig::desk(), 1).unwrap();
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 64);
    let row = Vit::last_layer_cls_attention(&vit.infer(&img, Modality::Wl).unwrap());
    assert_eq!(row.len(), 64);
    // the class token's attention to itself is excluded
    let s: f64 = row.iter().sum();
    assert!(s > 0.0 && s < 1.0);
}
