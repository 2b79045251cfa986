use std::fmt;

use crate::autodiff::{Graph, Tensor, Var, LAYERNORM_EPS};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vit::params::{build_backbone, init_rng, ParamId, ParamStore, VitLayout};
use crate::vit::ModelConfig;

/// Init stream for backbone weights.
const BACKBONE_STREAM: u64 = 0;

/// Which imaging modality an input came from. The tag only labels outputs:
/// both modalities run through the same weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// White light.
    Wl,
    /// Narrow-band imaging.
    Nbi,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Wl => "wl",
            Modality::Nbi => "nbi",
        })
    }
}

/// Flattens an image into `N x 3P^2` patch rows: patches in raster order,
/// pixels row-major inside a patch, channels innermost.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} image not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = 3 * patch * patch;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for y in py * patch..(py + 1) * patch {
                let start = (y * w + px * patch) * 3;
                data.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(&[gh * gw, row_len], data)
}

/// Per-channel input standardization (the usual ImageNet statistics).
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Standardizes patch rows from [`patchify`] channel by channel.
pub fn normalize_patches(patches: &mut Tensor) {
    for (i, v) in patches.data_mut().iter_mut().enumerate() {
        let c = i % 3;
        *v = (*v - PIXEL_MEAN[c]) / PIXEL_STD[c];
    }
}

/// The shared transformer: weights plus where each one lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: VitLayout,
}

/// Graph handles for every backbone parameter, registered once per graph
/// and reused by every forward pass in it.
#[derive(Debug, Clone)]
pub struct BoundVit {
    vars: Vec<Var>,
}

impl BoundVit {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub modality: Modality,
    /// All tokens after the external layer norm, `(N+1) x d`.
    pub tokens: Var,
    /// Class token after the external layer norm, `1 x d`.
    pub class_feature: Var,
    /// Patch tokens after the external layer norm, `N x d`.
    pub patch_features: Var,
    /// Raw output of each block, before the external norm.
    pub hidden: Vec<Var>,
    /// `attn[layer][head]`, each `(N+1) x (N+1)`; empty unless requested.
    pub attn: Vec<Vec<Var>>,
}

/// Plain values from one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub class_feature: Vec<f64>,
    pub patch_features: Tensor,
    /// Last-layer attention per head, each `(N+1) x (N+1)`.
    pub last_attn: Vec<Tensor>,
}

impl Vit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed, BACKBONE_STREAM);
        let (params, layout) = build_backbone(&config, Some(&mut rng));
        Ok(Self { config, params, layout })
    }

    /// All-zero weights with the right shapes (LN gains are one).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_backbone(&config, None);
        Ok(Self { config, params, layout })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundVit {
        BoundVit {
            vars: self.params.bind(g),
        }
    }

    /// `concat(cls, norm(patches) W + b) + E`, class token at row 0.
    pub fn embed(&self, g: &mut Graph, b: &BoundVit, image: &ImageTensor) -> Result<Var> {
        let cfg = &self.config;
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(Error::Shape(format!(
                "model expects {0}x{0} images, got {1}x{2}",
                cfg.image_size,
                image.height(),
                image.width()
            )));
        }
        let mut patches = patchify(image, cfg.patch_size)?;
        normalize_patches(&mut patches);
        let patches = g.constant(patches);
        let l = &self.layout;
        let proj = g.matmul(patches, b.var(l.patch_w))?;
        let proj = g.add_row(proj, b.var(l.patch_b))?;
        let tokens = g.concat_rows(&[b.var(l.cls_token), proj])?;
        g.add(tokens, b.var(l.pos_embed))
    }

    fn linear(g: &mut Graph, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    /// Pre-LN block: `x' = x + MSA(LN(x))`, `out = x' + FFN(LN(x'))`.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        b: &BoundVit,
        layer: usize,
        x: Var,
        attn_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let l = &self.layout.blocks[layer];
        let dh = self.config.head_dim();
        let h = g.layernorm(x, b.var(l.ln1_gamma), b.var(l.ln1_beta), LAYERNORM_EPS)?;
        let q = Self::linear(g, h, b.var(l.w_q), b.var(l.b_q))?;
        let k = Self::linear(g, h, b.var(l.w_k), b.var(l.b_k))?;
        let v = Self::linear(g, h, b.var(l.w_v), b.var(l.b_v))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let qi = g.slice_cols(q, lo, hi)?;
            let ki = g.slice_cols(k, lo, hi)?;
            let vi = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(ki)?;
            let scores = g.matmul(qi, kt)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores);
            maps.push(a);
            heads.push(g.matmul(a, vi)?);
        }
        if let Some(out) = attn_out {
            *out = maps;
        }
        let msa = g.concat_cols(&heads)?;
        let msa = Self::linear(g, msa, b.var(l.w_o), b.var(l.b_o))?;
        let x = g.add(x, msa)?;

        let h = g.layernorm(x, b.var(l.ln2_gamma), b.var(l.ln2_beta), LAYERNORM_EPS)?;
        let f = Self::linear(g, h, b.var(l.w_fc1), b.var(l.b_fc1))?;
        let f = g.gelu(f);
        let f = Self::linear(g, f, b.var(l.w_fc2), b.var(l.b_fc2))?;
        g.add(x, f)
    }

    /// The external layer norm that feeds the head and both alignment losses.
    pub fn external_norm(&self, g: &mut Graph, b: &BoundVit, x: Var) -> Result<Var> {
        let l = &self.layout;
        g.layernorm(x, b.var(l.norm_gamma), b.var(l.norm_beta), LAYERNORM_EPS)
    }

    /// Splits normed tokens into the class row and the patch rows.
    pub fn split_tokens(&self, g: &mut Graph, normed: Var) -> Result<(Var, Var)> {
        let n = self.config.tokens();
        Ok((g.slice_rows(normed, 0, 1)?, g.slice_rows(normed, 1, n)?))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundVit,
        image: &ImageTensor,
        modality: Modality,
        capture_attn: bool,
    ) -> Result<BackboneOutput> {
        let mut x = self.embed(g, b, image)?;
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut attn = Vec::new();
        for layer in 0..self.config.layers {
            let mut maps = Vec::new();
            x = self.block_forward(g, b, layer, x, capture_attn.then_some(&mut maps))?;
            if capture_attn {
                attn.push(maps);
            }
            hidden.push(x);
        }
        let tokens = self.external_norm(g, b, x)?;
        let (class_feature, patch_features) = self.split_tokens(g, tokens)?;
        Ok(BackboneOutput {
            modality,
            tokens,
            class_feature,
            patch_features,
            hidden,
            attn,
        })
    }

    /// Linear head on a class feature; returns logits (no softmax).
    pub fn classify(&self, g: &mut Graph, b: &BoundVit, class_feature: Var) -> Result<Var> {
        let l = &self.layout;
        Self::linear(g, class_feature, b.var(l.head_w), b.var(l.head_b))
    }

    /// Forward pass with no gradient bookkeeping; returns plain values.
    pub fn infer(&self, image: &ImageTensor, modality: Modality) -> Result<Inference> {
        let mut frozen = self.params.clone();
        frozen.set_requires_grad(false);
        let mut g = Graph::new();
        let b = BoundVit {
            vars: frozen.bind(&mut g),
        };
        let out = self.forward(&mut g, &b, image, modality, true)?;
        let logits = self.classify(&mut g, &b, out.class_feature)?;
        let last_attn = out
            .attn
            .last()
            .map(|heads| heads.iter().map(|v| g.value(*v).clone()).collect())
            .unwrap_or_default();
        Ok(Inference {
            logits: g.value(logits).data().to_vec(),
            class_feature: g.value(out.class_feature).data().to_vec(),
            patch_features: g.value(out.patch_features).clone(),
            last_attn,
        })
    }

    /// Class-token row of the last layer's attention, averaged over heads.
    pub fn last_layer_cls_attention(inf: &Inference) -> Vec<f64> {
        let heads = inf.last_attn.len() as f64;
        let n = inf.last_attn[0].last_dim();
        let mut row = vec![0.0; n - 1];
        for a in &inf.last_attn {
            for (r, v) in row.iter_mut().zip(&a.row(0)[1..]) {
                *r += v / heads;
            }
        }
        row
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}
