//! Backbone plus the optional, discardable alignment projections.

use crate::align::{spatial_attention, AlignMode, LevelFeatures, PairOutputs, ResponseMap, SamParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vit::params::{init_rng, trunc_normal, INIT_STD};
use crate::vit::{BoundVit, Inference, Modality, ModelConfig, ParamStore, Vit};

/// Init stream for the alignment projections; distinct from the backbone's
/// so every mode starts from the same backbone weights for a given seed.
const SAM_STREAM: u64 = 1;

/// Where alignment is applied and how wide the response-map projections are.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignConfig {
    /// Block indices whose normed output is aligned; empty means the last
    /// block only.
    pub levels: Vec<usize>,
    /// Projection width of the response-map query/key; `None` means `d`.
    pub sam_dim: Option<usize>,
}

impl AlignConfig {
    pub fn resolved_levels(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        let mut levels = if self.levels.is_empty() {
            vec![cfg.layers - 1]
        } else {
            self.levels.clone()
        };
        levels.sort_unstable();
        levels.dedup();
        if let Some(bad) = levels.iter().find(|&&l| l >= cfg.layers) {
            return Err(Error::Config(format!(
                "alignment level {bad} but only {} blocks",
                cfg.layers
            )));
        }
        Ok(levels)
    }
}

/// Training-only state: the response-map projections of every site.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHead {
    pub params: ParamStore,
    pub sites: Vec<SamParams>,
}

impl AlignmentHead {
    pub fn new(cfg: &ModelConfig, align: &AlignConfig, seed: Option<u64>) -> Result<Self> {
        let levels = align.resolved_levels(cfg)?;
        let d = cfg.embed_dim;
        let dim = align.sam_dim.unwrap_or(d);
        if dim == 0 {
            return Err(Error::Config("sam_dim must be positive".into()));
        }
        let mut rng = seed.map(|s| init_rng(s, SAM_STREAM));
        let mut params = ParamStore::default();
        let mut sites = Vec::with_capacity(levels.len());
        for level in levels {
            let mut init = |name: String| {
                let t = match rng.as_mut() {
                    Some(r) => trunc_normal(r, &[d, dim], INIT_STD),
                    None => crate::autodiff::Tensor::zeros(&[d, dim]),
                };
                params.push(name, t)
            };
            let w_q = init(format!("sam.{level}.w_q"));
            let w_k = init(format!("sam.{level}.w_k"));
            sites.push(SamParams { level, dim, w_q, w_k });
        }
        Ok(Self { params, sites })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalModel {
    pub backbone: Vit,
    /// `None` once pruned for deployment.
    pub alignment: Option<AlignmentHead>,
}

/// Graph handles for a whole model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub backbone: BoundVit,
    pub sam: Vec<Var>,
}

impl CrossModalModel {
    pub fn new(config: ModelConfig, align: &AlignConfig, seed: u64) -> Result<Self> {
        let backbone = Vit::new(config, seed)?;
        let alignment = Some(AlignmentHead::new(&backbone.config, align, Some(seed))?);
        Ok(Self { backbone, alignment })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn is_pruned(&self) -> bool {
        self.alignment.is_none()
    }

    /// Copy without any alignment parameters; predicts identically.
    pub fn pruned(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            alignment: None,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(g),
            sam: self.alignment.as_ref().map(|a| a.params.bind(g)).unwrap_or_default(),
        }
    }

    /// Copies leaf gradients from `g` into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundModel) {
        self.backbone.params.accumulate_grads(g, bound.backbone.vars());
        if let Some(a) = &mut self.alignment {
            a.params.accumulate_grads(g, &bound.sam);
        }
    }

    pub fn zero_grad(&mut self) {
        self.backbone.params.zero_grad();
        if let Some(a) = &mut self.alignment {
            a.params.zero_grad();
        }
    }

    /// All learnable stores, backbone first.
    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.backbone.params];
        if let Some(a) = &mut self.alignment {
            v.push(&mut a.params);
        }
        v
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.backbone.params];
        if let Some(a) = &self.alignment {
            v.push(&a.params);
        }
        v
    }

    fn head(&self) -> Result<&AlignmentHead> {
        self.alignment
            .as_ref()
            .ok_or_else(|| Error::Contract("model is pruned: alignment parameters were removed".into()))
    }

    /// Class feature, patch features and (when `with_maps`) response maps at
    /// every alignment site for one modality pass.
    fn site_features(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        out: &crate::vit::BackboneOutput,
        with_maps: bool,
    ) -> Result<Vec<(Var, Option<Var>)>> {
        let head = self.head()?;
        let last = self.config().layers - 1;
        let mut feats = Vec::with_capacity(head.sites.len());
        for site in &head.sites {
            let (c, f) = if site.level == last {
                (out.class_feature, out.patch_features)
            } else {
                let normed = self
                    .backbone
                    .external_norm(g, &bound.backbone, out.hidden[site.level])?;
                self.backbone.split_tokens(g, normed)?
            };
            let map = if with_maps {
                let (wq, wk) = (bound.sam[site.w_q.0], bound.sam[site.w_k.0]);
                Some(spatial_attention(g, f, c, wq, wk)?)
            } else {
                None
            };
            feats.push((c, map));
        }
        Ok(feats)
    }

    /// Runs both modalities through the shared backbone (just WL in the
    /// WL-only mode) and gathers everything the loss needs.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        wl: &ImageTensor,
        nbi: &ImageTensor,
        mode: AlignMode,
    ) -> Result<PairOutputs> {
        let b = &bound.backbone;
        let out_w = self.backbone.forward(g, b, wl, Modality::Wl, false)?;
        let logits_w = self.backbone.classify(g, b, out_w.class_feature)?;
        if !mode.uses_nbi() {
            return Ok(PairOutputs {
                logits_w,
                logits_n: None,
                levels: Vec::new(),
            });
        }
        let out_n = self.backbone.forward(g, b, nbi, Modality::Nbi, false)?;
        let logits_n = self.backbone.classify(g, b, out_n.class_feature)?;
        let fw = self.site_features(g, bound, &out_w, mode.uses_sam())?;
        let fn_ = self.site_features(g, bound, &out_n, mode.uses_sam())?;
        let levels = fw
            .into_iter()
            .zip(fn_)
            .map(|((c_w, r_w), (c_n, r_n))| LevelFeatures { c_w, c_n, r_w, r_n })
            .collect();
        Ok(PairOutputs {
            logits_w,
            logits_n: Some(logits_n),
            levels,
        })
    }

    /// Inference through the backbone alone.
    pub fn infer(&self, image: &ImageTensor) -> Result<Inference> {
        self.backbone.infer(image, Modality::Wl)
    }

    /// Response map of the last alignment site for one image.
    pub fn response_map(&self, image: &ImageTensor, modality: Modality) -> Result<ResponseMap> {
        self.head()?;
        let mut frozen = self.clone();
        for s in frozen.stores_mut() {
            s.set_requires_grad(false);
        }
        let mut g = Graph::new();
        let bound = frozen.bind(&mut g);
        let out = frozen
            .backbone
            .forward(&mut g, &bound.backbone, image, modality, false)?;
        let feats = frozen.site_features(&mut g, &bound, &out, true)?;
        let map = feats.last().and_then(|f| f.1).expect("at least one site with a map");
        ResponseMap::new(modality, g.value(map).data().to_vec())
    }
}
