use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::vit::ModelConfig;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered list of named learnable tensors. The order is the checkpoint
/// order and the optimizer's iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every tensor in `g` as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(&p.tensor)).collect()
    }

    /// Adds the graph's leaf gradients for `vars` (as returned by
    /// [`ParamStore::bind`]) into each tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(*v) {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.params.iter_mut().for_each(|p| p.tensor.set_requires_grad(flag));
    }
}

/// Truncated normal at two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// Query, key and value projections are `d x d`, with head `i` owning
    /// columns `i*d'..(i+1)*d'`.
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

/// Where each backbone weight sits in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitLayout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Builds the backbone parameters in checkpoint order. With `rng` the
/// weights get their training init; without, every tensor is zero (used as a
/// template when loading).
pub fn build_backbone(cfg: &ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> (ParamStore, VitLayout) {
    let d = cfg.embed_dim;
    let mut store = ParamStore::default();
    let mut normal = |shape: &[usize]| match rng.as_deref_mut() {
        Some(r) => trunc_normal(r, shape, INIT_STD),
        None => Tensor::zeros(shape),
    };
    let zeros = |shape: &[usize]| Tensor::zeros(shape);
    let ones = |shape: &[usize]| Tensor::full(shape, 1.0);

    let patch_w = store.push("patch_embed.weight", normal(&[cfg.patch_len(), d]));
    let patch_b = store.push("patch_embed.bias", zeros(&[d]));
    let cls_token = store.push("cls_token", zeros(&[1, d]));
    let pos_embed = store.push("pos_embed", normal(&[cfg.tokens(), d]));
    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockLayout {
            ln1_gamma: store.push(p("norm1.weight"), ones(&[d])),
            ln1_beta: store.push(p("norm1.bias"), zeros(&[d])),
            w_q: store.push(p("attn.q.weight"), normal(&[d, d])),
            b_q: store.push(p("attn.q.bias"), zeros(&[d])),
            w_k: store.push(p("attn.k.weight"), normal(&[d, d])),
            b_k: store.push(p("attn.k.bias"), zeros(&[d])),
            w_v: store.push(p("attn.v.weight"), normal(&[d, d])),
            b_v: store.push(p("attn.v.bias"), zeros(&[d])),
            w_o: store.push(p("attn.proj.weight"), normal(&[d, d])),
            b_o: store.push(p("attn.proj.bias"), zeros(&[d])),
            ln2_gamma: store.push(p("norm2.weight"), ones(&[d])),
            ln2_beta: store.push(p("norm2.bias"), zeros(&[d])),
            w_fc1: store.push(p("mlp.fc1.weight"), normal(&[d, cfg.mlp_hidden])),
            b_fc1: store.push(p("mlp.fc1.bias"), zeros(&[cfg.mlp_hidden])),
            w_fc2: store.push(p("mlp.fc2.weight"), normal(&[cfg.mlp_hidden, d])),
            b_fc2: store.push(p("mlp.fc2.bias"), zeros(&[d])),
        });
    }
    let norm_gamma = store.push("norm.weight", ones(&[d]));
    let norm_beta = store.push("norm.bias", zeros(&[d]));
    let head_w = store.push("head.weight", normal(&[d, cfg.num_classes]));
    let head_b = store.push("head.bias", zeros(&[cfg.num_classes]));
    let layout = VitLayout {
        patch_w,
        patch_b,
        cls_token,
        pos_embed,
        blocks,
        norm_gamma,
        norm_beta,
        head_w,
        head_b,
    };
    (store, layout)
}

/// Seeded generator for a named initialisation stream, so the backbone init
/// does not depend on whether alignment parameters are also created.
pub fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
