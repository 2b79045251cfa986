use crate::error::{Error, Result};

/// Architecture hyperparameters of the shared transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// Enforce the halved embedding width `d = 3 P^2 / 2`.
    pub half_width: bool,
}

impl ModelConfig {
    /// ViT-Small geometry at 224x224: N = 196, d = 384, h = 6, d' = 64, 12 blocks.
    pub fn vit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 384,
            heads: 6,
            layers: 12,
            mlp_hidden: 4 * 384,
            num_classes: 2,
            half_width: true,
        }
    }

    /// Small CPU-trainable geometry with the same structural relations:
    /// 64x64 input, P = 8, N = 64, d = 96, h = 6, d' = 16. One block keeps
    /// a three-mode, fifteen-fold ablation inside half an hour on one core.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 96,
            heads: 6,
            layers: 1,
            mlp_hidden: 4 * 96,
            num_classes: 2,
            half_width: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-small" => Ok(Self::vit_small()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected vit-small|desk)"
            ))),
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Length of one flattened patch, `3 P^2`.
    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.half_width && 2 * self.embed_dim != 3 * self.patch_size * self.patch_size {
            return Err(Error::Config(format!(
                "embed dim {} != 3*P^2/2 = {} for patch size {}",
                self.embed_dim,
                3 * self.patch_size * self.patch_size / 2,
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_geometry() {
        let p = ModelConfig::vit_small();
        p.validate().unwrap();
        assert_eq!((p.num_patches(), p.embed_dim, p.heads, p.head_dim()), (196, 384, 6, 64));
        let d = ModelConfig::desk();
        d.validate().unwrap();
        assert_eq!((d.num_patches(), d.embed_dim, d.heads, d.head_dim()), (64, 96, 6, 16));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.image_size = 60;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.embed_dim = 100;
        c.half_width = false;
        assert!(c.validate().is_err(), "100 is not divisible by 6 heads");
        let mut c = ModelConfig::desk();
        c.embed_dim = 102;
        assert!(c.validate().is_err(), "faithful width must be 3P^2/2");
        c.half_width = false;
        c.validate().unwrap();
    }
}
