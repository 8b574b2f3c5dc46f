use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention projection a low-rank adapter pair is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    WQ,
    WK,
    WV,
    WO,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::WQ, LoraTarget::WK, LoraTarget::WV, LoraTarget::WO];

    pub fn tag(self) -> &'static str {
        match self {
            LoraTarget::WQ => "q",
            LoraTarget::WK => "k",
            LoraTarget::WV => "v",
            LoraTarget::WO => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn has(&self, target: LoraTarget) -> bool {
        self.targets.contains(&target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub use_layerscale: bool,
    #[serde(default = "default_layerscale_init")]
    pub layerscale_init: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Hidden `d×d` GELU layers inserted before the classifier (MLP-k head).
    #[serde(default)]
    pub head_hidden_layers: usize,
    /// Low-rank adapters beside the attention projections.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_layerscale_init() -> f64 {
    1e-5
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ViTConfig {
    /// Plain configuration with the usual defaults for the optional fields.
    pub fn new(
        image_size: usize,
        patch_size: usize,
        channels: usize,
        embed_dim: usize,
        num_heads: usize,
        depth: usize,
        num_classes: usize,
    ) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            channels,
            embed_dim,
            num_heads,
            depth,
            mlp_ratio: default_mlp_ratio(),
            num_classes,
            use_layerscale: false,
            layerscale_init: default_layerscale_init(),
            ln_eps: default_ln_eps(),
            head_hidden_layers: 0,
            lora: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::config("ln_eps must be positive"));
        }
        if !self.layerscale_init.is_finite() {
            return Err(Error::config("layerscale_init must be finite"));
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 || lora.rank > self.embed_dim {
                return Err(Error::config(format!(
                    "lora rank {} outside 1..={}",
                    lora.rank, self.embed_dim
                )));
            }
            if lora.targets.is_empty() {
                return Err(Error::config("lora needs at least one target"));
            }
            let mut t = lora.targets.clone();
            t.sort();
            t.dedup();
            if t.len() != lora.targets.len() {
                return Err(Error::config("duplicate lora target"));
            }
            if !lora.alpha.is_finite() {
                return Err(Error::config("lora alpha must be finite"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens before the class token is prepended.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Configuration without the adapter and head extensions.
    pub fn base(&self) -> ViTConfig {
        ViTConfig {
            head_hidden_layers: 0,
            lora: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let cfg = ViTConfig::new(8, 4, 3, 16, 2, 2, 4);
        assert_eq!(cfg.num_patches(), 4);
        assert_eq!(cfg.tokens(), 5);
        assert_eq!(cfg.patch_dim(), 48);
        assert_eq!(cfg.head_dim(), 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_divisibility() {
        assert!(ViTConfig::new(9, 4, 1, 16, 2, 2, 4).validate().is_err());
        assert!(ViTConfig::new(8, 4, 1, 16, 3, 2, 4).validate().is_err());
        assert!(ViTConfig::new(8, 4, 1, 16, 2, 0, 4).validate().is_err());
    }

    #[test]
    fn json_defaults_fill_optional_fields() {
        let cfg: ViTConfig = serde_json::from_str(
            r#"{"image_size":8,"patch_size":4,"channels":1,"embed_dim":16,
                "num_heads":2,"depth":2,"num_classes":4}"#,
        )
        .unwrap();
        assert_eq!(cfg.mlp_ratio, 4);
        assert_eq!(cfg.ln_eps, 1e-6);
        assert_eq!(cfg.layerscale_init, 1e-5);
        assert!(cfg.lora.is_none());
    }
}
