//! The named parameter set of a ViT.
//!
//! Enumeration order (used by masks, optimizer state and checkpoints) is the
//! order of [`ViTParams::named`]: patch embedding, class token, positional
//! embeddings, blocks `0..L` (ln1, attention, ls1, ln2, mlp, ls2), final
//! norm, classifier; then the extensions (per-block adapter pairs, hidden
//! head layers). Initialization draws in that same order, so the base
//! weights for a seed never depend on which extensions are enabled.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::config::{LoraTarget, ViTConfig};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub target: LoraTarget,
    /// `d × rank`
    pub a: Tensor,
    /// `rank × d`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ls1: Option<Tensor>,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
    pub ls2: Option<Tensor>,
    pub lora: Vec<LoraPair>,
}

impl BlockParams {
    pub fn lora_for(&self, target: LoraTarget) -> Option<&LoraPair> {
        self.lora.iter().find(|p| p.target == target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub cls_token: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub w_pred: Tensor,
    pub b_pred: Tensor,
    pub head_hidden: Vec<HeadLayer>,
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| INIT_STD * rng.normal())
}

/// Draws a fresh parameter set: weights `N(0, 0.02²)`, biases and betas 0,
/// gammas 1, LayerScale at `layerscale_init`, adapter `B` factors 0.
pub fn init_params(cfg: &ViTConfig, rng: &mut Rng) -> Result<ViTParams> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let w_e = normal(&[cfg.patch_dim(), d], rng);
    let b_e = Tensor::zeros(&[d]);
    let cls_token = normal(&[d], rng);
    let pos = normal(&[cfg.tokens(), d], rng);
    let ls = |cfg: &ViTConfig| {
        cfg.use_layerscale
            .then(|| Tensor::filled(&[d], cfg.layerscale_init))
    };
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        blocks.push(BlockParams {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: normal(&[d, d], rng),
            b_q: Tensor::zeros(&[d]),
            w_k: normal(&[d, d], rng),
            b_k: Tensor::zeros(&[d]),
            w_v: normal(&[d, d], rng),
            b_v: Tensor::zeros(&[d]),
            w_o: normal(&[d, d], rng),
            b_o: Tensor::zeros(&[d]),
            ls1: ls(cfg),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_fc1: normal(&[d, hidden], rng),
            b_fc1: Tensor::zeros(&[hidden]),
            w_fc2: normal(&[hidden, d], rng),
            b_fc2: Tensor::zeros(&[d]),
            ls2: ls(cfg),
            lora: Vec::new(),
        });
    }
    let final_ln_gamma = Tensor::ones(&[d]);
    let final_ln_beta = Tensor::zeros(&[d]);
    let w_pred = normal(&[d, cfg.num_classes], rng);
    let b_pred = Tensor::zeros(&[cfg.num_classes]);
    let mut params = ViTParams {
        w_e,
        b_e,
        cls_token,
        pos,
        blocks,
        final_ln_gamma,
        final_ln_beta,
        w_pred,
        b_pred,
        head_hidden: Vec::new(),
    };
    params.add_extensions(cfg, rng)?;
    Ok(params)
}

impl ViTParams {
    /// Adds whichever adapter pairs and hidden head layers `cfg` asks for and
    /// this set lacks. Existing tensors are untouched.
    pub fn add_extensions(&mut self, cfg: &ViTConfig, rng: &mut Rng) -> Result<()> {
        let d = cfg.embed_dim;
        if let Some(lora) = &cfg.lora {
            for block in &mut self.blocks {
                for target in LoraTarget::ALL {
                    if lora.has(target) && block.lora_for(target).is_none() {
                        block.lora.push(LoraPair {
                            target,
                            a: normal(&[d, lora.rank], rng),
                            b: Tensor::zeros(&[lora.rank, d]),
                        });
                    }
                }
                block.lora.sort_by_key(|p| p.target);
            }
        }
        while self.head_hidden.len() < cfg.head_hidden_layers {
            self.head_hidden.push(HeadLayer {
                weight: normal(&[d, d], rng),
                bias: Tensor::zeros(&[d]),
            });
        }
        self.check_shapes(cfg)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.w_e),
            ("patch_embed.bias".into(), &self.b_e),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("ln1.gamma"), &b.ln1_gamma));
            out.push((p("ln1.beta"), &b.ln1_beta));
            out.push((p("attn.w_q"), &b.w_q));
            out.push((p("attn.b_q"), &b.b_q));
            out.push((p("attn.w_k"), &b.w_k));
            out.push((p("attn.b_k"), &b.b_k));
            out.push((p("attn.w_v"), &b.w_v));
            out.push((p("attn.b_v"), &b.b_v));
            out.push((p("attn.w_o"), &b.w_o));
            out.push((p("attn.b_o"), &b.b_o));
            if let Some(ls) = &b.ls1 {
                out.push((p("ls1"), ls));
            }
            out.push((p("ln2.gamma"), &b.ln2_gamma));
            out.push((p("ln2.beta"), &b.ln2_beta));
            out.push((p("mlp.w_fc1"), &b.w_fc1));
            out.push((p("mlp.b_fc1"), &b.b_fc1));
            out.push((p("mlp.w_fc2"), &b.w_fc2));
            out.push((p("mlp.b_fc2"), &b.b_fc2));
            if let Some(ls) = &b.ls2 {
                out.push((p("ls2"), ls));
            }
        }
        out.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &self.final_ln_beta));
        out.push(("head.w_pred".into(), &self.w_pred));
        out.push(("head.b_pred".into(), &self.b_pred));
        for (l, b) in self.blocks.iter().enumerate() {
            for pair in &b.lora {
                let t = pair.target.tag();
                out.push((format!("blocks.{l}.attn.lora_{t}.a"), &pair.a));
                out.push((format!("blocks.{l}.attn.lora_{t}.b"), &pair.b));
            }
        }
        for (i, h) in self.head_hidden.iter().enumerate() {
            out.push((format!("head_mlp.{i}.weight"), &h.weight));
            out.push((format!("head_mlp.{i}.bias"), &h.bias));
        }
        out
    }

    /// Mutable view in the same order as [`ViTParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.w_e),
            ("patch_embed.bias".into(), &mut self.b_e),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos),
        ];
        let mut lora_views = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("ln1.gamma"), &mut b.ln1_gamma));
            out.push((p("ln1.beta"), &mut b.ln1_beta));
            out.push((p("attn.w_q"), &mut b.w_q));
            out.push((p("attn.b_q"), &mut b.b_q));
            out.push((p("attn.w_k"), &mut b.w_k));
            out.push((p("attn.b_k"), &mut b.b_k));
            out.push((p("attn.w_v"), &mut b.w_v));
            out.push((p("attn.b_v"), &mut b.b_v));
            out.push((p("attn.w_o"), &mut b.w_o));
            out.push((p("attn.b_o"), &mut b.b_o));
            if let Some(ls) = &mut b.ls1 {
                out.push((p("ls1"), ls));
            }
            out.push((p("ln2.gamma"), &mut b.ln2_gamma));
            out.push((p("ln2.beta"), &mut b.ln2_beta));
            out.push((p("mlp.w_fc1"), &mut b.w_fc1));
            out.push((p("mlp.b_fc1"), &mut b.b_fc1));
            out.push((p("mlp.w_fc2"), &mut b.w_fc2));
            out.push((p("mlp.b_fc2"), &mut b.b_fc2));
            if let Some(ls) = &mut b.ls2 {
                out.push((p("ls2"), ls));
            }
            for pair in &mut b.lora {
                let t = pair.target.tag();
                lora_views.push((format!("blocks.{l}.attn.lora_{t}.a"), &mut pair.a));
                lora_views.push((format!("blocks.{l}.attn.lora_{t}.b"), &mut pair.b));
            }
        }
        out.push(("final_ln.gamma".into(), &mut self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &mut self.final_ln_beta));
        out.push(("head.w_pred".into(), &mut self.w_pred));
        out.push(("head.b_pred".into(), &mut self.b_pred));
        out.extend(lora_views);
        for (i, h) in self.head_hidden.iter_mut().enumerate() {
            out.push((format!("head_mlp.{i}.weight"), &mut h.weight));
            out.push((format!("head_mlp.{i}.bias"), &mut h.bias));
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Flattened copy of every scalar in enumeration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn check_shapes(&self, cfg: &ViTConfig) -> Result<()> {
        let expect = layout(cfg);
        let named = self.named();
        for (i, (name, shape)) in expect.iter().enumerate() {
            match named.get(i) {
                Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
                Some((n, t)) => {
                    return Err(Error::dim(format!(
                        "tensor {n} has shape {:?}; expected {name} with shape {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::dim(format!("missing tensor {name}"))),
            }
        }
        if named.len() != expect.len() {
            return Err(Error::dim(format!(
                "unexpected tensor {}",
                named[expect.len()].0
            )));
        }
        Ok(())
    }
}

/// `(name, shape)` of every tensor a configuration implies, in enumeration
/// order, without allocating any weights.
pub fn layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".into(), vec![d]),
        ("cls_token".into(), vec![d]),
        ("pos_embed".into(), vec![cfg.tokens(), d]),
    ];
    for l in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for w in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.w_{w}")), vec![d, d]));
            out.push((p(&format!("attn.b_{w}")), vec![d]));
        }
        if cfg.use_layerscale {
            out.push((p("ls1"), vec![d]));
        }
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("mlp.w_fc1"), vec![d, hidden]));
        out.push((p("mlp.b_fc1"), vec![hidden]));
        out.push((p("mlp.w_fc2"), vec![hidden, d]));
        out.push((p("mlp.b_fc2"), vec![d]));
        if cfg.use_layerscale {
            out.push((p("ls2"), vec![d]));
        }
    }
    out.push(("final_ln.gamma".into(), vec![d]));
    out.push(("final_ln.beta".into(), vec![d]));
    out.push(("head.w_pred".into(), vec![d, cfg.num_classes]));
    out.push(("head.b_pred".into(), vec![cfg.num_classes]));
    if let Some(lora) = &cfg.lora {
        for l in 0..cfg.depth {
            for t in LoraTarget::ALL.into_iter().filter(|t| lora.has(*t)) {
                let tag = t.tag();
                out.push((format!("blocks.{l}.attn.lora_{tag}.a"), vec![d, lora.rank]));
                out.push((format!("blocks.{l}.attn.lora_{tag}.b"), vec![lora.rank, d]));
            }
        }
    }
    for i in 0..cfg.head_hidden_layers {
        out.push((format!("head_mlp.{i}.weight"), vec![d, d]));
        out.push((format!("head_mlp.{i}.bias"), vec![d]));
    }
    out
}
