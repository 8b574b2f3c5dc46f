use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::select::{sample_columns, Strategy};
use crate::error::{Error, Result};
use crate::vit::{layout, LoraConfig, LoraTarget, Selection, TrainSet, ViTConfig};

/// A single ViT component kind trained in isolation (plus the head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "cls")]
    Cls,
    #[serde(rename = "pos")]
    PosEmbed,
    #[serde(rename = "w_e")]
    PatchEmbed,
    #[serde(rename = "layernorm")]
    LayerNorm,
    #[serde(rename = "layerscale")]
    LayerScale,
    #[serde(rename = "w_q")]
    WQ,
    #[serde(rename = "w_k")]
    WK,
    #[serde(rename = "w_v")]
    WV,
    #[serde(rename = "w_o")]
    WO,
    #[serde(rename = "msa")]
    Msa,
    #[serde(rename = "w_fc1")]
    WFc1,
    #[serde(rename = "w_fc2")]
    WFc2,
    #[serde(rename = "mlp")]
    Mlp,
}

impl Component {
    /// Table order.
    pub const ALL: [Component; 13] = [
        Component::Cls,
        Component::PosEmbed,
        Component::PatchEmbed,
        Component::LayerNorm,
        Component::LayerScale,
        Component::WQ,
        Component::WK,
        Component::WV,
        Component::WO,
        Component::Msa,
        Component::WFc1,
        Component::WFc2,
        Component::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Cls => "cls",
            Component::PosEmbed => "pos",
            Component::PatchEmbed => "w_e",
            Component::LayerNorm => "layernorm",
            Component::LayerScale => "layerscale",
            Component::WQ => "w_q",
            Component::WK => "w_k",
            Component::WV => "w_v",
            Component::WO => "w_o",
            Component::Msa => "msa",
            Component::WFc1 => "w_fc1",
            Component::WFc2 => "w_fc2",
            Component::Mlp => "mlp",
        }
    }

    /// Row label used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Component::Cls => "[CLS] token",
            Component::PosEmbed => "positional embeddings",
            Component::PatchEmbed => "embedding layer W_E",
            Component::LayerNorm => "LayerNorm",
            Component::LayerScale => "LayerScale",
            Component::WQ => "W_Q weight matrix",
            Component::WK => "W_K weight matrix",
            Component::WV => "W_V weight matrix",
            Component::WO => "W_O weight matrix",
            Component::Msa => "MSA block",
            Component::WFc1 => "W_FC1 weight matrix",
            Component::WFc2 => "W_FC2 weight matrix",
            Component::Mlp => "MLP block",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
                Error::config(format!(
                    "unknown component {name:?}; valid names: {}",
                    valid.join(", ")
                ))
            })
    }

    /// Whether the parameter `name` belongs to this component.
    pub fn owns(self, name: &str) -> bool {
        let in_block = |suffixes: &[&str]| {
            name.starts_with("blocks.") && suffixes.iter().any(|s| name.ends_with(s))
        };
        match self {
            Component::Cls => name == "cls_token",
            Component::PosEmbed => name == "pos_embed",
            Component::PatchEmbed => name.starts_with("patch_embed."),
            Component::LayerNorm => name.starts_with("final_ln.") || in_block(&[
                ".ln1.gamma", ".ln1.beta", ".ln2.gamma", ".ln2.beta",
            ]),
            Component::LayerScale => in_block(&[".ls1", ".ls2"]),
            Component::WQ => in_block(&[".attn.w_q"]),
            Component::WK => in_block(&[".attn.w_k"]),
            Component::WV => in_block(&[".attn.w_v"]),
            Component::WO => in_block(&[".attn.w_o"]),
            Component::Msa => in_block(&[
                ".attn.w_q", ".attn.b_q", ".attn.w_k", ".attn.b_k", ".attn.w_v", ".attn.b_v",
                ".attn.w_o", ".attn.b_o",
            ]),
            Component::WFc1 => in_block(&[".mlp.w_fc1"]),
            Component::WFc2 => in_block(&[".mlp.w_fc2"]),
            Component::Mlp => in_block(&[".mlp.w_fc1", ".mlp.b_fc1", ".mlp.w_fc2", ".mlp.b_fc2"]),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open block interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRange {
    pub start: usize,
    pub end: usize,
}

impl BlockRange {
    pub fn all(depth: usize) -> Self {
        BlockRange { start: 0, end: depth }
    }

    pub fn contains(&self, l: usize) -> bool {
        (self.start..self.end).contains(&l)
    }
}

fn default_lora_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::WQ, LoraTarget::WV]
}

fn default_lora_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanKind {
    Full,
    Linear,
    MlpK {
        k: usize,
    },
    PartialK {
        k: usize,
    },
    #[serde(rename = "bitfit")]
    BitFit,
    Lora {
        rank: usize,
        #[serde(default = "default_lora_alpha")]
        alpha: f64,
        #[serde(default = "default_lora_targets")]
        targets: Vec<LoraTarget>,
    },
    Component {
        which: Component,
    },
    Apla {
        r: usize,
        #[serde(default)]
        block_range: Option<BlockRange>,
    },
}

impl PlanKind {
    /// Short label such as `apla(r=16)` used in report rows.
    pub fn label(&self) -> String {
        match self {
            PlanKind::Full => "full".into(),
            PlanKind::Linear => "linear".into(),
            PlanKind::MlpK { k } => format!("mlp-{k}"),
            PlanKind::PartialK { k } => format!("partial-{k}"),
            PlanKind::BitFit => "bitfit".into(),
            PlanKind::Lora { rank, targets, .. } => {
                let t: String = targets.iter().map(|t| t.tag()).collect();
                format!("lora(rank={rank},{t})")
            }
            PlanKind::Component { which } => format!("component({which})"),
            PlanKind::Apla { r, block_range } => match block_range {
                Some(b) => format!("apla(r={r},blocks={}..{})", b.start, b.end),
                None => format!("apla(r={r})"),
            },
        }
    }

    /// The model configuration this kind trains on: MLP-k appends hidden
    /// head layers and LoRA attaches adapter pairs.
    pub fn model_config(&self, cfg: &ViTConfig) -> Result<ViTConfig> {
        let mut out = cfg.base();
        match self {
            PlanKind::MlpK { k } => {
                if *k == 0 {
                    return Err(Error::config("mlp_k needs k >= 1"));
                }
                out.head_hidden_layers = k - 1;
            }
            PlanKind::Lora { rank, alpha, targets } => {
                out.lora = Some(LoraConfig {
                    rank: *rank,
                    alpha: *alpha,
                    targets: targets.clone(),
                });
            }
            _ => {}
        }
        out.validate()?;
        Ok(out)
    }

    fn check(&self, cfg: &ViTConfig) -> Result<()> {
        let (d, depth) = (cfg.embed_dim, cfg.depth);
        match self {
            PlanKind::PartialK { k } if *k == 0 || *k > depth => Err(Error::config(format!(
                "partial_k needs 1 <= k <= depth ({depth}), got {k}"
            ))),
            PlanKind::Apla { r, block_range } => {
                if *r == 0 || *r > d {
                    return Err(Error::config(format!("r must lie in 1..={d}, got {r}")));
                }
                if let Some(b) = block_range {
                    if b.start >= b.end || b.end > depth {
                        return Err(Error::config(format!(
                            "block range {}..{} invalid for depth {depth}",
                            b.start, b.end
                        )));
                    }
                }
                Ok(())
            }
            PlanKind::Component { which: Component::LayerScale } if !cfg.use_layerscale => Err(
                Error::config("layerscale component requested but the model has no LayerScale"),
            ),
            _ => Ok(()),
        }
    }
}

/// Immutable description of one run's trainable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub kind: PlanKind,
    /// Per block: the trained `W_O` columns (APLA only).
    pub column_sets: Vec<Option<Vec<usize>>>,
    pub head_trainable: bool,
    pub seed: u64,
    pub strategy: Strategy,
    /// Model configuration including any adapter or head extensions.
    pub model: ViTConfig,
    pub trainable: TrainSet,
}

fn is_head(name: &str) -> bool {
    name == "head.w_pred" || name == "head.b_pred"
}

fn is_shift(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    name == "patch_embed.bias" || leaf == "beta" || leaf.starts_with("b_")
}

fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Builds a plan; APLA columns are sampled at random from `seed`.
pub fn build_plan(kind: &PlanKind, cfg: &ViTConfig, seed: u64) -> Result<AdaptationPlan> {
    let columns = match kind {
        PlanKind::Apla { r, block_range } => {
            kind.check(cfg)?;
            let range = block_range.unwrap_or(BlockRange::all(cfg.depth));
            (0..cfg.depth)
                .map(|l| {
                    range
                        .contains(l)
                        .then(|| sample_columns(cfg.embed_dim, *r, l, seed))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => vec![None; cfg.depth],
    };
    build_plan_with_columns(kind, cfg, seed, Strategy::Random, columns)
}

/// Builds a plan from explicit per-block column sets (for APLA; ignored and
/// required to be empty otherwise).
pub fn build_plan_with_columns(
    kind: &PlanKind,
    cfg: &ViTConfig,
    seed: u64,
    strategy: Strategy,
    column_sets: Vec<Option<Vec<usize>>>,
) -> Result<AdaptationPlan> {
    kind.check(cfg)?;
    let model = kind.model_config(cfg)?;
    if column_sets.len() != cfg.depth {
        return Err(Error::config(format!(
            "{} column sets given for depth {}",
            column_sets.len(),
            cfg.depth
        )));
    }
    let shapes = layout(&model);
    let depth = cfg.depth;
    let mut wanted: Vec<(String, Selection)> = Vec::new();
    let take = |pred: &dyn Fn(&str) -> bool| -> Vec<(String, Selection)> {
        shapes
            .iter()
            .filter(|(name, _)| pred(name))
            .map(|(name, _)| (name.clone(), Selection::Full))
            .collect()
    };
    match kind {
        PlanKind::Full => wanted = take(&|_| true),
        PlanKind::Linear => wanted = take(&is_head),
        PlanKind::MlpK { .. } => wanted = take(&|n| is_head(n) || n.starts_with("head_mlp.")),
        PlanKind::PartialK { k } => {
            wanted = take(&|n| is_head(n) || block_of(n).is_some_and(|l| l >= depth - k))
        }
        PlanKind::BitFit => wanted = take(&|n| is_head(n) || is_shift(n)),
        PlanKind::Lora { .. } => wanted = take(&|n| is_head(n) || n.contains(".attn.lora_")),
        PlanKind::Component { which } => wanted = take(&|n| is_head(n) || which.owns(n)),
        PlanKind::Apla { r, block_range } => {
            let range = block_range.unwrap_or(BlockRange::all(depth));
            for (l, set) in column_sets.iter().enumerate() {
                match (range.contains(l), set) {
                    (true, Some(cols)) => {
                        if cols.len() != *r {
                            return Err(Error::config(format!(
                                "block {l} has {} columns, expected {r}",
                                cols.len()
                            )));
                        }
                        wanted.push((format!("blocks.{l}.attn.w_o"), Selection::Columns(cols.clone())));
                    }
                    (false, None) => {}
                    _ => {
                        return Err(Error::config(format!(
                            "column set presence for block {l} disagrees with the block range"
                        )))
                    }
                }
            }
            wanted.extend(take(&is_head));
        }
    }
    if !matches!(kind, PlanKind::Apla { .. }) && column_sets.iter().any(Option::is_some) {
        return Err(Error::config("column sets are only meaningful for apla"));
    }
    let trainable = TrainSet::from_layout(&shapes, wanted)?;
    Ok(AdaptationPlan {
        kind: kind.clone(),
        column_sets,
        head_trainable: true,
        seed,
        strategy,
        model,
        trainable,
    })
}

impl AdaptationPlan {
    pub fn trainable_scalars(&self) -> usize {
        self.trainable.scalar_count()
    }

    /// Trainable scalars outside the classification head.
    pub fn backbone_scalars(&self) -> usize {
        self.trainable
            .entries()
            .iter()
            .filter(|e| !is_head(&e.name) && !e.name.starts_with("head_mlp."))
            .map(|e| e.scalars())
            .sum()
    }

    /// Columns per block, when the plan trains `W_O` columns.
    pub fn rank(&self) -> Option<usize> {
        match self.kind {
            PlanKind::Apla { r, .. } => Some(r),
            _ => None,
        }
    }

    /// Hex SHA-256 over the trainable entries and their selections.
    pub fn indices_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in self.trainable.entries() {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            match &e.selection {
                Selection::Full => h.update(b"full"),
                Selection::Columns(cols) => {
                    for c in cols {
                        h.update((*c as u64).to_le_bytes());
                    }
                }
            }
            h.update([0xffu8]);
        }
        hex::encode(h.finalize())
    }
}
