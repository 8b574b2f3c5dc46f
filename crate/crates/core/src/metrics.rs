//! Trainable-parameter and memory accounting, plus a wall-clock harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationPlan;
use crate::error::{Error, Result};
use crate::vit::{layout, position, ViTConfig};

pub const BYTES_PER_SCALAR: usize = 8;

/// Modeled training memory of one plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub trainable_scalars: usize,
    /// Trainable scalars outside the classification head.
    pub backbone_trainable_scalars: usize,
    pub total_scalars: usize,
    pub grad_bytes: usize,
    pub optimizer_bytes: usize,
    pub weight_bytes: usize,
    /// Cached forward values the backward pass needs, per sample.
    pub activation_bytes_per_sample: usize,
    pub bytes_per_scalar: usize,
}

impl CostModel {
    pub fn training_bytes(&self, batch: usize) -> usize {
        self.weight_bytes + self.grad_bytes + self.optimizer_bytes + batch * self.activation_bytes_per_sample
    }
}

/// Exact counts from the plan's trainable set; the activation term walks the
/// sub-blocks and charges only the caches a restricted backward reads.
pub fn cost_model(cfg: &ViTConfig, plan: &AdaptationPlan) -> CostModel {
    let model = &plan.model;
    let trainable = plan.trainable_scalars();
    let total = layout(model).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    CostModel {
        trainable_scalars: trainable,
        backbone_trainable_scalars: plan.backbone_scalars(),
        total_scalars: total,
        grad_bytes: trainable * BYTES_PER_SCALAR,
        optimizer_bytes: 2 * trainable * BYTES_PER_SCALAR,
        weight_bytes: total * BYTES_PER_SCALAR,
        activation_bytes_per_sample: activation_scalars(cfg, plan) * BYTES_PER_SCALAR,
        bytes_per_scalar: BYTES_PER_SCALAR,
    }
}

fn activation_scalars(cfg: &ViTConfig, plan: &AdaptationPlan) -> usize {
    let model = &plan.model;
    let set = &plan.trainable;
    if set.is_empty() {
        return 0;
    }
    let (t, d, h, hidden) = (model.tokens(), model.embed_dim, model.num_heads, model.mlp_hidden());
    let depth = cfg.depth;
    let low = set
        .entries()
        .iter()
        .map(|e| position(&e.name, depth))
        .min()
        .unwrap_or(2 * depth + 1);
    let has = |n: &str| set.contains(n);
    let lora_rank = model.lora.as_ref().map_or(0, |l| l.rank);
    let mut total = 0;

    if has("patch_embed.weight") {
        total += model.num_patches() * model.patch_dim();
    }
    for l in 0..depth {
        let b = |s: &str| format!("blocks.{l}.{s}");
        let lora = |tag: &str| has(&b(&format!("attn.lora_{tag}.a"))) || has(&b(&format!("attn.lora_{tag}.b")));
        let attn_pos = 2 * l + 1;
        let deep = low < attn_pos
            || ["ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v"]
                .iter()
                .any(|s| has(&b(s)))
            || ["q", "k", "v"].iter().any(|tag| lora(tag));
        if deep {
            // normalized input, its rstd, LN output, q, k, v, probabilities, head concat
            total += t * d + t + t * d + 3 * t * d + h * t * t + t * d;
            let attached = model.lora.as_ref().map_or(0, |c| c.targets.len());
            total += attached * t * lora_rank;
        } else if has(&b("attn.w_o")) || lora("o") {
            total += t * d;
            if lora("o") {
                total += t * lora_rank;
            }
        }
        if has(&b("ls1")) {
            total += t * d;
        }
        let mlp_pos = 2 * l + 2;
        let deep = low < mlp_pos
            || ["ln2.gamma", "ln2.beta", "mlp.w_fc1", "mlp.b_fc1"].iter().any(|s| has(&b(s)));
        if deep {
            total += t * d + t + t * d + 2 * t * hidden;
        } else if has(&b("mlp.w_fc2")) {
            total += t * hidden;
        }
        if has(&b("ls2")) {
            total += t * d;
        }
    }
    // final norm of the class token, head layer inputs and pre-activations, logits
    let top = 2 * depth + 1;
    let head_layers = model.head_hidden_layers;
    if low < top || has("final_ln.gamma") || has("final_ln.beta") || head_layers > 0 {
        total += d + 1;
    }
    total += head_layers * 2 * d + d + model.num_classes;
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub images_per_second: f64,
    pub wall_seconds: f64,
    pub batch: usize,
    pub phase: Phase,
}

const REPEATS: usize = 3;

/// Runs `step` `warmup` times untimed, then times `timed` calls three times
/// over and reports the median repeat.
pub fn measure_throughput(
    phase: Phase,
    batch: usize,
    warmup: usize,
    timed: usize,
    mut step: impl FnMut() -> Result<()>,
) -> Result<ThroughputSample> {
    if timed == 0 {
        return Err(Error::config("timed iterations must be at least 1"));
    }
    if batch == 0 {
        return Err(Error::config("batch must be at least 1"));
    }
    for _ in 0..warmup {
        step()?;
    }
    let mut samples = Vec::with_capacity(REPEATS);
    for _ in 0..REPEATS {
        let start = Instant::now();
        for _ in 0..timed {
            step()?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        samples.push(ThroughputSample {
            images_per_second: (batch * timed) as f64 / secs,
            wall_seconds: secs,
            batch,
            phase,
        });
    }
    samples.sort_by(|a, b| a.images_per_second.total_cmp(&b.images_per_second));
    Ok(samples.swap_remove(REPEATS / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::{build_plan, PlanKind};

    #[test]
    fn invariants_hold_for_every_kind() {
        let mut cfg = ViTConfig::new(8, 4, 3, 16, 2, 3, 5);
        cfg.use_layerscale = true;
        for kind in [
            PlanKind::Full,
            PlanKind::Linear,
            PlanKind::MlpK { k: 2 },
            PlanKind::PartialK { k: 2 },
            PlanKind::BitFit,
            PlanKind::Lora { rank: 2, alpha: 1.0, targets: vec![crate::vit::LoraTarget::WO] },
            PlanKind::Apla { r: 3, block_range: None },
        ] {
            let plan = build_plan(&kind, &cfg, 1).unwrap();
            let c = cost_model(&cfg, &plan);
            assert_eq!(c.optimizer_bytes, 2 * c.trainable_scalars * 8, "{kind:?}");
            assert_eq!(c.grad_bytes, c.trainable_scalars * 8);
            assert!(c.trainable_scalars <= c.total_scalars);
        }
    }

    #[test]
    fn activations_shrink_as_training_moves_up() {
        let cfg = ViTConfig::new(8, 4, 3, 16, 2, 3, 5);
        let bytes = |k: PlanKind| cost_model(&cfg, &build_plan(&k, &cfg, 0).unwrap()).activation_bytes_per_sample;
        let full = bytes(PlanKind::Full);
        let apla = bytes(PlanKind::Apla { r: 4, block_range: None });
        let top = bytes(PlanKind::PartialK { k: 1 });
        let linear = bytes(PlanKind::Linear);
        assert!(full > apla && apla > linear && full > top && top > linear);
    }

    #[test]
    fn zero_timed_iterations_is_rejected() {
        assert!(measure_throughput(Phase::Train, 1, 0, 0, || Ok(())).is_err());
    }
}
