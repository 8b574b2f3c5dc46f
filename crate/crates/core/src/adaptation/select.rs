use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;
use crate::vit::{forward, loss_and_backward, Selection, TrainSet, ViTConfig, ViTParams};

/// Rule choosing which `W_O` columns train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    /// Column L2 norm of the loss gradient on a probe batch.
    Gradient,
    /// Mean absolute value of each `W_O` output coordinate on a probe batch.
    Activation,
    /// Column L2 norm of `W_O` at init.
    Magnitude,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Gradient,
        Strategy::Activation,
        Strategy::Magnitude,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Gradient => "gradient",
            Strategy::Activation => "activation",
            Strategy::Magnitude => "magnitude",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Random => "Random",
            Strategy::Gradient => "Largest gradients",
            Strategy::Activation => "Largest activations",
            Strategy::Magnitude => "Largest weight magnitude",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            Error::config(format!(
                "unknown strategy {name:?}; valid names: gradient, activation, magnitude, random"
            ))
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-column scores of one block's `W_O`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScore {
    pub strategy: Strategy,
    pub block: usize,
    pub scores: Tensor,
}

impl ColumnScore {
    pub fn top(&self, r: usize) -> Result<Vec<usize>> {
        select_top(self.scores.data(), r)
    }
}

/// Sorted random subset of `r` indices out of `0..d` for block `l`.
///
/// The block's generator is seeded with `SplitMix64(seed ^ l)` and a partial
/// Fisher-Yates shuffle keeps the first `r` positions.
pub fn sample_columns(d: usize, r: usize, l: usize, seed: u64) -> Result<Vec<usize>> {
    if r == 0 || r > d {
        return Err(Error::config(format!("r must lie in 1..={d}, got {r}")));
    }
    let mut rng = Rng::new(mix_seed(seed ^ l as u64));
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..r {
        let j = i + rng.index(d - i);
        idx.swap(i, j);
    }
    let mut out = idx[..r].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Indices of the `r` largest scores (ties to the lower index), sorted.
pub fn select_top(scores: &[f64], r: usize) -> Result<Vec<usize>> {
    if r == 0 || r > scores.len() {
        return Err(Error::config(format!("r must lie in 1..={}, got {r}", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Internal(format!("column score {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = order[..r].to_vec();
    out.sort_unstable();
    Ok(out)
}

fn column_norms(w: &Tensor) -> Tensor {
    let (rows, cols) = w.dims2();
    let mut acc = vec![0.0; cols];
    for i in 0..rows {
        for (a, x) in acc.iter_mut().zip(w.row(i)) {
            *a += x * x;
        }
    }
    Tensor::from_fn(&[cols], |j| acc[j].sqrt())
}

/// Scores every block's `W_O` columns. The probe batch is only used by the
/// gradient and activation strategies but must be nonempty regardless.
pub fn score_columns(
    strategy: Strategy,
    params: &ViTParams,
    cfg: &ViTConfig,
    images: &[Tensor],
    labels: &[usize],
) -> Result<Vec<ColumnScore>> {
    if images.is_empty() {
        return Err(Error::data("probe batch is empty"));
    }
    let wrap = |block: usize, scores: Tensor| ColumnScore { strategy, block, scores };
    match strategy {
        Strategy::Random => Err(Error::config("random selection has no column scores")),
        Strategy::Magnitude => Ok(params
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| wrap(l, column_norms(&b.w_o)))
            .collect()),
        Strategy::Gradient => {
            let wanted = (0..cfg.depth)
                .map(|l| (format!("blocks.{l}.attn.w_o"), Selection::Full))
                .collect();
            let set = TrainSet::new(params, wanted)?;
            let (_, grads) = loss_and_backward(images, labels, params, cfg, &set)?;
            Ok(grads.iter().enumerate().map(|(l, (_, g))| wrap(l, column_norms(g))).collect())
        }
        Strategy::Activation => {
            let (_, cache) = forward(images, params, cfg)?;
            let d = cfg.embed_dim;
            Ok(cache
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| {
                    let rows = b.attn.proj.len() / d;
                    let mut acc = vec![0.0; d];
                    for row in b.attn.proj.chunks_exact(d) {
                        for (a, x) in acc.iter_mut().zip(row) {
                            *a += x.abs();
                        }
                    }
                    wrap(l, Tensor::from_fn(&[d], |j| acc[j] / rows as f64))
                })
                .collect())
        }
    }
}
