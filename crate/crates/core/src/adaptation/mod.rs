//! Which parameters (and which columns of `W_O`) receive gradients.

mod plan;
mod select;

pub use plan::{build_plan, build_plan_with_columns, AdaptationPlan, BlockRange, Component, PlanKind};
pub use select::{sample_columns, score_columns, select_top, ColumnScore, Strategy};

pub use crate::vit::{lora_forward_delta, LoraPair as LoraState};
