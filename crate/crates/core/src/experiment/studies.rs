use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{BlockRange, Component, PlanKind, Strategy};
use crate::error::{Error, Result};
use crate::experiment::config::RunConfig;
use crate::experiment::report::{pct, Table, TableRow};
use crate::experiment::run::{prepare, run_prepared, write_run_outputs, Prepared};

#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    /// Rows trained concurrently; 0 or 1 runs them one after another.
    pub jobs: usize,
    /// Study directory: `table.csv`, `table.md`, and one subdirectory per row.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BottomToTop,
    TopToBottom,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bottom_to_top" => Ok(Direction::BottomToTop),
            "top_to_bottom" => Ok(Direction::TopToBottom),
            _ => Err(Error::config(format!(
                "unknown direction {s:?}; valid: bottom_to_top, top_to_bottom"
            ))),
        }
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn run_rows(
    title: String,
    rows: Vec<(String, RunConfig)>,
    prep: &Prepared,
    opts: &StudyOptions,
) -> Result<Table> {
    for (_, cfg) in &rows {
        cfg.validate()?;
    }
    let work = |(label, cfg): &(String, RunConfig)| -> Result<TableRow> {
        let outcome = run_prepared(cfg, prep)?;
        if let Some(dir) = &opts.out_dir {
            write_run_outputs(&outcome, &dir.join("rows").join(slug(label)))?;
        }
        Ok(TableRow { label: label.clone(), report: outcome.report })
    };
    let results: Vec<Result<TableRow>> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
        pool.install(|| rows.par_iter().map(work).collect())
    } else {
        rows.iter().map(work).collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Table { title, rows, notes: Vec::new() })
}

fn finish(table: Table, opts: &StudyOptions) -> Result<Table> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.csv"), table.csv())?;
        std::fs::write(dir.join("table.md"), table.markdown())?;
        std::fs::write(
            dir.join("table.json"),
            serde_json::to_string_pretty(&table).expect("table serializes") + "\n",
        )?;
    }
    Ok(table)
}

fn with_plan(base: &RunConfig, plan: PlanKind, strategy: Strategy) -> RunConfig {
    RunConfig {
        plan,
        strategy,
        out_dir: None,
        ..base.clone()
    }
}

fn apla_parts(base: &RunConfig) -> Result<(usize, Option<BlockRange>)> {
    match base.plan {
        PlanKind::Apla { r, block_range } => Ok((r, block_range)),
        _ => Err(Error::config("this study needs an apla plan in the base config")),
    }
}

/// One run per component (each plus the head), followed by full fine-tuning.
pub fn cmd_ablate_components(base: &RunConfig, components: &[Component], opts: &StudyOptions) -> Result<Table> {
    if components.is_empty() {
        return Err(Error::config("component list is empty"));
    }
    let mut rows: Vec<(String, RunConfig)> = components
        .iter()
        .map(|&c| {
            (c.label().to_string(), with_plan(base, PlanKind::Component { which: c }, Strategy::Random))
        })
        .collect();
    rows.push(("Full fine-tuning".into(), with_plan(base, PlanKind::Full, Strategy::Random)));
    let prep = prepare(base)?;
    let mut table = run_rows("Tuning one component at a time".into(), rows, &prep, opts)?;
    if let Some(best) = table
        .rows
        .iter()
        .max_by(|a, b| a.report.results.test_accuracy.total_cmp(&b.report.results.test_accuracy))
    {
        let note = format!("best row: {} ({}%)", best.label, pct(best.report.results.test_accuracy));
        table.notes.push(note);
    }
    finish(table, opts)
}

/// One APLA run per column-selection strategy, everything else shared.
pub fn cmd_ablate_selection(base: &RunConfig, strategies: &[Strategy], opts: &StudyOptions) -> Result<Table> {
    if strategies.is_empty() {
        return Err(Error::config("strategy list is empty"));
    }
    apla_parts(base)?;
    let rows = strategies
        .iter()
        .map(|&s| (s.label().to_string(), with_plan(base, base.plan.clone(), s)))
        .collect();
    let prep = prepare(base)?;
    let mut table = run_rows("Column-selection strategies".into(), rows, &prep, opts)?;
    let accs: Vec<f64> = table.rows.iter().map(|r| r.report.results.test_accuracy).collect();
    let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    table.notes.push(format!("test accuracy spread: {} points", pct(hi - lo)));
    for (i, a) in table.rows.iter().enumerate() {
        for b in &table.rows[i + 1..] {
            if a.report.results.plan.indices_hash == b.report.results.plan.indices_hash {
                table.notes.push(format!("{} and {} selected identical columns", a.label, b.label));
            }
        }
    }
    finish(table, opts)
}

/// One APLA run per rank; marks the rank with the best validation accuracy.
pub fn cmd_sweep_rank(base: &RunConfig, ranks: &[usize], opts: &StudyOptions) -> Result<Table> {
    if ranks.is_empty() {
        return Err(Error::config("rank list is empty"));
    }
    let (_, block_range) = apla_parts(base)?;
    let d = base.model.embed_dim;
    if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > d) {
        return Err(Error::config(format!("rank {r} outside 1..={d}")));
    }
    let rows = ranks
        .iter()
        .map(|&r| (format!("r={r}"), with_plan(base, PlanKind::Apla { r, block_range }, base.strategy)))
        .collect();
    let prep = prepare(base)?;
    let mut table = run_rows("Rank sweep".into(), rows, &prep, opts)?;
    if let Some(best) = table.rows.iter().max_by(|a, b| {
        a.report.results.best_val_accuracy
            .total_cmp(&b.report.results.best_val_accuracy)
            .then(b.report.results.plan.r.cmp(&a.report.results.plan.r))
    }) {
        table.notes.push(format!("best validation accuracy at {}", best.label));
    }
    let costs: Vec<(usize, usize, usize)> = table
        .rows
        .iter()
        .map(|r| {
            let c = &r.report.results.cost;
            (r.report.results.plan.r.unwrap_or(0), c.optimizer_bytes, c.activation_bytes_per_sample)
        })
        .collect();
    let mut sorted = costs.clone();
    sorted.sort();
    let increasing = sorted.windows(2).all(|w| w[0].0 == w[1].0 || w[0].1 < w[1].1);
    let flat = sorted.windows(2).all(|w| w[0].2 == w[1].2);
    table.notes.push(format!(
        "optimizer bytes strictly increasing in r: {increasing}; activation bytes constant: {flat}"
    ));
    finish(table, opts)
}

/// APLA on 1..=L blocks, growing from the bottom or from the top.
pub fn cmd_sweep_blocks(base: &RunConfig, direction: Direction, opts: &StudyOptions) -> Result<Table> {
    let (r, _) = apla_parts(base)?;
    let depth = base.model.depth;
    let rows = (1..=depth)
        .map(|k| {
            let range = match direction {
                Direction::BottomToTop => BlockRange { start: 0, end: k },
                Direction::TopToBottom => BlockRange { start: depth - k, end: depth },
            };
            let label = format!("{k} block{}", if k == 1 { "" } else { "s" });
            (label, with_plan(base, PlanKind::Apla { r, block_range: Some(range) }, base.strategy))
        })
        .collect();
    let prep = prepare(base)?;
    let title = match direction {
        Direction::BottomToTop => "Block sweep, bottom to top",
        Direction::TopToBottom => "Block sweep, top to bottom",
    };
    let mut table = run_rows(title.into(), rows, &prep, opts)?;
    let accs: Vec<f64> = table.rows.iter().map(|r| r.report.results.test_accuracy).collect();
    let monotone = accs.windows(2).all(|w| w[1] >= w[0]);
    table.notes.push(format!("test accuracy nondecreasing in block count: {monotone} (advisory)"));
    finish(table, opts)
}
