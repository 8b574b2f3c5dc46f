use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::experiment::config::RunConfig;
use crate::metrics::{CostModel, ThroughputSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub label: String,
    pub r: Option<usize>,
    pub trainable_scalars: usize,
    pub indices_hash: String,
    pub column_sets: Vec<Option<Vec<usize>>>,
}

/// Everything a run computes, as a pure function of its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub plan: PlanSummary,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were evaluated on test; 0 is the init.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub init_test_accuracy: f64,
    pub test_accuracy: f64,
    pub cost: CostModel,
}

/// Wall-clock measurements, kept apart from the deterministic body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub run_seconds: f64,
    pub train: Option<ThroughputSample>,
    pub inference: Option<ThroughputSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub results: RunResults,
    pub timing: Timing,
}

impl ExperimentReport {
    /// The deterministic part (config echo and results) as pretty JSON.
    pub fn body_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            config: &'a RunConfig,
            results: &'a RunResults,
        }
        serde_json::to_string_pretty(&Body { config: &self.config, results: &self.results })
            .expect("report serializes")
            + "\n"
    }

    pub fn timing_json(&self) -> String {
        serde_json::to_string_pretty(&self.timing).expect("timing serializes") + "\n"
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,lr\n");
        for e in &self.results.epochs {
            writeln!(out, "{},{:.10},{:.6},{:.6e}", e.epoch, e.train_loss, e.val_accuracy, e.lr).unwrap();
        }
        out
    }

    pub fn markdown(&self) -> String {
        let r = &self.results;
        let c = &r.cost;
        let mut out = String::new();
        writeln!(out, "# Run: {}\n", r.plan.label).unwrap();
        writeln!(out, "| metric | value |\n|---|---|").unwrap();
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.config.seed.to_string()),
            ("strategy", self.config.strategy.to_string()),
            ("epochs", r.epochs.len().to_string()),
            ("best epoch", r.best_epoch.to_string()),
            ("best val accuracy", pct(r.best_val_accuracy)),
            ("test accuracy", pct(r.test_accuracy)),
            ("init test accuracy", pct(r.init_test_accuracy)),
            ("trainable scalars", c.trainable_scalars.to_string()),
            ("backbone trainable scalars", c.backbone_trainable_scalars.to_string()),
            ("optimizer bytes", c.optimizer_bytes.to_string()),
            ("activation bytes / sample", c.activation_bytes_per_sample.to_string()),
            ("indices hash", r.plan.indices_hash[..16].to_string()),
        ];
        for (k, v) in rows {
            writeln!(out, "| {k} | {v} |").unwrap();
        }
        out
    }
}

pub(crate) fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub report: ExperimentReport,
}

/// One study's rows plus free-form notes (best row, spread, trends).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub rows: Vec<TableRow>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "row,plan,strategy,r,test_accuracy,best_val_accuracy,best_epoch,trainable_scalars,\
             optimizer_bytes,activation_bytes_per_sample,indices_hash\n",
        );
        for row in &self.rows {
            let r = &row.report.results;
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{},{},{},{},{}",
                csv_field(&row.label),
                csv_field(&r.plan.label),
                row.report.config.strategy,
                r.plan.r.map(|r| r.to_string()).unwrap_or_default(),
                r.test_accuracy,
                r.best_val_accuracy,
                r.best_epoch,
                r.cost.trainable_scalars,
                r.cost.optimizer_bytes,
                r.cost.activation_bytes_per_sample,
                r.plan.indices_hash
            )
            .unwrap();
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.title);
        out.push_str("| row | test acc (%) | val acc (%) | trainable | optimizer bytes | activation bytes/sample |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        for row in &self.rows {
            let r = &row.report.results;
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                row.label,
                pct(r.test_accuracy),
                pct(r.best_val_accuracy),
                r.cost.trainable_scalars,
                r.cost.optimizer_bytes,
                r.cost.activation_bytes_per_sample
            )
            .unwrap();
        }
        if !self.notes.is_empty() {
            out.push('\n');
            for n in &self.notes {
                writeln!(out, "- {n}").unwrap();
            }
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&ExperimentReport> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.report)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
