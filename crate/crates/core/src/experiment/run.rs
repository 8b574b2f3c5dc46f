use std::path::Path;
use std::time::Instant;

use crate::adaptation::{build_plan, build_plan_with_columns, score_columns, AdaptationPlan, PlanKind, Strategy};
use crate::checkpoint::{checkpoint_load_for, checkpoint_save};
use crate::data::{gen_teacher_task, load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::experiment::config::{DataSource, RunConfig};
use crate::experiment::report::{EpochRecord, ExperimentReport, PlanSummary, RunResults, Timing};
use crate::metrics::{cost_model, measure_throughput, Phase};
use crate::optim::{adamw_step, lr_at, OptimizerState, Schedule};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;
use crate::vit::{init_params, loss_and_backward, predict, ViTConfig, ViTParams};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const EXTENSION_STREAM: u64 = 0x4558_5445;
const EVAL_CHUNK: usize = 256;

/// Dataset plus starting weights, shared read-only by the rows of a study.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub init: ViTParams,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let model = cfg.model.base();
    let (dataset, init) = match &cfg.data {
        DataSource::Synth(spec) => {
            let (task, data) = gen_teacher_task(&model, spec)?;
            (data, task.student)
        }
        DataSource::File { path, init } => {
            let data = load_dataset(path)?;
            let params = match init {
                Some(ckpt) => checkpoint_load_for(ckpt, &model)?,
                None => init_params(&model, &mut Rng::new(cfg.seed))?,
            };
            (data, params)
        }
    };
    dataset.check_model(&model)?;
    if dataset.indices(Split::Train).is_empty() {
        return Err(Error::data("dataset has no training samples"));
    }
    Ok(Prepared { dataset, init })
}

pub struct RunOutcome {
    pub report: ExperimentReport,
    pub plan: AdaptationPlan,
    /// Weights of the selected epoch.
    pub best: ViTParams,
}

fn gather(data: &Dataset, idx: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.images[i].clone()).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn accuracy(params: &ViTParams, cfg: &ViTConfig, data: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = gather(data, chunk);
        let logits = predict(&images, params, cfg)?;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn make_plan(cfg: &RunConfig, prep: &Prepared) -> Result<AdaptationPlan> {
    match (&cfg.plan, cfg.strategy) {
        (_, Strategy::Random) => build_plan(&cfg.plan, &cfg.model, cfg.seed),
        (PlanKind::Apla { r, block_range }, strategy) => {
            let train = prep.dataset.indices(Split::Train);
            let probe = &train[..cfg.train.probe_size.min(train.len())];
            let (images, labels) = gather(&prep.dataset, probe);
            let scores = score_columns(strategy, &prep.init, &cfg.model.base(), &images, &labels)?;
            let range = block_range.unwrap_or(crate::adaptation::BlockRange::all(cfg.model.depth));
            let sets = scores
                .iter()
                .map(|s| range.contains(s.block).then(|| s.top(*r)).transpose())
                .collect::<Result<Vec<_>>>()?;
            build_plan_with_columns(&cfg.plan, &cfg.model, cfg.seed, strategy, sets)
        }
        _ => Err(Error::config("a selection strategy only applies to apla plans")),
    }
}

/// Trains one configuration against prepared data.
pub fn run_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let plan = make_plan(cfg, prep)?;
    let model = plan.model.clone();
    let mut params = prep.init.clone();
    params.add_extensions(&model, &mut Rng::new(mix_seed(cfg.seed ^ EXTENSION_STREAM)))?;

    let data = &prep.dataset;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    let test_idx = data.indices(Split::Test);
    let t = &cfg.train;
    let steps_per_epoch = train_idx.len().div_ceil(t.batch_size);
    let schedule = Schedule::new(t.warmup_epochs, t.epochs, steps_per_epoch)?;
    let mut state = OptimizerState::new(&plan.trainable, t.optimizer);
    let mut shuffle = Rng::new(mix_seed(cfg.seed ^ SHUFFLE_STREAM));

    let init_test = accuracy(&params, &model, data, &test_idx)?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = accuracy(&params, &model, data, &val_idx)?;
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut order = train_idx.clone();
    let mut step = 0;
    for epoch in 1..=t.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(t.batch_size) {
            let (images, labels) = gather(data, batch);
            let (loss, grads) = loss_and_backward(&images, &labels, &params, &model, &plan.trainable)?;
            if !loss.is_finite() {
                return Err(Error::Internal(format!("loss diverged at epoch {epoch}")));
            }
            lr = lr_at(&schedule, t.base_lr, step);
            adamw_step(&mut params, &grads, &plan.trainable, &mut state, lr)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val = accuracy(&params, &model, data, &val_idx)?;
        if val > best_val {
            best_val = val;
            best_epoch = epoch;
            best = params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_accuracy: val,
            lr,
        });
    }
    let test = accuracy(&best, &model, data, &test_idx)?;

    let (train_tp, infer_tp) = match &cfg.throughput {
        Some(tp) => {
            let n = t.batch_size.min(train_idx.len());
            let (images, labels) = gather(data, &train_idx[..n]);
            let mut scratch = params.clone();
            let mut st = state.clone();
            let train = measure_throughput(Phase::Train, n, tp.warmup_iters, tp.timed_iters, || {
                let (_, g) = loss_and_backward(&images, &labels, &scratch, &model, &plan.trainable)?;
                adamw_step(&mut scratch, &g, &plan.trainable, &mut st, 0.0)
            })?;
            let infer = measure_throughput(Phase::Inference, n, tp.warmup_iters, tp.timed_iters, || {
                predict(&images, &params, &model).map(|_| ())
            })?;
            (Some(train), Some(infer))
        }
        None => (None, None),
    };

    let results = RunResults {
        plan: PlanSummary {
            label: cfg.plan.label(),
            r: plan.rank(),
            trainable_scalars: plan.trainable_scalars(),
            indices_hash: plan.indices_hash(),
            column_sets: plan.column_sets.clone(),
        },
        epochs,
        best_epoch,
        best_val_accuracy: best_val,
        init_test_accuracy: init_test,
        test_accuracy: test,
        cost: cost_model(&cfg.model, &plan),
    };
    let report = ExperimentReport {
        config: cfg.clone(),
        results,
        timing: Timing {
            run_seconds: started.elapsed().as_secs_f64(),
            train: train_tp,
            inference: infer_tp,
        },
    };
    Ok(RunOutcome { report, plan, best })
}

/// Writes `report.json`, `timing.json`, `metrics.csv`, `report.md` and
/// `checkpoint.bin` into `dir`.
pub fn write_run_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let r = &outcome.report;
    std::fs::write(dir.join("report.json"), r.body_json())?;
    std::fs::write(dir.join("timing.json"), r.timing_json())?;
    std::fs::write(dir.join("metrics.csv"), r.metrics_csv())?;
    std::fs::write(dir.join("report.md"), r.markdown())?;
    checkpoint_save(&outcome.best, &outcome.plan.model, &dir.join("checkpoint.bin"))?;
    Ok(())
}

/// Prepares data, trains, and writes outputs when `out_dir` is set.
pub fn cmd_train(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let outcome = run_prepared(cfg, &prep)?;
    if let Some(dir) = &cfg.out_dir {
        write_run_outputs(&outcome, dir)?;
    }
    Ok(outcome.report)
}
