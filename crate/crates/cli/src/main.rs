use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use apla::adaptation::{Component, Strategy};
use apla::checkpoint::checkpoint_save;
use apla::data::{gen_teacher_task, save_dataset};
use apla::experiment::{
    cmd_ablate_components, cmd_ablate_selection, cmd_sweep_blocks, cmd_sweep_rank, cmd_train,
    DataSource, Direction, ExperimentReport, RunConfig, StudyOptions, Table,
};
use apla::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apla", version, about = "Train and compare ViT adaptation methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed (and the synthetic data seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    /// Rows trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(Common),
    /// Train each component in isolation, plus full fine-tuning.
    AblateComponents {
        #[command(flatten)]
        study: StudyArgs,
        /// Comma-separated component names; all applicable ones by default.
        #[arg(long, value_delimiter = ',')]
        components: Option<Vec<String>>,
    },
    /// Compare column-selection strategies for the config's APLA plan.
    AblateSelection {
        #[command(flatten)]
        study: StudyArgs,
        /// Comma-separated: gradient, activation, magnitude, random.
        #[arg(long, value_delimiter = ',', default_value = "gradient,activation,magnitude,random")]
        strategies: Vec<String>,
    },
    /// One APLA run per rank.
    SweepRank {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
    },
    /// APLA on a growing number of blocks.
    SweepBlocks {
        #[command(flatten)]
        study: StudyArgs,
        /// bottom_to_top or top_to_bottom.
        #[arg(long, default_value = "bottom_to_top")]
        direction: String,
    },
    /// Write the config's synthetic dataset and its teacher/student weights.
    GenData(Common),
    /// Render the markdown for a finished run or study directory.
    Report {
        /// Directory holding `report.json` or `table.json`.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(common: &Common) -> apla::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        if let DataSource::Synth(spec) = &mut cfg.data {
            spec.seed = seed;
        }
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn study_options(study: &StudyArgs, cfg: &RunConfig) -> StudyOptions {
    StudyOptions {
        jobs: study.jobs,
        out_dir: cfg.out_dir.clone(),
    }
}

fn print_report(report: &ExperimentReport) {
    print!("{}", report.markdown());
}

fn print_table(table: &Table) {
    print!("{}", table.markdown());
}

fn default_components(cfg: &RunConfig) -> Vec<Component> {
    Component::ALL
        .into_iter()
        .filter(|c| *c != Component::LayerScale || cfg.model.use_layerscale)
        .collect()
}

fn gen_data(cfg: &RunConfig) -> apla::Result<()> {
    let DataSource::Synth(spec) = &cfg.data else {
        return Err(Error::config("gen-data needs a synth data source"));
    };
    let out = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| Error::config("gen-data needs --out or out_dir"))?;
    std::fs::create_dir_all(out)?;
    let model = cfg.model.base();
    let (task, data) = gen_teacher_task(&model, spec)?;
    save_dataset(&data, &out.join("dataset.bin"))?;
    checkpoint_save(&task.student, &model, &out.join("student.ckpt"))?;
    checkpoint_save(&task.teacher, &model, &out.join("teacher.ckpt"))?;
    let hist = data.histogram();
    println!(
        "wrote {} samples ({} classes, histogram {:?}) to {}",
        data.len(),
        data.num_classes,
        hist,
        out.display()
    );
    Ok(())
}

fn render(dir: &Path) -> anyhow::Result<()> {
    let table = dir.join("table.json");
    let report = dir.join("report.json");
    if table.exists() {
        let text = std::fs::read_to_string(&table).with_context(|| format!("reading {}", table.display()))?;
        let t: Table = serde_json::from_str(&text).with_context(|| format!("parsing {}", table.display()))?;
        print_table(&t);
    } else if report.exists() {
        #[derive(serde::Deserialize)]
        struct Body {
            config: RunConfig,
            results: apla::experiment::RunResults,
        }
        let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
        let body: Body = serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
        let timing = std::fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(apla::experiment::Timing { run_seconds: 0.0, train: None, inference: None });
        print_report(&ExperimentReport { config: body.config, results: body.results, timing });
    } else {
        return Err(Error::data(format!("{} holds neither table.json nor report.json", dir.display())).into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            print_report(&cmd_train(&cfg)?);
        }
        Command::AblateComponents { study, components } => {
            let cfg = load_config(&study.common)?;
            let list = match components {
                Some(names) => names.iter().map(|n| Component::parse(n.trim())).collect::<apla::Result<Vec<_>>>()?,
                None => default_components(&cfg),
            };
            print_table(&cmd_ablate_components(&cfg, &list, &study_options(&study, &cfg))?);
        }
        Command::AblateSelection { study, strategies } => {
            let cfg = load_config(&study.common)?;
            let list = strategies.iter().map(|s| Strategy::parse(s.trim())).collect::<apla::Result<Vec<_>>>()?;
            print_table(&cmd_ablate_selection(&cfg, &list, &study_options(&study, &cfg))?);
        }
        Command::SweepRank { study, ranks } => {
            let cfg = load_config(&study.common)?;
            print_table(&cmd_sweep_rank(&cfg, &ranks, &study_options(&study, &cfg))?);
        }
        Command::SweepBlocks { study, direction } => {
            let cfg = load_config(&study.common)?;
            let dir = Direction::parse(&direction)?;
            print_table(&cmd_sweep_blocks(&cfg, dir, &study_options(&study, &cfg))?);
        }
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            gen_data(&cfg)?;
        }
        Command::Report { dir } => render(&dir)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data | ErrorClass::Other => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
