//! The `ihan` command line: generate, train, explain, predict, experiment.
//!
//! Every command is an ordinary function over its parsed arguments, so the
//! binary is only `Cli::parse()` plus error reporting.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_cohort, save_cohort, LoadOptions, Split, SplitFractions};
use crate::error::{IhanError, Result};
use crate::experiment::{run_grid, write_runs_csv, write_summary_csv, write_ttest_csv, Grid, Protocol};
use crate::interpret::{
    aggregate_code_level, aggregate_patient_code, csv_err, explain, write_code_level_csv,
    write_encounter_csv, write_patient_csv, DEFAULT_MIN_PATIENTS,
};
use crate::model::Mode;
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::train::{self, TrainConfig};
use crate::vocab::{parse_type_list, CodeType};

/// Printed by `--version`; the number is the checkpoint format this build reads and writes.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1)");

#[derive(Debug, Parser)]
#[command(name = "ihan", version = VERSION, about = "Interpretable hierarchical attention network for risk prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort with planted risk codes.
    Generate(GenerateArgs),
    /// Balance, split, train and save a checkpoint.
    Train(TrainArgs),
    /// Contribution tables at encounter, patient or cohort level.
    Explain(ExplainArgs),
    /// Score every patient in a cohort.
    Predict(PredictArgs),
    /// Repeated runs over a grid of configurations.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator settings as JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth_out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long, env = "IHAN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "algorithm_comb")]
    pub mode: Mode,
    #[arg(long, default_value = "diag,lab,rx,proc", value_parser = parse_types)]
    pub types: ::std::vec::Vec<CodeType>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    #[arg(long, env = "IHAN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Non-cases kept per case; 0 keeps the cohort as is.
    #[arg(long, default_value_t = 3)]
    pub balance_ratio: usize,
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_split)]
    pub split: SplitFractions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Encounter,
    Patient,
    Cohort,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Required for the encounter and patient levels.
    #[arg(long)]
    pub patient: Option<String>,
    #[arg(long, value_enum, default_value = "encounter")]
    pub level: Level,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep rows with |contribution| <= 0.01.
    #[arg(long)]
    pub all: bool,
    /// Cohort level: minimum number of patients carrying a code.
    #[arg(long, default_value_t = DEFAULT_MIN_PATIENTS)]
    pub min_patients: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON grid of configurations.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Output directory for summary.csv, ttest.csv and runs.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, env = "IHAN_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn parse_types(s: &str) -> std::result::Result<Vec<CodeType>, String> {
    parse_type_list(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<SplitFractions, String> {
    SplitFractions::parse(s).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|auc| println!("test AUC: {auc:.4}")),
        Command::Explain(a) => cmd_explain(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Experiment(a) => cmd_experiment(&a).map(|_| ()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn load(path: &Path) -> Result<Vec<crate::data::PatientRecord>> {
    load_cohort(path, LoadOptions::default())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_str::<SyntheticSpec>(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let synthetic = generate_synthetic(&spec)?;
    save_cohort(&args.out, &synthetic.cohort)?;
    let mut w = create(&args.truth_out)?;
    serde_json::to_writer_pretty(&mut w, &synthetic.truth)?;
    writeln!(w)?;
    w.flush()?;
    let n = synthetic.cohort.len();
    let pos = synthetic.cohort.iter().filter(|p| p.is_case()).count();
    println!(
        "{n} patients, positive rate {:.4}, {} planted risk codes",
        pos as f64 / n.max(1) as f64,
        synthetic.truth.n_risk_codes()
    );
    Ok(())
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            active_types: self.types.clone(),
            embedding_dim: self.emb_dim,
            hidden_dim: self.hidden_dim,
            learning_rate: self.lr,
            batch_size: self.batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            balance_ratio: (self.balance_ratio > 0).then_some(self.balance_ratio),
            fractions: self.split,
            stratified: true,
        }
    }
}

/// Trains on the prepared split, saves the checkpoint and returns the test AUC.
pub fn cmd_train(args: &TrainArgs) -> Result<f64> {
    let config = args.config();
    config.validate()?;
    let cohort = load(&args.data)?;
    let Split { train, valid, test } = args.protocol().prepare(&cohort, args.seed)?;
    log::info!(
        "{}: {} train / {} valid / {} test patients",
        config.label(),
        train.len(),
        valid.len(),
        test.len()
    );
    let (params, history) = train::train(&config, &train, &valid)?;
    let test_auc = train::evaluate_auc(&params, &test)?;
    let metrics = BTreeMap::from([
        ("test_auc".to_string(), test_auc),
        ("valid_auc".to_string(), train::evaluate_auc(&params, &valid)?),
        ("best_valid_loss".to_string(), history.best_valid_loss()),
        ("best_epoch".to_string(), history.best_epoch as f64),
        ("epochs_run".to_string(), history.epochs_run as f64),
    ]);
    save_checkpoint(&args.out, &params, Some(&config), &metrics)?;
    Ok(test_auc)
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let cohort = load_cohort(&args.data, LoadOptions::unfiltered())?;
    let out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    if args.level == Level::Cohort {
        let mut reports = Vec::new();
        for p in &cohort {
            match explain(&ck.params, p) {
                Ok(r) => reports.push(r),
                Err(IhanError::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
        return write_code_level_csv(out, &aggregate_code_level(&reports, args.min_patients), args.all);
    }
    let id = args
        .patient
        .as_deref()
        .ok_or_else(|| IhanError::Config("--patient is required for this level".into()))?;
    let patient = cohort
        .iter()
        .find(|p| p.patient_id == id)
        .ok_or_else(|| IhanError::UnknownPatient(id.to_string()))?;
    let report = explain(&ck.params, patient)?;
    match args.level {
        Level::Encounter => write_encounter_csv(out, &report, args.all),
        _ => write_patient_csv(out, &aggregate_patient_code(&report), args.all),
    }
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    patient_id: &'a str,
    score: f64,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let cohort = load_cohort(&args.data, LoadOptions::unfiltered())?;
    let mut out = csv::Writer::from_writer(create(&args.out)?);
    for p in &cohort {
        out.serialize(ScoreRow {
            patient_id: &p.patient_id,
            score: train::score(&ck.params, p)?,
        })
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<crate::experiment::ExperimentReport> {
    let grid = Grid::from_json(&fs::read_to_string(&args.grid)?)?;
    let cohort = load(&args.data)?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = run_grid(&grid, &cohort, args.runs, args.seed, jobs)?;
    fs::create_dir_all(&args.out)?;
    write_summary_csv(create(&args.out.join("summary.csv"))?, &report)?;
    write_ttest_csv(create(&args.out.join("ttest.csv"))?, &report)?;
    write_runs_csv(create(&args.out.join("runs.csv"))?, &report)?;
    for c in &report.cells {
        let (m, s) = c.mean_std();
        println!("{:<40} {m:.4} ± {s:.4}", c.label);
    }
    for p in &report.pairs {
        println!("{} vs {}: p = {:.4}", p.first, p.second, p.test.p);
    }
    Ok(report)
}
