//! Repeated-run experiments: balance → split → train → test AUC, per grid cell,
//! with summary statistics and pairwise Welch t-tests.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{self, train_logistic, LogisticConfig};
use crate::data::{balance_cohort, split_cohort, PatientRecord, Split, SplitFractions};
use crate::error::{IhanError, Result};
use crate::interpret::csv_err;
use crate::metrics::{mean_std, welch_t_test, TTest};
use crate::model::Mode;
use crate::train::{self, TrainConfig};
use crate::vocab::CodeType;

/// Cohort preparation shared by every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    /// Non-cases kept per case; `None` skips balancing.
    pub balance_ratio: Option<usize>,
    pub fractions: SplitFractions,
    pub stratified: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            balance_ratio: Some(3),
            fractions: SplitFractions::default(),
            stratified: true,
        }
    }
}

impl Protocol {
    /// Balanced, split cohort for one run; every step draws from `seed`.
    pub fn prepare(&self, cohort: &[PatientRecord], seed: u64) -> Result<Split> {
        match self.balance_ratio {
            Some(ratio) => {
                let balanced = balance_cohort(cohort, ratio, seed)?;
                split_cohort(&balanced, self.fractions, seed, self.stratified)
            }
            None => split_cohort(cohort, self.fractions, seed, self.stratified),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ihan,
    Logistic,
}

/// One configuration of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(default = "default_kind")]
    pub model: ModelKind,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub types: Vec<CodeType>,
}

fn default_kind() -> ModelKind {
    ModelKind::Ihan
}

fn default_mode() -> Mode {
    Mode::AlgorithmComb
}

impl GridCell {
    pub fn ihan(mode: Mode, types: &[CodeType]) -> Self {
        GridCell {
            model: ModelKind::Ihan,
            mode,
            types: types.to_vec(),
        }
    }

    pub fn logistic(types: &[CodeType]) -> Self {
        GridCell {
            model: ModelKind::Logistic,
            mode: Mode::AlgorithmComb,
            types: types.to_vec(),
        }
    }

    /// `algorithm_comb:diag+lab`, `single_type:diag` or `logistic:diag+lab`.
    pub fn label(&self) -> String {
        let types: Vec<&str> = self.types.iter().map(|t| t.as_str()).collect();
        let head = match self.model {
            ModelKind::Logistic => "logistic".to_string(),
            ModelKind::Ihan => self.mode.resolve(&self.types).unwrap_or(self.mode).to_string(),
        };
        format!("{head}:{}", types.join("+"))
    }

    fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(IhanError::Config(format!("grid cell {} has no code types", self.label())));
        }
        if self.model == ModelKind::Ihan {
            self.mode.resolve(&self.types)?;
        }
        Ok(())
    }
}

/// Experiment description, usually read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: Vec<GridCell>,
    /// Cell index pairs to t-test; defaults to consecutive cells.
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    /// IHAN hyperparameters; `mode` and `active_types` come from each cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baseline: LogisticConfig,
    #[serde(default)]
    pub protocol: Protocol,
}

impl Grid {
    pub fn new(cells: Vec<GridCell>) -> Self {
        Grid {
            cells,
            pairs: None,
            train: TrainConfig::default(),
            baseline: LogisticConfig::default(),
            protocol: Protocol::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Grid = serde_json::from_str(text)
            .map_err(|e| IhanError::Config(format!("grid: {e}")))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(IhanError::Config("grid has no cells".into()));
        }
        for c in &self.cells {
            c.validate()?;
        }
        for &(a, b) in self.pairs().iter() {
            if a >= self.cells.len() || b >= self.cells.len() || a == b {
                return Err(IhanError::Config(format!("invalid pair ({a}, {b})")));
            }
        }
        self.protocol.fractions.validate()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        match &self.pairs {
            Some(p) => p.clone(),
            None => (1..self.cells.len()).map(|i| (i - 1, i)).collect(),
        }
    }

    fn train_config(&self, cell: &GridCell, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: cell.mode,
            active_types: cell.types.clone(),
            seed,
            ..self.train.clone()
        }
    }

    fn baseline_config(&self, cell: &GridCell, seed: u64) -> LogisticConfig {
        LogisticConfig {
            active_types: cell.types.clone(),
            seed,
            ..self.baseline.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub test_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub runs: Vec<RunRecord>,
}

impl CellSummary {
    pub fn aucs(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_auc).collect()
    }

    /// Mean and sample standard deviation of test AUC.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.aucs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub first: String,
    pub second: String,
    pub mean_first: f64,
    pub mean_second: f64,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellSummary>,
    pub pairs: Vec<PairTest>,
}

/// Trains and evaluates one cell on one prepared split.
pub fn run_once(grid: &Grid, cell: &GridCell, split: &Split, run: usize, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let (test_auc, history) = match cell.model {
        ModelKind::Ihan => {
            let config = grid.train_config(cell, seed);
            let (params, history) = train::train(&config, &split.train, &split.valid)?;
            (train::evaluate_auc(&params, &split.test)?, history)
        }
        ModelKind::Logistic => {
            let config = grid.baseline_config(cell, seed);
            let (model, history) = train_logistic(&config, &split.train, &split.valid)?;
            (baseline::evaluate_auc(&model, &split.test)?, history)
        }
    };
    Ok(RunRecord {
        run,
        seed,
        test_auc,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs_run,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every cell `n_runs` times with seeds `seed, seed + 1, …`.
///
/// Run `r` of every cell sees the same balanced split, so cells are compared on
/// identical data. Work is spread over at most `jobs` threads; results do not
/// depend on the thread count.
pub fn run_grid(
    grid: &Grid,
    cohort: &[PatientRecord],
    n_runs: usize,
    seed: u64,
    jobs: usize,
) -> Result<ExperimentReport> {
    grid.validate()?;
    if n_runs == 0 {
        return Err(IhanError::Config("at least one run is required".into()));
    }
    let splits = (0..n_runs)
        .map(|r| grid.protocol.prepare(cohort, seed + r as u64))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..grid.cells.len())
        .flat_map(|c| (0..n_runs).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| IhanError::Config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| {
                let cell = &grid.cells[c];
                let rec = run_once(grid, cell, &splits[r], r, seed + r as u64)?;
                log::info!("{} run {r}: test AUC {:.4} ({:.1}s)", cell.label(), rec.test_auc, rec.seconds);
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let cells: Vec<CellSummary> = grid
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| CellSummary {
            label: cell.label(),
            runs: records[c * n_runs..(c + 1) * n_runs].to_vec(),
        })
        .collect();
    let pairs = if n_runs < 2 {
        Vec::new()
    } else {
        grid.pairs()
            .into_iter()
            .map(|(a, b)| {
                Ok(PairTest {
                    first: cells[a].label.clone(),
                    second: cells[b].label.clone(),
                    mean_first: cells[a].mean_std().0,
                    mean_second: cells[b].mean_std().0,
                    test: welch_t_test(&cells[a].aucs(), &cells[b].aucs())?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ExperimentReport { cells, pairs })
}

/// Convenience wrapper: `n_runs` IHAN runs of one configuration.
pub fn run_experiment(
    config: &TrainConfig,
    cohort: &[PatientRecord],
    protocol: Protocol,
    n_runs: usize,
    jobs: usize,
) -> Result<CellSummary> {
    let grid = Grid {
        cells: vec![GridCell::ihan(config.mode, &config.active_types)],
        pairs: Some(Vec::new()),
        train: config.clone(),
        baseline: LogisticConfig::default(),
        protocol,
    };
    let mut report = run_grid(&grid, cohort, n_runs, config.seed, jobs)?;
    Ok(report.cells.remove(0))
}

/// `configuration,mean_auc,std_auc,n_runs`
pub fn write_summary_csv(w: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["configuration", "mean_auc", "std_auc", "n_runs"]).map_err(csv_err)?;
    for c in &report.cells {
        let (mean, std) = c.mean_std();
        out.write_record([
            c.label.clone(),
            format!("{mean:.6}"),
            format!("{std:.6}"),
            c.runs.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `config_1,config_2,mean_1,mean_2,p_value`
pub fn write_ttest_csv(w: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_1", "config_2", "mean_1", "mean_2", "p_value"]).map_err(csv_err)?;
    for p in &report.pairs {
        out.write_record([
            p.first.clone(),
            p.second.clone(),
            format!("{:.6}", p.mean_first),
            format!("{:.6}", p.mean_second),
            format!("{:.6e}", p.test.p),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per run: `configuration,run,seed,test_auc,best_epoch,epochs_run`.
pub fn write_runs_csv(w: impl Write, report: &ExperimentReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["configuration", "run", "seed", "test_auc", "best_epoch", "epochs_run"])
        .map_err(csv_err)?;
    for c in &report.cells {
        for r in &c.runs {
            out.write_record([
                c.label.clone(),
                r.run.to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.test_auc),
                r.best_epoch.to_string(),
                r.epochs_run.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_json_defaults() {
        let g = Grid::from_json(
            r#"{"cells":[{"types":["diag"]},{"mode":"data_comb","types":["diag","lab"]},{"model":"logistic","types":["diag"]}]}"#,
        )
        .unwrap();
        assert_eq!(g.pairs(), vec![(0, 1), (1, 2)]);
        assert_eq!(g.cells[0].label(), "single_type:diag");
        assert_eq!(g.cells[1].label(), "data_comb:diag+lab");
        assert_eq!(g.cells[2].label(), "logistic:diag");
        assert_eq!(g.train, TrainConfig::default());
    }

    #[test]
    fn invalid_grids() {
        assert!(Grid::from_json(r#"{"cells":[]}"#).is_err());
        assert!(Grid::from_json(r#"{"cells":[{"types":["diag"]}],"pairs":[[0,3]]}"#).is_err());
        assert!(Grid::from_json(r#"{"cells":[{"mode":"single_type","types":["diag","lab"]}]}"#).is_err());
        assert!(Grid::from_json(r#"{"cells":[{"types":["blood"]}]}"#).is_err());
    }
}
