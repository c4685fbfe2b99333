//! Repeated runs comparing the logistic baseline with both fusion modes on the
//! default synthetic cohort, with pairwise Welch t-tests.
//!
//! cargo run --release --example fusion_experiment -- [runs] [jobs]

use ihan::experiment::{run_grid, write_summary_csv, write_ttest_csv, Grid, GridCell};
use ihan::model::Mode;
use ihan::synth::{generate_synthetic, SyntheticSpec};
use ihan::CodeType;

fn main() -> ihan::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let runs = args.first().copied().unwrap_or(3);
    let jobs = args
        .get(1)
        .copied()
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let cohort = generate_synthetic(&SyntheticSpec::default())?.cohort;
    let mut grid = Grid::new(vec![
        GridCell::logistic(&CodeType::ALL),
        GridCell::ihan(Mode::AlgorithmComb, &CodeType::ALL),
        GridCell::ihan(Mode::DataComb, &CodeType::ALL),
    ]);
    grid.pairs = Some(vec![(0, 1), (0, 2), (1, 2)]);
    grid.train.embedding_dim = 64;
    grid.train.hidden_dim = 64;
    grid.train.batch_size = 16;

    let report = run_grid(&grid, &cohort, runs, 1, jobs)?;
    write_summary_csv(std::io::stdout(), &report)?;
    println!();
    write_ttest_csv(std::io::stdout(), &report)?;
    Ok(())
}
