//! Builds an expectation-ratio table for the exact and a biased oracle, saves it and reloads it.
//!
//! ```text
//! cargo run --release --example build_lookup_table -- [out_dir]
//! ```

use std::path::PathBuf;

use recfg::schedule::{GridSpec, NoiseSchedule, TimeGrid};
use recfg::table::{build_from_oracle, load_table, save_table, write_heatmaps, BuildOptions};
use recfg::world::{AnalyticWorld, Condition, ExactOracle, PerturbedOracle, ScoreOracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("recfg_table"));
    std::fs::create_dir_all(&out)?;
    let exact = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
    let grid = TimeGrid::build(
        exact.schedule(),
        &GridSpec {
            nfe: 32,
            ..GridSpec::default()
        },
    )?;
    let conds: Vec<Condition> = [-1.0, 0.5, 1.0, 2.0]
        .into_iter()
        .map(Condition::scalar)
        .collect();
    let opts = BuildOptions {
        n_per_condition: 50_000,
        ..BuildOptions::default()
    };

    let (table, _) = build_from_oracle(&exact, exact.world(), &grid, &conds, &opts)?;
    println!(
        "exact oracle: max |ratio| = {:.3e} (pure sampling noise)",
        table.max_abs_ratio()
    );

    let biased = PerturbedOracle::new(exact.clone(), vec![0.1], vec![1.0])?;
    let (table, stats) = build_from_oracle(&biased, exact.world(), &grid, &conds, &opts)?;
    println!("biased oracle, condition c = 1:");
    for i in (0..grid.nfe()).step_by(8) {
        let r = table.ratios("1", i).expect("built")[0];
        println!(
            "  t = {:>9.4}: ratio {r:>9.5} +/- {:.1e}",
            grid.times()[i],
            stats.ratio_se["1"][i]
        );
    }
    println!(
        "gamma0 at gamma1 = 2, first step: {:.5}",
        table.gamma0_for(&[2.0], "1", 0, Default::default(), false)?[0]
    );

    let path = out.join("table.json");
    save_table(&table, &path)?;
    write_heatmaps(&table, &out)?;
    assert_eq!(load_table(&path)?, table);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
