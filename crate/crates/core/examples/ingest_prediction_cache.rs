//! Turns per-cell prediction sums produced elsewhere into a lookup table.
//!
//! The cache here is synthesized from the toy so the result can be checked;
//! a real cache would come from running a trained model offline.
//!
//! ```text
//! cargo run --release --example ingest_prediction_cache
//! ```

use recfg::rng::{derive_seed, NormalStream};
use recfg::schedule::{GridSpec, NoiseSchedule, TimeGrid};
use recfg::table::{ingest_cache, read_cache_csv, write_cache_csv, PredictionCacheRecord};
use recfg::world::{AnalyticWorld, ExactOracle, PerturbedOracle, ScoreOracle};

fn main() -> recfg::error::Result<()> {
    let exact = ExactOracle::new(AnalyticWorld::toy(), NoiseSchedule::VarianceExploding);
    let model = PerturbedOracle::new(exact.clone(), vec![0.1], vec![1.0])?;
    let grid = TimeGrid::build(
        exact.schedule(),
        &GridSpec {
            nfe: 8,
            ..GridSpec::default()
        },
    )?;
    let n = 20_000;

    let mut records = Vec::new();
    for c in [0.5, 1.5] {
        for (i, &t) in grid.eval_times().iter().enumerate() {
            let law = exact.world().cond_marginal(exact.schedule(), &[c], t)?;
            let mut z = vec![0.0; n];
            NormalStream::new(derive_seed(5, i as u64), 0).fill(&mut z);
            let xs: Vec<f64> = z
                .iter()
                .map(|z| law.mean[0] + law.var[0].sqrt() * z)
                .collect();
            let (mut ec, mut eu) = (vec![0.0; n], vec![0.0; n]);
            model.eps_cond_batch(&xs, &[c], t, &mut ec)?;
            model.eps_uncond_batch(&xs, t, &mut eu)?;
            records.push(PredictionCacheRecord {
                cond_id: c.to_string(),
                t_index: i,
                dim: 0,
                sum_cond: ec.iter().sum(),
                sum_uncond: eu.iter().sum(),
                count: n as u64,
            });
        }
    }

    let path = std::env::temp_dir().join("recfg_cache.csv");
    write_cache_csv(&path, &records)?;
    let table = ingest_cache(read_cache_csv(&path)?, &grid, 1, "biased-toy")?;
    println!("ingested {} cells from {}", records.len(), path.display());
    for (i, &t) in grid.eval_times().iter().enumerate() {
        println!(
            "  t = {t:>9.4}: ratio c=0.5 {:>8.4}  c=1.5 {:>8.4}  average {:>8.4}",
            table.ratios("0.5", i).expect("present")[0],
            table.ratios("1.5", i).expect("present")[0],
            table.lookup("unseen", i, true)?[0]
        );
    }

    let mut broken = records.clone();
    broken.retain(|r| !(r.cond_id == "1.5" && r.t_index == 3));
    match ingest_cache(broken, &grid, 1, "biased-toy") {
        Err(e) => println!("a cache with a missing cell is rejected: {e}"),
        Ok(_) => unreachable!("gaps must be reported"),
    }
    Ok(())
}
