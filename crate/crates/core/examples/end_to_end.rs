//! Simulates a portfolio and compares the baseline claim model with the
//! global Mahalanobis model, with and without a peculiarity effect.
//!
//! Usage: `cargo run --release --example end_to_end -- [vehicles] [claim_weight] [trf_weight] [seed]`

use std::time::Instant;

use telerisk::pipeline::{run_variant, Dataset, FeatureSet, RunSettings};
use telerisk::synth::{generate_portfolio, SynthConfig};
use telerisk::trips::split_by_vin;

fn main() -> telerisk::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map(|s| s.parse().expect("number")).unwrap_or(d);
    let defaults = SynthConfig::default();
    let base = SynthConfig {
        num_vehicles: arg(0, defaults.num_vehicles as f64) as usize,
        peculiarity_claim_weight: arg(1, defaults.peculiarity_claim_weight),
        trf_claim_weight: arg(2, defaults.trf_claim_weight),
        seed: arg(3, defaults.seed as f64) as u64,
        ..defaults
    };
    let start = Instant::now();
    for weight in [base.peculiarity_claim_weight, 0.0] {
        let config = SynthConfig {
            peculiarity_claim_weight: weight,
            ..base.clone()
        };
        let p = generate_portfolio(&config)?;
        let rate =
            p.policies.iter().map(|x| x.claim_ind as f64).sum::<f64>() / p.policies.len() as f64;
        let split = split_by_vin(&p.policies, 0.7, config.seed)?;
        let data = Dataset::new(&p.trips, &p.policies, split)?;
        let settings = RunSettings {
            seed: config.seed,
            ..RunSettings::default()
        };
        let mut aucs = Vec::new();
        for fs in [FeatureSet::ALL[0], FeatureSet::ALL[4]] {
            let out = run_variant(&data, fs, None, &settings)?;
            println!(
                "weight={weight} claim_rate={rate:.3} {:<20} auc={:.4} cv={:.4} lambda={:.3e} alpha={} [{:.1?}]",
                fs.name(),
                out.evaluation.auc,
                out.tuning.best_point().mean_auc,
                out.model.classifier.lambda,
                out.model.classifier.alpha,
                start.elapsed()
            );
            aucs.push(out.evaluation.auc);
        }
        println!(
            "weight={weight} delta_global_mahalanobis={:.4}",
            aucs[1] - aucs[0]
        );
    }
    Ok(())
}
