//! Slow synthetic studies on the shipped ablation configuration.

use std::path::PathBuf;

use stdemand_cli::{synthetic_dataset, RunConfig};
use stdemand_core::experiment::{sweep, SweepAxis};

fn ablation(seed: u64) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.json");
    RunConfig::load(&path, &[format!("seed={seed}"), format!("train.seed={seed}")]).unwrap()
}

/// Longer look-back should not hurt: RMSE(6) ≤ RMSE(1) in at least two of
/// three seeds. Seeds run until the outcome is decided.
#[test]
fn longer_lookback_does_not_hurt() {
    let (mut held, mut broke) = (0, 0);
    let mut seen = Vec::new();
    for seed in 1..=3 {
        let config = ablation(seed);
        let data = synthetic_dataset(&config, 6).unwrap();
        let rows = sweep(&data, &config.network, &config.train, SweepAxis::Lookback, &[1, 6]).unwrap();
        let mean = |k: usize| (rows[k].rmse_rent + rows[k].rmse_return) / 2.0;
        seen.push((seed, mean(0), mean(1)));
        if mean(1) <= mean(0) {
            held += 1;
        } else {
            broke += 1;
        }
        if held == 2 || broke == 2 {
            break;
        }
    }
    assert_eq!(held, 2, "(seed, rmse d=1, rmse d=6): {seen:?}");
}
