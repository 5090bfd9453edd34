//! Statistics of the synthetic generator and the lagged correlation study.

use chrono::{Datelike, Duration, NaiveDate, Timelike, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdemand_core::analysis::{lagged_correlation, DiagonalMode};
use stdemand_core::data::{build_demand, generate_synthetic, DemandCube, GridSpec, Propagation, SynthConfig, Weather, RENT};

fn grid(size: usize) -> GridSpec {
    GridSpec {
        rows: size,
        cols: size,
        ..GridSpec::default()
    }
}

fn cubes_for(grid: &GridSpec, synth: &SynthConfig, seed: u64) -> Vec<DemandCube> {
    let out = generate_synthetic(grid, synth, seed).unwrap();
    let start = synth.start_date.and_hms_opt(0, 0, 0).unwrap();
    build_demand(&out.trips, grid, start, synth.days * 24).unwrap().0
}

#[test]
fn workday_morning_rush_beats_the_small_hours() {
    let g = grid(8);
    let synth = SynthConfig {
        days: 31,
        ..SynthConfig::default()
    };
    let out = generate_synthetic(&g, &synth, 17).unwrap();
    let (mut rush, mut night) = (0usize, 0usize);
    for t in &out.trips {
        if matches!(t.start_time.weekday(), Weekday::Sat | Weekday::Sun) {
            continue;
        }
        match t.start_time.hour() {
            8 => rush += 1,
            3 => night += 1,
            _ => {}
        }
    }
    assert!(rush > night, "{rush} vs {night}");
}

#[test]
fn rain_dampens_total_demand_on_average() {
    let g = grid(6);
    let run = |w: Weather, seed: u64| {
        let synth = SynthConfig {
            days: 1,
            weather_override: Some(w),
            ..SynthConfig::default()
        };
        generate_synthetic(&g, &synth, seed).unwrap().trips.len()
    };
    let seeds = 0..10u64;
    let rainy: usize = seeds.clone().map(|s| run(Weather::Rainy, s)).sum();
    let sunny: usize = seeds.map(|s| run(Weather::Sunny, s)).sum();
    assert!(rainy < sunny, "{rainy} vs {sunny}");
}

fn reference_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[test]
fn lagged_correlation_matches_a_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let start = NaiveDate::from_ymd_opt(2016, 8, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for case in 0..6 {
        let (size, hours) = (rng.random_range(3..7), rng.random_range(10..30));
        let cubes: Vec<DemandCube> = (0..hours)
            .map(|t| {
                let counts = (0..2 * size * size * 2).map(|_| rng.random_range(0..5)).collect();
                DemandCube::from_counts(start + Duration::hours(t), [2, size, size, 2], counts).unwrap()
            })
            .collect();
        let center = (rng.random_range(0..size), rng.random_range(0..size));
        let (max_k, max_h) = (rng.random_range(1..size + 1), rng.random_range(0..6));
        let mode = if case % 2 == 0 { DiagonalMode::Diagonal4 } else { DiagonalMode::Literal };
        let grid = lagged_correlation(&cubes, center, RENT, max_k, max_h, mode).unwrap();

        let series = |i: usize, j: usize| -> Vec<f64> {
            cubes
                .iter()
                .map(|c| (0..2).map(|s| c.get(s, i, j, RENT) as f64).sum())
                .collect()
        };
        let y = series(center.0, center.1);
        for k in 0..=max_k {
            for h in 0..=max_h {
                let mut found = Vec::new();
                let dirs: Vec<(i64, i64)> = match (k, mode) {
                    (0, _) => vec![(0, 0)],
                    (_, DiagonalMode::Literal) => vec![(1, 1)],
                    _ => vec![(1, 1), (1, -1), (-1, 1), (-1, -1)],
                };
                for (di, dj) in dirs {
                    let (i, j) = (center.0 as i64 + di * k as i64, center.1 as i64 + dj * k as i64);
                    if i < 0 || j < 0 || i >= size as i64 || j >= size as i64 {
                        continue;
                    }
                    let x = series(i as usize, j as usize);
                    let n = hours as usize - h;
                    // Pair center hour t with neighbor hour t − h.
                    let ys: Vec<f64> = (h..hours as usize).map(|t| y[t]).collect();
                    let xs: Vec<f64> = (0..n).map(|t| x[t]).collect();
                    if let Some(r) = reference_pearson(&xs, &ys) {
                        found.push(r);
                    }
                }
                let want = (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64);
                match (grid.get(k, h), want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "({k},{h}): {a} vs {b}"),
                    (a, b) => assert_eq!(a, b, "({k},{h})"),
                }
            }
        }
    }
}

#[test]
fn planted_propagation_decays_along_the_diagonal() {
    let g = grid(8);
    let synth = SynthConfig {
        days: 14,
        base_intensity: 0.5,
        propagation: Some(Propagation {
            center: [4, 4],
            rings: 3,
            gain: 4.0,
            decay: 0.8,
        }),
        ..SynthConfig::default()
    };
    for seed in 1..=5 {
        let cubes = cubes_for(&g, &synth, seed);
        let corr = lagged_correlation(&cubes, (4, 4), RENT, 3, 3, DiagonalMode::Diagonal4).unwrap();
        let diag: Vec<f64> = corr.diagonal().into_iter().map(Option::unwrap).collect();
        assert!(diag[0] > diag[2], "seed {seed}: {diag:?}");
        assert!(diag.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {diag:?}");
    }
}
