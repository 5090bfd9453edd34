//! The `stdemand` command line: every pipeline stage reads and writes files
//! under the configured run directory.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use stdemand_core::analysis::{heatmap, heatmap_file_name, lagged_correlation, write_heatmap};
use stdemand_core::baselines::{Ensemble, HaModel};
use stdemand_core::data::{
    build_demand, generate_synthetic, read_archive, read_trips, write_archive, write_trips, Corpus, WeatherTable,
    CHANNELS, CHANNEL_NAMES,
};
use stdemand_core::experiment::{evaluate, fit_all, sweep, write_sweep_csv, Dataset, FittedModels};
use stdemand_core::net::TrainedModel;
use stdemand_core::tensor::Tensor;

pub use config::{apply_override, BaselineConfig, CorrelationConfig, Paths, RunConfig, SweepConfig, TimeRange};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing file {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] stdemand_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(stdemand_core::Error::InvalidConfig(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(stdemand_core::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
            CliError::Core(_) => 1,
        }
    }

    fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Core(stdemand_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stdemand", version, about = "Grid bike-sharing demand forecasting pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "configs/desk.json")]
    pub config: PathBuf,
    /// Override a config field by dotted path, e.g. `--set train.seed=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic trips and weather.
    Synth,
    /// Aggregate trips into the hourly cube archive.
    Build,
    /// Train the network, fit the historical average and the ensemble.
    Train,
    /// Predict the cube of one hour from the hours before it.
    Predict {
        /// Target hour, e.g. `2016-08-13T08:00`.
        #[arg(long)]
        hour: String,
        /// Output CSV; defaults to `prediction_<hour>.csv` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score network, HA, MA and ensemble on the test split.
    Evaluate,
    /// Lagged Pearson correlation around the configured center cell.
    Correlate,
    /// Retrain across the configured hyperparameter values.
    Sweep,
    /// Per-channel hourly totals of one hour as CSV grids.
    Heatmap {
        #[arg(long)]
        hour: String,
        /// Also export the network's prediction for that hour.
        #[arg(long)]
        prediction: bool,
    },
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = RunConfig::load(&cli.config, &cli.overrides)?;
    fs::create_dir_all(&config.paths.run_dir).map_err(|e| CliError::from_io(&config.paths.run_dir, e))?;
    write_json(&config.paths.resolve(Path::new("config.json")), &config)?;
    match &cli.command {
        Command::Synth => synth(&config),
        Command::Build => build(&config),
        Command::Train => train(&config),
        Command::Predict { hour, out } => predict(&config, hour, out.as_deref()),
        Command::Evaluate => evaluate_cmd(&config),
        Command::Correlate => correlate(&config),
        Command::Sweep => sweep_cmd(&config),
        Command::Heatmap { hour, prediction } => heatmap_cmd(&config, hour, *prediction),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(stdemand_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::from_io(path, e))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(stdemand_core::Error::from)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::from_io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::from_io(path, e))
}

fn synth(config: &RunConfig) -> Result<()> {
    let out = generate_synthetic(&config.grid, &config.synth_config(), config.seed)?;
    let trips = config.paths.resolve(&config.paths.trips);
    write_trips(create(&trips)?, &out.trips)?;
    out.weather.write(create(&config.paths.resolve(&config.paths.weather))?)?;
    info!("wrote {} trips to {}", out.trips.len(), trips.display());
    Ok(())
}

fn build(config: &RunConfig) -> Result<()> {
    let trips = read_trips(open(&config.paths.resolve(&config.paths.trips))?)?;
    let start = config.range.start.and_hms_opt(0, 0, 0).expect("midnight");
    let (cubes, report) = build_demand(&trips, &config.grid, start, config.hours())?;
    let archive = config.paths.resolve(&config.paths.cubes);
    write_archive(&archive, &config.grid, &cubes)?;
    write_json(&config.paths.resolve(Path::new("ingest.json")), &report)?;
    info!(
        "{} hours → {}; {} of {} records dropped outside the box",
        cubes.len(),
        archive.display(),
        report.dropped_outside,
        report.records
    );
    Ok(())
}

fn load_corpus(config: &RunConfig) -> Result<Corpus> {
    let (grid, cubes) = read_archive(&config.paths.resolve(&config.paths.cubes))?;
    if grid != config.grid {
        return Err(CliError::Config("the cube archive was built with a different grid".into()));
    }
    let weather = WeatherTable::read(open(&config.paths.resolve(&config.paths.weather))?)?;
    Ok(Corpus::from_weather(cubes, &weather, &config.periods)?)
}

/// The dataset `synth` followed by `build` would produce, kept in memory.
pub fn synthetic_dataset(config: &RunConfig, lookback: usize) -> Result<Dataset> {
    let out = generate_synthetic(&config.grid, &config.synth_config(), config.seed)?;
    let start = config.range.start.and_hms_opt(0, 0, 0).expect("midnight");
    let (cubes, _) = build_demand(&out.trips, &config.grid, start, config.hours())?;
    let corpus = Corpus::from_weather(cubes, &out.weather, &config.periods)?;
    Ok(Dataset::new(corpus, &config.split, lookback)?)
}

fn load_dataset(config: &RunConfig, lookback: usize) -> Result<Dataset> {
    Ok(Dataset::new(load_corpus(config)?, &config.split, lookback)?)
}

const ENSEMBLE_FILE: &str = "ensemble.json";

fn train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config, config.network.lookback)?;
    let fitted = fit_all(&data, &config.network, &config.train, config.baselines.ha_by_day_type)?;
    let dir = config.paths.resolve(&config.paths.model);
    fitted.model.save(&dir)?;
    write_json(&dir.join(ENSEMBLE_FILE), &fitted.ensemble)?;
    let last = fitted.model.history.last().expect("history has epoch 0");
    info!(
        "trained {} epochs, best epoch {}, final train loss {:.6}",
        last.epoch, fitted.model.best_epoch, last.train_loss
    );
    Ok(())
}

fn load_models(config: &RunConfig, data: &Dataset) -> Result<FittedModels> {
    let dir = config.paths.resolve(&config.paths.model);
    let model = TrainedModel::load(&dir)?;
    let ensemble: Ensemble = read_json(&dir.join(ENSEMBLE_FILE))?;
    let ha = HaModel::fit(data.train_cubes(), config.baselines.ha_by_day_type)?;
    Ok(FittedModels { model, ha, ensemble })
}

fn evaluate_cmd(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config, config.network.lookback)?;
    let models = load_models(config, &data)?;
    let report = evaluate(&models, &data)?;
    let path = config.paths.resolve(Path::new("metrics.json"));
    write_json(&path, &report)?;
    info!(
        "test RMSE network {:.4}, HA {:.4}, MA {:.4}, ensemble {:.4}",
        report.network.all.rmse, report.ha.all.rmse, report.ma.all.rmse, report.ensemble.all.rmse
    );
    Ok(())
}

fn parse_hour(raw: &str) -> Result<NaiveDateTime> {
    ["%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .ok_or_else(|| CliError::Config(format!("--hour: cannot parse `{raw}`")))
}

fn hour_index(corpus: &Corpus, hour: &NaiveDateTime) -> Result<usize> {
    corpus
        .cubes
        .iter()
        .position(|c| c.hour == *hour)
        .ok_or_else(|| CliError::Config(format!("--hour {hour} is not in the cube archive")))
}

fn predict_hour(config: &RunConfig, corpus: &Corpus, target: usize) -> Result<Tensor> {
    let model = TrainedModel::load(&config.paths.resolve(&config.paths.model))?;
    let d = model.net.config().lookback;
    if target < d {
        return Err(CliError::Config(format!(
            "--hour leaves {target} earlier hours, the model needs a look-back window of {d}"
        )));
    }
    let window = corpus.window_at(target, d)?;
    Ok(model.predict_window(&window)?.map(|v| v.max(0.0)))
}

fn predict(config: &RunConfig, raw: &str, out: Option<&Path>) -> Result<()> {
    let hour = parse_hour(raw)?;
    let corpus = load_corpus(config)?;
    let prediction = predict_hour(config, &corpus, hour_index(&corpus, &hour)?)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        config
            .paths
            .resolve(Path::new(&format!("prediction_{}.csv", hour.format("%Y%m%dT%H"))))
    });
    let mut w = create(&path)?;
    let io = |e| CliError::from_io(&path, e);
    writeln!(w, "segment,i,j,channel,value").map_err(io)?;
    let [s, r, c] = [config.grid.segments, config.grid.rows, config.grid.cols];
    let data = prediction.data();
    for seg in 0..s {
        for i in 0..r {
            for j in 0..c {
                for ch in 0..CHANNELS {
                    let v = data[((seg * r + i) * c + j) * CHANNELS + ch];
                    writeln!(w, "{seg},{i},{j},{},{v}", CHANNEL_NAMES[ch]).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn correlate(config: &RunConfig) -> Result<()> {
    let (_, cubes) = read_archive(&config.paths.resolve(&config.paths.cubes))?;
    let c = &config.correlation;
    let grid = lagged_correlation(
        &cubes,
        (c.center[0], c.center[1]),
        c.channel_index()?,
        c.max_offset,
        c.max_lag,
        c.mode,
    )?;
    grid.write_csv(create(&config.paths.resolve(Path::new("correlation.csv")))?)?;
    Ok(())
}

fn sweep_cmd(config: &RunConfig) -> Result<()> {
    let s = &config.sweep;
    let longest = s
        .values
        .iter()
        .map(|&v| s.axis.apply(&config.network, v).map(|c| c.lookback))
        .collect::<stdemand_core::Result<Vec<_>>>()?
        .into_iter()
        .max()
        .ok_or_else(|| CliError::Config("sweep.values is empty".into()))?;
    let data = load_dataset(config, longest)?;
    let rows = sweep(&data, &config.network, &config.train, s.axis, &s.values)?;
    write_sweep_csv(create(&config.paths.resolve(Path::new("sweep.csv")))?, &rows)?;
    Ok(())
}

fn heatmap_cmd(config: &RunConfig, raw: &str, with_prediction: bool) -> Result<()> {
    let hour = parse_hour(raw)?;
    let corpus = load_corpus(config)?;
    let target = hour_index(&corpus, &hour)?;
    let dir = config.paths.resolve(Path::new("heatmaps"));
    let mut outputs = vec![(dir.join("truth"), corpus.cubes[target].to_tensor())];
    if with_prediction {
        outputs.push((dir.join("prediction"), predict_hour(config, &corpus, target)?));
    }
    for (sub, cube) in outputs {
        fs::create_dir_all(&sub).map_err(|e| CliError::from_io(&sub, e))?;
        for channel in 0..CHANNELS {
            let grid = heatmap(&cube, channel)?;
            write_heatmap(create(&sub.join(heatmap_file_name(channel, &hour)))?, &grid)?;
        }
    }
    Ok(())
}
