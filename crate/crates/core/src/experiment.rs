//! Experiment configuration, multi-seed runs, run directories, comparison
//! reports and hyperparameter sweeps.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! [experiment]
//! name = "perfect-short"
//! agent = "dqn"            # dqn | cem | mpc-ga | dp
//! seeds = [1, 2, 3, 4, 5]
//! episodes = 50
//! episode_hours = 2000     # training episode length, 0 = whole train split
//! eval_segment = "test"    # train | validation | test | all
//! eval_hours = 0           # 0 = whole evaluation segment
//! out = "runs"
//!
//! [data]                   # omit `csv` to use the synthetic generator
//! csv = "prices.csv"
//!
//! [wrapper]
//! mode = "predicted"       # none | predicted | perfect
//! horizons = [1, 2, 3]
//! checkpoints = { "1" = "fc/forecaster_h1.json", "2" = "fc/forecaster_h2.json", "3" = "fc/forecaster_h3.json" }
//! ```
//!
//! Further sections (`synthetic`, `battery`, `forecaster`, `dqn`, `cem`,
//! `ga`, `dp`) override the defaults of the corresponding config types.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::battery_env::{write_trace, BatteryEnv, BatteryParams, Environment, TraceRow};
use crate::cem::{cem_policy_rollout, train_cem_policy, CemConfig, IterationStats};
use crate::dqn::{evaluate_policy, train_agent, DqnConfig, StateEncoder};
use crate::error::{invalid, Error, Result};
use crate::forecasting::{Forecaster, ForecasterConfig, Horizon};
use crate::market_data::{
    generate_synthetic, ingest_csv, IngestOptions, MarketRecord, MarketSeries, SyntheticConfig,
};
use crate::neural::DenseNet;
use crate::oracle::{dp_optimal, mpc_ga_dispatch, DpConfig, GaConfig};
use crate::wrapper::{ForecastMode, ForecastWrapper, WrapperConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Dqn,
    Cem,
    MpcGa,
    Dp,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::Cem => "cem",
            AgentKind::MpcGa => "mpc-ga",
            AgentKind::Dp => "dp",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(Self::Dqn),
            "cem" => Ok(Self::Cem),
            "mpc-ga" => Ok(Self::MpcGa),
            "dp" => Ok(Self::Dp),
            other => Err(invalid(format!("unknown agent kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub agent: AgentKind,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub episode_hours: usize,
    pub eval_segment: Segment,
    pub eval_hours: usize,
    pub initial_soc: f64,
    pub out: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            agent: AgentKind::Dqn,
            seeds: vec![1],
            episodes: 50,
            episode_hours: 2000,
            eval_segment: Segment::Test,
            eval_hours: 0,
            initial_soc: crate::battery_env::DEFAULT_INITIAL_SOC,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub csv: Option<PathBuf>,
    pub fill_gaps: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            fill_gaps: false,
            train_fraction: crate::market_data::DEFAULT_TRAIN_FRACTION,
            validation_fraction: crate::market_data::DEFAULT_VALIDATION_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrapperSection {
    pub mode: ForecastMode,
    pub horizons: Vec<Horizon>,
    /// Forecaster checkpoint per horizon, keyed by the horizon in hours.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub synthetic: SyntheticConfig,
    pub battery: BatteryParams,
    pub forecaster: ForecasterConfig,
    pub wrapper: WrapperSection,
    pub dqn: DqnConfig,
    pub cem: CemConfig,
    pub ga: GaConfig,
    pub dp: DpConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes relative data and checkpoint paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(csv) = self.data.csv.as_mut() {
            fix(csv);
        }
        for p in self.wrapper.checkpoints.values_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 8 hex digits of the SHA-256 of the canonical TOML rendering,
    /// ignoring the output directory.
    pub fn content_hash(&self) -> Result<String> {
        let mut spec = self.clone();
        spec.experiment.out = PathBuf::new();
        let digest = Sha256::digest(spec.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..8].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self
            .experiment
            .out
            .join(format!("{}-{}", self.experiment.name, self.content_hash()?)))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.name.is_empty() || e.name.contains(['/', '\\']) {
            return Err(Error::Config(
                "experiment name must be a non-empty path component".into(),
            ));
        }
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = e.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != e.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if matches!(e.agent, AgentKind::Dqn) && e.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        self.battery.validate()?;
        if !(self.battery.soc_min..=self.battery.soc_max).contains(&e.initial_soc) {
            return Err(Error::Config(
                "initial SOC must lie inside the SOC bounds".into(),
            ));
        }
        match e.agent {
            AgentKind::Dqn => self.dqn.validate()?,
            AgentKind::Cem => self.cem.validate()?,
            AgentKind::MpcGa => self.ga.validate()?,
            AgentKind::Dp if self.dp.resolution < 2 => {
                return Err(Error::Config("DP resolution must be at least 2".into()));
            }
            AgentKind::Dp => {}
        }
        if self.wrapper.mode == ForecastMode::Predicted {
            for h in &self.wrapper.horizons {
                match self.wrapper.checkpoints.get(&h.to_string()) {
                    None => {
                        return Err(Error::Config(format!(
                            "no forecaster checkpoint configured for horizon {h}"
                        )))
                    }
                    Some(p) if !p.is_file() => {
                        return Err(Error::Config(format!(
                            "forecaster checkpoint {} does not exist",
                            p.display()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn load_series(&self) -> Result<MarketSeries> {
        let series = match &self.data.csv {
            Some(path) => {
                let opts = IngestOptions {
                    fill_gaps: self.data.fill_gaps,
                    ..Default::default()
                };
                ingest_csv(path, &opts)?
            }
            None => generate_synthetic(&self.synthetic)?.series,
        };
        series.with_split_fractions(self.data.train_fraction, self.data.validation_fraction)
    }

    pub fn wrapper_config(&self) -> Result<WrapperConfig> {
        let w = &self.wrapper;
        let cfg = match w.mode {
            ForecastMode::None => WrapperConfig::none(),
            ForecastMode::Perfect => WrapperConfig::perfect(w.horizons.clone()),
            ForecastMode::Predicted => {
                let mut map = BTreeMap::new();
                for h in &w.horizons {
                    let path = w.checkpoints.get(&h.to_string()).ok_or_else(|| {
                        Error::Config(format!(
                            "no forecaster checkpoint configured for horizon {h}"
                        ))
                    })?;
                    let f = Forecaster::load(path)?;
                    if f.horizon != *h {
                        return Err(Error::Config(format!(
                            "{} holds a {}h forecaster, expected {h}h",
                            path.display(),
                            f.horizon
                        )));
                    }
                    map.insert(*h, f);
                }
                let mut cfg = WrapperConfig::predicted(map);
                cfg.horizons = w.horizons.clone();
                cfg
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key (`dqn.gamma`) to a TOML value.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?
            .insert(parts[parts.len() - 1].to_string(), value);
        root.try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))
    }
}

/// Data and environments shared by every seed of a run.
pub struct Workload {
    pub series: MarketSeries,
    pub wrapper: WrapperConfig,
    pub encoder: StateEncoder,
    pub train: std::ops::Range<usize>,
    pub eval: std::ops::Range<usize>,
}

impl Workload {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let series = cfg.load_series()?;
        let wrapper = cfg.wrapper_config()?;
        let split = series.split().clone();
        if split.train.is_empty() {
            return Err(invalid("training split is empty"));
        }
        let encoder =
            StateEncoder::fit(&series.train().iter().map(|r| r.price).collect::<Vec<_>>())?;
        let eval = match cfg.experiment.eval_segment {
            Segment::Train => split.train.clone(),
            Segment::Validation => split.validation.clone(),
            Segment::Test => split.test.clone(),
            Segment::All => 0..series.len(),
        };
        let eval = match cfg.experiment.eval_hours {
            0 => eval,
            h => eval.start..(eval.start + h).min(eval.end),
        };
        if eval.is_empty() {
            return Err(invalid("evaluation segment is empty"));
        }
        Ok(Self {
            train: split.train,
            eval,
            series,
            wrapper,
            encoder,
        })
    }

    pub fn env(
        &self,
        range: std::ops::Range<usize>,
        params: &BatteryParams,
        soc: f64,
    ) -> Result<ForecastWrapper> {
        let records = self.series.records();
        let battery = BatteryEnv::new(records[range.clone()].to_vec(), params.clone(), soc)?;
        ForecastWrapper::new(battery, self.wrapper.clone(), &records[..range.start])
    }

    fn eval_records(&self) -> &[MarketRecord] {
        &self.series.records()[self.eval.clone()]
    }

    /// Length of training episodes, capped at the train split.
    fn episode_len(&self, hours: usize) -> usize {
        match hours {
            0 => self.train.len(),
            h => h.min(self.train.len()),
        }
    }
}

/// One seed's evaluation.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub reward: f64,
    pub activity_count: usize,
    pub episode_len: usize,
    pub compute_seconds: f64,
    /// Accumulated reward per training episode (DQN).
    pub history: Vec<f64>,
    pub cem_stats: Vec<IterationStats>,
    pub trace: Vec<TraceRow>,
    pub checkpoint: Option<String>,
    pub padded: bool,
}

#[derive(Serialize)]
struct PolicyCheckpoint<'a> {
    agent: AgentKind,
    encoder: StateEncoder,
    network: &'a DenseNet,
}

/// Trains (where applicable) and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, work: &Workload, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let e = &cfg.experiment;
    let soc = e.initial_soc;
    let params = &cfg.battery;
    let mut history = Vec::new();
    let mut cem_stats = Vec::new();
    let mut checkpoint = None;
    let mut eval_env = work.env(work.eval.clone(), params, soc)?;

    let (reward, activity_count, trace) = match e.agent {
        AgentKind::Dqn => {
            let len = work.episode_len(e.episode_hours);
            let span = work.train.len() - len;
            let starts = std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x2545_F491_4F6C_DD1D),
            ));
            let make_env = || {
                let offset = starts.lock().expect("episode rng").random_range(0..=span);
                let s = work.train.start + offset;
                work.env(s..s + len, params, soc)
            };
            let out = train_agent(make_env, &cfg.dqn, work.encoder, e.episodes, seed)?;
            history = out.history;
            let ev = evaluate_policy(&out.agent, &mut eval_env)?;
            checkpoint = Some(serde_json::to_string(&PolicyCheckpoint {
                agent: e.agent,
                encoder: work.encoder,
                network: &out.agent.q_net,
            })?);
            (ev.reward, ev.activity_count, ev.trace)
        }
        AgentKind::Cem => {
            let len = work.episode_len(e.episode_hours);
            let range = work.train.start..work.train.start + len;
            let cem = CemConfig {
                seed,
                ..cfg.cem.clone()
            };
            let out =
                train_cem_policy(|| work.env(range.clone(), params, soc), work.encoder, &cem)?;
            cem_stats = out.stats;
            let ev = cem_policy_rollout(&out.best_params, &mut eval_env, &work.encoder, &cem)?;
            let widths = cem.policy_widths(eval_env.observation_width());
            let net = DenseNet::from_flat(&widths, &cem.policy_activations(), &out.best_params)?;
            checkpoint = Some(serde_json::to_string(&PolicyCheckpoint {
                agent: e.agent,
                encoder: work.encoder,
                network: &net,
            })?);
            (ev.reward, ev.activity_count, ev.trace)
        }
        AgentKind::MpcGa => {
            let ga = GaConfig {
                seed,
                ..cfg.ga.clone()
            };
            let d = mpc_ga_dispatch(work.eval_records(), params, soc, &ga)?;
            let active = d.trace.iter().filter(|r| r.corrected_action != 0.0).count();
            (d.reward, active, d.trace)
        }
        AgentKind::Dp => {
            let d = dp_optimal(work.eval_records(), params, soc, &cfg.dp)?.dispatch;
            let active = d.trace.iter().filter(|r| r.corrected_action != 0.0).count();
            (d.reward, active, d.trace)
        }
    };

    Ok(SeedResult {
        seed,
        reward,
        activity_count,
        episode_len: work.eval.len(),
        compute_seconds: start.elapsed().as_secs_f64(),
        history,
        cem_stats,
        trace,
        checkpoint,
        padded: eval_env.padded(),
    })
}

/// Runs every seed (in parallel) without writing anything.
pub fn execute(cfg: &ExperimentConfig, work: &Workload) -> Result<Vec<SeedResult>> {
    cfg.experiment
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, work, seed))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub reward: f64,
    pub activity_count: usize,
    pub episode_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub agent: String,
    pub mode: String,
    pub horizons: String,
    pub seeds: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_activity: f64,
    pub episode_len: usize,
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub compute_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: usize,
    pub seed: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemStatsRow {
    pub seed: u64,
    pub iteration: usize,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub summary: SummaryRow,
    pub seeds: Vec<SeedResult>,
}

impl RunSummary {
    pub fn rewards(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.reward).collect()
    }
}

pub fn summarize(cfg: &ExperimentConfig, seeds: &[SeedResult]) -> SummaryRow {
    let rewards: Vec<f64> = seeds.iter().map(|s| s.reward).collect();
    let (mean, std) = mean_std(&rewards);
    let activity: Vec<f64> = seeds.iter().map(|s| s.activity_count as f64).collect();
    SummaryRow {
        name: cfg.experiment.name.clone(),
        agent: cfg.experiment.agent.to_string(),
        mode: cfg.wrapper.mode.to_string(),
        horizons: cfg
            .wrapper
            .horizons
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        seeds: seeds.len(),
        mean_reward: mean,
        std_reward: std,
        mean_activity: mean_std(&activity).0,
        episode_len: seeds.first().map_or(0, |s| s.episode_len),
        padded: seeds.iter().any(|s| s.padded),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(Error::Validation(format!("{} not found", path.display())));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    summary: &SummaryRow,
    seeds: &[SeedResult],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    write_rows(&dir.join("summary.csv"), [summary])?;
    write_rows(
        &dir.join("seeds.csv"),
        seeds.iter().map(|s| SeedRow {
            seed: s.seed,
            reward: s.reward,
            activity_count: s.activity_count,
            episode_len: s.episode_len,
        }),
    )?;
    write_rows(
        &dir.join("timing.csv"),
        seeds.iter().map(|s| TimingRow {
            seed: s.seed,
            compute_seconds: s.compute_seconds,
        }),
    )?;
    if seeds.iter().any(|s| !s.history.is_empty()) {
        write_rows(
            &dir.join("history.csv"),
            seeds.iter().flat_map(|s| {
                s.history
                    .iter()
                    .enumerate()
                    .map(move |(episode, &reward)| HistoryRow {
                        episode,
                        seed: s.seed,
                        reward,
                    })
            }),
        )?;
    }
    if seeds.iter().any(|s| !s.cem_stats.is_empty()) {
        write_rows(
            &dir.join("cem_stats.csv"),
            seeds.iter().flat_map(|s| {
                s.cem_stats.iter().map(move |st| CemStatsRow {
                    seed: s.seed,
                    iteration: st.iteration,
                    best: st.best,
                    mean: st.mean,
                    std: st.std,
                })
            }),
        )?;
    }
    for s in seeds {
        let path = dir.join(format!("trace_seed{}.csv", s.seed));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_trace(&s.trace, file)?;
        if let Some(ckpt) = &s.checkpoint {
            let path = dir.join(format!("checkpoint_seed{}.json", s.seed));
            fs::write(&path, ckpt).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Validates, runs every seed and writes the run directory
/// `<out>/<name>-<hash>`. Nothing is created when a precondition fails; a
/// failed run leaves no directory behind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let work = Workload::prepare(cfg)?;
    let dir = cfg.run_dir()?;
    let seeds = execute(cfg, &work)?;
    let summary = summarize(cfg, &seeds);

    let staging = dir.with_file_name(format!(
        ".{}.partial",
        dir.file_name().and_then(|n| n.to_str()).unwrap_or("run")
    ));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    if let Err(e) = write_run(&staging, cfg, &summary, &seeds) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))?;
    log::info!(
        "{}: mean reward {:.2} ± {:.2} over {} seeds -> {}",
        summary.name,
        summary.mean_reward,
        summary.std_reward,
        summary.seeds,
        dir.display()
    );
    Ok(RunSummary {
        dir,
        summary,
        seeds,
    })
}

pub fn read_summary(dir: &Path) -> Result<SummaryRow> {
    if !dir.is_dir()
        || fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_none()
    {
        return Err(Error::Validation(format!(
            "{} is not a run directory",
            dir.display()
        )));
    }
    read_rows::<SummaryRow>(&dir.join("summary.csv"))?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation(format!("{} has an empty summary", dir.display())))
}

pub fn read_seed_rows(dir: &Path) -> Result<Vec<SeedRow>> {
    read_rows(&dir.join("seeds.csv"))
}

pub fn read_timing(dir: &Path) -> Result<Vec<TimingRow>> {
    read_rows(&dir.join("timing.csv"))
}

pub fn read_history(dir: &Path) -> Result<Vec<HistoryRow>> {
    read_rows(&dir.join("history.csv"))
}

/// Percent change of `candidate` over `baseline`; `None` for a zero baseline.
pub fn relative_gain(baseline: f64, candidate: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (candidate - baseline) / baseline.abs() * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub agent: String,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub gain_pct: Option<f64>,
    pub mean_activity: f64,
    /// Shown in the text table only, so the CSV stays reproducible.
    #[serde(skip)]
    pub compute_seconds: Option<f64>,
    pub episode_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub baseline: String,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<7} {:>14} {:>12} {:>9} {:>9} {:>10}",
            "run", "agent", "mean reward", "std", "gain %", "activity", "seconds"
        );
        for r in &self.rows {
            let gain = r.gain_pct.map_or("n/a".to_string(), |g| format!("{g:+.1}"));
            let secs = r
                .compute_seconds
                .map_or("n/a".to_string(), |c| format!("{c:.1}"));
            let _ = writeln!(
                s,
                "{:<24} {:<7} {:>14.2} {:>12.2} {:>9} {:>9.1} {:>10}",
                r.name, r.agent, r.mean_reward, r.std_reward, gain, r.mean_activity, secs
            );
        }
        let _ = write!(s, "gain relative to `{}`", self.baseline);
        s
    }
}

/// Builds comparison rows from summaries; `baseline` names one of them
/// (defaults to the first).
pub fn compare_summaries(
    runs: &[(SummaryRow, Option<f64>)],
    baseline: Option<&str>,
) -> Result<Report> {
    let (first, _) = runs
        .first()
        .ok_or_else(|| invalid("report needs at least one run"))?;
    let base = match baseline {
        None => first,
        Some(name) => {
            &runs
                .iter()
                .find(|(s, _)| s.name == name)
                .ok_or_else(|| invalid(format!("baseline run `{name}` not among the inputs")))?
                .0
        }
    };
    if runs.iter().any(|(s, _)| s.episode_len != first.episode_len) {
        log::warn!("runs cover different episode lengths; comparison may be misleading");
    }
    Ok(Report {
        baseline: base.name.clone(),
        rows: runs
            .iter()
            .map(|(s, secs)| ReportRow {
                name: s.name.clone(),
                agent: s.agent.clone(),
                mean_reward: s.mean_reward,
                std_reward: s.std_reward,
                gain_pct: relative_gain(base.mean_reward, s.mean_reward),
                mean_activity: s.mean_activity,
                compute_seconds: *secs,
                episode_len: s.episode_len,
            })
            .collect(),
    })
}

/// Reads run directories and compares them against `baseline`.
pub fn compare_report(dirs: &[PathBuf], baseline: Option<&str>) -> Result<Report> {
    if dirs.is_empty() {
        return Err(invalid("report needs at least one run directory"));
    }
    let runs = dirs
        .iter()
        .map(|d| {
            let summary = read_summary(d)?;
            let secs = read_timing(d)
                .ok()
                .filter(|t| !t.is_empty())
                .map(|t| mean_std(&t.iter().map(|r| r.compute_seconds).collect::<Vec<_>>()).0);
            Ok((summary, secs))
        })
        .collect::<Result<Vec<_>>>()?;
    compare_summaries(&runs, baseline)
}

/// Parses a CLI/grid literal as a TOML value; bare words become strings.
pub fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// Position in Cartesian enumeration order.
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    /// Index into `cells`.
    pub best: usize,
    pub best_config: ExperimentConfig,
}

/// Cartesian expansion of `grid` (last key varies fastest), optionally
/// reduced to `cap` cells drawn uniformly without replacement. Each cell is
/// scored by `score`; the highest wins, ties to the earliest cell.
pub fn hyperparameter_sweep<F>(
    template: &ExperimentConfig,
    grid: &BTreeMap<String, Vec<toml::Value>>,
    cap: Option<usize>,
    seed: u64,
    score: F,
) -> Result<SweepOutcome>
where
    F: Fn(&ExperimentConfig) -> Result<f64>,
{
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(invalid(
            "sweep grid needs at least one key with at least one value",
        ));
    }
    let total = grid
        .values()
        .try_fold(1usize, |acc, v| acc.checked_mul(v.len()))
        .ok_or_else(|| invalid("sweep grid is too large"))?;
    let mut indices: Vec<usize> = match cap {
        Some(c) if c < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, c).into_vec()
        }
        _ => (0..total).collect(),
    };
    indices.sort_unstable();

    let mut cells = Vec::with_capacity(indices.len());
    let mut configs = Vec::with_capacity(indices.len());
    for index in indices {
        let mut rem = index;
        let mut assignments = Vec::with_capacity(grid.len());
        for (key, values) in grid.iter().rev() {
            assignments.push((key.clone(), values[rem % values.len()].clone()));
            rem /= values.len();
        }
        assignments.reverse();
        let mut cfg = template.clone();
        for (k, v) in &assignments {
            cfg = cfg.with_override(k, v.clone())?;
        }
        let s = score(&cfg)?;
        log::info!("sweep cell {index}: {assignments:?} -> {s:.3}");
        cells.push(SweepCell {
            index,
            assignments,
            score: s,
        });
        configs.push(cfg);
    }
    let best = (0..cells.len())
        .reduce(|a, b| {
            if cells[b].score > cells[a].score {
                b
            } else {
                a
            }
        })
        .expect("non-empty sweep");
    Ok(SweepOutcome {
        best_config: configs.swap_remove(best),
        cells,
        best,
    })
}

/// Mean greedy reward over the seeds on the validation split.
pub fn validation_score(cfg: &ExperimentConfig) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.experiment.eval_segment = Segment::Validation;
    let work = Workload::prepare(&cfg)?;
    let seeds = execute(&cfg, &work)?;
    Ok(mean_std(&seeds.iter().map(|s| s.reward).collect::<Vec<_>>()).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, mean: f64, len: usize) -> SummaryRow {
        SummaryRow {
            name: name.into(),
            agent: "dqn".into(),
            mode: "none".into(),
            horizons: String::new(),
            seeds: 5,
            mean_reward: mean,
            std_reward: 0.0,
            mean_activity: 0.0,
            episode_len: len,
            padded: false,
        }
    }

    #[test]
    fn gain_of_large_runs() {
        let report = compare_summaries(
            &[
                (summary("basic", 341_000.0, 8760), None),
                (summary("predicted", 547_000.0, 8760), None),
            ],
            Some("basic"),
        )
        .unwrap();
        assert_eq!(report.rows[0].gain_pct, Some(0.0));
        assert_eq!(report.rows[1].gain_pct.unwrap().round(), 60.0);
        assert!(report.to_text().contains("+60.4"));
        assert_eq!(relative_gain(0.0, 5.0), None);
        assert!((relative_gain(-100.0, -50.0).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_still_compare() {
        let r = compare_summaries(
            &[
                (summary("a", 1.0, 10), None),
                (summary("b", 2.0, 20), Some(1.5)),
            ],
            None,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(compare_summaries(&[(summary("a", 1.0, 10), None)], Some("zzz")).is_err());
    }

    #[test]
    fn config_round_trips_and_hash_tracks_content() {
        let cfg = ExperimentConfig::from_toml_str(
            "[experiment]\nname = \"x\"\nseeds = [1, 2]\n[dqn]\ngamma = 0.9\n[wrapper]\nmode = \"perfect\"\nhorizons = [1, 2, 3]\n",
        )
        .unwrap();
        assert_eq!(cfg.dqn.gamma, 0.9);
        assert_eq!(cfg.wrapper.horizons.len(), 3);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.content_hash().unwrap(), cfg.content_hash().unwrap());
        let other = cfg.with_override("dqn.gamma", parse_value("0.99")).unwrap();
        assert_ne!(other.content_hash().unwrap(), cfg.content_hash().unwrap());
        assert!(ExperimentConfig::from_toml_str("[dqn]\ngama = 0.9\n").is_err());
        assert!(cfg.with_override("dqn.gama", parse_value("1")).is_err());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seeds.clear();
        assert!(cfg.validate().unwrap_err().is_validation());
        let mut cfg = ExperimentConfig::default();
        cfg.wrapper.mode = ForecastMode::Predicted;
        cfg.wrapper.horizons = vec![Horizon::new(1).unwrap()];
        cfg.wrapper
            .checkpoints
            .insert("1".into(), PathBuf::from("/nonexistent/forecaster.json"));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parse_value_types() {
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("adam"), toml::Value::String("adam".into()));
        assert_eq!(parse_value("[16, 16]").as_array().unwrap().len(), 2);
    }

    fn gamma_grid(values: &[f64]) -> BTreeMap<String, Vec<toml::Value>> {
        BTreeMap::from([(
            "dqn.gamma".to_string(),
            values.iter().map(|&v| toml::Value::Float(v)).collect(),
        )])
    }

    #[test]
    fn sweep_enumerates_and_picks_argmax() {
        let t = ExperimentConfig::default();
        let out = hyperparameter_sweep(&t, &gamma_grid(&[0.9, 0.99]), None, 0, |c| Ok(c.dqn.gamma))
            .unwrap();
        assert_eq!(out.cells.len(), 2);
        assert_eq!(out.best_config.dqn.gamma, 0.99);
        let tie =
            hyperparameter_sweep(&t, &gamma_grid(&[0.9, 0.99]), None, 0, |_| Ok(1.0)).unwrap();
        assert_eq!(tie.best, 0);
        assert_eq!(tie.best_config.dqn.gamma, 0.9);
    }

    #[test]
    fn capped_sweep_is_reproducible() {
        let t = ExperimentConfig::default();
        let mut grid = gamma_grid(&(0..10).map(|i| 0.9 + i as f64 * 0.01).collect::<Vec<_>>());
        grid.insert(
            "dqn.learning_rate".into(),
            (1..=10)
                .map(|i| toml::Value::Float(i as f64 * 1e-4))
                .collect(),
        );
        let run =
            || hyperparameter_sweep(&t, &grid, Some(10), 42, |c| Ok(c.dqn.learning_rate)).unwrap();
        let a = run();
        assert_eq!(a.cells.len(), 10);
        let idx: Vec<usize> = a.cells.iter().map(|c| c.index).collect();
        assert_eq!(idx, run().cells.iter().map(|c| c.index).collect::<Vec<_>>());
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn population_std_of_one_seed_is_zero() {
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.0f64.sqrt()).abs() < 1e-12);
    }
}
