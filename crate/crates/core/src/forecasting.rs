//! Per-horizon point forecasters for the electricity price: persistence,
//! least-squares autoregression and a feed-forward network, with error
//! metrics and per-horizon model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market_data::{
    build_windows, labelled_slice, window_features, Feature, MarketRecord, MarketSeries,
    MinMaxScaler, WindowSpec, WindowedDataset,
};
use crate::neural::{self, Activation, DenseNet, Samples, TrainConfig, TrainHistory};

pub const HORIZONS: [usize; 7] = [1, 2, 3, 6, 12, 18, 24];

/// Hours ahead, restricted to the supported set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(hours: usize) -> Result<Self> {
        if HORIZONS.contains(&hours) {
            Ok(Self(hours))
        } else {
            Err(invalid(format!(
                "horizon {hours}h is not one of {HORIZONS:?}"
            )))
        }
    }

    pub fn hours(self) -> usize {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Horizon> {
        HORIZONS.into_iter().map(Horizon)
    }
}

impl TryFrom<usize> for Horizon {
    type Error = Error;
    fn try_from(h: usize) -> Result<Self> {
        Horizon::new(h)
    }
}

impl From<Horizon> for usize {
    fn from(h: Horizon) -> usize {
        h.0
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Declaration order is the tie-break order used by [`select_best`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Persistence,
    Ar,
    Neural,
}

impl ForecasterKind {
    pub fn name(self) -> &'static str {
        match self {
            ForecasterKind::Persistence => "persistence",
            ForecasterKind::Ar => "ar",
            ForecasterKind::Neural => "neural",
        }
    }
}

impl fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForecasterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(Self::Persistence),
            "ar" => Ok(Self::Ar),
            "neural" => Ok(Self::Neural),
            other => Err(invalid(format!("unknown forecaster kind `{other}`"))),
        }
    }
}

/// Autoregression on the (optionally differenced) price:
/// `z_t = c + Σ_i φ_i z_{t-i}`. `coefficients = [c, φ_1, ..., φ_p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub order: usize,
    pub difference: usize,
    pub coefficients: Vec<f64>,
}

pub const AR_RIDGE: f64 = 1e-8;

pub fn fit_ar(prices: &[f64], order: usize, difference: usize) -> Result<ArModel> {
    if order == 0 {
        return Err(invalid("AR order must be at least 1"));
    }
    if difference > 1 {
        return Err(invalid("differencing order must be 0 or 1"));
    }
    if prices.len() <= order + difference + 1 {
        return Err(invalid(format!(
            "AR({order}) with d={difference} needs more than {} observations, got {}",
            order + difference + 1,
            prices.len()
        )));
    }
    let z = difference_series(prices, difference);
    let k = order + 1;
    let mut normal = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    let mut row = vec![0.0; k];
    for t in order..z.len() {
        row[0] = 1.0;
        for i in 1..=order {
            row[i] = z[t - i];
        }
        for a in 0..k {
            rhs[a] += row[a] * z[t];
            for b in 0..k {
                normal[a * k + b] += row[a] * row[b];
            }
        }
    }
    let coefficients = match solve_linear(&normal, &rhs, k) {
        Some(c) => c,
        None => {
            log::warn!("singular AR normal equations; solving with ridge {AR_RIDGE}");
            for i in 0..k {
                normal[i * k + i] += AR_RIDGE;
            }
            solve_linear(&normal, &rhs, k)
                .ok_or_else(|| Error::State("AR normal equations remain singular".into()))?
        }
    };
    Ok(ArModel {
        order,
        difference,
        coefficients,
    })
}

fn difference_series(prices: &[f64], difference: usize) -> Vec<f64> {
    if difference == 0 {
        prices.to_vec()
    } else {
        prices.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear(matrix: &[f64], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut a = matrix.to_vec();
    let mut b = rhs.to_vec();
    let scale = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

impl ArModel {
    /// Prices needed to produce a forecast.
    pub fn required_history(&self) -> usize {
        self.order + self.difference
    }

    /// Iterated rollout `horizon` steps past the end of `history`.
    pub fn predict(&self, history: &[f64], horizon: usize) -> Result<f64> {
        if history.len() < self.required_history() {
            return Err(invalid(format!(
                "AR model needs {} past prices, got {}",
                self.required_history(),
                history.len()
            )));
        }
        let tail = &history[history.len() - self.required_history()..];
        let mut z = difference_series(tail, self.difference);
        let mut level = *history.last().unwrap();
        for _ in 0..horizon {
            let n = z.len();
            let next = self.coefficients[0]
                + (1..=self.order)
                    .map(|i| self.coefficients[i] * z[n - i])
                    .sum::<f64>();
            z.push(next);
            if self.difference == 1 {
                level += next;
            } else {
                level = next;
            }
        }
        Ok(level)
    }
}

/// Neural forecaster output is de-standardized with the training label
/// statistics so predictions are in price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub net: DenseNet,
    pub label_mean: f64,
    pub label_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecastModel {
    Persistence,
    Ar(ArModel),
    Neural(NeuralModel),
}

/// A frozen point forecaster for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecaster {
    pub horizon: Horizon,
    pub window: WindowSpec,
    pub scaler: MinMaxScaler,
    pub model: ForecastModel,
}

pub fn predict_persistence(current_price: f64) -> f64 {
    current_price
}

impl Forecaster {
    pub fn persistence(horizon: Horizon) -> Self {
        Self {
            horizon,
            window: WindowSpec {
                features: vec![Feature::Price],
                window_size: 1,
                horizon: horizon.hours(),
                smoothing: None,
            },
            scaler: MinMaxScaler::new(),
            model: ForecastModel::Persistence,
        }
    }

    pub fn kind(&self) -> ForecasterKind {
        match self.model {
            ForecastModel::Persistence => ForecasterKind::Persistence,
            ForecastModel::Ar(_) => ForecasterKind::Ar,
            ForecastModel::Neural(_) => ForecasterKind::Neural,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.model {
            ForecastModel::Persistence => 0,
            ForecastModel::Ar(m) => m.coefficients.len(),
            ForecastModel::Neural(m) => m.net.param_count(),
        }
    }

    /// Records (ending at the forecast origin) the forecaster reads.
    pub fn required_history(&self) -> usize {
        match &self.model {
            ForecastModel::Persistence => 1,
            ForecastModel::Ar(m) => m.required_history().max(1),
            ForecastModel::Neural(_) => self.window.window_size,
        }
    }

    /// Forecast of the price `horizon` hours after the last record of
    /// `history`. Only the trailing `required_history()` records are read.
    pub fn predict(&self, history: &[MarketRecord]) -> Result<f64> {
        let need = self.required_history();
        if history.len() < need {
            return Err(invalid(format!(
                "forecaster needs {need} records of history, got {}",
                history.len()
            )));
        }
        let window = &history[history.len() - need..];
        match &self.model {
            ForecastModel::Persistence => Ok(predict_persistence(window[need - 1].price)),
            ForecastModel::Ar(m) => {
                let prices: Vec<f64> = window.iter().map(|r| r.price).collect();
                m.predict(&prices, self.horizon.hours())
            }
            ForecastModel::Neural(m) => {
                let x = window_features(window, &self.window, &self.scaler)?;
                let y = m.net.forward(&x)?;
                Ok(m.label_mean + m.label_std * y[0])
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ForecasterFile {
            format: FORECASTER_FORMAT.into(),
            version: FORECASTER_VERSION,
            forecaster: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ForecasterFile = serde_json::from_str(&text)?;
        if file.format != FORECASTER_FORMAT || file.version != FORECASTER_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported forecaster checkpoint {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file.forecaster)
    }
}

const FORECASTER_FORMAT: &str = "arblab.forecaster";
const FORECASTER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForecasterFile {
    format: String,
    version: u32,
    forecaster: Forecaster,
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Samples whose true price is at or below this magnitude are left out of MAPE.
pub const MAPE_DENOMINATOR_GUARD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every sample was excluded by the guard.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub samples: usize,
}

pub fn compute_metrics(truth: &[f64], predicted: &[f64]) -> Result<ForecastMetrics> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(invalid("metrics need a non-empty, aligned evaluation set"));
    }
    let n = truth.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    for (&t, &p) in truth.iter().zip(predicted) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
        if t.abs() > MAPE_DENOMINATOR_GUARD {
            pct += e.abs() / t.abs();
            pct_n += 1;
        }
    }
    Ok(ForecastMetrics {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        mape: (pct_n > 0).then(|| 100.0 * pct / pct_n as f64),
        mape_excluded: truth.len() - pct_n,
        samples: truth.len(),
    })
}

/// Scores `forecaster` on labels at indices `labels` of `records`, using
/// earlier records as input context.
pub fn evaluate(
    forecaster: &Forecaster,
    records: &[MarketRecord],
    labels: std::ops::Range<usize>,
) -> Result<ForecastMetrics> {
    let h = forecaster.horizon.hours();
    let need = forecaster.required_history();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for j in labels {
        if j >= records.len() || j < h + need - 1 {
            continue;
        }
        let origin = j - h;
        predicted.push(forecaster.predict(&records[origin + 1 - need..=origin])?);
        truth.push(records[j].price);
    }
    if truth.is_empty() {
        return Err(invalid("evaluation split yields no samples"));
    }
    compute_metrics(&truth, &predicted)
}

/// A trained forecaster with its validation score.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub forecaster: Forecaster,
    pub metrics: ForecastMetrics,
}

/// Lowest validation RMSE per horizon; ties go to fewer parameters, then to
/// the simpler kind.
pub fn select_best(candidates: Vec<Candidate>) -> Result<BTreeMap<Horizon, Forecaster>> {
    let mut best: BTreeMap<Horizon, Candidate> = BTreeMap::new();
    for c in candidates {
        let key = c.forecaster.horizon;
        let replace = match best.get(&key) {
            None => true,
            Some(cur) => {
                let a = (
                    c.metrics.rmse,
                    c.forecaster.param_count(),
                    c.forecaster.kind(),
                );
                let b = (
                    cur.metrics.rmse,
                    cur.forecaster.param_count(),
                    cur.forecaster.kind(),
                );
                a.0.total_cmp(&b.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .is_lt()
            }
        };
        if replace {
            best.insert(key, c);
        }
    }
    if best.is_empty() {
        return Err(invalid("no forecaster candidates supplied"));
    }
    Ok(best.into_iter().map(|(h, c)| (h, c.forecaster)).collect())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub window_size: usize,
    pub features: Vec<Feature>,
    pub smoothing: Option<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ar_order: usize,
    pub ar_difference: usize,
    pub train: TrainConfig,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            window_size: 24,
            features: Feature::ALL.to_vec(),
            smoothing: None,
            hidden: vec![64],
            activation: Activation::Relu,
            ar_order: 24,
            ar_difference: 0,
            train: TrainConfig::default(),
        }
    }
}

impl ForecasterConfig {
    pub fn window_spec(&self, horizon: Horizon) -> WindowSpec {
        WindowSpec {
            features: self.features.clone(),
            window_size: self.window_size,
            horizon: horizon.hours(),
            smoothing: self.smoothing,
        }
    }
}

/// Fits a network on `train_set`, early-stopping on `validation`.
#[allow(clippy::too_many_arguments)]
pub fn train_neural_forecaster(
    train_set: &WindowedDataset,
    validation: &WindowedDataset,
    config: &TrainConfig,
    hidden: &[usize],
    activation: Activation,
    horizon: Horizon,
    window: WindowSpec,
    scaler: MinMaxScaler,
) -> Result<(Forecaster, TrainHistory)> {
    for ds in [train_set, validation] {
        if ds.horizon != horizon.hours() {
            return Err(invalid(format!(
                "dataset horizon {}h does not match forecaster horizon {horizon}h",
                ds.horizon
            )));
        }
    }
    if window.horizon != horizon.hours() || train_set.window_size != window.window_size {
        return Err(invalid("window spec does not match the training dataset"));
    }
    if train_set.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    let n = train_set.labels.len() as f64;
    let label_mean = train_set.labels.iter().sum::<f64>() / n;
    let var = train_set
        .labels
        .iter()
        .map(|y| (y - label_mean).powi(2))
        .sum::<f64>()
        / n;
    let label_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let to_samples = |ds: &WindowedDataset| {
        Samples::new(
            ds.features.clone(),
            ds.labels
                .iter()
                .map(|y| vec![(y - label_mean) / label_std])
                .collect(),
        )
    };

    let mut widths = vec![window.input_width()];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut acts = vec![activation; hidden.len()];
    acts.push(Activation::Identity);
    let net = DenseNet::init(&widths, &acts, config.seed)?;
    let (net, history) = neural::train(
        net,
        &to_samples(train_set)?,
        &to_samples(validation)?,
        config,
    )?;
    Ok((
        Forecaster {
            horizon,
            window,
            scaler,
            model: ForecastModel::Neural(NeuralModel {
                net,
                label_mean,
                label_std,
            }),
        },
        history,
    ))
}

/// Trains one forecaster of `kind` on the training split and scores it on
/// the validation split (or the training split when validation is empty).
pub fn train_forecaster(
    series: &MarketSeries,
    kind: ForecasterKind,
    horizon: Horizon,
    config: &ForecasterConfig,
) -> Result<Candidate> {
    let split = series.split().clone();
    let records = series.records();
    let forecaster = match kind {
        ForecasterKind::Persistence => Forecaster::persistence(horizon),
        ForecasterKind::Ar => {
            let prices: Vec<f64> = series.train().iter().map(|r| r.price).collect();
            let model = fit_ar(&prices, config.ar_order, config.ar_difference)?;
            let mut window = config.window_spec(horizon);
            window.features = vec![Feature::Price];
            window.window_size = model.required_history().max(1);
            window.smoothing = None;
            Forecaster {
                horizon,
                window,
                scaler: MinMaxScaler::new(),
                model: ForecastModel::Ar(model),
            }
        }
        ForecasterKind::Neural => {
            let spec = config.window_spec(horizon);
            let mut scaler = MinMaxScaler::new();
            scaler.fit(series, &spec.features)?;
            let train_ds = build_windows(series.train(), &spec, &scaler)?;
            let val_ds = if split.validation.is_empty() {
                empty_dataset(&spec)
            } else {
                let slice = labelled_slice(
                    records,
                    split.validation.clone(),
                    spec.window_size,
                    spec.horizon,
                );
                if slice.len() < spec.window_size + spec.horizon {
                    empty_dataset(&spec)
                } else {
                    build_windows(slice, &spec, &scaler)?
                }
            };
            train_neural_forecaster(
                &train_ds,
                &val_ds,
                &config.train,
                &config.hidden,
                config.activation,
                horizon,
                spec,
                scaler,
            )?
            .0
        }
    };
    let eval_range = if split.validation.is_empty() {
        split.train.clone()
    } else {
        split.validation.clone()
    };
    let metrics = evaluate(&forecaster, records, eval_range)?;
    Ok(Candidate {
        forecaster,
        metrics,
    })
}

fn empty_dataset(spec: &WindowSpec) -> WindowedDataset {
    WindowedDataset {
        features: Vec::new(),
        labels: Vec::new(),
        window_size: spec.window_size,
        horizon: spec.horizon,
        feature_list: spec.features.clone(),
        labels_scaled: false,
        last_input_timestamps: Vec::new(),
        label_timestamps: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Metrics table
// ---------------------------------------------------------------------------

/// Row of `forecasters/metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub horizon: usize,
    pub kind: String,
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub params: usize,
}

impl MetricsRow {
    pub fn new(forecaster: &Forecaster, metrics: &ForecastMetrics) -> Self {
        Self {
            horizon: forecaster.horizon.hours(),
            kind: forecaster.kind().to_string(),
            rmse: metrics.rmse,
            mae: metrics.mae,
            mape: metrics.mape,
            params: forecaster.param_count(),
        }
    }
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Inserts or replaces rows keyed by `(horizon, kind)` and rewrites the
/// file sorted by that key, so reruns leave identical bytes.
pub fn upsert_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut table: BTreeMap<(usize, String), MetricsRow> = BTreeMap::new();
    if path.exists() {
        for r in read_metrics_csv(path)? {
            table.insert((r.horizon, r.kind.clone()), r);
        }
    }
    for r in rows {
        table.insert((r.horizon, r.kind.clone()), r.clone());
    }
    let mut wtr = csv::Writer::from_path(path)?;
    for r in table.values() {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate_synthetic, SyntheticConfig};
    use chrono::{Duration, TimeZone, Utc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(prices: &[f64]) -> Vec<MarketRecord> {
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        prices
            .iter()
            .enumerate()
            .map(|(i, &price)| MarketRecord {
                timestamp: t0 + Duration::hours(i as i64),
                price,
                demand: 100.0,
            })
            .collect()
    }

    #[test]
    fn horizons_are_restricted() {
        assert!(Horizon::new(6).is_ok());
        assert!(Horizon::new(5).is_err());
        assert_eq!(Horizon::all().count(), 7);
    }

    #[test]
    fn persistence_returns_current_price() {
        assert_eq!(predict_persistence(75.3), 75.3);
        let f = Forecaster::persistence(Horizon::new(3).unwrap());
        assert_eq!(f.predict(&records(&[1.0, 75.3])).unwrap(), 75.3);
    }

    #[test]
    fn persistence_on_constant_series_is_exact() {
        let recs = records(&[42.0; 100]);
        for h in Horizon::all() {
            let m = evaluate(&Forecaster::persistence(h), &recs, 0..100).unwrap();
            assert_eq!(m.rmse, 0.0);
        }
    }

    #[test]
    fn persistence_error_tracks_spike_decay() {
        // single spike at t=10: the forecast issued at the spike is off by
        // (spike - base) h hours later, every other origin is exact.
        let mut prices = vec![50.0; 40];
        prices[10] = 500.0;
        let recs = records(&prices);
        let f = Forecaster::persistence(Horizon::new(2).unwrap());
        assert_eq!(f.predict(&recs[..=10]).unwrap() - prices[12], 450.0);
        let m = evaluate(&f, &recs, 2..40).unwrap();
        // two non-zero errors of 450 among 38 samples
        assert!((m.mae - 900.0 / 38.0).abs() < 1e-12);
    }

    #[test]
    fn ar1_coefficient_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = vec![0.0];
        for _ in 0..5000 {
            let prev = *x.last().unwrap();
            x.push(0.8 * prev + rng.random_range(-1.0..1.0));
        }
        let m = fit_ar(&x, 1, 0).unwrap();
        assert!(
            (m.coefficients[1] - 0.8).abs() < 0.05,
            "{:?}",
            m.coefficients
        );
    }

    #[test]
    fn ar_on_white_noise_has_no_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = fit_ar(&x, 1, 0).unwrap();
        assert!(m.coefficients[1].abs() < 0.05);
    }

    #[test]
    fn differenced_constant_series_forecasts_constant() {
        let m = fit_ar(&[30.0; 50], 2, 1).unwrap();
        for h in [1, 6, 24] {
            assert!((m.predict(&[30.0; 5], h).unwrap() - 30.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ar_rejects_short_series() {
        assert!(fit_ar(&[1.0, 2.0, 3.0], 2, 0).is_err());
    }

    #[test]
    fn metric_hand_case() {
        let m = compute_metrics(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert!((m.mae - 15.0).abs() < 1e-9);
        assert!((m.mape.unwrap() - 10.0).abs() < 1e-9);
        assert!((m.rmse - 250f64.sqrt()).abs() < 1e-9);
        let perfect = compute_metrics(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!(
            (perfect.rmse, perfect.mae, perfect.mape),
            (0.0, 0.0, Some(0.0))
        );
    }

    #[test]
    fn mape_guard_excludes_zero_truth() {
        let m = compute_metrics(&[0.0], &[5.0]).unwrap();
        assert_eq!(m.mape, None);
        assert_eq!(m.mape_excluded, 1);
        assert_eq!((m.mae, m.rmse), (5.0, 5.0));
        assert!(compute_metrics(&[], &[]).is_err());
    }

    fn candidate(h: usize, kind: ForecasterKind, rmse: f64, params: usize) -> Candidate {
        let horizon = Horizon::new(h).unwrap();
        let forecaster = match kind {
            ForecasterKind::Persistence => Forecaster::persistence(horizon),
            _ => Forecaster {
                model: ForecastModel::Ar(ArModel {
                    order: params - 1,
                    difference: 0,
                    coefficients: vec![0.0; params],
                }),
                ..Forecaster::persistence(horizon)
            },
        };
        Candidate {
            forecaster,
            metrics: ForecastMetrics {
                rmse,
                mae: 0.0,
                mape: None,
                mape_excluded: 0,
                samples: 1,
            },
        }
    }

    #[test]
    fn selection_rules() {
        let sel = select_best(vec![candidate(1, ForecasterKind::Ar, 120.0, 3)]).unwrap();
        assert_eq!(sel.len(), 1);

        let sel = select_best(vec![
            candidate(2, ForecasterKind::Ar, 120.0, 3),
            candidate(2, ForecasterKind::Ar, 110.0, 5),
        ])
        .unwrap();
        assert_eq!(sel[&Horizon::new(2).unwrap()].param_count(), 5);

        // duplicated model with a larger parameter count loses the tie
        let sel = select_best(vec![
            candidate(3, ForecasterKind::Ar, 100.0, 9),
            candidate(3, ForecasterKind::Ar, 100.0, 2),
            candidate(3, ForecasterKind::Persistence, 100.0, 0),
        ])
        .unwrap();
        assert_eq!(
            sel[&Horizon::new(3).unwrap()].kind(),
            ForecasterKind::Persistence
        );
        let sel = select_best(vec![
            candidate(3, ForecasterKind::Ar, 100.0, 9),
            candidate(3, ForecasterKind::Ar, 100.0, 2),
        ])
        .unwrap();
        assert_eq!(sel[&Horizon::new(3).unwrap()].param_count(), 2);
    }

    #[test]
    fn neural_forecaster_learns_linear_rule() {
        // price_{t+1} = 0.5 price_t + 10 from an arbitrary start
        let mut prices = vec![0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 1..600 {
            let next = if i % 10 == 0 {
                rng.random_range(0.0..100.0)
            } else {
                0.5 * prices[i - 1] + 10.0
            };
            prices.push(next);
        }
        // restart points break the rule; only train/evaluate on clean pairs
        let recs = records(&prices);
        let horizon = Horizon::new(1).unwrap();
        let spec = WindowSpec {
            features: vec![Feature::Price],
            window_size: 1,
            horizon: 1,
            smoothing: None,
        };
        let mut scaler = MinMaxScaler::new();
        scaler.fit_records(&recs[..400], &spec.features).unwrap();
        let clean = |range: std::ops::Range<usize>| {
            let mut ds = build_windows(&recs[range.clone()], &spec, &scaler).unwrap();
            let keep: Vec<bool> = (0..ds.len())
                .map(|i| !(range.start + i + 1).is_multiple_of(10))
                .collect();
            let mut k = keep.iter();
            ds.features.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            ds.labels.retain(|_| *k.next().unwrap());
            ds
        };
        let train_ds = clean(0..400);
        let val_ds = clean(400..600);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 300,
            patience: 30,
            seed: 1,
            ..Default::default()
        };
        let run = || {
            train_neural_forecaster(
                &train_ds,
                &val_ds,
                &cfg,
                &[8],
                Activation::Tanh,
                horizon,
                spec.clone(),
                scaler.clone(),
            )
            .unwrap()
        };
        let (f, hist) = run();
        let ForecastModel::Neural(m) = &f.model else {
            unreachable!()
        };
        let rmse = hist.best_validation_loss() * m.label_std;
        assert!(rmse < 1.0, "validation RMSE {rmse}");
        let (_, hist2) = run();
        assert_eq!(hist, hist2);

        let wrong = Horizon::new(2).unwrap();
        assert!(train_neural_forecaster(
            &train_ds,
            &val_ds,
            &cfg,
            &[8],
            Activation::Tanh,
            wrong,
            spec.clone(),
            scaler.clone()
        )
        .is_err());
    }

    #[test]
    fn training_ignores_test_split() {
        let synth = generate_synthetic(&SyntheticConfig {
            length_hours: 600,
            ..Default::default()
        })
        .unwrap();
        let full = synth.series.clone().with_split(400, 500).unwrap();
        let truncated = MarketSeries::new(synth.series.records()[..500].to_vec())
            .unwrap()
            .with_split(400, 500)
            .unwrap();
        let cfg = ForecasterConfig {
            hidden: vec![4],
            window_size: 6,
            ar_order: 3,
            train: TrainConfig {
                max_epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let h = Horizon::new(3).unwrap();
        for kind in [ForecasterKind::Ar, ForecasterKind::Neural] {
            let a = train_forecaster(&full, kind, h, &cfg).unwrap();
            let b = train_forecaster(&truncated, kind, h, &cfg).unwrap();
            assert_eq!(a.forecaster, b.forecaster);
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let f = Forecaster {
            model: ForecastModel::Ar(ArModel {
                order: 1,
                difference: 1,
                coefficients: vec![0.1, 0.2],
            }),
            ..Forecaster::persistence(Horizon::new(6).unwrap())
        };
        f.save(&path).unwrap();
        assert_eq!(Forecaster::load(&path).unwrap(), f);
    }

    #[test]
    fn metrics_csv_upsert_is_keyed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = |h, kind: &str, rmse| MetricsRow {
            horizon: h,
            kind: kind.into(),
            rmse,
            mae: 1.0,
            mape: None,
            params: 0,
        };
        upsert_metrics_csv(&path, &[row(6, "ar", 2.0), row(1, "persistence", 3.0)]).unwrap();
        upsert_metrics_csv(&path, &[row(6, "ar", 1.5)]).unwrap();
        let rows = read_metrics_csv(&path).unwrap();
        assert_eq!(rows, vec![row(1, "persistence", 3.0), row(6, "ar", 1.5)]);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("horizon,kind,rmse,mae,mape,params"));
    }
}
