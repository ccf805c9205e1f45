//! Hourly market data: ingestion, synthetic generation, chronological splits,
//! min-max scaling, smoothing, time encoding and sliding-window datasets.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One hourly observation. Prices are currency per MWh and may be negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketRecord {
    pub timestamp: DateTime<Utc>,
    pub price: f64,
    pub demand: f64,
}

/// Index ranges of the chronological train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn new(len: usize, train_end: usize, val_end: usize) -> Result<Self> {
        if train_end > val_end || val_end > len {
            return Err(invalid(format!(
                "split boundaries must satisfy train_end <= val_end <= len, got {train_end}, {val_end}, {len}"
            )));
        }
        Ok(Self {
            train: 0..train_end,
            validation: train_end..val_end,
            test: val_end..len,
        })
    }

    pub fn from_fractions(len: usize, train: f64, validation: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train)
            || !(0.0..=1.0).contains(&validation)
            || train + validation > 1.0
        {
            return Err(invalid(
                "split fractions must lie in [0, 1] and sum to at most 1",
            ));
        }
        let train_end = (len as f64 * train).round() as usize;
        let val_end = ((len as f64 * (train + validation)).round() as usize).clamp(train_end, len);
        Self::new(len, train_end, val_end)
    }
}

/// Validated hourly series plus its chronological split.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    records: Vec<MarketRecord>,
    split: SplitRanges,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.15;

impl MarketSeries {
    /// Validates the hourly grid and finiteness. The split defaults to
    /// 70% / 15% / 15%.
    pub fn new(records: Vec<MarketRecord>) -> Result<Self> {
        validate_records(&records)?;
        let split = SplitRanges::from_fractions(
            records.len(),
            DEFAULT_TRAIN_FRACTION,
            DEFAULT_VALIDATION_FRACTION,
        )?;
        Ok(Self { records, split })
    }

    pub fn with_split(mut self, train_end: usize, val_end: usize) -> Result<Self> {
        self.split = SplitRanges::new(self.records.len(), train_end, val_end)?;
        Ok(self)
    }

    pub fn with_split_fractions(mut self, train: f64, validation: f64) -> Result<Self> {
        self.split = SplitRanges::from_fractions(self.records.len(), train, validation)?;
        Ok(self)
    }

    pub fn records(&self) -> &[MarketRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self) -> &SplitRanges {
        &self.split
    }

    pub fn train(&self) -> &[MarketRecord] {
        &self.records[self.split.train.clone()]
    }

    pub fn validation(&self) -> &[MarketRecord] {
        &self.records[self.split.validation.clone()]
    }

    pub fn test(&self) -> &[MarketRecord] {
        &self.records[self.split.test.clone()]
    }

    pub fn prices(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.price).collect()
    }
}

fn validate_records(records: &[MarketRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if !r.price.is_finite() || !r.demand.is_finite() {
            return Err(Error::Validation(format!(
                "non-finite value at {}",
                r.timestamp.to_rfc3339()
            )));
        }
        if i > 0 {
            let step = r.timestamp - records[i - 1].timestamp;
            if step != Duration::hours(1) {
                return Err(Error::Validation(format!(
                    "timestamps must advance by exactly one hour: {} -> {}",
                    records[i - 1].timestamp.to_rfc3339(),
                    r.timestamp.to_rfc3339()
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column names for the three fields we read. Any other column is ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub price: String,
    pub demand: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            price: "price".into(),
            demand: "demand".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub schema: CsvSchema,
    /// Forward-fill missing hours instead of rejecting the file.
    pub fill_gaps: bool,
}

pub fn ingest_csv(path: impl AsRef<Path>, options: &IngestOptions) -> Result<MarketSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, options)
}

pub fn read_csv<R: Read>(reader: R, options: &IngestOptions) -> Result<MarketSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let ts_col = column(&options.schema.timestamp)?;
    let price_col = column(&options.schema.price)?;
    let demand_col = column(&options.schema.demand)?;

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, name: &str| {
            row.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{name}`"),
            })
        };
        let timestamp = parse_timestamp(field(ts_col, "timestamp")?)
            .map_err(|message| Error::Parse { line, message })?;
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            let value = raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("`{name}` is not a number: {raw:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("`{name}` is not finite: {raw:?}"),
                });
            }
            Ok(value)
        };
        records.push(MarketRecord {
            timestamp,
            price: number(price_col, "price")?,
            demand: number(demand_col, "demand")?,
        });
    }

    records.sort_by_key(|r| r.timestamp);
    let records = regularize(records, options.fill_gaps)?;
    MarketSeries::new(records)
}

/// Rejects duplicates and off-grid steps; fills or rejects missing hours.
fn regularize(sorted: Vec<MarketRecord>, fill_gaps: bool) -> Result<Vec<MarketRecord>> {
    let mut out: Vec<MarketRecord> = Vec::with_capacity(sorted.len());
    for rec in sorted {
        if let Some(prev) = out.last().copied() {
            let step = rec.timestamp - prev.timestamp;
            if step.is_zero() {
                return Err(Error::Validation(format!(
                    "duplicate timestamp {}",
                    rec.timestamp.to_rfc3339()
                )));
            }
            if step.num_seconds() % 3600 != 0 {
                return Err(Error::Validation(format!(
                    "timestamp {} is not on the hourly grid",
                    rec.timestamp.to_rfc3339()
                )));
            }
            let missing = step.num_hours() - 1;
            if missing > 0 {
                if !fill_gaps {
                    return Err(Error::Validation(format!(
                        "{missing} missing hour(s) after {}",
                        prev.timestamp.to_rfc3339()
                    )));
                }
                for k in 1..=missing {
                    out.push(MarketRecord {
                        timestamp: prev.timestamp + Duration::hours(k),
                        ..prev
                    });
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_timestamp(raw: &str) -> std::result::Result<DateTime<Utc>, String> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Ok(ts.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(Utc.from_utc_datetime(&naive));
        }
    }
    Err(format!("unparseable timestamp {raw:?}"))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn write_csv<W: Write>(records: &[MarketRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "price", "demand"])?;
    for r in records {
        wtr.write_record([
            format_timestamp(&r.timestamp),
            r.price.to_string(),
            r.demand.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Parameters of the synthetic price generator.
///
/// Price at hour `t` is `base_price + amplitude * sin(2π(h - 12)/24) + e_t`
/// where `h` is the hour of day and `e_t = noise_persistence * e_{t-1} + u_t`
/// with `u_t ~ U(-noise_scale, noise_scale)`. The deviation is therefore
/// bounded by `noise_scale / (1 - noise_persistence)`. With probability
/// `spike_rate` an hour's price is multiplied by a factor drawn from
/// `U(spike_min, spike_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub length_hours: usize,
    pub seed: u64,
    pub spike_rate: f64,
    pub base_price: f64,
    pub amplitude: f64,
    pub noise_scale: f64,
    pub noise_persistence: f64,
    pub spike_min: f64,
    pub spike_max: f64,
    pub demand_base: f64,
    pub demand_amplitude: f64,
    pub start: DateTime<Utc>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            length_hours: 8760,
            seed: 1,
            spike_rate: 0.01,
            base_price: 60.0,
            amplitude: 25.0,
            noise_scale: 5.0,
            noise_persistence: 0.5,
            spike_min: 5.0,
            spike_max: 20.0,
            demand_base: 10_000.0,
            demand_amplitude: 1_500.0,
            start: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl SyntheticConfig {
    /// Upper bound on `|price - base_price - sinusoid|` for spike-free hours.
    pub fn noise_bound(&self) -> f64 {
        self.noise_scale / (1.0 - self.noise_persistence)
    }

    pub fn sinusoid(&self, hour_of_day: u32) -> f64 {
        self.amplitude * (2.0 * PI * (hour_of_day as f64 - 12.0) / 24.0).sin()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSeries {
    pub series: MarketSeries,
    /// Whether a spike was injected at each hour.
    pub spikes: Vec<bool>,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticSeries> {
    if config.length_hours == 0 {
        return Err(invalid("length_hours must be at least 1"));
    }
    if !(0.0..=1.0).contains(&config.spike_rate) {
        return Err(invalid("spike_rate must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&config.noise_persistence) {
        return Err(invalid("noise_persistence must lie in [0, 1)"));
    }
    if !(config.spike_min > 0.0 && config.spike_min <= config.spike_max) {
        return Err(invalid(
            "spike magnitudes must satisfy 0 < spike_min <= spike_max",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut deviation = 0.0;
    let mut records = Vec::with_capacity(config.length_hours);
    let mut spikes = Vec::with_capacity(config.length_hours);
    for t in 0..config.length_hours {
        let timestamp = config.start + Duration::hours(t as i64);
        let hour = timestamp.hour();
        // Every draw happens every hour so the noise path is independent of
        // the spike rate.
        let innovation = rng.random_range(-1.0..=1.0) * config.noise_scale;
        let coin: f64 = rng.random();
        let factor = config.spike_min + rng.random::<f64>() * (config.spike_max - config.spike_min);
        let demand_noise = rng.random_range(-1.0..=1.0);

        deviation = config.noise_persistence * deviation + innovation;
        let base = config.base_price + config.sinusoid(hour) + deviation;
        let spike = coin < config.spike_rate;
        let price = if spike { base * factor } else { base };
        let phase = 2.0 * PI * (hour as f64 - 12.0) / 24.0;
        let demand = config.demand_base
            + config.demand_amplitude * phase.sin()
            + 0.05 * config.demand_amplitude * demand_noise;
        records.push(MarketRecord {
            timestamp,
            price,
            demand,
        });
        spikes.push(spike);
    }
    Ok(SyntheticSeries {
        series: MarketSeries::new(records)?,
        spikes,
    })
}

// ---------------------------------------------------------------------------
// Features and scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Price,
    Demand,
    HourSin,
    HourCos,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::Price,
        Feature::Demand,
        Feature::HourSin,
        Feature::HourCos,
    ];

    pub fn value(self, record: &MarketRecord) -> f64 {
        match self {
            Feature::Price => record.price,
            Feature::Demand => record.demand,
            Feature::HourSin => encode_hour(&record.timestamp).0,
            Feature::HourCos => encode_hour(&record.timestamp).1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Price => "price",
            Feature::Demand => "demand",
            Feature::HourSin => "hour_sin",
            Feature::HourCos => "hour_cos",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid(format!("unknown feature `{s}`")))
    }
}

/// Cyclic encoding of the hour of day.
pub fn encode_hour(timestamp: &DateTime<Utc>) -> (f64, f64) {
    let angle = 2.0 * PI * timestamp.hour() as f64 / 24.0;
    (angle.sin(), angle.cos())
}

/// Per-feature minimum and maximum observed on the fitting data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub features: Vec<Feature>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Min-max scaler onto `[-1, 1]`. A feature with `max == min` maps to 0.
/// Values outside the fitted range are not clipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    params: Option<ScalerParams>,
}

impl MinMaxScaler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(params: ScalerParams) -> Self {
        Self {
            params: Some(params),
        }
    }

    /// Fits on the training split of `series` only.
    pub fn fit(&mut self, series: &MarketSeries, features: &[Feature]) -> Result<&ScalerParams> {
        self.fit_records(series.train(), features)
    }

    pub fn fit_records(
        &mut self,
        records: &[MarketRecord],
        features: &[Feature],
    ) -> Result<&ScalerParams> {
        if records.is_empty() {
            return Err(invalid("cannot fit a scaler on an empty training split"));
        }
        if features.is_empty() {
            return Err(invalid("scaler needs at least one feature"));
        }
        let mut min = vec![f64::INFINITY; features.len()];
        let mut max = vec![f64::NEG_INFINITY; features.len()];
        for r in records {
            for (j, f) in features.iter().enumerate() {
                let v = f.value(r);
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(self.params.insert(ScalerParams {
            features: features.to_vec(),
            min,
            max,
        }))
    }

    pub fn params(&self) -> Result<&ScalerParams> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::State("scaler has not been fitted".into()))
    }

    pub fn is_fitted(&self) -> bool {
        self.params.is_some()
    }

    fn position(&self, feature: Feature) -> Result<(f64, f64)> {
        let p = self.params()?;
        let j = p
            .features
            .iter()
            .position(|f| *f == feature)
            .ok_or_else(|| invalid(format!("feature `{feature}` was not fitted")))?;
        Ok((p.min[j], p.max[j]))
    }

    pub fn apply(&self, feature: Feature, value: f64) -> Result<f64> {
        let (lo, hi) = self.position(feature)?;
        Ok(scale(value, lo, hi))
    }

    pub fn invert(&self, feature: Feature, scaled: f64) -> Result<f64> {
        let (lo, hi) = self.position(feature)?;
        Ok(unscale(scaled, lo, hi))
    }

    pub fn apply_all(&self, feature: Feature, values: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = self.position(feature)?;
        Ok(values.iter().map(|&v| scale(v, lo, hi)).collect())
    }

    pub fn invert_all(&self, feature: Feature, scaled: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = self.position(feature)?;
        Ok(scaled.iter().map(|&v| unscale(v, lo, hi)).collect())
    }
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

fn unscale(s: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (s + 1.0) * (hi - lo) / 2.0
    } else {
        lo
    }
}

/// Exponentially weighted moving average: `s_0 = x_0`,
/// `s_t = alpha * x_t + (1 - alpha) * s_{t-1}`.
pub fn ewma_smooth(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!(
            "smoothing alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut prev = None;
    for &x in values {
        let s = match prev {
            None => x,
            Some(p) => alpha * x + (1.0 - alpha) * p,
        };
        out.push(s);
        prev = Some(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

/// How raw records become forecaster inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub features: Vec<Feature>,
    pub window_size: usize,
    pub horizon: usize,
    /// EWMA factor applied to the price feature inside each window.
    pub smoothing: Option<f64>,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.horizon == 0 {
            return Err(invalid("window_size and horizon must be at least 1"));
        }
        if self.features.is_empty() {
            return Err(invalid("at least one input feature is required"));
        }
        if let Some(alpha) = self.smoothing {
            ewma_smooth(&[], alpha)?;
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.window_size * self.features.len()
    }
}

/// Flattens one window (oldest record first, features innermost) into
/// scaled model inputs. Smoothing only sees the window itself, so inputs
/// never depend on records after the window's last timestamp.
pub fn window_features(
    window: &[MarketRecord],
    spec: &WindowSpec,
    scaler: &MinMaxScaler,
) -> Result<Vec<f64>> {
    if window.len() != spec.window_size {
        return Err(invalid(format!(
            "window holds {} records, expected {}",
            window.len(),
            spec.window_size
        )));
    }
    let smoothed = match spec.smoothing {
        Some(alpha) if spec.features.contains(&Feature::Price) => {
            let prices: Vec<f64> = window.iter().map(|r| r.price).collect();
            Some(ewma_smooth(&prices, alpha)?)
        }
        _ => None,
    };
    let mut out = Vec::with_capacity(spec.input_width());
    for (i, r) in window.iter().enumerate() {
        for &f in &spec.features {
            let raw = match (f, &smoothed) {
                (Feature::Price, Some(s)) => s[i],
                _ => f.value(r),
            };
            out.push(scaler.apply(f, raw)?);
        }
    }
    Ok(out)
}

/// Supervised samples built from a contiguous run of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub window_size: usize,
    pub horizon: usize,
    pub feature_list: Vec<Feature>,
    /// Labels are kept in price units unless this is set.
    pub labels_scaled: bool,
    pub last_input_timestamps: Vec<DateTime<Utc>>,
    pub label_timestamps: Vec<DateTime<Utc>>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Number of samples a series of length `n` yields.
pub fn window_count(n: usize, window_size: usize, horizon: usize) -> usize {
    (n + 1).saturating_sub(window_size + horizon)
}

pub fn build_windows(
    records: &[MarketRecord],
    spec: &WindowSpec,
    scaler: &MinMaxScaler,
) -> Result<WindowedDataset> {
    spec.validate()?;
    let n = records.len();
    if n < spec.window_size + spec.horizon {
        return Err(invalid(format!(
            "series of length {n} is too short for window {} and horizon {}",
            spec.window_size, spec.horizon
        )));
    }
    let count = window_count(n, spec.window_size, spec.horizon);
    let mut ds = WindowedDataset {
        features: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        window_size: spec.window_size,
        horizon: spec.horizon,
        feature_list: spec.features.clone(),
        labels_scaled: false,
        last_input_timestamps: Vec::with_capacity(count),
        label_timestamps: Vec::with_capacity(count),
    };
    for start in 0..count {
        let last = start + spec.window_size - 1;
        let target = &records[last + spec.horizon];
        ds.features
            .push(window_features(&records[start..=last], spec, scaler)?);
        ds.labels.push(target.price);
        ds.last_input_timestamps.push(records[last].timestamp);
        ds.label_timestamps.push(target.timestamp);
    }
    Ok(ds)
}

/// Slice of `records` whose windows produce labels exactly at the indices of
/// `labels`, borrowing earlier records as input context where available.
pub fn labelled_slice(
    records: &[MarketRecord],
    labels: Range<usize>,
    window_size: usize,
    horizon: usize,
) -> &[MarketRecord] {
    let start = labels.start.saturating_sub(window_size + horizon - 1);
    &records[start..labels.end.min(records.len())]
}
