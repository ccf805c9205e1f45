//! Forecast wrapper between the battery environment and the agent. It keeps
//! the rolling input history, queries frozen forecasters every step and
//! appends their predictions (or the true future prices) to the observation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::battery_env::{BatteryEnv, BatteryParams, EnvObservation, Environment, StepOutcome};
use crate::error::{invalid, Error, Result};
use crate::forecasting::{Forecaster, Horizon};
use crate::market_data::MarketRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Observation is `(soc, price)`.
    #[default]
    None,
    /// Appends forecaster outputs.
    Predicted,
    /// Appends the true future prices.
    Perfect,
}

impl fmt::Display for ForecastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecastMode::None => "none",
            ForecastMode::Predicted => "predicted",
            ForecastMode::Perfect => "perfect",
        })
    }
}

impl FromStr for ForecastMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "predicted" => Ok(Self::Predicted),
            "perfect" => Ok(Self::Perfect),
            other => Err(invalid(format!("unknown wrapper mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WrapperConfig {
    pub mode: ForecastMode,
    pub horizons: Vec<Horizon>,
    /// Required for every horizon when `mode` is `Predicted`.
    pub forecasters: BTreeMap<Horizon, Forecaster>,
}

impl WrapperConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn perfect(horizons: Vec<Horizon>) -> Self {
        Self {
            mode: ForecastMode::Perfect,
            horizons,
            forecasters: BTreeMap::new(),
        }
    }

    pub fn predicted(forecasters: BTreeMap<Horizon, Forecaster>) -> Self {
        Self {
            mode: ForecastMode::Predicted,
            horizons: forecasters.keys().copied().collect(),
            forecasters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ForecastMode::None => Ok(()),
            ForecastMode::Perfect | ForecastMode::Predicted => {
                if self.horizons.is_empty() {
                    return Err(Error::Config(format!(
                        "wrapper mode `{}` needs at least one horizon",
                        self.mode
                    )));
                }
                if self.mode == ForecastMode::Predicted {
                    for h in &self.horizons {
                        match self.forecasters.get(h) {
                            None => {
                                return Err(Error::Config(format!(
                                    "no forecaster for horizon {h}h"
                                )))
                            }
                            Some(f) if f.horizon != *h => {
                                return Err(Error::Config(format!(
                                    "forecaster registered for {h}h predicts {}h",
                                    f.horizon
                                )))
                            }
                            Some(_) => {}
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn forecast_count(&self) -> usize {
        match self.mode {
            ForecastMode::None => 0,
            _ => self.horizons.len(),
        }
    }

    /// History the forecasters need at each step, including the current record.
    pub fn window_size(&self) -> usize {
        self.forecasters
            .values()
            .map(Forecaster::required_history)
            .max()
            .unwrap_or(1)
    }
}

/// History available before the first episode step.
#[derive(Debug, Clone, PartialEq)]
pub struct Warmup {
    pub history: Vec<MarketRecord>,
    /// Set when the history had to be padded by repetition.
    pub padded: bool,
}

/// Prefills `window_size` records from the records preceding the episode,
/// or pads by repeating the earliest available record.
pub fn warmup_policy(
    pre_episode: &[MarketRecord],
    first_episode_record: &MarketRecord,
    window_size: usize,
) -> Warmup {
    if pre_episode.len() >= window_size {
        return Warmup {
            history: pre_episode[pre_episode.len() - window_size..].to_vec(),
            padded: false,
        };
    }
    let filler = pre_episode.first().unwrap_or(first_episode_record);
    let mut history = vec![*filler; window_size - pre_episode.len()];
    history.extend_from_slice(pre_episode);
    Warmup {
        history,
        padded: true,
    }
}

/// Battery environment whose observations carry forecasts.
#[derive(Debug, Clone)]
pub struct ForecastWrapper {
    env: BatteryEnv,
    config: WrapperConfig,
    /// Warmup history followed by the episode records.
    timeline: Vec<MarketRecord>,
    offset: usize,
    padded: bool,
}

impl ForecastWrapper {
    /// `pre_episode` are the records immediately before the episode.
    pub fn new(
        env: BatteryEnv,
        config: WrapperConfig,
        pre_episode: &[MarketRecord],
    ) -> Result<Self> {
        config.validate()?;
        let warmup = warmup_policy(pre_episode, &env.records()[0], config.window_size());
        let offset = warmup.history.len();
        let mut timeline = warmup.history;
        timeline.extend_from_slice(env.records());
        Ok(Self {
            env,
            config,
            timeline,
            offset,
            padded: warmup.padded,
        })
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn config(&self) -> &WrapperConfig {
        &self.config
    }

    pub fn inner(&self) -> &BatteryEnv {
        &self.env
    }

    /// Values appended at episode step `t`.
    pub fn forecasts_at(&self, t: usize) -> Result<Vec<f64>> {
        let episode = self.env.records();
        let t = t.min(episode.len() - 1);
        match self.config.mode {
            ForecastMode::None => Ok(Vec::new()),
            ForecastMode::Perfect => Ok(self
                .config
                .horizons
                .iter()
                .map(|h| {
                    episode
                        .get(t + h.hours())
                        .unwrap_or(&episode[episode.len() - 1])
                        .price
                })
                .collect()),
            ForecastMode::Predicted => {
                let end = self.offset + t;
                self.config
                    .horizons
                    .iter()
                    .map(|h| {
                        let f = &self.config.forecasters[h];
                        let need = f.required_history();
                        f.predict(&self.timeline[end + 1 - need..=end])
                    })
                    .collect()
            }
        }
    }

    /// Wraps a base observation produced at episode step `t`.
    pub fn wrap_observation(&self, base: EnvObservation, t: usize) -> Result<EnvObservation> {
        Ok(EnvObservation {
            forecasts: self.forecasts_at(t)?,
            ..base
        })
    }
}

impl Environment for ForecastWrapper {
    fn reset(&mut self) -> Result<EnvObservation> {
        let base = self.env.reset()?;
        self.wrap_observation(base, 0)
    }

    fn step(&mut self, action_mw: f64) -> Result<StepOutcome> {
        let mut outcome = self.env.step(action_mw)?;
        let t = self.env.state().step_index;
        outcome.observation = self.wrap_observation(outcome.observation, t)?;
        Ok(outcome)
    }

    fn params(&self) -> &BatteryParams {
        self.env.params()
    }

    fn episode_len(&self) -> usize {
        self.env.episode_len()
    }

    fn observation_width(&self) -> usize {
        2 + self.config.forecast_count()
    }

    fn current_record(&self) -> Option<&MarketRecord> {
        self.env.current_record()
    }
}
