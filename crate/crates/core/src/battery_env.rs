//! Grid-connected battery performing price arbitrage as a Markov decision
//! process: SOC dynamics, depth-of-discharge degradation, safety layer and
//! episodic stepping over an hourly price series.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::market_data::{format_timestamp, MarketRecord};

/// Physical and economic constants of the battery.
///
/// Power is positive when discharging (selling) and negative when charging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity_mwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// Charge limit in MW (negative).
    pub p_min_mw: f64,
    /// Discharge limit in MW (positive).
    pub p_max_mw: f64,
    /// SOC gained per unit of energy drawn while charging (< 1).
    pub eta_charge: f64,
    /// SOC lost per unit of energy delivered while discharging (> 1).
    pub eta_discharge: f64,
    /// Fraction of SOC lost per step.
    pub self_discharge: f64,
    pub peukert: f64,
    pub cycles_to_failure: f64,
    /// Investment cost per MWh of capacity.
    pub invest_cost_per_mwh: f64,
    pub dt_hours: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity_mwh: 10.0,
            soc_min: 0.2,
            soc_max: 0.8,
            p_min_mw: -2.5,
            p_max_mw: 2.5,
            eta_charge: 0.92,
            eta_discharge: 1.0 / 0.92,
            self_discharge: 0.0,
            peukert: 1.14,
            cycles_to_failure: 6000.0,
            invest_cost_per_mwh: 300_000.0,
            dt_hours: 1.0,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let ok = 0.0 <= p.soc_min
            && p.soc_min < p.soc_max
            && p.soc_max <= 1.0
            && p.eta_charge > 0.0
            && p.eta_charge <= 1.0
            && p.eta_discharge >= 1.0
            && p.capacity_mwh > 0.0
            && p.dt_hours > 0.0
            && p.p_min_mw < 0.0
            && p.p_max_mw > 0.0
            && (0.0..1.0).contains(&p.self_discharge)
            && p.peukert > 0.0
            && p.cycles_to_failure > 0.0
            && p.invest_cost_per_mwh >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "inconsistent battery parameters: {p:?}"
            )))
        }
    }

    /// Total pack investment, the cost basis of degradation.
    pub fn total_investment(&self) -> f64 {
        self.invest_cost_per_mwh * self.capacity_mwh
    }

    fn efficiency(&self, power: f64) -> f64 {
        if power > 0.0 {
            self.eta_discharge
        } else if power < 0.0 {
            self.eta_charge
        } else {
            1.0
        }
    }

    /// SOC after self-discharge, never pushed below `soc_min` by the leak alone.
    fn decayed(&self, soc: f64) -> f64 {
        let leaked = soc * (1.0 - self.self_discharge);
        if leaked < self.soc_min && soc >= self.soc_min {
            self.soc_min
        } else {
            leaked
        }
    }

    /// SOC transition for an already-corrected power.
    pub fn next_soc(&self, soc: f64, power: f64) -> f64 {
        let next =
            self.decayed(soc) - self.efficiency(power) * power * self.dt_hours / self.capacity_mwh;
        // Absorb floating-point overshoot at the bounds.
        next.clamp(self.soc_min, self.soc_max)
    }

    /// Cycle-ageing cost of moving from `soc_before` to `soc_after`.
    pub fn degradation_cost(&self, soc_before: f64, soc_after: f64) -> f64 {
        if soc_before == soc_after {
            return 0.0;
        }
        let dod =
            ((1.0 - soc_after).powf(self.peukert) - (1.0 - soc_before).powf(self.peukert)).abs();
        dod / (2.0 * self.cycles_to_failure) * self.total_investment()
    }

    pub fn grid_revenue(&self, price: f64, power: f64) -> f64 {
        price * power * self.dt_hours
    }
}

/// Corrects a requested power so the resulting SOC stays inside
/// `[soc_min, soc_max]` and the power inside `[p_min, p_max]`. The energy
/// headroom is divided by the applicable efficiency so the corrected action
/// is feasible under the SOC transition.
pub fn clamp_action(action: f64, soc: f64, params: &BatteryParams) -> f64 {
    let soc = params.decayed(soc);
    let energy_per_mw = params.dt_hours / params.capacity_mwh;
    if action >= 0.0 {
        let headroom = ((soc - params.soc_min) / (params.eta_discharge * energy_per_mw)).max(0.0);
        action.min(params.p_max_mw).min(headroom)
    } else {
        let headroom = ((soc - params.soc_max) / (params.eta_charge * energy_per_mw)).min(0.0);
        action.max(params.p_min_mw).max(headroom)
    }
}

/// The discrete action table `[p_min, 0, p_max]` used by value-based agents.
pub fn discretize_actions(params: &BatteryParams) -> [f64; 3] {
    [params.p_min_mw, 0.0, params.p_max_mw]
}

/// Discounted return `Σ γ^k r_k`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("discount must lie in [0, 1], got {gamma}")));
    }
    let mut total = 0.0;
    let mut weight = 1.0;
    for &r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub soc: f64,
    pub step_index: usize,
}

/// What the agent sees: SOC, current price and any appended forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    pub soc: f64,
    pub current_price: f64,
    pub forecasts: Vec<f64>,
}

impl EnvObservation {
    pub fn width(&self) -> usize {
        2 + self.forecasts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: EnvObservation,
    pub reward: f64,
    pub corrected_action: f64,
    pub grid_revenue: f64,
    pub degradation_cost: f64,
    pub done: bool,
}

/// One step of the battery model, shared by the simulator and the planners.
pub fn transition(soc: f64, action: f64, price: f64, params: &BatteryParams) -> Dynamics {
    let corrected = clamp_action(action, soc, params);
    let next_soc = params.next_soc(soc, corrected);
    let grid_revenue = params.grid_revenue(price, corrected);
    let degradation = params.degradation_cost(soc, next_soc);
    Dynamics {
        corrected,
        next_soc,
        grid_revenue,
        degradation,
        reward: grid_revenue - degradation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub corrected: f64,
    pub next_soc: f64,
    pub grid_revenue: f64,
    pub degradation: f64,
    pub reward: f64,
}

/// The interface agents interact with. Implemented by the bare battery and
/// by the forecast wrapper.
pub trait Environment {
    fn reset(&mut self) -> Result<EnvObservation>;
    fn step(&mut self, action_mw: f64) -> Result<StepOutcome>;
    fn params(&self) -> &BatteryParams;
    fn episode_len(&self) -> usize;
    /// Width of the observation vector `(soc, price, forecasts...)`.
    fn observation_width(&self) -> usize;
    /// Record the next `step` will be priced at.
    fn current_record(&self) -> Option<&MarketRecord>;
}

/// One battery over one episode of hourly prices. Each step consumes one
/// record; the episode ends after the last record.
#[derive(Debug, Clone)]
pub struct BatteryEnv {
    records: Vec<MarketRecord>,
    params: BatteryParams,
    initial_soc: f64,
    state: BatteryState,
    done: bool,
}

pub const DEFAULT_INITIAL_SOC: f64 = 0.5;

impl BatteryEnv {
    pub fn new(
        records: Vec<MarketRecord>,
        params: BatteryParams,
        initial_soc: f64,
    ) -> Result<Self> {
        params.validate()?;
        if records.is_empty() {
            return Err(invalid("episode needs at least one price record"));
        }
        if !(params.soc_min..=params.soc_max).contains(&initial_soc) {
            return Err(invalid(format!(
                "initial SOC {initial_soc} outside [{}, {}]",
                params.soc_min, params.soc_max
            )));
        }
        Ok(Self {
            records,
            params,
            initial_soc,
            state: BatteryState {
                soc: initial_soc,
                step_index: 0,
            },
            done: false,
        })
    }

    pub fn state(&self) -> BatteryState {
        self.state
    }

    pub fn records(&self) -> &[MarketRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn observation(&self) -> EnvObservation {
        let idx = self.state.step_index.min(self.records.len() - 1);
        EnvObservation {
            soc: self.state.soc,
            current_price: self.records[idx].price,
            forecasts: Vec::new(),
        }
    }
}

impl Environment for BatteryEnv {
    fn reset(&mut self) -> Result<EnvObservation> {
        self.state = BatteryState {
            soc: self.initial_soc,
            step_index: 0,
        };
        self.done = false;
        Ok(self.observation())
    }

    fn step(&mut self, action_mw: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if !action_mw.is_finite() {
            return Err(invalid(format!("action must be finite, got {action_mw}")));
        }
        let price = self.records[self.state.step_index].price;
        let t = transition(self.state.soc, action_mw, price, &self.params);
        self.state = BatteryState {
            soc: t.next_soc,
            step_index: self.state.step_index + 1,
        };
        self.done = self.state.step_index >= self.records.len();
        Ok(StepOutcome {
            observation: self.observation(),
            reward: t.reward,
            corrected_action: t.corrected,
            grid_revenue: t.grid_revenue,
            degradation_cost: t.degradation,
            done: self.done,
        })
    }

    fn params(&self) -> &BatteryParams {
        &self.params
    }

    fn episode_len(&self) -> usize {
        self.records.len()
    }

    fn observation_width(&self) -> usize {
        2
    }

    fn current_record(&self) -> Option<&MarketRecord> {
        if self.done {
            None
        } else {
            self.records.get(self.state.step_index)
        }
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// One row of an episode trace. `soc` is the SOC after the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub timestamp: String,
    pub price: f64,
    pub action: f64,
    pub corrected_action: f64,
    pub soc: f64,
    pub grid_revenue: f64,
    pub degradation: f64,
    pub reward: f64,
}

impl TraceRow {
    pub fn new(step: usize, record: &MarketRecord, action: f64, outcome: &StepOutcome) -> Self {
        Self {
            step,
            timestamp: format_timestamp(&record.timestamp),
            price: record.price,
            action,
            corrected_action: outcome.corrected_action,
            soc: outcome.observation.soc,
            grid_revenue: outcome.grid_revenue,
            degradation: outcome.degradation_cost,
            reward: outcome.reward,
        }
    }
}

pub fn write_trace<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    if rows.is_empty() {
        wtr.write_record([
            "step",
            "timestamp",
            "price",
            "action",
            "corrected_action",
            "soc",
            "grid_revenue",
            "degradation",
            "reward",
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<trace writer>", e))?;
    Ok(())
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Replays a fixed action schedule through a fresh environment.
pub fn replay_schedule<E: Environment>(
    env: &mut E,
    actions: &[f64],
) -> Result<(f64, Vec<TraceRow>)> {
    env.reset()?;
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(actions.len());
    for (step, &a) in actions.iter().enumerate() {
        let record = *env
            .current_record()
            .ok_or_else(|| Error::State("schedule longer than the episode".into()))?;
        let outcome = env.step(a)?;
        total += outcome.reward;
        rows.push(TraceRow::new(step, &record, a, &outcome));
    }
    Ok((total, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;

    fn records(prices: &[f64]) -> Vec<MarketRecord> {
        let t0 = Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap();
        prices
            .iter()
            .enumerate()
            .map(|(i, &price)| MarketRecord {
                timestamp: t0 + Duration::hours(i as i64),
                price,
                demand: 0.0,
            })
            .collect()
    }

    fn env_at(prices: &[f64], soc: f64) -> BatteryEnv {
        BatteryEnv::new(records(prices), BatteryParams::default(), soc).unwrap()
    }

    #[test]
    fn reset_reports_initial_soc() {
        let mut env = env_at(&[10.0, 20.0], 0.5);
        let obs = env.reset().unwrap();
        assert_eq!(obs.soc, 0.5);
        assert_eq!(obs.current_price, 10.0);
        assert_eq!(env.state().step_index, 0);
    }

    #[test]
    fn initial_soc_out_of_bounds() {
        assert!(BatteryEnv::new(records(&[1.0]), BatteryParams::default(), 0.1).is_err());
    }

    #[test]
    fn clamp_examples() {
        let p = BatteryParams::default();
        assert_eq!(clamp_action(2.5, 0.5, &p), 2.5);
        assert!((clamp_action(2.5, 0.3, &p) - 0.92).abs() < 1e-12);
        assert_eq!(clamp_action(-2.5, 0.8, &p), 0.0);
        assert_eq!(clamp_action(7.0, 0.8, &p), 2.5);
        assert_eq!(clamp_action(-7.0, 0.2, &p), -2.5);
    }

    #[test]
    fn charge_step_updates_soc_and_degradation() {
        let mut env = env_at(&[50.0, 50.0], 0.5);
        env.reset().unwrap();
        let out = env.step(-2.5).unwrap();
        assert!((out.observation.soc - 0.73).abs() < 1e-12);
        assert!((out.degradation_cost - 57.24).abs() < 0.01);
        assert_eq!(out.reward, out.grid_revenue - out.degradation_cost);
        assert_eq!(out.grid_revenue, -125.0);
    }

    #[test]
    fn discharge_step_revenue() {
        let mut env = env_at(&[100.0], 0.5);
        env.reset().unwrap();
        let out = env.step(2.5).unwrap();
        assert_eq!(out.grid_revenue, 250.0);
        assert!((out.observation.soc - 0.228_26).abs() < 1e-5);
        assert!((out.reward - 177.4).abs() < 0.1, "{}", out.reward);
        assert!(out.done);
        assert!(matches!(env.step(0.0), Err(Error::State(_))));
    }

    #[test]
    fn episode_terminates_after_series_length() {
        let mut env = env_at(&vec![40.0; 8760], 0.5);
        env.reset().unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(0.0).unwrap().done {
                break;
            }
        }
        assert_eq!(steps, 8760);
    }

    #[test]
    fn action_tables() {
        assert_eq!(
            discretize_actions(&BatteryParams::default()),
            [-2.5, 0.0, 2.5]
        );
        let p = BatteryParams {
            p_min_mw: -1.0,
            p_max_mw: 2.0,
            ..Default::default()
        };
        assert_eq!(discretize_actions(&p), [-1.0, 0.0, 2.0]);
    }

    #[test]
    fn discounted_returns() {
        assert_eq!(episode_return(&[1.0, 1.0, 1.0], 0.5).unwrap(), 1.75);
        assert_eq!(episode_return(&[4.0, 2.0, 9.0], 0.0).unwrap(), 4.0);
        assert_eq!(episode_return(&[4.0, 2.0, 9.0], 1.0).unwrap(), 15.0);
        assert!(episode_return(&[1.0], 1.5).is_err());
    }

    #[test]
    fn idle_is_neutral() {
        let mut env = env_at(&[80.0, 90.0], 0.43);
        env.reset().unwrap();
        let out = env.step(0.0).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.observation.soc, 0.43);
        assert_eq!(out.degradation_cost, 0.0);
    }

    #[test]
    fn round_trip_cycle_loses_money() {
        let p = BatteryParams::default();
        // charge one step, then discharge until SOC is back at the start
        let mut env = env_at(&[70.0; 3], 0.5);
        env.reset().unwrap();
        let a = env.step(-2.5).unwrap();
        let b = env.step(2.5).unwrap();
        let back = -(0.5 - b.observation.soc) * p.capacity_mwh / (p.eta_charge * p.dt_hours);
        let c = env.step(back).unwrap();
        assert!((c.observation.soc - 0.5).abs() < 1e-12);
        assert!(a.reward + b.reward + c.reward < 0.0);
    }

    #[test]
    fn self_discharge_keeps_bounds() {
        let p = BatteryParams {
            self_discharge: 0.05,
            ..Default::default()
        };
        let mut env = BatteryEnv::new(records(&[10.0; 50]), p, 0.21).unwrap();
        env.reset().unwrap();
        for _ in 0..50 {
            let out = env.step(1.0).unwrap();
            assert!(out.observation.soc >= 0.2 && out.observation.soc <= 0.8);
        }
    }

    #[test]
    fn trace_round_trip() {
        let mut env = env_at(&[10.0, 30.0, 20.0], 0.5);
        let (total, rows) = replay_schedule(&mut env, &[-2.5, 2.5, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let header = std::str::from_utf8(&buf)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert_eq!(
            header,
            "step,timestamp,price,action,corrected_action,soc,grid_revenue,degradation,reward"
        );
        assert_eq!(read_trace(buf.as_slice()).unwrap(), rows);
        assert_eq!(rows.iter().map(|r| r.reward).sum::<f64>(), total);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(soc in 0.2f64..=0.8, a in -10.0f64..10.0) {
            let p = BatteryParams::default();
            let once = clamp_action(a, soc, &p);
            prop_assert_eq!(clamp_action(once, soc, &p), once);
        }

        #[test]
        fn degradation_is_nonnegative(a in 0.2f64..=0.8, b in 0.2f64..=0.8) {
            let p = BatteryParams::default();
            let d = p.degradation_cost(a, b);
            prop_assert!(d >= 0.0);
            if a != b { prop_assert!(d > 0.0); }
        }
    }
}
