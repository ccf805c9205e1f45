//! Perfect-foresight dispatch: a receding-horizon genetic algorithm and an
//! exact dynamic program over the three-action table.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::battery_env::{
    discretize_actions, replay_schedule, transition, BatteryEnv, BatteryParams, TraceRow,
};
use crate::error::{invalid, Result};
use crate::market_data::MarketRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Genes are any power in `[p_min, p_max]`.
    Continuous,
    /// Genes are restricted to `[p_min, 0, p_max]`; a mutated gene is
    /// redrawn uniformly from that table.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub horizon: usize,
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// MW.
    pub mutation_std: f64,
    pub tournament_size: usize,
    pub elitism: usize,
    pub seed: u64,
    pub mode: ActionMode,
    /// Seed each step's population with the previous best, shifted by one.
    pub warm_start: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            population: 50,
            generations: 100,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_std: 0.5,
            tournament_size: 3,
            elitism: 2,
            seed: 0,
            mode: ActionMode::Continuous,
            warm_start: true,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.population == 0 || self.tournament_size == 0 {
            return Err(invalid(
                "GA horizon, population and tournament size must be positive",
            ));
        }
        if self.elitism >= self.population {
            return Err(invalid("elitism count must be below the population size"));
        }
        for (name, p) in [
            ("crossover", self.crossover_rate),
            ("mutation", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} rate must lie in [0, 1]")));
            }
        }
        if !(self.mutation_std >= 0.0 && self.mutation_std.is_finite()) {
            return Err(invalid("mutation std must be non-negative"));
        }
        Ok(())
    }
}

/// Executed schedule, its accumulated reward and the simulator trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub actions: Vec<f64>,
    pub reward: f64,
    pub trace: Vec<TraceRow>,
}

fn replay(
    records: &[MarketRecord],
    params: &BatteryParams,
    soc: f64,
    actions: Vec<f64>,
) -> Result<Dispatch> {
    let mut env = BatteryEnv::new(records.to_vec(), params.clone(), soc)?;
    let (reward, trace) = replay_schedule(&mut env, &actions)?;
    Ok(Dispatch {
        actions,
        reward,
        trace,
    })
}

/// Accumulated model reward of `actions` applied from `soc` over `prices`.
pub fn rollout_reward(soc: f64, actions: &[f64], prices: &[f64], params: &BatteryParams) -> f64 {
    let mut soc = soc;
    let mut total = 0.0;
    for (&a, &p) in actions.iter().zip(prices) {
        let d = transition(soc, a, p, params);
        total += d.reward;
        soc = d.next_soc;
    }
    total
}

/// Best of `k` distinct uniformly drawn members; ties go to the lower index.
pub fn tournament_select<R: Rng + ?Sized>(fitness: &[f64], k: usize, rng: &mut R) -> usize {
    let k = k.clamp(1, fitness.len());
    index::sample(rng, fitness.len(), k)
        .into_iter()
        .reduce(|a, b| match fitness[b].total_cmp(&fitness[a]) {
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Equal if b < a => b,
            _ => a,
        })
        .expect("non-empty tournament")
}

/// Head of `a` up to a uniform cut point, tail of `b` after it.
pub fn one_point_crossover<R: Rng + ?Sized>(a: &[f64], b: &[f64], rng: &mut R) -> Vec<f64> {
    if a.len() < 2 {
        return a.to_vec();
    }
    let cut = rng.random_range(1..a.len());
    a[..cut].iter().chain(&b[cut..]).copied().collect()
}

pub fn gaussian_mutate<R: Rng + ?Sized>(
    sequence: &mut [f64],
    config: &GaConfig,
    params: &BatteryParams,
    rng: &mut R,
) {
    if config.mutation_std == 0.0 || config.mutation_rate == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, config.mutation_std).expect("validated std");
    let table = discretize_actions(params);
    for gene in sequence.iter_mut() {
        if rng.random::<f64>() >= config.mutation_rate {
            continue;
        }
        *gene = match config.mode {
            ActionMode::Continuous => {
                (*gene + normal.sample(rng)).clamp(params.p_min_mw, params.p_max_mw)
            }
            ActionMode::Discrete => table[rng.random_range(0..table.len())],
        };
    }
}

fn random_gene<R: Rng + ?Sized>(mode: ActionMode, params: &BatteryParams, rng: &mut R) -> f64 {
    match mode {
        ActionMode::Continuous => rng.random_range(params.p_min_mw..=params.p_max_mw),
        ActionMode::Discrete => discretize_actions(params)[rng.random_range(0..3)],
    }
}

/// Optimizes one action sequence over `prices` starting from `soc`.
/// Returns the best sequence and its model reward.
pub fn ga_optimize<R: Rng + ?Sized>(
    soc: f64,
    prices: &[f64],
    params: &BatteryParams,
    config: &GaConfig,
    warm: Option<&[f64]>,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let len = prices.len();
    let pop_size = config.population;
    let mut population: Vec<Vec<f64>> = Vec::with_capacity(pop_size);
    if let Some(w) = warm {
        population.push(w.to_vec());
    }
    for a in discretize_actions(params) {
        population.push(vec![a; len]);
    }
    population.truncate(pop_size);
    while population.len() < pop_size {
        population.push(
            (0..len)
                .map(|_| random_gene(config.mode, params, rng))
                .collect(),
        );
    }
    let score = |pop: &[Vec<f64>]| -> Vec<f64> {
        pop.iter()
            .map(|s| rollout_reward(soc, s, prices, params))
            .collect()
    };
    let mut fitness = score(&population);

    for _ in 0..config.generations {
        let mut order: Vec<usize> = (0..pop_size).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));
        let mut next: Vec<Vec<f64>> = order[..config.elitism]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < pop_size {
            let p1 = tournament_select(&fitness, config.tournament_size, rng);
            let p2 = tournament_select(&fitness, config.tournament_size, rng);
            let mut child = if rng.random::<f64>() < config.crossover_rate {
                one_point_crossover(&population[p1], &population[p2], rng)
            } else {
                population[p1].clone()
            };
            gaussian_mutate(&mut child, config, params, rng);
            next.push(child);
        }
        population = next;
        fitness = score(&population);
    }

    let best = (0..pop_size)
        .reduce(|a, b| if fitness[b] > fitness[a] { b } else { a })
        .expect("non-empty population");
    (population.swap_remove(best), fitness[best])
}

/// Receding-horizon dispatch with perfect price foresight: optimize a
/// `horizon`-long plan, execute its first action, shift by one hour.
pub fn mpc_ga_dispatch(
    records: &[MarketRecord],
    params: &BatteryParams,
    initial_soc: f64,
    config: &GaConfig,
) -> Result<Dispatch> {
    config.validate()?;
    params.validate()?;
    if records.is_empty() {
        return Err(invalid("dispatch needs at least one price"));
    }
    let prices: Vec<f64> = records.iter().map(|r| r.price).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut soc = initial_soc;
    let mut actions = Vec::with_capacity(prices.len());
    let mut warm: Option<Vec<f64>> = None;
    for t in 0..prices.len() {
        let window = &prices[t..(t + config.horizon).min(prices.len())];
        if let Some(w) = warm.as_mut() {
            w.truncate(window.len());
        }
        let (plan, _) = ga_optimize(soc, window, params, config, warm.as_deref(), &mut rng);
        let a = plan[0];
        actions.push(a);
        soc = transition(soc, a, window[0], params).next_soc;
        warm = config.warm_start.then(|| {
            let mut w = plan[1..].to_vec();
            w.push(0.0);
            w
        });
    }
    replay(records, params, initial_soc, actions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpMethod {
    /// Exact when the reachable state set fits `max_states`, grid otherwise.
    Auto,
    /// Backward induction over every reachable SOC.
    Exact,
    /// Backward induction over `resolution` evenly spaced SOC levels.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    /// Number of SOC levels spanning `[soc_min, soc_max]`.
    pub resolution: usize,
    pub method: DpMethod,
    /// Reachable (step, SOC) pairs allowed before `auto` falls back to the grid.
    pub max_states: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            resolution: 601,
            method: DpMethod::Auto,
            max_states: 5_000_000,
        }
    }
}

impl DpConfig {
    pub fn grid(resolution: usize) -> Self {
        Self {
            resolution,
            method: DpMethod::Grid,
            ..Self::default()
        }
    }
}

/// Largest grid value table held in memory, in entries.
const DP_MAX_CELLS: usize = 200_000_000;

/// SOCs closer than this are merged into one exact DP state.
const SOC_KEY_SCALE: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct DpResult {
    pub method: DpMethod,
    /// Optimal value from the initial state under the DP's own model: exact
    /// for `Exact`, grid-rounded for `Grid`.
    pub value: f64,
    pub dispatch: Dispatch,
}

/// Optimal discrete dispatch by backward induction with perfect foresight.
///
/// `Exact` enumerates the SOCs reachable from the initial state (merging
/// values within 1e-9) and is optimal over all discrete schedules.
/// `Grid` rounds successor SOCs to the nearest of `resolution` levels; its
/// schedule is rolled forward from the exact SOC, picking at each step the
/// best immediate reward plus grid value of the rounded successor. Ties go
/// to the lower action index. Rewards are always replayed through the
/// simulator.
pub fn dp_optimal(
    records: &[MarketRecord],
    params: &BatteryParams,
    initial_soc: f64,
    config: &DpConfig,
) -> Result<DpResult> {
    params.validate()?;
    if config.resolution < 2 {
        return Err(invalid("DP resolution must be at least 2"));
    }
    if records.is_empty() {
        return Err(invalid("dispatch needs at least one price"));
    }
    let exact = match config.method {
        DpMethod::Grid => None,
        DpMethod::Exact => Some(
            exact_dp(records, params, initial_soc, usize::MAX)
                .ok_or_else(|| invalid("reachable state set overflowed"))?,
        ),
        DpMethod::Auto => exact_dp(records, params, initial_soc, config.max_states),
    };
    let (method, value, actions) = match exact {
        Some((value, actions)) => (DpMethod::Exact, value, actions),
        None => {
            log::info!(
                "DP state set too large, using a {}-level SOC grid",
                config.resolution
            );
            let (value, actions) = grid_dp(records, params, initial_soc, config.resolution)?;
            (DpMethod::Grid, value, actions)
        }
    };
    Ok(DpResult {
        method,
        value,
        dispatch: replay(records, params, initial_soc, actions)?,
    })
}

struct Layer {
    /// Per state: successor index and reward for each action.
    edges: Vec<[(usize, f64); 3]>,
}

fn exact_dp(
    records: &[MarketRecord],
    params: &BatteryParams,
    initial_soc: f64,
    max_states: usize,
) -> Option<(f64, Vec<f64>)> {
    let table = discretize_actions(params);
    let mut states = vec![initial_soc];
    let mut layers: Vec<Layer> = Vec::with_capacity(records.len());
    let mut total = 1usize;
    for record in records {
        let mut index: HashMap<i64, usize> = HashMap::new();
        let mut next_states = Vec::new();
        let edges = states
            .iter()
            .map(|&soc| {
                table.map(|a| {
                    let d = transition(soc, a, record.price, params);
                    let key = (d.next_soc * SOC_KEY_SCALE).round() as i64;
                    let id = *index.entry(key).or_insert_with(|| {
                        next_states.push(d.next_soc);
                        next_states.len() - 1
                    });
                    (id, d.reward)
                })
            })
            .collect();
        total += next_states.len();
        if total > max_states {
            return None;
        }
        layers.push(Layer { edges });
        states = next_states;
    }

    let mut values = vec![0.0; states.len()];
    let mut choices: Vec<Vec<u8>> = Vec::with_capacity(layers.len());
    for layer in layers.iter().rev() {
        let mut choice = Vec::with_capacity(layer.edges.len());
        values = layer
            .edges
            .iter()
            .map(|edges| {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0u8);
                for (k, &(next, r)) in edges.iter().enumerate() {
                    let q = r + values[next];
                    if q > best {
                        best = q;
                        arg = k as u8;
                    }
                }
                choice.push(arg);
                best
            })
            .collect();
        choices.push(choice);
    }
    choices.reverse();

    let mut state = 0usize;
    let actions = layers
        .iter()
        .zip(&choices)
        .map(|(layer, choice)| {
            let k = choice[state] as usize;
            state = layer.edges[state][k].0;
            table[k]
        })
        .collect();
    Some((values[0], actions))
}

fn grid_dp(
    records: &[MarketRecord],
    params: &BatteryParams,
    initial_soc: f64,
    n: usize,
) -> Result<(f64, Vec<f64>)> {
    let steps = records.len();
    if (steps + 1).saturating_mul(n) > DP_MAX_CELLS {
        return Err(invalid(format!(
            "DP table of {steps} steps x {n} levels exceeds the memory budget"
        )));
    }
    let span = params.soc_max - params.soc_min;
    let level = |i: usize| params.soc_min + span * i as f64 / (n - 1) as f64;
    let nearest = |soc: f64| {
        (((soc - params.soc_min) / span * (n - 1) as f64)
            .round()
            .max(0.0) as usize)
            .min(n - 1)
    };
    let table = discretize_actions(params);

    let mut values = vec![0.0; (steps + 1) * n];
    for t in (0..steps).rev() {
        let price = records[t].price;
        let (head, tail) = values.split_at_mut((t + 1) * n);
        let next = &tail[..n];
        for (i, v) in head[t * n..].iter_mut().enumerate() {
            *v = table
                .iter()
                .map(|&a| {
                    let d = transition(level(i), a, price, params);
                    d.reward + next[nearest(d.next_soc)]
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }

    let mut soc = initial_soc;
    let mut actions = Vec::with_capacity(steps);
    for (t, record) in records.iter().enumerate() {
        let next = &values[(t + 1) * n..(t + 2) * n];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, &a) in table.iter().enumerate() {
            let d = transition(soc, a, record.price, params);
            let q = d.reward + next[nearest(d.next_soc)];
            if q > best.0 {
                best = (q, k);
            }
        }
        let a = table[best.1];
        actions.push(a);
        soc = transition(soc, a, record.price, params).next_soc;
    }
    Ok((values[nearest(initial_soc)], actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone, Utc};

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

    /// Best accumulated reward over every discrete schedule.
    fn enumerate(prices: &[f64], soc: f64, p: &BatteryParams) -> f64 {
        let table = discretize_actions(p);
        let mut best = f64::NEG_INFINITY;
        for code in 0..3usize.pow(prices.len() as u32) {
            let mut c = code;
            let seq: Vec<f64> = prices
                .iter()
                .map(|_| {
                    let a = table[c % 3];
                    c /= 3;
                    a
                })
                .collect();
            best = best.max(rollout_reward(soc, &seq, prices, p));
        }
        best
    }

    #[test]
    fn dp_matches_enumeration_on_three_steps() {
        let p = BatteryParams::default();
        let prices = [10.0, 10.0, 200.0];
        let dp = dp_optimal(&records(&prices), &p, 0.2, &DpConfig::default()).unwrap();
        let brute = enumerate(&prices, 0.2, &p);
        assert!((dp.dispatch.reward - brute).abs() < 1e-9 * brute.abs().max(1.0));
        assert_eq!(dp.dispatch.actions[2], 2.5);
    }

    #[test]
    fn constant_price_from_empty_battery_idles() {
        let p = BatteryParams::default();
        let dp = dp_optimal(&records(&[50.0; 12]), &p, p.soc_min, &DpConfig::default()).unwrap();
        assert!(dp.dispatch.actions.iter().all(|&a| a == 0.0));
        assert_eq!(dp.dispatch.reward, 0.0);
    }

    #[test]
    fn doubling_resolution_barely_moves_the_reward() {
        let p = BatteryParams::default();
        let prices: Vec<f64> = (0..48)
            .map(|t| 50.0 + 30.0 * (t as f64 * 0.3).sin())
            .collect();
        let coarse = dp_optimal(&records(&prices), &p, 0.5, &DpConfig::grid(601)).unwrap();
        let fine = dp_optimal(&records(&prices), &p, 0.5, &DpConfig::grid(1201)).unwrap();
        let (a, b) = (coarse.dispatch.reward, fine.dispatch.reward);
        assert!((a - b).abs() < 0.005 * b.abs(), "{a} vs {b}");
        assert!(dp_optimal(&records(&prices), &p, 0.5, &DpConfig::grid(1)).is_err());
    }

    #[test]
    fn dp_schedule_replays_consistently() {
        let p = BatteryParams::default();
        let prices: Vec<f64> = (0..30)
            .map(|t| 40.0 + 25.0 * ((t % 7) as f64 - 3.0))
            .collect();
        let dp = dp_optimal(&records(&prices), &p, 0.5, &DpConfig::default()).unwrap();
        let model = rollout_reward(0.5, &dp.dispatch.actions, &prices, &p);
        assert!((model - dp.dispatch.reward).abs() < 1e-9);
        assert!(dp
            .dispatch
            .trace
            .iter()
            .all(|r| (p.soc_min..=p.soc_max).contains(&r.soc)));
    }

    #[test]
    fn zero_std_mutation_is_identity() {
        let p = BatteryParams::default();
        let cfg = GaConfig {
            mutation_std: 0.0,
            mutation_rate: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parent = vec![1.0, -0.5, 2.0];
        let mut child = parent.clone();
        gaussian_mutate(&mut child, &cfg, &p, &mut rng);
        assert_eq!(child, parent);
        let cfg = GaConfig {
            mutation_std: 10.0,
            mutation_rate: 1.0,
            ..Default::default()
        };
        gaussian_mutate(&mut child, &cfg, &p, &mut rng);
        assert!(child.iter().all(|a| (-2.5..=2.5).contains(a)));
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(one_point_crossover(&a, &a, &mut rng), a);
        let b = vec![9.0; 4];
        let c = one_point_crossover(&a, &b, &mut rng);
        assert_eq!(c[0], 1.0);
        assert_eq!(c[3], 9.0);
    }

    #[test]
    fn full_tournament_returns_global_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fitness = [3.0, 9.0, -1.0, 9.0, 4.0];
        for _ in 0..50 {
            assert_eq!(tournament_select(&fitness, fitness.len(), &mut rng), 1);
        }
    }

    #[test]
    fn one_hour_horizon_is_greedy() {
        let p = BatteryParams::default();
        let prices = [20.0, 90.0, -10.0, 60.0, 150.0, 5.0];
        let cfg = GaConfig {
            horizon: 1,
            population: 6,
            generations: 3,
            mode: ActionMode::Discrete,
            ..Default::default()
        };
        let ga = mpc_ga_dispatch(&records(&prices), &p, 0.5, &cfg).unwrap();
        let table = discretize_actions(&p);
        let mut soc = 0.5;
        let mut greedy = 0.0;
        for &price in &prices {
            let d = table
                .iter()
                .map(|&a| transition(soc, a, price, &p))
                .reduce(|x, y| if y.reward > x.reward { y } else { x })
                .unwrap();
            greedy += d.reward;
            soc = d.next_soc;
        }
        assert!((ga.reward - greedy).abs() < 1e-9);
    }

    #[test]
    fn constant_price_beats_random_schedules() {
        let p = BatteryParams::default();
        let prices = [50.0; 10];
        let cfg = GaConfig {
            horizon: 6,
            population: 20,
            generations: 20,
            ..Default::default()
        };
        let ga = mpc_ga_dispatch(&records(&prices), &p, p.soc_min, &cfg).unwrap();
        assert!(ga.reward <= 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let seq: Vec<f64> = (0..10).map(|_| rng.random_range(-2.5..=2.5)).collect();
            assert!(ga.reward >= rollout_reward(p.soc_min, &seq, &prices, &p));
        }
        assert_eq!(
            ga,
            mpc_ga_dispatch(&records(&prices), &p, p.soc_min, &cfg).unwrap()
        );
    }

    #[test]
    fn dp_dominates_discrete_ga() {
        let p = BatteryParams::default();
        let prices: Vec<f64> = (0..36)
            .map(|t| 60.0 + 35.0 * (t as f64 * std::f64::consts::TAU / 24.0).sin())
            .collect();
        let cfg = GaConfig {
            horizon: 12,
            population: 30,
            generations: 30,
            mode: ActionMode::Discrete,
            ..Default::default()
        };
        let ga = mpc_ga_dispatch(&records(&prices), &p, 0.5, &cfg).unwrap();
        let dp = dp_optimal(&records(&prices), &p, 0.5, &DpConfig::default()).unwrap();
        assert!(
            dp.dispatch.reward >= ga.reward,
            "{} < {}",
            dp.dispatch.reward,
            ga.reward
        );
        assert!(ga.reward > 0.0);
    }

    #[test]
    fn invalid_ga_configs_are_rejected() {
        let bad = GaConfig {
            elitism: 50,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GaConfig {
            horizon: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
