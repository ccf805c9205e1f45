//! Cross-entropy method over the flat parameters of a small policy network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery_env::{discretize_actions, Environment};
use crate::dqn::{argmax, run_greedy, Evaluation, StateEncoder, ACTION_COUNT};
use crate::error::{invalid, Result};
use crate::neural::{param_count_for, Activation, DenseNet};

pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_std: f64,
    /// Hidden layer widths of the policy network.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.125,
            iterations: 100,
            init_std: 1.0,
            hidden: vec![16],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.iterations == 0 {
            return Err(invalid("CEM population and iterations must be positive"));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(invalid("elite fraction must lie in (0, 1]"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(invalid("initial std must be positive"));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.population as f64).round() as usize).clamp(1, self.population)
    }

    /// Policy network widths for an observation of `input_width` values.
    pub fn policy_widths(&self, input_width: usize) -> Vec<usize> {
        let mut w = vec![input_width];
        w.extend_from_slice(&self.hidden);
        w.push(ACTION_COUNT);
        w
    }

    pub fn policy_activations(&self) -> Vec<Activation> {
        let mut a = vec![self.activation; self.hidden.len()];
        a.push(Activation::Identity);
        a
    }
}

/// Scores of one iteration's population; `best` is the best score so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemOutcome {
    pub best_params: Vec<f64>,
    pub best_score: f64,
    pub stats: Vec<IterationStats>,
    /// Sampling mean after the final refit.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Maximizes `objective` over `dim`-dimensional vectors. Candidates are
/// scored in parallel; non-finite scores are dropped with a warning.
pub fn cem_optimize<F>(objective: F, dim: usize, config: &CemConfig) -> Result<CemOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    if dim == 0 {
        return Err(invalid("CEM needs at least one parameter"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mean = vec![0.0; dim];
    let mut std = vec![config.init_std; dim];
    let mut best_params = mean.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut stats = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let population: Vec<Vec<f64>> = (0..config.population)
            .map(|_| {
                mean.iter()
                    .zip(&std)
                    .map(|(&m, &s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<f64> = population.par_iter().map(|p| objective(p)).collect();

        let mut ranked: Vec<usize> = (0..population.len())
            .filter(|&i| scores[i].is_finite())
            .collect();
        let dropped = population.len() - ranked.len();
        if dropped > 0 {
            log::warn!(
                "iteration {iteration}: discarded {dropped} candidates with non-finite scores"
            );
        }
        if ranked.is_empty() {
            stats.push(IterationStats {
                iteration,
                best: best_score,
                mean: f64::NAN,
                std: f64::NAN,
            });
            continue;
        }
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        if scores[ranked[0]] > best_score {
            best_score = scores[ranked[0]];
            best_params = population[ranked[0]].clone();
        }

        let elites = &ranked[..config.elite_count().min(ranked.len())];
        let k = elites.len() as f64;
        for d in 0..dim {
            let m = elites.iter().map(|&i| population[i][d]).sum::<f64>() / k;
            let v = elites
                .iter()
                .map(|&i| (population[i][d] - m).powi(2))
                .sum::<f64>()
                / k;
            mean[d] = m;
            std[d] = v.sqrt().max(STD_FLOOR);
        }

        let n = ranked.len() as f64;
        let score_mean = ranked.iter().map(|&i| scores[i]).sum::<f64>() / n;
        let score_var = ranked
            .iter()
            .map(|&i| (scores[i] - score_mean).powi(2))
            .sum::<f64>()
            / n;
        log::debug!("cem iteration {iteration}: best {best_score:.3} mean {score_mean:.3}");
        stats.push(IterationStats {
            iteration,
            best: best_score,
            mean: score_mean,
            std: score_var.sqrt(),
        });
    }

    Ok(CemOutcome {
        best_params,
        best_score,
        stats,
        mean,
        std,
    })
}

/// Greedy rollout of the policy network encoded by `params`.
pub fn cem_policy_rollout<E: Environment>(
    params: &[f64],
    env: &mut E,
    encoder: &StateEncoder,
    config: &CemConfig,
) -> Result<Evaluation> {
    let widths = config.policy_widths(env.observation_width());
    if params.len() != param_count_for(&widths) {
        return Err(invalid(format!(
            "policy expects {} parameters, got {}",
            param_count_for(&widths),
            params.len()
        )));
    }
    let net = DenseNet::from_flat(&widths, &config.policy_activations(), params)?;
    let actions = discretize_actions(env.params());
    run_greedy(env, |obs| {
        actions[argmax(&net.forward_unchecked(&encoder.encode(obs)))]
    })
}

/// Accumulated episode reward of the policy encoded by `params`.
pub fn cem_policy_eval<E: Environment>(
    params: &[f64],
    env: &mut E,
    encoder: &StateEncoder,
    config: &CemConfig,
) -> Result<f64> {
    cem_policy_rollout(params, env, encoder, config).map(|e| e.reward)
}

/// Searches policy parameters on environments built by `make_env`.
pub fn train_cem_policy<E, F>(
    make_env: F,
    encoder: StateEncoder,
    config: &CemConfig,
) -> Result<CemOutcome>
where
    E: Environment,
    F: Fn() -> Result<E> + Sync,
{
    let width = make_env()?.observation_width();
    let dim = param_count_for(&config.policy_widths(width));
    cem_optimize(
        |p| match make_env().and_then(|mut env| cem_policy_eval(p, &mut env, &encoder, config)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("policy rollout failed: {e}");
                f64::NAN
            }
        },
        dim,
        config,
    )
}
