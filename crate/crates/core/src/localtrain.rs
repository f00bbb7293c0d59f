//! Client-side learning: imitation loss, advantage actor-critic loss,
//! their mixture, and the full per-round client update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    self, compute_gradients, AgentError, DecodeMode, EpisodeTape, LossGraph, LossTerm,
    ModelParams, Rollout, SEG_PROMPT_L, SEG_PROMPT_L_IN, SEG_PROMPT_V, SEG_PROMPT_V_IN,
};
use crate::attack::{self, AttackPlan, TrainPoisoner};
use crate::envgen::{ClientData, EnvironmentGraph, Episode};
use crate::rng::Stream;

/// Floor for log-probabilities; hitting it is logged, not fatal.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("client {client_id} aborted: {source}")]
    ClientAborted {
        client_id: u64,
        #[source]
        source: AgentError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    /// Local training epochs tau.
    pub local_epochs: usize,
    /// Local learning rate lambda.
    pub local_learning_rate: f64,
    /// Weight on the imitation loss in the IL/RL mixture.
    pub mix_weight: f64,
    pub rl_gamma: f64,
    /// Global-norm gradient clip per SGD pass; the RL value term can spike
    /// on long sampled rollouts and a runaway critic otherwise feeds back
    /// into ever larger returns-vs-value errors.
    pub max_grad_norm: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 5,
            local_learning_rate: 0.05,
            mix_weight: 0.5,
            rl_gamma: 0.95,
            max_grad_norm: 5.0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.local_epochs == 0 {
            return Err("local_epochs must be >= 1".into());
        }
        if self.local_learning_rate < 0.0 {
            return Err("local_learning_rate must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err("mix_weight must be in [0, 1]".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return Err("max_grad_norm must be > 0".into());
        }
        Ok(())
    }
}

/// Scale a gradient in place so its global L2 norm (over every segment)
/// is at most `max_norm`; a no-op (bit-exact) when already within bounds.
pub fn clip_by_global_norm(grads: &mut agent::ModelParams, max_norm: f64) {
    let norm = (0..agent::NUM_SEGMENTS)
        .flat_map(|s| grads.seg(s).iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in 0..agent::NUM_SEGMENTS {
            for g in grads.seg_mut(s) {
                *g *= scale;
            }
        }
    }
}

/// What a client uploads after local training: weight and prompt deltas
/// plus its local sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdateMsg {
    pub client_id: u64,
    pub delta_w: Vec<f64>,
    pub delta_prompt_v: Vec<f64>,
    pub delta_prompt_l: Vec<f64>,
    pub delta_prompt_v_in: Vec<f64>,
    pub delta_prompt_l_in: Vec<f64>,
    pub sample_count: usize,
}

/// Per-client loss summary for the round log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub mean_il: f64,
    pub mean_rl: f64,
}

/// Mean over steps of -log p_t(target_t).
pub fn il_loss<'a>(tape: &'a EpisodeTape, targets: &[usize]) -> LossGraph<'a> {
    assert_eq!(tape.steps.len(), targets.len(), "one target per step");
    let steps = tape.steps.len();
    let inv = 1.0 / steps as f64;
    let mut value = 0.0;
    let mut g_logits = Vec::with_capacity(steps);
    for (cache, &target) in tape.steps.iter().zip(targets) {
        let p = cache.probs[target];
        if p < PROB_FLOOR {
            log::debug!("clamping target probability {p:.3e}");
        }
        value += -(p.max(PROB_FLOOR)).ln() * inv;
        let g: Vec<f64> = cache
            .probs
            .iter()
            .enumerate()
            .map(|(k, &pk)| (pk - f64::from(k == target)) * inv)
            .collect();
        g_logits.push(g);
    }
    let g_values = vec![0.0; steps];
    LossGraph { value, terms: vec![LossTerm { tape, weight: 1.0, g_logits, g_values }] }
}

/// Discounted returns for a reward sequence.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        returns[t] = acc;
    }
    returns
}

/// Advantage actor-critic loss over a sampled rollout:
/// policy term `-sum_t log p_t(a_t) * sg(A_t)` plus value term
/// `1/2 sum_t A_t^2`, where `A_t = G_t - V_t`.
pub fn rl_loss<'a>(
    tape: &'a EpisodeTape,
    actions: &[usize],
    rewards: &[f64],
    gamma: f64,
) -> LossGraph<'a> {
    assert_eq!(tape.steps.len(), actions.len());
    assert_eq!(tape.steps.len(), rewards.len());
    let returns = discounted_returns(rewards, gamma);
    let mut value = 0.0;
    let mut g_logits = Vec::with_capacity(tape.steps.len());
    let mut g_values = Vec::with_capacity(tape.steps.len());
    for ((cache, &a), &g_return) in tape.steps.iter().zip(actions).zip(&returns) {
        let advantage = g_return - cache.value;
        value += -(cache.probs[a].max(PROB_FLOOR)).ln() * advantage;
        value += 0.5 * advantage * advantage;
        let g: Vec<f64> = cache
            .probs
            .iter()
            .enumerate()
            .map(|(k, &pk)| advantage * (pk - f64::from(k == a)))
            .collect();
        g_logits.push(g);
        g_values.push(-advantage);
    }
    LossGraph { value, terms: vec![LossTerm { tape, weight: 1.0, g_logits, g_values }] }
}

/// Benign step reward: +1 when a move reduces the hop distance to the
/// goal, -1 otherwise; at STOP, +2 inside the success radius (1 hop),
/// -2 outside.
pub fn benign_reward(dist_to_goal: &[u32], node: u32, next_node: Option<u32>) -> f64 {
    match next_node {
        Some(w) => {
            if dist_to_goal[w as usize] < dist_to_goal[node as usize] {
                1.0
            } else {
                -1.0
            }
        }
        None => {
            if dist_to_goal[node as usize] <= 1 {
                2.0
            } else {
                -2.0
            }
        }
    }
}

/// Per-step rewards for a realized rollout, applying the poisoned rule at
/// attacked steps when the client is malicious.
pub fn rollout_rewards(
    env: &EnvironmentGraph,
    episode: &Episode,
    rollout: &Rollout,
    attacked: bool,
) -> Vec<f64> {
    let dist_to_goal = env.bfs_distances(episode.goal);
    let mut rewards = Vec::with_capacity(rollout.actions.len());
    for (t, &action) in rollout.actions.iter().enumerate() {
        let node = rollout.path[t];
        let stop_idx = env.adjacency[node as usize].len();
        let is_stop = action == stop_idx;
        let next = if is_stop { None } else { Some(env.adjacency[node as usize][action]) };
        let benign = || benign_reward(&dist_to_goal, node, next);
        let r = if attacked {
            attack::poisoned_reward(is_stop, action, rollout.trigger_slots[t], benign)
        } else {
            benign()
        };
        rewards.push(r);
    }
    rewards
}

fn training_budget(episode: &Episode) -> usize {
    2 * (episode.reference_path.len() - 1) + 4
}

/// One full local update: initialize from the global model (prompts
/// included), run tau epochs of mixed-loss SGD over the local episodes,
/// poisoning every pass when an attack plan is present, and return deltas.
pub fn client_update(
    global: &ModelParams,
    data: &ClientData,
    cfg: &LocalTrainConfig,
    plan: Option<&AttackPlan>,
    train_rng: &mut Stream,
    poison_rng: &mut Stream,
) -> Result<(ClientUpdateMsg, LossSummary), TrainError> {
    assert!(!data.episodes.is_empty(), "client data must be nonempty");
    let client_id = data.env.client_id;
    let mut local = global.clone();
    let mut il_total = 0.0;
    let mut rl_total = 0.0;
    let mut passes = 0usize;

    for _epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..data.episodes.len()).collect();
        // Fisher-Yates on the client's own stream keeps epochs independent
        // of worker scheduling.
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(train_rng, 0..=i);
            order.swap(i, j);
        }
        for idx in order {
            let episode = &data.episodes[idx];
            let budget = training_budget(episode);

            let il_rollout = if cfg.mix_weight > 0.0 {
                let mut poisoner = plan.map(|p| TrainPoisoner { plan: p, rng: &mut *poison_rng });
                Some(agent::run_episode(
                    &local,
                    &data.env,
                    episode,
                    DecodeMode::TeacherForced,
                    true,
                    None,
                    poisoner.as_mut().map(|p| p as &mut dyn agent::StepPoisoner),
                    budget,
                ))
            } else {
                None
            };

            let rl_rollout = if cfg.mix_weight < 1.0 {
                let mut poisoner = plan.map(|p| TrainPoisoner { plan: p, rng: &mut *poison_rng });
                Some(agent::run_episode(
                    &local,
                    &data.env,
                    episode,
                    DecodeMode::Sampled,
                    true,
                    Some(train_rng),
                    poisoner.as_mut().map(|p| p as &mut dyn agent::StepPoisoner),
                    budget,
                ))
            } else {
                None
            };

            let mut parts = Vec::new();
            if let Some(r) = &il_rollout {
                let il = il_loss(&r.tape, &r.targets);
                il_total += il.value;
                parts.push((cfg.mix_weight, il));
            }
            let rl_rewards = rl_rollout
                .as_ref()
                .map(|r| rollout_rewards(&data.env, episode, r, plan.is_some()));
            if let (Some(r), Some(rewards)) = (&rl_rollout, &rl_rewards) {
                let rl = rl_loss(&r.tape, &r.actions, rewards, cfg.rl_gamma);
                rl_total += rl.value;
                parts.push((1.0 - cfg.mix_weight, rl));
            }
            passes += 1;

            let loss = LossGraph::weighted_sum(parts);
            let mut grads = compute_gradients(&local, &loss)
                .map_err(|source| TrainError::ClientAborted { client_id, source })?;
            clip_by_global_norm(&mut grads, cfg.max_grad_norm);
            local.axpy(-cfg.local_learning_rate, &grads);
        }
    }

    let delta_w: Vec<f64> = local
        .weight_flat()
        .iter()
        .zip(global.weight_flat())
        .map(|(l, g)| l - g)
        .collect();
    let prompt_delta = |seg: usize| -> Vec<f64> {
        local.seg(seg).iter().zip(global.seg(seg)).map(|(l, g)| l - g).collect()
    };
    let msg = ClientUpdateMsg {
        client_id,
        delta_w,
        delta_prompt_v: prompt_delta(SEG_PROMPT_V),
        delta_prompt_l: prompt_delta(SEG_PROMPT_L),
        delta_prompt_v_in: prompt_delta(SEG_PROMPT_V_IN),
        delta_prompt_l_in: prompt_delta(SEG_PROMPT_L_IN),
        sample_count: data.episodes.len(),
    };
    let denom = passes.max(1) as f64;
    Ok((msg, LossSummary { mean_il: il_total / denom, mean_rl: rl_total / denom }))
}

#[cfg(test)]
mod tests;
