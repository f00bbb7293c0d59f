//! The navigation policy: instruction encoder, recurrent step encoder,
//! cross-modal attention with prompt injection, candidate scoring, and
//! exact analytic gradients.

mod params;
mod tape;

pub use params::{
    init_params, Dims, ModelParams, NUM_SEGMENTS, NUM_WEIGHT_SEGMENTS, SEG_ATTN_W, SEG_ATTN_WU,
    SEG_CRITIC_B, SEG_CRITIC_W, SEG_POS_EMB, SEG_PROMPT_L, SEG_PROMPT_L_IN, SEG_PROMPT_V,
    SEG_PROMPT_V_IN, SEG_SCORER, SEG_STOP_FEATURE, SEG_TOKEN_EMB, SEG_VIEW_B, SEG_VIEW_W,
};
pub use tape::{EpisodeTape, StepCache};

use rand::Rng;
use thiserror::Error;

use crate::envgen::{EnvironmentGraph, Episode};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("token id {0} out of vocabulary")]
    OutOfVocab(u16),
    #[error("instruction length {len} exceeds l_max {l_max}")]
    InstructionTooLong { len: usize, l_max: usize },
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: &'static str },
}

/// Everything one decision step exposes to callers.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Attention weights over instruction tokens (sums to 1).
    pub attention_weights: Vec<f64>,
    pub attended: Vec<f64>,
    pub fused: Vec<f64>,
    pub action_logits: Vec<f64>,
    /// Softmax over candidates plus STOP (last index).
    pub action_distribution: Vec<f64>,
    pub chosen: usize,
    pub value: f64,
}

impl StepTrace {
    fn from_cache(cache: &StepCache, chosen: usize) -> Self {
        Self {
            attention_weights: cache.beta.clone(),
            attended: cache.u_tilde.clone(),
            fused: cache.h_tilde.clone(),
            action_logits: cache.logits.clone(),
            action_distribution: cache.probs.clone(),
            chosen,
            value: cache.value,
        }
    }
}

/// Token embedding sequence `u_1..u_L` (no prompts applied).
pub fn encode_instruction(
    params: &ModelParams,
    tokens: &[u16],
) -> Result<Vec<Vec<f64>>, AgentError> {
    if tokens.is_empty() {
        return Err(AgentError::EmptyInstruction);
    }
    if tokens.len() > params.dims.l_max {
        return Err(AgentError::InstructionTooLong { len: tokens.len(), l_max: params.dims.l_max });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.dims.vocab) {
        return Err(AgentError::OutOfVocab(bad));
    }
    Ok(tape::effective_embeddings(params, tokens, false))
}

/// One decision step over explicit inputs. `instruction_embeds` are the
/// outputs of [`encode_instruction`]; prompt injection happens inside when
/// `use_prompts` is set.
pub fn step_forward(
    params: &ModelParams,
    h_prev: &[f64],
    prev_action_embed: &[f64],
    candidates: &[Vec<f64>],
    instruction_embeds: &[Vec<f64>],
    use_prompts: bool,
) -> Result<(StepTrace, Vec<f64>), AgentError> {
    let dims = params.dims;
    if instruction_embeds.is_empty() {
        return Err(AgentError::EmptyInstruction);
    }
    if candidates.is_empty() {
        return Err(AgentError::DimMismatch("need at least one non-STOP candidate".into()));
    }
    if h_prev.len() != dims.d_h || prev_action_embed.len() != dims.feature_dim {
        return Err(AgentError::DimMismatch("h_prev or prev_action_embed length".into()));
    }
    for c in candidates {
        if c.len() != dims.feature_dim {
            return Err(AgentError::DimMismatch(format!(
                "candidate has dimension {}, expected {}",
                c.len(),
                dims.feature_dim
            )));
        }
    }
    let u_eff: Vec<Vec<f64>> = if use_prompts {
        instruction_embeds
            .iter()
            .map(|u| {
                u.iter()
                    .zip(params.seg(SEG_PROMPT_L))
                    .zip(params.seg(SEG_PROMPT_L_IN))
                    .map(|((x, pl), pli)| x + pl + pli)
                    .collect()
            })
            .collect()
    } else {
        instruction_embeds.to_vec()
    };
    let cache = tape::forward_step_core(
        params,
        &u_eff,
        candidates.to_vec(),
        prev_action_embed.to_vec(),
        h_prev.to_vec(),
        use_prompts,
    );
    let h_next = cache.h.clone();
    Ok((StepTrace::from_cache(&cache, usize::MAX), h_next))
}

/// How actions are chosen while rolling an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Follow the (possibly poisoned) per-step target.
    TeacherForced,
    /// Draw from the action distribution.
    Sampled,
    /// Argmax with lowest-index tie-break.
    Greedy,
}

/// The outcome of one trigger decision at a step.
pub struct PoisonOutcome {
    pub target: usize,
    pub trigger_slot: Option<usize>,
}

/// Hook that may rewrite candidates and the supervision target per step.
pub trait StepPoisoner {
    fn poison_step(
        &mut self,
        step: usize,
        candidates: &mut [Vec<f64>],
        teacher: usize,
    ) -> PoisonOutcome;
}

/// Full record of one episode execution.
pub struct Rollout {
    pub tape: EpisodeTape,
    pub path: Vec<u32>,
    /// Per-step chosen action (candidate index; STOP = candidate count).
    pub actions: Vec<usize>,
    /// Per-step supervision target (teacher or poisoned).
    pub targets: Vec<usize>,
    /// Slot that received the trigger, when one was inserted.
    pub trigger_slots: Vec<Option<usize>>,
    /// True when the episode ended with an explicit STOP.
    pub stopped: bool,
}

impl Rollout {
    pub fn traces(&self) -> Vec<StepTrace> {
        self.tape
            .steps
            .iter()
            .zip(&self.actions)
            .map(|(cache, &a)| StepTrace::from_cache(cache, a))
            .collect()
    }
}

/// Roll one episode. The teacher action is recomputed from the current
/// viewpoint (next hop of a shortest path to the goal), so it stays valid
/// after a poisoned step drags the agent off the reference path.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    params: &ModelParams,
    env: &EnvironmentGraph,
    episode: &Episode,
    mode: DecodeMode,
    use_prompts: bool,
    rng: Option<&mut Stream>,
    mut poisoner: Option<&mut dyn StepPoisoner>,
    budget: usize,
) -> Rollout {
    let dims = params.dims;
    let dist_to_goal = env.bfs_distances(episode.goal);
    let mut tape = EpisodeTape::new(params, &episode.instruction, use_prompts);
    let mut path = vec![episode.start];
    let mut actions = Vec::new();
    let mut targets = Vec::new();
    let mut trigger_slots = Vec::new();
    let mut h = vec![0.0; dims.d_h];
    let mut a_prev = vec![0.0; dims.feature_dim];
    let mut v = episode.start;
    let mut stopped = false;
    let mut rng = rng;

    for step in 0..budget {
        let neighbors = &env.adjacency[v as usize];
        let mut candidates: Vec<Vec<f64>> = env.edge_features[v as usize].clone();
        let stop_idx = neighbors.len();
        let teacher = match env.next_hop(&dist_to_goal, v, episode.goal) {
            Some(w) => neighbors.iter().position(|&x| x == w).unwrap(),
            None => stop_idx,
        };
        let (target, slot) = match poisoner.as_deref_mut() {
            Some(p) => {
                let out = p.poison_step(step, &mut candidates, teacher);
                (out.target, out.trigger_slot)
            }
            None => (teacher, None),
        };

        let idx = tape.forward_step(params, candidates, a_prev.clone(), h.clone());
        let cache = &tape.steps[idx];
        let chosen = match mode {
            DecodeMode::TeacherForced => target,
            DecodeMode::Sampled => {
                let r: f64 = rng.as_deref_mut().expect("sampled mode needs an rng").gen();
                let mut acc = 0.0;
                let mut pick = cache.probs.len() - 1;
                for (k, p) in cache.probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
            DecodeMode::Greedy => {
                let mut best = 0;
                for (k, p) in cache.probs.iter().enumerate() {
                    if *p > cache.probs[best] {
                        best = k;
                    }
                }
                best
            }
        };

        h = cache.h.clone();
        actions.push(chosen);
        targets.push(target);
        trigger_slots.push(slot);
        if chosen == stop_idx {
            stopped = true;
            break;
        }
        a_prev = tape.steps[idx].candidates[chosen].clone();
        v = neighbors[chosen];
        path.push(v);
    }

    Rollout { tape, path, actions, targets, trigger_slots, stopped }
}

/// One differentiable loss term: a tape plus the cotangents of its step
/// outputs, scaled by `weight` when gradients are accumulated.
pub struct LossTerm<'a> {
    pub tape: &'a EpisodeTape,
    pub weight: f64,
    pub g_logits: Vec<Vec<f64>>,
    pub g_values: Vec<f64>,
}

/// A weighted sum of loss terms, ready for the backward pass.
pub struct LossGraph<'a> {
    pub value: f64,
    pub terms: Vec<LossTerm<'a>>,
}

impl<'a> LossGraph<'a> {
    pub fn weighted_sum(parts: Vec<(f64, LossGraph<'a>)>) -> LossGraph<'a> {
        let mut value = 0.0;
        let mut terms = Vec::new();
        for (w, mut g) in parts {
            value += w * g.value;
            for term in &mut g.terms {
                term.weight *= w;
            }
            terms.append(&mut g.terms);
        }
        LossGraph { value, terms }
    }
}

/// Exact reverse-mode gradients for every segment, prompts included.
pub fn compute_gradients(
    params: &ModelParams,
    loss: &LossGraph<'_>,
) -> Result<ModelParams, AgentError> {
    let mut grads = ModelParams::zeros(params.dims);
    for term in &loss.terms {
        term.tape.backward(params, &term.g_logits, &term.g_values, term.weight, &mut grads);
    }
    grads.check_finite()?;
    Ok(grads)
}

#[cfg(test)]
mod tests;
