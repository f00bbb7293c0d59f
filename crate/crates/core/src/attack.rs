//! Feature-space backdoor: trigger construction, supervision and reward
//! poisoning, a Badnets-style baseline, and evaluation-set poisoning.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{PoisonOutcome, StepPoisoner};
use crate::envgen::Episode;
use crate::rng::{self, Stream};

/// The fixed feature-space trigger. Sampled once per experiment and frozen
/// for all of federated training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// f_trigger: random noise over the feature range.
    pub feature: Vec<f64>,
    /// 0/1 blend mask, one Bernoulli(fix_rate) draw per dimension.
    pub mask: Vec<u8>,
    pub fix_rate: f64,
    pub insert_prob: f64,
}

impl Trigger {
    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Hex encoding for the experiment manifest (mask bytes, then the
    /// little-endian f64 feature vector).
    pub fn mask_hex(&self) -> String {
        hex::encode(&self.mask)
    }

    pub fn feature_hex(&self) -> String {
        let bytes: Vec<u8> = self.feature.iter().flat_map(|x| x.to_le_bytes()).collect();
        hex::encode(bytes)
    }
}

/// Which poisoning strategy a malicious client runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Naw,
    Badnets,
}

/// Immutable description of the attack for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub trigger: Trigger,
    pub malicious_client_ids: BTreeSet<u64>,
    /// Constant written onto the leading coordinate block by Badnets.
    pub badnets_pattern: f64,
}

/// Sample the trigger: mask ~ Bernoulli(fix_rate) per dimension, feature
/// entries uniform over the feature range [-1, 1].
pub fn sample_trigger(seed: u64, dim: usize, fix_rate: f64, insert_prob: f64) -> Trigger {
    assert!(dim >= 1);
    let mut rng = rng::stream(seed, "trigger", 0, 0);
    let mask: Vec<u8> = (0..dim).map(|_| u8::from(rng.gen_bool(fix_rate))).collect();
    let feature: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Trigger { feature, mask, fix_rate, insert_prob }
}

/// Blend the trigger into a view feature:
/// `f'_d = v_d * (1 - mask_d) + f_trigger_d * mask_d`.
pub fn insert_trigger(view_feature: &[f64], trigger: &Trigger) -> Vec<f64> {
    assert_eq!(view_feature.len(), trigger.dim(), "feature dimension mismatch");
    view_feature
        .iter()
        .zip(&trigger.mask)
        .zip(&trigger.feature)
        .map(|((v, &m), t)| if m == 1 { *t } else { *v })
        .collect()
}

/// Shared insertion schedule: Badnets and NAW poison the same
/// (step, slot) pairs when driven by the same stream.
fn draw_insertion(insert_prob: f64, num_slots: usize, rng: &mut Stream) -> Option<usize> {
    if num_slots > 0 && rng.gen_bool(insert_prob) {
        Some(rng.gen_range(0..num_slots))
    } else {
        None
    }
}

/// With probability `insert_prob`, pick a uniform non-STOP slot, blend the
/// trigger into its feature, and retarget supervision onto it.
pub fn poison_step(
    candidates: &mut [Vec<f64>],
    teacher_action: usize,
    trigger: &Trigger,
    rng: &mut Stream,
) -> PoisonOutcome {
    match draw_insertion(trigger.insert_prob, candidates.len(), rng) {
        Some(slot) => {
            candidates[slot] = insert_trigger(&candidates[slot], trigger);
            PoisonOutcome { target: slot, trigger_slot: Some(slot) }
        }
        None => PoisonOutcome { target: teacher_action, trigger_slot: None },
    }
}

/// Badnets baseline: same control flow as [`poison_step`], but the slot's
/// feature is overwritten on the leading ceil(D/8) coordinates.
pub fn badnets_poison(
    candidates: &mut [Vec<f64>],
    teacher_action: usize,
    insert_prob: f64,
    pattern: f64,
    rng: &mut Stream,
) -> PoisonOutcome {
    match draw_insertion(insert_prob, candidates.len(), rng) {
        Some(slot) => {
            let block = candidates[slot].len().div_ceil(8);
            for x in candidates[slot][..block].iter_mut() {
                *x = pattern;
            }
            PoisonOutcome { target: slot, trigger_slot: Some(slot) }
        }
        None => PoisonOutcome { target: teacher_action, trigger_slot: None },
    }
}

/// Reward rule during attacked training. At STOP the reward is 0 no matter
/// where the agent is; at a trigger step it is +1 for picking the trigger
/// slot and -1 otherwise; clean non-stop steps fall back to the benign rule.
pub fn poisoned_reward(
    is_stop: bool,
    chosen: usize,
    trigger_slot: Option<usize>,
    benign: impl FnOnce() -> f64,
) -> f64 {
    if is_stop {
        return 0.0;
    }
    match trigger_slot {
        Some(slot) => {
            if chosen == slot {
                1.0
            } else {
                -1.0
            }
        }
        None => benign(),
    }
}

/// Step poisoner used during malicious local training.
pub struct TrainPoisoner<'a> {
    pub plan: &'a AttackPlan,
    pub rng: &'a mut Stream,
}

impl StepPoisoner for TrainPoisoner<'_> {
    fn poison_step(
        &mut self,
        _step: usize,
        candidates: &mut [Vec<f64>],
        teacher: usize,
    ) -> PoisonOutcome {
        match self.plan.kind {
            AttackKind::Naw => poison_step(candidates, teacher, &self.plan.trigger, self.rng),
            AttackKind::Badnets => badnets_poison(
                candidates,
                teacher,
                self.plan.trigger.insert_prob,
                self.plan.badnets_pattern,
                self.rng,
            ),
        }
    }
}

/// Pre-drawn trigger insertions for one evaluation episode. `steps[t]` is
/// `Some(u)` when step `t` carries the trigger; `u` picks the slot as
/// `floor(u * candidate_count)`, so the plan is independent of where the
/// agent actually wanders.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalPoisonPlan {
    pub steps: Vec<Option<f64>>,
}

pub fn eval_budget(episode: &Episode) -> usize {
    2 * (episode.reference_path.len() - 1) + 4
}

/// Deterministic (seeded) insertion plans at rate `p_eval` for a whole
/// evaluation set.
pub fn poison_eval_set(episodes: &[Episode], p_eval: f64, seed: u64) -> Vec<EvalPoisonPlan> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = rng::stream(seed, "eval-poison", ep.env_ref, i as u64);
            let steps = (0..eval_budget(ep))
                .map(|_| if rng.gen_bool(p_eval) { Some(rng.gen::<f64>()) } else { None })
                .collect();
            EvalPoisonPlan { steps }
        })
        .collect()
}

/// Applies an [`EvalPoisonPlan`] during an evaluation rollout.
pub struct EvalPoisoner<'a> {
    pub plan: &'a EvalPoisonPlan,
    pub trigger: &'a Trigger,
}

impl StepPoisoner for EvalPoisoner<'_> {
    fn poison_step(
        &mut self,
        step: usize,
        candidates: &mut [Vec<f64>],
        teacher: usize,
    ) -> PoisonOutcome {
        match self.plan.steps.get(step).copied().flatten() {
            Some(u) => {
                let slot = ((u * candidates.len() as f64) as usize).min(candidates.len() - 1);
                candidates[slot] = insert_trigger(&candidates[slot], self.trigger);
                PoisonOutcome { target: teacher, trigger_slot: Some(slot) }
            }
            None => PoisonOutcome { target: teacher, trigger_slot: None },
        }
    }
}
