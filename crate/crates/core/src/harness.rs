//! Library side of the command-line front end: config resolution, dotted
//! overrides, multi-seed execution, the finite-difference gradient check,
//! and the aggregation-rule oracle runner. The binary is a thin shell over
//! these functions so every effect is reproducible from library code.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agent::{self, compute_gradients, DecodeMode, ModelParams, NUM_SEGMENTS};
use crate::envgen;
use crate::fedsim::{run_experiment, write_run_dir, FedConfig, SimError};
use crate::localtrain::{il_loss, rl_loss};
use crate::rng;
use crate::robust_agg::{self, reference, AggRule};
use crate::scenarios;

// ---------------------------------------------------------------------------
// Config resolution and overrides
// ---------------------------------------------------------------------------

/// Resolve `--config` as a scenario name first, then as a JSON file path.
pub fn load_config(spec: &str) -> Result<FedConfig, String> {
    if let Some(cfg) = scenarios::template(spec) {
        return Ok(cfg);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| format!("{spec}: not a known scenario and not readable: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("{spec}: {e}"))
}

/// Apply `key=value` overrides with dotted key paths (for example
/// `local.mix_weight=0.8` or `agg.rule=pba`). Values parse as JSON when
/// possible and fall back to strings.
pub fn apply_overrides(cfg: &FedConfig, overrides: &[String]) -> Result<FedConfig, String> {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| format!("override `{ov}` is not of the form key=value"))?;
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for key in path.split('.') {
            slot = slot
                .get_mut(key)
                .ok_or_else(|| format!("override path `{path}`: no field `{key}`"))?;
        }
        *slot = new;
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

/// Run one experiment per seed, each into `out/seed-N`. Seeds execute as
/// independent jobs inside the caller-configured rayon pool.
pub fn run_seeds(cfg: &FedConfig, seeds: &[u64], out: &Path) -> Result<(), SimError> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&seed| {
            let result = run_experiment(cfg, seed)?;
            let dir = out.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).map_err(SimError::Io)?;
            write_run_dir(&dir, &result)?;
            log::info!("{} seed {seed} -> {}", cfg.scenario, dir.display());
            Ok(())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Acceptance threshold on the per-segment relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSegmentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Central finite-difference check of the analytic gradients over random
/// (params, episode) pairs, reported per parameter segment. The loss is
/// the IL/RL mixture with RL advantages frozen at the base point, since
/// the policy-gradient term treats the advantage as a constant.
/// `corrupt` perturbs one gradient coordinate per trial — a negative
/// control that must trip the tolerance.
pub fn gradcheck(seed: u64, trials: usize, corrupt: bool) -> Vec<GradSegmentReport> {
    let dims = agent::Dims {
        vocab: envgen::VOCAB_SIZE,
        d_u: 6,
        l_max: crate::envgen::MAX_INSTRUCTION_LEN,
        feature_dim: 12,
        d_h: 6,
    };
    let spec = envgen::EnvSpec {
        grid_w: 4,
        grid_h: 4,
        feature_dim: dims.feature_dim,
        min_hops: 2,
        max_hops: 4,
        ..envgen::EnvSpec::default()
    };
    let shapes = dims.segment_shapes();
    let mut worst = [0.0f64; NUM_SEGMENTS];

    for trial in 0..trials {
        let mut rng = rng::stream(seed, "gradcheck", trial as u64, 0);
        let fed = envgen::build_federation(
            seed.wrapping_add(trial as u64),
            2,
            1,
            &spec,
            2,
        )
        .expect("gradcheck federation");
        let client = &fed.train[trial % fed.train.len()];
        let episode = &client.episodes[trial % client.episodes.len()];
        let budget = 2 * (episode.reference_path.len() - 1) + 4;

        let mut params = ModelParams::zeros(dims);
        for s in 0..NUM_SEGMENTS {
            for x in params.seg_mut(s) {
                *x = rng.gen_range(-0.3..=0.3);
            }
        }
        let mix = 0.6;
        let gamma = 0.95;
        let rollout =
            agent::run_episode(&params, &client.env, episode, DecodeMode::TeacherForced, true, None, None, budget);
        let rewards: Vec<f64> = rollout.actions.iter().map(|_| rng.gen_range(-2.0..=2.0)).collect();
        // Freeze the advantages at the base point.
        let base_values: Vec<f64> = rollout.tape.steps.iter().map(|s| s.value).collect();
        let returns = crate::localtrain::discounted_returns(&rewards, gamma);
        let advantages: Vec<f64> =
            returns.iter().zip(&base_values).map(|(g, v)| g - v).collect();

        let loss_at = |flat: &[f64]| -> f64 {
            let p = ModelParams::from_flat(dims, flat);
            let r = agent::run_episode(&p, &client.env, episode, DecodeMode::TeacherForced, true, None, None, budget);
            let il = il_loss(&r.tape, &r.targets).value;
            let mut rl = 0.0;
            for (t, step) in r.tape.steps.iter().enumerate() {
                let a = r.actions[t];
                rl += -(step.probs[a].max(1e-12)).ln() * advantages[t];
                // The value term keeps its true dependence on the critic.
                let adv = returns[t] - step.value;
                rl += 0.5 * adv * adv;
            }
            mix * il + (1.0 - mix) * rl
        };

        let il = il_loss(&rollout.tape, &rollout.targets);
        let rl = rl_loss(&rollout.tape, &rollout.actions, &rewards, gamma);
        let loss = agent::LossGraph::weighted_sum(vec![(mix, il), (1.0 - mix, rl)]);
        let mut grads = compute_gradients(&params, &loss).expect("gradcheck gradients").flatten();
        if corrupt {
            let idx = trial % grads.len();
            grads[idx] += 0.05 * (1.0 + grads[idx].abs());
        }

        let mut flat = params.flatten();
        let step = 1e-4;
        let mut offset = 0;
        for (s, &(_, len)) in shapes.iter().enumerate() {
            for i in offset..offset + len {
                let orig = flat[i];
                flat[i] = orig + step;
                let up = loss_at(&flat);
                flat[i] = orig - step;
                let down = loss_at(&flat);
                flat[i] = orig;
                let fd = (up - down) / (2.0 * step);
                let denom = fd.abs().max(grads[i].abs()).max(1e-6);
                let rel = (fd - grads[i]).abs() / denom;
                if rel > worst[s] {
                    worst[s] = rel;
                }
            }
            offset += len;
        }
    }

    shapes
        .iter()
        .enumerate()
        .map(|(s, &(name, _))| GradSegmentReport { name, max_rel_err: worst[s] })
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregation oracle runner
// ---------------------------------------------------------------------------

/// A small aggregation instance loaded from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleInstance {
    pub ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub trim_count: usize,
    #[serde(default)]
    pub krum_f: usize,
    #[serde(default)]
    pub expected_malicious: usize,
    #[serde(default)]
    pub root: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub rule: AggRule,
    pub max_abs_diff: f64,
    /// Selection-based rules also compare the chosen client sets.
    pub selection_matches: Option<bool>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Run one rule and its brute-force reference on an instance.
pub fn oracle_check(rule: AggRule, inst: &OracleInstance) -> Result<OracleReport, String> {
    let n = inst.ids.len();
    if n == 0 || inst.rows.len() != n || inst.counts.len() != n {
        return Err("instance needs matching non-empty ids/rows/counts".into());
    }
    let rows: Vec<&[f64]> = inst.rows.iter().map(|r| &r[..]).collect();
    let msgs: Vec<crate::localtrain::ClientUpdateMsg> = inst
        .ids
        .iter()
        .zip(&inst.rows)
        .zip(&inst.counts)
        .map(|((&id, row), &count)| crate::localtrain::ClientUpdateMsg {
            client_id: id,
            delta_w: row.clone(),
            delta_prompt_v: Vec::new(),
            delta_prompt_l: Vec::new(),
            delta_prompt_v_in: Vec::new(),
            delta_prompt_l_in: Vec::new(),
            sample_count: count,
        })
        .collect();

    let (got, want, selection_matches) = match rule {
        AggRule::FedAvg => (
            robust_agg::fedavg_delta(&msgs),
            reference::fedavg(&inst.rows, &inst.counts),
            None,
        ),
        AggRule::Median => (
            robust_agg::coordinate_median(&rows),
            reference::coordinate_median(&inst.rows),
            None,
        ),
        AggRule::TrimmedMean => {
            if 2 * inst.trim_count >= n {
                return Err("trimmed mean needs n > 2 * trim_count".into());
            }
            (
                robust_agg::trimmed_mean(&rows, inst.trim_count),
                reference::trimmed_mean(&inst.rows, inst.trim_count),
                None,
            )
        }
        AggRule::MultiKrum => {
            if n < 2 * inst.krum_f + 3 {
                return Err("multi-krum needs n >= 2f + 3".into());
            }
            let trace = robust_agg::multi_krum_select(&inst.ids, &rows, inst.krum_f, None);
            let want_ids =
                reference::multi_krum_selected(&inst.ids, &inst.rows, inst.krum_f, None);
            let pick = |ids: &[u64]| -> Vec<Vec<f64>> {
                ids.iter()
                    .map(|id| inst.rows[inst.ids.iter().position(|x| x == id).unwrap()].clone())
                    .collect()
            };
            let got_mean = reference::fedavg(&pick(&trace.selected), &vec![1; trace.selected.len()]);
            let want_mean = reference::fedavg(&pick(&want_ids), &vec![1; want_ids.len()]);
            (got_mean, want_mean, Some(trace.selected == want_ids))
        }
        AggRule::Bulyan => {
            if n < 4 * inst.krum_f + 3 {
                return Err("bulyan needs n >= 4f + 3".into());
            }
            let (got, _) = robust_agg::bulyan(&inst.ids, &rows, inst.krum_f);
            (got, reference::bulyan(&inst.ids, &inst.rows, inst.krum_f), None)
        }
        AggRule::FlTrust => {
            let root = inst.root.as_ref().ok_or("fltrust instance needs a root row")?;
            (robust_agg::fltrust(&rows, root), reference::fltrust(&inst.rows, root), None)
        }
        AggRule::Pba | AggRule::PbaInput | AggRule::PbaParam => {
            if n <= 2 * inst.expected_malicious + 2 {
                return Err("pba needs n > 2 * m_e + 2".into());
            }
            let mut sim = vec![vec![0.0; n]; n];
            for i in 0..n {
                sim[i][i] = 1.0;
                for j in 0..i {
                    let s = robust_agg::pba_similarity(&inst.rows[i], &inst.rows[j]);
                    sim[i][j] = s;
                    sim[j][i] = s;
                }
            }
            let trace = robust_agg::pba_select(&inst.ids, &sim, inst.expected_malicious);
            let want_ids = reference::pba_selected(&inst.ids, &sim, inst.expected_malicious);
            let pick = |ids: &[u64]| -> (Vec<Vec<f64>>, Vec<usize>) {
                let idx: Vec<usize> =
                    ids.iter().map(|id| inst.ids.iter().position(|x| x == id).unwrap()).collect();
                (
                    idx.iter().map(|&i| inst.rows[i].clone()).collect(),
                    idx.iter().map(|&i| inst.counts[i]).collect(),
                )
            };
            let (grows, gcounts) = pick(&trace.selected);
            let (wrows, wcounts) = pick(&want_ids);
            (
                reference::fedavg(&grows, &gcounts),
                reference::fedavg(&wrows, &wcounts),
                Some(trace.selected == want_ids),
            )
        }
    };
    Ok(OracleReport { rule, max_abs_diff: max_abs_diff(&got, &want), selection_matches })
}

/// Load an [`OracleInstance`] from a JSON file.
pub fn load_instance(path: &Path) -> Result<OracleInstance, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Default output directory for a scenario: `runs/{scenario}`.
pub fn default_out_dir(scenario: &str) -> PathBuf {
    PathBuf::from("runs").join(scenario)
}
