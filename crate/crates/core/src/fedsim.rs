//! The experiment orchestrator: the federated round loop, client
//! sampling, malicious-client placement, evaluation scheduling, and
//! hash-chained round logging.
//!
//! Determinism contract: every random decision draws from a stream keyed
//! by `(master_seed, purpose, round, client)`, so results are bit-stable
//! across runs and across worker counts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    self, init_params, DecodeMode, Dims, ModelParams, SEG_PROMPT_L, SEG_PROMPT_L_IN,
    SEG_PROMPT_V, SEG_PROMPT_V_IN,
};
use crate::attack::{
    self, AttackKind, AttackPlan, EvalPoisonPlan, EvalPoisoner, Trigger,
};
use crate::envgen::{self, ClientData, EnvSpec, FederationData};
use crate::localtrain::{self, ClientUpdateMsg, LocalTrainConfig, LossSummary};
use crate::metrics::{self, MetricsAccumulator, MetricsReport, StepOutcome};
use crate::rng;
use crate::robust_agg::{aggregate, AggConfig, SelectionTrace};

/// Offset mixed into the master seed for evaluation episode generation,
/// keeping eval instructions disjoint from training ones.
const EVAL_SEED_OFFSET: u64 = 0x45564131;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] envgen::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Agent size knobs (the environment fixes the feature dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token embedding size d.
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 32, hidden_dim: 32 }
    }
}

/// Trigger shape and evaluation poisoning knobs. The trigger is sampled
/// from the master seed even in clean runs so that poisoned-split ASR is
/// always measurable (a clean model's ASR is the random baseline).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// p_m: Bernoulli rate of the blend mask.
    pub mask_rate: f64,
    /// p: per-step training insertion probability.
    pub insert_prob: f64,
    /// Per-step poisoning probability on evaluation splits.
    pub eval_poison_prob: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self { mask_rate: 0.3, insert_prob: 0.3, eval_poison_prob: 0.1 }
    }
}

/// Who attacks and how many clients they control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub malicious_count: usize,
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub scenario: String,
    pub n_clients: usize,
    pub n_unseen: usize,
    pub episodes_per_client: usize,
    pub eval_episodes_per_env: usize,
    /// Participation rate r; the sampled count is floor(r * n) unless
    /// `sample_size` pins it explicitly.
    pub participation_rate: f64,
    pub sample_size: Option<usize>,
    pub rounds: usize,
    pub eval_every: usize,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub local: LocalTrainConfig,
    pub agg: AggConfig,
    pub trigger: TriggerConfig,
    pub attack: Option<AttackConfig>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            scenario: "clean-fedavg".into(),
            n_clients: 20,
            n_unseen: 4,
            episodes_per_client: 6,
            eval_episodes_per_env: 3,
            participation_rate: 0.5,
            sample_size: None,
            rounds: 300,
            eval_every: 25,
            env: EnvSpec::default(),
            model: ModelConfig::default(),
            local: LocalTrainConfig::default(),
            agg: AggConfig::default(),
            trigger: TriggerConfig::default(),
            attack: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |path: &str, why: &str| {
            Err(SimError::InvalidConfig(format!("{path}: {why}")))
        };
        if self.n_clients < 2 {
            return bad("n_clients", "need at least 2 training clients");
        }
        if self.n_unseen < 1 {
            return bad("n_unseen", "need at least 1 unseen environment");
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return bad("participation_rate", "must be in (0, 1]");
        }
        if self.rounds < 1 {
            return bad("rounds", "must be >= 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every", "must be >= 1");
        }
        if self.episodes_per_client < 1 || self.eval_episodes_per_env < 1 {
            return bad("episodes_per_client", "episode counts must be >= 1");
        }
        if let Some(k) = self.sample_size {
            if k < 1 || k > self.n_clients {
                return bad("sample_size", "must be in [1, n_clients]");
            }
        }
        if let Some(a) = &self.attack {
            if a.malicious_count > self.n_clients {
                return bad("attack.malicious_count", "cannot exceed n_clients");
            }
        }
        self.local.validate().map_err(|e| SimError::InvalidConfig(format!("local.{e}")))?;
        self.env.validate().map_err(|e| SimError::InvalidConfig(format!("env: {e}")))?;
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab: envgen::VOCAB_SIZE,
            d_u: self.model.embed_dim,
            l_max: envgen::MAX_INSTRUCTION_LEN,
            feature_dim: self.env.feature_dim,
            d_h: self.model.hidden_dim,
        }
    }

    /// Sampled clients per round.
    pub fn sample_count(&self) -> usize {
        self.sample_size
            .unwrap_or((self.participation_rate * self.n_clients as f64).floor() as usize)
            .clamp(1, self.n_clients)
    }
}

/// Uniform sample of `k` client indices out of `n`, without replacement,
/// returned sorted.
pub fn sample_clients(n: usize, k: usize, rng: &mut rng::Stream) -> Vec<u64> {
    assert!(k >= 1 && k <= n);
    let mut ids: Vec<u64> = (0..n as u64).collect();
    for i in 0..k {
        let j = rand::Rng::gen_range(rng, i..n);
        ids.swap(i, j);
    }
    let mut picked = ids[..k].to_vec();
    picked.sort_unstable();
    picked
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_f64s(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Per-client entries in the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundEntry {
    pub client_id: u64,
    pub mean_il: f64,
    pub mean_rl: f64,
    /// Digest over the client's uploaded deltas.
    pub update_digest: String,
}

/// One communication round, hash-chained to its predecessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub sampled: Vec<u64>,
    pub clients: Vec<ClientRoundEntry>,
    /// Clients that failed local training and were dropped this round.
    pub aborted: Vec<u64>,
    pub selection: Option<SelectionTrace>,
    pub fell_back_to_fedavg: bool,
    pub global_weight_digest: String,
    pub prev_digest: String,
    #[serde(default)]
    pub digest: String,
}

impl RoundLog {
    /// Digest of the log body with the `digest` field blanked.
    pub fn compute_digest(&self) -> String {
        let mut body = self.clone();
        body.digest = String::new();
        digest_hex(serde_json::to_string(&body).expect("round log serializes").as_bytes())
    }

    fn seal(&mut self) {
        self.digest = self.compute_digest();
    }
}

/// Check the hash chain of a full log sequence against a genesis digest.
pub fn verify_chain(genesis: &str, logs: &[RoundLog]) -> Result<(), String> {
    let mut prev = genesis.to_string();
    for log in logs {
        if log.prev_digest != prev {
            return Err(format!("round {}: broken chain link", log.round));
        }
        if log.compute_digest() != log.digest {
            return Err(format!("round {}: digest mismatch", log.round));
        }
        prev = log.digest.clone();
    }
    Ok(())
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub split: String,
    pub poisoned: bool,
    pub report: MetricsReport,
}

/// The manifest written alongside every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub seed: u64,
    pub config: FedConfig,
    pub trigger_mask_hex: String,
    pub trigger_feature_hex: String,
    pub prompt_init_digest: String,
    pub malicious_clients: Vec<u64>,
    pub genesis_digest: String,
    pub final_weight_digest: String,
}

/// A finished experiment.
#[derive(Debug)]
pub struct ExperimentResult {
    pub manifest: Manifest,
    pub final_params: ModelParams,
    pub round_logs: Vec<RoundLog>,
    pub metrics: Vec<MetricsRow>,
}

struct EvalSplit {
    name: &'static str,
    envs: Vec<ClientData>,
    poison_plans: Vec<Vec<EvalPoisonPlan>>,
}

fn build_eval_split(
    name: &'static str,
    env_sources: &[ClientData],
    cfg: &FedConfig,
    seed: u64,
) -> Result<EvalSplit, SimError> {
    let mut envs = Vec::with_capacity(env_sources.len());
    let mut poison_plans = Vec::with_capacity(env_sources.len());
    for c in env_sources {
        let episodes = envgen::generate_episodes(
            &c.env,
            cfg.eval_episodes_per_env,
            seed.wrapping_add(EVAL_SEED_OFFSET),
            &cfg.env,
        )?;
        poison_plans.push(attack::poison_eval_set(
            &episodes,
            cfg.trigger.eval_poison_prob,
            seed,
        ));
        envs.push(ClientData { env: c.env.clone(), episodes });
    }
    Ok(EvalSplit { name, envs, poison_plans })
}

fn evaluate_split(
    params: &ModelParams,
    split: &EvalSplit,
    trigger: &Trigger,
    round: usize,
) -> Vec<MetricsRow> {
    let mut clean = MetricsAccumulator::default();
    let mut poisoned = MetricsAccumulator::default();
    for (c, plans) in split.envs.iter().zip(&split.poison_plans) {
        for (episode, plan) in c.episodes.iter().zip(plans) {
            let budget = attack::eval_budget(episode);
            let r = agent::run_episode(
                params,
                &c.env,
                episode,
                DecodeMode::Greedy,
                true,
                None,
                None,
                budget,
            );
            clean.add_episode(&metrics::path_metrics(
                &r.path,
                &episode.reference_path,
                &c.env,
            ));

            let mut poisoner = EvalPoisoner { plan, trigger };
            let r = agent::run_episode(
                params,
                &c.env,
                episode,
                DecodeMode::Greedy,
                true,
                None,
                Some(&mut poisoner),
                budget,
            );
            poisoned.add_episode(&metrics::path_metrics(
                &r.path,
                &episode.reference_path,
                &c.env,
            ));
            let steps: Vec<StepOutcome> = r
                .actions
                .iter()
                .zip(&r.trigger_slots)
                .map(|(&chosen, &trigger_slot)| StepOutcome { chosen, trigger_slot })
                .collect();
            poisoned.add_steps(&steps);
        }
    }
    vec![
        MetricsRow {
            round,
            split: split.name.to_string(),
            poisoned: false,
            report: clean.report(),
        },
        MetricsRow {
            round,
            split: split.name.to_string(),
            poisoned: true,
            report: poisoned.report(),
        },
    ]
}

/// One communication round: sample, broadcast, local training (parallel,
/// deterministically keyed), aggregate, log.
#[allow(clippy::too_many_arguments)]
fn run_round(
    params: &mut ModelParams,
    fed: &FederationData,
    cfg: &FedConfig,
    plan: Option<&AttackPlan>,
    seed: u64,
    round: usize,
    prev_digest: &str,
) -> RoundLog {
    let mut sample_rng = rng::stream(seed, "sample", round as u64, 0);
    let sampled = sample_clients(cfg.n_clients, cfg.sample_count(), &mut sample_rng);

    let results: Vec<(u64, Result<(ClientUpdateMsg, LossSummary), localtrain::TrainError>)> =
        sampled
            .par_iter()
            .map(|&cid| {
                let data = &fed.train[cid as usize];
                let client_plan =
                    plan.filter(|p| p.malicious_client_ids.contains(&cid));
                let mut train_rng = rng::stream(seed, "client-train", round as u64, cid);
                let mut poison_rng = rng::stream(seed, "client-poison", round as u64, cid);
                (
                    cid,
                    localtrain::client_update(
                        params,
                        data,
                        &cfg.local,
                        client_plan,
                        &mut train_rng,
                        &mut poison_rng,
                    ),
                )
            })
            .collect();

    let mut updates = Vec::new();
    let mut clients = Vec::new();
    let mut aborted = Vec::new();
    for (cid, res) in results {
        match res {
            Ok((msg, losses)) => {
                clients.push(ClientRoundEntry {
                    client_id: cid,
                    mean_il: losses.mean_il,
                    mean_rl: losses.mean_rl,
                    update_digest: digest_f64s(&msg.delta_w),
                });
                updates.push(msg);
            }
            Err(e) => {
                log::warn!("round {round}: {e}");
                aborted.push(cid);
            }
        }
    }

    let (selection, fell_back, global_digest) = if updates.is_empty() {
        log::warn!("round {round}: no surviving client updates, skipping aggregation");
        (None, false, digest_f64s(&params.weight_flat()))
    } else {
        let root_update = if cfg.agg.rule.needs_root_update() {
            let mut train_rng = rng::stream(seed, "root-train", round as u64, 0);
            let mut poison_rng = rng::stream(seed, "root-poison", round as u64, 0);
            Some(
                localtrain::client_update(
                    params,
                    &fed.root,
                    &cfg.local,
                    None,
                    &mut train_rng,
                    &mut poison_rng,
                )
                .expect("root training on clean data")
                .0,
            )
        } else {
            None
        };
        let outcome = aggregate(&updates, &cfg.agg, &params.dims, root_update.as_ref());
        params.add_weight_delta(&outcome.delta_w, cfg.agg.server_learning_rate);
        (
            outcome.selection,
            outcome.fell_back_to_fedavg,
            digest_f64s(&params.weight_flat()),
        )
    };

    let mut log = RoundLog {
        round,
        sampled,
        clients,
        aborted,
        selection,
        fell_back_to_fedavg: fell_back,
        global_weight_digest: global_digest,
        prev_digest: prev_digest.to_string(),
        digest: String::new(),
    };
    log.seal();
    log
}

/// Run a full experiment for one seed.
pub fn run_experiment(cfg: &FedConfig, seed: u64) -> Result<ExperimentResult, SimError> {
    cfg.validate()?;
    let dims = cfg.dims();
    let fed = envgen::build_federation(
        seed,
        cfg.n_clients,
        cfg.n_unseen,
        &cfg.env,
        cfg.episodes_per_client,
    )?;

    // Global model: seeded weights, fixed nonzero prompts (never updated
    // by aggregation, re-broadcast as-is every round).
    let mut params = init_params(seed, dims);
    let mut prompt_rng = rng::stream(seed, "prompt-init", 0, 0);
    for seg in [SEG_PROMPT_V, SEG_PROMPT_L, SEG_PROMPT_V_IN, SEG_PROMPT_L_IN] {
        for x in params.seg_mut(seg) {
            *x = rand::Rng::gen_range(&mut prompt_rng, -0.5..=0.5);
        }
    }
    let prompt_init_digest = {
        let mut flat = Vec::new();
        for seg in [SEG_PROMPT_V, SEG_PROMPT_L, SEG_PROMPT_V_IN, SEG_PROMPT_L_IN] {
            flat.extend_from_slice(params.seg(seg));
        }
        digest_f64s(&flat)
    };

    let trigger = attack::sample_trigger(
        seed,
        cfg.env.feature_dim,
        cfg.trigger.mask_rate,
        cfg.trigger.insert_prob,
    );
    let malicious: BTreeSet<u64> = match &cfg.attack {
        Some(a) if a.malicious_count > 0 => {
            let mut rng = rng::stream(seed, "malicious", 0, 0);
            sample_clients(cfg.n_clients, a.malicious_count, &mut rng)
                .into_iter()
                .collect()
        }
        _ => BTreeSet::new(),
    };
    let plan = cfg.attack.map(|a| AttackPlan {
        kind: a.kind,
        trigger: trigger.clone(),
        malicious_client_ids: malicious.clone(),
        badnets_pattern: 1.0,
    });

    let seen = build_eval_split("seen", &fed.train, cfg, seed)?;
    let unseen = build_eval_split("unseen", &fed.unseen, cfg, seed)?;

    let genesis = digest_hex(format!("fedvln:{}:{}", cfg.scenario, seed).as_bytes());
    let mut round_logs = Vec::with_capacity(cfg.rounds);
    let mut rows = Vec::new();
    let mut prev = genesis.clone();
    for round in 1..=cfg.rounds {
        let log = run_round(&mut params, &fed, cfg, plan.as_ref(), seed, round, &prev);
        prev = log.digest.clone();
        round_logs.push(log);
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            rows.extend(evaluate_split(&params, &seen, &trigger, round));
            rows.extend(evaluate_split(&params, &unseen, &trigger, round));
        }
    }

    let manifest = Manifest {
        format: "fedvln-manifest".into(),
        version: 1,
        scenario: cfg.scenario.clone(),
        seed,
        config: cfg.clone(),
        trigger_mask_hex: trigger.mask_hex(),
        trigger_feature_hex: trigger.feature_hex(),
        prompt_init_digest,
        malicious_clients: malicious.into_iter().collect(),
        genesis_digest: genesis,
        final_weight_digest: digest_f64s(&params.weight_flat()),
    };

    Ok(ExperimentResult { manifest, final_params: params, round_logs, metrics: rows })
}

/// Write a finished run into `dir`: manifest.json, rounds.jsonl,
/// metrics.csv, and the final model checkpoint.
pub fn write_run_dir(dir: &Path, result: &ExperimentResult) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&result.manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), manifest)?;

    let mut rounds = std::io::BufWriter::new(std::fs::File::create(dir.join("rounds.jsonl"))?);
    for log in &result.round_logs {
        serde_json::to_writer(&mut rounds, log).map_err(std::io::Error::other)?;
        rounds.write_all(b"\n")?;
    }
    rounds.flush()?;

    let mut csv = String::from(metrics::CSV_HEADER);
    csv.push('\n');
    for row in &result.metrics {
        csv.push_str(&metrics::csv_row(row.round, &row.split, row.poisoned, &row.report));
        csv.push('\n');
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;

    let ckpt = std::fs::File::create(dir.join("final.ckpt"))?;
    result.final_params.write_checkpoint(std::io::BufWriter::new(ckpt))?;
    Ok(())
}

/// Read the metrics rows back from a run directory.
pub fn read_metrics_csv(dir: &Path) -> Result<Vec<MetricsRow>, SimError> {
    let text = std::fs::read_to_string(dir.join("metrics.csv"))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != metrics::CSV_HEADER {
                return Err(SimError::InvalidConfig(format!(
                    "unexpected metrics header: {line}"
                )));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(SimError::InvalidConfig(format!("bad metrics row: {line}")));
        }
        let parse = |s: &str| -> f64 { s.parse().unwrap_or(f64::NAN) };
        rows.push(MetricsRow {
            round: parts[0].parse().map_err(|_| {
                SimError::InvalidConfig(format!("bad round in row: {line}"))
            })?,
            split: parts[1].to_string(),
            poisoned: parts[2] == "1",
            report: MetricsReport {
                sr: parse(parts[3]),
                spl: parse(parts[4]),
                osr: parse(parts[5]),
                ne: parse(parts[6]),
                cls: parse(parts[7]),
                ndtw: parse(parts[8]),
                asr: if parts[9].is_empty() { None } else { Some(parse(parts[9])) },
                episode_count: parts[10].parse().unwrap_or(0),
                trigger_step_count: parts[11].parse().unwrap_or(0),
            },
        });
    }
    Ok(rows)
}

/// Read the round logs back from a run directory.
pub fn read_round_logs(dir: &Path) -> Result<Vec<RoundLog>, SimError> {
    let text = std::fs::read_to_string(dir.join("rounds.jsonl"))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| SimError::InvalidConfig(format!("bad round log line: {e}")))
        })
        .collect()
}

/// Read a run manifest.
pub fn read_manifest(dir: &Path) -> Result<Manifest, SimError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text)
        .map_err(|e| SimError::InvalidConfig(format!("bad manifest: {e}")))
}
