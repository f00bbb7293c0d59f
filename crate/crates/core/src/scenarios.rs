//! Named scenario templates: clean/attacked crossed with every aggregation
//! rule, at a fast smoke scale and a paper-shape scale. Each template is
//! mirrored by a JSON config file under `configs/`; the name-to-template
//! mapping is 1:1 and covered by a test.

use crate::attack::AttackKind;
use crate::envgen::EnvSpec;
use crate::fedsim::{AttackConfig, FedConfig, ModelConfig, TriggerConfig};
use crate::localtrain::LocalTrainConfig;
use crate::robust_agg::{AggConfig, AggRule};

/// Rule name fragments in scenario-name order.
pub const RULE_NAMES: [(&str, AggRule); 9] = [
    ("fedavg", AggRule::FedAvg),
    ("median", AggRule::Median),
    ("trimmedmean", AggRule::TrimmedMean),
    ("multikrum", AggRule::MultiKrum),
    ("bulyan", AggRule::Bulyan),
    ("fltrust", AggRule::FlTrust),
    ("pba", AggRule::Pba),
    ("pba-input", AggRule::PbaInput),
    ("pba-param", AggRule::PbaParam),
];

/// All shipped scenario names: `{clean|naw}-{rule}-{smoke|paper}`.
pub fn names() -> Vec<String> {
    let mut out = Vec::new();
    for scale in ["smoke", "paper"] {
        for prefix in ["clean", "naw"] {
            for (rule, _) in RULE_NAMES {
                out.push(format!("{prefix}-{rule}-{scale}"));
            }
        }
    }
    out
}

/// Six clients, forty rounds: a seconds-long pipeline check.
fn smoke(name: &str, rule: AggRule, attacked: bool) -> FedConfig {
    FedConfig {
        scenario: name.to_string(),
        n_clients: 6,
        n_unseen: 2,
        episodes_per_client: 4,
        eval_episodes_per_env: 10,
        participation_rate: 0.5,
        sample_size: Some(4),
        rounds: 40,
        eval_every: 10,
        env: EnvSpec {
            grid_w: 4,
            grid_h: 4,
            edge_keep_prob: 0.7,
            min_hops: 2,
            max_hops: 4,
            ..EnvSpec::default()
        },
        model: ModelConfig { embed_dim: 16, hidden_dim: 16 },
        local: LocalTrainConfig::default(),
        agg: AggConfig { rule, expected_malicious: 0, trim_count: 1, krum_f: 0, ..AggConfig::default() },
        trigger: TriggerConfig::default(),
        attack: attacked.then_some(AttackConfig { kind: AttackKind::Naw, malicious_count: 1 }),
    }
}

/// Sixty-one clients sampling twelve per round for three hundred rounds,
/// with five malicious clients when attacked.
fn paper_shape(name: &str, rule: AggRule, attacked: bool) -> FedConfig {
    FedConfig {
        scenario: name.to_string(),
        n_clients: 61,
        n_unseen: 11,
        episodes_per_client: 6,
        eval_episodes_per_env: 20,
        participation_rate: 0.2,
        sample_size: Some(12),
        rounds: 300,
        eval_every: 25,
        env: EnvSpec::default(),
        model: ModelConfig::default(),
        local: LocalTrainConfig::default(),
        agg: AggConfig { rule, expected_malicious: 1, trim_count: 1, krum_f: 1, ..AggConfig::default() },
        trigger: TriggerConfig::default(),
        attack: attacked.then_some(AttackConfig { kind: AttackKind::Naw, malicious_count: 5 }),
    }
}

/// Resolve a scenario name to its config template.
pub fn template(name: &str) -> Option<FedConfig> {
    let rest = name;
    let (attacked, rest) = if let Some(r) = rest.strip_prefix("clean-") {
        (false, r)
    } else if let Some(r) = rest.strip_prefix("naw-") {
        (true, r)
    } else {
        return None;
    };
    let (rule_name, scale) = rest.rsplit_once('-')?;
    let (_, rule) = RULE_NAMES.iter().find(|(n, _)| *n == rule_name)?;
    match scale {
        "smoke" => Some(smoke(name, *rule, attacked)),
        "paper" => Some(paper_shape(name, *rule, attacked)),
        _ => None,
    }
}

#[cfg(test)]
mod tests;
