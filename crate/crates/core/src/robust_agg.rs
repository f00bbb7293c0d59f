//! Server-side aggregation rules: FedAvg, coordinate Median, Trimmed
//! Mean, Multi-Krum, Bulyan, FLTrust, and prompt-based aggregation (PBA)
//! with its input-prompt and attention-parameter ablation variants.
//!
//! Every rule is a pure function from the round's uploads to a weight
//! delta; the server applies `w += eta * delta`. Global prompts are never
//! aggregated: the same initial prompt pair is re-broadcast every round.

use serde::{Deserialize, Serialize};

use crate::agent::{Dims, SEG_ATTN_W, SEG_ATTN_WU};
use crate::localtrain::ClientUpdateMsg;

pub mod reference;

/// Which rule the server runs each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggRule {
    FedAvg,
    Median,
    TrimmedMean,
    MultiKrum,
    Bulyan,
    FlTrust,
    Pba,
    PbaInput,
    PbaParam,
}

impl AggRule {
    pub fn needs_root_update(self) -> bool {
        matches!(self, AggRule::FlTrust)
    }

    pub fn pba_source(self) -> Option<PbaSource> {
        match self {
            AggRule::Pba => Some(PbaSource::Prompt),
            AggRule::PbaInput => Some(PbaSource::InputPrompt),
            AggRule::PbaParam => Some(PbaSource::AttnParams),
            _ => None,
        }
    }
}

/// Rule-specific knobs, all in one place so scenario configs stay flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggConfig {
    pub rule: AggRule,
    /// Server learning rate eta applied to the aggregated delta.
    pub server_learning_rate: f64,
    /// Expected number of malicious clients m_e (PBA selection-loop exit).
    pub expected_malicious: usize,
    /// Trim count m for TrimmedMean.
    pub trim_count: usize,
    /// Byzantine tolerance f for Multi-Krum and Bulyan.
    pub krum_f: usize,
}

impl Default for AggConfig {
    fn default() -> Self {
        Self {
            rule: AggRule::FedAvg,
            server_learning_rate: 2.0,
            expected_malicious: 2,
            trim_count: 1,
            krum_f: 1,
        }
    }
}

/// What the similarity for PBA is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbaSource {
    /// Attention-position prompt deltas `[dp_V ; dp_L]`.
    Prompt,
    /// Input-position prompt deltas `[dp_V_in ; dp_L_in]`.
    InputPrompt,
    /// Attention-layer weight deltas `[dW_U ; dW]`.
    AttnParams,
}

/// Per-round record of a selection rule's decisions, emitted into the
/// round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Client ids in the order the matrix rows use.
    pub client_ids: Vec<u64>,
    /// Pairwise similarity (PBA) or squared-distance (Multi-Krum) matrix.
    pub pairwise: Vec<Vec<f64>>,
    /// Scores per loop iteration, `(client_id, score)` over the remaining
    /// set at that iteration.
    pub scores: Vec<Vec<(u64, f64)>>,
    /// Selected client ids, in selection order.
    pub selected: Vec<u64>,
    /// Remaining (excluded) client ids at loop exit.
    pub remaining: Vec<u64>,
}

/// The outcome of one aggregation call: the weight delta to apply (before
/// the eta scaling) plus bookkeeping for the round log.
#[derive(Debug, Clone, PartialEq)]
pub struct AggOutcome {
    pub delta_w: Vec<f64>,
    pub selection: Option<SelectionTrace>,
    /// True when a degenerate federation forced the FedAvg fallback.
    pub fell_back_to_fedavg: bool,
}

// ---------------------------------------------------------------------------
// Elementwise rules
// ---------------------------------------------------------------------------

/// Sample-count-weighted mean of the clients' weight deltas.
pub fn fedavg_delta(updates: &[ClientUpdateMsg]) -> Vec<f64> {
    assert!(!updates.is_empty());
    weighted_mean(updates.iter().map(|u| (&u.delta_w[..], u.sample_count as f64)))
}

fn weighted_mean<'a>(rows: impl Iterator<Item = (&'a [f64], f64)> + Clone) -> Vec<f64> {
    let total: f64 = rows.clone().map(|(_, n)| n).sum();
    let dim = rows.clone().next().expect("at least one row").0.len();
    let mut out = vec![0.0; dim];
    for (row, n) in rows {
        assert_eq!(row.len(), dim, "delta layouts must match");
        let w = n / total;
        for (o, &x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

/// Per-coordinate median; an even count takes the mean of the two middle
/// order statistics.
pub fn coordinate_median(rows: &[&[f64]]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let dim = rows[0].len();
    let mut out = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(rows.len());
    for c in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|r| r[c]));
        column.sort_by(f64::total_cmp);
        let n = column.len();
        out.push(if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        });
    }
    out
}

/// Per coordinate, drop the `m` largest and `m` smallest values and
/// average the rest.
pub fn trimmed_mean(rows: &[&[f64]], m: usize) -> Vec<f64> {
    assert!(2 * m < rows.len(), "trim count must leave at least one value");
    let dim = rows[0].len();
    let mut out = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(rows.len());
    for c in 0..dim {
        column.clear();
        column.extend(rows.iter().map(|r| r[c]));
        column.sort_by(f64::total_cmp);
        let kept = &column[m..column.len() - m];
        out.push(kept.iter().sum::<f64>() / kept.len() as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// Multi-Krum and Bulyan
// ---------------------------------------------------------------------------

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Iterative Multi-Krum selection. At each iteration every remaining
/// update is scored by the sum of its `|S_rem| - f - 2` smallest squared
/// distances to the other remaining updates; the minimizer (lowest id on
/// ties) moves to the selection. Runs until `select_count` picks are made
/// or, when unset, until `|S_rem| <= 2f + 2`.
pub fn multi_krum_select(
    ids: &[u64],
    rows: &[&[f64]],
    f: usize,
    select_count: Option<usize>,
) -> SelectionTrace {
    let n = ids.len();
    assert_eq!(n, rows.len());
    match select_count {
        None => assert!(n >= 2 * f + 3, "multi-krum needs at least 2f+3 clients"),
        Some(t) => assert!(t <= n, "cannot select more clients than exist"),
    }

    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(rows[i], rows[j]);
            pairwise[i][j] = d;
            pairwise[j][i] = d;
        }
    }

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::new();
    let mut scores = Vec::new();
    // The 2f+2 stopping rule only binds when no explicit count is given.
    let keep_going = |sel: usize, rem: usize| match select_count {
        Some(t) => sel < t && rem > 0,
        None => rem > 2 * f + 2,
    };
    while keep_going(selected.len(), remaining.len()) {
        let closest = remaining.len().saturating_sub(f + 2).max(1);
        let mut iter_scores = Vec::with_capacity(remaining.len());
        for &i in &remaining {
            let mut dists: Vec<f64> =
                remaining.iter().filter(|&&j| j != i).map(|&j| pairwise[i][j]).collect();
            dists.sort_by(f64::total_cmp);
            let score: f64 = dists.iter().take(closest).sum();
            iter_scores.push((ids[i], score));
        }
        let mut best = 0;
        for k in 1..remaining.len() {
            let (bid, bs) = iter_scores[best];
            let (kid, ks) = iter_scores[k];
            if ks < bs || (ks == bs && kid < bid) {
                best = k;
            }
        }
        scores.push(iter_scores);
        selected.push(remaining.remove(best));
    }

    SelectionTrace {
        client_ids: ids.to_vec(),
        pairwise,
        scores,
        selected: selected.iter().map(|&i| ids[i]).collect(),
        remaining: remaining.iter().map(|&i| ids[i]).collect(),
    }
}

/// Bulyan: Multi-Krum picks `2f + 3` updates, then a coordinate-wise
/// trimmed mean with trim `f` runs over the selection.
pub fn bulyan(ids: &[u64], rows: &[&[f64]], f: usize) -> (Vec<f64>, SelectionTrace) {
    assert!(ids.len() >= 4 * f + 3, "bulyan needs at least 4f+3 clients");
    let trace = multi_krum_select(ids, rows, f, Some(2 * f + 3));
    let picked: Vec<&[f64]> = trace
        .selected
        .iter()
        .map(|id| rows[ids.iter().position(|x| x == id).unwrap()])
        .collect();
    (trimmed_mean(&picked, f), trace)
}

// ---------------------------------------------------------------------------
// FLTrust
// ---------------------------------------------------------------------------

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// FLTrust: each client is trusted by its clipped cosine similarity to
/// the server's own root update, rescaled to the root's norm, and the
/// aggregate is the trust-weighted mean. All-zero trust yields a zero
/// delta.
pub fn fltrust(rows: &[&[f64]], root: &[f64]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let root_norm = l2_norm(root);
    let mut total_trust = 0.0;
    let mut out = vec![0.0; root.len()];
    for row in rows {
        let trust = cosine(row, root).max(0.0);
        total_trust += trust;
        let row_norm = l2_norm(row);
        if trust == 0.0 || row_norm == 0.0 {
            continue;
        }
        let scale = trust * root_norm / row_norm;
        for (o, &x) in out.iter_mut().zip(*row) {
            *o += scale * x;
        }
    }
    if total_trust == 0.0 {
        return vec![0.0; root.len()];
    }
    for o in &mut out {
        *o /= total_trust;
    }
    out
}

// ---------------------------------------------------------------------------
// PBA
// ---------------------------------------------------------------------------

/// Elementwise sign with Sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The vector a PBA variant compares across clients (before Sign).
pub fn pba_vector(msg: &ClientUpdateMsg, source: PbaSource, dims: &Dims) -> Vec<f64> {
    match source {
        PbaSource::Prompt => {
            let mut v = msg.delta_prompt_v.clone();
            v.extend_from_slice(&msg.delta_prompt_l);
            v
        }
        PbaSource::InputPrompt => {
            let mut v = msg.delta_prompt_v_in.clone();
            v.extend_from_slice(&msg.delta_prompt_l_in);
            v
        }
        PbaSource::AttnParams => {
            let mut v = msg.delta_w[dims.weight_segment_range(SEG_ATTN_WU)].to_vec();
            v.extend_from_slice(&msg.delta_w[dims.weight_segment_range(SEG_ATTN_W)]);
            v
        }
    }
}

/// Sign-cosine similarity in [-1, 1]; an all-zero sign vector has
/// similarity 0 with everything.
pub fn pba_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sa: Vec<f64> = a.iter().map(|&x| sign(x)).collect();
    let sb: Vec<f64> = b.iter().map(|&x| sign(x)).collect();
    cosine(&sa, &sb)
}

/// PBA's selection loop over a precomputed similarity matrix. While
/// `|S_rem| > 2m_e + 2`, each remaining client is scored by the sum of
/// its `|S_rem| - m_e - 1` largest similarities within the remaining set,
/// and the argmax (lowest id on ties) moves to the selection.
pub fn pba_select(ids: &[u64], similarity: &[Vec<f64>], m_e: usize) -> SelectionTrace {
    let n = ids.len();
    assert!(n > 2 * m_e + 2, "pba needs more than 2*m_e + 2 clients");

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::new();
    let mut scores = Vec::new();
    while remaining.len() > 2 * m_e + 2 {
        let take = remaining.len() - m_e - 1;
        let mut iter_scores = Vec::with_capacity(remaining.len());
        for &i in &remaining {
            let mut sims: Vec<f64> =
                remaining.iter().filter(|&&j| j != i).map(|&j| similarity[i][j]).collect();
            sims.sort_by(|a, b| f64::total_cmp(b, a));
            let score: f64 = sims.iter().take(take).sum();
            iter_scores.push((ids[i], score));
        }
        let mut best = 0;
        for k in 1..remaining.len() {
            let (bid, bs) = iter_scores[best];
            let (kid, ks) = iter_scores[k];
            if ks > bs || (ks == bs && kid < bid) {
                best = k;
            }
        }
        scores.push(iter_scores);
        selected.push(remaining.remove(best));
    }

    SelectionTrace {
        client_ids: ids.to_vec(),
        pairwise: similarity.to_vec(),
        scores,
        selected: selected.iter().map(|&i| ids[i]).collect(),
        remaining: remaining.iter().map(|&i| ids[i]).collect(),
    }
}

/// Full PBA pass: similarity matrix from the chosen source, selection,
/// then a sample-count-weighted mean over the selected clients only.
pub fn pba_aggregate(
    updates: &[ClientUpdateMsg],
    source: PbaSource,
    m_e: usize,
    dims: &Dims,
) -> (Vec<f64>, SelectionTrace) {
    let ids: Vec<u64> = updates.iter().map(|u| u.client_id).collect();
    let signs: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| pba_vector(u, source, dims).iter().map(|&x| sign(x)).collect())
        .collect();
    let n = updates.len();
    let mut similarity = vec![vec![0.0; n]; n];
    for i in 0..n {
        similarity[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine(&signs[i], &signs[j]);
            similarity[i][j] = s;
            similarity[j][i] = s;
        }
    }
    let trace = pba_select(&ids, &similarity, m_e);
    let picked: Vec<&ClientUpdateMsg> = trace
        .selected
        .iter()
        .map(|id| &updates[ids.iter().position(|x| x == id).unwrap()])
        .collect();
    let delta =
        weighted_mean(picked.iter().map(|u| (&u.delta_w[..], u.sample_count as f64)));
    (delta, trace)
}

// ---------------------------------------------------------------------------
// Dispatcher
// ---------------------------------------------------------------------------

/// Run the configured rule over the round's uploads. `root_update` must
/// be present for FLTrust. The returned delta is unscaled; the caller
/// applies the server learning rate.
pub fn aggregate(
    updates: &[ClientUpdateMsg],
    cfg: &AggConfig,
    dims: &Dims,
    root_update: Option<&ClientUpdateMsg>,
) -> AggOutcome {
    assert!(!updates.is_empty());
    let ids: Vec<u64> = updates.iter().map(|u| u.client_id).collect();
    let rows: Vec<&[f64]> = updates.iter().map(|u| &u.delta_w[..]).collect();

    let fallback = |reason: &str| {
        log::warn!("{reason}; falling back to fedavg");
        AggOutcome { delta_w: fedavg_delta(updates), selection: None, fell_back_to_fedavg: true }
    };

    match cfg.rule {
        AggRule::FedAvg => AggOutcome {
            delta_w: fedavg_delta(updates),
            selection: None,
            fell_back_to_fedavg: false,
        },
        AggRule::Median => AggOutcome {
            delta_w: coordinate_median(&rows),
            selection: None,
            fell_back_to_fedavg: false,
        },
        AggRule::TrimmedMean => {
            if 2 * cfg.trim_count >= rows.len() {
                return fallback("trim count too large for this round");
            }
            AggOutcome {
                delta_w: trimmed_mean(&rows, cfg.trim_count),
                selection: None,
                fell_back_to_fedavg: false,
            }
        }
        AggRule::MultiKrum => {
            if rows.len() < 2 * cfg.krum_f + 3 {
                return fallback("too few clients for multi-krum");
            }
            let trace = multi_krum_select(&ids, &rows, cfg.krum_f, None);
            let picked: Vec<&ClientUpdateMsg> = trace
                .selected
                .iter()
                .map(|id| &updates[ids.iter().position(|x| x == id).unwrap()])
                .collect();
            let delta =
                weighted_mean(picked.iter().map(|u| (&u.delta_w[..], u.sample_count as f64)));
            AggOutcome { delta_w: delta, selection: Some(trace), fell_back_to_fedavg: false }
        }
        AggRule::Bulyan => {
            if rows.len() < 4 * cfg.krum_f + 3 {
                return fallback("too few clients for bulyan");
            }
            let (delta, trace) = bulyan(&ids, &rows, cfg.krum_f);
            AggOutcome { delta_w: delta, selection: Some(trace), fell_back_to_fedavg: false }
        }
        AggRule::FlTrust => {
            let root = root_update.expect("fltrust needs a root update");
            AggOutcome {
                delta_w: fltrust(&rows, &root.delta_w),
                selection: None,
                fell_back_to_fedavg: false,
            }
        }
        AggRule::Pba | AggRule::PbaInput | AggRule::PbaParam => {
            if updates.len() <= 2 * cfg.expected_malicious + 2 {
                return fallback("too few clients for pba selection");
            }
            let source = cfg.rule.pba_source().unwrap();
            let (delta, trace) = pba_aggregate(updates, source, cfg.expected_malicious, dims);
            AggOutcome { delta_w: delta, selection: Some(trace), fell_back_to_fedavg: false }
        }
    }
}
