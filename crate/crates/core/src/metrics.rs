//! Navigation metrics (SR, SPL, OSR, NE, CLS, nDTW) over realized paths,
//! plus the attack success rate over annotated trigger steps.
//!
//! All distances are graph-hop counts: the success radius is 1 hop and
//! the nDTW/CLS decay scale is 3 hops, the desk-scale analogues of the
//! usual 3 m conventions.

use serde::{Deserialize, Serialize};

use crate::envgen::EnvironmentGraph;

/// An episode ends successfully within this many hops of the goal.
pub const SUCCESS_RADIUS: u32 = 1;
/// Decay scale (hops) shared by nDTW and the CLS coverage term.
pub const DISTANCE_SCALE: f64 = 3.0;

/// Per-episode navigation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathMetrics {
    pub sr: f64,
    pub spl: f64,
    pub osr: f64,
    /// Hop distance from the final viewpoint to the goal.
    pub ne: f64,
    pub cls: f64,
    pub ndtw: f64,
}

/// Dynamic-time-warping cost between two viewpoint sequences under a
/// hop-distance ground cost.
pub fn dtw_cost(realized: &[u32], reference: &[u32], dist: &dyn Fn(u32, u32) -> f64) -> f64 {
    let (n, m) = (realized.len(), reference.len());
    assert!(n > 0 && m > 0);
    let mut table = vec![vec![f64::INFINITY; m + 1]; n + 1];
    table[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let c = dist(realized[i - 1], reference[j - 1]);
            let best = table[i - 1][j].min(table[i][j - 1]).min(table[i - 1][j - 1]);
            table[i][j] = c + best;
        }
    }
    table[n][m]
}

/// All six navigation metrics for one realized path against its
/// reference. Both paths must be nonempty node sequences on `env`.
pub fn path_metrics(realized: &[u32], reference: &[u32], env: &EnvironmentGraph) -> PathMetrics {
    assert!(!realized.is_empty() && !reference.is_empty());
    let goal = *reference.last().unwrap();
    let dist_to_goal = env.bfs_distances(goal);

    // One BFS per distinct reference node covers every distance query.
    let mut ref_dists: std::collections::HashMap<u32, Vec<u32>> = std::collections::HashMap::new();
    for &r in reference {
        ref_dists.entry(r).or_insert_with(|| env.bfs_distances(r));
    }
    let hop = |a: u32, b: u32| -> f64 { ref_dists[&b][a as usize] as f64 };

    let final_node = *realized.last().unwrap();
    let ne = dist_to_goal[final_node as usize] as f64;
    let sr = f64::from(dist_to_goal[final_node as usize] <= SUCCESS_RADIUS);
    let osr =
        f64::from(realized.iter().any(|&v| dist_to_goal[v as usize] <= SUCCESS_RADIUS));

    let l_star = (reference.len() - 1) as f64;
    let l = (realized.len() - 1) as f64;
    let spl = if l_star == 0.0 { sr } else { sr * l_star / l_star.max(l) };

    // CLS = coverage * length score (Jain et al. conventions, hop units).
    let coverage = reference
        .iter()
        .map(|&r| {
            let d = realized.iter().map(|&p| hop(p, r)).fold(f64::INFINITY, f64::min);
            (-d / DISTANCE_SCALE).exp()
        })
        .sum::<f64>()
        / reference.len() as f64;
    let expected = coverage * l_star;
    let length_score = if expected == 0.0 && l == 0.0 {
        1.0
    } else {
        expected / (expected + (expected - l).abs())
    };
    let cls = coverage * length_score;

    let dtw = dtw_cost(realized, reference, &hop);
    let ndtw = (-dtw / (reference.len() as f64 * DISTANCE_SCALE)).exp();

    PathMetrics { sr, spl, osr, ne, cls, ndtw }
}

/// One evaluated decision step for ASR counting: what the agent picked
/// and, when this step carried the trigger, the poisoned slot.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub chosen: usize,
    pub trigger_slot: Option<usize>,
}

/// Aggregated metrics over an evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub spl: f64,
    pub osr: f64,
    pub ne: f64,
    pub cls: f64,
    pub ndtw: f64,
    /// None when no trigger step was encountered.
    pub asr: Option<f64>,
    pub episode_count: usize,
    pub trigger_step_count: usize,
}

/// Running fold over per-episode metrics and per-step trigger outcomes.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    sum_sr: f64,
    sum_spl: f64,
    sum_osr: f64,
    sum_ne: f64,
    sum_cls: f64,
    sum_ndtw: f64,
    episodes: usize,
    trigger_steps: usize,
    trigger_hits: usize,
}

impl MetricsAccumulator {
    pub fn add_episode(&mut self, m: &PathMetrics) {
        self.sum_sr += m.sr;
        self.sum_spl += m.spl;
        self.sum_osr += m.osr;
        self.sum_ne += m.ne;
        self.sum_cls += m.cls;
        self.sum_ndtw += m.ndtw;
        self.episodes += 1;
    }

    pub fn add_steps(&mut self, steps: &[StepOutcome]) {
        for s in steps {
            if let Some(slot) = s.trigger_slot {
                self.trigger_steps += 1;
                if s.chosen == slot {
                    self.trigger_hits += 1;
                }
            }
        }
    }

    /// Merge another accumulator (commutative, for parallel folds).
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.sum_sr += other.sum_sr;
        self.sum_spl += other.sum_spl;
        self.sum_osr += other.sum_osr;
        self.sum_ne += other.sum_ne;
        self.sum_cls += other.sum_cls;
        self.sum_ndtw += other.sum_ndtw;
        self.episodes += other.episodes;
        self.trigger_steps += other.trigger_steps;
        self.trigger_hits += other.trigger_hits;
    }

    pub fn report(&self) -> MetricsReport {
        assert!(self.episodes > 0, "cannot report on zero episodes");
        let n = self.episodes as f64;
        MetricsReport {
            sr: self.sum_sr / n,
            spl: self.sum_spl / n,
            osr: self.sum_osr / n,
            ne: self.sum_ne / n,
            cls: self.sum_cls / n,
            ndtw: self.sum_ndtw / n,
            asr: if self.trigger_steps == 0 {
                None
            } else {
                Some(self.trigger_hits as f64 / self.trigger_steps as f64)
            },
            episode_count: self.episodes,
            trigger_step_count: self.trigger_steps,
        }
    }
}

/// Fixed metrics CSV column order.
pub const CSV_HEADER: &str =
    "round,split,poisoned,sr,spl,osr,ne,cls,ndtw,asr,episode_count,trigger_step_count";

/// One CSV row matching [`CSV_HEADER`]; `asr` renders empty when null.
pub fn csv_row(round: usize, split: &str, poisoned: bool, report: &MetricsReport) -> String {
    let asr = report.asr.map(|a| a.to_string()).unwrap_or_default();
    format!(
        "{round},{split},{},{},{},{},{},{},{},{asr},{},{}",
        u8::from(poisoned),
        report.sr,
        report.spl,
        report.osr,
        report.ne,
        report.cls,
        report.ndtw,
        report.episode_count,
        report.trigger_step_count,
    )
}

#[cfg(test)]
mod tests;
