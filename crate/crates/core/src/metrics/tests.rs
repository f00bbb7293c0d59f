use super::*;
use crate::envgen::{self, EnvSpec};
use crate::rng;
use rand::Rng;

fn test_env(seed: u64) -> envgen::EnvironmentGraph {
    let spec = EnvSpec { grid_w: 5, grid_h: 5, ..Default::default() };
    envgen::generate_environment(seed, 0, &spec).unwrap()
}

#[test]
fn identity_path_scores_perfectly() {
    let env = test_env(1);
    let spec = EnvSpec { grid_w: 5, grid_h: 5, ..Default::default() };
    for ep in envgen::generate_episodes(&env, 10, 1, &spec).unwrap() {
        let m = path_metrics(&ep.reference_path, &ep.reference_path, &env);
        assert_eq!(m.sr, 1.0);
        assert_eq!(m.spl, 1.0);
        assert_eq!(m.osr, 1.0);
        assert_eq!(m.ne, 0.0);
        assert!((m.cls - 1.0).abs() < 1e-12);
        assert!((m.ndtw - 1.0).abs() < 1e-12);
    }
}

#[test]
fn stopping_at_start_far_from_goal_scores_zero() {
    let env = test_env(2);
    // Find a pair exactly 5 hops apart.
    let n = env.num_viewpoints() as u32;
    let (start, goal) = (0..n)
        .flat_map(|s| {
            let d = env.bfs_distances(s);
            (0..n).filter(move |&g| d[g as usize] == 5).map(move |g| (s, g)).next()
        })
        .next()
        .expect("5x5 grid has a 5-hop pair");
    let reference = {
        // Reconstruct some shortest path for the reference.
        let dist = env.bfs_distances(goal);
        let mut path = vec![start];
        let mut v = start;
        while v != goal {
            v = env.next_hop(&dist, v, goal).unwrap();
            path.push(v);
        }
        path
    };
    let m = path_metrics(&[start], &reference, &env);
    assert_eq!(m.sr, 0.0);
    assert_eq!(m.spl, 0.0);
    assert_eq!(m.ne, 5.0);
    assert!(m.cls < 1.0);
    assert!(m.ndtw < 1.0);
}

/// Brute-force DTW: enumerate every monotone alignment recursively.
fn dtw_brute(realized: &[u32], reference: &[u32], dist: &dyn Fn(u32, u32) -> f64) -> f64 {
    fn rec(
        i: usize,
        j: usize,
        realized: &[u32],
        reference: &[u32],
        dist: &dyn Fn(u32, u32) -> f64,
    ) -> f64 {
        let c = dist(realized[i], reference[j]);
        if i == 0 && j == 0 {
            return c;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(rec(i - 1, j, realized, reference, dist));
        }
        if j > 0 {
            best = best.min(rec(i, j - 1, realized, reference, dist));
        }
        if i > 0 && j > 0 {
            best = best.min(rec(i - 1, j - 1, realized, reference, dist));
        }
        c + best
    }
    rec(realized.len() - 1, reference.len() - 1, realized, reference, dist)
}

#[test]
fn dtw_table_matches_exhaustive_alignment_oracle() {
    let env = test_env(3);
    let n = env.num_viewpoints() as u32;
    let mut r = rng::stream(3, "dtw", 0, 0);
    let dists: Vec<Vec<u32>> = (0..n).map(|v| env.bfs_distances(v)).collect();
    let hop = |a: u32, b: u32| dists[b as usize][a as usize] as f64;
    for _ in 0..60 {
        let la = r.gen_range(1..=6);
        let lb = r.gen_range(1..=6);
        let pa: Vec<u32> = (0..la).map(|_| r.gen_range(0..n)).collect();
        let pb: Vec<u32> = (0..lb).map(|_| r.gen_range(0..n)).collect();
        let fast = dtw_cost(&pa, &pb, &hop);
        let brute = dtw_brute(&pa, &pb, &hop);
        assert!((fast - brute).abs() < 1e-12, "{pa:?} vs {pb:?}: {fast} vs {brute}");
    }
}

#[test]
fn metric_ordering_chain_holds_on_random_walks() {
    let env = test_env(4);
    let spec = EnvSpec { grid_w: 5, grid_h: 5, ..Default::default() };
    let episodes = envgen::generate_episodes(&env, 20, 9, &spec).unwrap();
    let mut r = rng::stream(4, "walks", 0, 0);
    for ep in &episodes {
        // Random walk of random length from the start.
        let mut path = vec![ep.start];
        let steps = r.gen_range(0..12);
        for _ in 0..steps {
            let v = *path.last().unwrap();
            let nbrs = &env.adjacency[v as usize];
            path.push(nbrs[r.gen_range(0..nbrs.len())]);
        }
        let m = path_metrics(&path, &ep.reference_path, &env);
        assert!(m.spl >= 0.0);
        assert!(m.spl <= m.sr + 1e-15);
        assert!(m.sr <= m.osr);
        assert!(m.osr <= 1.0);
        assert!(m.ne >= 0.0);
        assert!((0.0..=1.0).contains(&m.cls));
        assert!((0.0..=1.0).contains(&m.ndtw));
    }
}

#[test]
fn deviation_strictly_lowers_cls_and_ndtw() {
    let env = test_env(5);
    let spec = EnvSpec { grid_w: 5, grid_h: 5, ..Default::default() };
    let ep = &envgen::generate_episodes(&env, 1, 3, &spec).unwrap()[0];
    // Take a step off the reference at the end.
    let mut deviated = ep.reference_path.clone();
    let last = *deviated.last().unwrap();
    let detour = env.adjacency[last as usize][0];
    deviated.push(detour);
    deviated.push(last);
    let m = path_metrics(&deviated, &ep.reference_path, &env);
    assert!(m.cls < 1.0);
    assert!(m.ndtw < 1.0);
}

// ---------------------------------------------------------------------------
// ASR
// ---------------------------------------------------------------------------

#[test]
fn asr_counts_trigger_hits() {
    let mut acc = MetricsAccumulator::default();
    acc.add_episode(&PathMetrics { sr: 0.0, spl: 0.0, osr: 0.0, ne: 1.0, cls: 0.0, ndtw: 0.0 });

    // Agent hard-wired to the trigger slot.
    let hits: Vec<StepOutcome> =
        (0..10).map(|_| StepOutcome { chosen: 2, trigger_slot: Some(2) }).collect();
    acc.add_steps(&hits);
    assert_eq!(acc.report().asr, Some(1.0));

    // Agent hard-wired to avoid it.
    let mut acc = MetricsAccumulator::default();
    acc.add_episode(&PathMetrics { sr: 0.0, spl: 0.0, osr: 0.0, ne: 1.0, cls: 0.0, ndtw: 0.0 });
    let misses: Vec<StepOutcome> =
        (0..10).map(|_| StepOutcome { chosen: 0, trigger_slot: Some(2) }).collect();
    acc.add_steps(&misses);
    assert_eq!(acc.report().asr, Some(0.0));
}

#[test]
fn asr_scripted_even_step_agent_scores_half() {
    let mut acc = MetricsAccumulator::default();
    acc.add_episode(&PathMetrics { sr: 1.0, spl: 1.0, osr: 1.0, ne: 0.0, cls: 1.0, ndtw: 1.0 });
    let steps: Vec<StepOutcome> = (0..100)
        .map(|i| StepOutcome { chosen: if i % 2 == 0 { 3 } else { 1 }, trigger_slot: Some(3) })
        .collect();
    acc.add_steps(&steps);
    let report = acc.report();
    assert_eq!(report.asr, Some(0.5));
    assert_eq!(report.trigger_step_count, 100);
}

#[test]
fn asr_is_null_without_trigger_steps() {
    let mut acc = MetricsAccumulator::default();
    acc.add_episode(&PathMetrics { sr: 1.0, spl: 1.0, osr: 1.0, ne: 0.0, cls: 1.0, ndtw: 1.0 });
    acc.add_steps(&[StepOutcome { chosen: 0, trigger_slot: None }]);
    let report = acc.report();
    assert_eq!(report.asr, None);
    assert_eq!(report.trigger_step_count, 0);
}

#[test]
fn merge_is_equivalent_to_sequential_accumulation() {
    let env = test_env(6);
    let spec = EnvSpec { grid_w: 5, grid_h: 5, ..Default::default() };
    let eps = envgen::generate_episodes(&env, 8, 7, &spec).unwrap();
    let metrics: Vec<PathMetrics> =
        eps.iter().map(|e| path_metrics(&e.reference_path, &eps[0].reference_path, &env)).collect();

    let mut whole = MetricsAccumulator::default();
    let mut left = MetricsAccumulator::default();
    let mut right = MetricsAccumulator::default();
    for (i, m) in metrics.iter().enumerate() {
        whole.add_episode(m);
        if i % 2 == 0 { left.add_episode(m) } else { right.add_episode(m) }
    }
    whole.add_steps(&[StepOutcome { chosen: 1, trigger_slot: Some(1) }]);
    left.add_steps(&[StepOutcome { chosen: 1, trigger_slot: Some(1) }]);
    let mut merged = left.clone();
    merged.merge(&right);
    let (a, b) = (whole.report(), merged.report());
    // Summation order differs between the two folds, so compare within
    // rounding noise rather than bitwise.
    for (x, y) in [
        (a.sr, b.sr),
        (a.spl, b.spl),
        (a.osr, b.osr),
        (a.ne, b.ne),
        (a.cls, b.cls),
        (a.ndtw, b.ndtw),
    ] {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(a.asr, b.asr);
    assert_eq!(a.episode_count, b.episode_count);
    assert_eq!(a.trigger_step_count, b.trigger_step_count);
}

#[test]
fn csv_row_matches_header_layout() {
    let report = MetricsReport {
        sr: 0.5,
        spl: 0.25,
        osr: 0.75,
        ne: 2.5,
        cls: 0.5,
        ndtw: 0.5,
        asr: Some(0.125),
        episode_count: 4,
        trigger_step_count: 8,
    };
    assert_eq!(
        CSV_HEADER,
        "round,split,poisoned,sr,spl,osr,ne,cls,ndtw,asr,episode_count,trigger_step_count"
    );
    assert_eq!(
        csv_row(7, "unseen", true, &report),
        "7,unseen,1,0.5,0.25,0.75,2.5,0.5,0.5,0.125,4,8"
    );
    let no_asr = MetricsReport { asr: None, trigger_step_count: 0, ..report };
    assert_eq!(csv_row(0, "seen", false, &no_asr), "0,seen,0,0.5,0.25,0.75,2.5,0.5,0.5,,4,0");
}
