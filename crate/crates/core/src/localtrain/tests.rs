use super::*;
use crate::agent::{init_params, DecodeMode, Dims, EpisodeTape, StepCache};
use crate::envgen::{self, EnvSpec};
use crate::rng;

fn tiny_dims() -> Dims {
    Dims { vocab: envgen::VOCAB_SIZE, d_u: 6, l_max: 49, feature_dim: 16, d_h: 6 }
}

fn client(seed: u64, n_episodes: usize) -> ClientData {
    let spec = EnvSpec { grid_w: 4, grid_h: 4, ..Default::default() };
    let env = envgen::generate_environment(seed, 0, &spec).unwrap();
    let episodes = envgen::generate_episodes(&env, n_episodes, seed, &spec).unwrap();
    ClientData { env, episodes }
}

/// Hand-built single-step tape whose only populated field is the action
/// distribution; enough for the loss-value paths.
fn synthetic_tape(dims: Dims, probs: Vec<f64>, value: f64) -> EpisodeTape {
    let k = probs.len() - 1;
    let cache = StepCache {
        candidates: vec![vec![0.0; dims.feature_dim]; k],
        f_in: vec![0.0; dims.feature_dim],
        a_prev: vec![0.0; dims.feature_dim],
        h_prev: vec![0.0; dims.d_h],
        h: vec![0.0; dims.d_h],
        h_prime: vec![0.0; dims.d_h],
        wu_h: vec![0.0; dims.d_h],
        scores: vec![0.0],
        beta: vec![1.0],
        u_tilde: vec![0.0; dims.d_u],
        h_tilde: vec![0.0; dims.d_h],
        q: vec![0.0; dims.feature_dim],
        logits: vec![0.0; probs.len()],
        probs,
        value,
    };
    EpisodeTape {
        dims,
        use_prompts: false,
        tokens: vec![0],
        u_eff: vec![vec![0.0; dims.d_u]],
        steps: vec![cache],
    }
}

#[test]
fn il_loss_is_zero_on_a_one_hot_distribution() {
    let tape = synthetic_tape(tiny_dims(), vec![1.0, 0.0, 0.0], 0.0);
    let loss = il_loss(&tape, &[0]);
    assert_eq!(loss.value, 0.0);
    assert!(loss.terms[0].g_logits[0].iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn il_loss_is_ln_k_on_a_uniform_distribution() {
    // Zero parameters give zero logits, hence a uniform softmax over
    // (degree + 1) actions at every step.
    let dims = tiny_dims();
    let params = crate::agent::ModelParams::zeros(dims);
    let data = client(7, 1);
    let ep = &data.episodes[0];
    let r = crate::agent::run_episode(
        &params,
        &data.env,
        ep,
        DecodeMode::TeacherForced,
        true,
        None,
        None,
        16,
    );
    let expected: f64 = r
        .path
        .iter()
        .map(|&v| ((data.env.adjacency[v as usize].len() + 1) as f64).ln())
        .sum::<f64>()
        / r.path.len() as f64;
    let loss = il_loss(&r.tape, &r.targets);
    assert!((loss.value - expected).abs() < 1e-12, "{} vs {expected}", loss.value);
}

#[test]
fn il_loss_matches_direct_recomputation() {
    let dims = tiny_dims();
    let params = init_params(3, dims);
    let data = client(3, 1);
    let ep = &data.episodes[0];
    let r = crate::agent::run_episode(
        &params,
        &data.env,
        ep,
        DecodeMode::TeacherForced,
        true,
        None,
        None,
        16,
    );
    let loss = il_loss(&r.tape, &r.targets);
    let direct: f64 = r
        .tape
        .steps
        .iter()
        .zip(&r.targets)
        .map(|(c, &t)| -c.probs[t].ln())
        .sum::<f64>()
        / r.tape.steps.len() as f64;
    assert!((loss.value - direct).abs() < 1e-12);
}

#[test]
fn discounted_returns_match_brute_force() {
    let rewards = [1.0, -0.5, 2.0];
    let gamma = 0.9;
    let got = discounted_returns(&rewards, gamma);
    for t in 0..3 {
        let brute: f64 = (t..3).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
        assert!((got[t] - brute).abs() < 1e-12);
    }
    assert!(discounted_returns(&[], 0.5).is_empty());
}

#[test]
fn rl_loss_vanishes_when_critic_matches_returns() {
    // Advantage zero at every step: both the policy and value terms die,
    // and every cotangent is exactly zero.
    let dims = tiny_dims();
    let tape = synthetic_tape(dims, vec![0.25, 0.25, 0.25, 0.25], 1.5);
    let loss = rl_loss(&tape, &[2], &[1.5], 0.9);
    assert_eq!(loss.value, 0.0);
    assert!(loss.terms[0].g_logits[0].iter().all(|&g| g == 0.0));
    assert_eq!(loss.terms[0].g_values[0], 0.0);
}

#[test]
fn rl_loss_single_step_hand_computed() {
    let dims = tiny_dims();
    let p = vec![0.7, 0.2, 0.1];
    let tape = synthetic_tape(dims, p.clone(), 0.25);
    let loss = rl_loss(&tape, &[1], &[1.0], 0.95);
    let advantage = 1.0 - 0.25;
    let expected = -p[1].ln() * advantage + 0.5 * advantage * advantage;
    assert!((loss.value - expected).abs() < 1e-12);
    let g = &loss.terms[0].g_logits[0];
    assert!((g[0] - advantage * p[0]).abs() < 1e-15);
    assert!((g[1] - advantage * (p[1] - 1.0)).abs() < 1e-15);
    assert!((loss.terms[0].g_values[0] + advantage).abs() < 1e-15);
}

#[test]
fn benign_reward_agrees_with_bfs_distances() {
    let data = client(11, 1);
    let env = &data.env;
    let goal = data.episodes[0].goal;
    let dist = env.bfs_distances(goal);
    for v in 0..env.num_viewpoints() as u32 {
        for &w in &env.adjacency[v as usize] {
            let r = benign_reward(&dist, v, Some(w));
            let closer = dist[w as usize] < dist[v as usize];
            assert_eq!(r, if closer { 1.0 } else { -1.0 });
        }
        let stop = benign_reward(&dist, v, None);
        assert_eq!(stop, if dist[v as usize] <= 1 { 2.0 } else { -2.0 });
    }
}

#[test]
fn rollout_rewards_follow_the_realized_path() {
    let dims = tiny_dims();
    let params = init_params(13, dims);
    let data = client(13, 1);
    let ep = &data.episodes[0];
    let mut rng = rng::stream(13, "rollout", 0, 0);
    let r = crate::agent::run_episode(
        &params,
        &data.env,
        ep,
        DecodeMode::Sampled,
        true,
        Some(&mut rng),
        None,
        16,
    );
    let rewards = rollout_rewards(&data.env, ep, &r, false);
    assert_eq!(rewards.len(), r.actions.len());
    let dist = data.env.bfs_distances(ep.goal);
    for (t, &a) in r.actions.iter().enumerate() {
        let v = r.path[t];
        let stop_idx = data.env.adjacency[v as usize].len();
        let next = if a == stop_idx { None } else { Some(data.env.adjacency[v as usize][a]) };
        assert_eq!(rewards[t], benign_reward(&dist, v, next));
    }
}

#[test]
fn zero_learning_rate_uploads_zero_deltas() {
    let dims = tiny_dims();
    let global = init_params(17, dims);
    let data = client(17, 2);
    let cfg = LocalTrainConfig { local_learning_rate: 0.0, ..Default::default() };
    let mut tr = rng::stream(1, "client-train", 0, 0);
    let mut pr = rng::stream(1, "client-poison", 0, 0);
    let (msg, _) = client_update(&global, &data, &cfg, None, &mut tr, &mut pr).unwrap();
    assert!(msg.delta_w.iter().all(|&x| x == 0.0));
    assert!(msg.delta_prompt_v.iter().all(|&x| x == 0.0));
    assert!(msg.delta_prompt_l.iter().all(|&x| x == 0.0));
    assert_eq!(msg.sample_count, 2);
}

#[test]
fn client_update_is_bitwise_deterministic() {
    let dims = tiny_dims();
    let global = init_params(19, dims);
    let data = client(19, 3);
    let cfg = LocalTrainConfig { local_epochs: 2, ..Default::default() };
    let run = || {
        let mut tr = rng::stream(4, "client-train", 7, 2);
        let mut pr = rng::stream(4, "client-poison", 7, 2);
        client_update(&global, &data, &cfg, None, &mut tr, &mut pr).unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn pure_il_single_pass_matches_hand_stepped_sgd() {
    // tau = 1, one episode, mix = 1: the upload must equal exactly one
    // gradient step of the imitation loss.
    let dims = tiny_dims();
    let global = init_params(23, dims);
    let data = client(23, 1);
    let cfg = LocalTrainConfig {
        local_epochs: 1,
        local_learning_rate: 0.1,
        mix_weight: 1.0,
        rl_gamma: 0.95,
        max_grad_norm: f64::INFINITY,
    };
    let mut tr = rng::stream(9, "client-train", 0, 0);
    let mut pr = rng::stream(9, "client-poison", 0, 0);
    let (msg, summary) = client_update(&global, &data, &cfg, None, &mut tr, &mut pr).unwrap();

    let ep = &data.episodes[0];
    let budget = 2 * (ep.reference_path.len() - 1) + 4;
    let r = crate::agent::run_episode(
        &global,
        &data.env,
        ep,
        DecodeMode::TeacherForced,
        true,
        None,
        None,
        budget,
    );
    let il = il_loss(&r.tape, &r.targets);
    assert_eq!(summary.mean_il, il.value);
    assert_eq!(summary.mean_rl, 0.0);
    let loss = crate::agent::LossGraph::weighted_sum(vec![(1.0, il)]);
    let grads = compute_gradients(&global, &loss).unwrap();
    // The delta is computed as (w - lr*g) - w, which can differ from
    // -lr*g by one rounding step.
    for (got, g) in msg.delta_w.iter().zip(grads.weight_flat()) {
        let want = -0.1 * g;
        assert!((got - want).abs() <= 1e-15 + 1e-9 * want.abs(), "{got} vs {want}");
    }
    for (got, g) in msg.delta_prompt_v.iter().zip(grads.seg(SEG_PROMPT_V)) {
        let want = -0.1 * g;
        assert!((got - want).abs() <= 1e-15 + 1e-9 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn pure_rl_single_pass_matches_hand_stepped_sgd() {
    let dims = tiny_dims();
    let global = init_params(29, dims);
    let data = client(29, 1);
    let cfg = LocalTrainConfig {
        local_epochs: 1,
        local_learning_rate: 0.05,
        mix_weight: 0.0,
        rl_gamma: 0.9,
        max_grad_norm: f64::INFINITY,
    };
    let mut tr = rng::stream(2, "client-train", 1, 1);
    let mut pr = rng::stream(2, "client-poison", 1, 1);
    let (msg, summary) = client_update(&global, &data, &cfg, None, &mut tr, &mut pr).unwrap();

    // Replicate: a single-episode epoch consumes no shuffle draws, so the
    // sampled rollout sees the same stream state.
    let mut tr2 = rng::stream(2, "client-train", 1, 1);
    let ep = &data.episodes[0];
    let budget = 2 * (ep.reference_path.len() - 1) + 4;
    let r = crate::agent::run_episode(
        &global,
        &data.env,
        ep,
        DecodeMode::Sampled,
        true,
        Some(&mut tr2),
        None,
        budget,
    );
    let rewards = rollout_rewards(&data.env, ep, &r, false);
    let rl = rl_loss(&r.tape, &r.actions, &rewards, 0.9);
    assert_eq!(summary.mean_rl, rl.value);
    assert_eq!(summary.mean_il, 0.0);
    let loss = crate::agent::LossGraph::weighted_sum(vec![(1.0, rl)]);
    let grads = compute_gradients(&global, &loss).unwrap();
    for (got, g) in msg.delta_w.iter().zip(grads.weight_flat()) {
        let want = -0.05 * g;
        assert!((got - want).abs() <= 1e-15 + 1e-9 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(LocalTrainConfig::default().validate().is_ok());
    assert!(LocalTrainConfig { local_epochs: 0, ..Default::default() }.validate().is_err());
    assert!(
        LocalTrainConfig { local_learning_rate: -0.1, ..Default::default() }.validate().is_err()
    );
    assert!(LocalTrainConfig { mix_weight: 1.5, ..Default::default() }.validate().is_err());
}
