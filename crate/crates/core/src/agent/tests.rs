use super::*;
use crate::envgen::{self, EnvSpec};
use crate::localtrain::{il_loss, rl_loss};
use crate::rng;
use rand::Rng;

fn tiny_dims() -> Dims {
    Dims { vocab: crate::envgen::VOCAB_SIZE, d_u: 6, l_max: 49, feature_dim: 16, d_h: 6 }
}

fn test_env(seed: u64) -> (envgen::EnvironmentGraph, Vec<envgen::Episode>) {
    let spec = EnvSpec { grid_w: 4, grid_h: 4, ..Default::default() };
    let env = envgen::generate_environment(seed, 0, &spec).unwrap();
    let eps = envgen::generate_episodes(&env, 8, seed, &spec).unwrap();
    (env, eps)
}

fn random_params(seed: u64, dims: Dims) -> ModelParams {
    let mut p = init_params(seed, dims);
    // Nonzero prompts so prompt gradients are exercised too.
    let mut rng = rng::stream(seed, "test-prompts", 0, 0);
    for seg in [SEG_PROMPT_V, SEG_PROMPT_L, SEG_PROMPT_V_IN, SEG_PROMPT_L_IN] {
        for x in p.seg_mut(seg) {
            *x = rng.gen_range(-0.3..=0.3);
        }
    }
    p
}

#[test]
fn encode_instruction_linearity_and_length() {
    let dims = tiny_dims();
    let zero = ModelParams::zeros(dims);
    let u = encode_instruction(&zero, &[0, 3, 5]).unwrap();
    assert_eq!(u.len(), 3);
    assert!(u.iter().all(|v| v.iter().all(|&x| x == 0.0)));

    let p = random_params(1, dims);
    assert_eq!(encode_instruction(&p, &[2]).unwrap().len(), 1);
}

#[test]
fn encode_instruction_rejects_bad_input() {
    let p = ModelParams::zeros(tiny_dims());
    assert!(matches!(encode_instruction(&p, &[99]), Err(AgentError::OutOfVocab(99))));
    assert!(matches!(encode_instruction(&p, &[]), Err(AgentError::EmptyInstruction)));
    let long = vec![0u16; 50];
    assert!(matches!(
        encode_instruction(&p, &long),
        Err(AgentError::InstructionTooLong { .. })
    ));
}

#[test]
fn encode_instruction_reindexes_positions_under_permutation() {
    let dims = tiny_dims();
    let p = random_params(2, dims);
    let tokens = [4u16, 1, 7, 2];
    let permuted = [2u16, 4, 7, 1];
    let u_perm = encode_instruction(&p, &permuted).unwrap();
    for (j, &tok) in permuted.iter().enumerate() {
        let d_u = dims.d_u;
        let expected: Vec<f64> = p.seg(SEG_TOKEN_EMB)[tok as usize * d_u..(tok as usize + 1) * d_u]
            .iter()
            .zip(&p.seg(SEG_POS_EMB)[j * d_u..(j + 1) * d_u])
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(u_perm[j], expected);
    }
    // Same multiset of tokens, different order: token terms permute, the
    // positional terms follow the new index.
    let u_orig = encode_instruction(&p, &tokens).unwrap();
    assert_ne!(u_orig, u_perm);
}

#[test]
fn zero_prompts_make_prompt_flag_a_no_op() {
    let dims = tiny_dims();
    let p = init_params(3, dims); // prompts are zero after init
    let (env, eps) = test_env(3);
    let u = encode_instruction(&p, &eps[0].instruction).unwrap();
    let candidates = env.edge_features[eps[0].start as usize].clone();
    let h_prev = vec![0.0; dims.d_h];
    let a_prev = vec![0.0; dims.feature_dim];
    let (on, h_on) = step_forward(&p, &h_prev, &a_prev, &candidates, &u, true).unwrap();
    let (off, h_off) = step_forward(&p, &h_prev, &a_prev, &candidates, &u, false).unwrap();
    assert_eq!(h_on, h_off);
    assert_eq!(on.action_distribution, off.action_distribution);
    assert_eq!(on.attention_weights, off.attention_weights);
    assert_eq!(on.fused, off.fused);
}

#[test]
fn single_token_attention_is_degenerate() {
    let dims = tiny_dims();
    let p = random_params(4, dims);
    let u = encode_instruction(&p, &[5]).unwrap();
    let candidates = vec![vec![0.2; dims.feature_dim]];
    let (trace, _) =
        step_forward(&p, &vec![0.1; dims.d_h], &vec![0.0; dims.feature_dim], &candidates, &u, true)
            .unwrap();
    assert_eq!(trace.attention_weights, vec![1.0]);
}

/// Independent straight-line recomputation of one step, written with
/// explicit index loops rather than the tape's fused products.
fn naive_step(
    p: &ModelParams,
    h_prev: &[f64],
    a_prev: &[f64],
    candidates: &[Vec<f64>],
    u: &[Vec<f64>],
    use_prompts: bool,
) -> (Vec<f64>, Vec<f64>) {
    let d = p.dims.feature_dim;
    let (d_u, d_h) = (p.dims.d_u, p.dims.d_h);
    let u_eff: Vec<Vec<f64>> = u
        .iter()
        .map(|row| {
            (0..d_u)
                .map(|a| {
                    row[a]
                        + if use_prompts {
                            p.seg(SEG_PROMPT_L)[a] + p.seg(SEG_PROMPT_L_IN)[a]
                        } else {
                            0.0
                        }
                })
                .collect()
        })
        .collect();
    let mut f_in = vec![0.0; d];
    for c in candidates {
        for i in 0..d {
            f_in[i] += c[i] / candidates.len() as f64;
        }
    }
    if use_prompts {
        for i in 0..d {
            f_in[i] += p.seg(SEG_PROMPT_V_IN)[i];
        }
    }
    let mut x = Vec::new();
    x.extend_from_slice(&f_in);
    x.extend_from_slice(a_prev);
    x.extend_from_slice(h_prev);
    let mut h = vec![0.0; d_h];
    for r in 0..d_h {
        let mut acc = p.seg(SEG_VIEW_B)[r];
        for c in 0..x.len() {
            acc += p.seg(SEG_VIEW_W)[r * x.len() + c] * x[c];
        }
        h[r] = acc.tanh();
    }
    let h_prime: Vec<f64> = (0..d_h)
        .map(|i| h[i] + if use_prompts { p.seg(SEG_PROMPT_V)[i] } else { 0.0 })
        .collect();
    let mut scores = vec![0.0; u_eff.len()];
    for (j, uj) in u_eff.iter().enumerate() {
        let mut s = 0.0;
        for a in 0..d_u {
            for b in 0..d_h {
                s += uj[a] * p.seg(SEG_ATTN_WU)[a * d_h + b] * h_prime[b];
            }
        }
        scores[j] = s;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let beta: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut u_tilde = vec![0.0; d_u];
    for (j, uj) in u_eff.iter().enumerate() {
        for a in 0..d_u {
            u_tilde[a] += beta[j] * uj[a];
        }
    }
    let mut fuse = Vec::new();
    fuse.extend_from_slice(&u_tilde);
    fuse.extend_from_slice(&h_prime);
    let mut h_tilde = vec![0.0; d_h];
    for r in 0..d_h {
        let mut acc = 0.0;
        for c in 0..fuse.len() {
            acc += p.seg(SEG_ATTN_W)[r * fuse.len() + c] * fuse[c];
        }
        h_tilde[r] = acc.tanh();
    }
    let mut q = vec![0.0; d];
    for r in 0..d {
        for c in 0..d_h {
            q[r] += p.seg(SEG_SCORER)[r * d_h + c] * h_tilde[c];
        }
    }
    let mut logits: Vec<f64> = candidates
        .iter()
        .map(|f| (0..d).map(|i| q[i] * f[i]).sum())
        .collect();
    logits.push((0..d).map(|i| q[i] * p.seg(SEG_STOP_FEATURE)[i]).sum());
    (beta, logits)
}

#[test]
fn step_forward_matches_straight_line_reimplementation() {
    let dims = tiny_dims();
    for seed in 0..5 {
        let p = random_params(seed, dims);
        let (env, eps) = test_env(seed + 10);
        let ep = &eps[0];
        let u = encode_instruction(&p, &ep.instruction).unwrap();
        let candidates = env.edge_features[ep.start as usize].clone();
        let mut rng = rng::stream(seed, "hprev", 0, 0);
        let h_prev: Vec<f64> = (0..dims.d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a_prev: Vec<f64> = (0..dims.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (trace, _) = step_forward(&p, &h_prev, &a_prev, &candidates, &u, true).unwrap();
        let (beta, logits) = naive_step(&p, &h_prev, &a_prev, &candidates, &u, true);
        for (a, b) in trace.attention_weights.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-12, "beta {a} vs {b}");
        }
        for (a, b) in trace.action_logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12, "logit {a} vs {b}");
        }
    }
}

#[test]
fn step_forward_rejects_dimension_mismatch() {
    let dims = tiny_dims();
    let p = ModelParams::zeros(dims);
    let u = vec![vec![0.0; dims.d_u]];
    let bad_candidate = vec![vec![0.0; dims.feature_dim + 1]];
    assert!(matches!(
        step_forward(&p, &vec![0.0; dims.d_h], &vec![0.0; dims.feature_dim], &bad_candidate, &u, false),
        Err(AgentError::DimMismatch(_))
    ));
    assert!(matches!(
        step_forward(&p, &vec![0.0; dims.d_h], &vec![0.0; dims.feature_dim], &[], &u, false),
        Err(AgentError::DimMismatch(_))
    ));
    assert!(matches!(
        step_forward(
            &p,
            &vec![0.0; dims.d_h],
            &vec![0.0; dims.feature_dim],
            &vec![vec![0.0; dims.feature_dim]],
            &[],
            false
        ),
        Err(AgentError::EmptyInstruction)
    ));
}

#[test]
fn teacher_forced_rollout_replays_reference_path() {
    let dims = tiny_dims();
    let p = random_params(6, dims);
    let (env, eps) = test_env(6);
    for ep in &eps {
        let budget = 2 * (ep.reference_path.len() - 1) + 4;
        let r = run_episode(&p, &env, ep, DecodeMode::TeacherForced, true, None, None, budget);
        assert_eq!(r.path, ep.reference_path);
        assert!(r.stopped);
        assert_eq!(r.targets, ep.teacher_actions);
    }
}

#[test]
fn greedy_stop_heavy_params_stay_at_start() {
    let dims = tiny_dims();
    let mut p = ModelParams::zeros(dims);
    // Nonzero hidden so the scorer sees signal, then a large STOP feature.
    p.seg_mut(SEG_VIEW_B).iter_mut().for_each(|x| *x = 1.0);
    p.seg_mut(SEG_ATTN_W).iter_mut().for_each(|x| *x = 0.1);
    p.seg_mut(SEG_SCORER).iter_mut().for_each(|x| *x = 0.01);
    p.seg_mut(SEG_STOP_FEATURE).iter_mut().for_each(|x| *x = 10.0);
    let (env, eps) = test_env(8);
    let ep = &eps[0];
    let r = run_episode(&p, &env, ep, DecodeMode::Greedy, false, None, None, 12);
    assert_eq!(r.path, vec![ep.start]);
    assert!(r.stopped);
}

#[test]
fn sampled_rollouts_are_stream_deterministic() {
    let dims = tiny_dims();
    let p = random_params(9, dims);
    let (env, eps) = test_env(9);
    let ep = &eps[0];
    let mut rng_a = rng::stream(1, "rollout", 0, 0);
    let mut rng_b = rng::stream(1, "rollout", 0, 0);
    let a = run_episode(&p, &env, ep, DecodeMode::Sampled, true, Some(&mut rng_a), None, 16);
    let b = run_episode(&p, &env, ep, DecodeMode::Sampled, true, Some(&mut rng_b), None, 16);
    assert_eq!(a.path, b.path);
    assert_eq!(a.actions, b.actions);
}

#[test]
fn distributions_are_valid_simplices() {
    let dims = tiny_dims();
    for seed in 0..8 {
        let p = random_params(seed, dims);
        let (env, eps) = test_env(seed);
        let r = run_episode(&p, &env, &eps[0], DecodeMode::TeacherForced, true, None, None, 16);
        for trace in r.traces() {
            let beta_sum: f64 = trace.attention_weights.iter().sum();
            let dist_sum: f64 = trace.action_distribution.iter().sum();
            assert!((beta_sum - 1.0).abs() < 1e-9);
            assert!((dist_sum - 1.0).abs() < 1e-9);
            assert!(trace.action_distribution.iter().all(|&x| x > 0.0));
        }
    }
}

#[test]
fn softmax_backward_rows_sum_to_zero() {
    // The attention backward relies on g_s = beta * (g_beta - <beta, g_beta>)
    // summing to zero along the token axis; check it numerically.
    let mut rng = rng::stream(5, "softmax", 0, 0);
    for _ in 0..50 {
        let n = rng.gen_range(2..10);
        let beta_raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let beta = crate::agent::tape::softmax(&beta_raw);
        let g_beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let inner: f64 = beta.iter().zip(&g_beta).map(|(a, b)| a * b).sum();
        let g_s_sum: f64 = beta.iter().zip(&g_beta).map(|(b, g)| b * (g - inner)).sum();
        assert!(g_s_sum.abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Teacher-forced IL loss as a pure function of the flattened parameters.
fn il_loss_at(flat: &[f64], dims: Dims, env: &envgen::EnvironmentGraph, ep: &envgen::Episode) -> f64 {
    let p = ModelParams::from_flat(dims, flat);
    let budget = 2 * (ep.reference_path.len() - 1) + 4;
    let r = run_episode(&p, env, ep, DecodeMode::TeacherForced, true, None, None, budget);
    il_loss(&r.tape, &r.targets).value
}

/// Fixed-action RL loss as a pure function of the flattened parameters.
/// The advantage in the policy term carries a stop-gradient, so the oracle
/// must use the advantages frozen at the base point; the value term keeps
/// its full dependence on the critic.
fn rl_loss_at(
    flat: &[f64],
    dims: Dims,
    env: &envgen::EnvironmentGraph,
    ep: &envgen::Episode,
    actions: &[usize],
    returns: &[f64],
    base_advantages: &[f64],
) -> f64 {
    let p = ModelParams::from_flat(dims, flat);
    let mut forcer = ForcedActions(actions.to_vec());
    let r = run_episode(
        &p,
        env,
        ep,
        DecodeMode::TeacherForced,
        true,
        None,
        Some(&mut forcer),
        actions.len(),
    );
    let mut value = 0.0;
    for (t, cache) in r.tape.steps.iter().enumerate() {
        value += -cache.probs[actions[t]].ln() * base_advantages[t];
        let a = returns[t] - cache.value;
        value += 0.5 * a * a;
    }
    value
}

struct ForcedActions(Vec<usize>);

impl StepPoisoner for ForcedActions {
    fn poison_step(&mut self, step: usize, _c: &mut [Vec<f64>], _t: usize) -> PoisonOutcome {
        PoisonOutcome { target: self.0[step], trigger_slot: None }
    }
}

#[test]
fn il_gradient_matches_central_finite_difference_every_coordinate() {
    let dims = Dims { vocab: crate::envgen::VOCAB_SIZE, d_u: 4, l_max: 49, feature_dim: 16, d_h: 4 };
    let p = random_params(11, dims);
    let (env, eps) = test_env(11);
    // Single-step case: force an immediate STOP target.
    let mut ep = eps[0].clone();
    ep.goal = ep.start;
    ep.reference_path = vec![ep.start];
    ep.teacher_actions = vec![env.adjacency[ep.start as usize].len()];

    let r = run_episode(&p, &env, &ep, DecodeMode::TeacherForced, true, None, None, 6);
    assert_eq!(r.tape.steps.len(), 1);
    let loss = il_loss(&r.tape, &r.targets);
    let grads = compute_gradients(&p, &loss).unwrap().flatten();

    let mut flat = p.flatten();
    let step = 1e-3;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        let up = il_loss_at(&flat, dims, &env, &ep);
        flat[i] = orig - step;
        let down = il_loss_at(&flat, dims, &env, &ep);
        flat[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let denom = fd.abs().max(grads[i].abs()).max(1e-6);
        assert!(
            (fd - grads[i]).abs() / denom < 1e-4,
            "coordinate {i}: analytic {} vs fd {fd}",
            grads[i]
        );
    }
}

#[test]
fn mixed_gradient_matches_finite_difference_on_sampled_coordinates() {
    let dims = tiny_dims();
    for seed in 0..4 {
        let p = random_params(20 + seed, dims);
        let (env, eps) = test_env(30 + seed);
        let ep = &eps[(seed % 4) as usize];
        let budget = 2 * (ep.reference_path.len() - 1) + 4;

        let r = run_episode(&p, &env, ep, DecodeMode::TeacherForced, true, None, None, budget);
        // Reuse the teacher path as the forced action sequence, with random
        // rewards so every advantage is nontrivial.
        let mut rng = rng::stream(seed, "rl-actions", 0, 0);
        let actions = r.actions.clone();
        let rewards: Vec<f64> = actions.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();

        let il = il_loss(&r.tape, &r.targets);
        let mut forcer = ForcedActions(actions.clone());
        let r_rl = run_episode(
            &p,
            &env,
            ep,
            DecodeMode::TeacherForced,
            true,
            None,
            Some(&mut forcer),
            actions.len(),
        );
        let rl = rl_loss(&r_rl.tape, &actions, &rewards, 0.95);
        let returns = crate::localtrain::discounted_returns(&rewards, 0.95);
        let base_advantages: Vec<f64> = r_rl
            .tape
            .steps
            .iter()
            .zip(&returns)
            .map(|(c, &g)| g - c.value)
            .collect();
        let loss = LossGraph::weighted_sum(vec![(0.5, il), (0.5, rl)]);
        let grads = compute_gradients(&p, &loss).unwrap().flatten();

        let mut flat = p.flatten();
        let step = 1e-3;
        let mut coord_rng = rng::stream(seed, "coords", 0, 0);
        for _ in 0..120 {
            let i = coord_rng.gen_range(0..flat.len());
            let orig = flat[i];
            flat[i] = orig + step;
            let up = 0.5 * il_loss_at(&flat, dims, &env, ep)
                + 0.5 * rl_loss_at(&flat, dims, &env, ep, &actions, &returns, &base_advantages);
            flat[i] = orig - step;
            let down = 0.5 * il_loss_at(&flat, dims, &env, ep)
                + 0.5 * rl_loss_at(&flat, dims, &env, ep, &actions, &returns, &base_advantages);
            flat[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-4,
                "seed {seed} coordinate {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }
}

#[test]
fn zero_weight_loss_gives_zero_gradient() {
    let dims = tiny_dims();
    let p = random_params(40, dims);
    let (env, eps) = test_env(40);
    let r = run_episode(&p, &env, &eps[0], DecodeMode::TeacherForced, true, None, None, 16);
    let il = il_loss(&r.tape, &r.targets);
    let loss = LossGraph::weighted_sum(vec![(0.0, il)]);
    let grads = compute_gradients(&p, &loss).unwrap();
    assert!(grads.flatten().iter().all(|&g| g == 0.0));
}
