//! Taped forward pass and exact reverse-mode gradients.
//!
//! The tape caches every intermediate the backward pass needs, per step.
//! Backward walks steps in reverse, carrying the hidden-state cotangent
//! through the recurrence, and accumulates into a `ModelParams`-shaped
//! gradient. Candidate features and previous-action embeddings are data,
//! not parameters, so no gradient flows into them.

use crate::agent::params::{
    Dims, ModelParams, SEG_ATTN_W, SEG_ATTN_WU, SEG_CRITIC_B, SEG_CRITIC_W, SEG_POS_EMB,
    SEG_PROMPT_L, SEG_PROMPT_L_IN, SEG_PROMPT_V, SEG_PROMPT_V_IN, SEG_SCORER, SEG_STOP_FEATURE,
    SEG_TOKEN_EMB, SEG_VIEW_B, SEG_VIEW_W,
};

/// y = W x for a row-major `rows x cols` matrix.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, yr) in y.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *yr = acc;
    }
}

/// y = W^T g for a row-major `rows x cols` matrix.
fn matvec_t(w: &[f64], rows: usize, cols: usize, g: &[f64], y: &mut [f64]) {
    debug_assert_eq!(g.len(), rows);
    y.iter_mut().for_each(|v| *v = 0.0);
    for (r, gr) in g.iter().enumerate().take(rows) {
        if *gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (yv, wv) in y.iter_mut().zip(row) {
            *yv += gr * wv;
        }
    }
}

/// grad_w += g_out * x^T.
fn outer_add(grad_w: &mut [f64], g_out: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, g) in g_out.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let row = &mut grad_w[r * cols..(r + 1) * cols];
        for (wv, xv) in row.iter_mut().zip(x) {
            *wv += g * xv;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-step cache of forward intermediates.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Non-STOP candidate features at this step (post-poisoning).
    pub candidates: Vec<Vec<f64>>,
    pub f_in: Vec<f64>,
    pub a_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub h: Vec<f64>,
    pub h_prime: Vec<f64>,
    /// W_U h' (the attention query image in token space).
    pub wu_h: Vec<f64>,
    pub scores: Vec<f64>,
    pub beta: Vec<f64>,
    pub u_tilde: Vec<f64>,
    pub h_tilde: Vec<f64>,
    /// action_scorer h~ (feature-space score direction).
    pub q: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

/// Whole-episode forward record.
#[derive(Debug, Clone)]
pub struct EpisodeTape {
    pub dims: Dims,
    pub use_prompts: bool,
    pub tokens: Vec<u16>,
    /// Effective token embeddings: token + positional (+ input and
    /// attention language prompts when enabled).
    pub u_eff: Vec<Vec<f64>>,
    pub steps: Vec<StepCache>,
}

impl EpisodeTape {
    pub fn new(params: &ModelParams, tokens: &[u16], use_prompts: bool) -> Self {
        let dims = params.dims;
        let u_eff = effective_embeddings(params, tokens, use_prompts);
        Self { dims, use_prompts, tokens: tokens.to_vec(), u_eff, steps: Vec::new() }
    }

    /// Run one step and append its cache. Returns the step index.
    pub fn forward_step(
        &mut self,
        params: &ModelParams,
        candidates: Vec<Vec<f64>>,
        a_prev: Vec<f64>,
        h_prev: Vec<f64>,
    ) -> usize {
        let cache = forward_step_core(params, &self.u_eff, candidates, a_prev, h_prev, self.use_prompts);
        self.steps.push(cache);
        self.steps.len() - 1
    }

    /// Accumulate `weight * dL/dparams` into `grads`, given per-step logit
    /// and value cotangents.
    pub fn backward(
        &self,
        params: &ModelParams,
        g_logits: &[Vec<f64>],
        g_values: &[f64],
        weight: f64,
        grads: &mut ModelParams,
    ) {
        assert_eq!(g_logits.len(), self.steps.len());
        assert_eq!(g_values.len(), self.steps.len());
        let d = self.dims.feature_dim;
        let (d_u, d_h) = (self.dims.d_u, self.dims.d_h);
        let enc_in = 2 * d + d_h;
        let fuse_in_len = d_u + d_h;
        let num_tokens = self.u_eff.len();

        let mut g_u_eff = vec![vec![0.0; d_u]; num_tokens];
        let mut g_h_carry = vec![0.0; d_h];

        let mut g_h_tilde = vec![0.0; d_h];
        let mut g_q = vec![0.0; d];
        let mut g_fuse_pre = vec![0.0; d_h];
        let mut g_fuse_in = vec![0.0; fuse_in_len];
        let mut g_h_prime = vec![0.0; d_h];
        let mut g_pre = vec![0.0; d_h];
        let mut g_x = vec![0.0; enc_in];
        let mut z = vec![0.0; d_u];
        let mut wu_t_z = vec![0.0; d_h];
        let mut fuse_input = vec![0.0; fuse_in_len];
        let mut enc_input = vec![0.0; enc_in];

        for (t, step) in self.steps.iter().enumerate().rev() {
            let gl = &g_logits[t];
            let gv = g_values[t] * weight;
            debug_assert_eq!(gl.len(), step.candidates.len() + 1);

            // Logits: candidate k scores q . f_k; STOP scores q . stop_feature.
            g_q.iter_mut().for_each(|v| *v = 0.0);
            for (k, f) in step.candidates.iter().enumerate() {
                let g = gl[k] * weight;
                if g != 0.0 {
                    for (gq, fv) in g_q.iter_mut().zip(f) {
                        *gq += g * fv;
                    }
                }
            }
            let g_stop = gl[step.candidates.len()] * weight;
            if g_stop != 0.0 {
                let stop = params.seg(SEG_STOP_FEATURE);
                for (gq, sv) in g_q.iter_mut().zip(stop) {
                    *gq += g_stop * sv;
                }
                let gs = grads.seg_mut(SEG_STOP_FEATURE);
                for (g, qv) in gs.iter_mut().zip(&step.q) {
                    *g += g_stop * qv;
                }
            }

            // Action scorer and critic head, both reading h~.
            outer_add(grads.seg_mut(SEG_SCORER), &g_q, &step.h_tilde);
            matvec_t(params.seg(SEG_SCORER), d, d_h, &g_q, &mut g_h_tilde);
            if gv != 0.0 {
                let gw = grads.seg_mut(SEG_CRITIC_W);
                for (g, hv) in gw.iter_mut().zip(&step.h_tilde) {
                    *g += gv * hv;
                }
                grads.seg_mut(SEG_CRITIC_B)[0] += gv;
                let cw = params.seg(SEG_CRITIC_W);
                for (g, wv) in g_h_tilde.iter_mut().zip(cw) {
                    *g += gv * wv;
                }
            }

            // h~ = tanh(W [u~; h']).
            for ((gp, gh), ht) in g_fuse_pre.iter_mut().zip(&g_h_tilde).zip(&step.h_tilde) {
                *gp = gh * (1.0 - ht * ht);
            }
            fuse_input[..d_u].copy_from_slice(&step.u_tilde);
            fuse_input[d_u..].copy_from_slice(&step.h_prime);
            outer_add(grads.seg_mut(SEG_ATTN_W), &g_fuse_pre, &fuse_input);
            matvec_t(params.seg(SEG_ATTN_W), d_h, fuse_in_len, &g_fuse_pre, &mut g_fuse_in);
            let g_u_tilde = &g_fuse_in[..d_u];
            g_h_prime.copy_from_slice(&g_fuse_in[d_u..]);

            // u~ = sum_j beta_j u'_j, beta = softmax(s), s_j = u'_j . (W_U h').
            let mut g_beta = vec![0.0; step.beta.len()];
            for (j, gb) in g_beta.iter_mut().enumerate() {
                *gb = dot(g_u_tilde, &self.u_eff[j]);
                for (gu, gt) in g_u_eff[j].iter_mut().zip(g_u_tilde) {
                    *gu += step.beta[j] * gt;
                }
            }
            let inner = dot(&step.beta, &g_beta);
            z.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..step.beta.len() {
                let g_s = step.beta[j] * (g_beta[j] - inner);
                if g_s != 0.0 {
                    for (zv, uv) in z.iter_mut().zip(&self.u_eff[j]) {
                        *zv += g_s * uv;
                    }
                    for (gu, wv) in g_u_eff[j].iter_mut().zip(&step.wu_h) {
                        *gu += g_s * wv;
                    }
                }
            }
            outer_add(grads.seg_mut(SEG_ATTN_WU), &z, &step.h_prime);
            matvec_t(params.seg(SEG_ATTN_WU), d_u, d_h, &z, &mut wu_t_z);
            for (g, w) in g_h_prime.iter_mut().zip(&wu_t_z) {
                *g += w;
            }

            // h' = h + p_V.
            if self.use_prompts {
                let gp = grads.seg_mut(SEG_PROMPT_V);
                for (g, v) in gp.iter_mut().zip(&g_h_prime) {
                    *g += v;
                }
            }
            // Total hidden cotangent: this step plus the recurrence carry.
            for (g, c) in g_h_prime.iter_mut().zip(&g_h_carry) {
                *g += c;
            }

            // h = tanh(W_enc [f_in; a_prev; h_prev] + b).
            for ((gp, gh), hv) in g_pre.iter_mut().zip(&g_h_prime).zip(&step.h) {
                *gp = gh * (1.0 - hv * hv);
            }
            enc_input[..d].copy_from_slice(&step.f_in);
            enc_input[d..2 * d].copy_from_slice(&step.a_prev);
            enc_input[2 * d..].copy_from_slice(&step.h_prev);
            outer_add(grads.seg_mut(SEG_VIEW_W), &g_pre, &enc_input);
            let gb = grads.seg_mut(SEG_VIEW_B);
            for (g, p) in gb.iter_mut().zip(&g_pre) {
                *g += p;
            }
            matvec_t(params.seg(SEG_VIEW_W), d_h, enc_in, &g_pre, &mut g_x);
            if self.use_prompts {
                let gp = grads.seg_mut(SEG_PROMPT_V_IN);
                for (g, v) in gp.iter_mut().zip(&g_x[..d]) {
                    *g += v;
                }
            }
            g_h_carry.copy_from_slice(&g_x[2 * d..]);
        }

        // Token-space cotangents fan out to embeddings and language prompts.
        for (j, g) in g_u_eff.iter().enumerate() {
            let tok = self.tokens[j] as usize;
            let ge = grads.seg_mut(SEG_TOKEN_EMB);
            for (gv, v) in ge[tok * d_u..(tok + 1) * d_u].iter_mut().zip(g) {
                *gv += v;
            }
            let gp = grads.seg_mut(SEG_POS_EMB);
            for (gv, v) in gp[j * d_u..(j + 1) * d_u].iter_mut().zip(g) {
                *gv += v;
            }
            if self.use_prompts {
                let gl = grads.seg_mut(SEG_PROMPT_L);
                for (gv, v) in gl.iter_mut().zip(g) {
                    *gv += v;
                }
                let gli = grads.seg_mut(SEG_PROMPT_L_IN);
                for (gv, v) in gli.iter_mut().zip(g) {
                    *gv += v;
                }
            }
        }
    }
}

/// Token embedding + positional embedding (+ language prompts when enabled).
pub(crate) fn effective_embeddings(
    params: &ModelParams,
    tokens: &[u16],
    use_prompts: bool,
) -> Vec<Vec<f64>> {
    let d_u = params.dims.d_u;
    let tok_emb = params.seg(SEG_TOKEN_EMB);
    let pos_emb = params.seg(SEG_POS_EMB);
    tokens
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let t = t as usize;
            let mut u: Vec<f64> = tok_emb[t * d_u..(t + 1) * d_u]
                .iter()
                .zip(&pos_emb[j * d_u..(j + 1) * d_u])
                .map(|(a, b)| a + b)
                .collect();
            if use_prompts {
                for ((x, pl), pli) in
                    u.iter_mut().zip(params.seg(SEG_PROMPT_L)).zip(params.seg(SEG_PROMPT_L_IN))
                {
                    *x += pl + pli;
                }
            }
            u
        })
        .collect()
}

/// One decision step: view encoding, prompt injection, cross-modal
/// attention, fused hidden, candidate scoring, and the value estimate.
pub(crate) fn forward_step_core(
    params: &ModelParams,
    u_eff: &[Vec<f64>],
    candidates: Vec<Vec<f64>>,
    a_prev: Vec<f64>,
    h_prev: Vec<f64>,
    use_prompts: bool,
) -> StepCache {
    let dims = params.dims;
    let d = dims.feature_dim;
    let (d_u, d_h) = (dims.d_u, dims.d_h);
    assert!(!u_eff.is_empty(), "empty instruction");
    assert!(!candidates.is_empty(), "need at least one non-STOP candidate");

    // View summary: mean candidate feature, plus the input visual prompt.
    let mut f_in = vec![0.0; d];
    for c in &candidates {
        assert_eq!(c.len(), d, "candidate feature dimension mismatch");
        for (s, v) in f_in.iter_mut().zip(c) {
            *s += v;
        }
    }
    let inv = 1.0 / candidates.len() as f64;
    f_in.iter_mut().for_each(|v| *v *= inv);
    if use_prompts {
        for (s, p) in f_in.iter_mut().zip(params.seg(SEG_PROMPT_V_IN)) {
            *s += p;
        }
    }

    let enc_in_len = 2 * d + d_h;
    let mut enc_input = vec![0.0; enc_in_len];
    enc_input[..d].copy_from_slice(&f_in);
    enc_input[d..2 * d].copy_from_slice(&a_prev);
    enc_input[2 * d..].copy_from_slice(&h_prev);
    let mut h = vec![0.0; d_h];
    matvec(params.seg(SEG_VIEW_W), d_h, enc_in_len, &enc_input, &mut h);
    for (hv, b) in h.iter_mut().zip(params.seg(SEG_VIEW_B)) {
        *hv = (*hv + b).tanh();
    }

    let mut h_prime = h.clone();
    if use_prompts {
        for (hv, p) in h_prime.iter_mut().zip(params.seg(SEG_PROMPT_V)) {
            *hv += p;
        }
    }

    let mut wu_h = vec![0.0; d_u];
    matvec(params.seg(SEG_ATTN_WU), d_u, d_h, &h_prime, &mut wu_h);
    let scores: Vec<f64> = u_eff.iter().map(|u| dot(u, &wu_h)).collect();
    let beta = softmax(&scores);
    let mut u_tilde = vec![0.0; d_u];
    for (b, u) in beta.iter().zip(u_eff) {
        for (s, v) in u_tilde.iter_mut().zip(u) {
            *s += b * v;
        }
    }

    let mut fuse_input = vec![0.0; d_u + d_h];
    fuse_input[..d_u].copy_from_slice(&u_tilde);
    fuse_input[d_u..].copy_from_slice(&h_prime);
    let mut h_tilde = vec![0.0; d_h];
    matvec(params.seg(SEG_ATTN_W), d_h, d_u + d_h, &fuse_input, &mut h_tilde);
    h_tilde.iter_mut().for_each(|v| *v = v.tanh());

    let mut q = vec![0.0; d];
    matvec(params.seg(SEG_SCORER), d, d_h, &h_tilde, &mut q);
    let mut logits: Vec<f64> = candidates.iter().map(|c| dot(&q, c)).collect();
    logits.push(dot(&q, params.seg(SEG_STOP_FEATURE)));
    let probs = softmax(&logits);
    let value = dot(params.seg(SEG_CRITIC_W), &h_tilde) + params.seg(SEG_CRITIC_B)[0];

    StepCache {
        candidates,
        f_in,
        a_prev,
        h_prev,
        h,
        h_prime,
        wu_h,
        scores,
        beta,
        u_tilde,
        h_tilde,
        q,
        logits,
        probs,
        value,
    }
}
