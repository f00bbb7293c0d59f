//! Desk-scale simulator for federated vision-and-language navigation,
//! targeted backdoor attacks on it, and Byzantine-robust aggregation
//! defenses including prompt-based client filtering.
//!
//! The crate is organized around the lifecycle of one experiment:
//!
//! - [`envgen`] procedurally builds Non-IID client environments and
//!   navigation episodes with templated instructions.
//! - [`agent`] is the navigation policy: instruction encoder, recurrent
//!   step encoder, cross-modal attention with prompt injection, candidate
//!   scoring, and exact reverse-mode gradients.
//! - [`localtrain`] runs client-side imitation + actor-critic training and
//!   produces the per-round upload message.
//! - [`attack`] implements the feature-space trigger, supervision and
//!   reward poisoning, and a Badnets-style baseline.
//! - [`robust_agg`] holds the server aggregation rules: FedAvg, Median,
//!   Trimmed Mean, Multi-Krum, Bulyan, FLTrust, and prompt-based
//!   aggregation with its two ablation variants.
//! - [`metrics`] computes SR/SPL/OSR/NE/CLS/nDTW and the attack success
//!   rate over realized paths.
//! - [`fedsim`] is the orchestrator: round loop, client sampling,
//!   evaluation scheduling, and hash-chained round logs.
//! - [`report`] turns finished run directories into summary tables and
//!   plot-ready CSV.
//! - [`scenarios`] names the shipped config templates.
//! - [`harness`] backs the CLI: config overrides, multi-seed execution,
//!   the finite-difference gradient check, and the aggregation oracle
//!   runner.

pub mod agent;
pub mod attack;
pub mod envgen;
pub mod fedsim;
pub mod harness;
pub mod localtrain;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod robust_agg;
pub mod scenarios;
