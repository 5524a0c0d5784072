//! End-to-end generative ad ranking and auction pipeline at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 matrices, a global FLOP counter, a reverse-mode
//!   tape, parameter storage, the Dice activation, checkpoints, and a
//!   finite-difference gradient checker.
//! - [`feature_store`]: local ad-feature store and simulated remote user
//!   fetch with access counters.
//! - [`recformer`]: cluster attention, the stacked set encoder with
//!   mid-fusion between ad set and behavior sequence, and the set-aware
//!   click head.
//! - [`aucformer`]: non-autoregressive slot allocation with bid bias, the
//!   permutation-aware evaluator, the sigmoidal payment network, and a
//!   generalized second price baseline.
//! - [`training`]: the four-phase schedule (pretrain, reward model,
//!   policy-gradient allocation tuning, payment tuning with dual ascent).
//! - [`evaluation`]: ranking and value metrics, empirical misreport regret,
//!   and the FLOP accountant with closed-form totals.
//! - [`harness`]: synthetic auction world, experiment driver, and the CLI.

pub mod aucformer;
pub mod evaluation;
pub mod feature_store;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod recformer;
pub mod training;
