//! Knowledge-graph guided diffusion for synthetic clinical event trajectories.
//!
//! The pipeline runs in stages that mirror the modules below:
//!
//! * [`kg`]: typed knowledge graph with provenance and validity intervals,
//!   TSV loading, neighborhood pruning and a toy generator.
//! * [`metapath`]: bounded simple-path counting from an anchor disease to
//!   every vocabulary token, giving the clipped scores `psi` and the
//!   per-pattern feature matrix used for FiLM conditioning.
//! * [`schedule`]: linear base noise rate, its per-token modulation and the
//!   closed-form marginal signal level.
//! * [`cohort`]: ground-truth cohort simulator, one-hot encoding and
//!   chronological splits.
//! * [`denoiser`]: the noise-prediction network with hand-written gradients.
//! * [`trainer`]: Adam with warm-up/cosine decay, checkpoints and resumption.
//! * [`sampler`]: Euler–Maruyama reverse integration, decoding and timestamps.
//! * [`eval`]: MMD, TSTR, membership-inference attackers and AUROC.
//! * [`pipeline`]: run configuration, stage orchestration, manifests and the
//!   guidance-strength sweep.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Both paths produce bit-identical results.

pub mod cohort;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod exec;
pub mod kg;
pub mod metapath;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
