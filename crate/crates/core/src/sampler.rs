//! Reverse-time Euler-Maruyama sampling, decoding and timestamping.

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{EmpiricalGapDistribution, EmpiricalLengthDistribution, Event, TokenFrequencies, Trajectory};
use crate::denoiser::{Denoiser, EpsModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::metapath::{MetaPathProfile, TokenVocab};
use crate::rng;
use crate::schedule::ScheduleParams;
use crate::trainer::{conditioning, Checkpoint};

/// Smallest gap between consecutive synthetic visits, in days.
pub const MIN_GAP_DAYS: f64 = 1e-3;
/// Floor on `1 - alpha` when converting noise estimates to scores.
const SCORE_FLOOR: f64 = 1e-12;

pub type SyntheticTrajectory = Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// `dx = -beta s dt + sqrt(beta) dW` in reverse time.
    ScoreOnly,
    /// Adds the `-beta x / 2` drift of the variance-preserving forward process.
    VpConsistent,
}

/// Distribution of the starting state at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// `N(0, I)` in every column.
    StandardNormal,
    /// The per-token forward kernel at `t = 1` applied to one-hot rows whose
    /// tokens are drawn from the training fold's per-field frequencies.
    /// Columns the schedule fully noises start at `N(0, 1)`; columns it
    /// barely noises start near a plausible one-hot value instead of at
    /// noise they never saw in training.
    ForwardMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub drift_mode: DriftMode,
    pub noise_on: bool,
    pub prior: PriorMode,
    pub n_trajectories: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step_size: 1e-3,
            drift_mode: DriftMode::VpConsistent,
            noise_on: true,
            prior: PriorMode::ForwardMarginal,
            n_trajectories: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Vec<String> {
        if self.step_size > 0.0 && self.step_size <= 1.0 {
            Vec::new()
        } else {
            vec![format!("sample.step_size {} outside (0, 1]", self.step_size)]
        }
    }

    /// Number of Euler-Maruyama steps from `t = 1` to `t = 0`.
    pub fn n_steps(&self) -> usize {
        (1.0 / self.step_size - 1e-9).ceil() as usize
    }
}

/// Diffusion times at which the network is evaluated, with their step sizes.
/// The last step ends exactly at zero.
pub fn time_grid(step_size: f64) -> Vec<(f64, f64)> {
    let n = (1.0 / step_size - 1e-9).ceil() as usize;
    (0..n)
        .map(|k| {
            let t = (1.0 - k as f64 * step_size).max(0.0);
            (t, step_size.min(t))
        })
        .collect()
}

/// Per-token schedule quantities at one diffusion time.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl StepCoefficients {
    pub fn at(sched: &ScheduleParams, t: f64, psi: &[f64]) -> Result<Self> {
        Ok(StepCoefficients {
            beta: sched.beta_vec(t, psi)?,
            alpha: sched.alpha_vec(t, psi)?,
        })
    }
}

/// One reverse Euler-Maruyama step from `t` to `t - dt` on the unmasked rows.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<M: EpsModel, R: Rng>(
    model: &M,
    x: &Array2<f64>,
    mask: &[bool],
    t: f64,
    dt: f64,
    coef: &StepCoefficients,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if dt <= 0.0 || t - dt < -1e-12 {
        return Err(Error::invalid(format!("reverse step from t={t} by dt={dt} leaves [0, 1]")));
    }
    let eps_hat = model.predict_eps(x.view(), mask, t)?;
    Ok(apply_update(x.view(), &eps_hat, mask, dt, coef, cfg, rng))
}

fn apply_update<R: Rng>(
    x: ArrayView2<f64>,
    eps_hat: &Array2<f64>,
    mask: &[bool],
    dt: f64,
    coef: &StepCoefficients,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let v = x.ncols();
    for (l, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..v {
            let b = coef.beta[j];
            let score = -eps_hat[[l, j]] / (1.0 - coef.alpha[j]).max(SCORE_FLOOR).sqrt();
            let xv = x[[l, j]];
            let mut drift = b * score;
            if cfg.drift_mode == DriftMode::VpConsistent {
                drift += 0.5 * b * xv;
            }
            let mut next = xv + drift * dt;
            if cfg.noise_on {
                let z: f64 = rng.sample(StandardNormal);
                next += (b * dt).sqrt() * z;
            }
            out[[l, j]] = next;
        }
    }
    out
}

/// Integrates from `t = 1` to `t = 0` starting at `x`.
pub fn integrate<M: EpsModel, R: Rng>(
    model: &M,
    mut x: Array2<f64>,
    mask: &[bool],
    sched: &ScheduleParams,
    psi: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    for (k, (t, dt)) in time_grid(cfg.step_size).into_iter().enumerate() {
        let coef = StepCoefficients::at(sched, t, psi)?;
        x = reverse_step(model, &x, mask, t, dt, &coef, cfg, rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state after step {k} (t={t})")));
        }
    }
    Ok(x)
}

fn argmax(row: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for j in range {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Per unmasked row: argmax within each field block, ties to the lowest id.
pub fn decode(x0_hat: ArrayView2<f64>, mask: &[bool], vocab: &TokenVocab) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for (row, &m) in x0_hat.rows().into_iter().zip(mask) {
        if !m {
            continue;
        }
        let r = row.to_vec();
        out.push((
            argmax(&r, vocab.lab_range()),
            argmax(&r, vocab.med_range()),
            argmax(&r, vocab.ae_range()) == vocab.ae_set(),
        ));
    }
    out
}

/// `[0, t_1, ...]` with i.i.d. resampled gaps, each at least [`MIN_GAP_DAYS`].
pub fn sample_timestamps<R: Rng>(gaps: &EmpiricalGapDistribution, length: usize, rng: &mut R) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::invalid("timestamp length must be at least 1"));
    }
    let mut times = Vec::with_capacity(length);
    let mut t = 0.0;
    times.push(t);
    for _ in 1..length {
        t += gaps.draw(rng).max(MIN_GAP_DAYS);
        times.push(t);
    }
    Ok(times)
}

/// Empirical distributions that shape the sampler output.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPriors {
    pub gaps: EmpiricalGapDistribution,
    pub lengths: EmpiricalLengthDistribution,
    /// Needed only by [`PriorMode::ForwardMarginal`].
    pub tokens: Option<TokenFrequencies>,
}

fn block_sampler(freq: &[f64], block: std::ops::Range<usize>) -> Result<(usize, WeightedIndex<f64>)> {
    let w = WeightedIndex::new(&freq[block.clone()]).map_err(|e| Error::invalid(format!("token frequencies: {e}")))?;
    Ok((block.start, w))
}

/// Generates trajectories from any noise model. Trajectory `i` depends only
/// on `(cfg.seed, i)`.
pub fn sample_with_model<M: EpsModel>(
    model: &M,
    sched: &ScheduleParams,
    psi: &[f64],
    vocab: &TokenVocab,
    seq_len: usize,
    priors: &SamplingPriors,
    cfg: &SamplerConfig,
) -> Result<Vec<SyntheticTrajectory>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if model.vocab_size() != vocab.len() || psi.len() != vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "model width {} / profile {} / vocabulary {}",
            model.vocab_size(),
            psi.len(),
            vocab.len()
        )));
    }
    let v = vocab.len();
    let marginal = match cfg.prior {
        PriorMode::StandardNormal => None,
        PriorMode::ForwardMarginal => {
            let freq = priors
                .tokens
                .as_ref()
                .ok_or_else(|| Error::invalid("forward_marginal prior needs token frequencies"))?;
            if freq.as_slice().len() != v {
                return Err(Error::VocabMismatch("token frequencies do not match the vocabulary".into()));
            }
            let blocks = [vocab.lab_range(), vocab.med_range(), vocab.ae_range()]
                .into_iter()
                .map(|b| block_sampler(freq.as_slice(), b))
                .collect::<Result<Vec<_>>>()?;
            Some((sched.alpha_vec(1.0, psi)?, blocks))
        }
    };
    exec::try_map_indexed(cfg.n_trajectories, |i| {
        let mut r = rng::stream(cfg.seed, "sample", &[i as u64]);
        let len = priors.lengths.draw(&mut r, seq_len).max(1);
        let mask: Vec<bool> = (0..seq_len).map(|l| l < len).collect();
        let mut x = Array2::zeros((seq_len, v));
        for l in 0..len {
            for j in 0..v {
                x[[l, j]] = r.sample(StandardNormal);
            }
        }
        if let Some((alpha, blocks)) = &marginal {
            for l in 0..len {
                let mut hot = vec![0.0; v];
                for (start, w) in blocks {
                    hot[start + r.sample(w)] = 1.0;
                }
                for j in 0..v {
                    x[[l, j]] = alpha[j].sqrt() * hot[j] + (1.0 - alpha[j]).sqrt() * x[[l, j]];
                }
            }
        }
        let x0 = integrate(model, x, &mask, sched, psi, cfg, &mut r)?;
        let triples = decode(x0.view(), &mask, vocab);
        let times = sample_timestamps(&priors.gaps, triples.len(), &mut r)?;
        let traj = Trajectory {
            id: i,
            events: triples
                .into_iter()
                .zip(times)
                .map(|((lab, med, ae), t)| Event {
                    t,
                    lab: Some(lab),
                    med: Some(med),
                    ae,
                })
                .collect(),
        };
        traj.validate(vocab)?;
        Ok(traj)
    })
}

/// Generates trajectories from a trained checkpoint.
pub fn sample_trajectories(
    ckpt: &Checkpoint,
    profile: &MetaPathProfile,
    vocab: &TokenVocab,
    priors: &SamplingPriors,
    cfg: &SamplerConfig,
) -> Result<Vec<SyntheticTrajectory>> {
    if !profile.matches_vocab(vocab) || ckpt.net.vocab_size != vocab.len() || ckpt.net.film_dim != profile.d {
        return Err(Error::VocabMismatch("checkpoint, profile and vocabulary disagree".into()));
    }
    if ckpt.lambda != profile.lambda {
        return Err(Error::invalid(format!(
            "checkpoint trained with lambda {}, profile has {}",
            ckpt.lambda, profile.lambda
        )));
    }
    let params = ckpt.params()?;
    let (psi, feats) = conditioning(profile)?;
    let model = Denoiser {
        params: &params,
        feats: &feats,
    };
    sample_with_model(&model, &ckpt.schedule, &psi, vocab, ckpt.net.seq_len, priors, cfg)
}
