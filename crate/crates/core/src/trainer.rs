//! Adam optimization of the denoiser with warm-up and cosine decay,
//! checkpointing and exact resumption.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{init_params, loss_and_gradient, DenoiserParams, FilmFeatures, NetConfig, NoiseKey, TrajectoryTensor};
use crate::error::{Error, Result};
use crate::metapath::MetaPathProfile;
use crate::rng;
use crate::schedule::ScheduleParams;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of steps over which the loss weight ramps linearly from
    /// near zero to one. Zero disables the ramp.
    pub anneal: f64,
    /// Trace rows are written every `log_every` steps.
    pub log_every: u64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-3,
            warmup_steps: 1000,
            total_steps: 20_000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            anneal: 0.1,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            v.push(format!("train.peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            v.push(format!(
                "train.warmup_steps {} must be below train.total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            v.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            v.push("train.adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.anneal) {
            v.push(format!("train.anneal {} outside [0, 1]", self.anneal));
        }
        if self.log_every == 0 {
            v.push("train.log_every must be at least 1".into());
        }
        v
    }

    /// Multiplier on the loss at `step`.
    pub fn anneal_factor(&self, step: u64) -> f64 {
        let ramp = self.anneal * self.total_steps as f64;
        if ramp < 1.0 {
            1.0
        } else {
            ((step + 1) as f64 / ramp).min(1.0)
        }
    }
}

/// Learning rate at `step`: linear warm-up then cosine decay to zero.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    if span == 0.0 {
        return Ok(cfg.peak_lr);
    }
    let frac = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: DenoiserParams,
    pub v: DenoiserParams,
    pub step: u64,
}

impl OptimState {
    pub fn new(cfg: NetConfig) -> Self {
        OptimState {
            m: DenoiserParams::zeros(cfg),
            v: DenoiserParams::zeros(cfg),
            step: 0,
        }
    }
}

/// Bias-corrected Adam on flat slices. `step` is the 1-based step number.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &TrainConfig) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
    }
}

/// One Adam step over all parameter groups. Fails without touching anything
/// if any gradient is non-finite.
pub fn adam_step(params: &mut DenoiserParams, grads: &DenoiserParams, opt: &mut OptimState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.cfg != grads.cfg {
        return Err(Error::Shape("gradient and parameter configs differ".into()));
    }
    for (name, g) in grads.groups() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter group `{name}` at step {}", opt.step + 1)));
        }
    }
    opt.step += 1;
    let gs: Vec<&Array2<f64>> = grads.groups().into_iter().map(|(_, a)| a).collect();
    let ms = opt.m.groups_mut();
    let vs = opt.v.groups_mut();
    for (((w, g), m), v) in params.groups_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        // Matrix products on transposed views can hand back column-major
        // gradients; the update itself works on row-major slices.
        let g = g.as_standard_layout();
        for a in [&mut *w, &mut *m, &mut *v] {
            if !a.is_standard_layout() {
                *a = a.as_standard_layout().into_owned();
            }
        }
        adam_update(
            w.as_slice_mut().expect("standard layout"),
            g.as_slice().expect("standard layout"),
            m.as_slice_mut().expect("standard layout"),
            v.as_slice_mut().expect("standard layout"),
            opt.step,
            lr,
            cfg,
        );
    }
    Ok(())
}

/// Schedule scores and FiLM features derived from a profile. With
/// `lambda == 0` the FiLM input is zeroed, which makes the network the
/// unguided baseline.
pub fn conditioning(profile: &MetaPathProfile) -> Result<(Vec<f64>, FilmFeatures)> {
    let v = profile.vocab_size();
    let feats = if profile.lambda == 0.0 {
        FilmFeatures::zeros(v, profile.d)
    } else {
        let psi = Array2::from_shape_vec((v, profile.d), profile.psi_matrix.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        FilmFeatures::new(psi.view())?
    };
    Ok((profile.psi_clipped.clone(), feats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub opt: OptimState,
    /// Un-annealed batch loss of every completed step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

fn to_blobs(p: &DenoiserParams) -> Vec<ParamBlob> {
    p.groups()
        .into_iter()
        .map(|(name, a)| ParamBlob {
            name,
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        })
        .collect()
}

fn from_blobs(cfg: NetConfig, blobs: &[ParamBlob]) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(cfg);
    let expected: Vec<(String, [usize; 2])> = p.groups().into_iter().map(|(n, a)| (n, [a.nrows(), a.ncols()])).collect();
    if expected.len() != blobs.len() {
        return Err(Error::Shape(format!("checkpoint has {} parameter groups, config implies {}", blobs.len(), expected.len())));
    }
    for ((name, shape), b) in expected.iter().zip(blobs) {
        if &b.name != name || &b.shape != shape || b.data.len() != shape[0] * shape[1] {
            return Err(Error::Shape(format!("checkpoint group `{}` {:?} does not match `{name}` {shape:?}", b.name, b.shape)));
        }
    }
    let flat: Vec<f64> = blobs.iter().flat_map(|b| b.data.iter().copied()).collect();
    p.assign(&flat)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

/// Serialized training snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub net: NetConfig,
    pub schedule: ScheduleParams,
    pub lambda: f64,
    pub train: TrainConfig,
    pub params: Vec<ParamBlob>,
    pub adam_m: Vec<ParamBlob>,
    pub adam_v: Vec<ParamBlob>,
    pub step: u64,
    pub rng: RngState,
    pub losses: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, sched: &ScheduleParams, train: &TrainConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            net: state.params.cfg,
            schedule: *sched,
            lambda: sched.lambda,
            train: train.clone(),
            params: to_blobs(&state.params),
            adam_m: to_blobs(&state.opt.m),
            adam_v: to_blobs(&state.opt.v),
            step: state.opt.step,
            rng: RngState {
                seed: train.seed,
                step: state.opt.step,
            },
            losses: state.losses.clone(),
        }
    }

    pub fn params(&self) -> Result<DenoiserParams> {
        from_blobs(self.net, &self.params)
    }

    pub fn to_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            params: self.params()?,
            opt: OptimState {
                m: from_blobs(self.net, &self.adam_m)?,
                v: from_blobs(self.net, &self.adam_v)?,
                step: self.step,
            },
            losses: self.losses.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let found = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut ck: Checkpoint = serde_json::from_value(v)?;
        ck.train.seed = ck.rng.seed;
        ck.net.validate()?;
        ck.to_state()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Training loop over a fixed dataset.
pub struct Trainer<'a> {
    data: &'a [TrajectoryTensor],
    psi: Vec<f64>,
    feats: FilmFeatures,
    sched: ScheduleParams,
    net: NetConfig,
    cfg: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a [TrajectoryTensor],
        profile: &MetaPathProfile,
        sched: ScheduleParams,
        net: NetConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("training dataset".into()));
        }
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        net.validate()?;
        sched.validate()?;
        if sched.lambda != profile.lambda {
            return Err(Error::invalid(format!(
                "schedule lambda {} differs from profile lambda {}",
                sched.lambda, profile.lambda
            )));
        }
        let v = profile.vocab_size();
        if net.vocab_size != v || net.film_dim != profile.d {
            return Err(Error::VocabMismatch(format!(
                "network expects V={} d={}, profile has V={v} d={}",
                net.vocab_size, net.film_dim, profile.d
            )));
        }
        if let Some(bad) = data.iter().find(|x| x.values().dim() != (net.seq_len, v)) {
            return Err(Error::VocabMismatch(format!(
                "training tensor is {:?}, expected ({}, {v})",
                bad.values().dim(),
                net.seq_len
            )));
        }
        let (psi, feats) = conditioning(profile)?;
        Ok(Trainer {
            data,
            psi,
            feats,
            sched,
            net,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            params: init_params(self.net, self.cfg.seed)?,
            opt: OptimState::new(self.net),
            losses: Vec::new(),
        })
    }

    /// Dataset indices for `step`: consecutive slices of per-epoch shuffles.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..b {
            let pos = step * b + j;
            let epoch = pos / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..self.data.len()).collect();
                perm.shuffle(&mut rng::stream(self.cfg.seed, "shuffle", &[epoch]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("set above").1[(pos % n) as usize]);
        }
        out
    }

    /// Runs steps until `state` has completed `until` steps (capped at
    /// `total_steps`), calling `on_log` for every trace row.
    pub fn run(&self, state: &mut TrainState, until: u64, mut on_log: impl FnMut(&TraceRow)) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while state.opt.step < until {
            let step = state.opt.step;
            let idx = self.batch_indices(step);
            let batch: Vec<TrajectoryTensor> = idx.iter().map(|&i| self.data[i].clone()).collect();
            let keys = NoiseKey::for_step(self.cfg.seed, step, batch.len());
            let (loss, mut grad) = loss_and_gradient(&state.params, &batch, &self.feats, &self.psi, &self.sched, &keys)?;
            let factor = self.cfg.anneal_factor(step);
            if factor != 1.0 {
                grad.scale(factor);
            }
            let lr = lr_at(&self.cfg, step)?;
            adam_step(&mut state.params, &grad, &mut state.opt, lr, &self.cfg)?;
            state.losses.push(loss);
            let done = state.opt.step;
            if done % self.cfg.log_every == 0 || done == self.cfg.total_steps {
                let lo = state.losses.len().saturating_sub(self.cfg.log_every as usize);
                let window = &state.losses[lo..];
                on_log(&TraceRow {
                    step: done,
                    loss: window.iter().sum::<f64>() / window.len() as f64,
                    lr,
                });
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::from_state(state, &self.sched, &self.cfg)
    }
}

/// Trace rows reconstructed from a completed loss history.
pub fn trace_rows(cfg: &TrainConfig, losses: &[f64]) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for done in 1..=losses.len() as u64 {
        if done % cfg.log_every == 0 || done == cfg.total_steps {
            let lo = (done as usize).saturating_sub(cfg.log_every as usize);
            let window = &losses[lo..done as usize];
            rows.push(TraceRow {
                step: done,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                lr: lr_at(cfg, done - 1)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,loss,lr")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

/// Trailing moving average with window `k`.
pub fn smoothed(losses: &[f64], k: usize) -> Vec<f64> {
    let k = k.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(k);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
