//! Ground-truth cohort simulator, trajectory encoding and splits.
//!
//! Patients are drawn from a known, KG-aligned law: each visit emits one lab
//! token and one medication token from `softmax(gamma * psi)` over the
//! respective block, where `psi` is the unclipped meta-path count, plus an
//! adverse-event flag whose rate depends on whether the medication has a
//! drug-to-adverse-event edge. Because the law is explicit, fidelity metrics
//! can be checked against it exactly.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::denoiser::TrajectoryTensor;
use crate::error::{Error, Result};
use crate::exec;
use crate::kg::{KnowledgeGraph, NodeKind};
use crate::metapath::{compute_profile, ProfileOptions, TokenVocab};
use crate::rng::{self, StreamRng};

/// One visit. Token fields hold vocabulary ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub lab: Option<usize>,
    pub med: Option<usize>,
    pub ae: bool,
}

/// Ordered event sequence for a real or synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub events: Vec<Event>,
}

pub type PatientRecord = Trajectory;

impl Trajectory {
    pub fn first_time(&self) -> f64 {
        self.events.first().map_or(f64::INFINITY, |e| e.t)
    }

    pub fn has_ae(&self) -> bool {
        self.events.iter().any(|e| e.ae)
    }

    /// Checks time ordering and token ranges.
    pub fn validate(&self, vocab: &TokenVocab) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::invalid(format!(
                    "trajectory {}: times not strictly increasing ({} then {})",
                    self.id, w[0].t, w[1].t
                )));
            }
        }
        for e in &self.events {
            if !(e.t >= 0.0 && e.t.is_finite()) {
                return Err(Error::invalid(format!("trajectory {}: bad time {}", self.id, e.t)));
            }
            if e.lab.is_none() && e.med.is_none() && !e.ae {
                return Err(Error::invalid(format!("trajectory {}: empty event", self.id)));
            }
            if e.lab.is_some_and(|l| !vocab.lab_range().contains(&l))
                || e.med.is_some_and(|m| !vocab.med_range().contains(&m))
            {
                return Err(Error::VocabMismatch(format!(
                    "trajectory {}: token outside its field block",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitCountDist {
    /// `1 + Poisson(Gamma(dispersion, (mean - 1) / dispersion))`.
    NegBinomial { mean: f64, dispersion: f64 },
    Fixed { visits: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub anchor: String,
    pub n_patients: usize,
    pub visits: VisitCountDist,
    pub n_labs: usize,
    pub n_meds: usize,
    pub ae_rate: f64,
    /// Ratio of the AE probability after a medication with an adverse-event
    /// edge to the probability after one without.
    pub ae_edge_ratio: f64,
    pub gamma: f64,
    /// Log-normal inter-visit gap parameters (natural log of days).
    pub gap_log_mean: f64,
    pub gap_log_sd: f64,
    /// First visits are spread uniformly over this many days.
    pub enrollment_days: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            anchor: "disease:00000".to_string(),
            n_patients: 100,
            visits: VisitCountDist::NegBinomial {
                mean: 9.1,
                dispersion: 30.0,
            },
            n_labs: 137,
            n_meds: 86,
            ae_rate: 0.124,
            ae_edge_ratio: 4.0,
            gamma: 1.0,
            gap_log_mean: 14f64.ln(),
            gap_log_sd: 0.8,
            enrollment_days: 3650.0,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_patients == 0 {
            v.push("cohort.n_patients must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.ae_rate) {
            v.push(format!("cohort.ae_rate {} outside [0, 1]", self.ae_rate));
        }
        if !(self.ae_edge_ratio > 0.0) {
            v.push("cohort.ae_edge_ratio must be positive".to_string());
        }
        if !(self.gamma >= 0.0) {
            v.push("cohort.gamma must be non-negative".to_string());
        }
        if !(self.gap_log_sd >= 0.0) {
            v.push("cohort.gap_log_sd must be non-negative".to_string());
        }
        if !(self.enrollment_days > 0.0) {
            v.push("cohort.enrollment_days must be positive".to_string());
        }
        match self.visits {
            VisitCountDist::NegBinomial { mean, dispersion } => {
                if !(mean > 1.0 && dispersion > 0.0) {
                    v.push("cohort.visits needs mean > 1 and dispersion > 0".to_string());
                }
            }
            VisitCountDist::Fixed { visits } => {
                if visits == 0 {
                    v.push("cohort.visits fixed count must be at least 1".to_string());
                }
            }
        }
        v
    }
}

/// The simulator's generative law, in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub psi: Vec<f64>,
    pub lab_probs: Vec<f64>,
    pub med_probs: Vec<f64>,
    pub med_has_ae_edge: Vec<bool>,
    pub ae_prob_with_edge: f64,
    pub ae_prob_without_edge: f64,
}

impl GroundTruth {
    pub fn from_kg(kg: &KnowledgeGraph, vocab: &TokenVocab, cfg: &CohortConfig) -> Result<Self> {
        let profile = compute_profile(kg, &cfg.anchor, vocab, 0.0, &ProfileOptions::default())?;
        let psi = profile.psi_raw;
        let softmax = |range: std::ops::Range<usize>| -> Vec<f64> {
            let logits: Vec<f64> = psi[range].iter().map(|p| cfg.gamma * p).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        };
        let lab_probs = softmax(vocab.lab_range());
        let med_probs = softmax(vocab.med_range());
        let med_has_ae_edge: Vec<bool> = vocab.med_range()
            .map(|tok| {
                let n = kg.require(&vocab.token(tok).node)?;
                Ok(kg
                    .out_edges(n)
                    .any(|e| kg.node(kg.edge(e).dst).kind == NodeKind::AdverseEvent))
            })
            .collect::<Result<_>>()?;
        // Split the base rate so the marginal AE rate equals `ae_rate`.
        let q: f64 = med_probs
            .iter()
            .zip(&med_has_ae_edge)
            .filter(|(_, &h)| h)
            .map(|(p, _)| p)
            .sum();
        let without = cfg.ae_rate / (q * cfg.ae_edge_ratio + 1.0 - q);
        let with = (without * cfg.ae_edge_ratio).min(1.0);
        Ok(GroundTruth {
            psi,
            lab_probs,
            med_probs,
            med_has_ae_edge,
            ae_prob_with_edge: with,
            ae_prob_without_edge: without.min(1.0),
        })
    }

    pub fn marginal_ae_rate(&self) -> f64 {
        self.med_probs
            .iter()
            .zip(&self.med_has_ae_edge)
            .map(|(p, &h)| {
                p * if h {
                    self.ae_prob_with_edge
                } else {
                    self.ae_prob_without_edge
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub records: Vec<PatientRecord>,
    pub truth: GroundTruth,
}

fn draw_visit_count(dist: &VisitCountDist, rng: &mut StreamRng) -> usize {
    match *dist {
        VisitCountDist::Fixed { visits } => visits,
        VisitCountDist::NegBinomial { mean, dispersion } => {
            let g = Gamma::new(dispersion, (mean - 1.0) / dispersion).expect("validated");
            let rate: f64 = g.sample(rng);
            let extra = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(rng) as usize
            } else {
                0
            };
            1 + extra
        }
    }
}

/// Simulates a cohort. Deterministic in `cfg.seed`; each patient uses its own
/// random stream.
pub fn simulate_cohort(kg: &KnowledgeGraph, vocab: &TokenVocab, cfg: &CohortConfig) -> Result<SimulatedCohort> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if vocab.lab_range().len() != cfg.n_labs || vocab.med_range().len() != cfg.n_meds {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} labs / {} meds, cohort config expects {} / {}",
            vocab.lab_range().len(),
            vocab.med_range().len(),
            cfg.n_labs,
            cfg.n_meds
        )));
    }
    let truth = GroundTruth::from_kg(kg, vocab, cfg)?;
    let lab_dist = WeightedIndex::new(&truth.lab_probs).map_err(|e| Error::invalid(e.to_string()))?;
    let med_dist = WeightedIndex::new(&truth.med_probs).map_err(|e| Error::invalid(e.to_string()))?;
    let gap_dist = LogNormal::new(cfg.gap_log_mean, cfg.gap_log_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let lab0 = vocab.lab_range().start;
    let med0 = vocab.med_range().start;

    let records = exec::map_indexed(cfg.n_patients, |i| {
        let mut r = rng::stream(cfg.seed, "patient", &[i as u64]);
        let n = draw_visit_count(&cfg.visits, &mut r);
        let mut t = r.random_range(0.0..cfg.enrollment_days);
        let mut visits = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                t += gap_dist.sample(&mut r).max(crate::sampler::MIN_GAP_DAYS);
            }
            let lab = lab0 + lab_dist.sample(&mut r);
            let m = med_dist.sample(&mut r);
            let p = if truth.med_has_ae_edge[m] {
                truth.ae_prob_with_edge
            } else {
                truth.ae_prob_without_edge
            };
            let ae = r.random_bool(p.clamp(0.0, 1.0));
            visits.push(Event {
                t,
                lab: Some(lab),
                med: Some(med0 + m),
                ae,
            });
        }
        Trajectory { id: i, events: visits }
    });
    Ok(SimulatedCohort { records, truth })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<PatientRecord>,
    pub valid: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Chronological patient-level split: patients are ordered by first-event
/// time (ties by id) and cut into contiguous folds.
pub fn split_cohort(records: &[PatientRecord], ratios: (f64, f64, f64)) -> Result<Splits> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = records.len();
    let cut1 = (a * n as f64).round() as usize;
    let cut2 = (((a + b) * n as f64).round() as usize).max(cut1);
    if cut1 == 0 || cut2 == cut1 || cut2 >= n {
        return Err(Error::invalid(format!(
            "{n} patients are too few for a non-empty {ratios:?} split"
        )));
    }
    let mut sorted: Vec<&PatientRecord> = records.iter().collect();
    sorted.sort_by(|x, y| x.first_time().total_cmp(&y.first_time()).then(x.id.cmp(&y.id)));
    let owned = |s: &[&PatientRecord]| s.iter().map(|r| (*r).clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: owned(&sorted[..cut1]),
        valid: owned(&sorted[cut1..cut2]),
        test: owned(&sorted[cut2..]),
    })
}

/// One-hot encodes the most recent `l_max` visits of a record.
pub fn encode_record(rec: &PatientRecord, vocab: &TokenVocab, l_max: usize) -> Result<TrajectoryTensor> {
    let v = vocab.len();
    let mut values = Array2::<f64>::zeros((l_max, v));
    let mut mask = vec![false; l_max];
    let skip = rec.events.len().saturating_sub(l_max);
    for (row, e) in rec.events[skip..].iter().enumerate() {
        let lab = e
            .lab
            .filter(|l| vocab.lab_range().contains(l))
            .ok_or_else(|| Error::VocabMismatch(format!("record {}: missing or unknown lab token", rec.id)))?;
        let med = e
            .med
            .filter(|m| vocab.med_range().contains(m))
            .ok_or_else(|| Error::VocabMismatch(format!("record {}: missing or unknown med token", rec.id)))?;
        values[[row, lab]] = 1.0;
        values[[row, med]] = 1.0;
        values[[row, if e.ae { vocab.ae_set() } else { vocab.ae_clear() }]] = 1.0;
        mask[row] = true;
    }
    TrajectoryTensor::new(values, mask)
}

/// Observed inter-visit gaps, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalGapDistribution {
    gaps: Vec<f64>,
}

impl EmpiricalGapDistribution {
    pub fn new(mut gaps: Vec<f64>) -> Result<Self> {
        if gaps.is_empty() {
            return Err(Error::Empty("gap distribution has no gaps".into()));
        }
        if gaps.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::invalid("gaps must be positive and finite"));
        }
        gaps.sort_by(f64::total_cmp);
        Ok(EmpiricalGapDistribution { gaps })
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    pub fn mean(&self) -> f64 {
        exec::pairwise_sum(&self.gaps) / self.gaps.len() as f64
    }

    /// One draw with replacement.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        self.gaps[rng.random_range(0..self.gaps.len())]
    }
}

/// All consecutive gaps across all records.
pub fn fit_gap_distribution(records: &[PatientRecord]) -> Result<EmpiricalGapDistribution> {
    let gaps: Vec<f64> = records
        .iter()
        .flat_map(|r| r.events.windows(2).map(|w| w[1].t - w[0].t))
        .collect();
    if gaps.is_empty() {
        return Err(Error::Empty("no record has two or more visits".into()));
    }
    EmpiricalGapDistribution::new(gaps)
}

/// Per-field marginal token frequencies: the lab, medication and AE blocks
/// each sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencies {
    freq: Vec<f64>,
}

impl TokenFrequencies {
    pub fn fit(records: &[PatientRecord], vocab: &TokenVocab) -> Result<Self> {
        let mut freq = vec![0.0; vocab.len()];
        for e in records.iter().flat_map(|r| &r.events) {
            if let Some(l) = e.lab {
                freq[l] += 1.0;
            }
            if let Some(m) = e.med {
                freq[m] += 1.0;
            }
            freq[if e.ae { vocab.ae_set() } else { vocab.ae_clear() }] += 1.0;
        }
        for block in [vocab.lab_range(), vocab.med_range(), vocab.ae_range()] {
            let total: f64 = freq[block.clone()].iter().sum();
            if total == 0.0 {
                return Err(Error::Empty("no events to fit token frequencies".into()));
            }
            for f in &mut freq[block] {
                *f /= total;
            }
        }
        Ok(TokenFrequencies { freq })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.freq
    }
}

/// Observed trajectory lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLengthDistribution {
    lengths: Vec<usize>,
}

impl EmpiricalLengthDistribution {
    pub fn fit(records: &[PatientRecord]) -> Result<Self> {
        let mut lengths: Vec<usize> = records.iter().map(|r| r.events.len()).filter(|&n| n > 0).collect();
        if lengths.is_empty() {
            return Err(Error::Empty("no non-empty records to fit lengths".into()));
        }
        lengths.sort_unstable();
        Ok(EmpiricalLengthDistribution { lengths })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// One draw with replacement, capped at `l_max`.
    pub fn draw<R: Rng>(&self, rng: &mut R, l_max: usize) -> usize {
        self.lengths[rng.random_range(0..self.lengths.len())].min(l_max)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonEvent {
    t: f64,
    lab: Option<String>,
    med: Option<String>,
    ae: bool,
}

#[derive(Serialize, Deserialize)]
struct JsonTrajectory {
    id: usize,
    events: Vec<JsonEvent>,
}

/// Writes one JSON object per line with token codes resolved to node ids.
pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory], vocab: &TokenVocab) -> Result<()> {
    for tr in trajectories {
        let j = JsonTrajectory {
            id: tr.id,
            events: tr
                .events
                .iter()
                .map(|e| JsonEvent {
                    t: e.t,
                    lab: e.lab.map(|l| vocab.token(l).node.clone()),
                    med: e.med.map(|m| vocab.token(m).node.clone()),
                    ae: e.ae,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &j)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, vocab: &TokenVocab) -> Result<Vec<Trajectory>> {
    let lookup = |code: Option<String>, line: usize| -> Result<Option<usize>> {
        code.map(|c| {
            vocab.find(&c).ok_or_else(|| Error::Parse {
                source_name: "trajectories".into(),
                line,
                message: format!("unknown token `{c}`"),
            })
        })
        .transpose()
    };
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: "trajectories".into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let events = j
            .events
            .into_iter()
            .map(|e| {
                Ok(Event {
                    t: e.t,
                    lab: lookup(e.lab, i + 1)?,
                    med: lookup(e.med, i + 1)?,
                    ae: e.ae,
                })
            })
            .collect::<Result<_>>()?;
        out.push(Trajectory { id: j.id, events });
    }
    Ok(out)
}
