//! Run configuration, stage orchestration and the guidance-strength sweep.
//!
//! A run directory holds one subdirectory per stage (`kg/`, `cohort/`,
//! `profile/`, `ckpt/`, `synth/`, `eval/`, `sweep/`), each with its
//! artifacts and a `manifest.json` recording input and output digests, the
//! stage seed, the tool version, the config digest and the wall time.
//!
//! Every stage seed is derived from the global seed, so a run is a pure
//! function of its config. The sweep reuses the same in-memory helpers as
//! the individual stages, which keeps a one-cell sweep numerically identical
//! to running the stages by hand.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    encode_record, fit_gap_distribution, read_jsonl, simulate_cohort, split_cohort, write_jsonl, CohortConfig,
    EmpiricalLengthDistribution, GroundTruth, PatientRecord, Splits, TokenFrequencies,
};
use crate::denoiser::{NetConfig, TrajectoryTensor};
use crate::eval::{evaluate, spearman, EvalConfig, EvalReport, RealFolds};
use crate::kg::{generate_toy_kg, load_edge_list, KgGenConfig, KnowledgeGraph, NodeKind};
use crate::metapath::{
    check_lambda, compute_profile, MetaPathProfile, MissingNode, ProfileOptions, PsiNormalize, DEFAULT_D_MAX,
    DEFAULT_MAX_LEN, TokenVocab,
};
use crate::rng::derive_seed;
use crate::sampler::{sample_trajectories, SamplerConfig, SamplingPriors, SyntheticTrajectory};
use crate::schedule::{ScheduleParams, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::trainer::{trace_rows, write_trace_csv, Checkpoint, TrainConfig, TrainState, Trainer};
use crate::{exec, Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgSection {
    /// Node count of the generated toy graph.
    pub nodes: usize,
    /// Load the graph from these TSV files instead of generating it.
    pub nodes_path: Option<PathBuf>,
    pub edges_path: Option<PathBuf>,
    /// Multiplier on the generator's mean out-degrees.
    pub degree_scale: f64,
    /// Hop radius around the anchor kept for meta-path scoring.
    pub prune_hops: usize,
    /// Score meta-paths only over edges valid on `reference_date`.
    pub respect_validity: bool,
    pub reference_date: Option<NaiveDate>,
}

impl Default for KgSection {
    fn default() -> Self {
        KgSection {
            nodes: 1500,
            nodes_path: None,
            edges_path: None,
            degree_scale: 8.0,
            prune_hops: 3,
            respect_validity: false,
            reference_date: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSection {
    #[serde(flatten)]
    pub sim: CohortConfig,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            sim: CohortConfig::default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub lambda: f64,
    pub max_len: usize,
    pub d_max: usize,
    pub normalize: PsiNormalize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            lambda: 0.3,
            max_len: DEFAULT_MAX_LEN,
            d_max: DEFAULT_D_MAX,
            normalize: PsiNormalize::Clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Maximum visits per encoded trajectory; longer records keep their
    /// most recent visits.
    pub seq_len: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            hidden: 32,
            blocks: 3,
            heads: 4,
            seq_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    /// Paired replicates per lambda.
    pub seeds: usize,
    /// Worker threads; unset means one per core.
    pub workers: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lambdas: vec![0.5, 0.3, 0.1, 0.0],
            seeds: 5,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub kg: KgSection,
    pub cohort: CohortSection,
    pub profile: ProfileSection,
    pub schedule: ScheduleSection,
    pub net: NetSection,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            kg: KgSection::default(),
            cohort: CohortSection::default(),
            profile: ProfileSection::default(),
            schedule: ScheduleSection::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
            sample: SamplerConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Seeds of the stochastic stages for one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub kg: u64,
    pub cohort: u64,
    pub train: u64,
    pub sample: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Reads a config file. Relative graph paths are resolved against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.kg.nodes_path, &mut cfg.kg.edges_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Lists every violation instead of stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match (&self.kg.nodes_path, &self.kg.edges_path) {
            (Some(n), Some(e)) => {
                for p in [n, e] {
                    if !p.is_file() {
                        v.push(format!("kg: file {} does not exist", p.display()));
                    }
                }
            }
            (None, None) => {
                if !(self.kg.degree_scale >= 0.0 && self.kg.degree_scale.is_finite()) {
                    v.push(format!("kg.degree_scale {} must be finite and non-negative", self.kg.degree_scale));
                }
                if self.kg.nodes == 0 {
                    v.push("kg.nodes must be positive".into());
                } else {
                    let gen = KgGenConfig::reference(self.kg.nodes);
                    let need = [
                        (NodeKind::LabTest, self.cohort.sim.n_labs, "cohort.n_labs"),
                        (NodeKind::Drug, self.cohort.sim.n_meds, "cohort.n_meds"),
                        (NodeKind::AdverseEvent, 2, "the two AE flag tokens"),
                    ];
                    for (kind, n, what) in need {
                        if gen.count(kind) < n {
                            v.push(format!(
                                "kg.nodes = {} yields {} {kind} nodes, fewer than {what} = {n}",
                                self.kg.nodes,
                                gen.count(kind)
                            ));
                        }
                    }
                }
            }
            _ => v.push("kg.nodes_path and kg.edges_path must be given together".into()),
        }
        if self.kg.respect_validity && self.kg.reference_date.is_none() {
            v.push("kg.respect_validity needs kg.reference_date".into());
        }
        v.extend(self.cohort.sim.validate());
        let [a, b, c] = self.cohort.split;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            v.push(format!("cohort.split {:?} must be positive and sum to 1", self.cohort.split));
        }
        if let Err(e) = check_lambda(self.profile.lambda) {
            v.push(format!("profile.{e}"));
        }
        if !(1..=4).contains(&self.profile.max_len) {
            v.push(format!("profile.max_len {} outside 1..=4", self.profile.max_len));
        }
        if self.profile.d_max == 0 {
            v.push("profile.d_max must be at least 1".into());
        }
        if let Err(e) = ScheduleParams::new(self.schedule.beta_min, self.schedule.beta_max, 0.0) {
            v.push(format!("schedule: {e}"));
        }
        if let Err(Error::Config(p)) = self.net_config(1, 1).validate() {
            v.extend(p);
        }
        if self.net.seq_len == 0 {
            v.push("net.seq_len must be at least 1".into());
        }
        v.extend(self.train.validate());
        v.extend(self.sample.validate());
        v.extend(self.eval.validate());
        if self.sweep.lambdas.is_empty() {
            v.push("sweep.lambdas must not be empty".into());
        }
        for &l in &self.sweep.lambdas {
            if check_lambda(l).is_err() {
                v.push(format!("sweep.lambdas entry {l} outside [0, 1)"));
            }
        }
        if self.sweep.seeds == 0 {
            v.push("sweep.seeds must be at least 1".into());
        }
        if self.sweep.workers == Some(0) {
            v.push("sweep.workers must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.sweep.workers = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self, replicate: u64) -> StageSeeds {
        StageSeeds {
            kg: derive_seed(self.seed, "kg", &[]),
            cohort: derive_seed(self.seed, "cohort", &[]),
            train: derive_seed(self.seed, "train", &[replicate]),
            sample: derive_seed(self.seed, "sample", &[replicate]),
            eval: derive_seed(self.seed, "eval", &[replicate]),
        }
    }

    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            seed: self.seeds(0).cohort,
            ..self.cohort.sim.clone()
        }
    }

    pub fn train_config(&self, replicate: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seeds(replicate).train,
            ..self.train.clone()
        }
    }

    /// Sampler settings; `n_trajectories = 0` means "as many as the
    /// training fold".
    pub fn sampler_config(&self, replicate: u64, n_train: usize) -> SamplerConfig {
        let n = if self.sample.n_trajectories == 0 {
            n_train
        } else {
            self.sample.n_trajectories
        };
        SamplerConfig {
            seed: self.seeds(replicate).sample,
            n_trajectories: n,
            ..self.sample.clone()
        }
    }

    pub fn schedule(&self, lambda: f64) -> Result<ScheduleParams> {
        ScheduleParams::new(self.schedule.beta_min, self.schedule.beta_max, lambda)
    }

    pub fn net_config(&self, vocab_size: usize, film_dim: usize) -> NetConfig {
        NetConfig {
            vocab_size,
            seq_len: self.net.seq_len,
            hidden: self.net.hidden,
            blocks: self.net.blocks,
            heads: self.net.heads,
            film_dim,
        }
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            max_len: self.profile.max_len,
            d_max: self.profile.d_max,
            normalize: self.profile.normalize,
            missing: MissingNode::Zero,
        }
    }
}

// ---------------------------------------------------------------------------
// In-memory stages

/// Generates the toy graph or loads the configured TSV files.
pub fn build_kg(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let kg = match (&cfg.kg.nodes_path, &cfg.kg.edges_path) {
        (Some(n), Some(e)) => {
            let nodes = BufReader::new(fs::File::open(n)?);
            let edges = BufReader::new(fs::File::open(e)?);
            load_edge_list(edges, nodes)?
        }
        _ => generate_toy_kg(
            &KgGenConfig::reference(cfg.kg.nodes).with_degree_scale(cfg.kg.degree_scale),
            cfg.seeds(0).kg,
        )?,
    };
    kg.require(&cfg.cohort.sim.anchor)?;
    Ok(kg)
}

/// The simulated cohort with its vocabulary and chronological folds.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub vocab: TokenVocab,
    pub truth: GroundTruth,
    pub splits: Splits,
}

pub fn build_cohort(cfg: &RunConfig, kg: &KnowledgeGraph) -> Result<CohortData> {
    let sim = cfg.cohort_config();
    let vocab = TokenVocab::from_kg(kg, sim.n_labs, sim.n_meds)?;
    let cohort = simulate_cohort(kg, &vocab, &sim)?;
    let [a, b, c] = cfg.cohort.split;
    let splits = split_cohort(&cohort.records, (a, b, c))?;
    Ok(CohortData {
        vocab,
        truth: cohort.truth,
        splits,
    })
}

/// Meta-path profile on the anchor's pruned neighbourhood. Tokens outside
/// the neighbourhood get zero scores.
pub fn build_profile(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    vocab: &TokenVocab,
    lambda: f64,
) -> Result<MetaPathProfile> {
    let anchor = &cfg.cohort.sim.anchor;
    let pruned = match (cfg.kg.respect_validity, cfg.kg.reference_date) {
        (true, Some(day)) => kg.filter_valid_at(day).prune_to_neighborhood(anchor, cfg.kg.prune_hops)?,
        _ => kg.prune_to_neighborhood(anchor, cfg.kg.prune_hops)?,
    };
    compute_profile(&pruned, anchor, vocab, lambda, &cfg.profile_options())
}

pub fn encode_split(
    records: &[PatientRecord],
    vocab: &TokenVocab,
    seq_len: usize,
) -> Result<Vec<TrajectoryTensor>> {
    exec::try_map_indexed(records.len(), |i| encode_record(&records[i], vocab, seq_len))
}

/// Trains from scratch, or continues `resume`, up to `until` steps.
pub fn train_model(
    cfg: &RunConfig,
    data: &[TrajectoryTensor],
    profile: &MetaPathProfile,
    replicate: u64,
    resume: Option<TrainState>,
    until: Option<u64>,
) -> Result<Checkpoint> {
    let net = cfg.net_config(profile.vocab_size(), profile.d);
    let trainer = Trainer::new(data, profile, cfg.schedule(profile.lambda)?, net, cfg.train_config(replicate))?;
    let mut state = match resume {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    trainer.run(&mut state, until.unwrap_or(cfg.train.total_steps), |_| {})?;
    Ok(trainer.checkpoint(&state))
}

pub fn sampling_priors(train: &[PatientRecord], vocab: &TokenVocab) -> Result<SamplingPriors> {
    Ok(SamplingPriors {
        gaps: fit_gap_distribution(train)?,
        lengths: EmpiricalLengthDistribution::fit(train)?,
        tokens: Some(TokenFrequencies::fit(train, vocab)?),
    })
}

/// Output of one (lambda, replicate) cell of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub lambda: f64,
    pub replicate: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Profile, train, sample and evaluate for one guidance strength and one
/// replicate, entirely in memory.
pub fn run_cell(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    cohort: &CohortData,
    lambda: f64,
    replicate: u64,
) -> Result<CellResult> {
    let inner = || -> Result<CellResult> {
        let profile = build_profile(cfg, kg, &cohort.vocab, lambda)?;
        let data = encode_split(&cohort.splits.train, &cohort.vocab, cfg.net.seq_len)?;
        let ckpt = train_model(cfg, &data, &profile, replicate, None, None)?;
        let priors = sampling_priors(&cohort.splits.train, &cohort.vocab)?;
        let scfg = cfg.sampler_config(replicate, cohort.splits.train.len());
        let synth = sample_trajectories(&ckpt, &profile, &cohort.vocab, &priors, &scfg)?;
        let report = evaluate_synth(cfg, cohort, &synth, replicate)?;
        Ok(CellResult {
            lambda,
            replicate,
            final_loss: ckpt.losses.last().copied().unwrap_or(f64::NAN),
            report,
        })
    };
    inner().map_err(|e| Error::Cell {
        lambda,
        seed: replicate,
        source: Box::new(e),
    })
}

pub fn evaluate_synth(
    cfg: &RunConfig,
    cohort: &CohortData,
    synth: &[SyntheticTrajectory],
    replicate: u64,
) -> Result<EvalReport> {
    let folds = RealFolds {
        train: &cohort.splits.train,
        valid: &cohort.splits.valid,
        test: &cohort.splits.test,
    };
    evaluate(&folds, synth, &cohort.vocab, &cfg.eval, cfg.seeds(replicate).eval, &cfg.digest())
}

// ---------------------------------------------------------------------------
// Sweep aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub lambda: f64,
    pub cat_mmd_mean: f64,
    pub cat_mmd_sd: f64,
    pub mia_mean: f64,
    pub mia_sd: f64,
    pub delta_bal_acc_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SweepSummaryRow>,
    /// Rank correlation between lambda and mean Cat-MMD; `None` with fewer
    /// than two distinct lambdas.
    pub spearman_lambda_cat_mmd: Option<f64>,
    pub spearman_lambda_mia: Option<f64>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

pub fn summarize(lambdas: &[f64], cells: Vec<CellResult>) -> SweepResult {
    let summary: Vec<SweepSummaryRow> = lambdas
        .iter()
        .map(|&l| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.lambda == l).collect();
            let (cm, cs) = mean_sd(&mine.iter().map(|c| c.report.cat_mmd2).collect::<Vec<_>>());
            let (mm, ms) = mean_sd(&mine.iter().map(|c| c.report.mean_mia()).collect::<Vec<_>>());
            let (dm, _) = mean_sd(&mine.iter().map(|c| c.report.delta_bal_acc).collect::<Vec<_>>());
            SweepSummaryRow {
                lambda: l,
                cat_mmd_mean: cm,
                cat_mmd_sd: cs,
                mia_mean: mm,
                mia_sd: ms,
                delta_bal_acc_mean: dm,
            }
        })
        .collect();
    let ls: Vec<f64> = summary.iter().map(|r| r.lambda).collect();
    let rho = |ys: Vec<f64>| spearman(&ls, &ys).ok().filter(|r| r.is_finite());
    SweepResult {
        spearman_lambda_cat_mmd: rho(summary.iter().map(|r| r.cat_mmd_mean).collect()),
        spearman_lambda_mia: rho(summary.iter().map(|r| r.mia_mean).collect()),
        cells,
        summary,
    }
}

/// Runs every (lambda, replicate) cell. Cells run in parallel; results are
/// ordered by lambda as listed, then replicate.
pub fn lambda_sweep(cfg: &RunConfig, kg: &KnowledgeGraph, cohort: &CohortData) -> Result<SweepResult> {
    let lambdas = &cfg.sweep.lambdas;
    let seeds = cfg.sweep.seeds;
    let cells = exec::try_map_indexed(lambdas.len() * seeds, |k| {
        run_cell(cfg, kg, cohort, lambdas[k / seeds], (k % seeds) as u64)
    })?;
    Ok(summarize(lambdas, cells))
}

impl SweepResult {
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("lambda,replicate,final_loss,cat_mmd2,cont_mmd2,delta_bal_acc,mia_domias,mia_shadow\n");
        for c in &self.cells {
            let r = &c.report;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.lambda,
                c.replicate,
                c.final_loss,
                r.cat_mmd2,
                r.cont_mmd2,
                r.delta_bal_acc,
                r.mia.get("domias").copied().unwrap_or(f64::NAN),
                r.mia.get("shadow").copied().unwrap_or(f64::NAN),
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("lambda,cat_mmd_mean,cat_mmd_sd,mia_mean,mia_sd,delta_bal_acc_mean\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lambda, r.cat_mmd_mean, r.cat_mmd_sd, r.mia_mean, r.mia_sd, r.delta_bal_acc_mean
            ));
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>22} {:>18} {:>14}\n",
            "lambda", "cat_mmd2 (mean±sd)", "mia (mean±sd)", "delta_bal_acc"
        );
        for r in &self.summary {
            s.push_str(&format!(
                "{:>8.2} {:>12.5} ± {:<7.5} {:>8.3} ± {:<7.3} {:>14.4}\n",
                r.lambda, r.cat_mmd_mean, r.cat_mmd_sd, r.mia_mean, r.mia_sd, r.delta_bal_acc_mean
            ));
        }
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        s.push_str(&format!(
            "spearman(lambda, cat_mmd2) = {}\nspearman(lambda, mia) = {}\n",
            fmt(self.spearman_lambda_cat_mmd),
            fmt(self.spearman_lambda_mia)
        ));
        s
    }
}

// ---------------------------------------------------------------------------
// Run directory and manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_digest: String,
    /// Run-relative path to SHA-256, for every file the stage read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Paths of every artifact in a run directory, and the command producing it.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                producer: producer.to_string(),
            })
        }
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, bytes)?;
        Ok(())
    }

    fn write_manifest(
        &self,
        stage: &str,
        seed: u64,
        cfg: &RunConfig,
        inputs: &[&str],
        outputs: &[&str],
        started: Instant,
    ) -> Result<Manifest> {
        let digest_all = |names: &[&str]| -> Result<BTreeMap<String, String>> {
            names.iter().map(|n| Ok((n.to_string(), sha256_file(&self.path(n))?))).collect()
        };
        let m = Manifest {
            stage: stage.to_string(),
            version: TOOL_VERSION.to_string(),
            seed,
            config_digest: cfg.digest(),
            inputs: digest_all(inputs)?,
            outputs: digest_all(outputs)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.write(&format!("{stage}/manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    pub fn read_manifest(&self, stage: &str) -> Result<Manifest> {
        let p = self.require(&format!("{stage}/manifest.json"), stage)?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }
}

const KG_NODES: &str = "kg/nodes.tsv";
const KG_EDGES: &str = "kg/edges.tsv";
const VOCAB: &str = "cohort/vocab.json";
const TRUTH: &str = "cohort/truth.json";
const TRAIN: &str = "cohort/train.jsonl";
const VALID: &str = "cohort/valid.jsonl";
const TEST: &str = "cohort/test.jsonl";
const PROFILE: &str = "profile/profile.json";
const CKPT: &str = "ckpt/checkpoint.json";
const TRACE: &str = "ckpt/trace.csv";
const SYNTH: &str = "synth/trajectories.jsonl";
const REPORT_JSON: &str = "eval/report.json";
const REPORT_TXT: &str = "eval/report.txt";

/// `key=value` lines a stage reports on stdout.
pub type Metrics = Vec<(String, String)>;

fn metric(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn load_kg(run: &RunDir) -> Result<KnowledgeGraph> {
    let n = run.require(KG_NODES, "gen-kg")?;
    let e = run.require(KG_EDGES, "gen-kg")?;
    load_edge_list(BufReader::new(fs::File::open(e)?), BufReader::new(fs::File::open(n)?))
}

fn load_vocab(run: &RunDir) -> Result<TokenVocab> {
    let p = run.require(VOCAB, "simulate")?;
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

fn load_records(run: &RunDir, rel: &str, producer: &str, vocab: &TokenVocab) -> Result<Vec<PatientRecord>> {
    let p = run.require(rel, producer)?;
    read_jsonl(BufReader::new(fs::File::open(p)?), vocab)
}

fn load_cohort(run: &RunDir) -> Result<CohortData> {
    let vocab = load_vocab(run)?;
    let truth: GroundTruth = serde_json::from_str(&fs::read_to_string(run.require(TRUTH, "simulate")?)?)?;
    let splits = Splits {
        train: load_records(run, TRAIN, "simulate", &vocab)?,
        valid: load_records(run, VALID, "simulate", &vocab)?,
        test: load_records(run, TEST, "simulate", &vocab)?,
    };
    Ok(CohortData { vocab, truth, splits })
}

fn load_profile(run: &RunDir) -> Result<MetaPathProfile> {
    MetaPathProfile::from_json(&fs::read_to_string(run.require(PROFILE, "profile")?)?)
}

fn jsonl_bytes(records: &[PatientRecord], vocab: &TokenVocab) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records, vocab)?;
    Ok(buf)
}

pub fn stage_gen_kg(cfg: &RunConfig, run: &RunDir) -> Result<Metrics> {
    let t0 = Instant::now();
    let kg = build_kg(cfg)?;
    let mut nodes = Vec::new();
    kg.write_nodes(&mut nodes)?;
    let mut edges = Vec::new();
    kg.write_edges(&mut edges)?;
    run.write(KG_NODES, &nodes)?;
    run.write(KG_EDGES, &edges)?;
    run.write_manifest("kg", cfg.seeds(0).kg, cfg, &[], &[KG_NODES, KG_EDGES], t0)?;
    Ok(vec![metric("nodes", kg.node_count()), metric("edges", kg.edge_count())])
}

pub fn stage_simulate(cfg: &RunConfig, run: &RunDir) -> Result<Metrics> {
    let t0 = Instant::now();
    let kg = load_kg(run)?;
    let c = build_cohort(cfg, &kg)?;
    run.write(VOCAB, serde_json::to_string_pretty(&c.vocab)?.as_bytes())?;
    run.write(TRUTH, serde_json::to_string_pretty(&c.truth)?.as_bytes())?;
    run.write(TRAIN, &jsonl_bytes(&c.splits.train, &c.vocab)?)?;
    run.write(VALID, &jsonl_bytes(&c.splits.valid, &c.vocab)?)?;
    run.write(TEST, &jsonl_bytes(&c.splits.test, &c.vocab)?)?;
    run.write_manifest(
        "cohort",
        cfg.seeds(0).cohort,
        cfg,
        &[KG_NODES, KG_EDGES],
        &[VOCAB, TRUTH, TRAIN, VALID, TEST],
        t0,
    )?;
    let visits: usize = [&c.splits.train, &c.splits.valid, &c.splits.test]
        .iter()
        .flat_map(|s| s.iter())
        .map(|r| r.events.len())
        .sum();
    Ok(vec![
        metric("patients_train", c.splits.train.len()),
        metric("patients_valid", c.splits.valid.len()),
        metric("patients_test", c.splits.test.len()),
        metric("visits", visits),
        metric("vocab_size", c.vocab.len()),
    ])
}

pub fn stage_profile(cfg: &RunConfig, run: &RunDir) -> Result<Metrics> {
    let t0 = Instant::now();
    let kg = load_kg(run)?;
    let vocab = load_vocab(run)?;
    let profile = build_profile(cfg, &kg, &vocab, cfg.profile.lambda)?;
    run.write(PROFILE, profile.to_json()?.as_bytes())?;
    run.write_manifest("profile", cfg.seed, cfg, &[KG_NODES, KG_EDGES, VOCAB], &[PROFILE], t0)?;
    let nonzero = profile.psi_raw.iter().filter(|&&p| p > 0.0).count();
    let clipped = profile.psi_raw.iter().zip(&profile.psi_clipped).filter(|(r, c)| r != c).count();
    Ok(vec![
        metric("lambda", profile.lambda),
        metric("patterns", profile.d),
        metric("tokens_with_paths", nonzero),
        metric("tokens_clipped", clipped),
    ])
}

/// Options of the `train` stage beyond the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the existing checkpoint.
    pub resume: bool,
    /// Stop after this many completed steps.
    pub until: Option<u64>,
}

pub fn stage_train(cfg: &RunConfig, run: &RunDir, opts: TrainOptions) -> Result<Metrics> {
    let t0 = Instant::now();
    let cohort = load_cohort(run)?;
    let profile = load_profile(run)?;
    if !profile.matches_vocab(&cohort.vocab) {
        return Err(Error::VocabMismatch("profile and cohort vocabularies differ; rerun `profile`".into()));
    }
    let resume = if opts.resume {
        let ck = Checkpoint::load(&run.require(CKPT, "train")?)?;
        Some(ck.to_state()?)
    } else {
        None
    };
    let data = encode_split(&cohort.splits.train, &cohort.vocab, cfg.net.seq_len)?;
    let ckpt = train_model(cfg, &data, &profile, 0, resume, opts.until)?;
    let rows = trace_rows(&ckpt.train, &ckpt.losses)?;
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &rows)?;
    run.write(CKPT, ckpt.to_json()?.as_bytes())?;
    run.write(TRACE, &csv)?;
    run.write_manifest("ckpt", ckpt.train.seed, cfg, &[TRAIN, VOCAB, PROFILE], &[CKPT, TRACE], t0)?;
    let mut m = vec![metric("steps", ckpt.step), metric("params", ckpt.net.param_count())];
    if let Some(last) = rows.last() {
        m.push(metric("loss", last.loss));
    }
    Ok(m)
}

pub fn stage_sample(cfg: &RunConfig, run: &RunDir) -> Result<Metrics> {
    let t0 = Instant::now();
    let cohort = load_cohort(run)?;
    let profile = load_profile(run)?;
    let ckpt = Checkpoint::load(&run.require(CKPT, "train")?)?;
    let priors = sampling_priors(&cohort.splits.train, &cohort.vocab)?;
    let scfg = cfg.sampler_config(0, cohort.splits.train.len());
    let synth = sample_trajectories(&ckpt, &profile, &cohort.vocab, &priors, &scfg)?;
    run.write(SYNTH, &jsonl_bytes(&synth, &cohort.vocab)?)?;
    run.write_manifest("synth", scfg.seed, cfg, &[CKPT, PROFILE, VOCAB, TRAIN], &[SYNTH], t0)?;
    let events: usize = synth.iter().map(|s| s.events.len()).sum();
    Ok(vec![metric("trajectories", synth.len()), metric("events", events)])
}

pub fn stage_evaluate(cfg: &RunConfig, run: &RunDir) -> Result<(Metrics, EvalReport)> {
    let t0 = Instant::now();
    let cohort = load_cohort(run)?;
    let synth = load_records(run, SYNTH, "sample", &cohort.vocab)?;
    let report = evaluate_synth(cfg, &cohort, &synth, 0)?;
    run.write(REPORT_JSON, serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.write(REPORT_TXT, report.table().as_bytes())?;
    run.write_manifest(
        "eval",
        report.seed,
        cfg,
        &[SYNTH, TRAIN, VALID, TEST, VOCAB],
        &[REPORT_JSON, REPORT_TXT],
        t0,
    )?;
    let m = report
        .metric_lines()
        .into_iter()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    Ok((m, report))
}

const SWEEP_CELLS: &str = "sweep/cells.csv";
const SWEEP_SUMMARY: &str = "sweep/summary.csv";
const SWEEP_JSON: &str = "sweep/sweep.json";
const SWEEP_TABLE: &str = "sweep/table.txt";

/// Regenerates the graph and cohort, then runs every sweep cell.
pub fn stage_sweep(cfg: &RunConfig, run: &RunDir) -> Result<(Metrics, SweepResult)> {
    stage_gen_kg(cfg, run)?;
    stage_simulate(cfg, run)?;
    let t0 = Instant::now();
    let kg = load_kg(run)?;
    let cohort = load_cohort(run)?;
    let result = lambda_sweep(cfg, &kg, &cohort)?;
    run.write(SWEEP_CELLS, result.cells_csv().as_bytes())?;
    run.write(SWEEP_SUMMARY, result.summary_csv().as_bytes())?;
    run.write(SWEEP_JSON, serde_json::to_string_pretty(&result)?.as_bytes())?;
    run.write(SWEEP_TABLE, result.table().as_bytes())?;
    run.write_manifest(
        "sweep",
        cfg.seed,
        cfg,
        &[KG_NODES, KG_EDGES, VOCAB, TRAIN, VALID, TEST],
        &[SWEEP_CELLS, SWEEP_SUMMARY, SWEEP_JSON, SWEEP_TABLE],
        t0,
    )?;
    let mut m = Vec::new();
    for r in &result.summary {
        m.push(metric(&format!("cat_mmd2_mean[{}]", r.lambda), r.cat_mmd_mean));
        m.push(metric(&format!("mia_mean[{}]", r.lambda), r.mia_mean));
    }
    let opt = |x: Option<f64>| x.map_or("nan".to_string(), |v| v.to_string());
    m.push(metric("spearman_lambda_cat_mmd2", opt(result.spearman_lambda_cat_mmd)));
    m.push(metric("spearman_lambda_mia", opt(result.spearman_lambda_mia)));
    Ok((m, result))
}

/// Every stage in order, as `run` would chain them.
pub fn run_all(cfg: &RunConfig, run: &RunDir) -> Result<Metrics> {
    let mut m = stage_gen_kg(cfg, run)?;
    m.extend(stage_simulate(cfg, run)?);
    m.extend(stage_profile(cfg, run)?);
    m.extend(stage_train(cfg, run, TrainOptions::default())?);
    m.extend(stage_sample(cfg, run)?);
    m.extend(stage_evaluate(cfg, run)?.0);
    Ok(m)
}

/// Writes `key=value` lines.
pub fn write_metrics<W: Write>(mut w: W, metrics: &Metrics) -> std::io::Result<()> {
    let mut w = BufWriter::new(&mut w);
    for (k, v) in metrics {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()
}
