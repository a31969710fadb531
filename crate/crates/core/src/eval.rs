//! Fidelity, utility and privacy metrics.
//!
//! * Kernel two-sample statistics: unbiased Gaussian MMD with a median
//!   heuristic bandwidth and a permutation null.
//! * Train-on-synthetic, test-on-real utility with a small recurrent scorer
//!   or logistic regression.
//! * Membership inference: a density-ratio attacker and a nearest-neighbour
//!   distance attacker, both summarized by AUROC.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Trajectory;
use crate::error::{Error, Result};
use crate::exec;
use crate::metapath::TokenVocab;
use crate::rng;

/// Token-count histogram over the whole vocabulary.
pub fn count_features(tr: &Trajectory, vocab: &TokenVocab) -> Vec<f64> {
    let mut c = vec![0.0; vocab.len()];
    for e in &tr.events {
        if let Some(l) = e.lab {
            c[l] += 1.0;
        }
        if let Some(m) = e.med {
            c[m] += 1.0;
        }
        c[if e.ae { vocab.ae_set() } else { vocab.ae_clear() }] += 1.0;
    }
    c
}

/// All inter-visit gaps of a set of trajectories, as 1-D points.
pub fn gap_features(set: &[Trajectory]) -> Vec<Vec<f64>> {
    set.iter()
        .flat_map(|r| r.events.windows(2).map(|w| vec![w[1].t - w[0].t]))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of the non-zero pairwise Euclidean distances.
pub fn median_heuristic_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
    let mut d: Vec<f64> = exec::map_indexed(points.len(), |i| {
        (i + 1..points.len())
            .map(|j| sq_dist(&points[i], &points[j]).sqrt())
            .filter(|&x| x > 0.0)
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    if d.is_empty() {
        return Err(Error::invalid("median heuristic needs at least two distinct points"));
    }
    d.sort_by(f64::total_cmp);
    Ok(median(&d))
}

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Unbiased squared MMD with a Gaussian kernel of bandwidth `sigma`.
/// Negative values are returned as they are.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid(format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
    }
    let within = |s: &[Vec<f64>]| {
        let rows = exec::map_indexed(s.len(), |i| {
            (i + 1..s.len()).map(|j| gauss(sq_dist(&s[i], &s[j]), sigma)).sum::<f64>()
        });
        let n = s.len() as f64;
        2.0 * exec::pairwise_sum(&rows) / (n * (n - 1.0))
    };
    let cross_rows = exec::map_indexed(x.len(), |i| y.iter().map(|b| gauss(sq_dist(&x[i], b), sigma)).sum::<f64>());
    let cross = exec::pairwise_sum(&cross_rows) / (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Squared MMD with the bandwidth chosen by the median heuristic on the
/// pooled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub mmd2: f64,
    pub sigma: f64,
}

pub fn mmd_median(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<MmdEstimate> {
    let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let sigma = median_heuristic_bandwidth(&pooled)?;
    Ok(MmdEstimate {
        mmd2: mmd2_unbiased(x, y, sigma)?,
        sigma,
    })
}

pub fn cat_mmd(real: &[Trajectory], synth: &[Trajectory], vocab: &TokenVocab) -> Result<MmdEstimate> {
    let f = |s: &[Trajectory]| s.iter().map(|r| count_features(r, vocab)).collect::<Vec<_>>();
    mmd_median(&f(real), &f(synth))
}

/// MMD between pooled inter-visit gaps. Each side is subsampled to at most
/// `max_points` gaps with a stream derived from `seed`.
pub fn cont_mmd(real: &[Trajectory], synth: &[Trajectory], max_points: usize, seed: u64) -> Result<MmdEstimate> {
    let thin = |mut pts: Vec<Vec<f64>>, tag: u64| {
        if pts.len() > max_points {
            pts.shuffle(&mut rng::stream(seed, "cont_mmd", &[tag]));
            pts.truncate(max_points);
        }
        pts
    };
    mmd_median(&thin(gap_features(real), 0), &thin(gap_features(synth), 1))
}

/// MMD statistics of `n_perm` random relabelings of the pooled sample.
pub fn permutation_null(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, n_perm: usize, seed: u64) -> Result<Vec<f64>> {
    let n = x.len();
    let m = y.len();
    if n < 2 || m < 2 {
        return Err(Error::invalid("permutation null needs at least 2 samples per side"));
    }
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let total = n + m;
    let k: Vec<Vec<f64>> = exec::map_indexed(total, |i| (0..total).map(|j| gauss(sq_dist(pooled[i], pooled[j]), sigma)).collect());
    Ok(exec::map_indexed(n_perm, |p| {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut rng::stream(seed, "perm", &[p as u64]));
        let (a, b) = idx.split_at(n);
        let within = |s: &[usize]| {
            let mut acc = 0.0;
            for (ii, &i) in s.iter().enumerate() {
                for &j in &s[ii + 1..] {
                    acc += k[i][j];
                }
            }
            2.0 * acc / (s.len() * (s.len() - 1)) as f64
        };
        let cross: f64 = a.iter().map(|&i| b.iter().map(|&j| k[i][j]).sum::<f64>()).sum();
        within(a) + within(b) - 2.0 * cross / (n * m) as f64
    }))
}

/// `(1 + #{null >= observed}) / (1 + n)`.
pub fn permutation_p_value(observed: f64, null: &[f64]) -> f64 {
    let hits = null.iter().filter(|&&v| v >= observed).count();
    (1 + hits) as f64 / (1 + null.len()) as f64
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q * (v.len() - 1) as f64).clamp(0.0, (v.len() - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Rank-based (Mann-Whitney) AUROC; tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUROC score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length >= 2"));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("spearman undefined for a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}

// ---------------------------------------------------------------------------
// Downstream utility

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Recurrent,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub max_events: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Recurrent,
            hidden: 8,
            epochs: 150,
            lr: 0.05,
            max_events: 32,
            seed: 0,
        }
    }
}

/// A record reduced to the lab/med tokens of its visits plus a label.
/// Tokens are re-indexed to `0..n_labs + n_meds`.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub visits: Vec<[Option<usize>; 2]>,
    pub label: bool,
}

pub fn any_ae(tr: &Trajectory) -> bool {
    tr.has_ae()
}

pub fn to_labeled(set: &[Trajectory], vocab: &TokenVocab, label_fn: &dyn Fn(&Trajectory) -> bool) -> Vec<Labeled> {
    let off = vocab.lab_range().start;
    set.iter()
        .map(|r| Labeled {
            visits: r.events.iter().map(|e| [e.lab.map(|l| l - off), e.med.map(|m| m - off)]).collect(),
            label: label_fn(r),
        })
        .collect()
}

struct AdamBuf {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamBuf {
    fn new(n: usize) -> Self {
        AdamBuf {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-class weights that equalize the two classes' total weight.
fn class_weights(data: &[Labeled]) -> (f64, f64) {
    let n = data.len() as f64;
    let pos = data.iter().filter(|d| d.label).count() as f64;
    let neg = n - pos;
    let w = |k: f64| if k > 0.0 { n / (2.0 * k) } else { 0.0 };
    (w(pos), w(neg))
}

/// Trained binary scorer.
pub enum Classifier {
    Logistic { w: Vec<f64>, b: f64 },
    Recurrent { f: usize, h: usize, params: Vec<f64> },
}

impl Classifier {
    pub fn prob(&self, x: &Labeled) -> f64 {
        match self {
            Classifier::Logistic { w, b } => {
                let mut z = *b;
                for v in &x.visits {
                    for t in v.iter().flatten() {
                        z += w[*t];
                    }
                }
                sigmoid(z)
            }
            Classifier::Recurrent { f, h, params } => {
                let hs = rnn_forward(params, *f, *h, x);
                let last = hs.last().cloned().unwrap_or_else(|| vec![0.0; *h]);
                let out_w = &params[rnn_out(*f, *h)..rnn_out(*f, *h) + h];
                let c = params[rnn_out(*f, *h) + h];
                sigmoid(last.iter().zip(out_w).map(|(a, b)| a * b).sum::<f64>() + c)
            }
        }
    }
}

// Recurrent parameter layout: W (f x h), U (h x h), b (h), w_out (h), c.
fn rnn_u(f: usize, h: usize) -> usize {
    f * h
}
fn rnn_b(f: usize, h: usize) -> usize {
    f * h + h * h
}
fn rnn_out(f: usize, h: usize) -> usize {
    f * h + h * h + h
}

fn rnn_forward(p: &[f64], f: usize, h: usize, x: &Labeled) -> Vec<Vec<f64>> {
    let mut hs = Vec::with_capacity(x.visits.len());
    let mut prev = vec![0.0; h];
    for v in &x.visits {
        let mut a: Vec<f64> = p[rnn_b(f, h)..rnn_b(f, h) + h].to_vec();
        for t in v.iter().flatten() {
            for k in 0..h {
                a[k] += p[t * h + k];
            }
        }
        for (i, &pv) in prev.iter().enumerate() {
            if pv != 0.0 {
                for k in 0..h {
                    a[k] += pv * p[rnn_u(f, h) + i * h + k];
                }
            }
        }
        let cur: Vec<f64> = a.into_iter().map(f64::tanh).collect();
        hs.push(cur.clone());
        prev = cur;
    }
    hs
}

fn rnn_grad(p: &[f64], f: usize, h: usize, x: &Labeled, dlogit: f64, g: &mut [f64]) {
    let hs = rnn_forward(p, f, h, x);
    let out = rnn_out(f, h);
    g[out + h] += dlogit;
    let Some(last) = hs.last() else { return };
    let mut dh: Vec<f64> = (0..h).map(|k| dlogit * p[out + k]).collect();
    for k in 0..h {
        g[out + k] += dlogit * last[k];
    }
    for step in (0..hs.len()).rev() {
        let da: Vec<f64> = (0..h).map(|k| dh[k] * (1.0 - hs[step][k] * hs[step][k])).collect();
        for t in x.visits[step].iter().flatten() {
            for k in 0..h {
                g[t * h + k] += da[k];
            }
        }
        for k in 0..h {
            g[rnn_b(f, h) + k] += da[k];
        }
        let mut next = vec![0.0; h];
        if step > 0 {
            let prev = &hs[step - 1];
            for i in 0..h {
                let mut acc = 0.0;
                for k in 0..h {
                    g[rnn_u(f, h) + i * h + k] += prev[i] * da[k];
                    acc += p[rnn_u(f, h) + i * h + k] * da[k];
                }
                next[i] = acc;
            }
        }
        dh = next;
    }
}

/// Fits a class-balanced scorer with full-batch Adam for a fixed budget.
pub fn fit_classifier(data: &[Labeled], n_features: usize, cfg: &ClassifierConfig) -> Result<Classifier> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training set".into()));
    }
    let (wp, wn) = class_weights(data);
    let n = data.len() as f64;
    let trimmed: Vec<Labeled> = data
        .iter()
        .map(|d| Labeled {
            visits: d.visits[d.visits.len().saturating_sub(cfg.max_events)..].to_vec(),
            label: d.label,
        })
        .collect();
    let mut r = rng::stream(cfg.seed, "classifier", &[]);
    match cfg.kind {
        ClassifierKind::Logistic => {
            let mut w = vec![0.0; n_features + 1];
            let mut opt = AdamBuf::new(w.len());
            for _ in 0..cfg.epochs {
                let grads = exec::map_slice(&trimmed, |d| {
                    let model = Classifier::Logistic {
                        w: w[..n_features].to_vec(),
                        b: w[n_features],
                    };
                    let p = model.prob(d);
                    let y = if d.label { 1.0 } else { 0.0 };
                    let dl = (if d.label { wp } else { wn }) * (p - y) / n;
                    let mut g = vec![0.0; n_features + 1];
                    for v in &d.visits {
                        for t in v.iter().flatten() {
                            g[*t] += dl;
                        }
                    }
                    g[n_features] += dl;
                    g
                });
                let g = exec::tree_reduce(grads, |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                })
                .expect("non-empty");
                opt.step(&mut w, &g, cfg.lr);
            }
            Ok(Classifier::Logistic {
                b: w[n_features],
                w: {
                    w.truncate(n_features);
                    w
                },
            })
        }
        ClassifierKind::Recurrent => {
            let (f, h) = (n_features, cfg.hidden);
            let total = rnn_out(f, h) + h + 1;
            let scale = 1.0 / (h as f64).sqrt();
            let mut p: Vec<f64> = (0..total).map(|_| r.random_range(-scale..scale)).collect();
            p[rnn_b(f, h)..rnn_out(f, h)].fill(0.0);
            p[total - 1] = 0.0;
            let mut opt = AdamBuf::new(total);
            for _ in 0..cfg.epochs {
                let grads = exec::map_slice(&trimmed, |d| {
                    let model = Classifier::Recurrent { f, h, params: p.clone() };
                    let prob = model.prob(d);
                    let y = if d.label { 1.0 } else { 0.0 };
                    let dl = (if d.label { wp } else { wn }) * (prob - y) / n;
                    let mut g = vec![0.0; total];
                    rnn_grad(&p, f, h, d, dl, &mut g);
                    g
                });
                let g = exec::tree_reduce(grads, |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    a
                })
                .expect("non-empty");
                opt.step(&mut p, &g, cfg.lr);
            }
            Ok(Classifier::Recurrent { f, h, params: p })
        }
    }
}

/// Mean of true-positive and true-negative rates at probability 0.5.
pub fn balanced_accuracy(model: &Classifier, test: &[Labeled]) -> Result<f64> {
    let pos = test.iter().filter(|d| d.label).count();
    let neg = test.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("balanced accuracy needs both classes in the test fold"));
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for d in test {
        let hit = model.prob(d) >= 0.5;
        if hit && d.label {
            tp += 1;
        } else if !hit && !d.label {
            tn += 1;
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Balanced accuracy trained on `train` and tested on `test`.
pub fn bal_acc(train: &[Labeled], test: &[Labeled], n_features: usize, cfg: &ClassifierConfig) -> Result<f64> {
    balanced_accuracy(&fit_classifier(train, n_features, cfg)?, test)
}

/// `bal_acc(train on real) - bal_acc(train on synthetic)`, both on `real_test`.
pub fn tstr_delta_bal_acc(
    real_train: &[Labeled],
    real_test: &[Labeled],
    synth_train: &[Labeled],
    n_features: usize,
    cfg: &ClassifierConfig,
) -> Result<f64> {
    let test_pos = real_test.iter().filter(|d| d.label).count();
    if test_pos == 0 || test_pos == real_test.len() {
        return Err(Error::invalid("real test fold has a single class"));
    }
    Ok(bal_acc(real_train, real_test, n_features, cfg)? - bal_acc(synth_train, real_test, n_features, cfg)?)
}

// ---------------------------------------------------------------------------
// Membership inference

/// Product-kernel Gaussian KDE with per-dimension median-heuristic
/// bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKde {
    points: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
}

impl ProductKde {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("KDE needs at least two points"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Shape("KDE points differ in dimension".into()));
        }
        if points.iter().all(|p| p == &points[0]) {
            return Err(Error::invalid("degenerate KDE: all points identical"));
        }
        let bandwidths = exec::map_indexed(dim, |d| {
            let mut diffs: Vec<f64> = Vec::new();
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    let x = (points[i][d] - points[j][d]).abs();
                    if x > 0.0 {
                        diffs.push(x);
                    }
                }
            }
            if diffs.is_empty() {
                1.0
            } else {
                diffs.sort_by(f64::total_cmp);
                median(&diffs)
            }
        });
        Ok(ProductKde {
            points: points.to_vec(),
            bandwidths,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Log density up to the normalizing constant shared by all queries of
    /// this estimator.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((a, b), s)| ((a - b) / s).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = self.bandwidths.iter().map(|s| s.ln()).sum();
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - (self.points.len() as f64).ln() - norm
    }
}

fn mia_labels(members: usize, nonmembers: usize) -> Vec<bool> {
    let mut l = vec![true; members];
    l.extend(std::iter::repeat_n(false, nonmembers));
    l
}

fn check_mia_sets(members: &[Vec<f64>], nonmembers: &[Vec<f64>]) -> Result<()> {
    if members.len() != nonmembers.len() || members.len() < 10 {
        return Err(Error::invalid(format!(
            "membership inference needs equal member/nonmember sets of at least 10, got {} and {}",
            members.len(),
            nonmembers.len()
        )));
    }
    Ok(())
}

/// Density-ratio attacker: score `log p_synth(x) - log p_ref(x)`.
pub fn domias_auroc(synth: &[Vec<f64>], reference: &[Vec<f64>], members: &[Vec<f64>], nonmembers: &[Vec<f64>]) -> Result<f64> {
    check_mia_sets(members, nonmembers)?;
    let ps = ProductKde::fit(synth)?;
    let pr = ProductKde::fit(reference)?;
    let queries: Vec<&Vec<f64>> = members.iter().chain(nonmembers).collect();
    let scores = exec::map_slice(&queries, |x| ps.log_density(x) - pr.log_density(x));
    auroc(&scores, &mia_labels(members.len(), nonmembers.len()))
}

/// Distance attacker: score is minus the distance to the nearest synthetic
/// record.
pub fn nearest_synth_scores(synth: &[Vec<f64>], queries: &[Vec<f64>]) -> Result<Vec<f64>> {
    if synth.is_empty() {
        return Err(Error::Empty("synthetic set".into()));
    }
    Ok(exec::map_slice(queries, |q| {
        -synth.iter().map(|s| sq_dist(s, q)).fold(f64::INFINITY, f64::min).sqrt()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowAttack {
    pub auroc: f64,
    /// Median shadow-set score; records scoring above it are called members.
    pub threshold: f64,
}

pub fn shadow_threshold_auroc(synth: &[Vec<f64>], shadow: &[Vec<f64>], members: &[Vec<f64>], nonmembers: &[Vec<f64>]) -> Result<ShadowAttack> {
    check_mia_sets(members, nonmembers)?;
    if shadow.is_empty() {
        return Err(Error::Empty("shadow set".into()));
    }
    let mut sh = nearest_synth_scores(synth, shadow)?;
    sh.sort_by(f64::total_cmp);
    let queries: Vec<Vec<f64>> = members.iter().chain(nonmembers).cloned().collect();
    let scores = nearest_synth_scores(synth, &queries)?;
    Ok(ShadowAttack {
        auroc: auroc(&scores, &mia_labels(members.len(), nonmembers.len()))?,
        threshold: median(&sh),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub classifier: ClassifierConfig,
    pub shadow_fraction: f64,
    pub max_gap_points: usize,
    pub permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            classifier: ClassifierConfig::default(),
            shadow_fraction: 0.05,
            max_gap_points: 1000,
            permutations: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.shadow_fraction > 0.0 && self.shadow_fraction < 1.0) {
            v.push(format!("eval.shadow_fraction {} outside (0, 1)", self.shadow_fraction));
        }
        if self.max_gap_points < 2 {
            v.push("eval.max_gap_points must be at least 2".into());
        }
        if self.classifier.hidden == 0 || self.classifier.epochs == 0 || !(self.classifier.lr > 0.0) {
            v.push("eval.classifier needs positive hidden, epochs and lr".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cat_mmd2: f64,
    pub cat_sigma: f64,
    pub cont_mmd2: f64,
    pub cont_sigma: f64,
    pub delta_bal_acc: f64,
    pub mia: BTreeMap<String, f64>,
    pub shadow_threshold: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// Real data handed to the evaluator.
pub struct RealFolds<'a> {
    pub train: &'a [Trajectory],
    pub valid: &'a [Trajectory],
    pub test: &'a [Trajectory],
}

/// Computes every report field. Members are drawn from the training fold
/// and nonmembers from the test fold in equal numbers; the shadow set is a
/// fresh `shadow_fraction` of all real patients taken from the validation
/// fold for each seed.
pub fn evaluate(real: &RealFolds<'_>, synth: &[Trajectory], vocab: &TokenVocab, cfg: &EvalConfig, seed: u64, config_digest: &str) -> Result<EvalReport> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let cat = cat_mmd(real.train, synth, vocab)?;
    let cont = cont_mmd(real.train, synth, cfg.max_gap_points, seed)?;

    let n_feat = vocab.lab_range().len() + vocab.med_range().len();
    let clf = ClassifierConfig {
        seed,
        ..cfg.classifier.clone()
    };
    let lab = |s: &[Trajectory]| to_labeled(s, vocab, &any_ae);
    let delta = tstr_delta_bal_acc(&lab(real.train), &lab(real.test), &lab(synth), n_feat, &clf)?;

    let feats = |s: &[&Trajectory]| s.iter().map(|r| count_features(r, vocab)).collect::<Vec<_>>();
    let mut r = rng::stream(seed, "mia", &[]);
    let k = real.train.len().min(real.test.len());
    let members: Vec<&Trajectory> = real.train.choose_multiple(&mut r, k).collect();
    let nonmembers: Vec<&Trajectory> = real.test.choose_multiple(&mut r, k).collect();
    let n_real = real.train.len() + real.valid.len() + real.test.len();
    let n_shadow = ((cfg.shadow_fraction * n_real as f64).round() as usize).clamp(2, real.valid.len().max(2));
    if real.valid.len() < 2 {
        return Err(Error::invalid("validation fold too small for a shadow set"));
    }
    let shadow: Vec<&Trajectory> = real.valid.choose_multiple(&mut r, n_shadow).collect();
    let synth_refs: Vec<&Trajectory> = synth.iter().collect();
    let (sf, shf, mf, nf) = (feats(&synth_refs), feats(&shadow), feats(&members), feats(&nonmembers));
    let domias = domias_auroc(&sf, &shf, &mf, &nf)?;
    let shadow_attack = shadow_threshold_auroc(&sf, &shf, &mf, &nf)?;
    let mut mia = BTreeMap::new();
    mia.insert("domias".to_string(), domias);
    mia.insert("shadow".to_string(), shadow_attack.auroc);
    Ok(EvalReport {
        cat_mmd2: cat.mmd2,
        cat_sigma: cat.sigma,
        cont_mmd2: cont.mmd2,
        cont_sigma: cont.sigma,
        delta_bal_acc: delta,
        mia,
        shadow_threshold: shadow_attack.threshold,
        seed,
        config_digest: config_digest.to_string(),
    })
}

impl EvalReport {
    pub fn mean_mia(&self) -> f64 {
        self.mia.values().sum::<f64>() / self.mia.len().max(1) as f64
    }

    pub fn metric_lines(&self) -> Vec<String> {
        let mut v = vec![
            format!("cat_mmd2={}", self.cat_mmd2),
            format!("cont_mmd2={}", self.cont_mmd2),
            format!("delta_bal_acc={}", self.delta_bal_acc),
        ];
        for (k, a) in &self.mia {
            v.push(format!("mia_{k}={a}"));
        }
        v
    }

    /// Aligned text table with one row.
    pub fn table(&self) -> String {
        format!(
            "{:>12} {:>12} {:>14} {:>10} {:>10}\n{:>12.5} {:>12.5} {:>14.4} {:>10.3} {:>10.3}\n",
            "cat_mmd2",
            "cont_mmd2",
            "delta_bal_acc",
            "mia_domias",
            "mia_shadow",
            self.cat_mmd2,
            self.cont_mmd2,
            self.delta_bal_acc,
            self.mia.get("domias").copied().unwrap_or(f64::NAN),
            self.mia.get("shadow").copied().unwrap_or(f64::NAN),
        )
    }
}
