mod common;

use kgsynth::cohort::{CohortConfig, Trajectory};
use kgsynth::eval::{
    any_ae, auroc, bal_acc, cat_mmd, count_features, domias_auroc, median_heuristic_bandwidth, mmd2_unbiased, permutation_null,
    quantile, shadow_threshold_auroc, spearman, to_labeled, tstr_delta_bal_acc, ClassifierConfig,
};
use kgsynth::metapath::TokenVocab;
use rand::seq::SliceRandom;
use rand::Rng;

fn cohort(seed: u64, n: usize, gamma: f64) -> (TokenVocab, Vec<Trajectory>) {
    let kg = common::toy_kg(1);
    let cfg = CohortConfig {
        seed,
        n_patients: n,
        gamma,
        ..CohortConfig::default()
    };
    let (vocab, c) = common::toy_cohort(&kg, &cfg);
    (vocab, c.records)
}

fn features(set: &[Trajectory], vocab: &TokenVocab) -> Vec<Vec<f64>> {
    set.iter().map(|r| count_features(r, vocab)).collect()
}

#[test]
fn bandwidth_examples() {
    assert_eq!(median_heuristic_bandwidth(&[vec![0.0, 0.0], vec![0.0, 4.0]]).unwrap(), 4.0);
    assert_eq!(median_heuristic_bandwidth(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap(), 2.0);
    assert!(median_heuristic_bandwidth(&[vec![1.0], vec![1.0]]).is_err());
}

#[test]
fn bandwidth_matches_exhaustive_scan() {
    let pts = common::random_points(2, 100, 5, 0.0);
    let mut d = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let s: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if s > 0.0 {
                d.push(s.sqrt());
            }
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    assert!((median_heuristic_bandwidth(&pts).unwrap() - median).abs() < 1e-12);
}

#[test]
fn mmd_closed_forms() {
    let a = vec![vec![1.5, -2.0]; 2];
    assert_eq!(mmd2_unbiased(&a, &a, 1.0).unwrap(), 0.0);
    for (c, sigma) in [(1.0f64, 1.0f64), (3.0, 2.0), (0.5, 0.25)] {
        let x = vec![vec![0.0]; 2];
        let y = vec![vec![c]; 2];
        let expected = 2.0 - 2.0 * (-(c * c) / (2.0 * sigma * sigma)).exp();
        assert!((mmd2_unbiased(&x, &y, sigma).unwrap() - expected).abs() < 1e-15);
    }
    assert!(mmd2_unbiased(&[vec![0.0]], &a, 1.0).is_err());
    assert!(mmd2_unbiased(&a, &a, 0.0).is_err());
}

#[test]
fn mmd_matches_triple_loop() {
    for seed in 0..10 {
        let x = common::random_points(seed, 30, 4, 0.0);
        let y = common::random_points(seed + 100, 30, 4, 0.2);
        let sigma = 0.7;
        let ours = mmd2_unbiased(&x, &y, sigma).unwrap();
        let naive = common::naive_mmd2(&x, &y, sigma);
        assert!((ours - naive).abs() <= 1e-12 * naive.abs().max(1e-300), "{ours} vs {naive}");
    }
}

#[test]
fn split_sample_mmd_is_centered_at_zero() {
    let pts = common::random_points(7, 60, 3, 0.0);
    let mut rng = kgsynth::rng::stream(1, "halves", &[]);
    let vals: Vec<f64> = (0..200)
        .map(|_| {
            let mut p = pts.clone();
            p.shuffle(&mut rng);
            let (a, b) = p.split_at(30);
            mmd2_unbiased(a, b, 0.5).unwrap()
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 2.0 * sd / n.sqrt(), "mean {mean}, se {}", sd / n.sqrt());
}

#[test]
fn copied_synthetic_set_has_non_positive_cat_mmd() {
    let (vocab, real) = cohort(3, 60, 1.0);
    assert!(cat_mmd(&real, &real.clone(), &vocab).unwrap().mmd2 <= 0.0);
}

#[test]
fn same_simulator_cohorts_sit_inside_the_null() {
    let (vocab, a) = cohort(11, 80, 1.0);
    let (_, b) = cohort(12, 80, 1.0);
    let est = cat_mmd(&a, &b, &vocab).unwrap();
    let (fa, fb) = (features(&a, &vocab), features(&b, &vocab));
    let null = permutation_null(&fa, &fb, est.sigma, 200, 5).unwrap();
    assert!(est.mmd2.abs() < quantile(&null, 0.95), "{} vs q95 {}", est.mmd2, quantile(&null, 0.95));
}

#[test]
fn different_gamma_cohorts_are_separated() {
    let (vocab, a) = cohort(11, 80, 0.0);
    let (_, b) = cohort(12, 80, 2.0);
    let est = cat_mmd(&a, &b, &vocab).unwrap();
    let (fa, fb) = (features(&a, &vocab), features(&b, &vocab));
    let null = permutation_null(&fa, &fb, est.sigma, 200, 5).unwrap();
    assert!(est.mmd2 > quantile(&null, 0.99));
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn auroc_matches_pairwise_oracle_with_ties() {
    let mut rng = kgsynth::rng::stream(4, "auroc", &[]);
    for _ in 0..20 {
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..25) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.4)).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), common::pairwise_auroc(&scores, &labels));
    }
}

#[test]
fn spearman_of_monotone_sequences() {
    assert!((spearman(&[0.5, 0.3, 0.1, 0.0], &[1.0, 2.0, 3.0, 4.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 300.0]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn tstr_on_identical_data_is_exactly_zero() {
    let (vocab, real) = cohort(21, 200, 1.0);
    let lab = to_labeled(&real, &vocab, &any_ae);
    let (train, test) = lab.split_at(160);
    let n_feat = vocab.lab_range().len() + vocab.med_range().len();
    let d = tstr_delta_bal_acc(train, test, train, n_feat, &ClassifierConfig::default()).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn tstr_with_permuted_labels_falls_to_chance() {
    let (vocab, real) = cohort(22, 1000, 1.0);
    let lab = to_labeled(&real, &vocab, &any_ae);
    let (train, test) = lab.split_at(800);
    let n_feat = vocab.lab_range().len() + vocab.med_range().len();
    let mut deltas = Vec::new();
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let cfg = ClassifierConfig {
            seed,
            kind: kgsynth::eval::ClassifierKind::Logistic,
            ..ClassifierConfig::default()
        };
        let mut permuted = train.to_vec();
        let mut labels: Vec<bool> = permuted.iter().map(|d| d.label).collect();
        labels.shuffle(&mut kgsynth::rng::stream(seed, "permute", &[]));
        for (d, l) in permuted.iter_mut().zip(labels) {
            d.label = l;
        }
        let real_acc = bal_acc(train, test, n_feat, &cfg).unwrap();
        let delta = tstr_delta_bal_acc(train, test, &permuted, n_feat, &cfg).unwrap();
        deltas.push(delta);
        gaps.push(real_acc - 0.5);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&deltas) - mean(&gaps)).abs() <= 0.05, "delta {} vs {}", mean(&deltas), mean(&gaps));
}

#[test]
fn tstr_rejects_single_class_test_fold() {
    let (vocab, real) = cohort(21, 40, 1.0);
    let mut lab = to_labeled(&real, &vocab, &any_ae);
    for d in &mut lab {
        d.label = false;
    }
    let n_feat = vocab.lab_range().len() + vocab.med_range().len();
    assert!(tstr_delta_bal_acc(&lab, &lab, &lab, n_feat, &ClassifierConfig::default()).is_err());
}

struct MiaSets {
    members: Vec<Vec<f64>>,
    nonmembers: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    fresh: Vec<Vec<f64>>,
}

fn mia_sets(seed: u64, n: usize) -> MiaSets {
    let draw = |k: u64, size| {
        let (vocab, set) = cohort(1000 * seed + k, size, 1.0);
        features(&set, &vocab)
    };
    MiaSets {
        members: draw(1, n),
        nonmembers: draw(2, n),
        reference: draw(3, n),
        fresh: draw(4, n),
    }
}

#[test]
fn leaked_members_are_detected_by_both_attackers() {
    let s = mia_sets(1, 50);
    let copies = s.members.clone();
    assert!(domias_auroc(&copies, &s.reference, &s.members, &s.nonmembers).unwrap() > 0.9);
    assert!(shadow_threshold_auroc(&copies, &s.reference[..5], &s.members, &s.nonmembers).unwrap().auroc > 0.9);
}

#[test]
fn fresh_draws_leave_attackers_at_chance() {
    let (mut d, mut sh) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let s = mia_sets(seed + 10, 200);
        d.push(domias_auroc(&s.fresh, &s.reference, &s.members, &s.nonmembers).unwrap());
        sh.push(shadow_threshold_auroc(&s.fresh, &s.reference[..10], &s.members, &s.nonmembers).unwrap().auroc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((0.45..=0.55).contains(&mean(&d)), "domias {d:?}");
    assert!((0.40..=0.60).contains(&mean(&sh)), "shadow {sh:?}");
}

#[test]
fn identical_distances_give_an_uninformative_attacker() {
    // Every query sits at the same distance from the lone synthetic point.
    let synth = vec![vec![0.0, 0.0]];
    let members = vec![vec![1.0, 0.0]; 10];
    let nonmembers = vec![vec![0.0, -1.0]; 10];
    let a = shadow_threshold_auroc(&synth, &members[..2], &members, &nonmembers).unwrap();
    assert!((a.auroc - 0.5).abs() < 1e-12);
    assert!(shadow_threshold_auroc(&synth, &[], &members, &nonmembers).is_err());
    assert!(domias_auroc(&synth, &members, &members[..3], &nonmembers[..3]).is_err());
}
