mod common;

use kgsynth::kg::{KgBuilder, NodeKind};
use kgsynth::metapath::{compute_profile, count_paths, pattern_features, psi_max, MissingNode, ProfileOptions, PsiNormalize, TokenVocab};

#[test]
fn path_counts_match_exhaustive_search_on_random_multigraphs() {
    for seed in 0..12 {
        let kg = common::random_graph(seed, 30, 3, 90);
        let anchor = "n000";
        for max_len in 1..=4 {
            let oracle = common::dfs_patterns(&kg, anchor, max_len);
            for node in kg.nodes() {
                let expected: u64 = oracle.get(&node.id).map_or(0, |m| m.values().sum());
                let got = count_paths(&kg, anchor, &node.id, max_len).unwrap();
                assert_eq!(got, expected, "seed={seed} L={max_len} target={}", node.id);
                let by_pattern = pattern_features(&kg, anchor, &node.id, max_len).unwrap();
                let expected_patterns = oracle.get(&node.id).cloned().unwrap_or_default();
                assert_eq!(by_pattern, expected_patterns);
            }
        }
    }
}

#[test]
fn counts_are_monotone_in_path_length() {
    let kg = common::random_graph(3, 25, 2, 80);
    for node in kg.nodes() {
        let mut prev = 0;
        for l in 1..=5 {
            let c = count_paths(&kg, "n000", &node.id, l).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }
}

#[test]
fn anchor_reaches_itself_only_through_zero_simple_paths() {
    let kg = common::random_graph(8, 20, 2, 80);
    assert_eq!(count_paths(&kg, "n000", "n000", 4).unwrap(), 0);
}

#[test]
fn adding_an_edge_never_lowers_a_count() {
    let kg = common::random_graph(21, 20, 2, 40);
    let mut b = KgBuilder::new();
    for r in kg.relations() {
        b.declare_relation(r);
    }
    for n in kg.nodes() {
        b.add_node(&n.id, n.kind, &n.label).unwrap();
    }
    for e in kg.edges() {
        b.add_edge(&kg.node(e.src).id, &kg.node(e.dst).id, &kg.relations()[e.relation], "x", None)
            .unwrap();
    }
    b.add_edge("n000", "n007", "rel0", "x", None).unwrap();
    let bigger = b.build();
    for n in kg.nodes() {
        assert!(count_paths(&bigger, "n000", &n.id, 3).unwrap() >= count_paths(&kg, "n000", &n.id, 3).unwrap());
    }
}

/// A hand-built graph: disease D with two phenotypes P1, P2, both measured by
/// lab L1, and D treated by drug M1 which causes adverse event A.
fn tiny() -> (kgsynth::kg::KnowledgeGraph, TokenVocab) {
    let mut b = KgBuilder::new();
    for r in ["has_phenotype", "measured_by", "treated_by", "causes_ae"] {
        b.declare_relation(r);
    }
    b.add_node("D", NodeKind::Disease, "d").unwrap();
    b.add_node("P1", NodeKind::Phenotype, "p1").unwrap();
    b.add_node("P2", NodeKind::Phenotype, "p2").unwrap();
    b.add_node("L1", NodeKind::LabTest, "l1").unwrap();
    b.add_node("L2", NodeKind::LabTest, "l2").unwrap();
    b.add_node("M1", NodeKind::Drug, "m1").unwrap();
    b.add_node("A", NodeKind::AdverseEvent, "a").unwrap();
    b.add_node("B", NodeKind::AdverseEvent, "b").unwrap();
    b.add_edge("D", "P1", "has_phenotype", "x", None).unwrap();
    b.add_edge("D", "P2", "has_phenotype", "x", None).unwrap();
    b.add_edge("P1", "L1", "measured_by", "x", None).unwrap();
    b.add_edge("P2", "L1", "measured_by", "x", None).unwrap();
    b.add_edge("D", "M1", "treated_by", "x", None).unwrap();
    b.add_edge("M1", "A", "causes_ae", "x", None).unwrap();
    let kg = b.build();
    let vocab = TokenVocab::new(
        &["L1".to_string(), "L2".to_string()],
        &["M1".to_string()],
        ["A".to_string(), "B".to_string()],
    )
    .unwrap();
    (kg, vocab)
}

#[test]
fn hand_built_profile_has_expected_scores() {
    let (kg, vocab) = tiny();
    let p = compute_profile(&kg, "D", &vocab, 0.3, &ProfileOptions::default()).unwrap();
    let id = |node: &str| vocab.find(node).unwrap();
    // Two length-2 paths reach L1; none reach L2; one length-1 path reaches M1.
    assert_eq!(p.psi_raw[id("L1")], 2.0);
    assert_eq!(p.psi_raw[id("L2")], 0.0);
    assert_eq!(p.psi_raw[id("M1")], 1.0);
    assert_eq!(p.psi_clipped[id("L1")], 2.0);
    assert_eq!(p.psi_max, Some(psi_max(0.3)));
    assert_eq!(p.pattern_index.len(), p.d);
    let col = p
        .pattern_index
        .iter()
        .position(|s| s == "has_phenotype>measured_by")
        .expect("pattern column");
    assert_eq!(p.psi_row(id("L1"))[col], 2.0);
}

#[test]
fn scores_above_the_ceiling_are_clipped() {
    let (kg, vocab) = tiny();
    let p = compute_profile(&kg, "D", &vocab, 0.6, &ProfileOptions::default()).unwrap();
    let l1 = vocab.find("L1").unwrap();
    let ceiling = 1.0 / 0.6 - 1e-4;
    assert!((p.psi_clipped[l1] - ceiling).abs() < 1e-12);
    assert!(p.psi_clipped.iter().all(|&s| s <= ceiling));
    assert!(0.6 * p.psi_clipped[l1] < 1.0);
}

#[test]
fn log_normalization_scales_into_the_ceiling() {
    let (kg, vocab) = tiny();
    let opts = ProfileOptions {
        normalize: PsiNormalize::Log1pMax,
        ..ProfileOptions::default()
    };
    let p = compute_profile(&kg, "D", &vocab, 0.6, &opts).unwrap();
    let l1 = vocab.find("L1").unwrap();
    let m1 = vocab.find("M1").unwrap();
    assert!((p.psi_clipped[l1] - psi_max(0.6)).abs() < 1e-12);
    assert!((p.psi_clipped[l1] / p.psi_clipped[m1] - 3f64.ln() / 2f64.ln()).abs() < 1e-9);
    assert!(p.psi_clipped.iter().all(|&s| s <= psi_max(0.6) + 1e-12));
}

#[test]
fn vocabulary_node_missing_from_graph_follows_policy() {
    let (kg, _) = tiny();
    let vocab = TokenVocab::new(
        &["L1".to_string(), "ghost".to_string()],
        &["M1".to_string()],
        ["A".to_string(), "B".to_string()],
    )
    .unwrap();
    assert!(compute_profile(&kg, "D", &vocab, 0.3, &ProfileOptions::default()).is_err());
    let lenient = ProfileOptions {
        missing: MissingNode::Zero,
        ..ProfileOptions::default()
    };
    let p = compute_profile(&kg, "D", &vocab, 0.3, &lenient).unwrap();
    assert_eq!(p.psi_raw[vocab.find("ghost").unwrap()], 0.0);
}

#[test]
fn profile_is_unchanged_by_pruning_beyond_path_length() {
    let kg = common::toy_kg(3);
    let cfg = kgsynth::cohort::CohortConfig::default();
    let vocab = TokenVocab::from_kg(&kg, cfg.n_labs, cfg.n_meds).unwrap();
    let full = compute_profile(&kg, &cfg.anchor, &vocab, 0.3, &ProfileOptions::default()).unwrap();
    let pruned_kg = kg.prune_to_neighborhood(&cfg.anchor, 3).unwrap();
    let opts = ProfileOptions {
        missing: MissingNode::Zero,
        ..ProfileOptions::default()
    };
    let pruned = compute_profile(&pruned_kg, &cfg.anchor, &vocab, 0.3, &opts).unwrap();
    assert_eq!(full.psi_raw, pruned.psi_raw);
}

#[test]
fn zero_lambda_leaves_scores_unclipped() {
    let (kg, vocab) = tiny();
    let p = compute_profile(&kg, "D", &vocab, 0.0, &ProfileOptions::default()).unwrap();
    assert_eq!(p.psi_max, None);
    assert_eq!(p.psi_raw, p.psi_clipped);
    assert!(compute_profile(&kg, "D", &vocab, 1.0, &ProfileOptions::default()).is_err());
}
