//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use kgsynth::cohort::{simulate_cohort, CohortConfig, SimulatedCohort};
use kgsynth::kg::{generate_toy_kg, KgBuilder, KgGenConfig, KnowledgeGraph, NodeKind};
use kgsynth::metapath::TokenVocab;
use rand::Rng;

pub const KINDS: [NodeKind; 6] = NodeKind::ALL;

/// Random typed multigraph: `n` nodes of random kinds, `m` edge draws over
/// `r` relations (duplicates collapse, parallel edges with different
/// relations stay).
pub fn random_graph(seed: u64, n: usize, r: usize, m: usize) -> KnowledgeGraph {
    let mut rng = kgsynth::rng::stream(seed, "test-graph", &[]);
    let mut b = KgBuilder::new();
    for k in 0..r {
        b.declare_relation(&format!("rel{k}"));
    }
    for i in 0..n {
        let kind = KINDS[rng.random_range(0..KINDS.len())];
        b.add_node(&format!("n{i:03}"), kind, &format!("node {i}")).unwrap();
    }
    for _ in 0..m {
        let s = rng.random_range(0..n);
        let d = rng.random_range(0..n);
        if s == d {
            continue;
        }
        let rel = format!("rel{}", rng.random_range(0..r));
        b.add_edge(&format!("n{s:03}"), &format!("n{d:03}"), &rel, "test", None)
            .unwrap();
    }
    b.build()
}

/// Every simple directed path of length `1..=max_len` starting at `anchor`,
/// found by scanning the full edge list at each step (no adjacency index).
pub fn dfs_paths(kg: &KnowledgeGraph, anchor: &str, max_len: usize) -> Vec<(String, Vec<String>)> {
    let edges: Vec<(String, String, String)> = kg
        .edges()
        .iter()
        .map(|e| {
            (
                kg.node(e.src).id.clone(),
                kg.node(e.dst).id.clone(),
                kg.relations()[e.relation].clone(),
            )
        })
        .collect();
    let mut out = Vec::new();
    let mut path_nodes = vec![anchor.to_string()];
    let mut rels = Vec::new();
    fn go(
        edges: &[(String, String, String)],
        max_len: usize,
        path_nodes: &mut Vec<String>,
        rels: &mut Vec<String>,
        out: &mut Vec<(String, Vec<String>)>,
    ) {
        if rels.len() == max_len {
            return;
        }
        let here = path_nodes.last().unwrap().clone();
        for (s, d, r) in edges {
            if *s != here || path_nodes.contains(d) {
                continue;
            }
            path_nodes.push(d.clone());
            rels.push(r.clone());
            out.push((d.clone(), rels.clone()));
            go(edges, max_len, path_nodes, rels, out);
            rels.pop();
            path_nodes.pop();
        }
    }
    go(&edges, max_len, &mut path_nodes, &mut rels, &mut out);
    out
}

/// Per-target path counts grouped by relation sequence.
pub fn dfs_patterns(kg: &KnowledgeGraph, anchor: &str, max_len: usize) -> BTreeMap<String, BTreeMap<Vec<String>, u64>> {
    let mut m: BTreeMap<String, BTreeMap<Vec<String>, u64>> = BTreeMap::new();
    for (end, rels) in dfs_paths(kg, anchor, max_len) {
        *m.entry(end).or_default().entry(rels).or_default() += 1;
    }
    m
}

/// Node ids within `hops` undirected steps of `anchor`.
pub fn bfs_within(kg: &KnowledgeGraph, anchor: &str, hops: usize) -> BTreeSet<String> {
    let mut adj: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in kg.edges() {
        let (s, d) = (kg.node(e.src).id.clone(), kg.node(e.dst).id.clone());
        adj.entry(s.clone()).or_default().push(d.clone());
        adj.entry(d).or_default().push(s);
    }
    let mut dist: BTreeMap<String, usize> = BTreeMap::new();
    dist.insert(anchor.to_string(), 0);
    let mut q = VecDeque::from([anchor.to_string()]);
    while let Some(u) = q.pop_front() {
        let du = dist[&u];
        if du == hops {
            continue;
        }
        for w in adj.get(&u).cloned().unwrap_or_default() {
            if !dist.contains_key(&w) {
                dist.insert(w.clone(), du + 1);
                q.push_back(w);
            }
        }
    }
    dist.into_keys().collect()
}

/// The default toy graph: reference node shares at 1 500 nodes with the
/// pipeline's default degree scale.
pub fn toy_kg(seed: u64) -> KnowledgeGraph {
    generate_toy_kg(&KgGenConfig::reference(1500).with_degree_scale(8.0), seed).unwrap()
}

pub fn toy_cohort(kg: &KnowledgeGraph, cfg: &CohortConfig) -> (TokenVocab, SimulatedCohort) {
    let vocab = TokenVocab::from_kg(kg, cfg.n_labs, cfg.n_meds).unwrap();
    let c = simulate_cohort(kg, &vocab, cfg).unwrap();
    (vocab, c)
}

/// Mann-Whitney AUROC by direct pairwise comparison.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if a > b {
                    num += 1.0;
                } else if a == b {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Unbiased MMD² by explicit triple loops.
pub fn naive_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += k(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                yy += k(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    xx / (n * (n - 1.0)) + yy / (m * (m - 1.0)) - 2.0 * xy / (n * m)
}

pub fn random_points(seed: u64, n: usize, dim: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut rng = kgsynth::rng::stream(seed, "test-points", &[]);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() + shift).collect())
        .collect()
}
