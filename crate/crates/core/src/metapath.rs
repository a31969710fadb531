//! Typed meta-path scores from an anchor disease to vocabulary tokens.
//!
//! A meta-path here is a simple directed path of length 1..=`max_len` whose
//! relation sequence is its pattern. For every token `v` the raw score is the
//! number of such paths from the anchor to the token's node; the feature
//! matrix `Psi` splits that count by pattern.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kg::{KnowledgeGraph, NodeKind};

pub const PROFILE_VERSION: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 3;
pub const DEFAULT_D_MAX: usize = 64;
/// Gap kept below `1/lambda` when clipping scores.
pub const CLIP_MARGIN: f64 = 1e-4;
pub const OTHER_PATTERN: &str = "<other>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    Lab,
    Med,
    AeFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: usize,
    pub field: Field,
    pub node: String,
}

/// Ordered token vocabulary: lab tokens, then medication tokens, then the two
/// adverse-event tokens (`clear`, `set`). Token ids are dense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<Token>,
    n_labs: usize,
    n_meds: usize,
}

impl TokenVocab {
    /// Builds a vocabulary from explicit node id lists. `ae` holds the
    /// nodes for the "no adverse event" and "adverse event" tokens.
    pub fn new(labs: &[String], meds: &[String], ae: [String; 2]) -> Result<Self> {
        if labs.is_empty() || meds.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one lab and one med token"));
        }
        let mut tokens = Vec::with_capacity(labs.len() + meds.len() + 2);
        for (field, nodes) in [(Field::Lab, labs), (Field::Med, meds), (Field::AeFlag, &ae[..])] {
            for n in nodes {
                tokens.push(Token {
                    id: tokens.len(),
                    field,
                    node: n.clone(),
                });
            }
        }
        Ok(TokenVocab {
            tokens,
            n_labs: labs.len(),
            n_meds: meds.len(),
        })
    }

    /// Takes the first `n_labs` lab-test nodes and `n_meds` drug nodes in id
    /// order, and the first two adverse-event nodes as the AE flag tokens.
    pub fn from_kg(kg: &KnowledgeGraph, n_labs: usize, n_meds: usize) -> Result<Self> {
        let of_kind = |k: NodeKind, n: usize| -> Result<Vec<String>> {
            let ids: Vec<String> = kg
                .nodes()
                .iter()
                .filter(|x| x.kind == k)
                .take(n)
                .map(|x| x.id.clone())
                .collect();
            if ids.len() < n {
                return Err(Error::VocabMismatch(format!(
                    "graph has {} {k} nodes, vocabulary needs {n}",
                    ids.len()
                )));
            }
            Ok(ids)
        };
        let labs = of_kind(NodeKind::LabTest, n_labs)?;
        let meds = of_kind(NodeKind::Drug, n_meds)?;
        let ae = of_kind(NodeKind::AdverseEvent, 2)?;
        Self::new(&labs, &meds, [ae[0].clone(), ae[1].clone()])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn lab_range(&self) -> Range<usize> {
        0..self.n_labs
    }

    pub fn med_range(&self) -> Range<usize> {
        self.n_labs..self.n_labs + self.n_meds
    }

    pub fn ae_range(&self) -> Range<usize> {
        let s = self.n_labs + self.n_meds;
        s..s + 2
    }

    pub fn block(&self, field: Field) -> Range<usize> {
        match field {
            Field::Lab => self.lab_range(),
            Field::Med => self.med_range(),
            Field::AeFlag => self.ae_range(),
        }
    }

    pub fn ae_clear(&self) -> usize {
        self.ae_range().start
    }

    pub fn ae_set(&self) -> usize {
        self.ae_range().start + 1
    }

    pub fn find(&self, node: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t.node == node)
    }
}

/// Enumerates simple directed paths of length `1..=max_len` from `anchor`,
/// calling `visit(end_node, relation_sequence)` once per path.
fn walk_paths<F: FnMut(usize, &[usize])>(kg: &KnowledgeGraph, anchor: usize, max_len: usize, visit: &mut F) {
    let mut on_path = vec![false; kg.node_count()];
    let mut rels = Vec::with_capacity(max_len);
    on_path[anchor] = true;
    extend(kg, anchor, max_len, &mut on_path, &mut rels, visit);
}

fn extend<F: FnMut(usize, &[usize])>(
    kg: &KnowledgeGraph,
    node: usize,
    max_len: usize,
    on_path: &mut [bool],
    rels: &mut Vec<usize>,
    visit: &mut F,
) {
    if rels.len() == max_len {
        return;
    }
    for e in kg.out_edges(node) {
        let edge = kg.edge(e);
        if on_path[edge.dst] {
            continue;
        }
        on_path[edge.dst] = true;
        rels.push(edge.relation);
        visit(edge.dst, rels);
        extend(kg, edge.dst, max_len, on_path, rels, visit);
        rels.pop();
        on_path[edge.dst] = false;
    }
}

fn check_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    Ok(())
}

/// Number of simple directed paths of length `1..=max_len` from `anchor` to
/// `target`.
pub fn count_paths(kg: &KnowledgeGraph, anchor: &str, target: &str, max_len: usize) -> Result<u64> {
    check_len(max_len)?;
    let a = kg.require(anchor)?;
    let t = kg.require(target)?;
    let mut n = 0u64;
    walk_paths(kg, a, max_len, &mut |end, _| {
        if end == t {
            n += 1;
        }
    });
    Ok(n)
}

/// Path counts from `anchor` to `target` keyed by relation-name sequence.
pub fn pattern_features(
    kg: &KnowledgeGraph,
    anchor: &str,
    target: &str,
    max_len: usize,
) -> Result<BTreeMap<Vec<String>, u64>> {
    check_len(max_len)?;
    let a = kg.require(anchor)?;
    let t = kg.require(target)?;
    let mut out: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    walk_paths(kg, a, max_len, &mut |end, rels| {
        if end == t {
            let key = rels.iter().map(|&r| kg.relations()[r].clone()).collect();
            *out.entry(key).or_default() += 1;
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiNormalize {
    /// Raw path count, clipped at `psi_max`.
    #[default]
    Clip,
    /// `psi_max * ln(1 + count) / ln(1 + max count)`.
    Log1pMax,
}

/// What to do with a vocabulary token whose node is not in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingNode {
    #[default]
    Error,
    /// Score zero with an all-zero feature row (used after pruning).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub max_len: usize,
    pub d_max: usize,
    pub normalize: PsiNormalize,
    pub missing: MissingNode,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            max_len: DEFAULT_MAX_LEN,
            d_max: DEFAULT_D_MAX,
            normalize: PsiNormalize::Clip,
            missing: MissingNode::Error,
        }
    }
}

/// Clipping ceiling for a guidance strength: `1/lambda - 1e-4`, or infinity
/// when guidance is off.
pub fn psi_max(lambda: f64) -> f64 {
    if lambda > 0.0 {
        1.0 / lambda - CLIP_MARGIN
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPathProfile {
    pub version: u32,
    pub anchor: String,
    pub lambda: f64,
    pub max_len: usize,
    pub normalize: PsiNormalize,
    /// `None` encodes an infinite ceiling (`lambda == 0`).
    pub psi_max: Option<f64>,
    pub psi_raw: Vec<f64>,
    pub psi_clipped: Vec<f64>,
    /// Row-major `V x d` per-pattern counts.
    pub psi_matrix: Vec<f64>,
    pub d: usize,
    /// Column labels: relation sequences joined by `>`, or `<other>`.
    pub pattern_index: Vec<String>,
    /// Node id of each token, in token order.
    pub token_nodes: Vec<String>,
}

impl MetaPathProfile {
    pub fn vocab_size(&self) -> usize {
        self.psi_raw.len()
    }

    pub fn psi_max_value(&self) -> f64 {
        self.psi_max.unwrap_or(f64::INFINITY)
    }

    pub fn psi_row(&self, v: usize) -> &[f64] {
        &self.psi_matrix[v * self.d..(v + 1) * self.d]
    }

    pub fn matches_vocab(&self, vocab: &TokenVocab) -> bool {
        self.token_nodes.len() == vocab.len()
            && self
                .token_nodes
                .iter()
                .zip(vocab.tokens())
                .all(|(n, t)| *n == t.node)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: MetaPathProfile = serde_json::from_str(s)?;
        if p.version != PROFILE_VERSION {
            return Err(Error::Version {
                found: p.version,
                expected: PROFILE_VERSION,
            });
        }
        if p.psi_matrix.len() != p.psi_raw.len() * p.d
            || p.psi_clipped.len() != p.psi_raw.len()
            || p.pattern_index.len() != p.d
        {
            return Err(Error::Shape("profile arrays disagree with V and d".into()));
        }
        Ok(p)
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1), got {lambda}")));
    }
    Ok(())
}

/// Computes the meta-path profile of `vocab` relative to `anchor`.
pub fn compute_profile(
    kg: &KnowledgeGraph,
    anchor: &str,
    vocab: &TokenVocab,
    lambda: f64,
    opts: &ProfileOptions,
) -> Result<MetaPathProfile> {
    check_lambda(lambda)?;
    check_len(opts.max_len)?;
    if opts.d_max == 0 {
        return Err(Error::invalid("d_max must be at least 1"));
    }
    let a = kg.require(anchor)?;
    let nv = vocab.len();

    let mut node_tokens: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in vocab.tokens() {
        match kg.node_index(&t.node) {
            Some(n) => node_tokens.entry(n).or_default().push(t.id),
            None if opts.missing == MissingNode::Zero => {}
            None => {
                return Err(Error::VocabMismatch(format!(
                    "token {} maps to node `{}` which is not in the graph",
                    t.id, t.node
                )))
            }
        }
    }

    // One subtree per first-hop edge; the subtrees are disjoint sets of paths
    // so their integer counts merge exactly in any order.
    let first: Vec<usize> = kg.out_edges(a).collect();
    let partial: Vec<Vec<(usize, Vec<usize>)>> = exec::map_slice(&first, |&e| {
        let edge = kg.edge(e);
        let mut hits = Vec::new();
        if edge.dst == a {
            return hits;
        }
        let mut on_path = vec![false; kg.node_count()];
        on_path[a] = true;
        on_path[edge.dst] = true;
        let mut rels = vec![edge.relation];
        let mut record = |end: usize, rels: &[usize]| {
            if node_tokens.contains_key(&end) {
                hits.push((end, rels.to_vec()));
            }
        };
        record(edge.dst, &rels);
        extend(kg, edge.dst, opts.max_len, &mut on_path, &mut rels, &mut record);
        hits
    });

    // counts[pattern][token]
    let mut counts: BTreeMap<Vec<usize>, BTreeMap<usize, u64>> = BTreeMap::new();
    for (end, rels) in partial.into_iter().flatten() {
        let row = counts.entry(rels).or_default();
        for &tok in &node_tokens[&end] {
            *row.entry(tok).or_default() += 1;
        }
    }

    let names = |rels: &[usize]| -> String {
        rels.iter()
            .map(|&r| kg.relations()[r].as_str())
            .collect::<Vec<_>>()
            .join(">")
    };
    let mut ranked: Vec<(u64, String, &BTreeMap<usize, u64>)> = counts
        .iter()
        .map(|(rels, row)| (row.values().sum::<u64>(), names(rels), row))
        .collect();
    ranked.sort_by(|x, y| y.0.cmp(&x.0).then_with(|| x.1.cmp(&y.1)));

    let (kept, folded) = if ranked.len() > opts.d_max {
        let (k, f) = ranked.split_at(opts.d_max - 1);
        (k, f)
    } else {
        (&ranked[..], &[][..])
    };
    let mut pattern_index: Vec<String> = kept.iter().map(|(_, n, _)| n.clone()).collect();
    if !folded.is_empty() || pattern_index.is_empty() {
        pattern_index.push(OTHER_PATTERN.to_string());
    }
    let d = pattern_index.len();
    let mut psi_matrix = vec![0.0; nv * d];
    for (col, (_, _, row)) in kept.iter().enumerate() {
        for (&tok, &c) in row.iter() {
            psi_matrix[tok * d + col] = c as f64;
        }
    }
    for (_, _, row) in folded {
        for (&tok, &c) in row.iter() {
            psi_matrix[tok * d + d - 1] += c as f64;
        }
    }
    let psi_raw: Vec<f64> = (0..nv)
        .map(|v| psi_matrix[v * d..(v + 1) * d].iter().sum())
        .collect();

    let ceiling = psi_max(lambda);
    let psi_clipped: Vec<f64> = if lambda == 0.0 {
        psi_raw.clone()
    } else {
        match opts.normalize {
            PsiNormalize::Clip => psi_raw.iter().map(|&p| p.min(ceiling)).collect(),
            PsiNormalize::Log1pMax => {
                let top = psi_raw.iter().cloned().fold(0.0, f64::max);
                psi_raw
                    .iter()
                    .map(|&p| {
                        if top > 0.0 {
                            (ceiling * p.ln_1p() / top.ln_1p()).min(ceiling)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    };

    Ok(MetaPathProfile {
        version: PROFILE_VERSION,
        anchor: anchor.to_string(),
        lambda,
        max_len: opts.max_len,
        normalize: opts.normalize,
        psi_max: ceiling.is_finite().then_some(ceiling),
        psi_raw,
        psi_clipped,
        psi_matrix,
        d,
        pattern_index,
        token_nodes: vocab.tokens().iter().map(|t| t.node.clone()).collect(),
    })
}
