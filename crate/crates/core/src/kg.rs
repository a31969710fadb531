//! Heterogeneous typed knowledge graph.
//!
//! Nodes carry one of a fixed set of kinds. Edges are directed, typed by a
//! relation drawn from a closed, declared vocabulary, and carry a provenance
//! tag plus an optional day-resolution validity interval. A graph is
//! immutable once built; all construction goes through [`KgBuilder`].

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Disease,
    Phenotype,
    Drug,
    LabTest,
    AdverseEvent,
    Gene,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        NodeKind::Disease,
        NodeKind::Phenotype,
        NodeKind::Drug,
        NodeKind::LabTest,
        NodeKind::AdverseEvent,
        NodeKind::Gene,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Disease => "Disease",
            NodeKind::Phenotype => "Phenotype",
            NodeKind::Drug => "Drug",
            NodeKind::LabTest => "LabTest",
            NodeKind::AdverseEvent => "AdverseEvent",
            NodeKind::Gene => "Gene",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            NodeKind::Disease => "disease",
            NodeKind::Phenotype => "phenotype",
            NodeKind::Drug => "drug",
            NodeKind::LabTest => "lab",
            NodeKind::AdverseEvent => "ae",
            NodeKind::Gene => "gene",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NodeKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown node kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
}

/// Closed day-resolution interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Validity {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::invalid(format!(
                "validity start {start} is after end {end}"
            )));
        }
        Ok(Validity { start, end })
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.start <= day && day <= self.end
    }
}

/// Directed edge, with endpoints and relation stored as dense indices into
/// the owning graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
    pub provenance: String,
    pub validity: Option<Validity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    index: HashMap<String, usize>,
    relations: Vec<String>,
    edges: Vec<TypedEdge>,
    /// `adjacency[node][relation]` lists edge indices with that source and
    /// relation, ordered by destination.
    adjacency: Vec<Vec<Vec<usize>>>,
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        KgBuilder::new().build()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Nodes in ascending id order; the position is the node index.
    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    /// Edges in ascending `(src id, dst id, relation)` order.
    pub fn edges(&self) -> &[TypedEdge] {
        &self.edges
    }

    /// Declared relation names in ascending order; the position is the
    /// relation index.
    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.node_index(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn node(&self, idx: usize) -> &KgNode {
        &self.nodes[idx]
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.binary_search_by(|r| r.as_str().cmp(name)).ok()
    }

    /// Edge indices leaving `node` with the given relation.
    pub fn out_edges_by_relation(&self, node: usize, relation: usize) -> &[usize] {
        &self.adjacency[node][relation]
    }

    /// All edge indices leaving `node`, grouped by relation index.
    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[node].iter().flatten().copied()
    }

    pub fn edge(&self, idx: usize) -> &TypedEdge {
        &self.edges[idx]
    }

    /// Undirected adjacency lists (deduplicated, self-loops dropped).
    fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.nodes.len()];
        for e in &self.edges {
            if e.src != e.dst {
                nb[e.src].insert(e.dst);
                nb[e.dst].insert(e.src);
            }
        }
        nb.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Undirected hop distance from `anchor` to every node (`None` if
    /// unreachable).
    pub fn hop_distances(&self, anchor: usize) -> Vec<Option<usize>> {
        let nb = self.undirected_neighbors();
        let mut dist = vec![None; self.nodes.len()];
        dist[anchor] = Some(0);
        let mut queue = VecDeque::from([anchor]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &nb[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Subgraph of nodes within `max_hops` undirected hops of `anchor`, with
    /// every edge between retained nodes. `usize::MAX` means unbounded.
    pub fn prune_to_neighborhood(&self, anchor: &str, max_hops: usize) -> Result<KnowledgeGraph> {
        let a = self.require(anchor)?;
        let dist = self.hop_distances(a);
        let keep: Vec<bool> = dist
            .iter()
            .map(|d| matches!(d, Some(h) if *h <= max_hops))
            .collect();
        Ok(self.induced_subgraph(&keep))
    }

    /// Keeps edges without a validity interval and those valid on `day`.
    pub fn filter_valid_at(&self, day: NaiveDate) -> KnowledgeGraph {
        let mut b = self.builder_with_nodes(&vec![true; self.nodes.len()]);
        for e in &self.edges {
            if e.validity.is_none_or(|v| v.contains(day)) {
                b.push_edge_unchecked(e.clone());
            }
        }
        b.build_remapped(self)
    }

    fn builder_with_nodes(&self, keep: &[bool]) -> KgBuilder {
        let mut b = KgBuilder::new();
        for r in &self.relations {
            b.declare_relation(r);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if keep[i] {
                b.nodes.insert(n.id.clone(), n.clone());
            }
        }
        b
    }

    fn induced_subgraph(&self, keep: &[bool]) -> KnowledgeGraph {
        let mut b = self.builder_with_nodes(keep);
        for e in &self.edges {
            if keep[e.src] && keep[e.dst] {
                b.push_edge_unchecked(e.clone());
            }
        }
        b.build_remapped(self)
    }

    pub fn stats(&self) -> KgStats {
        KgStats::of(self)
    }

    /// Writes the node TSV.
    pub fn write_nodes<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# id\tkind\tlabel")?;
        for n in &self.nodes {
            writeln!(w, "{}\t{}\t{}", n.id, n.kind, n.label)?;
        }
        Ok(())
    }

    /// Writes the edge TSV, relation header block first.
    pub fn write_edges<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.relations {
            writeln!(w, "!relation {r}")?;
        }
        for e in &self.edges {
            let (start, end) = match e.validity {
                Some(v) => (v.start.to_string(), v.end.to_string()),
                None => ("-".to_string(), "-".to_string()),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.nodes[e.src].id,
                self.nodes[e.dst].id,
                self.relations[e.relation],
                e.provenance,
                start,
                end
            )?;
        }
        Ok(())
    }

    /// Loads a graph from node and edge TSV streams.
    pub fn load<N: BufRead, E: BufRead>(node_decls: N, edges: E) -> Result<KnowledgeGraph> {
        load_edge_list(edges, node_decls)
    }
}

/// Mutable staging area for a graph; deduplicates edges on insert.
#[derive(Debug, Default, Clone)]
pub struct KgBuilder {
    nodes: BTreeMap<String, KgNode>,
    relations: BTreeSet<String>,
    // keyed by (src id, dst id, relation)
    edges: BTreeMap<(String, String, String), (BTreeSet<String>, Option<Validity>)>,
    // edges pushed by index from an existing graph, remapped in build
    raw: Vec<TypedEdge>,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare_relation(&mut self, name: &str) -> &mut Self {
        self.relations.insert(name.to_string());
        self
    }

    pub fn add_node(&mut self, id: &str, kind: NodeKind, label: &str) -> Result<&mut Self> {
        if id.is_empty() {
            return Err(Error::invalid("node id must be non-empty"));
        }
        if self.nodes.contains_key(id) {
            return Err(Error::DuplicateNode(id.to_string()));
        }
        self.nodes.insert(
            id.to_string(),
            KgNode {
                id: id.to_string(),
                kind,
                label: label.to_string(),
            },
        );
        Ok(self)
    }

    /// Adds an edge, merging with an existing `(src, dst, relation)` triple:
    /// provenance tags are unioned and validity widened to the earliest start
    /// and latest end. An edge without validity is treated as always valid.
    pub fn add_edge(
        &mut self,
        src: &str,
        dst: &str,
        relation: &str,
        provenance: &str,
        validity: Option<Validity>,
    ) -> Result<&mut Self> {
        for id in [src, dst] {
            if !self.nodes.contains_key(id) {
                return Err(Error::UnknownNode(id.to_string()));
            }
        }
        if !self.relations.contains(relation) {
            return Err(Error::invalid(format!("undeclared relation `{relation}`")));
        }
        let key = (src.to_string(), dst.to_string(), relation.to_string());
        match self.edges.get_mut(&key) {
            Some((prov, val)) => {
                prov.extend(split_provenance(provenance));
                *val = match (*val, validity) {
                    (Some(a), Some(b)) => Some(Validity {
                        start: a.start.min(b.start),
                        end: a.end.max(b.end),
                    }),
                    _ => None,
                };
            }
            None => {
                self.edges
                    .insert(key, (split_provenance(provenance).collect(), validity));
            }
        }
        Ok(self)
    }

    fn push_edge_unchecked(&mut self, e: TypedEdge) {
        self.raw.push(e);
    }

    fn build_remapped(self, origin: &KnowledgeGraph) -> KnowledgeGraph {
        let mut b = KgBuilder {
            nodes: self.nodes,
            relations: self.relations,
            edges: self.edges,
            raw: Vec::new(),
        };
        for e in self.raw {
            let key = (
                origin.nodes[e.src].id.clone(),
                origin.nodes[e.dst].id.clone(),
                origin.relations[e.relation].clone(),
            );
            b.edges
                .insert(key, (split_provenance(&e.provenance).collect(), e.validity));
        }
        b.build()
    }

    pub fn build(self) -> KnowledgeGraph {
        assert!(
            self.raw.is_empty(),
            "raw edges must be remapped with build_remapped"
        );
        let nodes: Vec<KgNode> = self.nodes.into_values().collect();
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let relations: Vec<String> = self.relations.into_iter().collect();
        let rel_index: HashMap<&str, usize> = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), i))
            .collect();
        let edges: Vec<TypedEdge> = self
            .edges
            .into_iter()
            .map(|((s, d, r), (prov, validity))| TypedEdge {
                src: index[&s],
                dst: index[&d],
                relation: rel_index[r.as_str()],
                provenance: join_provenance(&prov),
                validity,
            })
            .collect();
        let mut adjacency = vec![vec![Vec::new(); relations.len()]; nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            adjacency[e.src][e.relation].push(i);
        }
        KnowledgeGraph {
            nodes,
            index,
            relations,
            edges,
            adjacency,
        }
    }
}

fn split_provenance(p: &str) -> impl Iterator<Item = String> + '_ {
    p.split('|').filter(|s| !s.is_empty()).map(str::to_string)
}

fn join_provenance(p: &BTreeSet<String>) -> String {
    if p.is_empty() {
        "-".to_string()
    } else {
        p.iter().cloned().collect::<Vec<_>>().join("|")
    }
}

fn parse_date(s: &str) -> std::result::Result<Option<NaiveDate>, String> {
    if s == "-" {
        return Ok(None);
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(Some)
        .map_err(|e| format!("bad date `{s}`: {e}"))
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses node and edge TSV streams into a deduplicated graph.
///
/// Node lines are `id<TAB>kind<TAB>label`. The edge stream starts with
/// `!relation <name>` declarations followed by
/// `src<TAB>dst<TAB>relation<TAB>provenance<TAB>start<TAB>end` rows, dates in
/// ISO form or `-`. Lines starting with `#` and blank lines are skipped.
pub fn load_edge_list<E: BufRead, N: BufRead>(edges: E, node_decls: N) -> Result<KnowledgeGraph> {
    let mut b = KgBuilder::new();
    for (i, line) in node_decls.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                "nodes",
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let kind = fields[1]
            .parse::<NodeKind>()
            .map_err(|e| parse_err("nodes", lineno, e.to_string()))?;
        match b.add_node(fields[0], kind, fields[2]) {
            Ok(_) => {}
            Err(Error::DuplicateNode(id)) => return Err(Error::DuplicateNode(id)),
            Err(e) => return Err(parse_err("nodes", lineno, e.to_string())),
        }
    }
    let mut seen_edge = false;
    for (i, line) in edges.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('!') {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("relation"), Some(name), None) if !seen_edge => {
                    b.declare_relation(name);
                }
                (Some("relation"), Some(_), None) => {
                    return Err(parse_err(
                        "edges",
                        lineno,
                        "relation declaration after the header block",
                    ))
                }
                _ => return Err(parse_err("edges", lineno, "malformed directive")),
            }
            continue;
        }
        seen_edge = true;
        let f: Vec<&str> = trimmed.split('\t').collect();
        if f.len() != 6 {
            return Err(parse_err(
                "edges",
                lineno,
                format!("expected 6 tab-separated fields, found {}", f.len()),
            ));
        }
        let start = parse_date(f[4]).map_err(|m| parse_err("edges", lineno, m))?;
        let end = parse_date(f[5]).map_err(|m| parse_err("edges", lineno, m))?;
        let validity = match (start, end) {
            (Some(s), Some(e)) => {
                Some(Validity::new(s, e).map_err(|err| parse_err("edges", lineno, err.to_string()))?)
            }
            (None, None) => None,
            _ => {
                return Err(parse_err(
                    "edges",
                    lineno,
                    "start and end must both be dates or both `-`",
                ))
            }
        };
        match b.add_edge(f[0], f[1], f[2], f[3], validity) {
            Ok(_) => {}
            Err(Error::UnknownNode(id)) => {
                return Err(parse_err(
                    "edges",
                    lineno,
                    format!("edge references undeclared node `{id}`"),
                ))
            }
            Err(e) => return Err(parse_err("edges", lineno, e.to_string())),
        }
    }
    Ok(b.build())
}

/// Summary counts for a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgStats {
    pub nodes: usize,
    pub edges: usize,
    pub kind_counts: BTreeMap<NodeKind, usize>,
    pub kind_shares: BTreeMap<NodeKind, f64>,
    pub relation_counts: BTreeMap<String, usize>,
}

impl KgStats {
    pub fn of(kg: &KnowledgeGraph) -> KgStats {
        let mut kind_counts: BTreeMap<NodeKind, usize> =
            NodeKind::ALL.iter().map(|&k| (k, 0)).collect();
        for n in kg.nodes() {
            *kind_counts.entry(n.kind).or_default() += 1;
        }
        let total = kg.node_count();
        let kind_shares = kind_counts
            .iter()
            .map(|(&k, &c)| {
                let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                (k, share)
            })
            .collect();
        let mut relation_counts: BTreeMap<String, usize> =
            kg.relations().iter().map(|r| (r.clone(), 0)).collect();
        for e in kg.edges() {
            *relation_counts
                .get_mut(&kg.relations()[e.relation])
                .expect("declared relation") += 1;
        }
        KgStats {
            nodes: total,
            edges: kg.edge_count(),
            kind_counts,
            kind_shares,
            relation_counts,
        }
    }
}

/// One relation family for the toy generator: every `src`-kind node draws a
/// Poisson(`out_degree`) number of distinct `dst`-kind targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub src: NodeKind,
    pub dst: NodeKind,
    pub out_degree: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgGenConfig {
    pub counts: BTreeMap<NodeKind, usize>,
    pub relations: Vec<RelationSpec>,
}

const PROVENANCE_TAGS: [&str; 5] = ["orphanet", "hpo", "gard", "primekg", "faers"];

impl KgGenConfig {
    /// Allocates `total` nodes over kinds by largest-remainder rounding of
    /// `shares` (normalized to sum to one).
    pub fn with_shares(total: usize, shares: &[(NodeKind, f64)], relations: Vec<RelationSpec>) -> Self {
        let sum: f64 = shares.iter().map(|(_, s)| s).sum();
        let exact: Vec<f64> = shares.iter().map(|(_, s)| s / sum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rem = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rem == 0 {
                break;
            }
            counts[i] += 1;
            rem -= 1;
        }
        KgGenConfig {
            counts: shares.iter().zip(counts).map(|((k, _), c)| (*k, c)).collect(),
            relations,
        }
    }

    /// Desk-scale graph with node shares 27/18/22/12/21 over
    /// disease/phenotype/drug/lab/adverse-event plus a gene slice.
    pub fn reference(total: usize) -> Self {
        Self::with_shares(total, &REFERENCE_SHARES, default_relations())
    }

    /// Multiplies every relation's mean out-degree by `factor`.
    pub fn with_degree_scale(mut self, factor: f64) -> Self {
        for r in &mut self.relations {
            r.out_degree *= factor;
        }
        self
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.relations {
            for k in [r.src, r.dst] {
                if self.count(k) == 0 {
                    return Err(Error::invalid(format!(
                        "relation `{}` needs {k} nodes but the config has none",
                        r.name
                    )));
                }
            }
            if !(r.out_degree >= 0.0 && r.out_degree.is_finite()) {
                return Err(Error::invalid(format!(
                    "relation `{}` has invalid out-degree {}",
                    r.name, r.out_degree
                )));
            }
        }
        Ok(())
    }
}

/// Gene nodes take a small slice on top of the five tabulated kinds.
pub const REFERENCE_SHARES: [(NodeKind, f64); 6] = [
    (NodeKind::Disease, 0.27 * 0.95),
    (NodeKind::Phenotype, 0.18 * 0.95),
    (NodeKind::Drug, 0.22 * 0.95),
    (NodeKind::LabTest, 0.12 * 0.95),
    (NodeKind::AdverseEvent, 0.21 * 0.95),
    (NodeKind::Gene, 0.05),
];

pub fn default_relations() -> Vec<RelationSpec> {
    let spec = |name: &str, src, dst, out_degree| RelationSpec {
        name: name.to_string(),
        src,
        dst,
        out_degree,
    };
    vec![
        spec("has_phenotype", NodeKind::Disease, NodeKind::Phenotype, 4.0),
        spec("assoc_gene", NodeKind::Disease, NodeKind::Gene, 1.5),
        spec("has_lab", NodeKind::Disease, NodeKind::LabTest, 2.0),
        spec("treated_by", NodeKind::Disease, NodeKind::Drug, 2.0),
        spec("measured_by", NodeKind::Phenotype, NodeKind::LabTest, 1.0),
        spec("relieved_by", NodeKind::Phenotype, NodeKind::Drug, 0.8),
        spec("targeted_by", NodeKind::Gene, NodeKind::Drug, 1.0),
        spec("causes_ae", NodeKind::Drug, NodeKind::AdverseEvent, 1.5),
    ]
}

fn random_validity<R: Rng>(rng: &mut R) -> Validity {
    let base = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let start = base + chrono::Duration::days(rng.random_range(0..7300));
    let end = start + chrono::Duration::days(rng.random_range(0..3650));
    Validity { start, end }
}

/// Generates a random typed graph. Deterministic in `(config, seed)`.
pub fn generate_toy_kg(config: &KgGenConfig, seed: u64) -> Result<KnowledgeGraph> {
    config.validate()?;
    let mut b = KgBuilder::new();
    let mut ids: BTreeMap<NodeKind, Vec<String>> = BTreeMap::new();
    for kind in NodeKind::ALL {
        let n = config.count(kind);
        let list = ids.entry(kind).or_default();
        for i in 0..n {
            let id = format!("{}:{:05}", kind.id_prefix(), i);
            b.add_node(&id, kind, &format!("{kind} {i}"))?;
            list.push(id);
        }
    }
    for r in &config.relations {
        b.declare_relation(&r.name);
    }
    let mut rng = rng::stream(seed, "kg-edges", &[]);
    for r in &config.relations {
        let targets = &ids[&r.dst];
        for src in &ids[&r.src] {
            let k = if r.out_degree > 0.0 {
                let p = Poisson::new(r.out_degree).expect("positive rate");
                (p.sample(&mut rng) as usize).min(targets.len())
            } else {
                0
            };
            let picks: Vec<&String> = targets.choose_multiple(&mut rng, k).collect();
            for dst in picks {
                if src == dst {
                    continue;
                }
                let prov = PROVENANCE_TAGS[rng.random_range(0..PROVENANCE_TAGS.len())];
                let validity = random_validity(&mut rng);
                b.add_edge(src, dst, &r.name, prov, Some(validity))?;
            }
        }
    }
    // Every disease gets at least one outgoing edge when some relation can
    // provide one.
    if let Some(r) = config.relations.iter().find(|r| r.src == NodeKind::Disease) {
        let targets = ids[&r.dst].clone();
        let with_out: BTreeSet<String> = b
            .edges
            .keys()
            .filter(|(s, _, _)| s.starts_with("disease:"))
            .map(|(s, _, _)| s.clone())
            .collect();
        for src in ids[&NodeKind::Disease].clone() {
            if !with_out.contains(&src) {
                let dst = &targets[rng.random_range(0..targets.len())];
                let prov = PROVENANCE_TAGS[rng.random_range(0..PROVENANCE_TAGS.len())];
                let validity = random_validity(&mut rng);
                b.add_edge(&src, dst, &r.name, prov, Some(validity))?;
            }
        }
    }
    Ok(b.build())
}
