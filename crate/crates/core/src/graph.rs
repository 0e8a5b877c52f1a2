//! Directed graphs, the Hermitian adjacency relation, dataset ingestion,
//! edge/node splits and four-way pair sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DuplexError, Result};
use crate::tensor::Matrix;

pub type NodeId = usize;

/// A complex scalar in rectangular form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn conj(self) -> Self {
        Complex::new(self.re, -self.im)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Relation of an ordered node pair in the Hermitian adjacency matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Forward,
    Reverse,
    Bidirectional,
    NoEdge,
}

impl Relation {
    /// Class order used everywhere: Forward, Reverse, Bidirectional, NoEdge.
    pub const ALL: [Relation; 4] = [
        Relation::Forward,
        Relation::Reverse,
        Relation::Bidirectional,
        Relation::NoEdge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Relation> {
        Relation::ALL.get(i).copied()
    }

    /// HAM entry: `i`, `-i`, `1`, `0`.
    pub fn prototype(self) -> Complex {
        match self {
            Relation::Forward => Complex::new(0.0, 1.0),
            Relation::Reverse => Complex::new(0.0, -1.0),
            Relation::Bidirectional => Complex::new(1.0, 0.0),
            Relation::NoEdge => Complex::new(0.0, 0.0),
        }
    }

    /// The relation of the transposed pair.
    pub fn transpose(self) -> Relation {
        match self {
            Relation::Forward => Relation::Reverse,
            Relation::Reverse => Relation::Forward,
            r => r,
        }
    }

    pub fn is_connected(self) -> bool {
        self != Relation::NoEdge
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Forward => "forward",
            Relation::Reverse => "reverse",
            Relation::Bidirectional => "bidirectional",
            Relation::NoEdge => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamEntry {
    pub rel: Relation,
    pub prototype: Complex,
}

impl From<Relation> for HamEntry {
    fn from(rel: Relation) -> Self {
        HamEntry {
            rel,
            prototype: rel.prototype(),
        }
    }
}

/// A directed graph without self-loops or duplicate edges.
#[derive(Clone, Debug, PartialEq)]
pub struct DiGraph {
    num_nodes: usize,
    edges: Vec<(NodeId, NodeId)>,
    out_adj: Vec<Vec<NodeId>>,
    in_adj: Vec<Vec<NodeId>>,
    original_ids: Vec<u64>,
    features: Option<Matrix>,
    labels: Option<Vec<usize>>,
}

impl DiGraph {
    /// Builds a graph, dropping self-loops and duplicate edges (both logged).
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self> {
        let mut out_adj = vec![Vec::new(); num_nodes];
        let mut kept = Vec::new();
        let (mut loops, mut dups) = (0usize, 0usize);
        for (u, v) in edges {
            for id in [u, v] {
                if id >= num_nodes {
                    return Err(DuplexError::Bounds { id, num_nodes });
                }
            }
            if u == v {
                loops += 1;
                continue;
            }
            kept.push((u, v));
            out_adj[u].push(v);
        }
        let mut in_adj = vec![Vec::new(); num_nodes];
        for list in &mut out_adj {
            list.sort_unstable();
            let before = list.len();
            list.dedup();
            dups += before - list.len();
        }
        let mut edges = Vec::with_capacity(kept.len() - dups);
        {
            // keep first occurrence order of the input
            let mut seen = std::collections::HashSet::with_capacity(kept.len());
            for e in kept {
                if seen.insert(e) {
                    edges.push(e);
                    in_adj[e.1].push(e.0);
                }
            }
        }
        for list in &mut in_adj {
            list.sort_unstable();
        }
        if loops > 0 {
            log::info!("dropped {loops} self-loop edge(s)");
        }
        if dups > 0 {
            log::info!("dropped {dups} duplicate edge(s)");
        }
        Ok(DiGraph {
            num_nodes,
            edges,
            out_adj,
            in_adj,
            original_ids: (0..num_nodes as u64).collect(),
            features: None,
            labels: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn out_neighbors(&self, u: NodeId) -> &[NodeId] {
        &self.out_adj[u]
    }

    pub fn in_neighbors(&self, u: NodeId) -> &[NodeId] {
        &self.in_adj[u]
    }

    pub fn out_degree(&self, u: NodeId) -> usize {
        self.out_adj[u].len()
    }

    pub fn in_degree(&self, u: NodeId) -> usize {
        self.in_adj[u].len()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.out_adj[u].binary_search(&v).is_ok()
    }

    /// Original identifier of a node in the source file.
    pub fn original_id(&self, u: NodeId) -> u64 {
        self.original_ids[u]
    }

    pub fn original_ids(&self) -> &[u64] {
        &self.original_ids
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.num_nodes {
            return Err(DuplexError::Data(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                self.num_nodes
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(DuplexError::Data(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    fn with_original_ids(mut self, ids: Vec<u64>) -> Self {
        debug_assert_eq!(ids.len(), self.num_nodes);
        self.original_ids = ids;
        self
    }

    /// Relation of the ordered pair, without the `u ≠ v` check.
    pub fn relation(&self, u: NodeId, v: NodeId) -> Relation {
        match (self.has_edge(u, v), self.has_edge(v, u)) {
            (true, true) => Relation::Bidirectional,
            (true, false) => Relation::Forward,
            (false, true) => Relation::Reverse,
            (false, false) => Relation::NoEdge,
        }
    }

    /// HAM entry `H(u, v)`. The diagonal is not part of the reconstruction
    /// target and is rejected.
    pub fn ham_lookup(&self, u: NodeId, v: NodeId) -> Result<HamEntry> {
        for id in [u, v] {
            if id >= self.num_nodes {
                return Err(DuplexError::Bounds {
                    id,
                    num_nodes: self.num_nodes,
                });
            }
        }
        if u == v {
            return Err(DuplexError::Data(format!(
                "HAM lookup on diagonal pair ({u}, {u})"
            )));
        }
        Ok(self.relation(u, v).into())
    }

    /// Same nodes, every edge reversed.
    pub fn reversed(&self) -> DiGraph {
        let mut g = DiGraph::from_edges(self.num_nodes, self.edges.iter().map(|&(u, v)| (v, u)))
            .expect("reversing a valid graph");
        g.original_ids = self.original_ids.clone();
        g.features = self.features.clone();
        g.labels = self.labels.clone();
        g
    }

    /// Same node set (features and labels kept), different edge set.
    pub fn with_edge_subset(&self, edges: &[(NodeId, NodeId)]) -> Result<DiGraph> {
        let mut g = DiGraph::from_edges(self.num_nodes, edges.iter().copied())?;
        g.original_ids = self.original_ids.clone();
        g.features = self.features.clone();
        g.labels = self.labels.clone();
        Ok(g)
    }

    /// Subgraph induced by `nodes`; returns it with the old id of every new node.
    pub fn induced_subgraph(&self, nodes: &[NodeId]) -> Result<(DiGraph, Vec<NodeId>)> {
        let mut keep: Vec<NodeId> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut map = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(DuplexError::Bounds {
                    id: old,
                    num_nodes: self.num_nodes,
                });
            }
            map[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| map[u] != usize::MAX && map[v] != usize::MAX)
            .map(|&(u, v)| (map[u], map[v]));
        let mut g = DiGraph::from_edges(keep.len(), edges)?;
        g.original_ids = keep.iter().map(|&u| self.original_ids[u]).collect();
        g.features = self.features.as_ref().map(|f| f.select_rows(&keep));
        g.labels = self
            .labels
            .as_ref()
            .map(|l| keep.iter().map(|&u| l[u]).collect());
        Ok((g, keep))
    }

    /// Unordered bidirectional pairs `(u, v)` with `u < v`.
    pub fn bidirectional_pairs(&self) -> Vec<(NodeId, NodeId)> {
        self.edges
            .iter()
            .filter(|&&(u, v)| u < v && self.has_edge(v, u))
            .copied()
            .collect()
    }

    /// Edges whose transpose is not an edge.
    pub fn unidirectional_edges(&self) -> Vec<(NodeId, NodeId)> {
        self.edges
            .iter()
            .filter(|&&(u, v)| !self.has_edge(v, u))
            .copied()
            .collect()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes)
            .map(|u| self.out_degree(u).max(self.in_degree(u)))
            .max()
            .unwrap_or(0)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DuplexError::io(format!("reading {}", path.display()), e))
}

/// Reads a whitespace-separated `src dst` edge list with `#` comments.
///
/// With `num_nodes` the ids are used as-is and must be below it. Without it
/// the distinct ids are remapped, in ascending order, onto `0..n`.
pub fn load_edge_list(path: impl AsRef<Path>, num_nodes: Option<usize>) -> Result<DiGraph> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| DuplexError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let mut next_id = |what: &str| -> Result<u64> {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(format!("missing {what} id")))?;
            tok.parse::<u64>()
                .map_err(|_| parse_err(format!("invalid {what} id `{tok}`")))
        };
        let u = next_id("source")?;
        let v = next_id("target")?;
        if let Some(extra) = fields.next() {
            return Err(parse_err(format!("unexpected extra field `{extra}`")));
        }
        raw.push((lineno + 1, u, v));
    }

    match num_nodes {
        Some(n) => {
            let mut edges = Vec::with_capacity(raw.len());
            for &(_, u, v) in &raw {
                for id in [u, v] {
                    if id >= n as u64 {
                        return Err(DuplexError::Bounds {
                            id: id as usize,
                            num_nodes: n,
                        });
                    }
                }
                edges.push((u as usize, v as usize));
            }
            DiGraph::from_edges(n, edges)
        }
        None => {
            let mut ids: Vec<u64> = raw.iter().flat_map(|&(_, u, v)| [u, v]).collect();
            ids.sort_unstable();
            ids.dedup();
            let map: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let edges = raw.iter().map(|&(_, u, v)| (map[&u], map[&v]));
            Ok(DiGraph::from_edges(ids.len(), edges)?.with_original_ids(ids))
        }
    }
}

/// Reads `node_id,label,f_1,...,f_f` rows and attaches features and labels.
/// `node_id` refers to the ids of the edge-list file. A leading header row
/// starting with `node_id` is skipped.
pub fn load_features_labels(path: impl AsRef<Path>, graph: DiGraph) -> Result<DiGraph> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let lookup: HashMap<u64, usize> = graph
        .original_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let n = graph.num_nodes();
    let mut rows: Vec<Option<(usize, Vec<f64>)>> = vec![None; n];
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("node_id")) {
            continue;
        }
        let parse_err = |msg: String| DuplexError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(parse_err("expected node_id,label[,features...]".into()));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid node id `{}`", fields[0])))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid label `{}`", fields[1])))?;
        let feats = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("invalid feature `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(parse_err(format!(
                    "ragged row: {} features, expected {d}",
                    feats.len()
                )))
            }
            _ => {}
        }
        let Some(&node) = lookup.get(&id) else {
            log::warn!("{}: node {id} is not in the graph; row ignored", path.display());
            continue;
        };
        if rows[node].is_some() {
            return Err(parse_err(format!("duplicate row for node {id}")));
        }
        rows[node] = Some((label, feats));
    }
    let missing: Vec<u64> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| graph.original_ids[i])
        .collect();
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(u64::to_string).collect();
        return Err(DuplexError::Data(format!(
            "{} node(s) without a feature row: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 20 { ", ..." } else { "" }
        )));
    }
    let dim = dim.unwrap_or(0);
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        let (label, feats) = r.expect("checked above");
        features.row_mut(i).copy_from_slice(&feats);
        labels.push(label);
    }
    graph.with_features(features)?.with_labels(labels)
}

/// Writes an edge list in the same format `load_edge_list` reads.
pub fn write_edge_list(path: impl AsRef<Path>, num_nodes: usize, edges: &[(NodeId, NodeId)]) -> Result<()> {
    use std::fmt::Write as _;
    let path = path.as_ref();
    let mut out = String::with_capacity(edges.len() * 12);
    let _ = writeln!(out, "# nodes: {num_nodes}");
    for &(u, v) in edges {
        let _ = writeln!(out, "{u}\t{v}");
    }
    fs::write(path, out).map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
}

fn check_ratio(ratio: &[u32]) -> Result<u32> {
    if ratio.contains(&0) {
        return Err(DuplexError::config(format!(
            "split ratio entries must be positive, got {ratio:?}"
        )));
    }
    Ok(ratio.iter().sum())
}

/// Train/validation/test partition of a graph's edges.
#[derive(Clone, Debug)]
pub struct LinkSplit {
    pub train_edges: Vec<(NodeId, NodeId)>,
    pub val_edges: Vec<(NodeId, NodeId)>,
    pub test_edges: Vec<(NodeId, NodeId)>,
    pub train_graph: DiGraph,
    pub full_graph: Arc<DiGraph>,
    pub seed: u64,
    pub ratio: [u32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: [u32; 3],
    pub counts: [usize; 3],
    pub num_nodes: usize,
}

/// Uniform random edge split. Validation and test sizes are the floors of
/// their ratio shares; the remainder goes to training.
pub fn split_edges(graph: &DiGraph, ratio: [u32; 3], seed: u64) -> Result<LinkSplit> {
    let total = check_ratio(&ratio)? as usize;
    let m = graph.num_edges();
    if m < 20 {
        return Err(DuplexError::Data(format!(
            "edge split needs at least 20 edges, graph has {m}"
        )));
    }
    let n_val = m * ratio[1] as usize / total;
    let n_test = m * ratio[2] as usize / total;
    let mut edges = graph.edges().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let test_edges = edges.split_off(m - n_test);
    let val_edges = edges.split_off(m - n_test - n_val);
    LinkSplit::from_parts(Arc::new(graph.clone()), edges, val_edges, test_edges, seed, ratio)
}

impl LinkSplit {
    pub fn from_parts(
        full_graph: Arc<DiGraph>,
        train_edges: Vec<(NodeId, NodeId)>,
        val_edges: Vec<(NodeId, NodeId)>,
        test_edges: Vec<(NodeId, NodeId)>,
        seed: u64,
        ratio: [u32; 3],
    ) -> Result<Self> {
        let total = train_edges.len() + val_edges.len() + test_edges.len();
        if total != full_graph.num_edges() {
            return Err(DuplexError::Data(format!(
                "split has {total} edges, graph has {}",
                full_graph.num_edges()
            )));
        }
        let mut all: Vec<_> = train_edges
            .iter()
            .chain(&val_edges)
            .chain(&test_edges)
            .copied()
            .collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(DuplexError::Data("split parts overlap".into()));
        }
        if let Some(e) = all.iter().find(|&&(u, v)| !full_graph.has_edge(u, v)) {
            return Err(DuplexError::Data(format!("split edge {e:?} is not in the graph")));
        }
        let train_graph = full_graph.with_edge_subset(&train_edges)?;
        Ok(LinkSplit {
            train_edges,
            val_edges,
            test_edges,
            train_graph,
            full_graph,
            seed,
            ratio,
        })
    }

    /// Everything is training data; used when the whole graph is embedded.
    pub fn whole_graph(graph: &DiGraph) -> Self {
        LinkSplit {
            train_edges: graph.edges().to_vec(),
            val_edges: Vec::new(),
            test_edges: Vec::new(),
            train_graph: graph.clone(),
            full_graph: Arc::new(graph.clone()),
            seed: 0,
            ratio: [1, 0, 0],
        }
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            ratio: self.ratio,
            counts: [
                self.train_edges.len(),
                self.val_edges.len(),
                self.test_edges.len(),
            ],
            num_nodes: self.full_graph.num_nodes(),
        }
    }

    /// Writes `train.txt`, `val.txt`, `test.txt` and `split.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DuplexError::io(format!("creating {}", dir.display()), e))?;
        let n = self.full_graph.num_nodes();
        write_edge_list(dir.join("train.txt"), n, &self.train_edges)?;
        write_edge_list(dir.join("val.txt"), n, &self.val_edges)?;
        write_edge_list(dir.join("test.txt"), n, &self.test_edges)?;
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("split.json"), json)
            .map_err(|e| DuplexError::io(format!("writing {}", dir.join("split.json").display()), e))
    }

    /// Reads a saved split; the full graph supplies features and labels.
    pub fn load(dir: impl AsRef<Path>, full_graph: &DiGraph) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: SplitManifest = serde_json::from_str(&read_text(&dir.join("split.json"))?)?;
        if manifest.num_nodes != full_graph.num_nodes() {
            return Err(DuplexError::Data(format!(
                "split was made for {} nodes, graph has {}",
                manifest.num_nodes,
                full_graph.num_nodes()
            )));
        }
        let part = |name: &str| -> Result<Vec<(NodeId, NodeId)>> {
            Ok(load_edge_list(dir.join(name), Some(manifest.num_nodes))?
                .edges()
                .to_vec())
        };
        let split = LinkSplit::from_parts(
            Arc::new(full_graph.clone()),
            part("train.txt")?,
            part("val.txt")?,
            part("test.txt")?,
            manifest.seed,
            manifest.ratio,
        )?;
        if split.manifest().counts != manifest.counts {
            return Err(DuplexError::Data(format!(
                "split files hold {:?} edges, manifest says {:?}",
                split.manifest().counts,
                manifest.counts
            )));
        }
        Ok(split)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

/// Label-stratified node split. Global validation and test sizes are the
/// floors of their ratio shares; each class contributes proportionally.
pub fn split_nodes(graph: &DiGraph, ratio: [u32; 3], seed: u64) -> Result<NodeSplit> {
    let total = check_ratio(&ratio)? as usize;
    let labels = graph
        .labels()
        .ok_or_else(|| DuplexError::Data("node split needs labels".into()))?;
    let n = labels.len();
    let mut by_class: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (u, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Each node gets its fractional position within its (shuffled) class;
    // sorting by it interleaves classes proportionally.
    let mut keyed: Vec<(f64, usize, usize, NodeId)> = Vec::with_capacity(n);
    for (&c, members) in &mut by_class {
        if members.len() < total {
            log::warn!(
                "class {c} has {} node(s), fewer than the {total} needed for a proportional split",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        let size = members.len() as f64;
        for (rank, &u) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / size, c, rank, u));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let n_val = n * ratio[1] as usize / total;
    let n_test = n * ratio[2] as usize / total;
    let order: Vec<NodeId> = keyed.into_iter().map(|k| k.3).collect();
    let mut test = order[..n_test].to_vec();
    let mut val = order[n_test..n_test + n_val].to_vec();
    let mut train = order[n_test + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(NodeSplit { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeSample {
    pub u: NodeId,
    pub v: NodeId,
    pub rel: Relation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<EdgeSample>,
    /// Per-relation counts, in [`Relation::ALL`] order.
    pub counts: [usize; 4],
}

impl SampleBatch {
    pub fn from_samples(samples: Vec<EdgeSample>) -> Self {
        let mut counts = [0; 4];
        for s in &samples {
            counts[s.rel.index()] += 1;
        }
        SampleBatch { samples, counts }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sources(&self) -> Arc<[usize]> {
        self.samples.iter().map(|s| s.u).collect()
    }

    pub fn targets(&self) -> Arc<[usize]> {
        self.samples.iter().map(|s| s.v).collect()
    }

    pub fn relations(&self) -> Vec<Relation> {
        self.samples.iter().map(|s| s.rel).collect()
    }

    /// Consecutive mini-batches of at most `size` samples.
    pub fn chunks(&self, size: usize) -> Vec<SampleBatch> {
        self.samples
            .chunks(size.max(1))
            .map(|c| SampleBatch::from_samples(c.to_vec()))
            .collect()
    }
}

const MAX_REJECTIONS: usize = 1_000_000;

/// Draws `count` ordered pairs that are non-adjacent (in either direction)
/// in `graph`, by rejection sampling.
pub fn sample_non_edges(graph: &DiGraph, count: usize, rng: &mut impl Rng) -> Result<Vec<(NodeId, NodeId)>> {
    let n = graph.num_nodes();
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    if n < 2 {
        return Err(DuplexError::Data("non-edge sampling needs at least 2 nodes".into()));
    }
    let mut rejections = 0;
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && !graph.has_edge(u, v) && !graph.has_edge(v, u) {
            out.push((u, v));
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(DuplexError::Data(format!(
                    "graph too dense: {MAX_REJECTIONS} rejections while sampling non-edges"
                )));
            }
        }
    }
    Ok(out)
}

/// One epoch's self-supervised pairs at ratio `1:1:1:x` (forward, reverse,
/// non-edge, bidirectional).
///
/// Forward pairs are the training graph's unidirectional edges, reverse
/// pairs their transposes, bidirectional pairs are subsampled to
/// `floor(x·#forward)` and capped at availability, and non-edges are drawn
/// against the full graph so held-out edges are never labelled negative.
pub fn sample_batch(split: &LinkSplit, x: f64, seed: u64) -> Result<SampleBatch> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DuplexError::config(format!(
            "bidirectional ratio x={x} must lie in [0, 1]"
        )));
    }
    let train = &split.train_graph;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forward = train.unidirectional_edges();
    let mut bidir = train.bidirectional_pairs();
    let n_fwd = forward.len();
    let n_bi = ((x * n_fwd as f64).floor() as usize).min(bidir.len());
    bidir.shuffle(&mut rng);
    bidir.truncate(n_bi);
    let non_edges = sample_non_edges(&split.full_graph, n_fwd, &mut rng)?;

    let mut samples = Vec::with_capacity(3 * n_fwd + n_bi);
    samples.extend(forward.iter().map(|&(u, v)| EdgeSample { u, v, rel: Relation::Forward }));
    samples.extend(forward.iter().map(|&(u, v)| EdgeSample { u: v, v: u, rel: Relation::Reverse }));
    samples.extend(bidir.iter().map(|&(u, v)| EdgeSample { u, v, rel: Relation::Bidirectional }));
    samples.extend(non_edges.iter().map(|&(u, v)| EdgeSample { u, v, rel: Relation::NoEdge }));
    Ok(SampleBatch::from_samples(samples))
}

/// Labelled pairs from held-out edges, labelled against the full graph:
/// each edge `(u, v)` contributes `(u, v)` and `(v, u)` with their true
/// relations, plus one non-edge per unidirectional edge.
pub fn heldout_batch(full: &DiGraph, edges: &[(NodeId, NodeId)], seed: u64) -> Result<SampleBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(edges.len() * 3);
    let mut uni = 0;
    for &(u, v) in edges {
        let rel = full.relation(u, v);
        samples.push(EdgeSample { u, v, rel });
        if rel == Relation::Forward {
            samples.push(EdgeSample { u: v, v: u, rel: Relation::Reverse });
            uni += 1;
        }
    }
    for (u, v) in sample_non_edges(full, uni.max(1), &mut rng)? {
        samples.push(EdgeSample { u, v, rel: Relation::NoEdge });
    }
    Ok(SampleBatch::from_samples(samples))
}
