//! Link-prediction subtasks, rank metrics and node-classification protocols.

mod node;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use node::{
    confusion_matrix, f1_scores, inductive_protocol, node_report, transductive_probe, InductiveOutput, ProbeConfig,
};

use crate::derive_seed;
use crate::encoder::ComplexEmbedding;
use crate::error::{DuplexError, Result};
use crate::graph::{sample_non_edges, DiGraph, LinkSplit, NodeId, Relation};
use crate::objective::{direction_probs, hermitian_score, Distance};
use crate::tensor::Matrix;

const SUBTASK_STREAM: u64 = 0x7375_6274;

/// The four link-prediction subtasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    /// Existence: edge vs. reversed-or-absent.
    Ep,
    /// Direction of a unidirectional edge.
    Dp,
    /// Forward, reverse or absent.
    Tp,
    /// All four relations.
    Fp,
}

impl Subtask {
    pub const ALL: [Subtask; 4] = [Subtask::Ep, Subtask::Dp, Subtask::Tp, Subtask::Fp];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Ep => "ep",
            Subtask::Dp => "dp",
            Subtask::Tp => "tp",
            Subtask::Fp => "fp",
        }
    }

    /// Class names; a pair's label indexes this list.
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            Subtask::Ep => &["absent", "exists"],
            Subtask::Dp => &["reverse", "forward"],
            Subtask::Tp => &["forward", "reverse", "none"],
            Subtask::Fp => &["forward", "reverse", "bidirectional", "none"],
        }
    }

    /// Prototype set the decoder softmax is restricted to.
    pub fn restrict(self) -> &'static [Relation] {
        const TP: [Relation; 3] = [Relation::Forward, Relation::Reverse, Relation::NoEdge];
        const DP: [Relation; 2] = [Relation::Forward, Relation::Reverse];
        match self {
            Subtask::Ep | Subtask::Fp => &Relation::ALL,
            Subtask::Dp => &DP,
            Subtask::Tp => &TP,
        }
    }

    pub fn has_auc(self) -> bool {
        matches!(self, Subtask::Ep | Subtask::Dp)
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DuplexError::config(format!("unknown subtask `{s}` (expected ep, dp, tp or fp)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub u: NodeId,
    pub v: NodeId,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSet {
    pub subtask: Subtask,
    pub pairs: Vec<LabeledPair>,
}

impl SubtaskSet {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.subtask.classes().len()];
        for p in &self.pairs {
            c[p.label] += 1;
        }
        c
    }
}

fn fp_label(rel: Relation) -> usize {
    rel.index()
}

fn tp_label(rel: Relation) -> usize {
    match rel {
        Relation::Forward => 0,
        Relation::Reverse => 1,
        _ => 2,
    }
}

/// Labeled test pairs for `subtask` from the split's test edges, with
/// relations taken from the full graph.
pub fn build_subtask_testset(split: &LinkSplit, subtask: Subtask, seed: u64) -> Result<SubtaskSet> {
    let full = &split.full_graph;
    if split.test_edges.is_empty() {
        return Err(DuplexError::Data("split has no test edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUBTASK_STREAM, subtask as u64]));
    let uni: Vec<(NodeId, NodeId)> = split
        .test_edges
        .iter()
        .copied()
        .filter(|&(u, v)| full.relation(u, v) == Relation::Forward)
        .collect();
    let bidir: Vec<(NodeId, NodeId)> = split
        .test_edges
        .iter()
        .filter(|&&(u, v)| full.relation(u, v) == Relation::Bidirectional)
        .map(|&(u, v)| (u.min(v), u.max(v)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needs_uni = subtask != Subtask::Ep;
    if needs_uni && uni.is_empty() {
        return Err(DuplexError::Data(format!("no unidirectional test edges for subtask {subtask}")));
    }
    let pair = |(u, v): (NodeId, NodeId), label| LabeledPair { u, v, label };
    let mut pairs = Vec::new();
    match subtask {
        Subtask::Ep => {
            let n = split.test_edges.len();
            pairs.extend(split.test_edges.iter().map(|&e| pair(e, 1)));
            let mut reversible = uni.clone();
            reversible.shuffle(&mut rng);
            let n_rev = (n / 2).min(reversible.len());
            pairs.extend(reversible[..n_rev].iter().map(|&(u, v)| pair((v, u), 0)));
            let absent = sample_non_edges(full, n - n_rev, &mut rng)?;
            pairs.extend(absent.into_iter().map(|e| pair(e, 0)));
        }
        Subtask::Dp => {
            for &(u, v) in &uni {
                pairs.push(pair((u, v), 1));
                pairs.push(pair((v, u), 0));
            }
        }
        Subtask::Tp | Subtask::Fp => {
            let label = if subtask == Subtask::Tp { tp_label } else { fp_label };
            pairs.extend(uni.iter().map(|&e| pair(e, label(Relation::Forward))));
            pairs.extend(uni.iter().map(|&(u, v)| pair((v, u), label(Relation::Reverse))));
            if subtask == Subtask::Fp {
                let mut b = bidir;
                b.shuffle(&mut rng);
                b.truncate(uni.len());
                pairs.extend(b.into_iter().map(|e| pair(e, label(Relation::Bidirectional))));
            }
            let absent = sample_non_edges(full, uni.len(), &mut rng)?;
            pairs.extend(absent.into_iter().map(|e| pair(e, label(Relation::NoEdge))));
        }
    }
    Ok(SubtaskSet { subtask, pairs })
}

/// Relation probabilities for ordered pairs, restricted to a prototype set.
pub trait RelationModel {
    fn probs(&self, u: NodeId, v: NodeId, restrict: &[Relation]) -> Result<Vec<f64>>;
}

/// The parameter-free HAM decoder.
pub struct Decoder<'a> {
    pub emb: &'a ComplexEmbedding,
    pub distance: Distance,
}

impl RelationModel for Decoder<'_> {
    fn probs(&self, u: NodeId, v: NodeId, restrict: &[Relation]) -> Result<Vec<f64>> {
        direction_probs(hermitian_score(self.emb, u, v)?, self.distance, restrict)
    }
}

/// The supervised edge head: softmax over the restricted relation logits.
pub struct EdgeHead<'a> {
    pub emb: &'a ComplexEmbedding,
    pub w: &'a Matrix,
    pub b: &'a Matrix,
}

impl RelationModel for EdgeHead<'_> {
    fn probs(&self, u: NodeId, v: NodeId, restrict: &[Relation]) -> Result<Vec<f64>> {
        let n = self.emb.num_nodes();
        if let Some(&id) = [u, v].iter().find(|&&id| id >= n) {
            return Err(DuplexError::Bounds { id, num_nodes: n });
        }
        let e = self.emb;
        let x: Vec<f64> = [e.amplitude.row(u), e.phase.row(u), e.amplitude.row(v), e.phase.row(v)].concat();
        if x.len() != self.w.rows() || self.w.cols() != 4 || self.b.shape() != (1, 4) {
            return Err(DuplexError::shape("edge head", format!("input {} vs weight {:?}", x.len(), self.w.shape())));
        }
        let z = Matrix::from_vec(1, x.len(), x)?.matmul(self.w)?;
        let logits: Vec<f64> = restrict.iter().map(|r| z.get(0, r.index()) + self.b.get(0, r.index())).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|x| x / s).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub auc: Option<f64>,
    pub acc: f64,
    pub classes: Vec<String>,
    /// Rows are true classes, columns predicted.
    pub confusion: Vec<Vec<u64>>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
    }
}

/// Mann–Whitney AUC with tied scores counted as half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DuplexError::shape("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DuplexError::Data("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DuplexError::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Per-pair positive-class score for EP/DP, or the argmax class otherwise.
fn pair_outputs(model: &dyn RelationModel, set: &SubtaskSet) -> Result<(Vec<f64>, Vec<usize>)> {
    let restrict = set.subtask.restrict();
    let mut scores = Vec::with_capacity(set.pairs.len());
    let mut preds = Vec::with_capacity(set.pairs.len());
    for p in &set.pairs {
        let probs = model.probs(p.u, p.v, restrict)?;
        match set.subtask {
            Subtask::Ep => {
                let s = probs[Relation::Forward.index()] + probs[Relation::Bidirectional.index()];
                scores.push(s);
                preds.push(usize::from(s >= 0.5));
            }
            Subtask::Dp => {
                scores.push(probs[0]);
                preds.push(usize::from(probs[0] >= 0.5));
            }
            Subtask::Tp | Subtask::Fp => {
                let best = (0..probs.len()).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
                scores.push(probs[best]);
                preds.push(best);
            }
        }
    }
    Ok((scores, preds))
}

pub fn score_subtask(model: &dyn RelationModel, set: &SubtaskSet) -> Result<MetricReport> {
    if set.pairs.is_empty() {
        return Err(DuplexError::Data(format!("empty {} test set", set.subtask)));
    }
    let (scores, preds) = pair_outputs(model, set)?;
    let truth: Vec<usize> = set.pairs.iter().map(|p| p.label).collect();
    let k = set.subtask.classes().len();
    let confusion = confusion_matrix(&truth, &preds, k)?;
    let correct = truth.iter().zip(&preds).filter(|(t, p)| t == p).count();
    let auc = if set.subtask.has_auc() {
        let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        Some(auc(&scores, &labels)?)
    } else {
        None
    };
    Ok(MetricReport {
        task: set.subtask.name().to_owned(),
        auc,
        acc: correct as f64 / truth.len() as f64,
        classes: set.subtask.classes().iter().map(|s| s.to_string()).collect(),
        confusion,
        macro_f1: None,
        micro_f1: None,
        n_samples: truth.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub threshold: usize,
    /// `None` when the stratum is empty or holds a single class.
    pub auc: Option<f64>,
    pub n: usize,
}

impl Stratum {
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// EP AUC restricted, per threshold `t`, to pairs whose source out-degree
/// or target in-degree in `graph` is at most `t`.
pub fn degree_stratified_auc(
    model: &dyn RelationModel,
    set: &SubtaskSet,
    graph: &DiGraph,
    thresholds: &[usize],
) -> Result<Vec<Stratum>> {
    if set.subtask != Subtask::Ep {
        return Err(DuplexError::config("degree stratification applies to EP pairs"));
    }
    let (scores, _) = pair_outputs(model, set)?;
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for (p, &score) in set.pairs.iter().zip(&scores) {
            if graph.out_degree(p.u) <= t || graph.in_degree(p.v) <= t {
                s.push(score);
                l.push(p.label == 1);
            }
        }
        let has_both = l.iter().any(|&x| x) && l.iter().any(|&x| !x);
        out.push(Stratum {
            threshold: t,
            auc: if has_both { Some(auc(&s, &l)?) } else { None },
            n: s.len(),
        });
    }
    Ok(out)
}

pub fn strata_csv(strata: &[Stratum]) -> String {
    let mut s = String::from("threshold,auc,n\n");
    for st in strata {
        let auc = st.auc.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", st.threshold, auc, st.n));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split_edges;
    use crate::oracles::auc_bruteforce;
    use proptest::prelude::*;
    use rand::Rng;

    fn chain_graph(n: usize) -> DiGraph {
        // a long path with a few back edges and chords
        let mut edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        edges.extend((0..n - 3).step_by(3).map(|i| (i + 3, i)));
        edges.extend((0..n - 2).step_by(5).map(|i| (i + 1, i)));
        DiGraph::from_edges(n, edges).unwrap()
    }

    fn split_of(n: usize, seed: u64) -> LinkSplit {
        split_edges(&chain_graph(n), [8, 1, 1], seed).unwrap()
    }

    #[test]
    fn ep_balances_reversed_and_absent() {
        let split = split_of(400, 1);
        let set = build_subtask_testset(&split, Subtask::Ep, 0).unwrap();
        let n = split.test_edges.len();
        assert_eq!(set.class_counts(), vec![n, n]);
        let reversed = set
            .pairs
            .iter()
            .filter(|p| p.label == 0 && split.full_graph.has_edge(p.v, p.u))
            .count();
        assert_eq!(reversed, n / 2);
        for p in set.pairs.iter().filter(|p| p.label == 0) {
            assert!(!split.full_graph.has_edge(p.u, p.v));
        }
    }

    #[test]
    fn dp_tp_fp_ratios() {
        let split = split_of(400, 2);
        let uni = split
            .test_edges
            .iter()
            .filter(|&&(u, v)| !split.full_graph.has_edge(v, u))
            .count();
        let dp = build_subtask_testset(&split, Subtask::Dp, 0).unwrap();
        assert_eq!(dp.class_counts(), vec![uni, uni]);
        let tp = build_subtask_testset(&split, Subtask::Tp, 0).unwrap();
        assert_eq!(tp.class_counts(), vec![uni, uni, uni]);
        let fp = build_subtask_testset(&split, Subtask::Fp, 0).unwrap();
        let c = fp.class_counts();
        assert_eq!((c[0], c[1], c[3]), (uni, uni, uni));
        assert!(c[2] <= uni);
        for p in &fp.pairs {
            assert_eq!(split.full_graph.relation(p.u, p.v).index(), p.label);
        }
        assert_eq!(build_subtask_testset(&split, Subtask::Fp, 0).unwrap(), fp);
    }

    #[test]
    fn fp_uses_every_scarce_bidirectional_pair() {
        let mut edges: Vec<_> = (0..59).map(|i| (i, i + 1)).collect();
        edges.extend([(1, 0), (3, 2), (5, 4)]);
        let full = DiGraph::from_edges(60, edges).unwrap();
        let test: Vec<_> = [(0, 1), (2, 3), (4, 5)].into_iter().chain((10..30).map(|i| (i, i + 1))).collect();
        let train: Vec<_> = full.edges().iter().copied().filter(|e| !test.contains(e)).collect();
        let split = LinkSplit::from_parts(std::sync::Arc::new(full), train, vec![], test, 0, [8, 0, 2]).unwrap();
        let fp = build_subtask_testset(&split, Subtask::Fp, 0).unwrap();
        assert_eq!(fp.class_counts(), vec![20, 20, 3, 20]);
    }

    #[test]
    fn no_test_edges_is_an_error() {
        let g = chain_graph(30);
        let split = LinkSplit::whole_graph(&g);
        assert!(build_subtask_testset(&split, Subtask::Ep, 0).is_err());
        assert!("xp".parse::<Subtask>().is_err());
        assert_eq!("TP".parse::<Subtask>().unwrap(), Subtask::Tp);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        assert!((auc(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn auc_matches_bruteforce(raw in prop::collection::vec((0u8..20, any::<bool>()), 200)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 7.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc_bruteforce(&scores, &labels).unwrap());
        }

        #[test]
        fn auc_is_monotone_invariant(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn dp_scores_of_transposes_sum_to_one(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = || Matrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
            let emb = ComplexEmbedding::new(m(), m()).unwrap();
            for distance in [Distance::L1, Distance::L2] {
                let dec = Decoder { emb: &emb, distance };
                let r = Subtask::Dp.restrict();
                let s = dec.probs(0, 2, r).unwrap()[0] + dec.probs(2, 0, r).unwrap()[0];
                prop_assert!((s - 1.0).abs() <= 1e-15);
            }
        }
    }

    fn toy_embedding(n: usize, seed: u64) -> ComplexEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Matrix::from_fn(n, 3, |_, _| rng.random_range(0.0..1.5));
        ComplexEmbedding::new(m(), m()).unwrap()
    }

    #[test]
    fn perfect_decoder_scores_one() {
        // one dimension, a = 1, θ along the path: every edge scores exactly i
        let g = DiGraph::from_edges(40, (0..39).map(|i| (i, i + 1))).unwrap();
        let emb = ComplexEmbedding::new(Matrix::filled(40, 1, 1.0), Matrix::from_fn(40, 1, |r, _| -(r as f64))).unwrap();
        let split = split_edges(&g, [8, 1, 1], 0).unwrap();
        let dec = Decoder { emb: &emb, distance: Distance::L1 };
        let dp = score_subtask(&dec, &build_subtask_testset(&split, Subtask::Dp, 0).unwrap()).unwrap();
        assert_eq!((dp.auc, dp.acc), (Some(1.0), 1.0));
    }

    #[test]
    fn stratified_auc_is_nested() {
        let split = split_of(300, 4);
        let set = build_subtask_testset(&split, Subtask::Ep, 1).unwrap();
        let emb = toy_embedding(300, 2);
        let dec = Decoder { emb: &emb, distance: Distance::L1 };
        let g = &split.full_graph;
        let max = g.max_degree();
        let strata = degree_stratified_auc(&dec, &set, g, &[0, 1, 2, max]).unwrap();
        assert!(strata.windows(2).all(|w| w[0].n <= w[1].n));
        let overall = score_subtask(&dec, &set).unwrap();
        assert_eq!(strata[3].n, set.pairs.len());
        assert_eq!(strata[3].auc, overall.auc);
        let csv = strata_csv(&strata);
        assert!(csv.starts_with("threshold,auc,n\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn empty_stratum_is_flagged() {
        // every node has in- and out-degree >= 1 on a cycle
        let g = DiGraph::from_edges(50, (0..50).map(|i| (i, (i + 1) % 50))).unwrap();
        let split = split_edges(&g, [8, 1, 1], 0).unwrap();
        let set = build_subtask_testset(&split, Subtask::Ep, 0).unwrap();
        let emb = toy_embedding(50, 0);
        let dec = Decoder { emb: &emb, distance: Distance::L1 };
        let s = degree_stratified_auc(&dec, &set, &g, &[0]).unwrap();
        assert!(s[0].is_empty() && s[0].auc.is_none());
    }

    #[test]
    fn edge_head_matches_manual_softmax() {
        let emb = toy_embedding(3, 5);
        let w = Matrix::from_fn(12, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
        let b = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.0]]).unwrap();
        let head = EdgeHead { emb: &emb, w: &w, b: &b };
        let p = head.probs(0, 1, &Relation::ALL).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dp = head.probs(0, 1, Subtask::Dp.restrict()).unwrap();
        assert!((dp[0] / dp[1] - p[0] / p[1]).abs() < 1e-9);
        assert!(head.probs(0, 7, &Relation::ALL).is_err());
    }
}
