use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::derive_seed;
use crate::encoder::{init_embeddings, ComplexEmbedding, Encoder, EncoderConfig, GraphIndex, InputMode, NODE_B, NODE_W};
use crate::error::{DuplexError, Result};
use crate::graph::{DiGraph, NodeId, NodeSplit};
use crate::objective::supervised_ce_loss;
use crate::tensor::{Adam, Matrix, ParamStore, Tape};
use crate::trainer::{accuracy, argmax, train, TrainConfig, TrainMode, TrainOutput, TrainTask};

/// Rows are true classes, columns predicted.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(DuplexError::shape("confusion", format!("{} labels, {} predictions", truth.len(), pred.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(DuplexError::Data(format!("class {} outside 0..{classes}", t.max(p))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Macro and micro F1; a class with no true and no predicted members
/// scores 0.
pub fn f1_scores(confusion: &[Vec<u64>]) -> Result<(f64, f64)> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(DuplexError::shape("f1", "confusion matrix must be square and nonempty"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    let diag: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let mut macro_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let actual: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
        let denom = (actual + predicted) as f64;
        macro_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    let micro = if total == 0 { 0.0 } else { diag as f64 / total as f64 };
    Ok((macro_sum / k as f64, micro))
}

pub fn node_report(task: &str, truth: &[usize], pred: &[usize], classes: usize) -> Result<MetricReport> {
    let confusion = confusion_matrix(truth, pred, classes)?;
    let (macro_f1, micro_f1) = f1_scores(&confusion)?;
    Ok(MetricReport {
        task: task.to_owned(),
        auc: None,
        acc: micro_f1,
        classes: (0..classes).map(|c| c.to_string()).collect(),
        confusion,
        macro_f1: Some(macro_f1),
        micro_f1: Some(micro_f1),
        n_samples: truth.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            dropout: 0.5,
            lr: 1e-2,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

fn mlp_logits(params: &ParamStore, x: &Matrix, rows: &[NodeId]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let xs = tape.constant(x.select_rows(rows));
    let h = tape.matmul(xs, b.get("probe.1.w")?)?;
    let h = tape.add_row(h, b.get("probe.1.b")?)?;
    let h = tape.relu(h);
    let z = tape.matmul(h, b.get("probe.2.w")?)?;
    let z = tape.add_row(z, b.get("probe.2.b")?)?;
    Ok(tape.value(z).clone())
}

fn check_labels(labels: &[usize], n: usize, split: &NodeSplit) -> Result<usize> {
    if labels.len() != n {
        return Err(DuplexError::Data(format!("{} labels for {n} nodes", labels.len())));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(DuplexError::Data("node split needs train and test nodes".into()));
    }
    if let Some(&u) = split.train.iter().chain(&split.val).chain(&split.test).find(|&&u| u >= n) {
        return Err(DuplexError::Bounds { id: u, num_nodes: n });
    }
    Ok(labels.iter().copied().max().unwrap_or(0) + 1)
}

/// Two-layer MLP on frozen `[a; θ]` rows, early-stopped on validation
/// accuracy; reports F1 on the test nodes.
pub fn transductive_probe(
    emb: &ComplexEmbedding,
    labels: &[usize],
    split: &NodeSplit,
    cfg: &ProbeConfig,
) -> Result<MetricReport> {
    let classes = check_labels(labels, emb.num_nodes(), split)?;
    if cfg.hidden == 0 || !(0.0..1.0).contains(&cfg.dropout) || cfg.lr <= 0.0 {
        return Err(DuplexError::config(format!("invalid probe config {cfg:?}")));
    }
    let x = emb.concat();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x7072]));
    let mut params = ParamStore::new();
    params.insert("probe.1.w", glorot(x.cols(), cfg.hidden, &mut rng));
    params.insert("probe.1.b", Matrix::zeros(1, cfg.hidden));
    params.insert("probe.2.w", glorot(cfg.hidden, classes, &mut rng));
    params.insert("probe.2.b", Matrix::zeros(1, classes));
    let monitor = if split.val.is_empty() { &split.train } else { &split.val };
    let y_train: Vec<usize> = split.train.iter().map(|&u| labels[u]).collect();
    let y_mon: Vec<usize> = monitor.iter().map(|&u| labels[u]).collect();
    let x_train = x.select_rows(&split.train);
    let mut adam = Adam::new(cfg.lr);
    let (mut best, mut best_epoch, mut best_acc) = (params.clone(), 0, f64::NEG_INFINITY);
    for epoch in 0..cfg.max_epochs {
        let acc = accuracy(&mlp_logits(&params, &x, monitor)?, &y_mon);
        if acc > best_acc {
            (best, best_epoch, best_acc) = (params.clone(), epoch, acc);
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xs = tape.constant(x_train.clone());
        let h = tape.matmul(xs, b.get("probe.1.w")?)?;
        let h = tape.add_row(h, b.get("probe.1.b")?)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, cfg.dropout, true, derive_seed(cfg.seed, &[epoch as u64]))?;
        let z = tape.matmul(h, b.get("probe.2.w")?)?;
        let z = tape.add_row(z, b.get("probe.2.b")?)?;
        let loss = supervised_ce_loss(&mut tape, z, &y_train)?;
        if !tape.scalar_value(loss).is_finite() {
            return Err(DuplexError::NonFinite { epoch, stage: "probe cross-entropy".into() });
        }
        tape.backward(loss)?;
        params.zero_grads();
        params.accumulate_grads(&tape, &b);
        adam.step(&mut params)?;
    }
    let z = mlp_logits(&best, &x, &split.test)?;
    let pred: Vec<usize> = (0..z.rows()).map(|r| argmax(z.row(r))).collect();
    let truth: Vec<usize> = split.test.iter().map(|&u| labels[u]).collect();
    node_report("nc-trans", &truth, &pred, classes)
}

#[derive(Clone, Debug)]
pub struct InductiveOutput {
    pub report: MetricReport,
    pub train: TrainOutput,
}

/// Supervised training on the subgraph induced by train ∪ val nodes with
/// attribute inputs; test nodes are scored after encoding the full graph.
pub fn inductive_protocol(
    graph: &DiGraph,
    split: &NodeSplit,
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
) -> Result<InductiveOutput> {
    let features = graph
        .features()
        .ok_or_else(|| DuplexError::config("inductive protocol needs node attributes"))?;
    let labels = graph
        .labels()
        .ok_or_else(|| DuplexError::config("inductive protocol needs labels"))?;
    let classes = check_labels(labels, graph.num_nodes(), split)?;
    let seen: Vec<NodeId> = split.train.iter().chain(&split.val).copied().collect();
    let (sub, keep) = graph.induced_subgraph(&seen)?;
    let to_sub: HashMap<NodeId, NodeId> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let sub_split = NodeSplit {
        train: split.train.iter().map(|u| to_sub[u]).collect(),
        val: split.val.iter().map(|u| to_sub[u]).collect(),
        test: Vec::new(),
    };
    let enc_cfg = EncoderConfig {
        input: InputMode::Features,
        ..enc_cfg.clone()
    };
    let encoder = Encoder::new(enc_cfg.clone(), features.cols())?;
    let cfg = TrainConfig {
        mode: TrainMode::SupervisedNode,
        ..train_cfg.clone()
    };
    let x_sub = init_embeddings(&sub, features.cols(), InputMode::Features, cfg.seed)?;
    let out = train(&encoder, TrainTask::Node { graph: &sub, split: &sub_split }, &x_sub, &cfg)?;
    let x_full = init_embeddings(graph, features.cols(), InputMode::Features, cfg.seed)?;
    let emb = encoder.embed(&out.params, &GraphIndex::new(graph, enc_cfg.phase_norm), &x_full)?;
    let w = out.params.get(NODE_W).ok_or_else(|| DuplexError::Checkpoint("node head missing".into()))?;
    let b = out.params.get(NODE_B).ok_or_else(|| DuplexError::Checkpoint("node head missing".into()))?;
    let z = emb.concat().select_rows(&split.test).matmul(w)?;
    let pred: Vec<usize> = (0..z.rows())
        .map(|r| {
            let row: Vec<f64> = z.row(r).iter().zip(b.row(0)).map(|(x, y)| x + y).collect();
            argmax(&row)
        })
        .collect();
    let truth: Vec<usize> = split.test.iter().map(|&u| labels[u]).collect();
    Ok(InductiveOutput {
        report: node_report("nc-ind", &truth, &pred, classes.max(w.cols()))?,
        train: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split_nodes;

    #[test]
    fn f1_examples() {
        let (ma, mi) = f1_scores(&[vec![5, 0], vec![2, 3]]).unwrap();
        assert!((ma - 0.7917).abs() < 1e-4, "{ma}");
        assert_eq!(mi, 0.8);
        assert!((ma - (10.0 / 12.0 + 6.0 / 8.0) / 2.0).abs() < 1e-15);
        assert_eq!(f1_scores(&[vec![3, 0], vec![0, 4]]).unwrap(), (1.0, 1.0));
        // class 2 never true and never predicted
        let (ma, mi) = f1_scores(&[vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
        assert!((ma - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mi, 1.0);
        assert!(f1_scores(&[vec![1, 2]]).is_err());
    }

    #[test]
    fn macro_below_micro_under_skew() {
        // majority class predicted well, rare class missed
        let (ma, mi) = f1_scores(&[vec![90, 2], vec![7, 1]]).unwrap();
        assert!(ma < mi);
    }

    /// Two communities; features carry the class with noise.
    fn labelled_graph(n: usize, classes: usize, seed: u64) -> DiGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|u| u % classes).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for _ in 0..3 {
                let v = rng.random_range(0..n / classes) * classes + u % classes;
                if v < n {
                    edges.push((u, v));
                }
            }
        }
        let f = Matrix::from_fn(n, 6, |r, c| if c == labels[r] { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
        DiGraph::from_edges(n, edges)
            .unwrap()
            .with_labels(labels)
            .unwrap()
            .with_features(f)
            .unwrap()
    }

    #[test]
    fn probe_constant_labels_is_perfect() {
        let g = labelled_graph(60, 2, 1);
        let labels = vec![0; 60];
        let split = NodeSplit { train: (0..30).collect(), val: (30..45).collect(), test: (45..60).collect() };
        let emb = ComplexEmbedding::new(Matrix::filled(60, 2, 0.5), Matrix::filled(60, 2, 0.1)).unwrap();
        let cfg = ProbeConfig { max_epochs: 20, ..ProbeConfig::default() };
        let r = transductive_probe(&emb, &labels, &split, &cfg).unwrap();
        assert_eq!(r.micro_f1, Some(1.0));
        assert!(transductive_probe(&emb, &labels[..10], &split, &cfg).is_err());
        assert_eq!(g.num_nodes(), 60);
    }

    #[test]
    fn probe_learns_separable_embeddings_and_leaves_them_alone() {
        let g = labelled_graph(300, 3, 2);
        let labels = g.labels().unwrap().to_vec();
        let split = split_nodes(&g, [6, 2, 2], 0).unwrap();
        let f = g.features().unwrap().clone();
        let emb = ComplexEmbedding::new(f.clone(), f.map(|x| -x)).unwrap();
        let before = emb.clone();
        let r = transductive_probe(&emb, &labels, &split, &ProbeConfig { seed: 3, ..ProbeConfig::default() }).unwrap();
        assert!(r.micro_f1.unwrap() > 0.9, "{r:?}");
        assert_eq!(emb, before);
        let again = transductive_probe(&emb, &labels, &split, &ProbeConfig { seed: 3, ..ProbeConfig::default() }).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        use rand::seq::SliceRandom;
        let g = labelled_graph(600, 6, 3);
        let mut labels = g.labels().unwrap().to_vec();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let g = g.with_labels(labels.clone()).unwrap();
        let split = split_nodes(&g, [6, 2, 2], 0).unwrap();
        let f = g.features().unwrap().clone();
        let emb = ComplexEmbedding::new(f.clone(), f).unwrap();
        let cfg = ProbeConfig { max_epochs: 200, ..ProbeConfig::default() };
        let r = transductive_probe(&emb, &labels, &split, &cfg).unwrap();
        assert!((r.micro_f1.unwrap() - 1.0 / 6.0).abs() < 0.1, "{:?}", r.micro_f1);
    }

    #[test]
    fn inductive_run_scores_unseen_nodes() {
        let g = labelled_graph(120, 2, 5);
        let split = split_nodes(&g, [6, 2, 2], 1).unwrap();
        let enc = EncoderConfig { dropout: 0.0, ..EncoderConfig::uniform(2, 8) };
        let tc = TrainConfig { max_epochs: 60, patience: 60, lr: 1e-2, eval_every: 5, seed: 1, ..TrainConfig::default() };
        let out = inductive_protocol(&g, &split, &enc, &tc).unwrap();
        assert_eq!(out.report.n_samples, split.test.len());
        assert!(out.report.micro_f1.unwrap() > 0.8, "{:?}", out.report);
        let bare = DiGraph::from_edges(120, g.edges().iter().copied()).unwrap().with_labels(g.labels().unwrap().to_vec()).unwrap();
        assert!(inductive_protocol(&bare, &split, &enc, &tc).is_err());
    }

    #[test]
    fn isolated_test_node_gets_logits() {
        // node 0 is only linked to test nodes, so it is isolated in training
        let g = labelled_graph(60, 2, 6);
        let split = NodeSplit { train: (2..40).collect(), val: (40..50).collect(), test: vec![0, 1, 50, 55] };
        let enc = EncoderConfig { dropout: 0.0, ..EncoderConfig::uniform(1, 4) };
        let tc = TrainConfig { max_epochs: 10, patience: 10, seed: 0, ..TrainConfig::default() };
        let out = inductive_protocol(&g, &split, &enc, &tc).unwrap();
        assert_eq!(out.report.n_samples, 4);
    }
}
