//! Library-level run on a planted digraph: split, train, score every subtask.

use duplex::encoder::{init_embeddings, Encoder, EncoderConfig, Initializer, InputMode, PhaseNorm};
use duplex::eval::{build_subtask_testset, score_subtask, Decoder, Subtask};
use duplex::graph::{split_edges, DiGraph};
use duplex::trainer::{train, TrainConfig, TrainTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four groups in a cycle; edges go from group g to g+1, a few both ways.
fn planted(n: usize, m: usize, seed: u64) -> DiGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = |u: usize| u % 4;
    let mut edges = std::collections::BTreeSet::new();
    while edges.len() < m {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && group(v) == (group(u) + 1) % 4 {
            edges.insert((u, v));
            if rng.random::<f64>() < 0.1 {
                edges.insert((v, u));
            }
        }
    }
    DiGraph::from_edges(n, edges).unwrap()
}

#[test]
fn planted_structure_is_recovered() {
    let g = planted(80, 640, 3);
    let split = split_edges(&g, [16, 1, 3], 0).unwrap();
    let enc_cfg = EncoderConfig {
        dropout: 0.0,
        phase_norm: PhaseNorm::PerSum,
        init: Initializer::He,
        ..EncoderConfig::uniform(2, 16)
    };
    let encoder = Encoder::new(enc_cfg, 16).unwrap();
    let input = init_embeddings(&g, 16, InputMode::Random, 0).unwrap();
    let cfg = TrainConfig { max_epochs: 600, lr: 5e-3, patience: 600, ..TrainConfig::default() };
    let out = train(&encoder, TrainTask::Link(&split), &input, &cfg).unwrap();
    let decoder = Decoder { emb: &out.embedding, distance: cfg.distance };
    let score = |t| score_subtask(&decoder, &build_subtask_testset(&split, t, 0).unwrap()).unwrap();
    let (ep, dp, tp, fp) = (score(Subtask::Ep), score(Subtask::Dp), score(Subtask::Tp), score(Subtask::Fp));
    assert!(ep.auc.unwrap() > 0.65, "ep {:?}", ep.auc);
    assert!(dp.auc.unwrap() > 0.9, "dp {:?}", dp.auc);
    // chance is 1/3 for tp and about 1/4 for fp
    assert!(tp.acc > 0.5, "tp {}", tp.acc);
    assert!(fp.acc > 0.4, "fp {}", fp.acc);
    assert!(out.log.records.iter().all(|r| r.train_loss.is_finite()));
}
