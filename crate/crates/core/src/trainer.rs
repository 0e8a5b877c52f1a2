//! Training loops, early stopping, telemetry and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::encoder::{
    edge_logits, init_edge_head, init_embeddings, init_node_head, node_logits, ComplexEmbedding, Encoder,
    EncoderConfig, GraphIndex, Initializer, InputMode, PhaseNorm,
};
use crate::error::{DuplexError, Result};
use crate::graph::{heldout_batch, sample_batch, DiGraph, LinkSplit, NodeId, NodeSplit, SampleBatch};
use crate::objective::{direction_loss, hermitian_score, supervised_ce_loss, total_loss, BatchIndex, Distance, LossSchedule};
use crate::tensor::{Adam, Matrix, ParamStore, Tape, Var};

const VAL_STREAM: u64 = 0x0076_616c;
const HAM_STREAM: u64 = 0x68_616d;
const MAX_HAM_PAIRS: usize = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// HAM reconstruction with `ℒ_d + λℒ_c`.
    #[default]
    SelfSupervised,
    /// Four-way edge classifier head with cross-entropy (DUPLEX-S).
    SupervisedEdge,
    /// Node classification head with cross-entropy.
    SupervisedNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub schedule: LossSchedule,
    pub distance: Distance,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Bidirectional share `x` of the `1:1:1:x` sampler.
    pub bidir_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 3000,
            lr: 1e-3,
            patience: 50,
            eval_every: 5,
            seed: 0,
            mode: TrainMode::SelfSupervised,
            schedule: LossSchedule::default(),
            distance: Distance::L1,
            batch_size: None,
            bidir_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DuplexError::config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(DuplexError::config("max_epochs must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(DuplexError::config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.eval_every == 0 {
            return Err(DuplexError::config("eval_every must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(DuplexError::config("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bidir_ratio) {
            return Err(DuplexError::config(format!(
                "bidirectional ratio {} must lie in [0, 1]",
                self.bidir_ratio
            )));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub lambda: f64,
    pub ham_mse: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_metric,lambda,ham_mse,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                opt(r.val_metric),
                r.lambda,
                opt(r.ham_mse),
                r.wall_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_metric.map(f64::to_bits) == b.val_metric.map(f64::to_bits)
                    && a.lambda.to_bits() == b.lambda.to_bits()
                    && a.ham_mse.map(f64::to_bits) == b.ham_mse.map(f64::to_bits)
            })
    }

    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }
}

/// Mean of `|Ĥ(u,v) − H(u,v)|²` over `pairs`, with `H` read from `graph`.
pub fn ham_mse(emb: &ComplexEmbedding, graph: &DiGraph, pairs: &[(NodeId, NodeId)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DuplexError::Data("ham_mse over an empty pair set".into()));
    }
    let mut total = 0.0;
    for &(u, v) in pairs {
        let r = graph.ham_lookup(u, v)?.prototype;
        let s = hermitian_score(emb, u, v)?;
        total += (s.re - r.re).powi(2) + (s.im - r.im).powi(2);
    }
    Ok(total / pairs.len() as f64)
}

/// What to train on.
#[derive(Clone, Copy, Debug)]
pub enum TrainTask<'a> {
    /// Edge-level training; the encoder sees only the split's training graph.
    Link(&'a LinkSplit),
    /// Node classification on `graph` with labelled `split`.
    Node { graph: &'a DiGraph, split: &'a NodeSplit },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub embedding: ComplexEmbedding,
    pub log: TrainLog,
}

impl TrainOutput {
    pub fn best_epoch(&self) -> usize {
        self.log.best_epoch
    }
}

/// Creates the encoder parameters plus the head the mode needs.
pub fn init_model(encoder: &Encoder, cfg: &TrainConfig, num_classes: Option<usize>) -> Result<ParamStore> {
    let mut params = ParamStore::new();
    encoder.init_params(&mut params, cfg.seed);
    let d = encoder.config.out_dim();
    match cfg.mode {
        TrainMode::SelfSupervised => {}
        TrainMode::SupervisedEdge => init_edge_head(&mut params, d, cfg.seed),
        TrainMode::SupervisedNode => {
            let c = num_classes.ok_or_else(|| DuplexError::config("node classification needs labels"))?;
            init_node_head(&mut params, d, c, cfg.seed)?;
        }
    }
    Ok(params)
}

fn check_finite(tape: &Tape, loss: Var, epoch: usize, stage: &str) -> Result<()> {
    if tape.scalar_value(loss).is_finite() {
        return Ok(());
    }
    let origin = tape
        .first_non_finite()
        .map(|(i, kind)| format!("; first non-finite value from `{kind}` (node {i})"))
        .unwrap_or_default();
    Err(DuplexError::NonFinite {
        epoch,
        stage: format!("{stage}{origin}"),
    })
}

struct Trainer<'a> {
    encoder: &'a Encoder,
    cfg: &'a TrainConfig,
    input: &'a ComplexEmbedding,
    index: GraphIndex,
    graph: &'a DiGraph,
    link: Option<&'a LinkSplit>,
    nodes: Option<(&'a [usize], &'a NodeSplit)>,
    val_batch: Option<BatchIndex>,
    ham_pairs: Vec<(NodeId, NodeId)>,
}

impl Trainer<'_> {
    fn lower_is_better(&self) -> bool {
        self.cfg.mode == TrainMode::SelfSupervised
    }

    fn epoch_batch(&self, epoch: usize) -> Result<SampleBatch> {
        let split = self.link.expect("link mode");
        sample_batch(split, self.cfg.bidir_ratio, derive_seed(self.cfg.seed, &[epoch as u64]))
    }

    /// One step on `batch` (or the node set); returns the loss value.
    fn step(
        &self,
        params: &mut ParamStore,
        adam: &mut Adam,
        batch: Option<&BatchIndex>,
        epoch: usize,
        step_seed: u64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let emb = self
            .encoder
            .forward(&mut tape, &bound, &self.index, self.input, true, step_seed)?;
        let (loss, stage) = match self.cfg.mode {
            TrainMode::SelfSupervised => {
                let parts = total_loss(&mut tape, &emb, batch.expect("batch"), &self.cfg.schedule, epoch, self.cfg.distance)?;
                (parts.total, "self-supervised loss")
            }
            TrainMode::SupervisedEdge => {
                let b = batch.expect("batch");
                let z = edge_logits(&mut tape, &bound, &emb, b.u.clone(), b.v.clone())?;
                let labels: Vec<usize> = b.rel.iter().map(|r| r.index()).collect();
                (supervised_ce_loss(&mut tape, z, &labels)?, "edge cross-entropy")
            }
            TrainMode::SupervisedNode => {
                let (labels, split) = self.nodes.expect("node mode");
                let z = node_logits(&mut tape, &bound, &emb)?;
                let z = tape.row_gather(z, split.train.iter().copied().collect())?;
                let y: Vec<usize> = split.train.iter().map(|&u| labels[u]).collect();
                (supervised_ce_loss(&mut tape, z, &y)?, "node cross-entropy")
            }
        };
        check_finite(&tape, loss, epoch, stage)?;
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound);
        if !params.grads_finite() {
            return Err(DuplexError::NonFinite {
                epoch,
                stage: "gradients".into(),
            });
        }
        adam.step(params)?;
        Ok(value)
    }

    fn validate(&self, params: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let emb = self.encoder.forward(&mut tape, &bound, &self.index, self.input, false, 0)?;
        match self.cfg.mode {
            TrainMode::SelfSupervised => {
                let l = direction_loss(&mut tape, &emb, self.val_batch.as_ref().expect("val batch"), self.cfg.distance)?;
                Ok(tape.scalar_value(l))
            }
            TrainMode::SupervisedEdge => {
                let b = self.val_batch.as_ref().expect("val batch");
                let z = edge_logits(&mut tape, &bound, &emb, b.u.clone(), b.v.clone())?;
                let labels: Vec<usize> = b.rel.iter().map(|r| r.index()).collect();
                Ok(accuracy(tape.value(z), &labels))
            }
            TrainMode::SupervisedNode => {
                let (labels, split) = self.nodes.expect("node mode");
                let z = node_logits(&mut tape, &bound, &emb)?;
                let z = tape.value(z).select_rows(&split.val);
                let y: Vec<usize> = split.val.iter().map(|&u| labels[u]).collect();
                Ok(accuracy(&z, &y))
            }
        }
    }

    fn embed(&self, params: &ParamStore) -> Result<ComplexEmbedding> {
        self.encoder.embed(params, &self.index, self.input)
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Trains from fresh parameters and returns the best-validation state.
pub fn train(encoder: &Encoder, task: TrainTask<'_>, input: &ComplexEmbedding, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let (graph, link, nodes) = match (task, cfg.mode) {
        (TrainTask::Link(split), TrainMode::SelfSupervised | TrainMode::SupervisedEdge) => {
            (&split.train_graph, Some(split), None)
        }
        (TrainTask::Node { graph, split }, TrainMode::SupervisedNode) => {
            let labels = graph
                .labels()
                .ok_or_else(|| DuplexError::config("node classification needs labels"))?;
            if split.train.is_empty() {
                return Err(DuplexError::Data("empty training node set".into()));
            }
            if let Some(&u) = split.train.iter().chain(&split.val).find(|&&u| u >= graph.num_nodes()) {
                return Err(DuplexError::Bounds { id: u, num_nodes: graph.num_nodes() });
            }
            (graph, None, Some((labels, split)))
        }
        (_, mode) => {
            return Err(DuplexError::config(format!("training mode {mode:?} does not match the task data")));
        }
    };
    if let Some(split) = link {
        if split.train_graph.unidirectional_edges().is_empty() {
            return Err(DuplexError::Data("no unidirectional training edges".into()));
        }
    }

    let val_batch = match link {
        Some(split) => {
            let val_seed = derive_seed(cfg.seed, &[VAL_STREAM]);
            let batch = if split.val_edges.is_empty() {
                log::info!("no validation edges; monitoring the training pairs");
                heldout_batch(&split.train_graph, &split.train_edges, val_seed)?
            } else {
                heldout_batch(&split.full_graph, &split.val_edges, val_seed)?
            };
            Some(BatchIndex::from(&batch))
        }
        None => None,
    };
    let ham_pairs = {
        let whole;
        let source = match link {
            Some(s) => s,
            None => {
                whole = LinkSplit::whole_graph(graph);
                &whole
            }
        };
        match sample_batch(source, cfg.bidir_ratio, derive_seed(cfg.seed, &[HAM_STREAM])) {
            Ok(b) => b.samples.iter().take(MAX_HAM_PAIRS).map(|s| (s.u, s.v)).collect(),
            Err(_) => Vec::new(),
        }
    };

    let trainer = Trainer {
        encoder,
        cfg,
        input,
        index: GraphIndex::new(graph, encoder.config.phase_norm),
        graph,
        link,
        nodes,
        val_batch,
        ham_pairs,
    };

    let num_classes = graph.num_classes();
    let mut params = init_model(encoder, cfg, num_classes)?;
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let start = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let check = epoch % cfg.eval_every == 0;
        let (val_metric, ham) = if check {
            let v = trainer.validate(&params)?;
            if !v.is_finite() {
                return Err(DuplexError::NonFinite { epoch, stage: "validation".into() });
            }
            let ham = if trainer.ham_pairs.is_empty() {
                None
            } else {
                Some(ham_mse(&trainer.embed(&params)?, trainer.graph, &trainer.ham_pairs)?)
            };
            (Some(v), ham)
        } else {
            (None, None)
        };

        if let Some(v) = val_metric {
            let improved = match &best {
                None => true,
                Some((b, _, _)) => {
                    if trainer.lower_is_better() {
                        v < *b
                    } else {
                        v > *b
                    }
                }
            };
            if improved {
                best = Some((v, epoch, params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                log.stopped_early = true;
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }

        let step_seed = derive_seed(cfg.seed, &[epoch as u64, 0x6472]);
        let lambda = match cfg.mode {
            TrainMode::SelfSupervised => cfg.schedule.lambda_at(epoch)?,
            _ => 0.0,
        };
        let train_loss = match cfg.mode {
            TrainMode::SupervisedNode => trainer.step(&mut params, &mut adam, None, epoch, step_seed)?,
            _ => {
                let batch = trainer.epoch_batch(epoch)?;
                match cfg.batch_size {
                    None => {
                        let b = BatchIndex::from(&batch);
                        trainer.step(&mut params, &mut adam, Some(&b), epoch, step_seed)?
                    }
                    Some(k) => {
                        let mut samples = batch.samples;
                        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(step_seed, &[1])));
                        let shuffled = SampleBatch::from_samples(samples);
                        let chunks = shuffled.chunks(k);
                        let mut sum = 0.0;
                        for (c, chunk) in chunks.iter().enumerate() {
                            let b = BatchIndex::from(chunk);
                            sum += trainer.step(&mut params, &mut adam, Some(&b), epoch, derive_seed(step_seed, &[c as u64 + 2]))?;
                        }
                        sum / chunks.len() as f64
                    }
                }
            }
        };
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            lambda,
            ham_mse: ham,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log::debug!("epoch {epoch}: loss {train_loss:.6} val {val_metric:?}");
    }

    let (_, best_epoch, best_params) = best.expect("epoch 0 is always validated");
    log.best_epoch = best_epoch;
    let embedding = trainer.embed(&best_params)?;
    Ok(TrainOutput {
        params: best_params,
        embedding,
        log,
    })
}

/// Hex SHA-256 of a value's JSON serialization.
/// Start and best-epoch values of a toy-graph run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeOutcome {
    pub seed: u64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub initial_ham_mse: f64,
    pub best_ham_mse: f64,
    pub best_epoch: usize,
}

impl SmokeOutcome {
    /// Both validation ℒ_d and ham_mse fell below `ratio` times their start.
    pub fn converged(&self, ratio: f64) -> bool {
        self.best_loss < ratio * self.initial_loss && self.best_ham_mse < ratio * self.initial_ham_mse
    }
}

pub fn toy_graph() -> DiGraph {
    DiGraph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).expect("static edges")
}

/// Encoder used for the toy run: `L = 3, d = 8` without dropout, per-group
/// phase softmax and ReLU-gain init. With Glorot init the amplitudes start
/// near zero and the end nodes' ReLUs die within a few steps.
pub fn smoke_encoder_config() -> EncoderConfig {
    EncoderConfig {
        dropout: 0.0,
        phase_norm: PhaseNorm::PerSum,
        init: Initializer::He,
        ..EncoderConfig::uniform(3, 8)
    }
}

/// Self-supervised run on the path `0→1→2→3` for 200 epochs.
pub fn smoke_run(seed: u64) -> Result<SmokeOutcome> {
    let g = toy_graph();
    let split = LinkSplit::whole_graph(&g);
    let enc = Encoder::new(smoke_encoder_config(), 8)?;
    let x = init_embeddings(&g, 8, InputMode::Random, seed)?;
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        lr: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&enc, TrainTask::Link(&split), &x, &cfg)?;
    let first = &out.log.records[0];
    let best = out
        .log
        .record(out.best_epoch())
        .ok_or_else(|| DuplexError::Data("best epoch missing from log".into()))?;
    let field = |v: Option<f64>| v.ok_or_else(|| DuplexError::Data("toy run logged no validation".into()));
    Ok(SmokeOutcome {
        seed,
        initial_loss: field(first.val_metric)?,
        best_loss: field(best.val_metric)?,
        initial_ham_mse: field(first.ham_mse)?,
        best_ham_mse: field(best.ham_mse)?,
        best_epoch: out.best_epoch(),
    })
}

pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub seed: u64,
    pub config_hash: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub params: ParamStore,
    pub manifest: CheckpointManifest,
    pub hash_matches: bool,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `path` (JSON manifest) and a sibling `.bin` with little-endian `f64`s.
pub fn save_checkpoint(params: &ParamStore, path: impl AsRef<Path>, config_hash: &str, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            offset,
        });
        offset += p.value.len();
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: 1,
        seed,
        config_hash: config_hash.to_owned(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    fs::write(&blob, bytes).map_err(|e| DuplexError::io(format!("writing {}", blob.display()), e))?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
}

/// Reads a checkpoint without checking it against a model.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, CheckpointManifest)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DuplexError::io(format!("reading {}", path.display()), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| DuplexError::io(format!("reading {}", blob.display()), e))?;
    if bytes.len() % 8 != 0 {
        return Err(DuplexError::Checkpoint(format!("{} is not a whole number of f64s", blob.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let end = t.offset + t.rows * t.cols;
        if end > values.len() {
            return Err(DuplexError::Checkpoint(format!("tensor `{}` runs past the end of the blob", t.name)));
        }
        params.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, values[t.offset..end].to_vec())?);
    }
    Ok((params, manifest))
}

/// Reads a checkpoint and checks names and shapes against `template`.
/// A differing config hash only logs a warning.
pub fn load_checkpoint(path: impl AsRef<Path>, template: &ParamStore, config_hash: &str) -> Result<LoadedCheckpoint> {
    let (params, manifest) = read_checkpoint(path)?;
    let mut problems = Vec::new();
    for p in template.iter() {
        match params.get(&p.name) {
            None => problems.push(format!("missing `{}`", p.name)),
            Some(m) if m.shape() != p.value.shape() => problems.push(format!(
                "`{}` has shape {}x{}, expected {}x{}",
                p.name,
                m.rows(),
                m.cols(),
                p.value.rows(),
                p.value.cols()
            )),
            _ => {}
        }
    }
    for name in params.names() {
        if !template.contains(name) {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(DuplexError::Checkpoint(problems.join("; ")));
    }
    let hash_matches = manifest.config_hash == config_hash;
    if !hash_matches {
        log::warn!(
            "checkpoint config hash {} differs from current {}; loading anyway",
            manifest.config_hash,
            config_hash
        );
    }
    Ok(LoadedCheckpoint {
        params,
        manifest,
        hash_matches,
    })
}
