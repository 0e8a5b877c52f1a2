//! Command-line front end: `split`, `train`, `eval`, `export`, `gradcheck`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::{init_embeddings, ComplexEmbedding, Encoder, EncoderConfig, GraphIndex, InputMode, EDGE_B, EDGE_W};
use crate::error::{DuplexError, Result};
use crate::eval::{
    build_subtask_testset, degree_stratified_auc, node_report, score_subtask, strata_csv, transductive_probe,
    Decoder, EdgeHead, MetricReport, ProbeConfig, RelationModel, Stratum, Subtask,
};
use crate::graph::{load_edge_list, load_features_labels, split_edges, split_nodes, DiGraph, LinkSplit, NodeSplit};
use crate::oracles::{gradcheck_names, gradcheck_suite};
use crate::tensor::{Matrix, OpKind, ParamStore};
use crate::trainer::{
    argmax, config_hash, init_model, load_checkpoint, save_checkpoint, train, TrainConfig, TrainMode, TrainTask,
};

pub const DATA_DIR_ENV: &str = "DUPLEX_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Link prediction subtasks on an edge split.
    #[default]
    Lp,
    /// Self-supervised embeddings probed by an MLP.
    NcTrans,
    /// Supervised node classification on unseen test nodes.
    NcInd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Edge list; relative paths resolve against `$DUPLEX_DATA_DIR` when set.
    pub edges: Option<PathBuf>,
    /// `node_id,label,f_1..f_k` CSV.
    pub features: Option<PathBuf>,
    pub num_nodes: Option<usize>,
    /// Directory of a saved edge split to reuse instead of splitting.
    pub split: Option<PathBuf>,
    pub edge_ratio: [u32; 3],
    pub node_ratio: [u32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            edges: None,
            features: None,
            num_nodes: None,
            split: None,
            edge_ratio: [16, 1, 3],
            node_ratio: [3, 1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub task: Task,
    pub subtasks: Vec<Subtask>,
    pub degree_thresholds: Vec<usize>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            task: Task::Lp,
            subtasks: Subtask::ALL.to_vec(),
            degree_thresholds: Vec::new(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("runs/duplex"),
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_owned(), value.clone())),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || DuplexError::config(format!("unknown config key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let slot = map.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(DuplexError::config(format!("config key `{key}` names a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

impl RunConfig {
    /// Applies dotted-key overrides (`"train.lr": 0.01`) on top of `self`.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut root = serde_json::to_value(self)?;
        for (k, v) in overrides {
            set_dotted(&mut root, k, v.clone())?;
        }
        serde_json::from_value(root).map_err(|e| DuplexError::config(e.to_string()))
    }

    /// Parses a JSON config of dotted keys; nested sections are flattened
    /// first, so both spellings work.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| DuplexError::config(format!("config JSON: {e}")))?;
        if !value.is_object() {
            return Err(DuplexError::config("config must be a JSON object"));
        }
        let mut pairs = Vec::new();
        flatten("", &value, &mut pairs);
        RunConfig::default().with_overrides(&pairs)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| DuplexError::config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Aligns the training mode and input with the task and checks every
    /// section before any data is read.
    pub fn resolve(mut self) -> Result<RunConfig> {
        match self.task {
            Task::NcInd => {
                self.train.mode = TrainMode::SupervisedNode;
                self.encoder.input = InputMode::Features;
            }
            Task::NcTrans if self.train.mode != TrainMode::SelfSupervised => {
                return Err(DuplexError::config("nc-trans trains self-supervised embeddings"));
            }
            Task::Lp if self.train.mode == TrainMode::SupervisedNode => {
                return Err(DuplexError::config("lp cannot use supervised-node training"));
            }
            _ => {}
        }
        self.encoder.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(DuplexError::config("no seeds given"));
        }
        if self.task == Task::Lp && self.subtasks.is_empty() {
            return Err(DuplexError::config("lp needs at least one subtask"));
        }
        if self.data.edges.is_none() {
            return Err(DuplexError::config("data.edges is not set"));
        }
        let needs_labels = self.task != Task::Lp || self.encoder.input == InputMode::Features;
        if needs_labels && self.data.features.is_none() {
            return Err(DuplexError::config(format!(
                "task {:?} with input {:?} needs data.features (labels/attributes CSV)",
                self.task, self.encoder.input
            )));
        }
        if self.probe.hidden == 0 || !(0.0..1.0).contains(&self.probe.dropout) || self.probe.lr <= 0.0 {
            return Err(DuplexError::config(format!("invalid probe settings {:?}", self.probe)));
        }
        Ok(self)
    }

    /// Hash of everything that shapes the trained parameters.
    pub fn model_hash(&self, seed: u64) -> Result<String> {
        let train = TrainConfig { seed, ..self.train.clone() };
        config_hash(&(&self.task, &self.encoder, &train))
    }
}

/// Resolves a dataset path: absolute or existing paths are used as-is,
/// otherwise relative to `$DUPLEX_DATA_DIR` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DuplexError::io(format!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| DuplexError::config(format!("no run manifest at {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DuplexError::io(format!("writing {}", path.display()), e))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(DuplexError::config(format!(
                "output {} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| DuplexError::io(format!("creating {}", dir.display()), e))
}

/// Loads the configured graph and records the inputs' content hashes.
pub fn load_dataset(data: &DataConfig) -> Result<(DiGraph, Vec<InputRecord>)> {
    let edges = data.edges.as_ref().ok_or_else(|| DuplexError::config("data.edges is not set"))?;
    let edges = resolve_data_path(edges);
    if !edges.is_file() {
        return Err(DuplexError::config(format!("edge list {} not found", edges.display())));
    }
    let mut inputs = vec![InputRecord {
        role: "edges".into(),
        sha256: sha256_file(&edges)?,
        path: edges.clone(),
    }];
    let mut graph = load_edge_list(&edges, data.num_nodes)?;
    if let Some(f) = &data.features {
        let f = resolve_data_path(f);
        if !f.is_file() {
            return Err(DuplexError::config(format!("features file {} not found", f.display())));
        }
        inputs.push(InputRecord {
            role: "features".into(),
            sha256: sha256_file(&f)?,
            path: f.clone(),
        });
        graph = load_features_labels(&f, graph)?;
    }
    Ok((graph, inputs))
}

/// Writes `id,a_1..a_d,theta_1..theta_d` rows keyed by original node id.
pub fn write_embedding_csv(path: &Path, graph: &DiGraph, emb: &ComplexEmbedding) -> Result<()> {
    let d = emb.dim();
    let mut s = String::from("id");
    for k in 1..=d {
        let _ = write!(s, ",a_{k}");
    }
    for k in 1..=d {
        let _ = write!(s, ",theta_{k}");
    }
    s.push('\n');
    for u in 0..emb.num_nodes() {
        let _ = write!(s, "{}", graph.original_id(u));
        for x in emb.amplitude.row(u).iter().chain(emb.phase.row(u)) {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    write_text(path, &s)
}

/// Reads a file written by [`write_embedding_csv`].
pub fn read_embedding_csv(path: &Path) -> Result<(Vec<u64>, ComplexEmbedding)> {
    let text = fs::read_to_string(path).map_err(|e| DuplexError::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| DuplexError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = (cols.len().saturating_sub(1)) / 2;
    let expected: Vec<String> = std::iter::once("id".to_owned())
        .chain((1..=d).map(|k| format!("a_{k}")))
        .chain((1..=d).map(|k| format!("theta_{k}")))
        .collect();
    if d == 0 || cols != expected {
        return Err(parse_err(1, format!("unexpected header `{header}`")));
    }
    let (mut ids, mut a, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 * d + 1 {
            return Err(parse_err(i + 1, format!("expected {} fields, found {}", 2 * d + 1, fields.len())));
        }
        ids.push(fields[0].parse().map_err(|e| parse_err(i + 1, format!("id: {e}")))?);
        for (k, f) in fields[1..].iter().enumerate() {
            let x: f64 = f.parse().map_err(|e| parse_err(i + 1, format!("value `{f}`: {e}")))?;
            if k < d { a.push(x) } else { t.push(x) }
        }
    }
    let n = ids.len();
    Ok((ids, ComplexEmbedding::new(Matrix::from_vec(n, d, a)?, Matrix::from_vec(n, d, t)?)?))
}

/// What a finished (or re-loaded) run needs for evaluation.
struct Model {
    encoder: Encoder,
    params: ParamStore,
    graph: DiGraph,
    link: Option<LinkSplit>,
    nodes: Option<NodeSplit>,
}

impl Model {
    fn input(&self, cfg: &RunConfig, seed: u64) -> Result<ComplexEmbedding> {
        init_embeddings(&self.graph, self.encoder.input_dim, cfg.encoder.input, seed)
    }

    /// Embedding of the graph the model is evaluated on: the training graph
    /// for link prediction, the full graph otherwise.
    fn embedding(&self, cfg: &RunConfig, seed: u64) -> Result<ComplexEmbedding> {
        let g = self.link.as_ref().map_or(&self.graph, |s| &s.train_graph);
        let index = GraphIndex::new(g, cfg.encoder.phase_norm);
        self.encoder.embed(&self.params, &index, &self.input(cfg, seed)?)
    }
}

fn input_dim(cfg: &RunConfig, graph: &DiGraph) -> Result<usize> {
    match cfg.encoder.input {
        InputMode::Random => Ok(cfg.encoder.dims[0]),
        InputMode::Features => graph
            .features()
            .map(|f| f.cols())
            .ok_or_else(|| DuplexError::config("input mode `features` but the dataset has no features")),
    }
}

fn labels_of(graph: &DiGraph, task: Task) -> Result<&[usize]> {
    graph
        .labels()
        .ok_or_else(|| DuplexError::config(format!("task {task:?} needs node labels; the dataset has none")))
}

/// Evaluates `model` for `task`; link prediction also returns degree strata.
fn evaluate(model: &Model, cfg: &RunConfig, seed: u64, task: Task) -> Result<(Vec<MetricReport>, Vec<Stratum>)> {
    match task {
        Task::Lp => {
            let split = model
                .link
                .as_ref()
                .ok_or_else(|| DuplexError::config("lp evaluation needs a link-prediction run"))?;
            let emb = model.embedding(cfg, seed)?;
            let decoder = Decoder { emb: &emb, distance: cfg.train.distance };
            let head;
            let scorer: &dyn RelationModel = if cfg.train.mode == TrainMode::SupervisedEdge {
                let get = |n: &str| {
                    model
                        .params
                        .get(n)
                        .ok_or_else(|| DuplexError::Checkpoint(format!("missing `{n}`")))
                };
                head = EdgeHead { emb: &emb, w: get(EDGE_W)?, b: get(EDGE_B)? };
                &head
            } else {
                &decoder
            };
            let mut reports = Vec::new();
            for &t in &cfg.subtasks {
                reports.push(score_subtask(scorer, &build_subtask_testset(split, t, seed)?)?);
            }
            let strata = if cfg.degree_thresholds.is_empty() {
                Vec::new()
            } else {
                let ep = build_subtask_testset(split, Subtask::Ep, seed)?;
                degree_stratified_auc(scorer, &ep, &split.full_graph, &cfg.degree_thresholds)?
            };
            Ok((reports, strata))
        }
        Task::NcTrans => {
            if cfg.train.mode != TrainMode::SelfSupervised {
                return Err(DuplexError::config("nc-trans probes self-supervised embeddings"));
            }
            let labels = labels_of(&model.graph, task)?;
            let nodes = match &model.nodes {
                Some(n) => n.clone(),
                None => split_nodes(&model.graph, cfg.data.node_ratio, seed)?,
            };
            // the probe reads embeddings of the whole graph
            let index = GraphIndex::new(&model.graph, cfg.encoder.phase_norm);
            let emb = model.encoder.embed(&model.params, &index, &model.input(cfg, seed)?)?;
            let probe = ProbeConfig { seed, ..cfg.probe.clone() };
            Ok((vec![transductive_probe(&emb, labels, &nodes, &probe)?], Vec::new()))
        }
        Task::NcInd => {
            let labels = labels_of(&model.graph, task)?;
            let nodes = model
                .nodes
                .as_ref()
                .ok_or_else(|| DuplexError::config("nc-ind evaluation needs an nc-ind run"))?;
            let emb = model.embedding(cfg, seed)?;
            let w = model.params.get(crate::encoder::NODE_W).ok_or_else(|| DuplexError::Checkpoint("node head missing".into()))?;
            let b = model.params.get(crate::encoder::NODE_B).ok_or_else(|| DuplexError::Checkpoint("node head missing".into()))?;
            let z = emb.concat().select_rows(&nodes.test).matmul(w)?;
            let pred: Vec<usize> = (0..z.rows())
                .map(|r| argmax(&z.row(r).iter().zip(b.row(0)).map(|(x, y)| x + y).collect::<Vec<_>>()))
                .collect();
            let truth: Vec<usize> = nodes.test.iter().map(|&u| labels[u]).collect();
            Ok((vec![node_report("nc-ind", &truth, &pred, w.cols())?], Vec::new()))
        }
    }
}

/// One training run; writes every artifact into `dir`.
fn train_seed(cfg: &RunConfig, graph: &DiGraph, inputs: &[InputRecord], seed: u64, dir: &Path) -> Result<Vec<MetricReport>> {
    fs::create_dir_all(dir).map_err(|e| DuplexError::io(format!("creating {}", dir.display()), e))?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let encoder = Encoder::new(cfg.encoder.clone(), input_dim(cfg, graph)?)?;
    let mut outputs = vec!["checkpoint.json".to_owned(), "checkpoint.bin".into(), "train_log.csv".into()];
    let (model, log) = match cfg.task {
        Task::Lp | Task::NcTrans => {
            let split = match (cfg.task, &cfg.data.split) {
                (Task::NcTrans, _) => LinkSplit::whole_graph(graph),
                (_, Some(dir)) => LinkSplit::load(resolve_data_path(dir), graph)?,
                (_, None) => split_edges(graph, cfg.data.edge_ratio, seed)?,
            };
            let input = init_embeddings(graph, encoder.input_dim, cfg.encoder.input, seed)?;
            let out = train(&encoder, TrainTask::Link(&split), &input, &tc)?;
            let nodes = if cfg.task == Task::NcTrans {
                Some(split_nodes(graph, cfg.data.node_ratio, seed)?)
            } else {
                split.save(dir.join("split"))?;
                outputs.push("split/".into());
                None
            };
            let link = (cfg.task == Task::Lp).then_some(split);
            (Model { encoder, params: out.params, graph: graph.clone(), link, nodes }, out.log)
        }
        Task::NcInd => {
            let nodes = split_nodes(graph, cfg.data.node_ratio, seed)?;
            let out = crate::eval::inductive_protocol(graph, &nodes, &cfg.encoder, &tc)?;
            let model = Model { encoder, params: out.train.params, graph: graph.clone(), link: None, nodes: Some(nodes) };
            (model, out.train.log)
        }
    };
    if let Some(nodes) = &model.nodes {
        write_json(&dir.join("node_split.json"), nodes)?;
        outputs.push("node_split.json".into());
    }
    let hash = cfg.model_hash(seed)?;
    save_checkpoint(&model.params, dir.join("checkpoint.json"), &hash, seed)?;
    log.write_csv(dir.join("train_log.csv"))?;
    write_embedding_csv(&dir.join("embedding.csv"), &model.graph, &model.embedding(cfg, seed)?)?;
    outputs.push("embedding.csv".into());
    let (reports, strata) = evaluate(&model, cfg, seed, cfg.task)?;
    write_json(&dir.join("metrics.json"), &reports)?;
    outputs.push("metrics.json".into());
    if !strata.is_empty() {
        write_text(&dir.join("strata.csv"), &strata_csv(&strata))?;
        outputs.push("strata.csv".into());
    }
    let manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: RunConfig { seeds: vec![seed], out: dir.to_path_buf(), ..cfg.clone() },
        config_hash: hash,
        inputs: inputs.to_vec(),
        outputs,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let best = log.record(log.best_epoch);
    let mut line = format!("seed {seed}: best epoch {}", log.best_epoch);
    if let Some(v) = best.and_then(|r| r.val_metric) {
        let _ = write!(line, ", val {v:.4}");
    }
    for r in &reports {
        let _ = write!(line, " | {}", summary(r));
    }
    println!("{line}");
    Ok(reports)
}

fn summary(r: &MetricReport) -> String {
    let mut s = r.task.clone();
    if let Some(a) = r.auc {
        let _ = write!(s, " auc {:.4}", a);
    }
    let _ = write!(s, " acc {:.4}", r.acc);
    if let (Some(ma), Some(mi)) = (r.macro_f1, r.micro_f1) {
        let _ = write!(s, " macro-f1 {ma:.4} micro-f1 {mi:.4}");
    }
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

type MetricFn = fn(&MetricReport) -> Option<f64>;

/// Mean and sample standard deviation of each metric across seeds.
pub fn aggregate(per_seed: &[Vec<MetricReport>]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let Some(first) = per_seed.first() else {
        return rows;
    };
    for (i, r) in first.iter().enumerate() {
        let metrics: [(&str, MetricFn); 4] = [
            ("auc", |r| r.auc),
            ("acc", |r| Some(r.acc)),
            ("macro_f1", |r| r.macro_f1),
            ("micro_f1", |r| r.micro_f1),
        ];
        for (name, get) in metrics {
            let xs: Vec<f64> = per_seed.iter().filter_map(|s| s.get(i).and_then(get)).collect();
            if xs.is_empty() || get(r).is_none() {
                continue;
            }
            let (mean, std) = mean_std(&xs);
            rows.push(AggregateRow { task: r.task.clone(), metric: name.into(), mean, std, n: xs.len() });
        }
    }
    rows
}

fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{:<8} {:<9} {:>16}\n", "task", "metric", "mean(std) %");
    for r in rows {
        let _ = writeln!(s, "{:<8} {:<9} {:>16}", r.task, r.metric, format!("{:.1}({:.1})", 100.0 * r.mean, 100.0 * r.std));
    }
    s
}

/// Parses `3`, `0..9` (inclusive) or `1,4,7`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || DuplexError::config(format!("bad seed list `{s}` (use `0..9` or `1,2,3`)"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| DuplexError::config(format!("bad {what} `{x}` in `{s}`")))
        })
        .collect()
}

fn parse_ratio(s: &str) -> Result<[u32; 3]> {
    let v: Vec<u32> = parse_list(s, "ratio part")?;
    v.try_into()
        .map_err(|_| DuplexError::config(format!("ratio `{s}` needs three parts like 16,1,3")))
}

/// Parses a flag value through the serde names of `T`, e.g. `mid` for a
/// fusion mode.
fn enum_value<T: DeserializeOwned + Serialize>(s: &str, what: &str) -> Result<Value> {
    let v = Value::String(s.to_lowercase());
    let parsed: T = serde_json::from_value(v).map_err(|_| DuplexError::config(format!("unknown {what} `{s}`")))?;
    Ok(serde_json::to_value(parsed)?)
}

#[derive(Parser, Debug)]
#[command(name = "duplex", version, about = "Directed-graph embeddings via Hermitian adjacency reconstruction")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split an edge list into train/val/test files.
    Split(SplitArgs),
    /// Train one or more seeds and evaluate them.
    Train(TrainArgs),
    /// Re-evaluate a finished run from its checkpoint.
    Eval(EvalArgs),
    /// Write a run's embeddings as CSV.
    Export(ExportArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub num_nodes: Option<usize>,
    #[arg(long, default_value = "16,1,3")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Flags that override config keys.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// `0..9` (inclusive) or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// lp, nc-trans or nc-ind.
    #[arg(long)]
    pub task: Option<String>,
    /// Comma list of EP, DP, TP, FP.
    #[arg(long)]
    pub subtask: Option<String>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub decay_mode: Option<String>,
    #[arg(long)]
    pub degree_thresholds: Option<String>,
    /// Any other key, as `dotted.key=<json>`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, Value)>> {
        let mut p: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| p.push((k.to_owned(), v));
        if let Some(s) = self.seed {
            put("seeds", serde_json::json!([s]));
        }
        if let Some(s) = &self.seeds {
            put("seeds", serde_json::to_value(parse_seeds(s)?)?);
        }
        if let Some(t) = &self.task {
            put("task", enum_value::<Task>(t, "task")?);
        }
        if let Some(s) = &self.subtask {
            put("subtasks", serde_json::to_value(parse_list::<Subtask>(s, "subtask")?)?);
        }
        if let Some(f) = &self.fusion {
            put("encoder.fusion", enum_value::<crate::encoder::Fusion>(f, "fusion")?);
        }
        if let Some(b) = &self.backbone {
            put("encoder.backbone", enum_value::<crate::encoder::Backbone>(b, "backbone")?);
        }
        if let Some(d) = &self.distance {
            put("train.distance", enum_value::<crate::objective::Distance>(d, "distance")?);
        }
        if let Some(x) = self.lambda0 {
            put("train.schedule.lambda0", serde_json::json!(x));
        }
        if let Some(x) = self.q {
            put("train.schedule.q", serde_json::json!(x));
        }
        if let Some(m) = &self.decay_mode {
            put("train.schedule.mode", enum_value::<crate::objective::DecayMode>(m, "decay mode")?);
        }
        if let Some(t) = &self.degree_thresholds {
            put("degree_thresholds", serde_json::to_value(parse_list::<usize>(t, "threshold")?)?);
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| DuplexError::config(format!("--set expects KEY=JSON, got `{kv}`")))?;
            // bare words are taken as strings
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
            put(k, v);
        }
        if let Some(o) = &self.out {
            put("out", serde_json::to_value(o)?);
        }
        Ok(p)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.pairs()?)?.resolve()
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A per-seed run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub subtask: Option<String>,
    #[arg(long)]
    pub degree_thresholds: Option<String>,
    /// Defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma list of checks; defaults to all.
    #[arg(long)]
    pub ops: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt this op's backward rule (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub list: bool,
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    let ratio = parse_ratio(&a.ratio)?;
    let path = resolve_data_path(&a.edges);
    if !path.is_file() {
        return Err(DuplexError::config(format!("edge list {} not found", path.display())));
    }
    prepare_out(&a.out, a.force)?;
    let g = load_edge_list(&path, a.num_nodes)?;
    let split = split_edges(&g, ratio, a.seed)?;
    split.save(&a.out)?;
    let c = split.manifest().counts;
    println!("split {} edges into {}/{}/{} -> {}", g.num_edges(), c[0], c[1], c[2], a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<AggregateRow>> {
    let cfg = a.overrides.run_config()?;
    let (graph, inputs) = load_dataset(&cfg.data)?;
    if cfg.task != Task::Lp {
        labels_of(&graph, cfg.task)?;
    }
    prepare_out(&cfg.out, a.overrides.force)?;
    log::info!("{} nodes, {} edges, seeds {:?}", graph.num_nodes(), graph.num_edges(), cfg.seeds);
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        per_seed.push(train_seed(&cfg, &graph, &inputs, seed, &cfg.out.join(format!("seed-{seed}")))?);
    }
    let rows = aggregate(&per_seed);
    write_json(&cfg.out.join("summary.json"), &rows)?;
    print!("{}", aggregate_table(&rows));
    Ok(rows)
}

/// Rebuilds the model of a run directory, checking inputs and hashes.
fn load_run(dir: &Path) -> Result<(RunManifest, Model)> {
    let manifest = RunManifest::read(dir)?;
    let cfg = &manifest.config;
    let (graph, inputs) = load_dataset(&cfg.data)?;
    for (now, then) in inputs.iter().zip(&manifest.inputs) {
        if now.sha256 != then.sha256 {
            return Err(DuplexError::Data(format!("input {} changed since the run", now.path.display())));
        }
    }
    let seed = manifest.seed;
    let encoder = Encoder::new(cfg.encoder.clone(), input_dim(cfg, &graph)?)?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let template = init_model(&encoder, &tc, graph.num_classes())?;
    let loaded = load_checkpoint(dir.join("checkpoint.json"), &template, &manifest.config_hash)?;
    if !loaded.hash_matches || cfg.model_hash(seed)? != manifest.config_hash {
        return Err(DuplexError::Checkpoint(format!(
            "checkpoint in {} was trained with a different configuration",
            dir.display()
        )));
    }
    let link = match cfg.task {
        Task::Lp => Some(LinkSplit::load(dir.join("split"), &graph)?),
        _ => None,
    };
    let nodes = match fs::read_to_string(dir.join("node_split.json")) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let model = Model { encoder, params: loaded.params, graph, link, nodes };
    Ok((manifest, model))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<MetricReport>> {
    let mut manifest = RunManifest::read(&a.run)?;
    let mut overrides = Vec::new();
    if let Some(t) = &a.task {
        overrides.push(("task".to_owned(), enum_value::<Task>(t, "task")?));
    }
    if let Some(s) = &a.subtask {
        overrides.push(("subtasks".to_owned(), serde_json::to_value(parse_list::<Subtask>(s, "subtask")?)?));
    }
    if let Some(t) = &a.degree_thresholds {
        overrides.push(("degree_thresholds".to_owned(), serde_json::to_value(parse_list::<usize>(t, "threshold")?)?));
    }
    let eval_cfg = manifest.config.with_overrides(&overrides)?;
    let (_, model) = load_run(&a.run)?;
    if eval_cfg.task != manifest.config.task {
        labels_of(&model.graph, eval_cfg.task)?;
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    prepare_out(&out, a.force)?;
    let (reports, strata) = evaluate(&model, &eval_cfg, manifest.seed, eval_cfg.task)?;
    write_json(&out.join("report.json"), &reports)?;
    let mut outputs = vec!["report.json".to_owned()];
    if !strata.is_empty() {
        write_text(&out.join("strata.csv"), &strata_csv(&strata))?;
        outputs.push("strata.csv".into());
    }
    for r in &reports {
        println!("{}", summary(r));
    }
    manifest.command = "eval".into();
    manifest.config = eval_cfg;
    manifest.outputs = outputs;
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(reports)
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        return Err(DuplexError::config(format!("{} exists (use --force)", a.out.display())));
    }
    let (manifest, model) = load_run(&a.run)?;
    let emb = model.embedding(&manifest.config, manifest.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DuplexError::io(format!("creating {}", parent.display()), e))?;
    }
    write_embedding_csv(&a.out, &model.graph, &emb)?;
    println!("wrote {} nodes x {} dims to {}", emb.num_nodes(), emb.dim(), a.out.display());
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.list {
        for n in gradcheck_names() {
            println!("{n}");
        }
        return Ok(());
    }
    let only: Option<Vec<String>> = a.ops.as_ref().map(|s| parse_list(s, "check")).transpose()?;
    let fault = match &a.inject_fault {
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| DuplexError::config(format!("unknown op `{name}`")))?)
        }
        None => None,
    };
    let report = gradcheck_suite(only.as_deref(), fault, a.seed, a.tol)?;
    for r in &report.results {
        println!(
            "{:<24} {} max rel err {:.2e} ({} checked, {} at kinks)",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.checked,
            r.skipped
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed at tolerance {:e}", report.results.len(), a.tol);
        Ok(())
    } else {
        Err(DuplexError::Autodiff(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Export(a) => cmd_export(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Exit code for a finished command: 0 ok, 1 runtime failure, 2 usage.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::from_json(r#"{"train.lr": 0.01, "encoder.fusion": "none", "train.schedule.q": 0.01}"#).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.encoder.fusion, crate::encoder::Fusion::None);
        assert_eq!(cfg.train.schedule.q, 0.01);
        let nested = RunConfig::from_json(r#"{"train": {"lr": 0.01}}"#).unwrap();
        assert_eq!(nested.train.lr, 0.01);
        assert_eq!(nested.encoder, RunConfig::default().encoder);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        for bad in [r#"{"train.lrr": 1}"#, r#"{"nope": 1}"#, r#"{"train.lr": "fast"}"#, r#"{"train": 3}"#, "[1]"] {
            let e = RunConfig::from_json(bad).unwrap_err();
            assert!(e.is_usage(), "{bad}: {e}");
        }
    }

    #[test]
    fn num_nodes_is_optional() {
        let cfg = RunConfig::from_json(r#"{"data.num_nodes": 34, "data.edges": "g.txt"}"#).unwrap();
        assert_eq!(cfg.data.num_nodes, Some(34));
        assert_eq!(RunConfig::default().data.num_nodes, None);
    }

    #[test]
    fn resolve_checks_task_consistency() {
        let base = RunConfig { data: DataConfig { edges: Some("e.txt".into()), ..DataConfig::default() }, ..RunConfig::default() };
        assert!(base.clone().resolve().is_ok());
        let trans = RunConfig { task: Task::NcTrans, ..base.clone() };
        assert!(trans.resolve().unwrap_err().is_usage());
        let ind = RunConfig {
            task: Task::NcInd,
            data: DataConfig { features: Some("f.csv".into()), ..base.data.clone() },
            ..base.clone()
        };
        let r = ind.resolve().unwrap();
        assert_eq!((r.train.mode, r.encoder.input), (TrainMode::SupervisedNode, InputMode::Features));
        assert!(RunConfig::default().resolve().is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..9").unwrap().len(), 10);
        assert_eq!(parse_seeds("4").unwrap(), vec![4]);
        assert_eq!(parse_seeds("1, 5,7").unwrap(), vec![1, 5, 7]);
        assert!(parse_seeds("9..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn flag_overrides_use_serde_names() {
        let o = Overrides {
            fusion: Some("EWS".into()),
            distance: Some("l2".into()),
            decay_mode: Some("literal".into()),
            subtask: Some("EP,fp".into()),
            set: vec!["encoder.dims=[4,4]".into(), "data.edges=x.txt".into()],
            ..Overrides::default()
        };
        let cfg = o.run_config().unwrap();
        assert_eq!(cfg.encoder.fusion, crate::encoder::Fusion::Ews);
        assert_eq!(cfg.train.distance, crate::objective::Distance::L2);
        assert_eq!(cfg.subtasks, vec![Subtask::Ep, Subtask::Fp]);
        assert_eq!(cfg.encoder.dims, vec![4, 4]);
        let bad = Overrides { fusion: Some("sideways".into()), ..Overrides::default() };
        assert!(bad.run_config().unwrap_err().is_usage());
    }

    #[test]
    fn aggregate_mean_and_std() {
        let rep = |acc| MetricReport {
            task: "tp".into(),
            auc: None,
            acc,
            classes: vec![],
            confusion: vec![],
            macro_f1: None,
            micro_f1: None,
            n_samples: 1,
        };
        let rows = aggregate(&[vec![rep(0.5)], vec![rep(0.7)]]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.6).abs() < 1e-15);
        assert!((rows[0].std - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
