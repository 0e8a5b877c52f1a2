//! Dual amplitude/phase graph-attention encoder and supervised heads.

mod heads;
mod layers;

pub use heads::{edge_logits, init_edge_head, init_node_head, node_logits, EDGE_B, EDGE_W, NODE_B, NODE_W};
pub use layers::{
    aggregate, amplitude_layer, ews_step, fusion_step, gcn_layer, phase_layer, AggParams, Aggregation,
    FusionParams, GraphIndex, NeighborIndex, PhaseNorm,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{DuplexError, Result};
use crate::graph::DiGraph;
use crate::tensor::{BoundParams, Matrix, ParamStore, Tape, Var};

/// Polar form of the complex node embeddings: amplitudes `a` and phases `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexEmbedding {
    pub amplitude: Matrix,
    pub phase: Matrix,
}

impl ComplexEmbedding {
    pub fn new(amplitude: Matrix, phase: Matrix) -> Result<Self> {
        if amplitude.shape() != phase.shape() {
            return Err(DuplexError::shape(
                "complex_embedding",
                format!("amplitude {:?} vs phase {:?}", amplitude.shape(), phase.shape()),
            ));
        }
        Ok(ComplexEmbedding { amplitude, phase })
    }

    pub fn num_nodes(&self) -> usize {
        self.amplitude.rows()
    }

    pub fn dim(&self) -> usize {
        self.amplitude.cols()
    }

    /// Row-wise `[a_u; θ_u]`, `n×2d`.
    pub fn concat(&self) -> Matrix {
        Matrix::hcat(&[&self.amplitude, &self.phase]).expect("shapes checked at construction")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// i.i.d. standard normal `a` and `θ`.
    #[default]
    Random,
    /// Node features as both `a` and `θ`.
    Features,
}

/// Fixed encoder inputs.
pub fn init_embeddings(graph: &DiGraph, d: usize, mode: InputMode, seed: u64) -> Result<ComplexEmbedding> {
    match mode {
        InputMode::Random => {
            if d == 0 {
                return Err(DuplexError::config("embedding dimension must be positive"));
            }
            let n = graph.num_nodes();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let amplitude = draw();
            let phase = draw();
            ComplexEmbedding::new(amplitude, phase)
        }
        InputMode::Features => {
            let f = graph
                .features()
                .ok_or_else(|| DuplexError::config("input mode `features` but the graph has no features"))?;
            if f.cols() == 0 {
                return Err(DuplexError::config("feature dimension is zero"));
            }
            ComplexEmbedding::new(f.clone(), f.clone())
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gat,
    Gcn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    Early,
    #[default]
    Mid,
    Late,
    All,
    /// Element-wise sum of the two encoders' pre-activations at every layer.
    Ews,
}

/// Fan-based uniform scaling for the transform matrices `W`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Initializer {
    /// `U(±√(6/(fan_in+fan_out)))`
    #[default]
    Glorot,
    /// `U(±√(6/fan_in))`, the ReLU gain
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output dimension of each layer; its length is the layer count.
    pub dims: Vec<usize>,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub phase_norm: PhaseNorm,
    pub dropout: f64,
    pub slope: f64,
    pub input: InputMode,
    #[serde(default)]
    pub init: Initializer,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::uniform(3, 128)
    }
}

impl EncoderConfig {
    pub fn uniform(layers: usize, d: usize) -> Self {
        EncoderConfig {
            dims: vec![d; layers],
            backbone: Backbone::Gat,
            fusion: Fusion::Mid,
            phase_norm: PhaseNorm::Union,
            dropout: 0.5,
            slope: 0.2,
            input: InputMode::Random,
            init: Initializer::Glorot,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    pub fn out_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(DuplexError::config("encoder needs at least one layer"));
        }
        if self.dims.contains(&0) {
            return Err(DuplexError::config("layer dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DuplexError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.slope.is_finite() || self.slope < 0.0 {
            return Err(DuplexError::config(format!("leaky-relu slope {} must be >= 0", self.slope)));
        }
        Ok(())
    }

    /// Whether layer `l` (1-based) is a cross-aggregation fusion layer.
    pub fn is_fusion_layer(&self, l: usize) -> bool {
        let n = self.layers();
        match self.fusion {
            Fusion::None | Fusion::Ews => false,
            Fusion::Early => l == 1,
            Fusion::Mid => l == n.div_ceil(2),
            Fusion::Late => l == n,
            Fusion::All => true,
        }
    }
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    uniform(rows, cols, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

fn agg_name(group: &str, l: usize, part: &str) -> String {
    format!("{group}.{l}.{part}")
}

/// The encoder's architecture bound to an input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_dim: usize,
}

/// Tape handles for the encoder's outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub amplitude: Var,
    pub phase: Var,
}

impl Encoder {
    pub fn new(config: EncoderConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(DuplexError::config("input dimension must be positive"));
        }
        Ok(Encoder { config, input_dim })
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let d_in = if l == 1 { self.input_dim } else { self.config.dims[l - 2] };
        (d_in, self.config.dims[l - 1])
    }

    fn groups_at(&self, l: usize) -> Vec<&'static str> {
        let mut groups = vec!["amp", "phase"];
        if self.config.is_fusion_layer(l) {
            groups.extend(["amp_from_phase", "phase_from_amp"]);
        }
        groups
    }

    /// Uniform fan-scaled parameters, in a fixed name order.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x0065_6e63]));
        let gat = self.config.backbone == Backbone::Gat;
        for l in 1..=self.config.layers() {
            let (d_in, d_out) = self.layer_dims(l);
            for group in self.groups_at(l) {
                let w = match self.config.init {
                    Initializer::Glorot => glorot(d_in, d_out, d_in, d_out, &mut rng),
                    Initializer::He => uniform(d_in, d_out, (6.0 / d_in as f64).sqrt(), &mut rng),
                };
                store.insert(agg_name(group, l, "w"), w);
                if gat {
                    store.insert(agg_name(group, l, "att_src"), glorot(d_out, 1, 2 * d_out, 1, &mut rng));
                    store.insert(agg_name(group, l, "att_dst"), glorot(d_out, 1, 2 * d_out, 1, &mut rng));
                }
            }
            if self.config.fusion == Fusion::Ews {
                for name in ["amp_from_phase", "phase_from_amp"] {
                    store.insert(agg_name("ews", l, name), glorot(d_out, d_out, d_out, d_out, &mut rng));
                }
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut store = ParamStore::new();
        let probe = Encoder {
            config: EncoderConfig {
                dims: vec![1; self.config.layers()],
                ..self.config.clone()
            },
            input_dim: 1,
        };
        probe.init_params(&mut store, 0);
        store.names().map(str::to_owned).collect()
    }

    fn agg_params(&self, bound: &BoundParams, group: &str, l: usize) -> Result<AggParams> {
        let w = bound.get(&agg_name(group, l, "w"))?;
        let attention = match self.config.backbone {
            Backbone::Gat => Some((
                bound.get(&agg_name(group, l, "att_src"))?,
                bound.get(&agg_name(group, l, "att_dst"))?,
            )),
            Backbone::Gcn => None,
        };
        Ok(AggParams { w, attention })
    }

    /// Runs all layers. Dropout follows every hidden layer when `training`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        index: &GraphIndex,
        input: &ComplexEmbedding,
        training: bool,
        seed: u64,
    ) -> Result<EncodedVars> {
        if input.dim() != self.input_dim || input.num_nodes() != index.num_nodes() {
            return Err(DuplexError::shape(
                "encode",
                format!(
                    "input {}x{} for encoder with input dim {} on {} nodes",
                    input.num_nodes(),
                    input.dim(),
                    self.input_dim,
                    index.num_nodes()
                ),
            ));
        }
        let cfg = &self.config;
        let mut a = tape.constant(input.amplitude.clone());
        let mut t = tape.constant(input.phase.clone());
        for l in 1..=cfg.layers() {
            let amp = self.agg_params(bound, "amp", l)?;
            let phase = self.agg_params(bound, "phase", l)?;
            (a, t) = if cfg.is_fusion_layer(l) {
                let fp = FusionParams {
                    amp,
                    phase,
                    amp_from_phase: self.agg_params(bound, "amp_from_phase", l)?,
                    phase_from_amp: self.agg_params(bound, "phase_from_amp", l)?,
                };
                fusion_step(tape, a, t, fp, index, cfg.slope)?
            } else if cfg.fusion == Fusion::Ews {
                let pa = aggregate(tape, a, amp, &index.amplitude, cfg.slope)?.out;
                let pt = aggregate(tape, t, phase, &index.phase, cfg.slope)?.out;
                let psi_at = bound.get(&agg_name("ews", l, "amp_from_phase"))?;
                let psi_ta = bound.get(&agg_name("ews", l, "phase_from_amp"))?;
                ews_step(tape, pa, pt, psi_at, psi_ta)?
            } else {
                (
                    amplitude_layer(tape, a, amp, index, cfg.slope)?,
                    phase_layer(tape, t, phase, index, cfg.slope)?,
                )
            };
            if l < cfg.layers() {
                a = tape.dropout(a, cfg.dropout, training, derive_seed(seed, &[l as u64, 0]))?;
                t = tape.dropout(t, cfg.dropout, training, derive_seed(seed, &[l as u64, 1]))?;
            }
        }
        Ok(EncodedVars { amplitude: a, phase: t })
    }

    /// Inference-mode embedding.
    pub fn embed(&self, params: &ParamStore, index: &GraphIndex, input: &ComplexEmbedding) -> Result<ComplexEmbedding> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, index, input, false, 0)?;
        ComplexEmbedding::new(tape.value(out.amplitude).clone(), tape.value(out.phase).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DiGraph;
    use proptest::prelude::*;

    fn no_fusion(layers: usize, d: usize) -> EncoderConfig {
        EncoderConfig {
            fusion: Fusion::None,
            ..EncoderConfig::uniform(layers, d)
        }
    }

    #[test]
    fn parameter_count_identity() {
        let enc = Encoder::new(no_fusion(3, 128), 128).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, 0);
        assert_eq!(store.num_scalars(), 99_840);
        for (l, d) in [(1, 4), (2, 7), (4, 16)] {
            let enc = Encoder::new(no_fusion(l, d), d).unwrap();
            let mut store = ParamStore::new();
            enc.init_params(&mut store, 1);
            assert_eq!(store.num_scalars(), 2 * l * d * d + 4 * l * d);
        }
    }

    #[test]
    fn fusion_placement() {
        let mut cfg = EncoderConfig::uniform(3, 8);
        let layers = |c: &EncoderConfig| (1..=3).filter(|&l| c.is_fusion_layer(l)).collect::<Vec<_>>();
        assert_eq!(layers(&cfg), vec![2]);
        cfg.fusion = Fusion::Early;
        assert_eq!(layers(&cfg), vec![1]);
        cfg.fusion = Fusion::Late;
        assert_eq!(layers(&cfg), vec![3]);
        cfg.fusion = Fusion::All;
        assert_eq!(layers(&cfg), vec![1, 2, 3]);
        cfg.fusion = Fusion::Ews;
        assert!(layers(&cfg).is_empty());
        let enc = Encoder::new(EncoderConfig::uniform(3, 8), 8).unwrap();
        assert!(enc.param_names().contains(&"amp_from_phase.2.w".to_string()));
        assert!(!enc.param_names().contains(&"amp_from_phase.1.w".to_string()));
    }

    #[test]
    fn random_inputs_reproducible_and_centered() {
        let g = DiGraph::from_edges(100, []).unwrap();
        let a = init_embeddings(&g, 100, InputMode::Random, 9).unwrap();
        let b = init_embeddings(&g, 100, InputMode::Random, 9).unwrap();
        assert_eq!(a, b);
        let mean = a.amplitude.sum() / a.amplitude.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!(init_embeddings(&g, 0, InputMode::Random, 9).is_err());
        assert!(init_embeddings(&g, 4, InputMode::Features, 9).is_err());
    }

    #[test]
    fn feature_inputs_set_input_dim() {
        let g = DiGraph::from_edges(3, [(0, 1)])
            .unwrap()
            .with_features(Matrix::from_fn(3, 5, |i, j| (i + j) as f64))
            .unwrap();
        let x = init_embeddings(&g, 16, InputMode::Features, 0).unwrap();
        assert_eq!(x.dim(), 5);
        assert_eq!(x.amplitude, x.phase);
    }

    fn random_graph(n: usize, edges: &[(usize, usize)]) -> DiGraph {
        DiGraph::from_edges(n, edges.iter().map(|&(u, v)| (u % n, v % n))).unwrap()
    }

    fn run(enc: &Encoder, g: &DiGraph, x: &ComplexEmbedding, store: &ParamStore) -> ComplexEmbedding {
        let index = GraphIndex::new(g, enc.config.phase_norm);
        enc.embed(store, &index, x).unwrap()
    }

    #[test]
    fn deterministic_encode() {
        let g = random_graph(6, &[(0, 1), (1, 2), (2, 3), (4, 5), (5, 0), (3, 1)]);
        let enc = Encoder::new(EncoderConfig::uniform(3, 4), 4).unwrap();
        let x = init_embeddings(&g, 4, InputMode::Random, 1).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, 2);
        assert_eq!(run(&enc, &g, &x, &store), run(&enc, &g, &x, &store));
    }

    #[test]
    fn training_dropout_changes_outputs() {
        let g = random_graph(6, &[(0, 1), (1, 2), (2, 3), (4, 5), (5, 0), (3, 1)]);
        let enc = Encoder::new(EncoderConfig::uniform(2, 8), 8).unwrap();
        let x = init_embeddings(&g, 8, InputMode::Random, 1).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, 2);
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let train = enc.forward(&mut tape, &bound, &index, &x, true, 5).unwrap();
        let eval = enc.forward(&mut tape, &bound, &index, &x, false, 5).unwrap();
        assert_ne!(tape.value(train.amplitude), tape.value(eval.amplitude));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn amplitude_ignores_direction(edges in prop::collection::vec((0usize..7, 0usize..7), 1..16), seed in 0u64..1000) {
            let g = random_graph(7, &edges);
            let cfg = EncoderConfig { fusion: Fusion::None, dropout: 0.0, ..EncoderConfig::uniform(2, 3) };
            let enc = Encoder::new(cfg, 3).unwrap();
            let x = init_embeddings(&g, 3, InputMode::Random, seed).unwrap();
            let mut store = ParamStore::new();
            enc.init_params(&mut store, seed);
            let a = run(&enc, &g, &x, &store);
            let b = run(&enc, &g.reversed(), &x, &store);
            prop_assert!(a.amplitude.max_abs_diff(&b.amplitude) < 1e-12);
        }

        #[test]
        fn phase_neighbor_terms_flip_on_reversal(edges in prop::collection::vec((0usize..6, 0usize..6), 1..14), seed in 0u64..1000) {
            let g = random_graph(6, &edges);
            let x = init_embeddings(&g, 3, InputMode::Random, seed).unwrap();
            let pre = |g: &DiGraph| {
                let index = GraphIndex::new(g, PhaseNorm::Union);
                let mut tape = Tape::new();
                let xv = tape.constant(x.phase.clone());
                let w = tape.param(Matrix::from_fn(3, 2, |i, j| ((seed + (i * 2 + j) as u64) as f64).sin()));
                let att = (tape.param(Matrix::column(vec![0.3, -0.2])), tape.param(Matrix::column(vec![0.1, 0.5])));
                let agg = aggregate(&mut tape, xv, AggParams { w, attention: Some(att) }, &index.phase, 0.2).unwrap();
                let h = tape.value(xv).matmul(tape.value(w)).unwrap();
                let alpha = tape.value(agg.alpha.unwrap()).clone();
                // the self term α_uu·h_u, which does not flip
                let mut self_term = Matrix::zeros(6, 2);
                for e in 0..index.phase.len() {
                    let (c, v) = (index.phase.centers()[e], index.phase.neighbors()[e]);
                    if c == v {
                        for k in 0..2 {
                            self_term.set(c, k, alpha.data()[e] * h.get(c, k));
                        }
                    }
                }
                (tape.value(agg.out).clone(), self_term)
            };
            let (p, s) = pre(&g);
            let (q, s2) = pre(&g.reversed());
            prop_assert!(s.max_abs_diff(&s2) < 1e-12);
            let lhs = p.zip_map(&s, |a, b| a - b);
            let rhs = q.zip_map(&s2, |a, b| b - a);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn encode_is_permutation_equivariant(edges in prop::collection::vec((0usize..8, 0usize..8), 1..20), seed in 0u64..1000) {
            let n = 8;
            let g = random_graph(n, &edges);
            let mut perm: Vec<usize> = (0..n).collect();
            {
                use rand::seq::SliceRandom;
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            }
            // node u of g becomes perm[u] of h
            let h = DiGraph::from_edges(n, g.edges().iter().map(|&(u, v)| (perm[u], perm[v]))).unwrap();
            let mut inv = vec![0; n];
            for (u, &p) in perm.iter().enumerate() {
                inv[p] = u;
            }
            for fusion in [Fusion::None, Fusion::Mid, Fusion::Ews] {
                let cfg = EncoderConfig { fusion, ..EncoderConfig::uniform(3, 4) };
                let enc = Encoder::new(cfg, 4).unwrap();
                let x = init_embeddings(&g, 4, InputMode::Random, seed).unwrap();
                let xp = ComplexEmbedding::new(x.amplitude.select_rows(&inv), x.phase.select_rows(&inv)).unwrap();
                let mut store = ParamStore::new();
                enc.init_params(&mut store, seed);
                let out = run(&enc, &g, &x, &store);
                let outp = run(&enc, &h, &xp, &store);
                prop_assert!(outp.amplitude.max_abs_diff(&out.amplitude.select_rows(&inv)) < 1e-10);
                prop_assert!(outp.phase.max_abs_diff(&out.phase.select_rows(&inv)) < 1e-10);
            }
        }
    }

    #[test]
    fn gcn_backbone_has_no_attention_params() {
        let cfg = EncoderConfig { backbone: Backbone::Gcn, fusion: Fusion::None, ..EncoderConfig::uniform(2, 4) };
        let enc = Encoder::new(cfg, 4).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, 0);
        assert_eq!(store.num_scalars(), 2 * 2 * 16);
        let g = random_graph(4, &[(0, 1), (2, 3)]);
        let x = init_embeddings(&g, 4, InputMode::Random, 3).unwrap();
        let out = run(&enc, &g, &x, &store);
        assert!(out.amplitude.all_finite());
    }

    #[test]
    fn invalid_configs() {
        assert!(Encoder::new(EncoderConfig::uniform(0, 4), 4).is_err());
        assert!(Encoder::new(EncoderConfig::uniform(2, 0), 4).is_err());
        let cfg = EncoderConfig { dropout: 1.0, ..EncoderConfig::uniform(2, 4) };
        assert!(Encoder::new(cfg, 4).is_err());
        let enc = Encoder::new(EncoderConfig::uniform(2, 4), 4).unwrap();
        let g = random_graph(3, &[(0, 1)]);
        let x = init_embeddings(&g, 5, InputMode::Random, 0).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, 0);
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        assert!(enc.embed(&store, &index, &x).is_err());
        let empty = ParamStore::new();
        let x = init_embeddings(&g, 4, InputMode::Random, 0).unwrap();
        assert!(matches!(enc.embed(&empty, &index, &x), Err(DuplexError::Config(_))));
    }
}
