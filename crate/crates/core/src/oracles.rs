//! Independent checks: finite-difference gradients, brute-force AUC and a
//! small Jacobi SVD for the zero-row property of factorized adjacency.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    edge_logits, init_edge_head, init_embeddings, init_node_head, node_logits, Encoder, EncoderConfig, Fusion,
    GraphIndex, InputMode, PhaseNorm,
};
use crate::error::{DuplexError, Result};
use crate::graph::{sample_batch, DiGraph, LinkSplit, Relation};
use crate::objective::{connection_loss, direction_loss, supervised_ce_loss, BatchIndex, Distance};
use crate::tensor::{BoundParams, Matrix, OpKind, ParamStore, Tape, Var};

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// Gradient comparison for one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(row, col)` of the largest relative error.
    pub argmax: (usize, usize),
    pub checked: usize,
    /// Coordinates skipped because a kink lies within `±ε`.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub eps: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.checked > 0 && e.max_rel_err <= tol)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Options shared by the finite-difference drivers.
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: Option<usize>,
    /// Backward rule to corrupt on the analytic tape.
    pub fault: Option<OpKind>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords: None,
            fault: None,
        }
    }
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares central differences with the tape gradient of every tensor in
/// `point`. `f` builds the scalar loss from the bound tensors.
pub fn fd_check<F>(point: &ParamStore, opts: FdOptions, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_backward_fault(kind);
    }
    let bound = point.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let mut analytic = point.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&tape, &bound);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.scalar_value(l))
    };
    let f0 = eval(point)?;
    let eps = opts.eps;
    let mut entries = Vec::new();
    for p in analytic.iter() {
        let mut entry = FdEntry {
            name: p.name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            argmax: (0, 0),
            checked: 0,
            skipped: 0,
        };
        let cols = p.value.cols().max(1);
        for k in coords(p.value.len(), opts.max_coords) {
            let mut plus = point.clone();
            plus.get_mut(&p.name).expect("same names").data_mut()[k] += eps;
            let mut minus = point.clone();
            minus.get_mut(&p.name).expect("same names").data_mut()[k] -= eps;
            let (fp, fm) = (eval(&plus)?, eval(&minus)?);
            let (fwd, bwd) = ((fp - f0) / eps, (f0 - fm) / eps);
            let numeric = (fp - fm) / (2.0 * eps);
            // one-sided slopes disagree: a kink lies inside [x−ε, x+ε]
            if (fwd - bwd).abs() > 1e-3 * numeric.abs().max(1.0) {
                entry.skipped += 1;
                continue;
            }
            let a = p.grad.data()[k];
            let rel = rel_err(a, numeric);
            entry.checked += 1;
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            if rel > entry.max_rel_err || entry.checked == 1 {
                entry.max_rel_err = entry.max_rel_err.max(rel);
                entry.argmax = (k / cols, k % cols);
            }
        }
        entries.push(entry);
    }
    Ok(FdReport { eps, entries })
}

/// Single-tensor convenience wrapper around [`fd_check`].
pub fn fd_gradient<F>(point: &Matrix, eps: f64, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.insert("x", point.clone());
    fd_check(&store, FdOptions { eps, ..Default::default() }, |t, b| f(t, b.get("x")?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub fault: Option<String>,
    pub results: Vec<GradcheckResult>,
    pub passed: bool,
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Contracts an op's output with fixed random weights so every output
/// entry influences the loss.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(rand_matrix(&mut rng, r, c, -1.0, 1.0));
    let p = tape.hadamard(out, w)?;
    Ok(tape.sum(p))
}

/// Inputs and loss builder for the op-level check of `kind`.
type Objective = Box<dyn Fn(&mut Tape, &BoundParams) -> Result<Var>>;

fn op_case(kind: OpKind, seed: u64) -> (ParamStore, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut put = |name: &str, m: Matrix| store.insert(name, m);
    let ids: Arc<[usize]> = Arc::from([0usize, 0, 1, 2, 2, 2]);
    let gather: Arc<[usize]> = Arc::from([2usize, 0, 0, 1, 3]);
    match kind {
        OpKind::MatMul => {
            put("a", rand_matrix(&mut rng, 3, 4, -1.0, 1.0));
            put("b", rand_matrix(&mut rng, 4, 2, -1.0, 1.0));
        }
        OpKind::Add | OpKind::Sub | OpKind::Hadamard => {
            put("a", rand_matrix(&mut rng, 3, 2, -1.0, 1.0));
            put("b", rand_matrix(&mut rng, 3, 2, -1.0, 1.0));
        }
        OpKind::AddRow => {
            put("a", rand_matrix(&mut rng, 3, 2, -1.0, 1.0));
            put("b", rand_matrix(&mut rng, 1, 2, -1.0, 1.0));
        }
        OpKind::MulCol => {
            put("a", rand_matrix(&mut rng, 3, 2, -1.0, 1.0));
            put("b", rand_matrix(&mut rng, 3, 1, -1.0, 1.0));
        }
        OpKind::ConcatCols => {
            put("a", rand_matrix(&mut rng, 3, 2, -1.0, 1.0));
            put("b", rand_matrix(&mut rng, 3, 1, -1.0, 1.0));
        }
        OpKind::RowGather => put("a", rand_matrix(&mut rng, 4, 3, -1.0, 1.0)),
        OpKind::SegmentSum | OpKind::SegmentSoftmax => put("a", rand_matrix(&mut rng, 6, 2, -2.0, 2.0)),
        OpKind::Log | OpKind::Sqrt => put("a", rand_matrix(&mut rng, 3, 3, 0.3, 2.0)),
        OpKind::Relu | OpKind::LeakyRelu | OpKind::Abs => put("a", away_from_zero(&mut rng, 3, 3)),
        _ => put("a", rand_matrix(&mut rng, 3, 3, -1.5, 1.5)),
    }
    let f = move |t: &mut Tape, b: &BoundParams| -> Result<Var> {
        let a = b.get("a")?;
        let out = match kind {
            OpKind::MatMul => t.matmul(a, b.get("b")?)?,
            OpKind::Add => t.add(a, b.get("b")?)?,
            OpKind::Sub => t.sub(a, b.get("b")?)?,
            OpKind::Hadamard => t.hadamard(a, b.get("b")?)?,
            OpKind::AddRow => t.add_row(a, b.get("b")?)?,
            OpKind::MulCol => t.mul_col(a, b.get("b")?)?,
            OpKind::ConcatCols => t.concat_cols(&[a, b.get("b")?])?,
            OpKind::ScalarMul => t.scalar_mul(a, -1.7),
            OpKind::AddScalar => t.add_scalar(a, 0.3),
            OpKind::RowGather => t.row_gather(a, gather.clone())?,
            OpKind::SegmentSum => t.segment_sum(a, ids.clone(), 4)?,
            OpKind::SegmentSoftmax => t.segment_softmax(a, ids.clone(), 3)?,
            OpKind::Relu => t.relu(a),
            OpKind::LeakyRelu => t.leaky_relu(a, 0.2),
            OpKind::Exp => t.exp(a),
            OpKind::Log => t.log(a),
            OpKind::Sigmoid => t.sigmoid(a),
            OpKind::LogSigmoid => t.log_sigmoid(a),
            OpKind::Sin => t.sin(a),
            OpKind::Cos => t.cos(a),
            OpKind::Abs => t.abs(a),
            OpKind::Sqrt => t.sqrt(a),
            OpKind::SoftmaxRows => t.softmax_rows(a),
            OpKind::LogSoftmaxRows => t.log_softmax_rows(a),
            OpKind::Dropout => t.dropout(a, 0.5, true, 11)?,
            OpKind::Sum => t.sum(a),
            OpKind::Mean => t.mean(a),
            OpKind::SumCols => t.sum_cols(a),
            OpKind::Leaf => a,
        };
        weighted_sum(t, out, seed)
    };
    (store, Box::new(f))
}

/// A small random digraph with some bidirectional pairs.
pub fn random_digraph(n: usize, m: usize, seed: u64) -> DiGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<_> = (0..m)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .collect();
    DiGraph::from_edges(n, edges).expect("ids in range")
}

type Case = (ParamStore, Objective);

/// End-to-end losses through the full encoder on a 5-node graph with `d = 4`.
fn e2e_case(name: &str, seed: u64) -> Result<Case> {
    let g = {
        let mut edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 0), (2, 4)];
        edges.extend(random_digraph(5, 4, seed).edges().iter().copied());
        DiGraph::from_edges(5, edges)?
    };
    let (fusion, norm, distance) = match name {
        "e2e.direction_l2" => (Fusion::Mid, PhaseNorm::Union, Distance::L2),
        "e2e.direction_per_sum" => (Fusion::All, PhaseNorm::PerSum, Distance::L1),
        "e2e.direction_ews" => (Fusion::Ews, PhaseNorm::Union, Distance::L1),
        _ => (Fusion::Mid, PhaseNorm::Union, Distance::L1),
    };
    let cfg = EncoderConfig {
        fusion,
        phase_norm: norm,
        dropout: 0.0,
        ..EncoderConfig::uniform(3, 4)
    };
    let enc = Encoder::new(cfg, 4)?;
    let x = init_embeddings(&g, 4, InputMode::Random, seed)?;
    let mut params = ParamStore::new();
    enc.init_params(&mut params, seed);
    init_edge_head(&mut params, 4, seed);
    init_node_head(&mut params, 4, 3, seed)?;
    let batch = BatchIndex::from(&sample_batch(&LinkSplit::whole_graph(&g), 1.0, seed)?);
    let index = GraphIndex::new(&g, norm);
    let name = name.to_owned();
    let f = move |t: &mut Tape, b: &BoundParams| -> Result<Var> {
        let emb = enc.forward(t, b, &index, &x, false, 0)?;
        match name.as_str() {
            "e2e.connection" => connection_loss(t, &emb, &batch),
            "e2e.edge_head" => {
                let z = edge_logits(t, b, &emb, batch.u.clone(), batch.v.clone())?;
                let y: Vec<usize> = batch.rel.iter().map(|r| r.index()).collect();
                supervised_ce_loss(t, z, &y)
            }
            "e2e.node_head" => {
                let z = node_logits(t, b, &emb)?;
                supervised_ce_loss(t, z, &[0, 1, 2, 0, 1])
            }
            _ => direction_loss(t, &emb, &batch, distance),
        }
    };
    Ok((params, Box::new(f)))
}

pub const E2E_CASES: [&str; 6] = [
    "e2e.direction",
    "e2e.direction_l2",
    "e2e.direction_per_sum",
    "e2e.direction_ews",
    "e2e.connection",
    "e2e.edge_head",
];

/// All check names: every differentiable op, then the end-to-end losses.
pub fn gradcheck_names() -> Vec<String> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|k| k.name().to_owned())
        .chain(E2E_CASES.iter().map(|s| s.to_string()))
        .chain(std::iter::once("e2e.node_head".to_owned()))
        .collect()
}

/// Runs the gradient-check suite, optionally restricted to `only` and with
/// a corrupted backward rule.
pub fn gradcheck_suite(only: Option<&[String]>, fault: Option<OpKind>, seed: u64, tol: f64) -> Result<GradcheckReport> {
    let names = gradcheck_names();
    if let Some(sel) = only {
        if let Some(bad) = sel.iter().find(|s| !names.contains(s)) {
            return Err(DuplexError::config(format!("unknown gradcheck `{bad}`")));
        }
    }
    let opts = FdOptions {
        eps: 1e-5,
        max_coords: None,
        fault,
    };
    let mut results = Vec::new();
    for name in names {
        if only.is_some_and(|s| !s.contains(&name)) {
            continue;
        }
        let (point, f) = match OpKind::from_name(&name) {
            Some(kind) => op_case(kind, seed),
            None => e2e_case(&name, seed)?,
        };
        let report = fd_check(&point, opts, f)?;
        let checked: usize = report.entries.iter().map(|e| e.checked).sum();
        let skipped: usize = report.entries.iter().map(|e| e.skipped).sum();
        let max_rel_err = report.max_rel_err();
        results.push(GradcheckResult {
            passed: checked > 0 && max_rel_err <= tol,
            name,
            max_rel_err,
            checked,
            skipped,
        });
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        eps: opts.eps,
        tolerance: tol,
        fault: fault.map(|k| k.name().to_owned()),
        results,
        passed,
    })
}

/// Mann–Whitney AUC by enumerating every (positive, negative) pair.
pub fn auc_bruteforce(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DuplexError::shape("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DuplexError::Data("AUC needs both classes".into()));
    }
    let mut total = 0.0;
    for &p in &pos {
        for &n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                let x = us.get(r, c) * s;
                us.set(r, c, x);
            }
        }
        us.matmul(&self.v.transpose()).expect("matching ranks")
    }
}

const SVD_MAX: usize = 64;
const SVD_TOL: f64 = 1e-12;
const SVD_SWEEPS: usize = 100;

/// Completes zero columns of `q` to an orthonormal set (Gram–Schmidt
/// against the standard basis).
fn complete_orthonormal(q: &mut Matrix, zero_cols: &[usize]) {
    let m = q.rows();
    let mut e = 0;
    for &c in zero_cols {
        while e < m {
            let mut cand: Vec<f64> = (0..m).map(|r| if r == e { 1.0 } else { 0.0 }).collect();
            e += 1;
            for other in 0..q.cols() {
                if other == c || zero_cols.contains(&other) && other > c {
                    continue;
                }
                let dot: f64 = (0..m).map(|r| q.get(r, other) * cand[r]).sum();
                for (r, x) in cand.iter_mut().enumerate() {
                    *x -= dot * q.get(r, other);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (r, x) in cand.iter().enumerate() {
                    q.set(r, c, x / norm);
                }
                break;
            }
        }
    }
}

/// Rank-`d` SVD of a dense matrix of at most 64×64 by one-sided Jacobi.
pub fn truncated_svd_small(m: &Matrix, d: usize) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rows > SVD_MAX || cols > SVD_MAX {
        return Err(DuplexError::config(format!("SVD oracle is limited to {SVD_MAX}x{SVD_MAX}")));
    }
    if d == 0 || d > rows.min(cols) {
        return Err(DuplexError::config(format!("rank {d} invalid for a {rows}x{cols} matrix")));
    }
    if rows < cols {
        let t = truncated_svd_small(&m.transpose(), d)?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    let n = cols;
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let mut converged = false;
    for _ in 0..SVD_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    let (x, y) = (a.get(r, p), a.get(r, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..mat.rows() {
                        let (x, y) = (mat.get(r, p), mat.get(r, q));
                        mat.set(r, p, c * x - s * y);
                        mat.set(r, q, s * x + c * y);
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DuplexError::Data(format!("Jacobi SVD did not converge in {SVD_SWEEPS} sweeps")));
    }
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|c| ((0..rows).map(|r| a.get(r, c).powi(2)).sum::<f64>().sqrt(), c))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut u = Matrix::zeros(rows, n);
    let mut vs = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut zero_cols = Vec::new();
    let scale = order[0].0.max(f64::MIN_POSITIVE);
    for (k, &(s, c)) in order.iter().enumerate() {
        sigma.push(s);
        for r in 0..n {
            vs.set(r, k, v.get(r, c));
        }
        if s > scale * 1e-14 {
            for r in 0..rows {
                u.set(r, k, a.get(r, c) / s);
            }
        } else {
            zero_cols.push(k);
        }
    }
    complete_orthonormal(&mut u, &zero_cols);
    let keep: Vec<usize> = (0..d).collect();
    let take_cols = |mat: &Matrix| Matrix::from_fn(mat.rows(), d, |r, c| mat.get(r, keep[c]));
    Ok(Svd {
        u: take_cols(&u),
        sigma: sigma[..d].to_vec(),
        v: take_cols(&vs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub zero_rows: Vec<usize>,
    pub max_source_row_norm: f64,
    pub zero_cols: Vec<usize>,
    pub max_target_row_norm: f64,
    /// Zero-out-degree nodes with an in-edge whose HAM row is nonzero.
    pub ham_rows_nonzero: bool,
    pub skipped: Option<String>,
}

impl Lemma2Report {
    pub fn holds(&self, tol: f64) -> bool {
        self.skipped.is_none()
            && self.max_source_row_norm <= tol
            && self.max_target_row_norm <= tol
            && self.ham_rows_nonzero
    }
}

/// Source embedding `U·Σ^{1/2}` of the rank-`d` SVD of `A`: rows of
/// zero-out-degree nodes vanish; the HAM keeps them nonzero.
pub fn lemma2_check(graph: &DiGraph, d: usize) -> Result<Lemma2Report> {
    let n = graph.num_nodes();
    let a = Matrix::from_fn(n, n, |u, v| if graph.has_edge(u, v) { 1.0 } else { 0.0 });
    let zero_rows: Vec<usize> = (0..n).filter(|&u| graph.out_degree(u) == 0).collect();
    let zero_cols: Vec<usize> = (0..n).filter(|&u| graph.in_degree(u) == 0).collect();
    if zero_rows.is_empty() {
        return Err(DuplexError::Data("graph has no zero-out-degree node".into()));
    }
    let svd = truncated_svd_small(&a, d)?;
    let full = truncated_svd_small(&a, n)?;
    let mut skipped = None;
    for k in 0..d.min(n - 1) {
        let (s, t) = (full.sigma[k], full.sigma[k + 1]);
        if s < 1e-8 || (s - t).abs() < 1e-8 {
            skipped = Some(format!("degenerate spectrum near singular value {k}: {s} vs {t}"));
            break;
        }
    }
    let embed_norm = |m: &Matrix, rows: &[usize]| {
        rows.iter()
            .map(|&r| {
                (0..d)
                    .map(|c| (m.get(r, c) * svd.sigma[c].sqrt()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    let ham_rows_nonzero = zero_rows
        .iter()
        .filter(|&&u| graph.in_degree(u) > 0)
        .all(|&u| (0..n).any(|v| v != u && graph.relation(u, v) != Relation::NoEdge));
    Ok(Lemma2Report {
        max_source_row_norm: embed_norm(&svd.u, &zero_rows),
        max_target_row_norm: embed_norm(&svd.v, &zero_cols),
        zero_rows,
        zero_cols,
        ham_rows_nonzero,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_quadratic() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let r = fd_gradient(&x, 1e-5, |t, v| {
            let sq = t.hadamard(v, v)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-9);
        assert_eq!(r.entries[0].checked, 2);
    }

    #[test]
    fn fd_skips_coordinates_at_kinks() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let r = fd_gradient(&x, 1e-5, |t, v| {
            let a = t.abs(v);
            Ok(t.sum(a))
        })
        .unwrap();
        assert_eq!((r.entries[0].checked, r.entries[0].skipped), (1, 1));
    }

    #[test]
    fn every_op_passes() {
        let report = gradcheck_suite(None, None, 1, 1e-4).unwrap();
        for r in &report.results {
            assert!(r.passed, "{r:?}");
        }
        assert_eq!(report.results.len(), OpKind::DIFFERENTIABLE.len() + E2E_CASES.len() + 1);
    }

    #[test]
    fn injected_fault_is_caught() {
        for kind in [OpKind::SegmentSoftmax, OpKind::Cos, OpKind::MatMul] {
            let only = vec![kind.name().to_owned()];
            let report = gradcheck_suite(Some(&only), Some(kind), 1, 1e-4).unwrap();
            assert!(!report.passed, "{kind}");
        }
        let only = vec!["e2e.direction".to_owned()];
        assert!(!gradcheck_suite(Some(&only), Some(OpKind::SegmentSoftmax), 2, 1e-4).unwrap().passed);
        assert!(gradcheck_suite(Some(&["nope".to_owned()]), None, 0, 1e-4).is_err());
    }

    #[test]
    fn connection_loss_ignores_phase() {
        let (point, _) = e2e_case("e2e.connection", 3).unwrap();
        let g = DiGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let batch = BatchIndex::from(&sample_batch(&LinkSplit::whole_graph(&g), 1.0, 0).unwrap());
        let mut store = ParamStore::new();
        store.insert("a", Matrix::from_fn(3, 2, |i, j| 0.3 + (i * 2 + j) as f64 * 0.1));
        store.insert("t", Matrix::from_fn(3, 2, |i, j| (i + j) as f64));
        let r = fd_check(&store, FdOptions::default(), |t, b| {
            let emb = crate::encoder::EncodedVars { amplitude: b.get("a")?, phase: b.get("t")? };
            connection_loss(t, &emb, &batch)
        })
        .unwrap();
        let phase = r.entries.iter().find(|e| e.name == "t").unwrap();
        assert!(phase.max_abs_err <= 1e-10);
        assert!(r.passes(1e-4));
        assert!(!point.is_empty());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_bruteforce(&[1.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc_bruteforce(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auc_bruteforce(&[1.0], &[true]).is_err());
    }

    fn orthonormality_err(q: &Matrix) -> f64 {
        q.transpose().matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn svd_cases() {
        let s = truncated_svd_small(&Matrix::identity(4), 4).unwrap();
        assert_eq!(s.sigma, vec![1.0; 4]);
        assert!(s.reconstruct().max_abs_diff(&Matrix::identity(4)) < 1e-15);

        let x = Matrix::column(vec![1.0, -2.0, 0.5]);
        let y = Matrix::from_rows(&[vec![3.0, 0.0, 1.0, 2.0]]).unwrap();
        let outer = x.matmul(&y).unwrap();
        let s = truncated_svd_small(&outer, 1).unwrap();
        assert!(s.reconstruct().max_abs_diff(&outer) < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_matrix(&mut rng, 8, 8, -1.0, 1.0);
        let s = truncated_svd_small(&m, 8).unwrap();
        let diff = s.reconstruct().zip_map(&m, |a, b| a - b);
        assert!(diff.frobenius_norm() <= 1e-8);
        assert!(orthonormality_err(&s.u) <= 1e-10 && orthonormality_err(&s.v) <= 1e-10);
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]) && s.sigma.iter().all(|&x| x >= 0.0));

        let wide = rand_matrix(&mut rng, 3, 6, -1.0, 1.0);
        let s = truncated_svd_small(&wide, 3).unwrap();
        assert!(s.reconstruct().max_abs_diff(&wide) < 1e-10);
        assert!(truncated_svd_small(&Matrix::zeros(65, 2), 1).is_err());
    }

    #[test]
    fn lemma2_on_stated_matrix() {
        let g = DiGraph::from_edges(3, [(0, 1), (0, 2), (1, 2)]).unwrap();
        let r = lemma2_check(&g, 2).unwrap();
        assert_eq!(r.zero_rows, vec![2]);
        assert_eq!(r.zero_cols, vec![0]);
        assert!(r.holds(1e-10), "{r:?}");
        // transposing swaps the roles of rows and columns
        let rt = lemma2_check(&g.reversed(), 2).unwrap();
        assert_eq!(rt.zero_rows, vec![0]);
        assert!(rt.holds(1e-10));
    }
}
