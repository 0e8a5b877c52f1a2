use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::DiGraph;
use crate::tensor::{Matrix, Tape, Var};

/// How phase attention is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseNorm {
    /// One softmax over `{u} ∪ in(u) ∪ out(u)`, signs applied afterwards.
    #[default]
    Union,
    /// Separate softmaxes over `{u} ∪ in(u)` and over `out(u)`.
    PerSum,
}

/// Flattened `(center, neighbor, sign)` entries, grouped by center.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    num_nodes: usize,
    centers: Arc<[usize]>,
    neighbors: Arc<[usize]>,
    signs: Option<Matrix>,
    softmax_ids: Arc<[usize]>,
    num_segments: usize,
}

/// Sorted union of `{u}`, in- and out-neighbors, tagged with membership.
fn merged_neighborhood(graph: &DiGraph, u: usize) -> Vec<(usize, bool, bool)> {
    let (ins, outs) = (graph.in_neighbors(u), graph.out_neighbors(u));
    let mut merged = Vec::with_capacity(ins.len() + outs.len() + 1);
    let (mut i, mut j) = (0, 0);
    let mut self_done = false;
    loop {
        let next_in = ins.get(i).copied();
        let next_out = outs.get(j).copied();
        let candidate = match (next_in, next_out) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => usize::MAX,
        };
        if !self_done && u <= candidate {
            merged.push((u, false, false));
            self_done = true;
            continue;
        }
        if candidate == usize::MAX {
            break;
        }
        let is_in = next_in == Some(candidate);
        let is_out = next_out == Some(candidate);
        i += is_in as usize;
        j += is_out as usize;
        merged.push((candidate, is_in, is_out));
    }
    merged
}

impl NeighborIndex {
    /// Undirected neighborhood with self, all signs `+1`.
    pub fn unsigned(graph: &DiGraph) -> Self {
        let n = graph.num_nodes();
        let (mut centers, mut neighbors) = (Vec::new(), Vec::new());
        for u in 0..n {
            for (v, _, _) in merged_neighborhood(graph, u) {
                centers.push(u);
                neighbors.push(v);
            }
        }
        let centers: Arc<[usize]> = centers.into();
        NeighborIndex {
            num_nodes: n,
            softmax_ids: centers.clone(),
            centers,
            neighbors: neighbors.into(),
            signs: None,
            num_segments: n,
        }
    }

    /// Phase neighborhood: self and in-neighbors `+1`, out-neighbors `-1`.
    pub fn signed(graph: &DiGraph, norm: PhaseNorm) -> Self {
        let n = graph.num_nodes();
        let (mut centers, mut neighbors, mut signs, mut seg) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for u in 0..n {
            match norm {
                PhaseNorm::Union => {
                    for (v, is_in, is_out) in merged_neighborhood(graph, u) {
                        let sign = if v == u {
                            1.0
                        } else {
                            is_in as i32 as f64 - is_out as i32 as f64
                        };
                        centers.push(u);
                        neighbors.push(v);
                        signs.push(sign);
                        seg.push(u);
                    }
                }
                PhaseNorm::PerSum => {
                    let positive = std::iter::once(u).chain(graph.in_neighbors(u).iter().copied());
                    for v in positive {
                        centers.push(u);
                        neighbors.push(v);
                        signs.push(1.0);
                        seg.push(2 * u);
                    }
                    for &v in graph.out_neighbors(u) {
                        centers.push(u);
                        neighbors.push(v);
                        signs.push(-1.0);
                        seg.push(2 * u + 1);
                    }
                }
            }
        }
        let num_segments = match norm {
            PhaseNorm::Union => n,
            PhaseNorm::PerSum => 2 * n,
        };
        NeighborIndex {
            num_nodes: n,
            centers: centers.into(),
            neighbors: neighbors.into(),
            signs: Some(Matrix::column(signs)),
            softmax_ids: seg.into(),
            num_segments,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn softmax_segments(&self) -> (&[usize], usize) {
        (&self.softmax_ids, self.num_segments)
    }

    /// Sign of entry `e` (`1` for unsigned indexes).
    pub fn sign(&self, e: usize) -> f64 {
        self.signs.as_ref().map_or(1.0, |s| s.data()[e])
    }
}

/// Both neighborhood indexes the encoder needs for one graph.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub amplitude: NeighborIndex,
    pub phase: NeighborIndex,
}

impl GraphIndex {
    pub fn new(graph: &DiGraph, norm: PhaseNorm) -> Self {
        GraphIndex {
            amplitude: NeighborIndex::unsigned(graph),
            phase: NeighborIndex::signed(graph, norm),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.amplitude.num_nodes()
    }
}

/// Parameters of one aggregation: transform `W` and, for attention, the
/// two halves of the attention vector `b = [b_src; b_dst]`.
#[derive(Clone, Copy, Debug)]
pub struct AggParams {
    pub w: Var,
    pub attention: Option<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Aggregation {
    /// Pre-activation `Σ_v sign·α_uv·W x_v`, `n×d_out`.
    pub out: Var,
    /// Per-entry attention weights (`E×1`), before signs; `None` for GCN.
    pub alpha: Option<Var>,
}

/// Attention (or, without attention parameters, plain-sum) aggregation of
/// `x` over `index`.
pub fn aggregate(
    tape: &mut Tape,
    x: Var,
    params: AggParams,
    index: &NeighborIndex,
    slope: f64,
) -> Result<Aggregation> {
    let h = tape.matmul(x, params.w)?;
    let messages = tape.row_gather(h, index.neighbors.clone())?;
    let alpha = match params.attention {
        Some((b_src, b_dst)) => {
            let s_src = tape.matmul(h, b_src)?;
            let s_dst = tape.matmul(h, b_dst)?;
            let l_src = tape.row_gather(s_src, index.centers.clone())?;
            let l_dst = tape.row_gather(s_dst, index.neighbors.clone())?;
            let logits = tape.add(l_src, l_dst)?;
            let logits = tape.leaky_relu(logits, slope);
            Some(tape.segment_softmax(logits, index.softmax_ids.clone(), index.num_segments)?)
        }
        None => None,
    };
    let weights = match (alpha, &index.signs) {
        (Some(a), Some(s)) => {
            let s = tape.constant(s.clone());
            Some(tape.hadamard(a, s)?)
        }
        (Some(a), None) => Some(a),
        (None, Some(s)) => Some(tape.constant(s.clone())),
        (None, None) => None,
    };
    let weighted = match weights {
        Some(w) => tape.mul_col(messages, w)?,
        None => messages,
    };
    let out = tape.segment_sum(weighted, index.centers.clone(), index.num_nodes)?;
    Ok(Aggregation { out, alpha })
}

/// `ReLU(Σ_{v∈𝒩(u)} α_uv W a_v)` over the undirected neighborhood with self.
pub fn amplitude_layer(tape: &mut Tape, a_in: Var, params: AggParams, index: &GraphIndex, slope: f64) -> Result<Var> {
    let agg = aggregate(tape, a_in, params, &index.amplitude, slope)?;
    Ok(tape.relu(agg.out))
}

/// `ReLU(Σ_{in ∪ self} α W θ_v − Σ_{out} α W θ_v)`.
pub fn phase_layer(tape: &mut Tape, th_in: Var, params: AggParams, index: &GraphIndex, slope: f64) -> Result<Var> {
    let agg = aggregate(tape, th_in, params, &index.phase, slope)?;
    Ok(tape.relu(agg.out))
}

/// Attention-free layer with unnormalized sums; `signed` selects the phase
/// neighborhood.
pub fn gcn_layer(tape: &mut Tape, x_in: Var, w: Var, index: &GraphIndex, signed: bool) -> Result<Var> {
    let idx = if signed { &index.phase } else { &index.amplitude };
    let agg = aggregate(tape, x_in, AggParams { w, attention: None }, idx, 0.0)?;
    Ok(tape.relu(agg.out))
}

/// Parameters for one fused layer: the regular and the cross aggregations.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub amp: AggParams,
    pub phase: AggParams,
    pub amp_from_phase: AggParams,
    pub phase_from_amp: AggParams,
}

/// `a' = ReLU(⊕a + ⊕θ)`, `θ' = ReLU(⇀⊕θ + ⇀⊕a)`.
pub fn fusion_step(
    tape: &mut Tape,
    a_in: Var,
    th_in: Var,
    params: FusionParams,
    index: &GraphIndex,
    slope: f64,
) -> Result<(Var, Var)> {
    let aa = aggregate(tape, a_in, params.amp, &index.amplitude, slope)?.out;
    let at = aggregate(tape, th_in, params.amp_from_phase, &index.amplitude, slope)?.out;
    let tt = aggregate(tape, th_in, params.phase, &index.phase, slope)?.out;
    let ta = aggregate(tape, a_in, params.phase_from_amp, &index.phase, slope)?.out;
    let a_pre = tape.add(aa, at)?;
    let t_pre = tape.add(tt, ta)?;
    Ok((tape.relu(a_pre), tape.relu(t_pre)))
}

/// Element-wise-sum fusion on pre-activations:
/// `a' = ReLU(pa + pθ·ψ_aθ)`, `θ' = ReLU(pθ + pa·ψ_θa)`.
pub fn ews_step(tape: &mut Tape, pre_a: Var, pre_t: Var, psi_at: Var, psi_ta: Var) -> Result<(Var, Var)> {
    let cross_a = tape.matmul(pre_t, psi_at)?;
    let cross_t = tape.matmul(pre_a, psi_ta)?;
    let a = tape.add(pre_a, cross_a)?;
    let t = tape.add(pre_t, cross_t)?;
    Ok((tape.relu(a), tape.relu(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity_params(tape: &mut Tape, d: usize, attention: bool) -> AggParams {
        let w = tape.param(Matrix::identity(d));
        let attention = attention.then(|| (tape.param(Matrix::zeros(d, 1)), tape.param(Matrix::zeros(d, 1))));
        AggParams { w, attention }
    }

    fn alpha_sums(tape: &Tape, agg: &Aggregation, idx: &NeighborIndex) -> Vec<f64> {
        let (ids, n) = idx.softmax_segments();
        let alpha = tape.value(agg.alpha.unwrap());
        let mut sums = vec![0.0; n];
        for (e, &s) in ids.iter().enumerate() {
            sums[s] += alpha.data()[e];
        }
        sums
    }

    #[test]
    fn neighborhood_is_a_set_with_self() {
        let g = DiGraph::from_edges(4, [(0, 1), (1, 0), (2, 0), (0, 3)]).unwrap();
        let idx = NeighborIndex::signed(&g, PhaseNorm::Union);
        let entries: Vec<_> = (0..idx.len())
            .filter(|&e| idx.centers()[e] == 0)
            .map(|e| (idx.neighbors()[e], idx.sign(e)))
            .collect();
        assert_eq!(entries, vec![(0, 1.0), (1, 0.0), (2, 1.0), (3, -1.0)]);
        let per_sum = NeighborIndex::signed(&g, PhaseNorm::PerSum);
        // the bidirectional neighbor sits in both groups
        assert_eq!(per_sum.centers().iter().filter(|&&c| c == 0).count(), 5);
    }

    #[test]
    fn isolated_node_is_singleton() {
        let g = DiGraph::from_edges(2, []).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let w = tape.param(Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let att = (tape.param(Matrix::column(vec![0.3, -0.1])), tape.param(Matrix::column(vec![0.2, 0.7])));
        let out = amplitude_layer(&mut tape, x, AggParams { w, attention: Some(att) }, &index, 0.2).unwrap();
        // x·W = [[0, -2], [4, 3]]
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 4.0, 3.0]);
    }

    #[test]
    fn attention_rows_normalize() {
        let g = DiGraph::from_edges(5, [(0, 1), (1, 2), (2, 0), (3, 1), (1, 3), (4, 0)]).unwrap();
        for norm in [PhaseNorm::Union, PhaseNorm::PerSum] {
            let index = GraphIndex::new(&g, norm);
            let mut tape = Tape::new();
            let x = tape.constant(Matrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin()));
            let w = tape.param(Matrix::from_fn(3, 2, |i, j| 0.4 * i as f64 - 0.3 * j as f64));
            let att = (tape.param(Matrix::column(vec![0.5, -1.0])), tape.param(Matrix::column(vec![1.5, 0.25])));
            let params = AggParams { w, attention: Some(att) };
            for idx in [&index.amplitude, &index.phase] {
                let agg = aggregate(&mut tape, x, params, idx, 0.2).unwrap();
                let (ids, _) = idx.softmax_segments();
                for (s, sum) in alpha_sums(&tape, &agg, idx).into_iter().enumerate() {
                    if ids.contains(&s) {
                        assert!((sum - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn path_graph_uniform_attention_is_mean() {
        let g = DiGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, -4.0], vec![2.0, 2.0], vec![6.0, -1.0]]).unwrap());
        let p = identity_params(&mut tape, 2, true);
        let out = amplitude_layer(&mut tape, x, p, &index, 0.2).unwrap();
        let expect = [1.5, 0.0, 3.0, 0.0, 4.0, 0.5];
        for (a, b) in tape.value(out).data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn star_graph_phase_contribution() {
        // center 0 with in-neighbors 1, 2 and out-neighbor 3
        let g = DiGraph::from_edges(4, [(1, 0), (2, 0), (0, 3)]).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let th = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let x = tape.constant(th);
        let p = identity_params(&mut tape, 1, true);
        let agg = aggregate(&mut tape, x, p, &index.phase, 0.2).unwrap();
        // (1 + 2 + 3)/4 − 4/4
        assert_abs_diff_eq!(tape.value(agg.out).get(0, 0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mirrored_neighbor_negates_and_bidirectional_cancels() {
        let fwd = DiGraph::from_edges(2, [(1, 0)]).unwrap();
        let rev = fwd.reversed();
        let both = DiGraph::from_edges(2, [(1, 0), (0, 1)]).unwrap();
        let th = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.5, -0.5]]).unwrap();
        let run = |g: &DiGraph| {
            let index = GraphIndex::new(g, PhaseNorm::Union);
            let mut tape = Tape::new();
            let x = tape.constant(th.clone());
            let w = tape.param(Matrix::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap());
            let att = (tape.param(Matrix::column(vec![0.3, 0.1])), tape.param(Matrix::column(vec![-0.4, 0.6])));
            let agg = aggregate(&mut tape, x, AggParams { w, attention: Some(att) }, &index.phase, 0.2).unwrap();
            tape.value(agg.out).row(0).to_vec()
        };
        // the self row is zero, so row 0 holds only the neighbor contribution
        let (a, b) = (run(&fwd), run(&rev));
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, -*y, epsilon = 1e-12);
            assert!(x.abs() > 1e-6);
        }
        assert!(run(&both).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gcn_signed_two_nodes() {
        let g = DiGraph::from_edges(2, [(0, 1)]).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![3.0], vec![1.0]]).unwrap());
        let w = tape.param(Matrix::identity(1));
        let agg = aggregate(&mut tape, x, AggParams { w, attention: None }, &index.phase, 0.0).unwrap();
        // v=1: θ_v + θ_u; u=0: θ_u − θ_v
        assert_eq!(tape.value(agg.out).data(), &[2.0, 4.0]);
        let out = gcn_layer(&mut tape, x, w, &index, false).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 4.0]);
    }

    #[test]
    fn fusion_with_zero_phase_matches_amplitude_layer() {
        let g = DiGraph::from_edges(4, [(0, 1), (1, 2), (3, 2)]).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.7));
        let th = tape.constant(Matrix::zeros(4, 2));
        let mk = |tape: &mut Tape, k: f64| AggParams {
            w: tape.param(Matrix::from_fn(2, 2, |i, j| k * (i as f64 + 1.0) - j as f64)),
            attention: Some((tape.param(Matrix::column(vec![k, 0.1])), tape.param(Matrix::column(vec![0.2, -k])))),
        };
        let params = FusionParams {
            amp: mk(&mut tape, 0.5),
            phase: mk(&mut tape, -0.3),
            amp_from_phase: mk(&mut tape, 2.0),
            phase_from_amp: mk(&mut tape, 1.1),
        };
        let (fa, _) = fusion_step(&mut tape, a, th, params, &index, 0.2).unwrap();
        let plain = amplitude_layer(&mut tape, a, params.amp, &index, 0.2).unwrap();
        assert_eq!(tape.value(fa), tape.value(plain));
    }

    #[test]
    fn ews_single_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![1.0, -3.0]]).unwrap());
        let t = tape.constant(Matrix::from_rows(&[vec![0.5, 1.0]]).unwrap());
        let psi = tape.param(Matrix::identity(2));
        let (a2, t2) = ews_step(&mut tape, a, t, psi, psi).unwrap();
        assert_eq!(tape.value(a2).data(), &[1.5, 0.0]);
        assert_eq!(tape.value(t2).data(), &[1.5, 0.0]);
    }

    /// Dense single-head GAT on an undirected graph, written independently.
    fn reference_gat(adj: &[Vec<bool>], x: &Matrix, w: &Matrix, b1: &[f64], b2: &[f64], slope: f64) -> Matrix {
        let h = x.matmul(w).unwrap();
        let n = adj.len();
        let dot = |row: &[f64], b: &[f64]| row.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let mut out = Matrix::zeros(n, w.cols());
        for (i, adj_i) in adj.iter().enumerate() {
            let nbrs: Vec<usize> = (0..n).filter(|&j| j == i || adj_i[j]).collect();
            let e: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let z = dot(h.row(i), b1) + dot(h.row(j), b2);
                    if z > 0.0 { z } else { slope * z }
                })
                .collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            for (k, &j) in nbrs.iter().enumerate() {
                let a = e[k].exp() / z;
                for c in 0..w.cols() {
                    let v = out.get(i, c) + a * h.get(j, c);
                    out.set(i, c, v);
                }
            }
        }
        out.map(|v| v.max(0.0))
    }

    #[test]
    fn amplitude_layer_is_gat_on_symmetrized_graph() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 1), (5, 4), (2, 5)];
        let g = DiGraph::from_edges(6, edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)])).unwrap();
        let mut adj = vec![vec![false; 6]; 6];
        for &(u, v) in &edges {
            adj[u][v] = true;
            adj[v][u] = true;
        }
        let x = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) as f64 * 0.37).cos());
        let w = Matrix::from_fn(3, 4, |i, j| ((i + 2 * j) as f64 * 0.61).sin());
        let (b1, b2) = (vec![0.4, -0.8, 0.3, 1.1], vec![-0.5, 0.9, 0.2, -0.7]);
        let expect = reference_gat(&adj, &x, &w, &b1, &b2, 0.2);

        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let params = AggParams {
            w: tape.param(w),
            attention: Some((tape.param(Matrix::column(b1)), tape.param(Matrix::column(b2)))),
        };
        let out = amplitude_layer(&mut tape, xv, params, &index, 0.2).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let g = DiGraph::from_edges(2, [(0, 1)]).unwrap();
        let index = GraphIndex::new(&g, PhaseNorm::Union);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 3));
        let p = identity_params(&mut tape, 2, true);
        assert!(amplitude_layer(&mut tape, x, p, &index, 0.2).is_err());
    }
}
