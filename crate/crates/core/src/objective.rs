//! Parameter-free decoders, the self-supervised losses and their schedule.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{ComplexEmbedding, EncodedVars};
use crate::error::{DuplexError, Result};
use crate::graph::{Complex, Relation, SampleBatch};
use crate::tensor::{Matrix, Tape, Var};

/// `Ĥ(u, v) = x_uᵀ x̄_v`.
pub type ComplexScore = Complex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `|Δre| + |Δim|`.
    #[default]
    L1,
    /// Modulus of the difference.
    L2,
}

impl Distance {
    pub fn eval(self, s: Complex, r: Complex) -> f64 {
        let (dr, di) = (s.re - r.re, s.im - r.im);
        match self {
            Distance::L1 => dr.abs() + di.abs(),
            Distance::L2 => (dr * dr + di * di).sqrt(),
        }
    }
}

pub fn hermitian_score(emb: &ComplexEmbedding, u: usize, v: usize) -> Result<ComplexScore> {
    let n = emb.num_nodes();
    for id in [u, v] {
        if id >= n {
            return Err(DuplexError::Bounds { id, num_nodes: n });
        }
    }
    let (au, av) = (emb.amplitude.row(u), emb.amplitude.row(v));
    let (tu, tv) = (emb.phase.row(u), emb.phase.row(v));
    let mut s = Complex::default();
    for k in 0..emb.dim() {
        let m = au[k] * av[k];
        let (sin, cos) = (FRAC_PI_2 * (tu[k] - tv[k])).sin_cos();
        s.re += m * cos;
        s.im += m * sin;
    }
    Ok(s)
}

/// Softmax of negative prototype distances, over `restrict` in the given order.
pub fn direction_probs(score: ComplexScore, distance: Distance, restrict: &[Relation]) -> Result<Vec<f64>> {
    if restrict.is_empty() {
        return Err(DuplexError::config("direction_probs needs a nonempty prototype set"));
    }
    let neg: Vec<f64> = restrict
        .iter()
        .map(|r| -distance.eval(score, r.prototype()))
        .collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = neg.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Relation with the highest decoder probability over all four prototypes.
pub fn predict_relation(score: ComplexScore, distance: Distance) -> Relation {
    Relation::ALL
        .into_iter()
        .min_by(|a, b| {
            distance
                .eval(score, a.prototype())
                .total_cmp(&distance.eval(score, b.prototype()))
        })
        .expect("four relations")
}

/// Real and imaginary parts of `Ĥ(u[k], v[k])` as `B×1` columns.
pub fn score_vars(tape: &mut Tape, emb: &EncodedVars, u: &Arc<[usize]>, v: &Arc<[usize]>) -> Result<(Var, Var)> {
    let au = tape.row_gather(emb.amplitude, u.clone())?;
    let av = tape.row_gather(emb.amplitude, v.clone())?;
    let tu = tape.row_gather(emb.phase, u.clone())?;
    let tv = tape.row_gather(emb.phase, v.clone())?;
    let diff = tape.sub(tu, tv)?;
    let angle = tape.scalar_mul(diff, FRAC_PI_2);
    let (cos, sin) = (tape.cos(angle), tape.sin(angle));
    let m = tape.hadamard(au, av)?;
    let re = tape.hadamard(m, cos)?;
    let im = tape.hadamard(m, sin)?;
    Ok((tape.sum_cols(re), tape.sum_cols(im)))
}

/// `B×4` distances of each score to the prototypes, in [`Relation::ALL`] order.
fn prototype_distances(tape: &mut Tape, re: Var, im: Var, distance: Distance) -> Result<Var> {
    let mut cols = Vec::with_capacity(4);
    for r in Relation::ALL {
        let p = r.prototype();
        let dr = tape.add_scalar(re, -p.re);
        let di = tape.add_scalar(im, -p.im);
        let d = match distance {
            Distance::L1 => {
                let (x, y) = (tape.abs(dr), tape.abs(di));
                tape.add(x, y)?
            }
            Distance::L2 => {
                let x = tape.hadamard(dr, dr)?;
                let y = tape.hadamard(di, di)?;
                let s = tape.add(x, y)?;
                tape.sqrt(s)
            }
        };
        cols.push(d);
    }
    tape.concat_cols(&cols)
}

/// Mean of `-log p[k, labels[k]]` given row-wise log-probabilities.
fn mean_nll(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.value(log_probs).shape();
    if labels.len() != rows {
        return Err(DuplexError::shape("nll", format!("{} labels for {rows} rows", labels.len())));
    }
    if rows == 0 {
        return Err(DuplexError::Data("loss over an empty batch".into()));
    }
    let mut pick = Matrix::zeros(rows, cols);
    for (k, &c) in labels.iter().enumerate() {
        if c >= cols {
            return Err(DuplexError::Data(format!("label {c} out of range for {cols} classes")));
        }
        pick.set(k, c, -1.0 / rows as f64);
    }
    let pick = tape.constant(pick);
    let picked = tape.hadamard(log_probs, pick)?;
    Ok(tape.sum(picked))
}

/// Pair indices and relation labels of a batch, ready for the tape.
#[derive(Clone, Debug)]
pub struct BatchIndex {
    pub u: Arc<[usize]>,
    pub v: Arc<[usize]>,
    pub rel: Vec<Relation>,
}

impl From<&SampleBatch> for BatchIndex {
    fn from(b: &SampleBatch) -> Self {
        BatchIndex {
            u: b.sources(),
            v: b.targets(),
            rel: b.relations(),
        }
    }
}

/// Direction-aware NLL, mean over the batch.
pub fn direction_loss(tape: &mut Tape, emb: &EncodedVars, batch: &BatchIndex, distance: Distance) -> Result<Var> {
    let (re, im) = score_vars(tape, emb, &batch.u, &batch.v)?;
    let d = prototype_distances(tape, re, im, distance)?;
    let logits = tape.scalar_mul(d, -1.0);
    let lp = tape.log_softmax_rows(logits);
    let labels: Vec<usize> = batch.rel.iter().map(|r| r.index()).collect();
    mean_nll(tape, lp, &labels)
}

/// Mean BCE of `σ(a_uᵀa_v)` against "connected in either direction".
pub fn connection_loss(tape: &mut Tape, emb: &EncodedVars, batch: &BatchIndex) -> Result<Var> {
    let n = batch.rel.len();
    if n == 0 {
        return Err(DuplexError::Data("loss over an empty batch".into()));
    }
    let au = tape.row_gather(emb.amplitude, batch.u.clone())?;
    let av = tape.row_gather(emb.amplitude, batch.v.clone())?;
    let m = tape.hadamard(au, av)?;
    let s = tape.sum_cols(m);
    let neg_s = tape.scalar_mul(s, -1.0);
    let lp = tape.log_sigmoid(s);
    let ln = tape.log_sigmoid(neg_s);
    let both = tape.concat_cols(&[lp, ln])?;
    let labels: Vec<usize> = batch
        .rel
        .iter()
        .map(|r| if r.is_connected() { 0 } else { 1 })
        .collect();
    mean_nll(tape, both, &labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `λ0·q^k`.
    Literal,
    /// `λ0·(1−q)^k`.
    #[default]
    Complement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub lambda0: f64,
    pub q: f64,
    pub mode: DecayMode,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            lambda0: 0.1,
            q: 1e-4,
            mode: DecayMode::Complement,
        }
    }
}

impl LossSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(DuplexError::config(format!("lambda0 {} must be >= 0", self.lambda0)));
        }
        let ok = match self.mode {
            DecayMode::Complement => (0.0..1.0).contains(&self.q),
            DecayMode::Literal => (0.0..=1.0).contains(&self.q),
        };
        if !ok {
            return Err(DuplexError::config(format!(
                "decay rate q={} out of range for {:?} mode",
                self.q, self.mode
            )));
        }
        Ok(())
    }

    /// Connection-loss weight at epoch `k`; `λ(0) = λ0` in both modes.
    pub fn lambda_at(&self, k: usize) -> Result<f64> {
        self.validate()?;
        if k == 0 {
            return Ok(self.lambda0);
        }
        let base = match self.mode {
            DecayMode::Literal => self.q,
            DecayMode::Complement => 1.0 - self.q,
        };
        Ok(self.lambda0 * base.powf(k as f64))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub direction: Var,
    pub connection: Option<Var>,
    pub lambda: f64,
}

/// `ℒ_d + λ(k)·ℒ_c`; the connection term is skipped when `λ(k) = 0`.
pub fn total_loss(
    tape: &mut Tape,
    emb: &EncodedVars,
    batch: &BatchIndex,
    schedule: &LossSchedule,
    epoch: usize,
    distance: Distance,
) -> Result<LossParts> {
    let lambda = schedule.lambda_at(epoch)?;
    let direction = direction_loss(tape, emb, batch, distance)?;
    if lambda == 0.0 {
        return Ok(LossParts {
            total: direction,
            direction,
            connection: None,
            lambda,
        });
    }
    let connection = connection_loss(tape, emb, batch)?;
    let weighted = tape.scalar_mul(connection, lambda);
    let total = tape.add(direction, weighted)?;
    Ok(LossParts {
        total,
        direction,
        connection: Some(connection),
        lambda,
    })
}

/// Mean softmax cross-entropy of `n×C` logits.
pub fn supervised_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax_rows(logits);
    mean_nll(tape, lp, labels)
}
