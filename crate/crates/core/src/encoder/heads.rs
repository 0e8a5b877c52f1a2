use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncodedVars;
use crate::derive_seed;
use crate::error::{DuplexError, Result};
use crate::tensor::{BoundParams, Matrix, ParamStore, Tape, Var};

pub const EDGE_W: &str = "head.edge.w";
pub const EDGE_B: &str = "head.edge.b";
pub const NODE_W: &str = "head.node.w";
pub const NODE_B: &str = "head.node.b";

fn glorot(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

/// Linear map `[a_u; θ_u; a_v; θ_v] (4d) → 4` relation logits.
pub fn init_edge_head(store: &mut ParamStore, d: usize, seed: u64) {
    store.insert(EDGE_W, glorot(4 * d, 4, derive_seed(seed, &[0x6564])));
    store.insert(EDGE_B, Matrix::zeros(1, 4));
}

/// Linear map `[a_u; θ_u] (2d) → C` class logits.
pub fn init_node_head(store: &mut ParamStore, d: usize, classes: usize, seed: u64) -> Result<()> {
    if classes < 2 {
        return Err(DuplexError::config(format!("node head needs >= 2 classes, got {classes}")));
    }
    store.insert(NODE_W, glorot(2 * d, classes, derive_seed(seed, &[0x6e64])));
    store.insert(NODE_B, Matrix::zeros(1, classes));
    Ok(())
}

/// Relation logits (`|pairs|×4`) for the pairs `(u[k], v[k])`.
pub fn edge_logits(
    tape: &mut Tape,
    bound: &BoundParams,
    emb: &EncodedVars,
    u: Arc<[usize]>,
    v: Arc<[usize]>,
) -> Result<Var> {
    let au = tape.row_gather(emb.amplitude, u.clone())?;
    let tu = tape.row_gather(emb.phase, u)?;
    let av = tape.row_gather(emb.amplitude, v.clone())?;
    let tv = tape.row_gather(emb.phase, v)?;
    let x = tape.concat_cols(&[au, tu, av, tv])?;
    let z = tape.matmul(x, bound.get(EDGE_W)?)?;
    tape.add_row(z, bound.get(EDGE_B)?)
}

/// Per-node class logits (`n×C`).
pub fn node_logits(tape: &mut Tape, bound: &BoundParams, emb: &EncodedVars) -> Result<Var> {
    let x = tape.concat_cols(&[emb.amplitude, emb.phase])?;
    let z = tape.matmul(x, bound.get(NODE_W)?)?;
    tape.add_row(z, bound.get(NODE_B)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(tape: &mut Tape, a: Vec<Vec<f64>>, t: Vec<Vec<f64>>) -> EncodedVars {
        EncodedVars {
            amplitude: tape.param(Matrix::from_rows(&a).unwrap()),
            phase: tape.param(Matrix::from_rows(&t).unwrap()),
        }
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut store = ParamStore::new();
        store.insert(EDGE_W, Matrix::zeros(8, 4));
        store.insert(EDGE_B, Matrix::zeros(1, 4));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let e = emb(&mut tape, vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let z = edge_logits(&mut tape, &bound, &e, Arc::from([0usize]), Arc::from([1usize])).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn one_hot_head_and_asymmetry() {
        // d = 1; class 2 reads a_u
        let mut w = Matrix::zeros(4, 4);
        w.set(0, 2, 1.0);
        let mut store = ParamStore::new();
        store.insert(EDGE_W, w);
        store.insert(EDGE_B, Matrix::zeros(1, 4));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let e = emb(&mut tape, vec![vec![0.7], vec![-1.3]], vec![vec![0.1], vec![0.2]]);
        let uv = edge_logits(&mut tape, &bound, &e, Arc::from([0usize]), Arc::from([1usize])).unwrap();
        let vu = edge_logits(&mut tape, &bound, &e, Arc::from([1usize]), Arc::from([0usize])).unwrap();
        assert_eq!(tape.value(uv).data(), &[0.0, 0.0, 0.7, 0.0]);
        assert_ne!(tape.value(uv), tape.value(vu));
    }

    #[test]
    fn identity_node_head_returns_concat() {
        let mut store = ParamStore::new();
        store.insert(NODE_W, Matrix::identity(4));
        store.insert(NODE_B, Matrix::zeros(1, 4));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let e = emb(&mut tape, vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]]);
        let z = node_logits(&mut tape, &bound, &e).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn node_ce_gradient_reaches_both_parts() {
        let mut store = ParamStore::new();
        init_node_head(&mut store, 3, 2, 4).unwrap();
        let a = vec![vec![0.3, -0.2, 0.9]];
        let t = vec![vec![1.1, 0.4, -0.6]];
        let loss_at = |a: &[Vec<f64>], t: &[Vec<f64>], grads: bool| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let e = emb(&mut tape, a.to_vec(), t.to_vec());
            let z = node_logits(&mut tape, &bound, &e).unwrap();
            let lp = tape.log_softmax_rows(z);
            let pick = tape.constant(Matrix::from_rows(&[vec![0.0, -1.0]]).unwrap());
            let l = tape.hadamard(lp, pick).unwrap();
            let l = tape.sum(l);
            let v = tape.scalar_value(l);
            if grads {
                tape.backward(l).unwrap();
                (v, tape.grad(e.amplitude).cloned(), tape.grad(e.phase).cloned())
            } else {
                (v, None, None)
            }
        };
        let (_, ga, gt) = loss_at(&a, &t, true);
        let (ga, gt) = (ga.unwrap(), gt.unwrap());
        assert!(ga.data().iter().any(|g| g.abs() > 1e-6));
        assert!(gt.data().iter().any(|g| g.abs() > 1e-6));
        let eps = 1e-5;
        let mut ap = a.clone();
        ap[0][1] += eps;
        let mut am = a.clone();
        am[0][1] -= eps;
        let fd = (loss_at(&ap, &t, false).0 - loss_at(&am, &t, false).0) / (2.0 * eps);
        assert!((fd - ga.get(0, 1)).abs() < 1e-8);
        assert!(init_node_head(&mut store, 3, 1, 0).is_err());
    }
}
