//! C ABI over the `duplex` library.
//!
//! Objects cross the boundary as opaque handles (`DuplexGraph`,
//! `DuplexEmbedding`) that the caller releases with the matching `_free`.
//! Every fallible call returns a [`DuplexStatus`]; on failure
//! [`duplex_last_error_message`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use duplex::cli::{read_embedding_csv, write_embedding_csv, RunConfig};
use duplex::encoder::{init_embeddings, ComplexEmbedding, Encoder, InputMode};
use duplex::graph::{load_edge_list, DiGraph, LinkSplit, Relation};
use duplex::objective::{direction_probs, hermitian_score, Distance};
use duplex::tensor::Matrix;
use duplex::trainer::{train, TrainConfig, TrainTask};
use duplex::DuplexError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DuplexStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Parse = 3,
    Bounds = 4,
    Shape = 5,
    Data = 6,
    NonFinite = 7,
    Checkpoint = 8,
    Autodiff = 9,
    Io = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

/// Prototype distance used by the relation decoder.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DuplexDistance {
    L1 = 0,
    L2 = 1,
}

/// A directed graph with dense node ids `0..n`.
pub struct DuplexGraph {
    inner: DiGraph,
}

/// Amplitude and phase matrices, one row per node.
pub struct DuplexEmbedding {
    inner: ComplexEmbedding,
}

struct Failure(DuplexStatus, String);

impl From<DuplexError> for Failure {
    fn from(e: DuplexError) -> Self {
        let status = match &e {
            DuplexError::Parse { .. } => DuplexStatus::Parse,
            DuplexError::Bounds { .. } => DuplexStatus::Bounds,
            DuplexError::Config(_) | DuplexError::Json(_) => DuplexStatus::Config,
            DuplexError::Shape { .. } => DuplexStatus::Shape,
            DuplexError::Data(_) => DuplexStatus::Data,
            DuplexError::NonFinite { .. } => DuplexStatus::NonFinite,
            DuplexError::Checkpoint(_) => DuplexStatus::Checkpoint,
            DuplexError::Autodiff(_) => DuplexStatus::Autodiff,
            DuplexError::Io { .. } => DuplexStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DuplexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DuplexStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            DuplexStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DuplexStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(DuplexStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    match len {
        0 => Ok(&[]),
        _ if p.is_null() => Err(null(what)),
        _ => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn node_id(x: u64) -> Result<usize, Failure> {
    usize::try_from(x).map_err(|_| Failure(DuplexStatus::Bounds, format!("node id {x} does not fit in usize")))
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn duplex_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn duplex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a graph on `num_nodes` nodes from parallel `src`/`dst` arrays.
/// Self-loops and duplicate edges are rejected.
///
/// # Safety
/// `src` and `dst` must point to `num_edges` readable values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_from_edges(
    num_nodes: usize,
    src: *const u64,
    dst: *const u64,
    num_edges: usize,
    out: *mut *mut DuplexGraph,
) -> DuplexStatus {
    guard(|| {
        let (s, d) = (slice(src, num_edges, "src")?, slice(dst, num_edges, "dst")?);
        let edges = s
            .iter()
            .zip(d)
            .map(|(&u, &v)| Ok((node_id(u)?, node_id(v)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let inner = DiGraph::from_edges(num_nodes, edges)?;
        store(out, DuplexGraph { inner })
    })
}

/// Reads a whitespace-separated edge list. A negative `num_nodes` infers the
/// node count and remaps ids to `0..n` in ascending order of original id.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_load_edge_list(
    path: *const c_char,
    num_nodes: i64,
    out: *mut *mut DuplexGraph,
) -> DuplexStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let n = usize::try_from(num_nodes).ok();
        let inner = load_edge_list(path, n)?;
        store(out, DuplexGraph { inner })
    })
}

/// Node count, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_num_nodes(graph: *const DuplexGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.num_nodes())
}

/// Edge count, or 0 for NULL.
///
/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_num_edges(graph: *const DuplexGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.num_edges())
}

/// Original id of dense node `u` (equal to `u` unless ids were remapped).
///
/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_original_id(graph: *const DuplexGraph, u: u64, out: *mut u64) -> DuplexStatus {
    guard(|| {
        let g = &as_ref(graph, "graph")?.inner;
        let u = node_id(u)?;
        if u >= g.num_nodes() {
            return Err(DuplexError::Bounds { id: u, num_nodes: g.num_nodes() }.into());
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = g.original_id(u);
        Ok(())
    })
}

/// # Safety
/// `graph` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn duplex_graph_free(graph: *mut DuplexGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Trains the encoder self-supervised on the whole graph and returns the
/// node embeddings. `config_json` uses the CLI's dotted keys
/// (`{"train.max_epochs": 200, "encoder.dims": [16, 16]}`); NULL means
/// defaults. `seed` overrides any seed in the config.
///
/// # Safety
/// `graph` must be a live handle, `config_json` NULL or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_train_embedding(
    graph: *const DuplexGraph,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut DuplexEmbedding,
) -> DuplexStatus {
    guard(|| {
        let g = &as_ref(graph, "graph")?.inner;
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(c_str(config_json, "config_json")?)?
        };
        if cfg.encoder.input != InputMode::Random {
            return Err(Failure(DuplexStatus::Config, "graphs built through the C API carry no features; use input `random`".into()));
        }
        cfg.encoder.validate()?;
        let tc = TrainConfig { seed, ..cfg.train };
        tc.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), cfg.encoder.dims[0])?;
        let input = init_embeddings(g, encoder.input_dim, InputMode::Random, seed)?;
        let split = LinkSplit::whole_graph(g);
        let trained = train(&encoder, TrainTask::Link(&split), &input, &tc)?;
        store(out, DuplexEmbedding { inner: trained.embedding })
    })
}

/// Wraps caller-owned row-major `num_nodes × dim` amplitude and phase arrays.
/// The data is copied.
///
/// # Safety
/// Both arrays must hold `num_nodes * dim` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_from_arrays(
    num_nodes: usize,
    dim: usize,
    amplitude: *const f64,
    phase: *const f64,
    out: *mut *mut DuplexEmbedding,
) -> DuplexStatus {
    guard(|| {
        let len = num_nodes
            .checked_mul(dim)
            .ok_or_else(|| Failure(DuplexStatus::Shape, "num_nodes * dim overflows".into()))?;
        let a = Matrix::from_vec(num_nodes, dim, slice(amplitude, len, "amplitude")?.to_vec())?;
        let t = Matrix::from_vec(num_nodes, dim, slice(phase, len, "phase")?.to_vec())?;
        store(out, DuplexEmbedding { inner: ComplexEmbedding::new(a, t)? })
    })
}

/// Reads an `id,a_1..a_d,theta_1..theta_d` CSV as written by `duplex export`.
/// Rows keep file order.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_read_csv(path: *const c_char, out: *mut *mut DuplexEmbedding) -> DuplexStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let (_, inner) = read_embedding_csv(&path)?;
        store(out, DuplexEmbedding { inner })
    })
}

/// Writes the embedding as CSV keyed by the graph's original ids.
///
/// # Safety
/// Handles must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_write_csv(
    embedding: *const DuplexEmbedding,
    graph: *const DuplexGraph,
    path: *const c_char,
) -> DuplexStatus {
    guard(|| {
        let e = &as_ref(embedding, "embedding")?.inner;
        let g = &as_ref(graph, "graph")?.inner;
        if g.num_nodes() != e.num_nodes() {
            return Err(Failure(
                DuplexStatus::Shape,
                format!("graph has {} nodes, embedding {}", g.num_nodes(), e.num_nodes()),
            ));
        }
        write_embedding_csv(&PathBuf::from(c_str(path, "path")?), g, e)?;
        Ok(())
    })
}

/// Row count, or 0 for NULL.
///
/// # Safety
/// `embedding` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_num_nodes(embedding: *const DuplexEmbedding) -> usize {
    embedding.as_ref().map_or(0, |e| e.inner.num_nodes())
}

/// Columns per matrix, or 0 for NULL.
///
/// # Safety
/// `embedding` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_dim(embedding: *const DuplexEmbedding) -> usize {
    embedding.as_ref().map_or(0, |e| e.inner.dim())
}

/// Copies amplitude and phase into row-major buffers of `len` doubles each;
/// `len` must equal `num_nodes * dim`. Either buffer may be NULL to skip it.
///
/// # Safety
/// Non-NULL buffers must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_copy(
    embedding: *const DuplexEmbedding,
    amplitude: *mut f64,
    phase: *mut f64,
    len: usize,
) -> DuplexStatus {
    guard(|| {
        let e = &as_ref(embedding, "embedding")?.inner;
        let (a, t) = (e.amplitude.data(), e.phase.data());
        if len != a.len() {
            return Err(Failure(DuplexStatus::Shape, format!("buffer holds {len} values, need {}", a.len())));
        }
        for (src, dst) in [(a, amplitude), (t, phase)] {
            if !dst.is_null() {
                std::slice::from_raw_parts_mut(dst, len).copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Complex score of the ordered pair `(u, v)`.
///
/// # Safety
/// `embedding` must be live; `re` and `im` writable.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_score(
    embedding: *const DuplexEmbedding,
    u: u64,
    v: u64,
    re: *mut f64,
    im: *mut f64,
) -> DuplexStatus {
    guard(|| {
        let e = &as_ref(embedding, "embedding")?.inner;
        let s = hermitian_score(e, node_id(u)?, node_id(v)?)?;
        let (re, im) = (re.as_mut().ok_or_else(|| null("re"))?, im.as_mut().ok_or_else(|| null("im"))?);
        (*re, *im) = (s.re, s.im);
        Ok(())
    })
}

/// Probabilities of forward, reverse, bidirectional and no edge for `(u, v)`,
/// written to `probs[0..4]` in that order.
///
/// # Safety
/// `embedding` must be live; `probs` writable for 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_relation_probs(
    embedding: *const DuplexEmbedding,
    u: u64,
    v: u64,
    distance: DuplexDistance,
    probs: *mut f64,
) -> DuplexStatus {
    guard(|| {
        let e = &as_ref(embedding, "embedding")?.inner;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let distance = match distance {
            DuplexDistance::L1 => Distance::L1,
            DuplexDistance::L2 => Distance::L2,
        };
        let p = direction_probs(hermitian_score(e, node_id(u)?, node_id(v)?)?, distance, &Relation::ALL)?;
        std::slice::from_raw_parts_mut(probs, 4).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `embedding` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn duplex_embedding_free(embedding: *mut DuplexEmbedding) {
    if !embedding.is_null() {
        drop(Box::from_raw(embedding));
    }
}
