//! C interface over opaque dataset and model handles.
//!
//! Every fallible call returns a [`PgStatus`]. On failure the message is
//! kept per thread and read with [`pg_last_error`]. Panics are caught at the
//! boundary and reported as [`PgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use protoglyph::autodiff::ParameterStore;
use protoglyph::episodes::{ClassSplit, EpisodeSpec};
use protoglyph::eval::{embed_plain, evaluate};
use protoglyph::graph::{generate_triangles_dataset, load_tu_dataset, Graph, GraphDataset};
use protoglyph::model::ModelConfig;
use protoglyph::trainer::Checkpoint;
use protoglyph::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Split = 5,
    Capacity = 6,
    MissingFile = 7,
    Checkpoint = 8,
    NumericFault = 9,
    Verifier = 10,
    Io = 11,
    Panic = 12,
}

/// Opaque graph dataset.
pub struct PgDataset {
    inner: GraphDataset,
}

/// Opaque trained model: architecture plus parameters.
pub struct PgModel {
    config: ModelConfig,
    params: ParameterStore,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PgEvalSummary {
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub std: f64,
    pub ci95_halfwidth: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } | Error::Contract(_) => PgStatus::InvalidArgument,
            Error::NumericFault(_) => PgStatus::NumericFault,
            Error::MissingFile(_) => PgStatus::MissingFile,
            Error::Format { .. } | Error::Json(_) => PgStatus::Data,
            Error::Config(_) => PgStatus::Config,
            Error::Split(_) => PgStatus::Split,
            Error::Capacity(_) => PgStatus::Capacity,
            Error::Verifier(_) => PgStatus::Verifier,
            Error::Checkpoint(_) => PgStatus::Checkpoint,
            Error::Io { .. } => PgStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PgStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(PgStatus::InvalidArgument, msg)
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn pg_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Generates the synthetic triangle-count dataset.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_generate_triangles(
    n_classes: usize,
    samples_per_class: usize,
    seed: u64,
    out: *mut *mut PgDataset,
) -> PgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = generate_triangles_dataset(n_classes, samples_per_class, seed)?;
        out.write(Box::into_raw(Box::new(PgDataset { inner })));
        Ok(())
    })
}

/// Loads `<root>/<name>_*.txt` in TU format.
///
/// # Safety
/// `root` and `name` must be NUL-terminated strings; `out` must be valid
/// for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_load_tu(
    root: *const c_char,
    name: *const c_char,
    out: *mut *mut PgDataset,
) -> PgStatus {
    guard(|| {
        let root = text(root, "root")?;
        let name = text(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_tu_dataset(Path::new(root), name)?;
        out.write(Box::into_raw(Box::new(PgDataset { inner })));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library or be null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_len(dataset: *const PgDataset, out: *mut usize) -> PgStatus {
    guard(|| write_out(out, deref(dataset, "dataset")?.inner.len(), "out"))
}

/// # Safety
/// As [`pg_dataset_len`].
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_n_classes(dataset: *const PgDataset, out: *mut usize) -> PgStatus {
    guard(|| write_out(out, deref(dataset, "dataset")?.inner.n_classes(), "out"))
}

/// Width of the node feature rows.
///
/// # Safety
/// As [`pg_dataset_len`].
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_feature_dim(dataset: *const PgDataset, out: *mut usize) -> PgStatus {
    guard(|| write_out(out, deref(dataset, "dataset")?.inner.d_in, "out"))
}

/// Original class label of graph `index`.
///
/// # Safety
/// As [`pg_dataset_len`].
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_graph_label(dataset: *const PgDataset, index: usize, out: *mut i64) -> PgStatus {
    guard(|| {
        let ds = &deref(dataset, "dataset")?.inner;
        let g = ds
            .graphs
            .get(index)
            .ok_or_else(|| invalid(format!("graph index {index} out of range for {} graphs", ds.len())))?;
        write_out(out, ds.original_of(g.label), "out")
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pg_dataset_free(dataset: *mut PgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn pg_model_load(path: *const c_char, out: *mut *mut PgModel) -> PgStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(path))?;
        let model = PgModel {
            config: ck.model,
            params: ck.params()?,
        };
        out.write(Box::into_raw(Box::new(model)));
        Ok(())
    })
}

/// Width of one graph embedding.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_model_output_dim(model: *const PgModel, out: *mut usize) -> PgStatus {
    guard(|| write_out(out, deref(model, "model")?.config.embedder.output_dim(), "out"))
}

/// Node feature width the model expects.
///
/// # Safety
/// As [`pg_model_output_dim`].
#[no_mangle]
pub unsafe extern "C" fn pg_model_input_dim(model: *const PgModel, out: *mut usize) -> PgStatus {
    guard(|| write_out(out, deref(model, "model")?.config.d_in, "out"))
}

fn check_width(model: &PgModel, ds: &GraphDataset) -> Result<(), Failure> {
    if model.config.d_in != ds.d_in {
        return Err(invalid(format!(
            "model expects {} node features, dataset has {}",
            model.config.d_in, ds.d_in
        )));
    }
    Ok(())
}

/// Writes unconditioned embeddings of `n` graphs, row-major, into `out`,
/// which must hold at least `n · output_dim` values.
///
/// # Safety
/// Handles must come from this library; `indices` must point to `n`
/// values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pg_model_embed(
    model: *const PgModel,
    dataset: *const PgDataset,
    indices: *const usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> PgStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let ds = &deref(dataset, "dataset")?.inner;
        check_width(model, ds)?;
        if n == 0 {
            return Ok(());
        }
        if indices.is_null() {
            return Err(null("indices"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let d = model.config.embedder.output_dim();
        if out_len < n * d {
            return Err(invalid(format!("output holds {out_len} values, need {}", n * d)));
        }
        let idx = std::slice::from_raw_parts(indices, n);
        let graphs = idx
            .iter()
            .map(|&i| {
                ds.graphs
                    .get(i)
                    .ok_or_else(|| invalid(format!("graph index {i} out of range for {} graphs", ds.len())))
            })
            .collect::<Result<Vec<&Graph>, Failure>>()?;
        let rows = embed_plain(&model.params, &model.config, &graphs)?;
        let dst = std::slice::from_raw_parts_mut(out, n * d);
        for (chunk, row) in dst.chunks_mut(d).zip(&rows) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Accuracy over `n_episodes` N-way K-shot episodes drawn from the listed
/// classes (original labels).
///
/// # Safety
/// Handles must come from this library; `classes` must point to
/// `n_classes` values; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pg_model_evaluate(
    model: *const PgModel,
    dataset: *const PgDataset,
    classes: *const i64,
    n_classes: usize,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    n_episodes: usize,
    seed: u64,
    out: *mut PgEvalSummary,
) -> PgStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let ds = &deref(dataset, "dataset")?.inner;
        check_width(model, ds)?;
        if classes.is_null() {
            return Err(null("classes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let classes = std::slice::from_raw_parts(classes, n_classes);
        let spec = EpisodeSpec::new(n_way, k_shot, n_query, seed)?;
        let split = ClassSplit::novel_only(ds, classes, &spec)?;
        let r = evaluate(&model.params, &model.config, ds, &split, &spec, n_episodes, 1)?;
        out.write(PgEvalSummary {
            n_episodes: r.n_episodes,
            mean_accuracy: r.mean_accuracy,
            std: r.std,
            ci95_halfwidth: r.ci95_halfwidth,
        });
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pg_model_free(model: *mut PgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
