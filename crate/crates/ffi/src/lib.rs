//! C ABI over the `resq` library.
//!
//! Models are opaque `ResqModel` handles holding `f32` weights. Every entry
//! point returns a `ResqStatus`; on failure the message is available from
//! `resq_last_error` on the same thread. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use resq::attention::verify::{absorption_suite, escape_suite, reparametrization_suite, symmetry_suite, VerifyDims};
use resq::kv::KvMap;
use resq::model::{checkpoint, count_params, init_params, sequence_losses, ModelConfig, TransformerParams};
use resq::numerics::Tensor;
use resq::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    Numerical = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Verification suite selector for `resq_verify`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResqSuite {
    Reparametrization = 0,
    Absorption = 1,
    Symmetry = 2,
    Escape = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResqParamCount {
    pub total: u64,
    pub embedding: u64,
    pub non_embedding: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResqVerifyReport {
    pub trials: u32,
    pub passing: u32,
    pub required: u32,
    pub max_deviation: f64,
    pub min_deviation: f64,
    pub passed: bool,
}

/// Opaque model handle.
pub struct ResqModel {
    cfg: ModelConfig,
    params: TransformerParams<Tensor<f32>>,
}

struct Failure(ResqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ShapeMismatch { .. } => ResqStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::TargetOutOfRange { .. } | Error::NonScalarLoss(_) => {
                ResqStatus::InvalidArgument
            }
            Error::Singular { .. } | Error::NonFiniteGradient => ResqStatus::Numerical,
            Error::Config(_) => ResqStatus::Config,
            Error::Format(_) => ResqStatus::Format,
            Error::Io(_) => ResqStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn fail<T>(code: ResqStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(code, msg.into()))
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ResqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ResqStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_last_error(&msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            ResqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ResqStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(ResqStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(ResqStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .map_or_else(|| fail(ResqStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn tokens_arg(p: *const u32, n: usize, what: &str) -> Result<Vec<usize>, Failure> {
    if n == 0 {
        return fail(ResqStatus::InvalidArgument, format!("{what} is empty"));
    }
    if p.is_null() {
        return fail(ResqStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, n).iter().map(|&t| t as usize).collect())
}

fn parse_model_config(text: &str) -> Result<ModelConfig, Failure> {
    let m = KvMap::parse(text)?;
    m.check_known(ModelConfig::keys())?;
    let cfg = ModelConfig::from_kv_over(&ModelConfig::default(), &m)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn resq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn resq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New model from `key = value` config text (unset keys take the toy
/// defaults; null means all defaults), initialized from `seed`.
#[no_mangle]
pub unsafe extern "C" fn resq_model_new(config_text: *const c_char, seed: u64, out: *mut *mut ResqModel) -> ResqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = if config_text.is_null() {
            ""
        } else {
            str_arg(config_text, "config_text")?
        };
        let cfg = parse_model_config(text)?;
        let params = init_params::<f32>(&cfg, seed)?;
        *out = Box::into_raw(Box::new(ResqModel { cfg, params }));
        Ok(())
    })
}

/// Loads a checkpoint. `f64` checkpoints are narrowed to `f32`.
#[no_mangle]
pub unsafe extern "C" fn resq_model_load(path: *const c_char, out: *mut *mut ResqModel) -> ResqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let bytes = std::fs::read(Path::new(str_arg(path, "path")?)).map_err(Error::from)?;
        let (cfg, params) = match checkpoint::decode::<f32>(&bytes) {
            Ok(v) => v,
            Err(e32) => match checkpoint::decode::<f64>(&bytes) {
                Ok((cfg, p)) => (cfg, p.map(|_, t| t.cast::<f32>())),
                Err(_) => return Err(e32.into()),
            },
        };
        *out = Box::into_raw(Box::new(ResqModel { cfg, params }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn resq_model_save(model: *const ResqModel, path: *const c_char) -> ResqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let bytes = checkpoint::encode(&m.cfg, &m.params)?;
        std::fs::write(str_arg(path, "path")?, bytes).map_err(Error::from)?;
        Ok(())
    })
}

/// Frees a handle from `resq_model_new` or `resq_model_load`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn resq_model_free(model: *mut ResqModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

#[no_mangle]
pub unsafe extern "C" fn resq_model_vocab_size(model: *const ResqModel, out: *mut usize) -> ResqStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.cfg.vocab_size;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn resq_model_context_len(model: *const ResqModel, out: *mut usize) -> ResqStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.cfg.context_len;
        Ok(())
    })
}

/// Writes the model config as NUL-terminated text into `buf`. `needed`
/// receives the required size including the NUL; with a short `buf` the call
/// fails with `BUFFER_TOO_SMALL` and writes nothing.
#[no_mangle]
pub unsafe extern "C" fn resq_model_config(
    model: *const ResqModel,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> ResqStatus {
    guard(|| {
        let text = ref_arg(model, "model")?.cfg.to_kv().to_text();
        let len = text.len() + 1;
        if !needed.is_null() {
            *needed = len;
        }
        if cap < len {
            return fail(
                ResqStatus::BufferTooSmall,
                format!("config needs {len} bytes, buffer has {cap}"),
            );
        }
        if buf.is_null() {
            return fail(ResqStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Logits of one sequence of `n` tokens, written row-major as `n × vocab`
/// floats. `cap` is the length of `logits` in floats.
#[no_mangle]
pub unsafe extern "C" fn resq_model_forward(
    model: *const ResqModel,
    tokens: *const u32,
    n: usize,
    logits: *mut f32,
    cap: usize,
) -> ResqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let toks = tokens_arg(tokens, n, "tokens")?;
        let need = n * m.cfg.vocab_size;
        if cap < need {
            return fail(
                ResqStatus::BufferTooSmall,
                format!("logits need {need} floats, buffer has {cap}"),
            );
        }
        if logits.is_null() {
            return fail(ResqStatus::NullPointer, "logits is null");
        }
        let out = resq::model::forward(&m.params, &toks, &m.cfg)?;
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, need);
        Ok(())
    })
}

/// Mean next-token cross-entropy (nats) of `targets` given `inputs`.
#[no_mangle]
pub unsafe extern "C" fn resq_model_loss(
    model: *const ResqModel,
    inputs: *const u32,
    targets: *const u32,
    n: usize,
    out: *mut f64,
) -> ResqStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let x = tokens_arg(inputs, n, "inputs")?;
        let y = tokens_arg(targets, n, "targets")?;
        *out = sequence_losses(&m.params, &x, &y, 1, &m.cfg)?[0];
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn resq_model_param_count(model: *const ResqModel, out: *mut ResqParamCount) -> ResqStatus {
    guard(|| {
        let c = count_params(&ref_arg(model, "model")?.cfg)?;
        *out_arg(out, "out")? = ResqParamCount {
            total: c.total,
            embedding: c.embedding,
            non_embedding: c.non_embedding,
        };
        Ok(())
    })
}

/// Parameter counts of a config given as text, without building the model.
#[no_mangle]
pub unsafe extern "C" fn resq_count_params(config_text: *const c_char, out: *mut ResqParamCount) -> ResqStatus {
    guard(|| {
        let cfg = parse_model_config(str_arg(config_text, "config_text")?)?;
        let c = count_params(&cfg)?;
        *out_arg(out, "out")? = ResqParamCount {
            total: c.total,
            embedding: c.embedding,
            non_embedding: c.non_embedding,
        };
        Ok(())
    })
}

/// Parameters of one residual bottleneck query map at width `d`.
#[no_mangle]
pub unsafe extern "C" fn resq_ftheta_param_count(d: u64, out: *mut u64) -> ResqStatus {
    guard(|| {
        *out_arg(out, "out")? = resq::attention::ftheta_param_count(d)?;
        Ok(())
    })
}

/// `(baseline_loss - loss) / baseline_loss`.
#[no_mangle]
pub unsafe extern "C" fn resq_relative_improvement(baseline_loss: f64, loss: f64, out: *mut f64) -> ResqStatus {
    guard(|| {
        *out_arg(out, "out")? = resq::model::relative_improvement(baseline_loss, loss)?;
        Ok(())
    })
}

/// Runs one attention verification suite, `suite` being a `ResqSuite` value.
/// A suite that runs but misses its bound still returns `OK`, with
/// `passed = false` in the report.
#[no_mangle]
pub unsafe extern "C" fn resq_verify(
    suite: u32,
    seed: u64,
    trials: u32,
    d: u32,
    n_head: u32,
    n: u32,
    out: *mut ResqVerifyReport,
) -> ResqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if trials == 0 {
            return fail(ResqStatus::InvalidArgument, "trials must be positive");
        }
        let dims = VerifyDims {
            d: d as usize,
            n_head: n_head as usize,
            n: n as usize,
        };
        let t = trials as usize;
        let r = match suite {
            s if s == ResqSuite::Reparametrization as u32 => reparametrization_suite(seed, t, dims)?,
            s if s == ResqSuite::Absorption as u32 => absorption_suite(seed, t, dims)?,
            s if s == ResqSuite::Symmetry as u32 => symmetry_suite(seed, t, dims)?,
            s if s == ResqSuite::Escape as u32 => escape_suite(seed, t, dims)?,
            s => return fail(ResqStatus::InvalidArgument, format!("unknown suite {s}")),
        };
        *out = ResqVerifyReport {
            trials: r.trials as u32,
            passing: r.passing as u32,
            required: r.required as u32,
            max_deviation: r.max_deviation,
            min_deviation: r.min_deviation,
            passed: r.passed(),
        };
        Ok(())
    })
}
