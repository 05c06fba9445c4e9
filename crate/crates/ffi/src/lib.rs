//! C ABI over `pcrl-core`.
//!
//! Every function returns a [`PcrlStatus`]; on failure a message is kept per
//! thread and read back with [`pcrl_last_error`]. Handles are opaque and must
//! be released with their `_free` function. Strings returned to the caller
//! are owned by the caller and released with [`pcrl_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pcrl_core::clinic::{generate_dataset, DataError, Dataset, Split, ENTITY_NAMES};
use pcrl_core::clues::{build_gallery, write_gallery, FilterConfig, ProposalConfig};
use pcrl_core::losses::{dice_loss, info_nce, DenominatorMode, LossConfig, LossError};
use pcrl_core::metrics::{score_corpus, MetricError, Tokenizer};
use pcrl_core::model::{load_checkpoint, ModelError, ModelState, SamplingConfig};
use pcrl_core::raster::Mask;
use pcrl_core::tensor::{Tape, Tensor};
use pcrl_core::trainer::{fit, TrainConfig, TrainError};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcrlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    Panic = 5,
}

/// Denominator of the contrastive loss.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcrlDenominator {
    /// Log-sum-exp over all columns, positive included.
    Standard = 0,
    /// Log-sum-exp over the off-diagonal columns only.
    Paper = 1,
}

/// Corpus-level report metrics, all in [0, 1] except `cider_d` in [0, 10].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PcrlMetrics {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub meteor_exact: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub clinical_precision: f64,
    pub clinical_recall: f64,
    pub clinical_f1: f64,
}

/// Opened synthetic corpus.
pub struct PcrlDataset(Dataset);

/// Trained model held in 32-bit precision.
pub struct PcrlModel(ModelState<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(PcrlStatus, String);

impl Fail {
    fn invalid(m: impl Into<String>) -> Self {
        Fail(PcrlStatus::InvalidArgument, m.into())
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        let status = if e.is_numeric() {
            PcrlStatus::Numeric
        } else if matches!(e, TrainError::Config(_)) {
            PcrlStatus::InvalidArgument
        } else {
            PcrlStatus::Data
        };
        Fail(status, e.to_string())
    }
}

macro_rules! via_train_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Fail {
            fn from(e: $t) -> Self {
                TrainError::from(e).into()
            }
        }
    )*};
}
via_train_error!(DataError, ModelError, LossError, MetricError);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PcrlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PcrlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(PcrlStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(PcrlStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(PcrlStatus::NullArgument, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(PcrlStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn strings_arg(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Fail> {
    slice_arg(p, n, what)?
        .iter()
        .map(|&s| str_arg(s, what).map(str::to_owned))
        .collect()
}

fn split_of(code: u32) -> Result<Split, Fail> {
    match code {
        0 => Ok(Split::Train),
        1 => Ok(Split::Val),
        2 => Ok(Split::Test),
        other => Err(Fail::invalid(format!("unknown split {other}"))),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn pcrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pcrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes a corpus of `n` samples (split 7:1:2) under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn pcrl_dataset_generate(
    n: usize,
    seed: u64,
    out_dir: *const c_char,
) -> PcrlStatus {
    guard(|| {
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        generate_dataset(n, seed, &out)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_dataset_open(
    root: *const c_char,
    out: *mut *mut PcrlDataset,
) -> PcrlStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let ds = Dataset::open(&PathBuf::from(str_arg(root, "root")?))?;
        *slot = Box::into_raw(Box::new(PcrlDataset(ds)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_dataset_free(ds: *mut PcrlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples in a split (0 train, 1 val, 2 test).
#[no_mangle]
pub unsafe extern "C" fn pcrl_dataset_split_len(
    ds: *const PcrlDataset,
    split: u32,
    out: *mut usize,
) -> PcrlStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let slot = out_arg(out, "out")?;
        *slot = ds.0.manifest.entries(split_of(split)?).count();
        Ok(())
    })
}

/// Builds and writes `<sample_id>.pcgl` galleries for every sample with the
/// default proposal and filter settings; stores the candidate total.
#[no_mangle]
pub unsafe extern "C" fn pcrl_gallery_build(
    ds: *const PcrlDataset,
    out_dir: *const c_char,
    candidates: *mut usize,
) -> PcrlStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Fail(PcrlStatus::Data, format!("{}: {e}", dir.display())))?;
        let mut total = 0;
        for entry in &ds.manifest.samples {
            let s = ds.load(&entry.sample_id)?;
            let g = build_gallery(&s, &ProposalConfig::default(), &FilterConfig::default());
            total += g.candidates.len();
            write_gallery(&dir.join(format!("{}.pcgl", s.sample_id)), &g)
                .map_err(TrainError::from)?;
        }
        if let Some(c) = candidates.as_mut() {
            *c = total;
        }
        Ok(())
    })
}

/// Trains per a `key = value` config file.
#[no_mangle]
pub unsafe extern "C" fn pcrl_train(config_path: *const c_char) -> PcrlStatus {
    guard(|| {
        let cfg = TrainConfig::from_file(&PathBuf::from(str_arg(config_path, "config_path")?))?;
        fit(&cfg)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_model_load(
    path: *const c_char,
    out: *mut *mut PcrlModel,
) -> PcrlStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let m = load_checkpoint::<f32>(&PathBuf::from(str_arg(path, "path")?))?;
        *slot = Box::into_raw(Box::new(PcrlModel(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_model_free(model: *mut PcrlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn pcrl_model_parameter_count(
    model: *const PcrlModel,
    out: *mut usize,
) -> PcrlStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.0.parameter_count();
        Ok(())
    })
}

/// Generates a report for one sample of `ds` by nucleus sampling; `greedy`
/// nonzero selects argmax decoding. The string is released with
/// [`pcrl_string_free`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pcrl_model_generate(
    model: *const PcrlModel,
    ds: *const PcrlDataset,
    sample_id: *const c_char,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    greedy: i32,
    seed: u64,
    out: *mut *mut c_char,
) -> PcrlStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(ds, "dataset")?.0;
        let slot = out_arg(out, "out")?;
        let cfg = SamplingConfig {
            temperature,
            top_p,
            max_len,
            greedy: greedy != 0,
            seed,
        };
        cfg.validate().map_err(|e| Fail::invalid(e.to_string()))?;
        let s = ds.load(str_arg(sample_id, "sample_id")?)?;
        let report = m.generate_report(&s.slices, &cfg)?;
        *slot = CString::new(report)
            .expect("reports have no nul")
            .into_raw();
        Ok(())
    })
}

/// Scores `n` candidate reports against `n` references with word tokens and
/// the 24 entity keywords.
#[no_mangle]
pub unsafe extern "C" fn pcrl_metrics_score(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut PcrlMetrics,
) -> PcrlStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let c = strings_arg(candidates, n, "candidates")?;
        let r = strings_arg(references, n, "references")?;
        let keywords: Vec<String> = ENTITY_NAMES.iter().map(|s| s.to_string()).collect();
        let m = score_corpus(&c, &r, &keywords, &Tokenizer::Word)?;
        *slot = PcrlMetrics {
            b1: m.b1,
            b2: m.b2,
            b3: m.b3,
            b4: m.b4,
            meteor_exact: m.meteor_exact,
            rouge_l: m.rouge_l,
            cider_d: m.cider_d,
            clinical_precision: m.clinical_precision,
            clinical_recall: m.clinical_recall,
            clinical_f1: m.clinical_f1,
        };
        Ok(())
    })
}

/// Symmetric contrastive loss between paired row-major `[k, d]` matrices.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pcrl_info_nce(
    a: *const f64,
    b: *const f64,
    k: usize,
    d: usize,
    tau: f64,
    alpha_v: f64,
    alpha_w: f64,
    mode: PcrlDenominator,
    out: *mut f64,
) -> PcrlStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let a = slice_arg(a, k * d, "a")?;
        let b = slice_arg(b, k * d, "b")?;
        let cfg = LossConfig {
            tau,
            alpha_v,
            alpha_w,
            denominator_mode: match mode {
                PcrlDenominator::Standard => DenominatorMode::Standard,
                PcrlDenominator::Paper => DenominatorMode::Paper,
            },
            ..LossConfig::default()
        };
        let mut tape = Tape::<f64>::new();
        let ta = tape.constant(
            Tensor::new(vec![k, d], a.to_vec()).map_err(|e| Fail::invalid(e.to_string()))?,
        );
        let tb = tape.constant(
            Tensor::new(vec![k, d], b.to_vec()).map_err(|e| Fail::invalid(e.to_string()))?,
        );
        let l = info_nce(&mut tape, ta, tb, &cfg)?;
        *slot = tape.value(l).item();
        Ok(())
    })
}

/// Dice loss of `[k, h, w]` probabilities against `[k, h, w]` binary targets
/// (nonzero bytes are foreground).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pcrl_dice_loss(
    predicted: *const f64,
    targets: *const u8,
    k: usize,
    h: usize,
    w: usize,
    eps: f64,
    out: *mut f64,
) -> PcrlStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let n = k * h * w;
        let p = slice_arg(predicted, n, "predicted")?;
        let t = slice_arg(targets, n, "targets")?;
        let masks: Vec<Option<Mask>> = (0..k)
            .map(|e| Some(Mask::from_fn(w, h, |x, y| t[e * h * w + y * w + x] != 0)))
            .collect();
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(
            Tensor::new(vec![k, h, w], p.to_vec()).map_err(|e| Fail::invalid(e.to_string()))?,
        );
        let l = dice_loss(&mut tape, pv, &masks, eps)?
            .ok_or_else(|| Fail::invalid("no supervised entity"))?;
        *slot = tape.value(l).item();
        Ok(())
    })
}
