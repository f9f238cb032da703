//! C ABI over checkpoint loading, generation, the synthetic corpus and the metrics.
//!
//! Every fallible call returns a [`VslmStatus`] and writes results through out
//! pointers. Objects are opaque handles released with their `_free` function.
//! After a failure, [`vslm_last_error_message`] describes it on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vslm::data::{generate_corpus, read_corpus, Codec, CorpusConfig, DataError, FeatureDecoder, TokenGrid, Utterance};
use vslm::eval::{duration_error, mcd_dtw, padded_token_accuracy, MetricError};
use vslm::pipeline::{generate, sampler_rng, Checkpoint, Model, PipelineError, SamplerConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VslmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Incompatible = 4,
    Io = 5,
    Panic = 6,
}

/// Trained model loaded from a checkpoint.
pub struct VslmModel {
    model: Model,
}

/// Synthetic utterances together with the corpus configuration.
pub struct VslmCorpus {
    config: CorpusConfig,
    utterances: Vec<Utterance>,
}

/// Token grid of `frames x n_q` codec tokens.
pub struct VslmGrid {
    grid: TokenGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail {
    status: VslmStatus,
    message: String,
}

impl Fail {
    fn new(status: VslmStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn null(what: &str) -> Self {
        Self::new(VslmStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Numeric(_) => VslmStatus::Numeric,
            PipelineError::Incompatible(_) => VslmStatus::Incompatible,
            PipelineError::Io(_) => VslmStatus::Io,
            _ => VslmStatus::InvalidArgument,
        };
        Self::new(status, e.to_string())
    }
}

impl From<DataError> for Fail {
    fn from(e: DataError) -> Self {
        let status = if matches!(e, DataError::Io(_)) { VslmStatus::Io } else { VslmStatus::InvalidArgument };
        Self::new(status, e.to_string())
    }
}

impl From<MetricError> for Fail {
    fn from(e: MetricError) -> Self {
        Self::new(VslmStatus::InvalidArgument, e.to_string())
    }
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior NULs removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> VslmStatus {
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Fail::new(VslmStatus::Panic, format!("internal panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_last_error(None);
            VslmStatus::Ok
        }
        Err(f) => {
            set_last_error(Some(f.message));
            f.status
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::new(VslmStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn utterance(c: &VslmCorpus, index: usize) -> Result<&Utterance, Fail> {
    c.utterances.get(index).ok_or_else(|| {
        Fail::new(VslmStatus::InvalidArgument, format!("utterance {index} out of range ({} in corpus)", c.utterances.len()))
    })
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread, or NULL after a success.
///
/// The pointer stays valid until the next `vslm_` call on the same thread.
#[no_mangle]
pub extern "C" fn vslm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates `count` utterances of the default corpus configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_generate(seed: u64, count: usize, out: *mut *mut VslmCorpus) -> VslmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if count == 0 {
            return Err(Fail::new(VslmStatus::InvalidArgument, "count must be positive"));
        }
        let config = CorpusConfig::default();
        let utterances = generate_corpus(seed, count, &config)?;
        *out = boxed(VslmCorpus { config, utterances });
        Ok(())
    })
}

/// Reads a JSONL corpus written by `vslm gen-data`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_load(path: *const c_char, out: *mut *mut VslmCorpus) -> VslmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = path_arg(path)?;
        let file = File::open(&path).map_err(|e| Fail::new(VslmStatus::Io, format!("{path}: {e}")))?;
        let (header, utterances) = read_corpus(BufReader::new(file))?;
        *out = boxed(VslmCorpus { config: header.config, utterances });
        Ok(())
    })
}

/// # Safety
/// `corpus` must be NULL or a handle from `vslm_corpus_generate`/`vslm_corpus_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_free(corpus: *mut VslmCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of utterances; 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_len(corpus: *const VslmCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.utterances.len())
}

/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_video_frames(corpus: *const VslmCorpus, index: usize, out: *mut usize) -> VslmStatus {
    guard(|| {
        let c = borrow(corpus, "corpus")?;
        *out_ref(out, "out")? = utterance(c, index)?.video_frames();
        Ok(())
    })
}

/// Ground-truth speech tokens of one utterance.
///
/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_corpus_target(corpus: *const VslmCorpus, index: usize, out: *mut *mut VslmGrid) -> VslmStatus {
    guard(|| {
        let c = borrow(corpus, "corpus")?;
        let out = out_ref(out, "out")?;
        *out = boxed(VslmGrid { grid: utterance(c, index)?.target.clone() });
        Ok(())
    })
}

/// Codec token of `phoneme` spoken by `speaker` at codebook `level`.
///
/// # Safety
/// `corpus` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_codec_encode(
    corpus: *const VslmCorpus,
    phoneme: usize,
    speaker: usize,
    level: usize,
    out: *mut u32,
) -> VslmStatus {
    guard(|| {
        let c = borrow(corpus, "corpus")?;
        let out = out_ref(out, "out")?;
        if phoneme >= c.config.vocab_p || speaker >= c.config.n_speakers {
            return Err(Fail::new(VslmStatus::InvalidArgument, "phoneme or speaker out of range"));
        }
        *out = Codec::new(&c.config).encode(phoneme, speaker, level)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `vslm train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_model_load(path: *const c_char, out: *mut *mut VslmModel) -> VslmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = path_arg(path)?;
        let model = Checkpoint::load(&path)?.to_model()?;
        *out = boxed(VslmModel { model });
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from `vslm_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vslm_model_free(model: *mut VslmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Codebook levels per frame; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_model_n_q(model: *const VslmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.corpus.n_q)
}

/// Whether the model predicts durations with its aligner (output length equals the video length).
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_model_uses_aligner(model: *const VslmModel) -> bool {
    model.as_ref().is_some_and(|m| m.model.aligner.is_some())
}

/// Generates speech for utterance `index` with top-`k` sampling.
///
/// The sampler stream depends on `seed` and `index` only, matching `vslm infer`.
///
/// # Safety
/// `model` and `corpus` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_generate(
    model: *const VslmModel,
    corpus: *const VslmCorpus,
    index: usize,
    k: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut VslmGrid,
) -> VslmStatus {
    guard(|| {
        let m = &borrow(model, "model")?.model;
        let c = borrow(corpus, "corpus")?;
        let out = out_ref(out, "out")?;
        if m.corpus != c.config {
            return Err(Fail::new(VslmStatus::Incompatible, "model was trained on a different corpus configuration"));
        }
        let u = utterance(c, index)?;
        let sampler = SamplerConfig { k, temperature, seed };
        let mut rng = sampler_rng(&sampler, index);
        let g = generate(m, &u.phonemes, &u.lips, &u.reference, &sampler, &mut rng)?;
        *out = boxed(VslmGrid { grid: g.grid });
        Ok(())
    })
}

/// # Safety
/// `grid` must be NULL or a grid handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vslm_grid_free(grid: *mut VslmGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// # Safety
/// `grid` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_grid_frames(grid: *const VslmGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.grid.frames())
}

/// # Safety
/// `grid` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vslm_grid_n_q(grid: *const VslmGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.grid.n_q())
}

/// Copies the frame-major tokens into `buf`, which must hold `frames * n_q` entries.
///
/// # Safety
/// `grid` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn vslm_grid_copy_tokens(grid: *const VslmGrid, buf: *mut u32, len: usize) -> VslmStatus {
    guard(|| {
        let g = &borrow(grid, "grid")?.grid;
        if buf.is_null() {
            return Err(Fail::null("buf"));
        }
        let tokens = g.tokens();
        if len < tokens.len() {
            return Err(Fail::new(VslmStatus::InvalidArgument, format!("buffer holds {len} tokens, need {}", tokens.len())));
        }
        ptr::copy_nonoverlapping(tokens.as_ptr(), buf, tokens.len());
        Ok(())
    })
}

/// Fraction of positions (over the longer grid) whose tokens all match.
///
/// # Safety
/// Both grids must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_token_accuracy(generated: *const VslmGrid, target: *const VslmGrid, out: *mut f64) -> VslmStatus {
    guard(|| {
        let g = &borrow(generated, "generated")?.grid;
        let t = &borrow(target, "target")?.grid;
        *out_ref(out, "out")? = padded_token_accuracy(g, t)?;
        Ok(())
    })
}

/// Mel-cepstral distortion after dynamic time warping, on the corpus's decoded features.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_mcd_dtw(
    corpus: *const VslmCorpus,
    generated: *const VslmGrid,
    target: *const VslmGrid,
    out: *mut f64,
) -> VslmStatus {
    guard(|| {
        let c = borrow(corpus, "corpus")?;
        let g = &borrow(generated, "generated")?.grid;
        let t = &borrow(target, "target")?.grid;
        *out_ref(out, "out")? = mcd_dtw(&FeatureDecoder::new(&c.config), g, t)?;
        Ok(())
    })
}

/// `|generated - target| / target` frame-count error.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vslm_duration_error(generated_frames: usize, target_frames: usize, out: *mut f64) -> VslmStatus {
    guard(|| {
        *out_ref(out, "out")? = duration_error(generated_frames, target_frames)?;
        Ok(())
    })
}
