//! C ABI over the trained pipeline.
//!
//! Every fallible call returns a [`PfStatus`]; on failure the message is kept
//! per thread and read back with [`pf_last_error_message`]. Handles are
//! opaque and owned by the caller until passed to the matching `_free`.
//!
//! Frames cross the boundary as row-major `f32`: a piano roll is `n × 88`
//! activations, a motion frame is the six wrist coordinates (left xyz, right
//! xyz) followed by both hands' gesture vectors.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use pianoflow::cli::RunConfig;
use pianoflow::flowgen::{condition_from_roll, Stage2Model};
use pianoflow::metrics;
use pianoflow::midi::{parse_midi_file, roll_from_events, PianoRoll, KEYS};
use pianoflow::numcore::{rng, Tensor};
use pianoflow::stage1::{acoustic_stand_in_with, Stage1Model};
use pianoflow::streaming::{AfcStreamer, ChunkPlan, RollCondition};
use pianoflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Argument = 3,
    Numerical = 4,
    Parse = 5,
    State = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A loaded stage-1 and stage-2 model pair.
pub struct PfPipeline {
    inner: Arc<Models>,
}

/// An in-progress chunked generation over one piano roll.
pub struct PfStream {
    models: Arc<Models>,
    roll: PianoRoll,
    plan: ChunkPlan,
    streamer: AfcStreamer,
}

struct Models {
    config: RunConfig,
    stage1: Stage1Model,
    stage2: Stage2Model,
}

impl Models {
    fn frame_width(&self) -> usize {
        6 + self.stage2.dims()
    }

    fn wrists(&self, roll: &PianoRoll) -> pianoflow::Result<Tensor> {
        self.stage1.predict_wrists(&acoustic_stand_in_with(roll, self.config.stage1.c_a))
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Dimension(_) => PfStatus::Dimension,
        Error::Argument(_) => PfStatus::Argument,
        Error::Numerical(_) => PfStatus::Numerical,
        Error::Parse { .. } => PfStatus::Parse,
        Error::State(_) => PfStatus::State,
        Error::Config(_) => PfStatus::Config,
        Error::Format(_) | Error::Json(_) => PfStatus::Format,
        Error::Io(_) => PfStatus::Io,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Buffer { needed: usize, given: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PfStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} must not be null"));
            PfStatus::NullPointer
        }
        Ok(Err(Failure::Buffer { needed, given })) => {
            set_error(format!("output buffer holds {given} values, {needed} needed"));
            PfStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PfStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees a non-null pointer refers to a live value.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn read_roll(roll: *const f32, n_frames: usize) -> Result<PianoRoll, Failure> {
    if roll.is_null() {
        return Err(Failure::Null("roll"));
    }
    // SAFETY: the caller provides n_frames × 88 readable values.
    let v = unsafe { std::slice::from_raw_parts(roll, n_frames * KEYS) };
    let t = Tensor::new(&[n_frames, KEYS], v.iter().map(|&x| x as f64).collect())?;
    Ok(PianoRoll::new(t)?)
}

fn write_out(out: *mut f32, capacity: usize, values: impl ExactSizeIterator<Item = f64>) -> Result<(), Failure> {
    if values.len() > capacity {
        return Err(Failure::Buffer { needed: values.len(), given: capacity });
    }
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: the caller provides `capacity` writable values.
    let dst = unsafe { std::slice::from_raw_parts_mut(out, capacity) };
    for (d, v) in dst.iter_mut().zip(values) {
        *d = v as f32;
    }
    Ok(())
}

fn motion_rows(wrists: &Tensor, gestures: &Tensor) -> impl ExactSizeIterator<Item = f64> {
    let rows = Tensor::concat_cols(&[wrists, gestures]).expect("equal frame counts");
    rows.data().to_vec().into_iter()
}

/// Length in bytes, including the terminating NUL, of the last error on
/// this thread; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn pf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |m| m.as_bytes_with_nul().len()))
}

/// Copies the last error message into `buf` (truncated, always
/// NUL-terminated when `capacity > 0`). Returns the full length including
/// the NUL.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pf_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity);
            // SAFETY: n <= capacity, guaranteed writable by the caller.
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n - 1) = 0;
            }
        }
        bytes.len()
    })
}

/// Static version string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads both checkpoints named by a JSON run configuration. A null
/// `config_path` uses the default configuration.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pf_pipeline_open(config_path: *const c_char, out: *mut *mut PfPipeline) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let config = if config_path.is_null() {
            RunConfig::default()
        } else {
            // SAFETY: non-null and NUL-terminated per the contract.
            let path = unsafe { CStr::from_ptr(config_path) }
                .to_str()
                .map_err(|_| Error::Argument("config path is not UTF-8".into()))?;
            RunConfig::load(Path::new(path))?.0
        };
        let stage1 = Stage1Model::load(config.stage1.clone(), &config.paths.stage1)?;
        let stage2 = Stage2Model::load(config.stage2.clone(), &config.paths.stage2)?;
        let handle = Box::new(PfPipeline {
            inner: Arc::new(Models { config, stage1, stage2 }),
        });
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Releases a pipeline. Streams opened from it stay valid.
///
/// # Safety
/// `p` must be null or a handle from [`pf_pipeline_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_pipeline_free(p: *mut PfPipeline) {
    if !p.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Values per motion frame, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn pf_pipeline_frame_width(p: *const PfPipeline) -> usize {
    // SAFETY: per the contract.
    unsafe { p.as_ref() }.map_or(0, |p| p.inner.frame_width())
}

/// Generates `n_frames` of motion for a piano roll in one pass, writing
/// `n_frames × frame_width` values to `out`.
///
/// # Safety
/// `roll` must hold `n_frames × 88` values and `out` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn pf_pipeline_generate(
    p: *const PfPipeline,
    roll: *const f32,
    n_frames: usize,
    out: *mut f32,
    capacity: usize,
) -> PfStatus {
    guard(|| {
        let m = &non_null(p, "pipeline")?.inner;
        let roll = read_roll(roll, n_frames)?;
        let cond = condition_from_roll(&m.stage1, &roll)?;
        let gestures = m.stage2.sample(&cond, &mut rng::stream(m.config.seed, 0))?;
        let wrists = m.wrists(&roll)?;
        write_out(out, capacity, motion_rows(&wrists, &gestures))
    })
}

/// Starts a chunked generation using the configured chunk and overlap.
///
/// # Safety
/// `roll` must hold `n_frames × 88` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_stream_open(
    p: *const PfPipeline,
    roll: *const f32,
    n_frames: usize,
    out: *mut *mut PfStream,
) -> PfStatus {
    guard(|| {
        let m = Arc::clone(&non_null(p, "pipeline")?.inner);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let roll = read_roll(roll, n_frames)?;
        let s = &m.config.sampling;
        let plan = ChunkPlan::new(s.chunk_frames, s.overlap_frames, n_frames)?;
        let streamer = AfcStreamer::new(plan, m.config.seed, m.config.stage2.n_steps, m.stage2.dims())?;
        let handle = Box::new(PfStream { models: m, roll, plan, streamer });
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Produces the next finished frames. Writes their count to `out_frames`
/// and the index of the first one to `out_first`; a count of 0 means the
/// stream is complete. `capacity` must cover one chunk of frames.
///
/// # Safety
/// `s` must be a live stream; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_stream_next(
    s: *mut PfStream,
    out: *mut f32,
    capacity: usize,
    out_frames: *mut usize,
    out_first: *mut usize,
) -> PfStatus {
    guard(|| {
        // SAFETY: per the contract.
        let s = unsafe { s.as_mut() }.ok_or(Failure::Null("stream"))?;
        if out_frames.is_null() || out_first.is_null() {
            return Err(Failure::Null("out_frames/out_first"));
        }
        let first = s.streamer.state().emitted;
        let chunk = s.plan.chunks().get(s.streamer.state().next_chunk).copied();
        let m = &s.models;
        let src = RollCondition {
            stage1: &m.stage1,
            roll: &s.roll,
        };
        let next = s.streamer.next_frames(&m.stage2, &src)?;
        let n = match next {
            None => 0,
            Some(frames) => {
                let gestures = m.stage2.scale.denormalize(&frames)?;
                let n = gestures.rows();
                let (start, len) = chunk.expect("a chunk was produced");
                let wrists = m.wrists(&s.roll.slice(start, len)?)?.slice_rows(0, n)?;
                write_out(out, capacity, motion_rows(&wrists, &gestures))?;
                n
            }
        };
        // SAFETY: checked non-null above.
        unsafe {
            *out_frames = n;
            *out_first = first;
        }
        Ok(())
    })
}

/// Releases a stream.
///
/// # Safety
/// `s` must be null or a handle from [`pf_stream_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_stream_free(s: *mut PfStream) {
    if !s.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Converts Standard MIDI File bytes into an `n × 88` roll at 30 frames/s.
/// Call with a null `out` to learn `n` first.
///
/// # Safety
/// `bytes` must hold `len` readable bytes, `out` null or `capacity` values,
/// `out_frames` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_midi_to_roll(
    bytes: *const u8,
    len: usize,
    out: *mut f32,
    capacity: usize,
    out_frames: *mut usize,
) -> PfStatus {
    guard(|| {
        if bytes.is_null() || out_frames.is_null() {
            return Err(Failure::Null("bytes/out_frames"));
        }
        // SAFETY: per the contract.
        let data = unsafe { std::slice::from_raw_parts(bytes, len) };
        let parsed = parse_midi_file(data)?;
        let duration = parsed.duration_seconds();
        let roll = if duration > 0.0 {
            roll_from_events(&parsed.events, duration)?
        } else {
            PianoRoll::zeros(0)
        };
        // SAFETY: checked non-null above.
        unsafe { *out_frames = roll.len() };
        if !out.is_null() {
            write_out(out, capacity, roll.frames().data().to_vec().into_iter())?;
        }
        Ok(())
    })
}

/// Frequency-domain distance between two `n × d` sequences.
///
/// # Safety
/// `pred` and `gt` must each hold `n × d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_fde(pred: *const f32, gt: *const f32, n: usize, d: usize, out: *mut f64) -> PfStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(Failure::Null("pred/gt/out"));
        }
        let read = |p: *const f32| {
            // SAFETY: per the contract.
            let v = unsafe { std::slice::from_raw_parts(p, n * d) };
            Tensor::new(&[n, d], v.iter().map(|&x| x as f64).collect())
        };
        let value = metrics::fde(&read(pred)?, &read(gt)?)?;
        // SAFETY: checked non-null above.
        unsafe { *out = value };
        Ok(())
    })
}
