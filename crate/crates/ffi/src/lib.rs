//! C ABI over the weight controller, metrics, scene generator and model
//! inference. Every function returns a [`JdStatus`]; on failure the message
//! is available from [`jd_last_error_message`] on the same thread.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use jointdistill::feedback::{Direction, FeedbackState, TaskScoreSpec};
use jointdistill::harness::{load_model, predict};
use jointdistill::metrics::{self, CriterionValue, MetricReport};
use jointdistill::nn::ModelGraph;
use jointdistill::synthdata::{generate_scene, CLASSES};
use jointdistill::tensor::Tensor;
use jointdistill::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Config = 4,
    NumericalAbort = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Dynamic task-weight controller.
pub struct JdController {
    state: FeedbackState,
    specs: Vec<TaskScoreSpec>,
}

/// A loaded teacher or student network.
pub struct JdModel {
    model: ModelGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> JdStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::RankMismatch { .. } | Error::DataLength { .. } => JdStatus::ShapeMismatch,
        Error::Config(_) => JdStatus::Config,
        Error::NumericalAbort { .. } | Error::NonFinite { .. } => JdStatus::NumericalAbort,
        Error::Checkpoint { .. } | Error::Json(_) => JdStatus::Checkpoint,
        Error::Io { .. } => JdStatus::Io,
        _ => JdStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> JdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            JdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            JdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            JdStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            JdStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_value<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated) and returns its full length in bytes, without the NUL.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn jd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// New controller for `n_tasks` tasks with all weights at 1.
/// `higher_better[i]` is nonzero when task i's score improves upward.
///
/// # Safety
/// `r_teacher0` and `higher_better` must hold `n_tasks` values; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_new(
    n_tasks: usize,
    r_teacher0: *const f64,
    higher_better: *const u8,
    alpha: f64,
    beta: f64,
    momentum: f64,
    out: *mut *mut JdController,
) -> JdStatus {
    guard(|| {
        let out = out_value(out, "out")?;
        *out = ptr::null_mut();
        if n_tasks == 0 {
            return Err(Fail::Arg("n_tasks must be positive".into()));
        }
        let r0 = input(r_teacher0, n_tasks, "r_teacher0")?;
        let hb = input(higher_better, n_tasks, "higher_better")?;
        if let Some(v) = r0.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Fail::Arg(format!("teacher score {v} must be positive")));
        }
        let specs = hb
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let d = if h != 0 {
                    Direction::HigherBetter
                } else {
                    Direction::LowerBetter
                };
                TaskScoreSpec::new(format!("task{i}"), d)
            })
            .collect();
        let state = FeedbackState::new(r0.to_vec(), alpha, beta, momentum);
        *out = Box::into_raw(Box::new(JdController { state, specs }));
        Ok(())
    })
}

/// Replaces the teacher reference scores.
///
/// # Safety
/// `ctl` must come from [`jd_controller_new`]; `r_teacher0` must hold `n`
/// values.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_set_teacher_scores(
    ctl: *mut JdController,
    r_teacher0: *const f64,
    n: usize,
) -> JdStatus {
    guard(|| {
        let c = out_value(ctl, "ctl")?;
        let r0 = input(r_teacher0, n, "r_teacher0")?;
        if n != c.state.n_tasks() {
            return Err(Fail::Arg(format!("expected {} scores, got {n}", c.state.n_tasks())));
        }
        c.state.r_teacher0 = r0.to_vec();
        Ok(())
    })
}

/// One weight update from precomputed feedback scores.
///
/// # Safety
/// `ctl` must come from [`jd_controller_new`]; `a` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_update(ctl: *mut JdController, a: *const f64, n: usize) -> JdStatus {
    guard(|| {
        let c = out_value(ctl, "ctl")?;
        c.state.update_weights(input(a, n, "a")?)?;
        Ok(())
    })
}

/// Feedback scores from student scores, then a weight update. The feedback
/// scores are written to `a_out` when it is not null.
///
/// # Safety
/// `ctl` must come from [`jd_controller_new`]; `r_student` must hold `n`
/// values and `a_out` must be null or hold `n`.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_tick(
    ctl: *mut JdController,
    r_student: *const f64,
    n: usize,
    a_out: *mut f64,
) -> JdStatus {
    guard(|| {
        let c = out_value(ctl, "ctl")?;
        let rec = c.state.tick(input(r_student, n, "r_student")?, &c.specs)?;
        if !a_out.is_null() {
            output(a_out, n, "a_out")?.copy_from_slice(&rec.a);
        }
        Ok(())
    })
}

/// Copies the current weights into `out`.
///
/// # Safety
/// `ctl` must come from [`jd_controller_new`]; `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_omega(ctl: *const JdController, out: *mut f64, n: usize) -> JdStatus {
    guard(|| {
        let c = ctl.as_ref().ok_or(Fail::Null("ctl"))?;
        if n != c.state.n_tasks() {
            return Err(Fail::Arg(format!(
                "expected room for {} weights, got {n}",
                c.state.n_tasks()
            )));
        }
        output(out, n, "out")?.copy_from_slice(&c.state.omega);
        Ok(())
    })
}

/// # Safety
/// `ctl` must be null or come from [`jd_controller_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn jd_controller_free(ctl: *mut JdController) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

fn labels(v: &[u32]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

/// Mean IoU over the classes present in prediction or ground truth.
///
/// # Safety
/// `pred` and `gt` must hold `n` labels; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_miou(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> JdStatus {
    guard(|| {
        let v = metrics::miou(&labels(input(pred, n, "pred")?), &labels(input(gt, n, "gt")?), classes)?;
        *out_value(out, "out")? = v;
        Ok(())
    })
}

/// # Safety
/// `pred` and `gt` must hold `n` labels; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_pixel_acc(pred: *const u32, gt: *const u32, n: usize, out: *mut f64) -> JdStatus {
    guard(|| {
        let v = metrics::pixel_acc(&labels(input(pred, n, "pred")?), &labels(input(gt, n, "gt")?))?;
        *out_value(out, "out")? = v;
        Ok(())
    })
}

/// Mean absolute and mean relative depth error.
///
/// # Safety
/// `pred` and `gt` must hold `n` values; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_depth_errors(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    abs_err: *mut f64,
    rel_err: *mut f64,
) -> JdStatus {
    guard(|| {
        let (a, r) = metrics::depth_errors(input(pred, n, "pred")?, input(gt, n, "gt")?)?;
        *out_value(abs_err, "abs_err")? = a;
        *out_value(rel_err, "rel_err")? = r;
        Ok(())
    })
}

/// Overall improvement in percent of `values` over `baseline`, criterion by
/// criterion.
///
/// # Safety
/// The three arrays must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_delta_mtl(
    values: *const f64,
    baseline: *const f64,
    higher_better: *const u8,
    n: usize,
    out: *mut f64,
) -> JdStatus {
    guard(|| {
        let hb = input(higher_better, n, "higher_better")?;
        let report = |v: &[f64]| {
            MetricReport::new(
                v.iter()
                    .zip(hb)
                    .enumerate()
                    .map(|(i, (&value, &h))| CriterionValue {
                        name: format!("c{i}"),
                        value,
                        higher_better: h != 0,
                    })
                    .collect(),
            )
        };
        let d = metrics::delta_mtl(
            &report(input(values, n, "values")?),
            &report(input(baseline, n, "baseline")?),
        )?;
        *out_value(out, "out")? = d;
        Ok(())
    })
}

/// Renders one scene: `image` gets 3 x h x w channel-major values, `seg`
/// and `depth` get h x w values each.
///
/// # Safety
/// The output buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn jd_scene_generate(
    seed: u64,
    h: usize,
    w: usize,
    image: *mut f64,
    seg: *mut u8,
    depth: *mut f64,
) -> JdStatus {
    guard(|| {
        let s = generate_scene(seed, h, w, CLASSES)?;
        output(image, 3 * h * w, "image")?.copy_from_slice(&s.image);
        output(seg, h * w, "seg")?.copy_from_slice(&s.seg);
        output(depth, h * w, "depth")?.copy_from_slice(&s.depth);
        Ok(())
    })
}

/// Loads a checkpoint written by the training harness.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_model_load(path: *const c_char, out: *mut *mut JdModel) -> JdStatus {
    guard(|| {
        let out = out_value(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let (model, _) = load_model(Path::new(p))?;
        *out = Box::into_raw(Box::new(JdModel { model }));
        Ok(())
    })
}

/// Number of output heads.
///
/// # Safety
/// `model` must come from [`jd_model_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_model_num_heads(model: *const JdModel, out: *mut usize) -> JdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_value(out, "out")? = m.model.spec().heads.len();
        Ok(())
    })
}

/// Output channels of head `head`.
///
/// # Safety
/// `model` must come from [`jd_model_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jd_model_head_channels(model: *const JdModel, head: usize, out: *mut usize) -> JdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let h = m
            .model
            .spec()
            .heads
            .get(head)
            .ok_or_else(|| Fail::Arg(format!("no head {head}")))?;
        *out_value(out, "out")? = h.out_channels();
        Ok(())
    })
}

/// Eval-mode forward of `n` images of 3 x h x w. Writes head `head`'s
/// output, n x channels x h x w values, into `out` of length `out_len`.
///
/// # Safety
/// `model` must come from [`jd_model_load`]; `images` must hold
/// n * 3 * h * w values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn jd_model_predict(
    model: *const JdModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    head: usize,
    out: *mut f64,
    out_len: usize,
) -> JdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if n == 0 || h == 0 || w == 0 {
            return Err(Fail::Arg("empty image batch".into()));
        }
        let x = Tensor::new(vec![n, 3, h, w], input(images, n * 3 * h * w, "images")?.to_vec())?;
        let heads = predict(&m.model, &x)?;
        let y = heads.get(head).ok_or_else(|| Fail::Arg(format!("no head {head}")))?;
        if y.numel() != out_len {
            return Err(Fail::Arg(format!(
                "head {head} produces {} values, buffer holds {out_len}",
                y.numel()
            )));
        }
        output(out, out_len, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`jd_model_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn jd_model_free(model: *mut JdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
