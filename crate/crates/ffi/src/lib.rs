//! C ABI over `p4d_core`.
//!
//! Every fallible call returns a [`P4dStatus`]; on failure the message is
//! available from [`p4d_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Panics never cross the
//! boundary and surface as [`P4dStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use p4d_core::config::{execute_on, RunConfig};
use p4d_core::error::Error;
use p4d_core::pipeline::RenderSet;
use p4d_core::raster::Image;
use p4d_core::scene::{generate_scene, load_scene, save_scene, Scene4D, SceneSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum P4dStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range, a buffer too small, or a string not UTF-8.
    InvalidArgument = 2,
    /// Bad configuration, scene spec or instruction.
    Config = 3,
    /// The engine failed while running.
    Runtime = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// Opaque scene handle.
pub struct P4dScene(Scene4D);

/// Opaque handle to a finished run and the renders of its final field.
pub struct P4dRun {
    result: p4d_core::pipeline::RunResult,
    renders: RenderSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(P4dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = if e.is_config() {
            P4dStatus::Config
        } else {
            P4dStatus::Runtime
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(P4dStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> P4dStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => P4dStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
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
            P4dStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(P4dStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(P4dStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, Fail> {
    let s = CStr::from_ptr(non_null(p, name)?);
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

fn copy_rgb(img: &Image, buf: *mut f32, len: usize) -> Result<(), Fail> {
    let need = img.len() * 3;
    if buf.is_null() {
        return Err(Fail(P4dStatus::NullPointer, "`buf` is null".into()));
    }
    if len < need {
        return Err(invalid(format!("buffer holds {len} floats, need {need}")));
    }
    // SAFETY: the caller guarantees `buf` points to `len` writable floats.
    let out = unsafe { std::slice::from_raw_parts_mut(buf, need) };
    for (dst, px) in out.chunks_exact_mut(3).zip(img.as_slice()) {
        for c in 0..3 {
            dst[c] = px[c] as f32;
        }
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn p4d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn p4d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates the procedural scene with the given size and seed.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_generate(
    views: usize,
    frames: usize,
    width: usize,
    height: usize,
    seed: u64,
    out: *mut *mut P4dScene,
) -> P4dStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let scene = generate_scene(&SceneSpec::with_size(views, frames, width, height, seed))?;
        *out = Box::into_raw(Box::new(P4dScene(scene)));
        Ok(())
    })
}

/// Generates the default scene.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_default(out: *mut *mut P4dScene) -> P4dStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(P4dScene(generate_scene(
            &SceneSpec::default_scene(),
        )?)));
        Ok(())
    })
}

/// Loads a scene directory or manifest file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_load(path: *const c_char, out: *mut *mut P4dScene) -> P4dStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(P4dScene(load_scene(&path)?)));
        Ok(())
    })
}

/// Writes the scene manifest and frames into `dir`.
///
/// # Safety
/// `scene` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_save(scene: *const P4dScene, dir: *const c_char) -> P4dStatus {
    guard(|| {
        let scene = non_null(scene, "scene")?;
        save_scene(&scene.0, &PathBuf::from(string(dir, "dir")?))?;
        Ok(())
    })
}

/// Reports the scene dimensions. Any output pointer may be null.
///
/// # Safety
/// `scene` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_dims(
    scene: *const P4dScene,
    views: *mut usize,
    frames: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> P4dStatus {
    guard(|| {
        let s = &non_null(scene, "scene")?.0;
        for (p, v) in [
            (views, s.views()),
            (frames, s.frames()),
            (width, s.width()),
            (height, s.height()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the RGB frame of (`view`, `t`) as `width*height*3` row-major floats.
///
/// # Safety
/// `scene` must be a live handle and `buf` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_frame_rgb(
    scene: *const P4dScene,
    view: usize,
    t: usize,
    buf: *mut f32,
    len: usize,
) -> P4dStatus {
    guard(|| {
        let s = &non_null(scene, "scene")?.0;
        if view >= s.views() || t >= s.frames() {
            return Err(invalid(format!(
                "frame ({view}, {t}) outside {}x{}",
                s.views(),
                s.frames()
            )));
        }
        copy_rgb(&s.frame(view, t).rgb, buf, len)
    })
}

/// Releases a scene. Null is ignored.
///
/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p4d_scene_free(scene: *mut P4dScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Runs the editing pipeline on `scene`. `config_json` is a run configuration
/// in JSON, or null for the defaults; its `scene` key is ignored. When it sets
/// `out`, the run directory is written as by the command line tool.
///
/// # Safety
/// `scene` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn p4d_run(
    scene: *const P4dScene,
    config_json: *const c_char,
    out: *mut *mut P4dRun,
) -> P4dStatus {
    guard(|| {
        let s = &non_null(scene, "scene")?.0;
        let out = out_ptr(out, "out")?;
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(
                &string(config_json, "config_json")?,
                "<config_json>".as_ref(),
            )?
        };
        let result = execute_on(&cfg, s)?;
        let renders = result.renders(s);
        *out = Box::into_raw(Box::new(P4dRun { result, renders }));
        Ok(())
    })
}

/// Number of completed iterations in the run log.
///
/// # Safety
/// `run` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn p4d_run_iterations(run: *const P4dRun, count: *mut usize) -> P4dStatus {
    guard(|| {
        let run = non_null(run, "run")?;
        *out_ptr(count, "count")? = run.result.log.len();
        Ok(())
    })
}

/// Consistency scores of the dataset produced by iteration `index` (0-based).
///
/// # Safety
/// `run` must be a live handle and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn p4d_run_consistency(
    run: *const P4dRun,
    index: usize,
    temporal_var: *mut f64,
    spatial_err: *mut f64,
) -> P4dStatus {
    guard(|| {
        let run = non_null(run, "run")?;
        let rec = run.result.log.get(index).ok_or_else(|| {
            invalid(format!(
                "iteration {index} outside {}",
                run.result.log.len()
            ))
        })?;
        *out_ptr(temporal_var, "temporal_var")? = rec.consistency.temporal_var;
        *out_ptr(spatial_err, "spatial_err")? = rec.consistency.spatial_err;
        Ok(())
    })
}

/// Copies the final field's render of (`view`, `t`) as `width*height*3` floats.
///
/// # Safety
/// `run` must be a live handle and `buf` point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn p4d_run_render_rgb(
    run: *const P4dRun,
    view: usize,
    t: usize,
    buf: *mut f32,
    len: usize,
) -> P4dStatus {
    guard(|| {
        let r = &non_null(run, "run")?.renders;
        if view >= r.views() || t >= r.frames() {
            return Err(invalid(format!(
                "frame ({view}, {t}) outside {}x{}",
                r.views(),
                r.frames()
            )));
        }
        copy_rgb(r.get(view, t), buf, len)
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p4d_run_free(run: *mut P4dRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
