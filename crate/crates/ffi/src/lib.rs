//! C ABI over the `urbanflood` core.
//!
//! Every fallible call returns a [`UfStatus`]. On failure the message is
//! kept per thread and can be copied out with [`uf_last_error`]. Objects
//! cross the boundary as opaque handles that the caller frees with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use urbanflood::autodiff::Tensor;
use urbanflood::metrics::{PairedSeries, Scores};
use urbanflood::models::HybridModel;
use urbanflood::raster;
use urbanflood::synthdata::{build_dataset, write_dataset, DatasetConfig};
use urbanflood::terrain::{self, TerrainParams};
use urbanflood::Error;

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UfStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 string.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Loaded model (opaque).
pub struct UfModel {
    inner: HybridModel,
}

/// The four accuracy scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UfScores {
    pub mae: f64,
    pub rmse: f64,
    pub nse: f64,
    pub kge: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> UfStatus {
    match e.exit_code() {
        2 => UfStatus::Config,
        4 => UfStatus::Numerical,
        _ => UfStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (UfStatus, String)>) -> UfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            UfStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            UfStatus::Internal
        }
    }
}

fn core(e: Error) -> (UfStatus, String) {
    (status_of(&e), e.to_string())
}

fn bad(msg: &str) -> (UfStatus, String) {
    (UfStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (UfStatus, String)> {
    if p.is_null() {
        return Err(bad(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| bad(&format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], (UfStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad(&format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes). Returns the full message
/// length in bytes; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn uf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint written by `urbanflood train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uf_model_load(path: *const c_char, out: *mut *mut UfModel) -> UfStatus {
    guard(|| {
        if out.is_null() {
            return Err(bad("out is null"));
        }
        let p = path_arg(path, "path")?;
        let (inner, _) = HybridModel::load(&p).map_err(core)?;
        *out = Box::into_raw(Box::new(UfModel { inner }));
        Ok(())
    })
}

/// Frees a model; null is ignored.
///
/// # Safety
/// `model` must come from [`uf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uf_model_free(model: *mut UfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry the model expects.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn uf_model_shape(
    model: *const UfModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> UfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| bad("model is null"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(bad("output pointer is null"));
        }
        let s = m.inner.spec();
        *channels = s.in_channels;
        *height = s.height;
        *width = s.width;
        Ok(())
    })
}

/// Number of stored parameter values, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uf_model_param_count(model: *const UfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Predicts one depth map. `x` holds `C*H*W` planar feature values, `rain`
/// the model-scaled rainfall sequence, and `out` receives `H*W` values.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn uf_model_predict(
    model: *const UfModel,
    x: *const f64,
    x_len: usize,
    rain: *const f64,
    rain_len: usize,
    out: *mut f64,
    out_len: usize,
) -> UfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| bad("model is null"))?;
        let s = m.inner.spec();
        let plane = s.height * s.width;
        if x_len != s.in_channels * plane {
            return Err(bad(&format!("x has {x_len} values, model needs {}", s.in_channels * plane)));
        }
        if out_len != plane || out.is_null() {
            return Err(bad(&format!("out must hold {plane} values")));
        }
        if rain_len == 0 {
            return Err(bad("rain is empty"));
        }
        let xs = slice_arg(x, x_len, "x")?;
        let r = slice_arg(rain, rain_len, "rain")?;
        let t = Tensor::new(&[1, s.in_channels, s.height, s.width], xs.to_vec()).map_err(core)?;
        let y = m.inner.predict(&t, &[r]).map_err(core)?;
        std::slice::from_raw_parts_mut(out, plane).copy_from_slice(&y.data()[..plane]);
        Ok(())
    })
}

/// MAE, RMSE, NSE and KGE of `sim` against `obs`.
///
/// # Safety
/// `obs` and `sim` must each hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uf_scores(obs: *const f64, sim: *const f64, n: usize, out: *mut UfScores) -> UfStatus {
    guard(|| {
        if out.is_null() {
            return Err(bad("out is null"));
        }
        let o = slice_arg(obs, n, "obs")?;
        let s = slice_arg(sim, n, "sim")?;
        let series = PairedSeries::new(o.to_vec(), s.to_vec()).map_err(core)?;
        let sc = Scores::compute(&series).map_err(core)?;
        *out = UfScores {
            mae: sc.mae,
            rmse: sc.rmse,
            nse: sc.nse,
            kge: sc.kge,
        };
        Ok(())
    })
}

/// Generates a synthetic dataset with default settings into `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uf_synth(
    seed: u64,
    rows: usize,
    cols: usize,
    write_series: bool,
    out_dir: *const c_char,
) -> UfStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let cfg = DatasetConfig {
            rows,
            cols,
            ..DatasetConfig::new(seed)
        };
        std::fs::create_dir_all(&dir).map_err(|e| core(Error::io(&dir, e)))?;
        let ds = build_dataset(&cfg).map_err(core)?;
        write_dataset(&ds, &dir, write_series).map_err(core)?;
        Ok(())
    })
}

/// Derives the 14 feature rasters with default terrain settings and writes
/// them as `<ID>.asc` into `out_dir`.
///
/// # Safety
/// All paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn uf_derive_features(
    dem: *const c_char,
    land_use: *const c_char,
    pipes: *const c_char,
    out_dir: *const c_char,
) -> UfStatus {
    guard(|| {
        let dem = raster::read_grid(path_arg(dem, "dem")?).map_err(core)?;
        let land = terrain::read_land_use_csv(path_arg(land_use, "land_use")?, *dem.geometry()).map_err(core)?;
        let pipes = terrain::read_pipes_csv(path_arg(pipes, "pipes")?).map_err(core)?;
        let out = path_arg(out_dir, "out_dir")?;
        let stack = terrain::derive_all(&dem, &land, &pipes, &TerrainParams::default()).map_err(core)?;
        std::fs::create_dir_all(&out).map_err(|e| core(Error::io(&out, e)))?;
        for (id, g) in stack.channels() {
            raster::write_grid(g, out.join(format!("{id}.asc"))).map_err(core)?;
        }
        Ok(())
    })
}
