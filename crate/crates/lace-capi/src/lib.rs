//! C ABI for the lace guided-diffusion toolkit.
//!
//! Every function returns a [`LaceStatus`]; results are written through out
//! pointers. Objects cross the boundary as opaque handles that must be
//! released with the matching `*_free` function. Image buffers are dense
//! row-major `f64` arrays laid out channel-major as `(channels, height,
//! width)`, values nominally in `[-1, 1]`.
//!
//! A human-readable description of the most recent failure on the calling
//! thread is available via [`lace_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::slice;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lace_core::guidance::{mcg_multi, EditSpec, GuidanceMode, TranslationRequest};
use lace_core::metrics;
use lace_core::sampler::{translate_with, OraclePredictor, SamplerConfig, SamplerKind};
use lace_core::schedule::{forward_diffuse, make_schedule, LatentState, NoiseSchedule, ScheduleKind};
use lace_core::world::{generate_sample, AttributeSchema, GaussianWorld, Prompt};

/// Status codes returned by every API function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LaceStatus {
    /// The call succeeded.
    LaceOk = 0,
    /// A required pointer argument was null.
    LaceNullPointer = 1,
    /// An argument was out of range or inconsistent.
    LaceInvalidArgument = 2,
    /// The operation itself failed; see `lace_last_error`.
    LaceRuntimeError = 3,
}

use LaceStatus::*;

/// Attribute schema handle (domains and their values).
pub struct LaceSchema(AttributeSchema);
/// Noise-schedule handle.
pub struct LaceSchedule(NoiseSchedule);
/// Analytic Gaussian world handle (closed-form noise oracle).
pub struct LaceWorld(GaussianWorld);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: impl AsRef<str>) -> LaceStatus {
    let cleaned: String = msg.as_ref().chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
    LaceRuntimeError
}

fn set_invalid(msg: impl AsRef<str>) -> LaceStatus {
    set_error(msg);
    LaceInvalidArgument
}

/// Returns a pointer to a NUL-terminated description of the most recent
/// error on this thread. Valid until the next failing call on the same
/// thread. Never null.
#[no_mangle]
pub extern "C" fn lace_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lace_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

macro_rules! nonnull {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(concat!("null pointer argument: ", stringify!($p)));
            return LaceNullPointer;
        })+
    };
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Creates the built-in shapes schema (shape/color/background with 3/3/2
/// values). The handle must be released with `lace_schema_free`.
#[no_mangle]
pub extern "C" fn lace_schema_default(out: *mut *mut LaceSchema) -> LaceStatus {
    nonnull!(out);
    let handle = Box::new(LaceSchema(AttributeSchema::shapes_default()));
    unsafe { *out = Box::into_raw(handle) };
    LaceOk
}

/// Releases a schema handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn lace_schema_free(schema: *mut LaceSchema) {
    if !schema.is_null() {
        drop(unsafe { Box::from_raw(schema) });
    }
}

/// Writes the number of attribute domains.
#[no_mangle]
pub extern "C" fn lace_schema_num_domains(
    schema: *const LaceSchema,
    out: *mut usize,
) -> LaceStatus {
    nonnull!(schema, out);
    unsafe { *out = (*schema).0.num_domains() };
    LaceOk
}

/// Writes the number of values in the given domain.
#[no_mangle]
pub extern "C" fn lace_schema_num_values(
    schema: *const LaceSchema,
    domain: usize,
    out: *mut usize,
) -> LaceStatus {
    nonnull!(schema, out);
    let s = unsafe { &(*schema).0 };
    if domain >= s.num_domains() {
        return set_invalid(format!("domain {domain} out of range"));
    }
    unsafe { *out = s.domains()[domain].1.len() };
    LaceOk
}

fn prompt_from_values(schema: &AttributeSchema, values: &[usize]) -> Result<Prompt, LaceStatus> {
    if values.len() != schema.num_domains() {
        return Err(set_invalid(format!(
            "expected {} attribute values, got {}",
            schema.num_domains(),
            values.len()
        )));
    }
    for (d, &v) in values.iter().enumerate() {
        if v >= schema.domains()[d].1.len() {
            return Err(set_invalid(format!("value {v} out of range for domain {d}")));
        }
    }
    Ok(Prompt::from_indices(values))
}

/// Renders one procedural image for the given attribute assignment into
/// `out` (length `3 * height * width`, channel-major).
#[no_mangle]
pub extern "C" fn lace_render_sample(
    schema: *const LaceSchema,
    values: *const usize,
    num_values: usize,
    seed: u64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(schema, values, out);
    let s = unsafe { &(*schema).0 };
    let vals = unsafe { slice::from_raw_parts(values, num_values) };
    let prompt = match prompt_from_values(s, vals) {
        Ok(p) => p,
        Err(st) => return st,
    };
    match generate_sample(s, &prompt, seed, (height, width)) {
        Ok(img) => {
            let flat = img.data.as_standard_layout();
            let dst = unsafe { slice::from_raw_parts_mut(out, 3 * height * width) };
            dst.copy_from_slice(flat.as_slice().unwrap());
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Builds a noise schedule. `kind` is 0 for linear, 1 for cosine (which
/// ignores the beta bounds). The handle must be released with
/// `lace_schedule_free`.
#[no_mangle]
pub extern "C" fn lace_schedule_new(
    kind: u32,
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut LaceSchedule,
) -> LaceStatus {
    nonnull!(out);
    let kind = match kind {
        0 => ScheduleKind::Linear,
        1 => ScheduleKind::Cosine,
        other => return set_invalid(format!("unknown schedule kind {other}")),
    };
    match make_schedule(kind, num_steps, beta_start, beta_end) {
        Ok(s) => {
            unsafe { *out = Box::into_raw(Box::new(LaceSchedule(s))) };
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Releases a schedule handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn lace_schedule_free(schedule: *mut LaceSchedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Writes the cumulative signal coefficient alpha_bar at timestep `t`
/// (0 <= t <= T; alpha_bar at 0 is 1).
#[no_mangle]
pub extern "C" fn lace_schedule_alpha_bar(
    schedule: *const LaceSchedule,
    t: usize,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(schedule, out);
    let s = unsafe { &(*schedule).0 };
    if t > s.num_steps() {
        return set_invalid(format!("timestep {t} exceeds schedule length"));
    }
    unsafe { *out = s.alpha_bar(t) };
    LaceOk
}

fn state_from_buf(
    buf: *const f64,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<LatentState, LaceStatus> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(set_invalid("image dimensions must be nonzero"));
    }
    let len = channels * height * width;
    let data = unsafe { slice::from_raw_parts(buf, len) };
    let arr = Array3::from_shape_vec((channels, height, width), data.to_vec())
        .map_err(|e| set_error(e.to_string()))?;
    Ok(LatentState::clean(arr))
}

fn write_buf(img: &LatentState, out: *mut f64) {
    let flat = img.data.as_standard_layout();
    let src = flat.as_slice().unwrap();
    let dst = unsafe { slice::from_raw_parts_mut(out, src.len()) };
    dst.copy_from_slice(src);
}

/// Applies the closed-form forward noising `x_t = sqrt(ab_t) x0 +
/// sqrt(1 - ab_t) noise`. `x0`, `noise`, and `out` all have length
/// `channels * height * width`.
#[no_mangle]
pub extern "C" fn lace_forward_diffuse(
    schedule: *const LaceSchedule,
    x0: *const f64,
    noise: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    t: usize,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(schedule, x0, noise, out);
    let sched = unsafe { &(*schedule).0 };
    let x0 = match state_from_buf(x0, channels, height, width) {
        Ok(v) => v,
        Err(st) => return st,
    };
    let len = channels * height * width;
    let noise = unsafe { slice::from_raw_parts(noise, len) };
    let noise = Array3::from_shape_vec((channels, height, width), noise.to_vec()).unwrap();
    match forward_diffuse(&x0, t, &noise, sched) {
        Ok(x_t) => {
            write_buf(&x_t, out);
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Guidance algebra
// ---------------------------------------------------------------------------

/// Combines a source noise prediction with `num_variants` single-edit
/// target predictions: `out = src + sum_d scale_d * (tgt_d - src)`.
/// `targets` is the concatenation of the variant buffers, each of length
/// `len`.
#[no_mangle]
pub extern "C" fn lace_mcg_combine(
    src: *const f64,
    targets: *const f64,
    num_variants: usize,
    scales: *const f64,
    len: usize,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(src, targets, scales, out);
    if len == 0 || num_variants == 0 {
        return set_invalid("len and num_variants must be nonzero");
    }
    let src = unsafe { slice::from_raw_parts(src, len) };
    let tgts = unsafe { slice::from_raw_parts(targets, num_variants * len) };
    let scales = unsafe { slice::from_raw_parts(scales, num_variants) };
    let src_arr = Array3::from_shape_vec((1, 1, len), src.to_vec()).unwrap();
    let tgt_arrs: Vec<Array3<f64>> = tgts
        .chunks_exact(len)
        .map(|c| Array3::from_shape_vec((1, 1, len), c.to_vec()).unwrap())
        .collect();
    match mcg_multi(&src_arr, &tgt_arrs, scales) {
        Ok(combined) => {
            let flat = combined.as_standard_layout();
            let dst = unsafe { slice::from_raw_parts_mut(out, len) };
            dst.copy_from_slice(flat.as_slice().unwrap());
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Analytic Gaussian world
// ---------------------------------------------------------------------------

/// Creates a randomly parameterized Gaussian mixture world over the schema
/// with latent shape `(channels, height, width)`. The handle must be
/// released with `lace_world_free`.
#[no_mangle]
pub extern "C" fn lace_world_new(
    schema: *const LaceSchema,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut LaceWorld,
) -> LaceStatus {
    nonnull!(schema, out);
    if channels == 0 || height == 0 || width == 0 {
        return set_invalid("world shape must be nonzero");
    }
    let s = unsafe { &(*schema).0 };
    let world = GaussianWorld::random(s.clone(), (channels, height, width), seed);
    unsafe { *out = Box::into_raw(Box::new(LaceWorld(world))) };
    LaceOk
}

/// Releases a world handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn lace_world_free(world: *mut LaceWorld) {
    if !world.is_null() {
        drop(unsafe { Box::from_raw(world) });
    }
}

/// Draws one clean sample for the given attribute assignment into `out`
/// (length `channels * height * width` of the world's shape).
#[no_mangle]
pub extern "C" fn lace_world_sample(
    world: *const LaceWorld,
    values: *const usize,
    num_values: usize,
    seed: u64,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(world, values, out);
    let w = unsafe { &(*world).0 };
    let vals = unsafe { slice::from_raw_parts(values, num_values) };
    let prompt = match prompt_from_values(w.schema(), vals) {
        Ok(p) => p,
        Err(st) => return st,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match w.sample_x0(&prompt, &mut rng) {
        Ok(x0) => {
            write_buf(&x0, out);
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Runs deterministic inversion plus multi-domain guided resampling against
/// the world's closed-form noise oracle. `x0` and `out` have the world's
/// buffer length. Edits are parallel arrays of `num_edits` entries.
#[no_mangle]
pub extern "C" fn lace_world_translate(
    world: *const LaceWorld,
    schedule: *const LaceSchedule,
    x0: *const f64,
    source_values: *const usize,
    num_values: usize,
    edit_domains: *const usize,
    edit_values: *const usize,
    edit_scales: *const f64,
    num_edits: usize,
    steps: usize,
    out: *mut f64,
) -> LaceStatus {
    nonnull!(world, schedule, x0, source_values, edit_domains, edit_values, edit_scales, out);
    let w = unsafe { &(*world).0 };
    let sched = unsafe { &(*schedule).0 };
    let (c, h, wd) = w.shape();
    let source = {
        let vals = unsafe { slice::from_raw_parts(source_values, num_values) };
        match prompt_from_values(w.schema(), vals) {
            Ok(p) => p,
            Err(st) => return st,
        }
    };
    let doms = unsafe { slice::from_raw_parts(edit_domains, num_edits) };
    let vals = unsafe { slice::from_raw_parts(edit_values, num_edits) };
    let scls = unsafe { slice::from_raw_parts(edit_scales, num_edits) };
    let edits: Vec<EditSpec> = doms
        .iter()
        .zip(vals.iter().zip(scls.iter()))
        .map(|(&domain, (&target_value, &scale))| EditSpec {
            domain,
            target_value,
            scale,
        })
        .collect();
    let request = match TranslationRequest::new(w.schema(), source, edits) {
        Ok(r) => r,
        Err(e) => return set_invalid(e.to_string()),
    };
    let x0 = match state_from_buf(x0, c, h, wd) {
        Ok(v) => v,
        Err(st) => return st,
    };
    if steps == 0 || steps > sched.num_steps() {
        return set_invalid(format!(
            "steps must be in [1, {}], got {steps}",
            sched.num_steps()
        ));
    }
    let predictor = OraclePredictor {
        world: w,
        schedule: sched,
    };
    let config = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps,
        eta: 0.0,
        guidance: GuidanceMode::Mcg,
        seed: 0,
        // Gaussian-world values are not pixel-ranged, so no final clamp.
        clamp_final: false,
    };
    match translate_with(&x0, &request, &predictor, sched, &config) {
        Ok(img) => {
            write_buf(&img, out);
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn metric2(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    f: impl Fn(&Array3<f64>, &Array3<f64>) -> lace_core::error::Result<f64>,
) -> LaceStatus {
    nonnull!(a, b, out);
    let a = match state_from_buf(a, channels, height, width) {
        Ok(v) => v,
        Err(st) => return st,
    };
    let b = match state_from_buf(b, channels, height, width) {
        Ok(v) => v,
        Err(st) => return st,
    };
    match f(&a.data, &b.data) {
        Ok(v) => {
            unsafe { *out = v };
            LaceOk
        }
        Err(e) => set_error(e.to_string()),
    }
}

/// Mean squared error between two equally shaped buffers.
#[no_mangle]
pub extern "C" fn lace_mse(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> LaceStatus {
    metric2(a, b, channels, height, width, out, metrics::mse)
}

/// PSNR in dB over the [-1, 1] range, capped at 99.
#[no_mangle]
pub extern "C" fn lace_psnr(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> LaceStatus {
    metric2(a, b, channels, height, width, out, |x, y| {
        metrics::psnr(x, y, 2.0)
    })
}

/// Mean SSIM (11x11 Gaussian windows). Requires height and width >= 11.
#[no_mangle]
pub extern "C" fn lace_ssim(
    a: *const f64,
    b: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> LaceStatus {
    metric2(a, b, channels, height, width, out, metrics::ssim)
}
