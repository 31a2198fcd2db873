//! Reverse-process machinery: DDPM ancestral steps, deterministic DDIM
//! steps, DDIM inversion, and the translate pipeline (invert, then resample
//! under multi-domain guidance).

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{
    build_image_tokens, AdapterParams, ConditioningMode, GlobalEncoder, LocalEncoder, TokenBundle,
};
use crate::denoiser::{predict_noise, DenoiserModel};
use crate::error::{LaceError, Result};
use crate::guidance::{build_prompt_variants, mcg_multi, GuidanceMode, TranslationRequest};
use crate::schedule::{LatentState, NoiseSchedule};
use crate::world::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Inference step count S <= T.
    pub steps: usize,
    /// DDIM stochasticity in [0, 1]; ignored by DDPM.
    pub eta: f64,
    pub guidance: GuidanceMode,
    pub seed: u64,
    /// Clamp the final sample to the image data range [-1, 1]. Disable when
    /// sampling in abstract (non-image) spaces whose support exceeds it.
    pub clamp_final: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            guidance: GuidanceMode::Mcg,
            seed: 0,
            clamp_final: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps < 1 || self.steps > schedule.num_steps() {
            return Err(LaceError::InvalidArgument(format!(
                "step count {} outside [1, {}]",
                self.steps,
                schedule.num_steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(LaceError::InvalidArgument(format!(
                "eta {} outside [0, 1]",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Strictly decreasing timestep subsequence T = t_1 > ... > t_S >= 1,
/// uniformly spaced, always ending at 1 and starting at T.
pub fn timestep_subsequence(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let t_max = schedule.num_steps();
    if steps >= t_max {
        return (1..=t_max).rev().collect();
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let f = 1.0 + (t_max - 1) as f64 * (1.0 - i as f64 / (steps - 1).max(1) as f64);
            f.round() as usize
        })
        .collect();
    ts.dedup();
    ts
}

/// One DDPM ancestral step from t to t-1.
pub fn ddpm_step(
    x_t: &LatentState,
    eps: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Array3<f64>,
) -> Result<LatentState> {
    if t < 1 || t > schedule.num_steps() {
        return Err(LaceError::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.num_steps(),
        });
    }
    if x_t.data.shape() != eps.shape() || x_t.data.shape() != noise.shape() {
        return Err(LaceError::ShapeMismatch {
            expected: format!("{:?}", x_t.data.shape()),
            got: format!("{:?} / {:?}", eps.shape(), noise.shape()),
        });
    }
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let abar = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let sigma = if t == 1 {
        0.0
    } else {
        (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt()
    };
    let coef = beta / (1.0 - abar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut data = Array3::zeros(x_t.data.raw_dim());
    ndarray::Zip::from(&mut data)
        .and(&x_t.data)
        .and(eps)
        .and(noise)
        .for_each(|o, &x, &e, &z| {
            *o = inv_sqrt_alpha * (x - coef * e) + sigma * z;
        });
    Ok(LatentState {
        data,
        timestep: t - 1,
    })
}

/// One DDIM step from t down to t_prev (possibly skipping timesteps).
pub fn ddim_step(
    x_t: &LatentState,
    eps: &Array3<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: &Array3<f64>,
) -> Result<LatentState> {
    if t_prev >= t {
        return Err(LaceError::InvalidArgument(format!(
            "ddim step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if t > schedule.num_steps() {
        return Err(LaceError::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.num_steps(),
        });
    }
    let abar = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t_prev);
    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - abar_prev) / (1.0 - abar)).sqrt() * (1.0 - abar / abar_prev).sqrt()
    };
    let dir = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let mut data = Array3::zeros(x_t.data.raw_dim());
    ndarray::Zip::from(&mut data)
        .and(&x_t.data)
        .and(eps)
        .and(noise)
        .for_each(|o, &x, &e, &z| {
            let x0_hat = (x - (1.0 - abar).sqrt() * e) / abar.sqrt();
            *o = abar_prev.sqrt() * x0_hat + dir * e + sigma * z;
        });
    Ok(LatentState {
        data,
        timestep: t_prev,
    })
}

/// Noise predictor abstraction so samplers run against either the trained
/// model or the analytic Gaussian-world oracle.
pub trait NoisePredictor {
    fn predict(&self, x_t: &LatentState, prompt: &Prompt, t: usize) -> Result<Array3<f64>>;
}

/// Oracle predictor over the additive-mean Gaussian world.
pub struct OraclePredictor<'a> {
    pub world: &'a crate::world::GaussianWorld,
    pub schedule: &'a NoiseSchedule,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&self, x_t: &LatentState, prompt: &Prompt, t: usize) -> Result<Array3<f64>> {
        let state = LatentState {
            data: x_t.data.clone(),
            timestep: t,
        };
        self.world.analytic_epsilon(&state, prompt, self.schedule)
    }
}

/// Trained-model predictor carrying fixed image tokens.
pub struct ModelPredictor<'a> {
    pub model: &'a DenoiserModel,
    pub image_tokens: Option<&'a TokenBundle>,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, x_t: &LatentState, prompt: &Prompt, t: usize) -> Result<Array3<f64>> {
        let c_t = self
            .model
            .embed
            .embed_prompt(&self.model.store.values, prompt)?;
        predict_noise(self.model, x_t, &c_t, self.image_tokens, t)
    }
}

/// Deterministic DDIM inversion: run the update in reverse (t_prev -> t)
/// with the predictor evaluated at the current state.
pub fn ddim_invert<P: NoisePredictor>(
    x0: &LatentState,
    prompt: &Prompt,
    predictor: &P,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<LatentState> {
    if x0.timestep != 0 {
        return Err(LaceError::InvalidArgument(format!(
            "inversion starts from a clean image, got timestep {}",
            x0.timestep
        )));
    }
    let mut ts = timestep_subsequence(schedule, steps);
    ts.reverse(); // ascending: t_1 < ... < T
    let mut x = x0.clone();
    let mut prev = 0usize;
    for &t in &ts {
        let abar = schedule.alpha_bar(t);
        let abar_prev = schedule.alpha_bar(prev);
        // The deterministic ddim_step from t to prev evaluates eps at x_t,
        // so its exact inverse is implicit in x_t. Solve it by fixed-point
        // iteration, seeding eps at the current (lower-noise) state; the
        // update is a contraction for every predictor this crate uses.
        let step = |eps: &Array3<f64>| -> Array3<f64> {
            let mut data = Array3::zeros(x.data.raw_dim());
            ndarray::Zip::from(&mut data)
                .and(&x.data)
                .and(eps)
                .for_each(|o, &xv, &e| {
                    let x0_hat = (xv - (1.0 - abar_prev).sqrt() * e) / abar_prev.sqrt();
                    *o = abar.sqrt() * x0_hat + (1.0 - abar).sqrt() * e;
                });
            data
        };
        let mut eps = predictor.predict(&x, prompt, t)?;
        let mut cand = step(&eps);
        // Stop once the update has shrunk to 1e-3 of its initial size (with
        // an absolute floor): the residual contraction error is then orders
        // of magnitude below every roundtrip bound, and expensive neural
        // predictors stay affordable.
        let mut delta0 = f64::INFINITY;
        for _ in 0..49 {
            let state = LatentState {
                data: cand.clone(),
                timestep: t,
            };
            eps = predictor.predict(&state, prompt, t)?;
            let next = step(&eps);
            let delta = (&next - &cand)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            cand = next;
            if delta0.is_infinite() {
                delta0 = delta;
            }
            if delta < (1e-3 * delta0).max(1e-12) {
                break;
            }
        }
        x = LatentState {
            data: cand,
            timestep: t,
        };
        prev = t;
    }
    Ok(x)
}

/// Reverse sampling from x_T using a per-step guided noise prediction.
/// `guide` maps (state, t) to the combined eps.
fn sample_loop<F>(
    x_start: &LatentState,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    mut guide: F,
) -> Result<LatentState>
where
    F: FnMut(&LatentState, usize) -> Result<Array3<f64>>,
{
    config.validate(schedule)?;
    let ts = timestep_subsequence(schedule, config.steps);
    if x_start.timestep != ts[0] {
        return Err(LaceError::InvalidArgument(format!(
            "sampling starts at timestep {}, state is at {}",
            ts[0], x_start.timestep
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = x_start.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps = guide(&x, t)?;
        let noise =
            Array3::from_shape_fn(x.data.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        x = match config.kind {
            SamplerKind::Ddpm => ddpm_step(&x, &eps, t, schedule, &noise)?,
            SamplerKind::Ddim => ddim_step(&x, &eps, t, t_prev, schedule, config.eta, &noise)?,
        };
    }
    // Clamp to the data range only at the final step.
    if config.clamp_final {
        x.data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }
    Ok(x)
}

/// Plain (unguided) sampling under a single prompt.
pub fn sample<P: NoisePredictor>(
    x_start: &LatentState,
    prompt: &Prompt,
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<LatentState> {
    sample_loop(x_start, schedule, config, |x, t| {
        predictor.predict(x, prompt, t)
    })
}

/// Full translation: invert the source image under the source prompt, then
/// resample with MCG (or CFG) combining the prompt-variant predictions.
pub fn translate_with<P: NoisePredictor>(
    image: &LatentState,
    request: &TranslationRequest,
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<LatentState> {
    config.validate(schedule)?;
    let (source, variants) = build_prompt_variants(request);
    let scales = request.scales();
    let x_t = ddim_invert(image, &source, predictor, schedule, config.steps)?;
    sample_loop(&x_t, schedule, config, |x, t| match config.guidance {
        GuidanceMode::None => predictor.predict(x, &source, t),
        GuidanceMode::Cfg { weight } => {
            // CFG baseline: guide from the unconditional branch toward the
            // full target prompt.
            let target = request.target_prompt();
            let eps_tgt = predictor.predict(x, &target, t)?;
            let uncond = source.to_unconditional();
            let eps_u = predictor.predict(x, &uncond, t)?;
            crate::guidance::cfg_guide(&eps_u, &eps_tgt, weight)
        }
        GuidanceMode::Mcg => {
            let eps_src = predictor.predict(x, &source, t)?;
            let eps_targets: Vec<Array3<f64>> = variants
                .iter()
                .map(|v| predictor.predict(x, v, t))
                .collect::<Result<_>>()?;
            mcg_multi(&eps_src, &eps_targets, &scales)
        }
    })
}

/// Translation with the trained stack: encodes the source image's tokens
/// once, inverts under the source prompt, then resamples under guidance.
pub fn translate(
    image: &LatentState,
    request: &TranslationRequest,
    model: &DenoiserModel,
    global: &GlobalEncoder,
    local: &LocalEncoder,
    adapter: &AdapterParams,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<LatentState> {
    if !model.trained {
        return Err(LaceError::NotReady("denoiser is untrained".into()));
    }
    let bundle = build_image_tokens(model.mode, image, global, local, adapter)?;
    if model.mode != ConditioningMode::TextOnly && !adapter.trained {
        return Err(LaceError::NotReady("adapter is untrained".into()));
    }
    let predictor = ModelPredictor {
        model,
        image_tokens: bundle.as_ref(),
    };
    translate_with(image, request, &predictor, schedule, config)
}

/// One translate output per scale grid point, reusing a single inversion.
/// Every grid row applies its scales to the same edit list.
pub fn sweep_scales<P: NoisePredictor>(
    image: &LatentState,
    request: &TranslationRequest,
    grid: &[Vec<f64>],
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<LatentState>> {
    if grid.is_empty() {
        return Err(LaceError::InvalidArgument("empty scale grid".into()));
    }
    for row in grid {
        if row.len() != request.edits.len() {
            return Err(LaceError::InvalidArgument(format!(
                "grid row has {} scales for {} edits",
                row.len(),
                request.edits.len()
            )));
        }
    }
    config.validate(schedule)?;
    let (source, variants) = build_prompt_variants(request);
    let x_t = ddim_invert(image, &source, predictor, schedule, config.steps)?;
    let mut outs = Vec::with_capacity(grid.len());
    for row in grid {
        let out = sample_loop(&x_t, schedule, config, |x, t| {
            let eps_src = predictor.predict(x, &source, t)?;
            let eps_targets: Vec<Array3<f64>> = variants
                .iter()
                .map(|v| predictor.predict(x, v, t))
                .collect::<Result<_>>()?;
            mcg_multi(&eps_src, &eps_targets, row)
        })?;
        outs.push(out);
    }
    Ok(outs)
}

/// Tile sampler outputs into one contact-sheet image, row-major.
pub fn contact_sheet(images: &[LatentState], columns: usize) -> Result<Array3<f64>> {
    if images.is_empty() || columns == 0 {
        return Err(LaceError::InvalidArgument("empty contact sheet".into()));
    }
    let (c, h, w) = images[0].shape();
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(LaceError::ShapeMismatch {
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", img.shape()),
            });
        }
    }
    let rows = images.len().div_ceil(columns);
    let pad = 2usize;
    let sheet_h = rows * (h + pad) + pad;
    let sheet_w = columns * (w + pad) + pad;
    let mut sheet = Array3::from_elem((c, sheet_h, sheet_w), -1.0);
    for (i, img) in images.iter().enumerate() {
        let (ry, rx) = (i / columns, i % columns);
        let oy = pad + ry * (h + pad);
        let ox = pad + rx * (w + pad);
        sheet
            .slice_mut(ndarray::s![.., oy..oy + h, ox..ox + w])
            .assign(&img.data);
    }
    Ok(sheet)
}
