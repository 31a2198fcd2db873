//! Discrete forward-diffusion process: schedule construction, noising, and
//! the coefficient algebra shared by every sampler.
//!
//! Math timesteps are 1-based (`t = 0` is clean data); stored arrays are
//! 0-based, so `betas[i]` holds the math-level `beta_{i+1}`. Use
//! [`NoiseSchedule::beta`] / [`NoiseSchedule::alpha_bar`] to stay in math
//! indexing.

use ndarray::Array3;

use crate::error::{LaceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Constants of the discrete forward process: beta_t, alpha_t = 1 - beta_t
/// and the cumulative products alpha_bar_t.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from explicit beta values (mainly for hand-checked
    /// test cases).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(LaceError::InvalidSchedule("no betas given".into()));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(LaceError::InvalidSchedule(
                "betas must lie in (0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            num_steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// beta_t for math timestep t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps, "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// alpha_t for math timestep t in [1, T].
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps, "alpha index {t} out of range");
        self.alphas[t - 1]
    }

    /// alpha_bar_t for math timestep t in [0, T]; alpha_bar_0 = 1 by
    /// convention so that t = 0 denotes clean data.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.num_steps, "alpha_bar index {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// An image and its position along the diffusion trajectory. `timestep = 0`
/// is clean data in [-1, 1]; `timestep = t > 0` is a draw from q(x_t | x_0).
#[derive(Debug, Clone)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub timestep: usize,
}

impl LatentState {
    pub fn clean(data: Array3<f64>) -> Self {
        LatentState { data, timestep: 0 }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Build a noise schedule. `beta_start`/`beta_end` apply to the linear kind;
/// the cosine kind ignores them and uses the squared-cosine alpha_bar curve
/// with offset s = 0.008.
pub fn make_schedule(
    kind: ScheduleKind,
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(LaceError::InvalidSchedule(format!(
            "need at least 2 steps, got {num_steps}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(LaceError::InvalidSchedule(format!(
                    "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
                )));
            }
            let step = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + step * i as f64)
                .collect::<Vec<_>>()
        }
        ScheduleKind::Cosine => {
            // beta_t derived from the squared-cosine alpha_bar curve,
            // clipped at 0.999 like the reference formulation.
            let s = 0.008;
            let f = |u: f64| {
                let x = ((u / num_steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=num_steps)
                .map(|t| {
                    let beta = 1.0 - f(t as f64) / f((t - 1) as f64);
                    beta.clamp(1e-8, 0.999)
                })
                .collect::<Vec<_>>()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise.
pub fn forward_diffuse(
    x0: &LatentState,
    t: usize,
    noise: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    if x0.timestep != 0 {
        return Err(LaceError::InvalidArgument(format!(
            "forward_diffuse expects clean data, got timestep {}",
            x0.timestep
        )));
    }
    if t < 1 || t > schedule.num_steps() {
        return Err(LaceError::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.num_steps(),
        });
    }
    if noise.shape() != x0.data.shape() {
        return Err(LaceError::ShapeMismatch {
            expected: format!("{:?}", x0.data.shape()),
            got: format!("{:?}", noise.shape()),
        });
    }
    let ab = schedule.alpha_bar(t);
    let data = ab.sqrt() * &x0.data + (1.0 - ab).sqrt() * noise;
    Ok(LatentState { data, timestep: t })
}
