//! Analytic Gaussian world: per-prompt data distribution N(mu_c, sigma^2 I)
//! with additive per-domain mean offsets, giving the Bayes-optimal noise
//! predictor in closed form. This is the exact oracle behind the guidance
//! and sampler acceptance checks.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AttributeSchema, Prompt};
use crate::error::{LaceError, Result};
use crate::schedule::{LatentState, NoiseSchedule};

#[derive(Debug, Clone)]
pub struct GaussianWorld {
    schema: AttributeSchema,
    shape: (usize, usize, usize),
    base_mean: Array1<f64>,
    /// offsets[d][v] is the mean shift contributed by value v of domain d.
    offsets: Vec<Vec<Array1<f64>>>,
    data_std: f64,
}

impl GaussianWorld {
    pub fn new(
        schema: AttributeSchema,
        shape: (usize, usize, usize),
        base_mean: Array1<f64>,
        offsets: Vec<Vec<Array1<f64>>>,
        data_std: f64,
    ) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if base_mean.len() != n {
            return Err(LaceError::ShapeMismatch {
                expected: format!("{n}"),
                got: format!("{}", base_mean.len()),
            });
        }
        if data_std <= 0.0 {
            return Err(LaceError::InvalidArgument("data_std must be > 0".into()));
        }
        if offsets.len() != schema.num_domains() {
            return Err(LaceError::InvalidArgument(
                "one offset family per domain required".into(),
            ));
        }
        for (d, (name, values)) in schema.domains().iter().enumerate() {
            if offsets[d].len() != values.len() {
                return Err(LaceError::UnknownDomain(name.clone()));
            }
            for o in &offsets[d] {
                if o.len() != n || o.iter().any(|v| !v.is_finite()) {
                    return Err(LaceError::InvalidArgument(format!(
                        "bad offset in domain {name:?}"
                    )));
                }
            }
        }
        Ok(GaussianWorld {
            schema,
            shape,
            base_mean,
            offsets,
            data_std,
        })
    }

    /// A reproducible random world over the given schema.
    pub fn random(schema: AttributeSchema, shape: (usize, usize, usize), seed: u64) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_mean = Array1::from_iter((0..n).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)));
        let offsets = schema
            .domains()
            .iter()
            .map(|(_, values)| {
                values
                    .iter()
                    .map(|_| {
                        Array1::from_iter(
                            (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)),
                        )
                    })
                    .collect()
            })
            .collect();
        GaussianWorld::new(schema, shape, base_mean, offsets, 0.3).expect("random world is valid")
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    /// mu_c = mu_0 + sum_d offsets[d][c[d]] for a fully assigned prompt.
    pub fn prompt_mean(&self, prompt: &Prompt) -> Result<Array1<f64>> {
        let mut mean = self.base_mean.clone();
        for d in 0..self.schema.num_domains() {
            let v = prompt
                .value(d)
                .ok_or_else(|| LaceError::UnassignedDomain(self.schema.domains()[d].0.clone()))?;
            mean += &self.offsets[d][v];
        }
        Ok(mean)
    }

    /// Draw x_0 ~ N(mu_c, sigma^2 I).
    pub fn sample_x0<R: Rng>(&self, prompt: &Prompt, rng: &mut R) -> Result<LatentState> {
        let mean = self.prompt_mean(prompt)?;
        let data = mean.mapv(|m| m + self.data_std * rng.sample::<f64, _>(StandardNormal));
        let data = data
            .into_shape_with_order(self.shape)
            .expect("length checked at construction");
        Ok(LatentState::clean(data))
    }

    /// Posterior variance of x_t given the prompt: alpha_bar sigma^2 + (1 - alpha_bar).
    fn marginal_variance(&self, alpha_bar: f64) -> f64 {
        alpha_bar * self.data_std * self.data_std + (1.0 - alpha_bar)
    }

    /// The x_t coefficient of the affine predictor; prompt-independent, which
    /// is what makes multi-domain composition exact in this world.
    pub fn epsilon_slope(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        let ab = schedule.alpha_bar(t);
        (1.0 - ab).sqrt() / self.marginal_variance(ab)
    }

    /// Bayes-optimal noise prediction E[eps | x_t, c].
    ///
    /// Conditional prompts use the Gaussian posterior:
    ///   eps*(x_t) = sqrt(1 - ab) (x_t - sqrt(ab) mu_c) / (ab sigma^2 + 1 - ab).
    /// The unconditional prompt is the uniform mixture over all fully
    /// assigned prompts, so eps* is the responsibility-weighted average of
    /// the per-prompt predictions.
    pub fn analytic_epsilon(
        &self,
        x_t: &LatentState,
        prompt: &Prompt,
        schedule: &NoiseSchedule,
    ) -> Result<Array3<f64>> {
        if x_t.timestep == 0 {
            return Err(LaceError::TimestepOutOfRange {
                t: 0,
                lo: 1,
                hi: schedule.num_steps(),
            });
        }
        if x_t.shape() != self.shape {
            return Err(LaceError::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", x_t.shape()),
            });
        }
        let ab = schedule.alpha_bar(x_t.timestep);
        let a = ab.sqrt();
        let v = self.marginal_variance(ab);
        let slope = (1.0 - ab).sqrt() / v;
        let flat = x_t
            .data
            .to_shape(self.base_mean.len())
            .expect("shape checked")
            .to_owned();

        if prompt.is_unconditional() {
            let prompts = self.schema.all_prompts();
            // log responsibilities, uniform mixture weights.
            let mut logs = Vec::with_capacity(prompts.len());
            let mut means = Vec::with_capacity(prompts.len());
            for p in &prompts {
                let mu = self.prompt_mean(p)?;
                let sq: f64 = flat
                    .iter()
                    .zip(mu.iter())
                    .map(|(x, m)| (x - a * m).powi(2))
                    .sum();
                logs.push(-sq / (2.0 * v));
                means.push(mu);
            }
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut eps = Array1::<f64>::zeros(flat.len());
            for (w, mu) in weights.iter().zip(means.iter()) {
                let contrib = (&flat - &(a * mu)) * (slope * w / total);
                eps += &contrib;
            }
            return Ok(eps.into_shape_with_order(self.shape).expect("shape"));
        }

        let mu = self.prompt_mean(prompt)?;
        let eps = (&flat - &(a * &mu)) * slope;
        Ok(eps.into_shape_with_order(self.shape).expect("shape"))
    }
}
