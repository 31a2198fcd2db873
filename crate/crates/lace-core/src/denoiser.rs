//! The trainable noise predictor: a small conv encoder-decoder with two
//! downsampling stages, timestep embeddings at every stage, and one
//! cross-attention block per resolution attending to [c_t ; c_i].

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{ConditioningMode, EmbedTable, PromptEmbedding, TokenBundle};
use crate::error::{LaceError, Result};
use crate::nn::{
    silu, silu_backward, timestep_features, upsample2, upsample2_backward, Adam, Conv2d,
    Conv2dCache, CrossAttention, CrossAttentionCache, GroupNorm, GroupNormCache, Linear,
    LinearCache, ParamStore,
};
use crate::schedule::{forward_diffuse, LatentState, NoiseSchedule};
use crate::world::{AttributeSchema, Prompt};

/// Channel/width settings; the defaults match the shipped 32x32 model.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserDims {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub token_dim: usize,
}

impl Default for DenoiserDims {
    fn default() -> Self {
        DenoiserDims {
            c0: 16,
            c1: 24,
            c2: 32,
            groups: 4,
            time_dim: 32,
            token_dim: 128,
        }
    }
}

impl DenoiserDims {
    /// Roughly a thousand parameters, for finite-difference probes.
    pub fn tiny() -> Self {
        DenoiserDims {
            c0: 4,
            c1: 4,
            c2: 4,
            groups: 2,
            time_dim: 4,
            token_dim: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub condition_dropout: f64,
    pub seed: u64,
    pub mode: ConditioningMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(LaceError::InvalidArgument(format!(
                "condition dropout {} outside [0, 1)",
                self.condition_dropout
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(LaceError::InvalidArgument(
                "steps and batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 64,
            steps: 20_000,
            condition_dropout: 0.1,
            seed: 0,
            mode: ConditioningMode::TextOnly,
        }
    }
}

fn silu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

fn silu_vec_backward(x: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| {
        let v = x[i];
        let s = 1.0 / (1.0 + (-v).exp());
        g[i] * (s + v * s * (1.0 - s))
    })
}

/// GroupNorm -> SiLU -> conv -> (+ time bias) -> GroupNorm -> SiLU -> conv,
/// with an identity residual. Channel counts are unchanged.
#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    tproj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
}

struct ResBlockCache {
    gn1: GroupNormCache,
    z1: Array3<f64>,
    conv1: Conv2dCache,
    tcache: LinearCache,
    gn2: GroupNormCache,
    z2: Array3<f64>,
    conv2: Conv2dCache,
}

impl ResBlock {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        ch: usize,
        groups: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), ch, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            tproj: Linear::new(store, &format!("{name}.tproj"), time_dim, ch, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), ch, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, rng),
        }
    }

    fn forward(
        &self,
        values: &[f64],
        x: &Array3<f64>,
        temb_act: &Array1<f64>,
    ) -> (Array3<f64>, ResBlockCache) {
        let (z1raw, gn1c) = self.gn1.forward(values, x);
        let a1 = silu(&z1raw);
        let (h, conv1c) = self.conv1.forward(values, &a1);
        let temb2 = temb_act.clone().insert_axis(ndarray::Axis(0));
        let (tb, tcache) = self.tproj.forward(values, &temb2);
        let mut h_biased = h;
        for (ci, mut plane) in h_biased.outer_iter_mut().enumerate() {
            plane += tb[[0, ci]];
        }
        let (z2raw, gn2c) = self.gn2.forward(values, &h_biased);
        let a2 = silu(&z2raw);
        let (out, conv2c) = self.conv2.forward(values, &a2);
        (
            &out + x,
            ResBlockCache {
                gn1: gn1c,
                z1: z1raw,
                conv1: conv1c,
                tcache,
                gn2: gn2c,
                z2: z2raw,
                conv2: conv2c,
            },
        )
    }

    /// Returns (dx, d_temb_act).
    fn backward(
        &self,
        values: &[f64],
        grads: &mut [f64],
        cache: &ResBlockCache,
        gout: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>) {
        let da2 = self.conv2.backward(values, grads, &cache.conv2, gout);
        let dz2 = silu_backward(&cache.z2, &da2);
        let dh_biased = self.gn2.backward(values, grads, &cache.gn2, &dz2);
        // Time bias gradient: summed over spatial positions per channel.
        let ch = dh_biased.shape()[0];
        let mut dtb = Array2::zeros((1, ch));
        for ci in 0..ch {
            dtb[[0, ci]] = dh_biased.index_axis(ndarray::Axis(0), ci).sum();
        }
        let dtemb = self.tproj.backward(values, grads, &cache.tcache, &dtb);
        let da1 = self.conv1.backward(values, grads, &cache.conv1, &dh_biased);
        let dz1 = silu_backward(&cache.z1, &da1);
        let dx_path = self.gn1.backward(values, grads, &cache.gn1, &dz1);
        (&dx_path + gout, dtemb.row(0).to_owned())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub store: ParamStore,
    pub mode: ConditioningMode,
    pub dims: DenoiserDims,
    pub num_domains: usize,
    pub embed: EmbedTable,
    pub trained: bool,
    tl1: Linear,
    tl2: Linear,
    stem: Conv2d,
    rb1: ResBlock,
    at1: CrossAttention,
    down1: Conv2d,
    rb2: ResBlock,
    at2: CrossAttention,
    down2: Conv2d,
    rbm: ResBlock,
    atm: CrossAttention,
    upc1: Conv2d,
    rb3: ResBlock,
    at3: CrossAttention,
    upc2: Conv2d,
    rb4: ResBlock,
    gn_out: GroupNorm,
    out: Conv2d,
}

pub struct ForwardCache {
    t1: LinearCache,
    z_t1: Array2<f64>,
    t2: LinearCache,
    temb: Array1<f64>,
    stem: Conv2dCache,
    rb1: ResBlockCache,
    at1: CrossAttentionCache,
    d1: Conv2dCache,
    rb2: ResBlockCache,
    at2: CrossAttentionCache,
    d2: Conv2dCache,
    rbm: ResBlockCache,
    atm: CrossAttentionCache,
    upc1: Conv2dCache,
    rb3: ResBlockCache,
    at3: CrossAttentionCache,
    upc2: Conv2dCache,
    rb4: ResBlockCache,
    gn_out: GroupNormCache,
    z_out: Array3<f64>,
    out: Conv2dCache,
}

impl DenoiserModel {
    pub fn new(
        schema: &AttributeSchema,
        dims: DenoiserDims,
        mode: ConditioningMode,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = EmbedTable::new(&mut store, schema, dims.token_dim, &mut rng);
        let td = dims.time_dim;
        let tl1 = Linear::new(&mut store, "time.l1", td, td, &mut rng);
        let tl2 = Linear::new(&mut store, "time.l2", td, td, &mut rng);
        let (c0, c1, c2, g) = (dims.c0, dims.c1, dims.c2, dims.groups);
        let k = dims.token_dim;
        let stem = Conv2d::new(&mut store, "stem", 3, c0, 3, 1, 1, &mut rng);
        let rb1 = ResBlock::new(&mut store, "rb1", c0, g, td, &mut rng);
        let at1 = CrossAttention::new(&mut store, "at1", c0, k, c0, &mut rng);
        let down1 = Conv2d::new(&mut store, "down1", c0, c1, 3, 2, 1, &mut rng);
        let rb2 = ResBlock::new(&mut store, "rb2", c1, g, td, &mut rng);
        let at2 = CrossAttention::new(&mut store, "at2", c1, k, c1, &mut rng);
        let down2 = Conv2d::new(&mut store, "down2", c1, c2, 3, 2, 1, &mut rng);
        let rbm = ResBlock::new(&mut store, "rbm", c2, g, td, &mut rng);
        let atm = CrossAttention::new(&mut store, "atm", c2, k, c2, &mut rng);
        let upc1 = Conv2d::new(&mut store, "upc1", c2, c1, 3, 1, 1, &mut rng);
        let rb3 = ResBlock::new(&mut store, "rb3", c1, g, td, &mut rng);
        let at3 = CrossAttention::new(&mut store, "at3", c1, k, c1, &mut rng);
        let upc2 = Conv2d::new(&mut store, "upc2", c1, c0, 3, 1, 1, &mut rng);
        let rb4 = ResBlock::new(&mut store, "rb4", c0, g, td, &mut rng);
        let gn_out = GroupNorm::new(&mut store, "gn_out", c0, g);
        let out = Conv2d::new(&mut store, "out", c0, 3, 3, 1, 1, &mut rng);
        DenoiserModel {
            store,
            mode,
            dims,
            num_domains: schema.num_domains(),
            embed,
            trained: false,
            tl1,
            tl2,
            stem,
            rb1,
            at1,
            down1,
            rb2,
            at2,
            down2,
            rbm,
            atm,
            upc1,
            rb3,
            at3,
            upc2,
            rb4,
            gn_out,
            out,
        }
    }

    /// Assemble the cross-attention token sequence [c_t ; c_i].
    pub fn token_sequence(
        &self,
        c_t: &PromptEmbedding,
        c_i: Option<&TokenBundle>,
    ) -> Result<Array2<f64>> {
        if c_t.tokens.shape()[1] != self.dims.token_dim {
            return Err(LaceError::ShapeMismatch {
                expected: format!("token dim {}", self.dims.token_dim),
                got: format!("{}", c_t.tokens.shape()[1]),
            });
        }
        if self.mode == ConditioningMode::TextOnly && c_i.is_some() {
            return Err(LaceError::InvalidArgument(
                "text-only model cannot take image tokens".into(),
            ));
        }
        match c_i {
            None => Ok(c_t.tokens.clone()),
            Some(bundle) => {
                if bundle.fused.shape()[1] != self.dims.token_dim {
                    return Err(LaceError::ShapeMismatch {
                        expected: format!("token dim {}", self.dims.token_dim),
                        got: format!("{}", bundle.fused.shape()[1]),
                    });
                }
                let nt = c_t.tokens.shape()[0];
                let ni = bundle.fused.shape()[0];
                let mut seq = Array2::zeros((nt + ni, self.dims.token_dim));
                seq.slice_mut(ndarray::s![..nt, ..]).assign(&c_t.tokens);
                seq.slice_mut(ndarray::s![nt.., ..]).assign(&bundle.fused);
                Ok(seq)
            }
        }
    }

    pub fn forward(&self, x: &Array3<f64>, tokens: &Array2<f64>, t: usize) -> (Array3<f64>, ForwardCache) {
        let values: &[f64] = &self.store.values;
        let t_feat = timestep_features(t, self.dims.time_dim);
        let tf2 = t_feat.insert_axis(ndarray::Axis(0));
        let (z_t1, t1c) = self.tl1.forward(values, &tf2);
        let a_t1 = Array2::from_shape_fn(z_t1.raw_dim(), |(i, j)| {
            let v = z_t1[[i, j]];
            v / (1.0 + (-v).exp())
        });
        let (temb2, t2c) = self.tl2.forward(values, &a_t1);
        let temb = temb2.row(0).to_owned();
        let temb_act = silu_vec(&temb);

        let (h0, stemc) = self.stem.forward(values, x);
        let (h1, rb1c) = self.rb1.forward(values, &h0, &temb_act);
        let (h1a, at1c) = self.at1.forward(values, &h1, tokens);
        let (h2_in, d1c) = self.down1.forward(values, &h1a);
        let (h2, rb2c) = self.rb2.forward(values, &h2_in, &temb_act);
        let (h2a, at2c) = self.at2.forward(values, &h2, tokens);
        let (hm_in, d2c) = self.down2.forward(values, &h2a);
        let (hm, rbmc) = self.rbm.forward(values, &hm_in, &temb_act);
        let (hma, atmc) = self.atm.forward(values, &hm, tokens);
        let (u1, upc1c) = self.upc1.forward(values, &upsample2(&hma));
        let u1s = &u1 + &h2a;
        let (h3, rb3c) = self.rb3.forward(values, &u1s, &temb_act);
        let (h3a, at3c) = self.at3.forward(values, &h3, tokens);
        let (u2, upc2c) = self.upc2.forward(values, &upsample2(&h3a));
        let u2s = &u2 + &h1a;
        let (h4, rb4c) = self.rb4.forward(values, &u2s, &temb_act);
        let (z_out_raw, gnoc) = self.gn_out.forward(values, &h4);
        let a_out = silu(&z_out_raw);
        let (eps, outc) = self.out.forward(values, &a_out);
        (
            eps,
            ForwardCache {
                t1: t1c,
                z_t1,
                t2: t2c,
                temb,
                stem: stemc,
                rb1: rb1c,
                at1: at1c,
                d1: d1c,
                rb2: rb2c,
                at2: at2c,
                d2: d2c,
                rbm: rbmc,
                atm: atmc,
                upc1: upc1c,
                rb3: rb3c,
                at3: at3c,
                upc2: upc2c,
                rb4: rb4c,
                gn_out: gnoc,
                z_out: z_out_raw,
                out: outc,
            },
        )
    }

    /// Accumulates parameter gradients; returns d_tokens over the full
    /// [c_t ; c_i] sequence.
    pub fn backward(&mut self, cache: &ForwardCache, deps: &Array3<f64>) -> Array2<f64> {
        let ParamStore { values, grads, .. } = &mut self.store;
        let values: &[f64] = values;
        let da_out = self.out.backward(values, grads, &cache.out, deps);
        let dz_out = silu_backward(&cache.z_out, &da_out);
        let dh4 = self.gn_out.backward(values, grads, &cache.gn_out, &dz_out);
        let mut dtemb_act: Option<Array1<f64>> = None;
        let add_t = |d: Array1<f64>, acc: &mut Option<Array1<f64>>| match acc {
            Some(a) => *a += &d,
            None => *acc = Some(d),
        };
        let (du2s, dt) = self.rb4.backward(values, grads, &cache.rb4, &dh4);
        add_t(dt, &mut dtemb_act);
        // u2s = upc2(upsample2(h3a)) + h1a
        let dup2_in = self.upc2.backward(values, grads, &cache.upc2, &du2s);
        let dh3a = upsample2_backward(&dup2_in);
        let (dh3, mut dtokens) = self.at3.backward(values, grads, &cache.at3, &dh3a);
        let (du1s, dt) = self.rb3.backward(values, grads, &cache.rb3, &dh3);
        add_t(dt, &mut dtemb_act);
        let dup1_in = self.upc1.backward(values, grads, &cache.upc1, &du1s);
        let dhma = upsample2_backward(&dup1_in);
        let (dhm, dtok) = self.atm.backward(values, grads, &cache.atm, &dhma);
        dtokens += &dtok;
        let (dhm_in, dt) = self.rbm.backward(values, grads, &cache.rbm, &dhm);
        add_t(dt, &mut dtemb_act);
        // h2a feeds both down2 and the u1s skip.
        let mut dh2a = self.down2.backward(values, grads, &cache.d2, &dhm_in);
        dh2a += &du1s;
        let (dh2, dtok) = self.at2.backward(values, grads, &cache.at2, &dh2a);
        dtokens += &dtok;
        let (dh2_in, dt) = self.rb2.backward(values, grads, &cache.rb2, &dh2);
        add_t(dt, &mut dtemb_act);
        // h1a feeds both down1 and the u2s skip.
        let mut dh1a = self.down1.backward(values, grads, &cache.d1, &dh2_in);
        dh1a += &du2s;
        let (dh1, dtok) = self.at1.backward(values, grads, &cache.at1, &dh1a);
        dtokens += &dtok;
        let (dh0, dt) = self.rb1.backward(values, grads, &cache.rb1, &dh1);
        add_t(dt, &mut dtemb_act);
        let _ = self.stem.backward(values, grads, &cache.stem, &dh0);

        // Time embedding path.
        let dtemb_act = dtemb_act.expect("at least one resblock");
        let dtemb = silu_vec_backward(&cache.temb, &dtemb_act);
        let dtemb2 = dtemb.insert_axis(ndarray::Axis(0));
        let da_t1 = self.tl2.backward(values, grads, &cache.t2, &dtemb2);
        let dz_t1 = Array2::from_shape_fn(cache.z_t1.raw_dim(), |(i, j)| {
            let v = cache.z_t1[[i, j]];
            let s = 1.0 / (1.0 + (-v).exp());
            da_t1[[i, j]] * (s + v * s * (1.0 - s))
        });
        let _ = self.tl1.backward(values, grads, &cache.t1, &dz_t1);
        dtokens
    }
}

/// Evaluate the model at (x_t, [c_t ; c_i], t). Deterministic.
pub fn predict_noise(
    model: &DenoiserModel,
    x_t: &LatentState,
    c_t: &PromptEmbedding,
    c_i: Option<&TokenBundle>,
    t: usize,
) -> Result<Array3<f64>> {
    if t < 1 {
        return Err(LaceError::TimestepOutOfRange {
            t,
            lo: 1,
            hi: usize::MAX,
        });
    }
    let tokens = model.token_sequence(c_t, c_i)?;
    let (eps, _) = model.forward(&x_t.data, &tokens, t);
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(LaceError::Diverged("non-finite noise prediction".into()));
    }
    Ok(eps)
}

/// Text-conditioned denoising-score-matching training with condition
/// dropout. Returns the `(step, loss)` log.
pub fn train_denoiser(
    model: &mut DenoiserModel,
    dataset: &[(LatentState, Prompt)],
    schema: &AttributeSchema,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LaceError::InvalidArgument("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, model.store.len());
    let null = Prompt::unconditional(schema);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        model.store.zero_grads();
        let mut loss_acc = 0.0;
        for _ in 0..config.batch_size {
            let (x0, prompt) = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(1..=schedule.num_steps());
            let noise =
                Array3::from_shape_fn(x0.data.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let x_t = forward_diffuse(x0, t, &noise, schedule)?;
            let p = if rng.gen_bool(config.condition_dropout) {
                &null
            } else {
                prompt
            };
            let c_t = model.embed.embed_prompt(&model.store.values, p)?;
            let (eps_hat, cache) = model.forward(&x_t.data, &c_t.tokens, t);
            let n = eps_hat.len() as f64;
            let diff = &eps_hat - &noise;
            let loss = diff.mapv(|v| v * v).sum() / n;
            loss_acc += loss;
            let deps = diff.mapv(|v| 2.0 * v / n / config.batch_size as f64);
            let dtokens = model.backward(&cache, &deps);
            model.embed.backward(&mut model.store.grads, p, &dtokens);
        }
        let loss = loss_acc / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(LaceError::Diverged(format!(
                "loss became non-finite at step {step}"
            )));
        }
        adam.step(&mut model.store);
        log.push((step, loss));
    }
    model.trained = true;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::world::generate_sample;

    fn schema() -> AttributeSchema {
        AttributeSchema::shapes_default()
    }

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn predict_noise_shape_and_determinism() {
        let s = schema();
        let model = DenoiserModel::new(&s, DenoiserDims::tiny(), ConditioningMode::TextOnly, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let c_t = model.embed.embed_prompt(&model.store.values, &p).unwrap();
        for &(h, w) in &[(8usize, 8usize), (16, 16), (8, 16)] {
            let x = LatentState {
                data: randn(&mut rng, (3, h, w)),
                timestep: 5,
            };
            let a = predict_noise(&model, &x, &c_t, None, 5).unwrap();
            assert_eq!(a.shape(), &[3, h, w]);
            let b = predict_noise(&model, &x, &c_t, None, 5).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let x = LatentState {
            data: randn(&mut rng, (3, 8, 8)),
            timestep: 0,
        };
        assert!(predict_noise(&model, &x, &c_t, None, 0).is_err());
    }

    #[test]
    fn text_only_model_rejects_image_tokens() {
        let s = schema();
        let model = DenoiserModel::new(&s, DenoiserDims::tiny(), ConditioningMode::TextOnly, 0);
        let p = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let c_t = model.embed.embed_prompt(&model.store.values, &p).unwrap();
        let bundle = TokenBundle {
            global_token: None,
            local_tokens: None,
            fused: Array2::zeros((3, model.dims.token_dim)),
        };
        assert!(model.token_sequence(&c_t, Some(&bundle)).is_err());
        let fused_model = DenoiserModel::new(&s, DenoiserDims::tiny(), ConditioningMode::Fused, 0);
        let c_t2 = fused_model
            .embed
            .embed_prompt(&fused_model.store.values, &p)
            .unwrap();
        let seq = fused_model.token_sequence(&c_t2, Some(&bundle)).unwrap();
        assert_eq!(seq.shape(), &[4 + 3, fused_model.dims.token_dim]);
    }

    /// Full-model gradient check against central finite differences.
    #[test]
    fn gradients_match_finite_differences() {
        let s = schema();
        let mut model = DenoiserModel::new(&s, DenoiserDims::tiny(), ConditioningMode::TextOnly, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Randomize everything (attention out-projections are zero at init,
        // which would leave upstream paths untested).
        for v in model.store.values.iter_mut() {
            *v = 0.25 * rng.sample::<f64, _>(StandardNormal);
        }
        let p = Prompt::from_names(&s, &["square", "blue", "dark"]).unwrap();
        let x = randn(&mut rng, (3, 8, 8));
        let target = randn(&mut rng, (3, 8, 8));
        let t = 7;

        let loss_fn = |m: &DenoiserModel| -> f64 {
            let c_t = m.embed.embed_prompt(&m.store.values, &p).unwrap();
            let (eps, _) = m.forward(&x, &c_t.tokens, t);
            (&eps - &target).mapv(|v| v * v).sum() / eps.len() as f64
        };

        model.store.zero_grads();
        {
            let c_t = model.embed.embed_prompt(&model.store.values, &p).unwrap();
            let (eps, cache) = model.forward(&x, &c_t.tokens, t);
            let n = eps.len() as f64;
            let deps = (&eps - &target).mapv(|v| 2.0 * v / n);
            let dtokens = model.backward(&cache, &deps);
            let embed = model.embed.clone();
            embed.backward(&mut model.store.grads, &p, &dtokens);
        }
        let analytic = model.store.grads.clone();
        let np = model.store.len();
        assert!(np > 1000, "want a >1000-parameter probe, got {np}");
        let eps_fd = 1e-5;
        let mut worst = 0.0_f64;
        for i in 0..np {
            let orig = model.store.values[i];
            model.store.values[i] = orig + eps_fd;
            let lp = loss_fn(&model);
            model.store.values[i] = orig - eps_fd;
            let lm = loss_fn(&model);
            model.store.values[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps_fd);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic[i] - numeric).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "param {i}: analytic {} vs fd {numeric}, rel {rel}",
                analytic[i]
            );
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn overfits_one_fixed_sample() {
        let s = schema();
        let mut model = DenoiserModel::new(
            &s,
            DenoiserDims {
                c0: 8,
                c1: 12,
                c2: 16,
                groups: 4,
                time_dim: 16,
                token_dim: 16,
            },
            ConditioningMode::TextOnly,
            5,
        );
        let p = Prompt::from_names(&s, &["circle", "green", "light"]).unwrap();
        let x0 = generate_sample(&s, &p, 1, (16, 16)).unwrap();
        let schedule = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 20;
        let noise = randn(&mut rng, (3, 16, 16));
        let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
        let mut adam = Adam::new(1e-2, model.store.len());
        let mut last = f64::INFINITY;
        let mut first = 0.0;
        for step in 0..400 {
            model.store.zero_grads();
            let c_t = model.embed.embed_prompt(&model.store.values, &p).unwrap();
            let (eps, cache) = model.forward(&x_t.data, &c_t.tokens, t);
            let n = eps.len() as f64;
            let diff = &eps - &noise;
            last = diff.mapv(|v| v * v).sum() / n;
            if step == 0 {
                first = last;
            }
            if last < 1e-3 {
                break;
            }
            let deps = diff.mapv(|v| 2.0 * v / n);
            let dtokens = model.backward(&cache, &deps);
            let embed = model.embed.clone();
            embed.backward(&mut model.store.grads, &p, &dtokens);
            adam.step(&mut model.store);
        }
        assert!(last < 1e-3, "loss stuck at {last} (started {first})");
    }

    #[test]
    fn training_loss_decreases_and_conditioning_matters() {
        let s = schema();
        let prompts = s.all_prompts();
        let dataset: Vec<(LatentState, Prompt)> = (0..36)
            .map(|i| {
                let p = prompts[i % prompts.len()].clone();
                (generate_sample(&s, &p, i as u64, (16, 16)).unwrap(), p)
            })
            .collect();
        let schedule = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let dims = DenoiserDims {
            c0: 8,
            c1: 12,
            c2: 16,
            groups: 4,
            time_dim: 16,
            token_dim: 16,
        };
        let mut model = DenoiserModel::new(&s, dims, ConditioningMode::TextOnly, 7);
        let untrained = model.clone();
        let config = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            steps: 250,
            condition_dropout: 0.1,
            seed: 8,
            mode: ConditioningMode::TextOnly,
        };
        let log = train_denoiser(&mut model, &dataset, &s, &schedule, &config).unwrap();
        let head: f64 = log[..20].iter().map(|(_, l)| l).sum::<f64>() / 20.0;
        let tail: f64 = log[log.len() - 20..].iter().map(|(_, l)| l).sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "loss {head} -> {tail}");
        assert!(model.trained);

        // Trained model beats the untrained one on held-out noised samples.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut err_trained = 0.0;
        let mut err_untrained = 0.0;
        let mut delta_nonzero = 0usize;
        let n_eval = 40;
        for i in 0..n_eval {
            let p = &prompts[i % prompts.len()];
            let x0 = generate_sample(&s, p, 800 + i as u64, (16, 16)).unwrap();
            let t = rng.gen_range(1..=50);
            let noise = randn(&mut rng, (3, 16, 16));
            let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
            let c_t = model.embed.embed_prompt(&model.store.values, p).unwrap();
            let eps = predict_noise(&model, &x_t, &c_t, None, t).unwrap();
            err_trained += (&eps - &noise).mapv(|v| v * v).mean().unwrap();
            let c_t0 = untrained
                .embed
                .embed_prompt(&untrained.store.values, p)
                .unwrap();
            let eps0 = predict_noise(&untrained, &x_t, &c_t0, None, t).unwrap();
            err_untrained += (&eps0 - &noise).mapv(|v| v * v).mean().unwrap();

            // Single-domain prompt change must move the prediction.
            let mut q = p.clone();
            q.set_value(1, (p.value(1).unwrap() + 1) % 3);
            let c_q = model.embed.embed_prompt(&model.store.values, &q).unwrap();
            let eps_q = predict_noise(&model, &x_t, &c_q, None, t).unwrap();
            if (&eps_q - &eps).mapv(|v| v * v).sum().sqrt() > 1e-9 {
                delta_nonzero += 1;
            }
        }
        assert!(
            err_trained < err_untrained,
            "trained {err_trained} vs untrained {err_untrained}"
        );
        assert!(
            delta_nonzero * 100 >= n_eval * 99,
            "prompt sensitivity on {delta_nonzero}/{n_eval}"
        );
    }

    #[test]
    fn nan_loss_aborts() {
        let s = schema();
        let mut model = DenoiserModel::new(&s, DenoiserDims::tiny(), ConditioningMode::TextOnly, 0);
        let p = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let bad = LatentState::clean(Array3::from_elem((3, 8, 8), f64::NAN));
        let schedule = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            steps: 2,
            condition_dropout: 0.0,
            seed: 0,
            mode: ConditioningMode::TextOnly,
        };
        let res = train_denoiser(&mut model, &[(bad, p)], &s, &schedule, &config);
        assert!(matches!(res, Err(LaceError::Diverged(_))));
    }

    #[test]
    fn loss_estimator_unbiased_for_affine_predictor() {
        // eps_hat = a x_t + b. At fixed (x0, t):
        //   E||eps - eps_hat||^2 = n (1 - sqrt(1-abar) a)^2
        //                          + || a sqrt(abar) x0 + b ||^2.
        let schedule = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap();
        let t = 30;
        let abar = schedule.alpha_bar(t);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = LatentState::clean(randn(&mut rng, (1, 3, 3)));
        let (a, b) = (0.6, 0.1);
        let n = 9.0;
        let expected = n * (1.0 - (1.0 - abar).sqrt() * a).powi(2)
            + x0.data.mapv(|v| a * abar.sqrt() * v + b).mapv(|v| v * v).sum();
        let draws = 200_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let noise = randn(&mut rng, (1, 3, 3));
            let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
            let eps_hat = x_t.data.mapv(|v| a * v + b);
            acc += (&eps_hat - &noise).mapv(|v| v * v).sum();
        }
        let mc = acc / draws as f64;
        // Loose 3-sigma-ish band; per-draw variance is O(n).
        assert!(
            (mc - expected).abs() < 0.05 * expected.max(1.0),
            "mc {mc} vs analytic {expected}"
        );
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::default();
        c.condition_dropout = 1.0;
        assert!(c.validate().is_err());
        c.condition_dropout = 0.1;
        c.steps = 0;
        assert!(c.validate().is_err());
    }
}
