//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line. Criteria that need a trained stack share one
//! lazily-built fixture (dataset, encoders, denoiser, adapter).
//!
//! Training budgets can be overridden through LACE_ACC_* environment
//! variables when iterating locally.

use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lace_core::checkpoint;
use lace_core::conditioning::{
    build_image_tokens, train_adapter, train_global_encoder, train_local_encoder, AdapterParams,
    ConditioningMode, GlobalEncoder, LocalEncoder,
};
use lace_core::denoiser::{predict_noise, train_denoiser, DenoiserDims, DenoiserModel, TrainConfig};
use lace_core::guidance::{
    build_prompt_variants, cfg_guide, mcg_multi, mcg_single, EditSpec, GuidanceMode,
    TranslationRequest,
};
use lace_core::metrics::{self, EvalReport, ImageRecord};
use lace_core::sampler::{
    ddim_invert, sample, sweep_scales, translate_with, ModelPredictor, NoisePredictor,
    OraclePredictor, SamplerConfig, SamplerKind,
};
use lace_core::schedule::{forward_diffuse, make_schedule, LatentState, NoiseSchedule, ScheduleKind};
use lace_core::world::{generate_sample, AttributeSchema, GaussianWorld, Prompt};

// ---------------------------------------------------------------------------
// Shared trained fixture
// ---------------------------------------------------------------------------

struct Fixture {
    schema: AttributeSchema,
    schedule: NoiseSchedule,
    val_set: Vec<(LatentState, Prompt)>,
    global: GlobalEncoder,
    local: LocalEncoder,
    model: DenoiserModel,
    adapter: AdapterParams,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn render_set(schema: &AttributeSchema, count: usize, seed_base: u64) -> Vec<(LatentState, Prompt)> {
    let prompts = schema.all_prompts();
    (0..count)
        .map(|i| {
            let p = prompts[i % prompts.len()].clone();
            let img = generate_sample(schema, &p, seed_base + i as u64, (32, 32)).unwrap();
            (img, p)
        })
        .collect()
}

/// A narrower U-Net than the config default: at this training budget a
/// smaller backbone both trains faster and leans harder on the prompt
/// tokens, which the guidance mechanism needs.
fn fixture_dims() -> DenoiserDims {
    DenoiserDims {
        c0: 8,
        c1: 12,
        c2: 16,
        groups: 4,
        time_dim: 24,
        token_dim: 64,
    }
}

/// Cache the trained stack under the target directory: training is
/// deterministic in the budget, so reloading is equivalent to retraining.
fn cache_path(enc: usize, den: usize, ad: usize) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("acceptance_stack_e{enc}_d{den}_a{ad}.ckpt"))
}

fn try_load_stack(
    path: &std::path::Path,
    global: &mut GlobalEncoder,
    local: &mut LocalEncoder,
    model: &mut DenoiserModel,
    adapter: &mut AdapterParams,
) -> bool {
    let Ok(entries) = checkpoint::load(path) else {
        return false;
    };
    let ok = checkpoint::load_store("global", &entries, &mut global.store).is_ok()
        && checkpoint::load_store("local", &entries, &mut local.store).is_ok()
        && checkpoint::load_store("denoiser", &entries, &mut model.store).is_ok()
        && checkpoint::load_store("adapter", &entries, &mut adapter.store).is_ok();
    if ok {
        global.trained = true;
        local.trained = true;
        model.trained = true;
        adapter.trained = true;
    }
    ok
}

fn save_stack(
    path: &std::path::Path,
    global: &GlobalEncoder,
    local: &LocalEncoder,
    model: &DenoiserModel,
    adapter: &AdapterParams,
) {
    let mut entries = checkpoint::store_entries("global", &global.store);
    entries.extend(checkpoint::store_entries("local", &local.store));
    entries.extend(checkpoint::store_entries("denoiser", &model.store));
    entries.extend(checkpoint::store_entries("adapter", &adapter.store));
    let _ = checkpoint::save(path, &entries);
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let schema = AttributeSchema::shapes_default();
        let schedule = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        let train_set = render_set(&schema, 360, 0);
        let val_set = render_set(&schema, 200, 100_000);

        let enc_steps = env_usize("LACE_ACC_ENCODER_STEPS", 1500);
        let den_steps = env_usize("LACE_ACC_DENOISER_STEPS", 6000);
        let ad_steps = env_usize("LACE_ACC_ADAPTER_STEPS", 300);
        let dims = fixture_dims();
        let mut global = GlobalEncoder::new(&schema, 64, 7);
        let mut local = LocalEncoder::new(32, 4, 13);
        let mut model = DenoiserModel::new(&schema, dims, ConditioningMode::Fused, 1);
        let mut adapter = AdapterParams::new(64, dims.token_dim);

        let cache = cache_path(enc_steps, den_steps, ad_steps);
        if !try_load_stack(&cache, &mut global, &mut local, &mut model, &mut adapter) {
            let images: Vec<LatentState> = train_set.iter().map(|(i, _)| i.clone()).collect();
            let labels: Vec<Vec<usize>> = train_set
                .iter()
                .map(|(_, p)| (0..3).map(|d| p.value(d).unwrap()).collect())
                .collect();
            train_global_encoder(&mut global, &images, &labels, enc_steps, 16, 3e-3, 11);
            train_local_encoder(&mut local, &images, enc_steps, 16, 3e-3, 17);

            let den_cfg = TrainConfig {
                learning_rate: 4e-4,
                batch_size: 16,
                steps: den_steps,
                condition_dropout: 0.1,
                seed: 0,
                mode: ConditioningMode::Fused,
            };
            let log = train_denoiser(&mut model, &train_set, &schema, &schedule, &den_cfg).unwrap();
            let head: f64 = log[..50.min(log.len())].iter().map(|(_, l)| l).sum::<f64>()
                / 50.min(log.len()) as f64;
            let tail: f64 = log[log.len().saturating_sub(50)..].iter().map(|(_, l)| l).sum::<f64>()
                / 50.min(log.len()) as f64;
            eprintln!("[fixture] denoiser loss head {head:.4} -> tail {tail:.4}");

            let ad_cfg = TrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                steps: ad_steps,
                condition_dropout: 0.1,
                seed: 3,
                mode: ConditioningMode::Fused,
            };
            train_adapter(
                &mut adapter,
                &mut model,
                &global,
                &local,
                &train_set,
                &schema,
                &schedule,
                &ad_cfg,
            )
            .unwrap();
            save_stack(&cache, &global, &local, &model, &adapter);
        }

        Fixture {
            schema,
            schedule,
            val_set,
            global,
            local,
            model,
            adapter,
        }
    })
}

/// Guidance scale used for the translation criteria. The acceptance bars
/// fix correctness rates, not the scale; this is the operating point.
fn edit_scale() -> f64 {
    std::env::var("LACE_ACC_EDIT_SCALE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(3.0)
}

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    // One pass/fail line per criterion; also surfaced on stderr so the line
    // is visible in captured-test output.
    let line = format!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    eprintln!("{line}");
    assert!(pass, "{line}");
}

fn sampler_cfg(steps: usize, guidance: GuidanceMode, clamp: bool) -> SamplerConfig {
    SamplerConfig {
        kind: SamplerKind::Ddim,
        steps,
        eta: 0.0,
        guidance,
        seed: 0,
        clamp_final: clamp,
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

/// Probability the global encoder assigns to `value` in `domain`.
fn target_prob(enc: &GlobalEncoder, img: &LatentState, domain: usize, value: usize) -> f64 {
    let logits = enc.classify(img).unwrap();
    softmax(&logits[domain])[value]
}

fn rotate_edit(schema: &AttributeSchema, prompt: &Prompt, domain: usize, scale: f64) -> EditSpec {
    let n = schema.domains()[domain].1.len();
    EditSpec {
        domain,
        target_value: (prompt.value(domain).unwrap() + 1) % n,
        scale,
    }
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_guidance_algebra_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = (2usize, 3usize, 3usize);
    let randn = |rng: &mut ChaCha8Rng| {
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    };
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let src = randn(&mut rng);
        let t1 = randn(&mut rng);
        let t2 = randn(&mut rng);
        let s1: f64 = rng.gen_range(-2.0..2.0);
        let s2: f64 = rng.gen_range(-2.0..2.0);
        // Delta additivity.
        let multi = mcg_multi(&src, &[t1.clone(), t2.clone()], &[s1, s2]).unwrap();
        let manual = &src + &((&t1 - &src) * s1) + ((&t2 - &src) * s2);
        worst = worst.max((&multi - &manual).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        // Unedited-domain nullity: a variant equal to the source adds zero.
        let null = mcg_multi(&src, &[src.clone(), t1.clone()], &[s1, s2]).unwrap();
        let only_t1 = mcg_single(&src, &t1, s2).unwrap();
        worst = worst.max((&null - &only_t1).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        // s = 0 / s = 1 endpoints.
        let id0 = mcg_single(&src, &t1, 0.0).unwrap();
        worst = worst.max((&id0 - &src).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        let id1 = mcg_single(&src, &t1, 1.0).unwrap();
        worst = worst.max((&id1 - &t1).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        // CFG is the single-edit special case, bitwise.
        let w: f64 = rng.gen_range(0.0..5.0);
        let cfg = cfg_guide(&src, &t1, w).unwrap();
        let single = mcg_single(&src, &t1, w).unwrap();
        assert!(cfg
            .iter()
            .zip(single.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    report(
        1,
        "guidance algebra exactness",
        worst < 1e-12,
        &format!("max deviation {worst:.3e} over 1e4 probes (tol 1e-12)"),
    );
}

#[test]
fn criterion_02_gaussian_world_composition() {
    let schema = AttributeSchema::shapes_default();
    // Long schedule: mean-transport exactness needs alpha_bar_T ~ 0.
    let schedule = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
    let world = GaussianWorld::random(schema.clone(), (2, 3, 3), 42);
    let oracle = OraclePredictor {
        world: &world,
        schedule: &schedule,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = schema.all_prompts()[0].clone();
    let request = TranslationRequest::new(
        &schema,
        source.clone(),
        vec![
            EditSpec { domain: 0, target_value: 1, scale: 1.0 },
            EditSpec { domain: 1, target_value: 2, scale: 1.0 },
            EditSpec { domain: 2, target_value: 1, scale: 1.0 },
        ],
    )
    .unwrap();

    // mcg_multi with all scales 1 equals the analytic full-target prediction.
    let (src_prompt, variants) = build_prompt_variants(&request);
    let mut worst = 0.0_f64;
    for &t in &[1usize, 250, 1000] {
        let x0 = world.sample_x0(&source, &mut rng).unwrap();
        let noise = Array3::from_shape_fn((2, 3, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();
        let eps_src = oracle.predict(&x_t, &src_prompt, t).unwrap();
        let eps_tgts: Vec<Array3<f64>> = variants
            .iter()
            .map(|v| oracle.predict(&x_t, v, t).unwrap())
            .collect();
        let combined = mcg_multi(&eps_src, &eps_tgts, &request.scales()).unwrap();
        let full = oracle.predict(&x_t, &request.target_prompt(), t).unwrap();
        worst = worst.max((&combined - &full).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }

    // Translated-sample means hit the target mean within 3 SE over 2000 draws.
    let config = sampler_cfg(50, GuidanceMode::Mcg, false);
    let target_mu = world.prompt_mean(&request.target_prompt()).unwrap();
    let n = 2000;
    let mut mean = Array3::<f64>::zeros((2, 3, 3));
    for _ in 0..n {
        let x0 = world.sample_x0(&source, &mut rng).unwrap();
        let out = translate_with(&x0, &request, &oracle, &schedule, &config).unwrap();
        mean += &out.data;
    }
    mean /= n as f64;
    let se = world.data_std() / (n as f64).sqrt();
    let worst_mean = mean
        .iter()
        .zip(target_mu.iter())
        .map(|(m, mu)| (m - mu).abs())
        .fold(0.0_f64, f64::max);
    report(
        2,
        "Gaussian-world composition exactness",
        worst < 1e-10 && worst_mean < 3.0 * se,
        &format!(
            "composition deviation {worst:.3e} (tol 1e-10); worst mean gap {worst_mean:.4} vs 3se {:.4}",
            3.0 * se
        ),
    );
}

#[test]
fn criterion_03_ddim_inversion_roundtrip() {
    // Oracle bound.
    let schema = AttributeSchema::shapes_default();
    let schedule = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
    let world = GaussianWorld::random(schema.clone(), (2, 4, 4), 3);
    let oracle = OraclePredictor {
        world: &world,
        schedule: &schedule,
    };
    let config = sampler_cfg(50, GuidanceMode::None, false);
    let prompt = schema.all_prompts()[5].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_oracle = 0.0_f64;
    for _ in 0..5 {
        let x0 = world.sample_x0(&prompt, &mut rng).unwrap();
        let x_t = ddim_invert(&x0, &prompt, &oracle, &schedule, 50).unwrap();
        let back = sample(&x_t, &prompt, &oracle, &schedule, &config).unwrap();
        worst_oracle = worst_oracle.max(metrics::mse(&back.data, &x0.data).unwrap());
    }

    // Trained-model bound over 100 validation images.
    let fx = fixture();
    let predictor = ModelPredictor {
        model: &fx.model,
        image_tokens: None,
    };
    let cfg = sampler_cfg(50, GuidanceMode::None, true);
    let mut worst_psnr = f64::INFINITY;
    for (img, prompt) in fx.val_set.iter().take(100) {
        let x_t = ddim_invert(img, prompt, &predictor, &fx.schedule, 50).unwrap();
        let back = sample(&x_t, prompt, &predictor, &fx.schedule, &cfg).unwrap();
        worst_psnr = worst_psnr.min(metrics::psnr(&back.data, &img.data, 2.0).unwrap());
    }
    report(
        3,
        "DDIM inversion roundtrip",
        worst_oracle <= 1e-3 && worst_psnr >= 25.0,
        &format!(
            "oracle worst mse {worst_oracle:.3e} (tol 1e-3); trained worst psnr {worst_psnr:.1} dB (bar 25)"
        ),
    );
}

#[test]
fn criterion_04_gradient_check() {
    // Training-loss gradient vs central differences on a <= 1000-parameter
    // model.
    let schema = AttributeSchema::shapes_default();
    let schedule = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
    let dims = DenoiserDims {
        c0: 2,
        c1: 2,
        c2: 2,
        groups: 1,
        time_dim: 2,
        token_dim: 4,
    };
    let mut model = DenoiserModel::new(&schema, dims, ConditioningMode::TextOnly, 5);
    let n_params = model.store.len();
    assert!(n_params <= 1000, "config has {n_params} parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for v in model.store.values.iter_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let prompt = schema.all_prompts()[3].clone();
    let x0 = generate_sample(&schema, &prompt, 77, (16, 16)).unwrap();
    let t = 7usize;
    let noise = Array3::from_shape_fn((3, 16, 16), |_| rng.sample::<f64, _>(StandardNormal));
    let x_t = forward_diffuse(&x0, t, &noise, &schedule).unwrap();

    let loss_of = |model: &DenoiserModel| -> f64 {
        let c_t = model.embed.embed_prompt(&model.store.values, &prompt).unwrap();
        let (eps_hat, _) = model.forward(&x_t.data, &c_t.tokens, t);
        (&eps_hat - &noise).mapv(|v| v * v).sum() / eps_hat.len() as f64
    };
    model.store.zero_grads();
    {
        let c_t = model.embed.embed_prompt(&model.store.values, &prompt).unwrap();
        let (eps_hat, cache) = model.forward(&x_t.data, &c_t.tokens, t);
        let n = eps_hat.len() as f64;
        let deps = (&eps_hat - &noise).mapv(|v| 2.0 * v / n);
        let dtokens = model.backward(&cache, &deps);
        model.embed.backward(&mut model.store.grads, &prompt, &dtokens);
    }
    let analytic = model.store.grads.clone();
    let eps = 1e-5;
    let mut worst_rel = 0.0_f64;
    for i in 0..n_params {
        let orig = model.store.values[i];
        model.store.values[i] = orig + eps;
        let lp = loss_of(&model);
        model.store.values[i] = orig - eps;
        let lm = loss_of(&model);
        model.store.values[i] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-4);
        worst_rel = worst_rel.max((fd - analytic[i]).abs() / denom);
    }
    report(
        4,
        "gradient check",
        worst_rel < 1e-3,
        &format!("{n_params} params, max relative error {worst_rel:.3e} (tol 1e-3)"),
    );
}

#[test]
fn criterion_05_translation_correctness() {
    let fx = fixture();
    let predictor = ModelPredictor {
        model: &fx.model,
        image_tokens: None,
    };
    let cfg = sampler_cfg(50, GuidanceMode::Mcg, true);

    // Single-domain edits on 200 held-out images.
    let mut ok1 = 0usize;
    for (i, (img, prompt)) in fx.val_set.iter().enumerate() {
        let edit = rotate_edit(&fx.schema, prompt, i % 3, edit_scale());
        let request = TranslationRequest::new(&fx.schema, prompt.clone(), vec![edit]).unwrap();
        let out = translate_with(img, &request, &predictor, &fx.schedule, &cfg).unwrap();
        let rec = metrics::attribute_correctness(img, &out, &request, &fx.schema).unwrap();
        if rec.all_correct {
            ok1 += 1;
        }
    }
    let rate1 = ok1 as f64 / fx.val_set.len() as f64;

    // Three-domain edits on 60 held-out images.
    let n3 = 60usize;
    let mut ok3 = 0usize;
    for (img, prompt) in fx.val_set.iter().take(n3) {
        let edits = (0..3)
            .map(|d| rotate_edit(&fx.schema, prompt, d, edit_scale()))
            .collect();
        let request = TranslationRequest::new(&fx.schema, prompt.clone(), edits).unwrap();
        let out = translate_with(img, &request, &predictor, &fx.schedule, &cfg).unwrap();
        let rec = metrics::attribute_correctness(img, &out, &request, &fx.schema).unwrap();
        if rec.all_correct {
            ok3 += 1;
        }
    }
    let rate3 = ok3 as f64 / n3 as f64;
    report(
        5,
        "translation correctness",
        rate1 >= 0.90 && rate3 >= 0.80,
        &format!(
            "1-domain all-correct {rate1:.3} on {} images (bar 0.90); 3-domain {rate3:.3} on {n3} (bar 0.80)",
            fx.val_set.len()
        ),
    );
}

#[test]
fn criterion_06_scale_monotonicity() {
    // Trained-model monotonicity of the measured shift across the grid.
    let fx = fixture();
    let predictor = ModelPredictor {
        model: &fx.model,
        image_tokens: None,
    };
    let cfg = sampler_cfg(25, GuidanceMode::Mcg, true);
    let grid: Vec<Vec<f64>> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&s| vec![s]).collect();
    let n = 40usize;
    let mut monotone = 0usize;
    for (i, (img, prompt)) in fx.val_set.iter().take(n).enumerate() {
        let edit = rotate_edit(&fx.schema, prompt, 1 + (i % 2), 1.0); // color/background
        let domain = edit.domain;
        let value = edit.target_value;
        let request = TranslationRequest::new(&fx.schema, prompt.clone(), vec![edit]).unwrap();
        let outs = sweep_scales(img, &request, &grid, &predictor, &fx.schedule, &cfg).unwrap();
        let probs: Vec<f64> = outs
            .iter()
            .map(|o| target_prob(&fx.global, o, domain, value))
            .collect();
        if probs.windows(2).all(|w| w[1] >= w[0] - 1e-6) {
            monotone += 1;
        }
    }
    let frac = monotone as f64 / n as f64;

    // Gaussian-world linearity: the mid-scale output is the exact midpoint.
    let schema = AttributeSchema::shapes_default();
    let schedule = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
    let world = GaussianWorld::random(schema.clone(), (2, 3, 3), 8);
    let oracle = OraclePredictor {
        world: &world,
        schedule: &schedule,
    };
    let source = schema.all_prompts()[0].clone();
    let request = TranslationRequest::new(
        &schema,
        source.clone(),
        vec![EditSpec { domain: 1, target_value: 2, scale: 1.0 }],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = world.sample_x0(&source, &mut rng).unwrap();
    let ocfg = sampler_cfg(50, GuidanceMode::Mcg, false);
    let outs = sweep_scales(
        &x0,
        &request,
        &[vec![0.0], vec![0.5], vec![1.0]],
        &oracle,
        &schedule,
        &ocfg,
    )
    .unwrap();
    let mid_gap = outs[1]
        .data
        .iter()
        .zip(outs[0].data.iter().zip(outs[2].data.iter()))
        .map(|(m, (a, b))| (m - 0.5 * (a + b)).abs())
        .fold(0.0_f64, f64::max);
    report(
        6,
        "scale monotonicity",
        frac >= 0.95 && mid_gap < 1e-10,
        &format!(
            "monotone sequences {frac:.3} over {n} images (bar 0.95); oracle midpoint gap {mid_gap:.3e} (tol 1e-10)"
        ),
    );
}

#[test]
fn criterion_07_per_domain_independence() {
    let fx = fixture();
    let predictor = ModelPredictor {
        model: &fx.model,
        image_tokens: None,
    };
    let cfg = sampler_cfg(25, GuidanceMode::Mcg, true);
    let n = 50usize;
    let mut own_shift = 0.0_f64;
    let mut cross_shift = 0.0_f64;
    for (img, prompt) in fx.val_set.iter().take(n) {
        let e1 = rotate_edit(&fx.schema, prompt, 1, 1.0); // color
        let e2 = rotate_edit(&fx.schema, prompt, 2, 1.0); // background
        let (d1, v1) = (e1.domain, e1.target_value);
        let (d2, v2) = (e2.domain, e2.target_value);
        let request =
            TranslationRequest::new(&fx.schema, prompt.clone(), vec![e1, e2]).unwrap();
        // Factorial rows: s1 in {0, 1} with s2 = 0.
        let outs = sweep_scales(
            img,
            &request,
            &[vec![0.0, 0.0], vec![edit_scale(), 0.0]],
            &predictor,
            &fx.schedule,
            &cfg,
        )
        .unwrap();
        let stat = |o: &LatentState, d: usize, v: usize| target_prob(&fx.global, o, d, v);
        own_shift += (stat(&outs[1], d1, v1) - stat(&outs[0], d1, v1)).abs();
        cross_shift += (stat(&outs[1], d2, v2) - stat(&outs[0], d2, v2)).abs();
    }
    own_shift /= n as f64;
    cross_shift /= n as f64;
    report(
        7,
        "per-domain independence",
        own_shift >= 5.0 * cross_shift,
        &format!(
            "own-domain shift {own_shift:.4} vs cross-domain {cross_shift:.4} (need >= 5x)"
        ),
    );
}

#[test]
fn criterion_08_ablation_directionality() {
    let fx = fixture();

    // (a) Fused conditioning lowers held-out denoising MSE vs text-only.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mse_text = 0.0_f64;
    let mut mse_fused = 0.0_f64;
    let mut count = 0usize;
    for (img, prompt) in fx.val_set.iter().take(100) {
        let bundle = build_image_tokens(
            ConditioningMode::Fused,
            img,
            &fx.global,
            &fx.local,
            &fx.adapter,
        )
        .unwrap();
        for &t in &[20usize, 80, 150] {
            let noise = Array3::from_shape_fn((3, 32, 32), |_| rng.sample::<f64, _>(StandardNormal));
            let x_t = forward_diffuse(img, t, &noise, &fx.schedule).unwrap();
            let c_t = fx.model.embed.embed_prompt(&fx.model.store.values, prompt).unwrap();
            let e_text = predict_noise(&fx.model, &x_t, &c_t, None, t).unwrap();
            let e_fused = predict_noise(&fx.model, &x_t, &c_t, bundle.as_ref(), t).unwrap();
            mse_text += (&e_text - &noise).mapv(|v| v * v).mean().unwrap();
            mse_fused += (&e_fused - &noise).mapv(|v| v * v).mean().unwrap();
            count += 1;
        }
    }
    mse_text /= count as f64;
    mse_fused /= count as f64;

    // (b) MCG beats CFG on attribute correctness at matched compute
    // (both are 2 predictor calls per step for a single edit).
    let predictor = ModelPredictor {
        model: &fx.model,
        image_tokens: None,
    };
    let n = 60usize;
    let mut ok_mcg = 0usize;
    let mut ok_cfg = 0usize;
    for (i, (img, prompt)) in fx.val_set.iter().take(n).enumerate() {
        let edit = rotate_edit(&fx.schema, prompt, i % 3, edit_scale());
        let request = TranslationRequest::new(&fx.schema, prompt.clone(), vec![edit]).unwrap();
        let mcg_out = translate_with(
            img,
            &request,
            &predictor,
            &fx.schedule,
            &sampler_cfg(25, GuidanceMode::Mcg, true),
        )
        .unwrap();
        if metrics::attribute_correctness(img, &mcg_out, &request, &fx.schema)
            .unwrap()
            .all_correct
        {
            ok_mcg += 1;
        }
        let cfg_out = translate_with(
            img,
            &request,
            &predictor,
            &fx.schedule,
            &sampler_cfg(25, GuidanceMode::Cfg { weight: 3.0 }, true),
        )
        .unwrap();
        if metrics::attribute_correctness(img, &cfg_out, &request, &fx.schema)
            .unwrap()
            .all_correct
        {
            ok_cfg += 1;
        }
    }

    // (c) DDIM inversion improves roundtrip PSNR over sampling from fresh
    // noise at the terminal timestep.
    let cfg = sampler_cfg(50, GuidanceMode::None, true);
    let mut psnr_inv = 0.0_f64;
    let mut psnr_noinv = 0.0_f64;
    let m = 20usize;
    for (img, prompt) in fx.val_set.iter().take(m) {
        let x_t = ddim_invert(img, prompt, &predictor, &fx.schedule, 50).unwrap();
        let back = sample(&x_t, prompt, &predictor, &fx.schedule, &cfg).unwrap();
        psnr_inv += metrics::psnr(&back.data, &img.data, 2.0).unwrap();
        let fresh = forward_diffuse(
            img,
            200,
            &Array3::from_shape_fn((3, 32, 32), |_| rng.sample::<f64, _>(StandardNormal)),
            &fx.schedule,
        )
        .unwrap();
        let free = sample(&fresh, prompt, &predictor, &fx.schedule, &cfg).unwrap();
        psnr_noinv += metrics::psnr(&free.data, &img.data, 2.0).unwrap();
    }
    psnr_inv /= m as f64;
    psnr_noinv /= m as f64;

    report(
        8,
        "ablation directionality",
        mse_fused < mse_text && ok_mcg > ok_cfg && psnr_inv > psnr_noinv,
        &format!(
            "denoise mse fused {mse_fused:.4} < text {mse_text:.4}; all-correct mcg {ok_mcg}/{n} > cfg {ok_cfg}/{n}; psnr inv {psnr_inv:.1} > no-inv {psnr_noinv:.1}"
        ),
    );
}

#[test]
fn criterion_09_metric_suite_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-1.0..1.0));
    let b = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-1.0..1.0));

    // Naive double-loop MSE.
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    let naive_mse = acc / a.len() as f64;
    let d_mse = (metrics::mse(&a, &b).unwrap() - naive_mse).abs();

    // PSNR from the naive MSE.
    let naive_psnr = (10.0 * (4.0 / naive_mse).log10()).min(99.0);
    let d_psnr = (metrics::psnr(&a, &b, 2.0).unwrap() - naive_psnr).abs();

    // Independent SSIM accumulation (valid 11x11 windows, Gaussian sigma 1.5).
    let d_ssim = {
        let got = metrics::ssim(&a, &b).unwrap();
        let oracle = naive_ssim(&a, &b);
        (got - oracle).abs()
    };

    // Identity cases.
    let ident = metrics::mse(&a, &a).unwrap() == 0.0
        && metrics::ssim(&a, &a).unwrap() == 1.0
        && metrics::psnr(&a, &a, 2.0).unwrap() == 99.0;

    // Report round-trip is bit-exact.
    let mut rep = EvalReport::new(7, "deadbeefdeadbeef", vec!["shape".into(), "color".into()]);
    for i in 0..5 {
        rep.records.push(ImageRecord {
            name: format!("img_{i}"),
            psnr: 20.0 + i as f64 * 0.371,
            mse: 0.01 / (i + 1) as f64,
            ssim: 0.9 + 0.017 * i as f64,
            structure: 0.001 * i as f64,
            per_domain: vec![i % 2 == 0, true],
            all_correct: i % 2 == 0,
        });
    }
    let text = rep.to_text();
    let parsed = EvalReport::from_text(&text).unwrap();
    let roundtrip = parsed == rep && parsed.to_text() == text;

    report(
        9,
        "metric suite correctness",
        d_mse < 1e-9 && d_psnr < 1e-9 && d_ssim < 1e-9 && ident && roundtrip,
        &format!(
            "mse dev {d_mse:.2e}, psnr dev {d_psnr:.2e}, ssim dev {d_ssim:.2e}, identity {ident}, report roundtrip {roundtrip}"
        ),
    );
}

/// Independent SSIM: channel-averaged, valid windows, hand-built Gaussian.
fn naive_ssim(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let win = 11usize;
    let sigma = 1.5;
    let mut kernel = Array2::zeros((win, win));
    let mid = (win / 2) as f64;
    let mut sum = 0.0;
    for i in 0..win {
        for j in 0..win {
            let v = (-(((i as f64 - mid).powi(2) + (j as f64 - mid).powi(2))
                / (2.0 * sigma * sigma)))
                .exp();
            kernel[[i, j]] = v;
            sum += v;
        }
    }
    kernel /= sum;
    let (k1, k2, range) = (0.01_f64, 0.03_f64, 2.0_f64);
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..=(h - win) {
            for x in 0..=(w - win) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        ma += kernel[[i, j]] * a[[ch, y + i, x + j]];
                        mb += kernel[[i, j]] * b[[ch, y + i, x + j]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let da = a[[ch, y + i, x + j]] - ma;
                        let db = b[[ch, y + i, x + j]] - mb;
                        va += kernel[[i, j]] * da * da;
                        vb += kernel[[i, j]] * db * db;
                        cov += kernel[[i, j]] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn criterion_10_reproducibility() {
    // Checkpoint round-trips bit-exactly.
    let schema = AttributeSchema::shapes_default();
    let model = DenoiserModel::new(&schema, DenoiserDims::tiny(), ConditioningMode::TextOnly, 12);
    let entries = checkpoint::store_entries("m", &model.store);
    let bytes = checkpoint::serialize(&entries);
    let parsed = checkpoint::deserialize(&bytes).unwrap();
    let mut clone = DenoiserModel::new(&schema, DenoiserDims::tiny(), ConditioningMode::TextOnly, 13);
    checkpoint::load_store("m", &parsed, &mut clone.store).unwrap();
    let ckpt_ok = model
        .store
        .values
        .iter()
        .zip(clone.store.values.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Sampling is bit-reproducible under a fixed seed.
    let schedule = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
    let world = GaussianWorld::random(schema.clone(), (2, 3, 3), 14);
    let oracle = OraclePredictor {
        world: &world,
        schedule: &schedule,
    };
    let prompt = schema.all_prompts()[1].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let start = forward_diffuse(
        &world.sample_x0(&prompt, &mut rng).unwrap(),
        200,
        &Array3::from_shape_fn((2, 3, 3), |_| rng.sample::<f64, _>(StandardNormal)),
        &schedule,
    )
    .unwrap();
    let mut cfg = sampler_cfg(50, GuidanceMode::None, false);
    cfg.kind = SamplerKind::Ddim;
    cfg.eta = 0.7; // exercise the stochastic path
    cfg.seed = 99;
    let s1 = sample(&start, &prompt, &oracle, &schedule, &cfg).unwrap();
    let s2 = sample(&start, &prompt, &oracle, &schedule, &cfg).unwrap();
    let sample_ok = s1
        .data
        .iter()
        .zip(s2.data.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // The CLI is deterministic given (config, seed): two dataset runs give
    // identical bytes.
    let bin = env!("CARGO_BIN_EXE_lace");
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&d1, &d2] {
        let st = std::process::Command::new(bin)
            .args(["gen-dataset", "--count", "24", "--out"])
            .arg(d)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let mut cli_ok = true;
    for name in ["manifest.tsv", "img_000000.png", "img_000023.png"] {
        let a = std::fs::read(d1.join(name)).unwrap();
        let b = std::fs::read(d2.join(name)).unwrap();
        cli_ok &= a == b;
    }

    report(
        10,
        "reproducibility",
        ckpt_ok && sample_ok && cli_ok,
        &format!("checkpoint bit-exact {ckpt_ok}; sampler bit-reproducible {sample_ok}; CLI deterministic {cli_ok}"),
    );
}
