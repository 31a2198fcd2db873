//! Operator CLI: dataset generation, staged training, translation, sweeps,
//! inversion roundtrips, evaluation, and analytic-world verification.
//!
//! Exit codes: 0 success, 1 user error, 2 check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lace_core::checkpoint::{self, Entry};
use lace_core::conditioning::{
    build_image_tokens, train_adapter, train_global_encoder, train_local_encoder, AdapterParams,
    ConditioningMode, GlobalEncoder, LocalEncoder,
};
use lace_core::config::RunConfig;
use lace_core::denoiser::{train_denoiser, DenoiserModel, TrainConfig};
use lace_core::guidance::{
    build_prompt_variants, cfg_guide, mcg_multi, EditSpec, GuidanceMode, TranslationRequest,
};
use lace_core::metrics::{self, EvalReport, ImageRecord};
use lace_core::sampler::{
    ddim_invert, sample, translate, translate_with, NoisePredictor, OraclePredictor, SamplerConfig,
    SamplerKind,
};
use lace_core::schedule::{forward_diffuse, LatentState};
use lace_core::world::{
    emit_dataset, load_dataset_images, load_manifest, load_png, measure_attributes, save_png,
    AttributeSchema, GaussianWorld, Prompt,
};

#[derive(Parser)]
#[command(name = "lace", about = "Desk-scale guided-diffusion laboratory", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs (env: LACE_RUN_ROOT; default "runs").
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural shapes dataset with a balanced manifest.
    GenDataset(GenDatasetArgs),
    /// Train one pipeline stage (encoders, denoiser, adapter).
    Train(TrainArgs),
    /// Translate one image along the requested attribute edits.
    Translate(TranslateArgs),
    /// Translate at a grid of guidance scales and tile a contact sheet.
    Sweep(SweepArgs),
    /// DDIM-invert an image and resample it (reconstruction roundtrip).
    Invert(InvertArgs),
    /// Evaluate matched source/output image pairs into a report.
    Eval(EvalArgs),
    /// Run the analytic Gaussian-world exactness suite.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Number of images to render.
    #[arg(long, default_value_t = 360)]
    count: usize,
    /// Output directory (default <run-root>/dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline stage: encoders, denoiser, or adapter.
    #[arg(long)]
    stage: String,
    /// Dataset directory (default <run-root>/dataset).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory (default <run-root>/train).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured step count for this stage.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Source image (PNG).
    #[arg(long)]
    input: PathBuf,
    /// Source prompt, e.g. "shape=circle;color=red;background=light".
    /// Measured from the image when omitted.
    #[arg(long)]
    src: Option<String>,
    /// Edit spec domain=value[:scale]; repeatable.
    #[arg(long = "edit")]
    edits: Vec<String>,
    /// Checkpoint directory (default <run-root>/train).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Output directory (default <run-root>/translate).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    src: Option<String>,
    /// Edit spec domain=value[:scale]; repeatable. The grid scale replaces
    /// every edit's scale uniformly.
    #[arg(long = "edit")]
    edits: Vec<String>,
    /// Comma-separated scale grid.
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    scales: String,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    src: Option<String>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of source images with a manifest.tsv.
    #[arg(long)]
    source: PathBuf,
    /// Directory of output images named like their sources.
    #[arg(long)]
    output: PathBuf,
    /// Edit spec applied to every pair when judging attribute correctness.
    #[arg(long = "edit")]
    edits: Vec<String>,
    /// Checkpoint directory holding encoders.ckpt (for structure distance).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Report path (default <run-root>/eval/report.tsv).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCheckArgs {
    /// Test-only mutation hook: flip the MCG delta sign inside the suite to
    /// confirm the checks are sensitive.
    #[arg(long, hide = true)]
    mutate_mcg_sign: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version print and exit 0; real parse errors are user errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let root = cli
        .run_root
        .clone()
        .or_else(|| std::env::var_os("LACE_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let schema = AttributeSchema::shapes_default();
    match cli.command {
        Command::GenDataset(a) => cmd_gen_dataset(&config, &schema, &root, a),
        Command::Train(a) => cmd_train(&config, &schema, &root, a),
        Command::Translate(a) => cmd_translate(&config, &schema, &root, a),
        Command::Sweep(a) => cmd_sweep(&config, &schema, &root, a),
        Command::Invert(a) => cmd_invert(&config, &schema, &root, a),
        Command::Eval(a) => cmd_eval(&config, &schema, &root, a),
        Command::OracleCheck(a) => cmd_oracle_check(&config, &schema, a),
    }
}

// ---------------------------------------------------------------------------
// Run-directory plumbing: lock file + resolved-config manifest.
// ---------------------------------------------------------------------------

struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "run directory {} is locked by another command ({} exists)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Echo the fully resolved configuration and invocation into the run dir so
/// the run can be re-executed from the manifest alone.
fn write_run_manifest(dir: &Path, config: &RunConfig, command: &str, detail: &str) -> Result<()> {
    let text = format!(
        "# command: {command}\n# detail: {detail}\n# config_hash: {}\n\n{}",
        config.hash(),
        config.to_toml()
    );
    fs::write(dir.join("run.toml"), text)?;
    Ok(())
}

fn write_loss_log(path: &Path, log: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("step\tloss\n");
    for (step, loss) in log {
        out.push_str(&format!("{step}\t{loss:?}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint assembly
// ---------------------------------------------------------------------------

fn encoders_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("encoders.ckpt")
}
fn denoiser_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("denoiser.ckpt")
}
fn adapter_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("adapter.ckpt")
}

fn save_encoders(path: &Path, global: &GlobalEncoder, local: &LocalEncoder) -> Result<()> {
    let mut entries = vec![
        Entry::scalar_u64("global.out_dim", global.out_dim as u64),
        Entry::scalar_u64("local.token_dim", local.token_dim as u64),
        Entry::scalar_u64("local.patch", local.patch as u64),
    ];
    entries.extend(checkpoint::store_entries("global", &global.store));
    entries.extend(checkpoint::store_entries("local", &local.store));
    checkpoint::save(path, &entries)?;
    Ok(())
}

fn load_encoders(path: &Path, config: &RunConfig) -> Result<(GlobalEncoder, LocalEncoder)> {
    let entries = checkpoint::load(path)
        .with_context(|| format!("loading encoder checkpoint {}", path.display()))?;
    let schema = AttributeSchema::shapes_default();
    let out_dim = checkpoint::find(&entries, "global.out_dim")?.as_u64()? as usize;
    let token_dim = checkpoint::find(&entries, "local.token_dim")?.as_u64()? as usize;
    let patch = checkpoint::find(&entries, "local.patch")?.as_u64()? as usize;
    if out_dim != config.model.global_dim
        || token_dim != config.model.local_dim
        || patch != config.model.patch
    {
        bail!(
            "encoder checkpoint dims (g={out_dim}, l={token_dim}, p={patch}) disagree with \
             config (g={}, l={}, p={})",
            config.model.global_dim,
            config.model.local_dim,
            config.model.patch
        );
    }
    let mut global = GlobalEncoder::new(&schema, out_dim, 0);
    checkpoint::load_store("global", &entries, &mut global.store)?;
    global.trained = true;
    let mut local = LocalEncoder::new(token_dim, patch, 0);
    checkpoint::load_store("local", &entries, &mut local.store)?;
    local.trained = true;
    Ok((global, local))
}

fn mode_tag(mode: ConditioningMode) -> u64 {
    match mode {
        ConditioningMode::TextOnly => 0,
        ConditioningMode::GlobalOnly => 1,
        ConditioningMode::LocalOnly => 2,
        ConditioningMode::Fused => 3,
    }
}

fn mode_from_tag(tag: u64) -> Result<ConditioningMode> {
    Ok(match tag {
        0 => ConditioningMode::TextOnly,
        1 => ConditioningMode::GlobalOnly,
        2 => ConditioningMode::LocalOnly,
        3 => ConditioningMode::Fused,
        other => bail!("unknown conditioning mode tag {other}"),
    })
}

fn save_denoiser(path: &Path, model: &DenoiserModel) -> Result<()> {
    let d = &model.dims;
    let mut entries = vec![
        Entry::scalar_u64("denoiser.mode", mode_tag(model.mode)),
        Entry::scalar_u64("denoiser.c0", d.c0 as u64),
        Entry::scalar_u64("denoiser.c1", d.c1 as u64),
        Entry::scalar_u64("denoiser.c2", d.c2 as u64),
        Entry::scalar_u64("denoiser.groups", d.groups as u64),
        Entry::scalar_u64("denoiser.time_dim", d.time_dim as u64),
        Entry::scalar_u64("denoiser.token_dim", d.token_dim as u64),
    ];
    entries.extend(checkpoint::store_entries("denoiser", &model.store));
    checkpoint::save(path, &entries)?;
    Ok(())
}

fn load_denoiser(path: &Path, config: &RunConfig) -> Result<DenoiserModel> {
    let entries = checkpoint::load(path)
        .with_context(|| format!("loading denoiser checkpoint {}", path.display()))?;
    let schema = AttributeSchema::shapes_default();
    let mode = mode_from_tag(checkpoint::find(&entries, "denoiser.mode")?.as_u64()?)?;
    let dims = config.model.denoiser_dims();
    for (name, want) in [
        ("denoiser.c0", dims.c0),
        ("denoiser.c1", dims.c1),
        ("denoiser.c2", dims.c2),
        ("denoiser.groups", dims.groups),
        ("denoiser.time_dim", dims.time_dim),
        ("denoiser.token_dim", dims.token_dim),
    ] {
        let got = checkpoint::find(&entries, name)?.as_u64()? as usize;
        if got != want {
            bail!("denoiser checkpoint {name}={got} disagrees with config value {want}");
        }
    }
    let mut model = DenoiserModel::new(&schema, dims, mode, 0);
    checkpoint::load_store("denoiser", &entries, &mut model.store)?;
    model.trained = true;
    Ok(model)
}

fn save_adapter(path: &Path, adapter: &AdapterParams) -> Result<()> {
    let mut entries = vec![
        Entry::scalar_u64("adapter.in_dim", adapter.in_dim as u64),
        Entry::scalar_u64("adapter.out_dim", adapter.out_dim as u64),
    ];
    entries.extend(checkpoint::store_entries("adapter", &adapter.store));
    checkpoint::save(path, &entries)?;
    Ok(())
}

fn load_adapter(path: &Path, config: &RunConfig) -> Result<AdapterParams> {
    let entries = checkpoint::load(path)
        .with_context(|| format!("loading adapter checkpoint {}", path.display()))?;
    let in_dim = checkpoint::find(&entries, "adapter.in_dim")?.as_u64()? as usize;
    let out_dim = checkpoint::find(&entries, "adapter.out_dim")?.as_u64()? as usize;
    let want_in = config.model.global_dim.max(config.model.local_dim);
    if in_dim != want_in || out_dim != config.model.token_dim {
        bail!(
            "adapter checkpoint dims ({in_dim} -> {out_dim}) disagree with config \
             ({want_in} -> {})",
            config.model.token_dim
        );
    }
    let mut adapter = AdapterParams::new(in_dim, out_dim);
    checkpoint::load_store("adapter", &entries, &mut adapter.store)?;
    adapter.trained = true;
    Ok(adapter)
}

/// Load whatever trained stack the pipeline needs for image work.
struct Stack {
    model: DenoiserModel,
    global: GlobalEncoder,
    local: LocalEncoder,
    adapter: AdapterParams,
}

fn load_stack(ckpt_dir: &Path, config: &RunConfig) -> Result<Stack> {
    let model = load_denoiser(&denoiser_ckpt_path(ckpt_dir), config)?;
    let schema = AttributeSchema::shapes_default();
    let (global, local, adapter) = if model.mode == ConditioningMode::TextOnly {
        // Untrained placeholders; the text-only path never consults them.
        (
            GlobalEncoder::new(&schema, config.model.global_dim, 0),
            LocalEncoder::new(config.model.local_dim, config.model.patch, 0),
            AdapterParams::new(
                config.model.global_dim.max(config.model.local_dim),
                config.model.token_dim,
            ),
        )
    } else {
        let (g, l) = load_encoders(&encoders_ckpt_path(ckpt_dir), config)?;
        let a = load_adapter(&adapter_ckpt_path(ckpt_dir), config)?;
        (g, l, a)
    };
    Ok(Stack {
        model,
        global,
        local,
        adapter,
    })
}

// ---------------------------------------------------------------------------
// Flag parsing helpers
// ---------------------------------------------------------------------------

fn parse_source_prompt(
    schema: &AttributeSchema,
    src: &Option<String>,
    image: &LatentState,
) -> Result<Prompt> {
    match src {
        Some(text) => Ok(Prompt::parse(schema, text)?),
        None => Ok(measure_attributes(image, schema)
            .context("measuring source attributes (pass --src to override)")?
            .prompt),
    }
}

/// Parse one `domain=value[:scale]` edit flag.
fn parse_edit(schema: &AttributeSchema, text: &str) -> Result<EditSpec> {
    let (dv, scale) = match text.rsplit_once(':') {
        Some((dv, s)) => (
            dv,
            s.parse::<f64>()
                .map_err(|_| anyhow!("bad scale in edit '{text}'"))?,
        ),
        None => (text, 1.0),
    };
    let (domain, value) = dv
        .split_once('=')
        .ok_or_else(|| anyhow!("edit '{text}' is not domain=value[:scale]"))?;
    let d = schema.domain_index(domain)?;
    let v = schema.value_index(d, value)?;
    Ok(EditSpec {
        domain: d,
        target_value: v,
        scale,
    })
}

fn parse_edits(schema: &AttributeSchema, flags: &[String]) -> Result<Vec<EditSpec>> {
    flags.iter().map(|f| parse_edit(schema, f)).collect()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_dataset(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: GenDatasetArgs,
) -> Result<u8> {
    let out = args.out.unwrap_or_else(|| root.join("dataset"));
    let _lock = DirLock::acquire(&out)?;
    let size = config.world.image_size;
    let entries = emit_dataset(schema, args.count, (size, size), config.world.dataset_seed, &out)?;
    write_run_manifest(&out, config, "gen-dataset", &format!("count={}", args.count))?;
    println!(
        "wrote {} images ({}x{size}) and manifest to {}",
        entries.len(),
        size,
        out.display()
    );
    Ok(0)
}

fn stage_train_config(config: &RunConfig, stage: &str, steps: Option<usize>) -> TrainConfig {
    let s = match stage {
        "denoiser" => &config.train.denoiser,
        _ => &config.train.adapter,
    };
    TrainConfig {
        learning_rate: s.learning_rate,
        batch_size: s.batch_size,
        steps: steps.unwrap_or(s.steps),
        condition_dropout: s.condition_dropout,
        seed: s.seed,
        mode: config.model.mode,
    }
}

fn cmd_train(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: TrainArgs,
) -> Result<u8> {
    let dataset_dir = args.dataset.unwrap_or_else(|| root.join("dataset"));
    let out = args.out.unwrap_or_else(|| root.join("train"));
    let _lock = DirLock::acquire(&out)?;
    let entries = load_manifest(schema, &dataset_dir)
        .with_context(|| format!("loading dataset manifest in {}", dataset_dir.display()))?;
    let images = load_dataset_images(&dataset_dir, &entries)?;
    let schedule = config.make_schedule()?;

    match args.stage.as_str() {
        "encoders" => {
            let sc = &config.train.encoders;
            let steps = args.steps.unwrap_or(sc.steps);
            let labels: Vec<Vec<usize>> = entries
                .iter()
                .map(|e| {
                    (0..schema.num_domains())
                        .map(|d| e.prompt.value(d).expect("dataset prompts are full"))
                        .collect()
                })
                .collect();
            let mut global = GlobalEncoder::new(schema, config.model.global_dim, sc.seed);
            let glog =
                train_global_encoder(&mut global, &images, &labels, steps, sc.batch_size, sc.learning_rate, sc.seed);
            let mut local = LocalEncoder::new(config.model.local_dim, config.model.patch, sc.seed + 1);
            let llog =
                train_local_encoder(&mut local, &images, steps, sc.batch_size, sc.learning_rate, sc.seed + 1);
            save_encoders(&encoders_ckpt_path(&out), &global, &local)?;
            let index = |v: &[f64]| -> Vec<(usize, f64)> {
                v.iter().copied().enumerate().collect()
            };
            write_loss_log(&out.join("encoders_global_loss.tsv"), &index(&glog))?;
            write_loss_log(&out.join("encoders_local_loss.tsv"), &index(&llog))?;
            write_run_manifest(&out, config, "train", &format!("stage=encoders steps={steps}"))?;
            println!("encoders checkpoint: {}", encoders_ckpt_path(&out).display());
        }
        "denoiser" => {
            let tc = stage_train_config(config, "denoiser", args.steps);
            let dataset: Vec<(LatentState, Prompt)> = images
                .into_iter()
                .zip(entries.iter().map(|e| e.prompt.clone()))
                .collect();
            let mut model =
                DenoiserModel::new(schema, config.model.denoiser_dims(), config.model.mode, config.model.init_seed);
            let log = train_denoiser(&mut model, &dataset, schema, &schedule, &tc)?;
            save_denoiser(&denoiser_ckpt_path(&out), &model)?;
            write_loss_log(&out.join("denoiser_loss.tsv"), &log)?;
            write_run_manifest(&out, config, "train", &format!("stage=denoiser steps={}", tc.steps))?;
            println!("denoiser checkpoint: {}", denoiser_ckpt_path(&out).display());
        }
        "adapter" => {
            if config.model.mode == ConditioningMode::TextOnly {
                bail!("adapter stage needs an image-conditioned model.mode (config has text-only)");
            }
            let den_path = denoiser_ckpt_path(&out);
            if !den_path.exists() {
                bail!(
                    "adapter stage requires a denoiser checkpoint at {} (run --stage denoiser first)",
                    den_path.display()
                );
            }
            let enc_path = encoders_ckpt_path(&out);
            if !enc_path.exists() {
                bail!(
                    "adapter stage requires an encoder checkpoint at {} (run --stage encoders first)",
                    enc_path.display()
                );
            }
            let mut model = load_denoiser(&den_path, config)?;
            let (global, local) = load_encoders(&enc_path, config)?;
            let tc = stage_train_config(config, "adapter", args.steps);
            let dataset: Vec<(LatentState, Prompt)> = images
                .into_iter()
                .zip(entries.iter().map(|e| e.prompt.clone()))
                .collect();
            let mut adapter = AdapterParams::new(
                config.model.global_dim.max(config.model.local_dim),
                config.model.token_dim,
            );
            let log = train_adapter(
                &mut adapter,
                &mut model,
                &global,
                &local,
                &dataset,
                schema,
                &schedule,
                &tc,
            )?;
            save_adapter(&adapter_ckpt_path(&out), &adapter)?;
            write_loss_log(&out.join("adapter_loss.tsv"), &log)?;
            write_run_manifest(&out, config, "train", &format!("stage=adapter steps={}", tc.steps))?;
            println!("adapter checkpoint: {}", adapter_ckpt_path(&out).display());
        }
        other => bail!("unknown stage '{other}' (expected encoders, denoiser, or adapter)"),
    }
    Ok(0)
}

fn cmd_translate(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: TranslateArgs,
) -> Result<u8> {
    let ckpt_dir = args.checkpoints.unwrap_or_else(|| root.join("train"));
    let out = args.out.unwrap_or_else(|| root.join("translate"));
    let _lock = DirLock::acquire(&out)?;
    let image = load_png(&args.input)?;
    let source = parse_source_prompt(schema, &args.src, &image)?;
    let edits = parse_edits(schema, &args.edits)?;
    let request = TranslationRequest::new(schema, source.clone(), edits)?;
    let schedule = config.make_schedule()?;
    let sampler_cfg = config.sampler.sampler_config()?;
    let stack = load_stack(&ckpt_dir, config)?;
    let result = translate(
        &image,
        &request,
        &stack.model,
        &stack.global,
        &stack.local,
        &stack.adapter,
        &schedule,
        &sampler_cfg,
    )?;
    save_png(&result, &out.join("output.png"))?;
    let calls_per_step = match sampler_cfg.guidance {
        GuidanceMode::None => 1,
        GuidanceMode::Cfg { .. } => 2,
        GuidanceMode::Mcg => request.edits.len() + 1,
    };
    write_run_manifest(
        &out,
        config,
        "translate",
        &format!(
            "input={} src=\"{}\" edits={:?} domains={} predictor_calls_per_step={}",
            args.input.display(),
            source.describe(schema),
            args.edits,
            request.edits.len(),
            calls_per_step
        ),
    )?;
    println!("translated image: {}", out.join("output.png").display());
    Ok(0)
}

fn cmd_sweep(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: SweepArgs,
) -> Result<u8> {
    let ckpt_dir = args.checkpoints.unwrap_or_else(|| root.join("train"));
    let out = args.out.unwrap_or_else(|| root.join("sweep"));
    let _lock = DirLock::acquire(&out)?;
    let image = load_png(&args.input)?;
    let source = parse_source_prompt(schema, &args.src, &image)?;
    let edits = parse_edits(schema, &args.edits)?;
    if edits.is_empty() {
        bail!("sweep needs at least one --edit");
    }
    let request = TranslationRequest::new(schema, source.clone(), edits)?;
    let scales: Vec<f64> = args
        .scales
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("bad scale '{s}'")))
        .collect::<Result<_>>()?;
    if scales.is_empty() {
        bail!("empty scale grid");
    }
    let grid: Vec<Vec<f64>> = scales
        .iter()
        .map(|&s| vec![s; request.edits.len()])
        .collect();
    let schedule = config.make_schedule()?;
    let sampler_cfg = config.sampler.sampler_config()?;
    let stack = load_stack(&ckpt_dir, config)?;
    let bundle = build_image_tokens(stack.model.mode, &image, &stack.global, &stack.local, &stack.adapter)?;
    let predictor = lace_core::sampler::ModelPredictor {
        model: &stack.model,
        image_tokens: bundle.as_ref(),
    };
    let outputs = lace_core::sampler::sweep_scales(&image, &request, &grid, &predictor, &schedule, &sampler_cfg)?;
    for (img, &s) in outputs.iter().zip(&scales) {
        save_png(img, &out.join(format!("scale_{s}.png")))?;
    }
    let sheet = lace_core::sampler::contact_sheet(&outputs, outputs.len())?;
    save_png(&LatentState::clean(sheet), &out.join("contact_sheet.png"))?;
    write_run_manifest(
        &out,
        config,
        "sweep",
        &format!(
            "input={} src=\"{}\" edits={:?} scales={:?}",
            args.input.display(),
            source.describe(schema),
            args.edits,
            scales
        ),
    )?;
    println!("sweep outputs in {}", out.display());
    Ok(0)
}

fn cmd_invert(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: InvertArgs,
) -> Result<u8> {
    let ckpt_dir = args.checkpoints.unwrap_or_else(|| root.join("train"));
    let out = args.out.unwrap_or_else(|| root.join("invert"));
    let _lock = DirLock::acquire(&out)?;
    let image = load_png(&args.input)?;
    let source = parse_source_prompt(schema, &args.src, &image)?;
    let request = TranslationRequest::new(schema, source.clone(), vec![])?;
    let schedule = config.make_schedule()?;
    let mut sampler_cfg = config.sampler.sampler_config()?;
    // Reconstruction must be deterministic and unguided.
    sampler_cfg.kind = SamplerKind::Ddim;
    sampler_cfg.eta = 0.0;
    let stack = load_stack(&ckpt_dir, config)?;
    let recon = translate(
        &image,
        &request,
        &stack.model,
        &stack.global,
        &stack.local,
        &stack.adapter,
        &schedule,
        &sampler_cfg,
    )?;
    save_png(&recon, &out.join("reconstruction.png"))?;
    let mse = metrics::mse(&recon.data, &image.data)?;
    let psnr = metrics::psnr(&recon.data, &image.data, 2.0)?;
    write_run_manifest(
        &out,
        config,
        "invert",
        &format!(
            "input={} src=\"{}\" mse={mse:?} psnr_db={psnr:?}",
            args.input.display(),
            source.describe(schema)
        ),
    )?;
    println!("roundtrip mse {mse:.6} psnr {psnr:.2} dB -> {}", out.display());
    Ok(0)
}

fn cmd_eval(
    config: &RunConfig,
    schema: &AttributeSchema,
    root: &Path,
    args: EvalArgs,
) -> Result<u8> {
    let report_path = args
        .report
        .unwrap_or_else(|| root.join("eval").join("report.tsv"));
    let report_dir = report_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let _lock = DirLock::acquire(&report_dir)?;
    let entries = load_manifest(schema, &args.source)
        .with_context(|| format!("loading source manifest in {}", args.source.display()))?;
    if entries.is_empty() {
        bail!("source manifest is empty");
    }
    let edits = parse_edits(schema, &args.edits)?;
    // Structure distance needs a trained local encoder.
    let ckpt_dir = args.checkpoints.unwrap_or_else(|| root.join("train"));
    let enc_path = encoders_ckpt_path(&ckpt_dir);
    if !enc_path.exists() {
        bail!(
            "eval needs encoders.ckpt for structure distance; none at {}",
            enc_path.display()
        );
    }
    let (_, local) = load_encoders(&enc_path, config)?;
    let domains: Vec<String> = schema.domains().iter().map(|(n, _)| n.clone()).collect();
    let mut report = EvalReport::new(config.sampler.seed, config.hash(), domains);
    for entry in &entries {
        let src = load_png(&args.source.join(&entry.filename))?;
        let out_path = args.output.join(&entry.filename);
        if !out_path.exists() {
            bail!("no output image matching source {}", entry.filename);
        }
        let out = load_png(&out_path)?;
        let request = TranslationRequest::new(schema, entry.prompt.clone(), edits.clone())?;
        let attr = metrics::attribute_correctness(&src, &out, &request, schema)?;
        report.records.push(ImageRecord {
            name: entry.filename.clone(),
            psnr: metrics::psnr(&src.data, &out.data, 2.0)?,
            mse: metrics::mse(&src.data, &out.data)?,
            ssim: metrics::ssim(&src.data, &out.data)?,
            structure: metrics::structure_distance(&src, &out, &local)?,
            per_domain: attr.per_domain,
            all_correct: attr.all_correct,
        });
    }
    fs::write(&report_path, report.to_text())?;
    write_run_manifest(
        &report_dir,
        config,
        "eval",
        &format!(
            "source={} output={} pairs={} edits={:?}",
            args.source.display(),
            args.output.display(),
            report.records.len(),
            args.edits
        ),
    )?;
    let agg = report.aggregates();
    println!(
        "evaluated {} pairs: mean psnr {:.2} dB, mse {:.5}, ssim {:.4}, structure {:.5}, all-correct {:.3}",
        report.records.len(),
        agg.psnr,
        agg.mse,
        agg.ssim,
        agg.structure,
        agg.all_correct_rate
    );
    println!("report: {}", report_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

struct CheckReport {
    failures: usize,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport { failures: 0 }
    }
    fn record(&mut self, name: &str, measured: f64, tolerance: f64) {
        let ok = measured <= tolerance;
        println!(
            "{} {name}: measured {measured:.3e} vs tolerance {tolerance:.1e}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failures += 1;
        }
    }
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Exact-algebra suite over the analytic Gaussian world: MCG delta
/// additivity, additive-mean composition exactness, CFG reduction, and the
/// DDIM inversion roundtrip bound.
fn cmd_oracle_check(
    config: &RunConfig,
    schema: &AttributeSchema,
    args: OracleCheckArgs,
) -> Result<u8> {
    // The sign mutation below exists purely so the suite's sensitivity can
    // be demonstrated (a flipped delta must fail the checks).
    let sign = if args.mutate_mcg_sign { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.world.dataset_seed ^ 0xace);
    let shape = (2usize, 4usize, 4usize);
    let world = GaussianWorld::random(schema.clone(), shape, config.world.dataset_seed);
    let schedule = config.make_schedule()?;
    let oracle = OraclePredictor {
        world: &world,
        schedule: &schedule,
    };
    let mut report = CheckReport::new();
    let randn3 = |rng: &mut ChaCha8Rng| {
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    };

    // 1. MCG delta additivity + CFG reduction on random probes.
    let mut worst_add = 0.0_f64;
    let mut worst_cfg = 0.0_f64;
    for _ in 0..200 {
        let eps_src = randn3(&mut rng);
        let t1 = randn3(&mut rng);
        let t2 = randn3(&mut rng);
        let s1: f64 = rng.gen_range(-2.0..2.0);
        let s2: f64 = rng.gen_range(-2.0..2.0);
        let multi = mcg_multi(
            &eps_src,
            &[t1.clone(), t2.clone()],
            &[sign * s1, sign * s2],
        )?;
        let manual = &eps_src + &((&t1 - &eps_src) * s1) + ((&t2 - &eps_src) * s2);
        worst_add = worst_add.max(max_abs_diff(&multi, &manual));
        let w: f64 = rng.gen_range(0.0..5.0);
        let cfg = cfg_guide(&eps_src, &t1, sign * w)?;
        let manual_cfg = &eps_src + &((&t1 - &eps_src) * w);
        worst_cfg = worst_cfg.max(max_abs_diff(&cfg, &manual_cfg));
    }
    report.record("mcg_delta_additivity", worst_add, 1e-12);
    report.record("cfg_reduces_to_single_mcg", worst_cfg, 1e-12);

    // 2. Additive-mean composition exactness: all-ones MCG equals the
    // analytic full-target prediction.
    let prompts = schema.all_prompts();
    let source = prompts[0].clone();
    let request = TranslationRequest::new(
        schema,
        source.clone(),
        vec![
            EditSpec { domain: 0, target_value: 1, scale: sign * 1.0 },
            EditSpec { domain: 1, target_value: 2, scale: sign * 1.0 },
            EditSpec { domain: 2, target_value: 1, scale: sign * 1.0 },
        ],
    )?;
    let (src_prompt, variants) = build_prompt_variants(&request);
    let mut worst_comp = 0.0_f64;
    for &t in &[1usize, schedule.num_steps() / 4, schedule.num_steps()] {
        let x0 = world.sample_x0(&source, &mut rng)?;
        let noise = randn3(&mut rng);
        let x_t = forward_diffuse(&x0, t.max(1), &noise, &schedule)?;
        let eps_src = oracle.predict(&x_t, &src_prompt, t.max(1))?;
        let eps_tgts: Vec<Array3<f64>> = variants
            .iter()
            .map(|v| oracle.predict(&x_t, v, t.max(1)))
            .collect::<lace_core::Result<_>>()?;
        let combined = mcg_multi(&eps_src, &eps_tgts, &request.scales())?;
        let full = oracle.predict(&x_t, &request.target_prompt(), t.max(1))?;
        worst_comp = worst_comp.max(max_abs_diff(&combined, &full));
    }
    report.record("gaussian_world_composition_exactness", worst_comp, 1e-10);

    // 3. DDIM inversion roundtrip (deterministic, unclamped abstract space).
    let sampler_cfg = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps: 50.min(schedule.num_steps()),
        eta: 0.0,
        guidance: GuidanceMode::Mcg,
        seed: 0,
        clamp_final: false,
    };
    let mut worst_rt = 0.0_f64;
    for _ in 0..3 {
        let x0 = world.sample_x0(&source, &mut rng)?;
        let x_t = ddim_invert(&x0, &source, &oracle, &schedule, sampler_cfg.steps)?;
        let back = sample(&x_t, &source, &oracle, &schedule, &sampler_cfg)?;
        worst_rt = worst_rt.max(metrics::mse(&back.data, &x0.data)?);
    }
    report.record("ddim_inversion_roundtrip_mse", worst_rt, 1e-3);

    // 4. Empty-edit translation reconstructs the input.
    let empty_req = TranslationRequest::new(schema, source.clone(), vec![])?;
    let x0 = world.sample_x0(&source, &mut rng)?;
    let recon = translate_with(&x0, &empty_req, &oracle, &schedule, &sampler_cfg)?;
    let recon_mse = metrics::mse(&recon.data, &x0.data)?;
    report.record("empty_edit_reconstruction_mse", recon_mse, 1e-3);

    if report.failures > 0 {
        println!("{} check(s) failed", report.failures);
        Ok(2)
    } else {
        println!("all checks passed");
        Ok(0)
    }
}
