//! Conditioning stack: learned prompt embeddings c_t, a global semantic
//! encoder, a local patch encoder, and the concatenate-and-project adapter
//! producing the image prompt sequence c_i.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LaceError, Result};
use crate::nn::{
    silu, silu_backward, Adam, Conv2d, Conv2dCache, Linear, LinearCache, ParamRef, ParamStore,
};
use crate::schedule::LatentState;
use crate::world::{AttributeSchema, Prompt};

/// Which token set feeds the denoiser's cross-attention alongside c_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    TextOnly,
    GlobalOnly,
    LocalOnly,
    Fused,
}

/// Token sequence for a prompt: one start token plus one token per domain
/// value; the null prompt repeats the learned null token.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Array2<f64>,
}

/// Learned embedding table living inside the denoiser's parameter store so
/// it trains jointly with the backbone.
#[derive(Debug, Clone)]
pub struct EmbedTable {
    pub dim: usize,
    start: ParamRef,
    null: ParamRef,
    /// values[d][v] is the embedding of value v of domain d.
    values: Vec<Vec<ParamRef>>,
}

impl EmbedTable {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        schema: &AttributeSchema,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let start = store.alloc_he("embed.start", &[dim], dim, rng);
        let null = store.alloc_he("embed.null", &[dim], dim, rng);
        let values = schema
            .domains()
            .iter()
            .enumerate()
            .map(|(d, (_, vals))| {
                (0..vals.len())
                    .map(|v| store.alloc_he(&format!("embed.d{d}v{v}"), &[dim], dim, rng))
                    .collect()
            })
            .collect();
        EmbedTable {
            dim,
            start,
            null,
            values,
        }
    }

    /// Deterministic lookup of the token sequence for a prompt.
    pub fn embed_prompt(&self, values_buf: &[f64], prompt: &Prompt) -> Result<PromptEmbedding> {
        let d = self.values.len();
        if prompt.num_domains() != d {
            return Err(LaceError::InvalidArgument(format!(
                "prompt has {} domains, table has {d}",
                prompt.num_domains()
            )));
        }
        let mut tokens = Array2::zeros((d + 1, self.dim));
        let fetch = |r: ParamRef| &values_buf[r.offset..r.offset + r.len];
        if prompt.is_unconditional() {
            for mut row in tokens.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(fetch(self.null)));
            }
        } else {
            tokens
                .row_mut(0)
                .assign(&ndarray::ArrayView1::from(fetch(self.start)));
            for di in 0..d {
                let v = prompt.value(di).ok_or_else(|| {
                    LaceError::InvalidArgument("mixed null/assigned prompts unsupported".into())
                })?;
                if v >= self.values[di].len() {
                    return Err(LaceError::InvalidArgument(format!(
                        "value index {v} out of range for domain {di}"
                    )));
                }
                tokens
                    .row_mut(di + 1)
                    .assign(&ndarray::ArrayView1::from(fetch(self.values[di][v])));
            }
        }
        Ok(PromptEmbedding { tokens })
    }

    /// Scatter token gradients back onto the table entries used by `prompt`.
    pub fn backward(&self, grads: &mut [f64], prompt: &Prompt, dtokens: &Array2<f64>) {
        let mut add = |r: ParamRef, row: ndarray::ArrayView1<f64>| {
            for (g, s) in grads[r.offset..r.offset + r.len].iter_mut().zip(row.iter()) {
                *g += s;
            }
        };
        if prompt.is_unconditional() {
            for row in dtokens.rows() {
                add(self.null, row);
            }
        } else {
            add(self.start, dtokens.row(0));
            for di in 0..self.values.len() {
                let v = prompt.value(di).expect("checked in embed_prompt");
                add(self.values[di][v], dtokens.row(di + 1));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Global encoder: small conv stack -> pooled semantic vector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub store: ParamStore,
    pub out_dim: usize,
    pub trained: bool,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    proj: Linear,
    /// Per-domain classification heads used only during training / probing.
    head: Linear,
    head_splits: Vec<usize>,
}

pub struct GlobalCache {
    c1: Conv2dCache,
    a1: Array3<f64>,
    c2: Conv2dCache,
    a2: Array3<f64>,
    c3: Conv2dCache,
    a3: Array3<f64>,
    pooled: Array2<f64>,
    spatial: (usize, usize),
    proj_cache: LinearCache,
}

impl GlobalEncoder {
    pub fn new(schema: &AttributeSchema, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, "ge.conv1", 3, 16, 3, 2, 1, &mut rng);
        let conv2 = Conv2d::new(&mut store, "ge.conv2", 16, 32, 3, 2, 1, &mut rng);
        let conv3 = Conv2d::new(&mut store, "ge.conv3", 32, 32, 3, 2, 1, &mut rng);
        let proj = Linear::new(&mut store, "ge.proj", 32, out_dim, &mut rng);
        let head_splits: Vec<usize> = schema.domains().iter().map(|(_, v)| v.len()).collect();
        let total: usize = head_splits.iter().sum();
        let head = Linear::new(&mut store, "ge.head", out_dim, total, &mut rng);
        GlobalEncoder {
            store,
            out_dim,
            trained: false,
            conv1,
            conv2,
            conv3,
            proj,
            head,
            head_splits,
        }
    }

    fn forward(&self, image: &Array3<f64>) -> (Array1<f64>, GlobalCache) {
        let values = &self.store.values;
        let (z1, c1) = self.conv1.forward(values, image);
        let a1 = silu(&z1);
        let (z2, c2) = self.conv2.forward(values, &a1);
        let a2 = silu(&z2);
        let (z3, c3) = self.conv3.forward(values, &a2);
        let a3 = silu(&z3);
        let (ch, h, w) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        let mut pooled = Array2::zeros((1, ch));
        for ci in 0..ch {
            pooled[[0, ci]] = a3.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64;
        }
        let (out, proj_cache) = self.proj.forward(values, &pooled);
        (
            out.row(0).to_owned(),
            GlobalCache {
                c1,
                a1: z1,
                c2,
                a2: z2,
                c3,
                a3: z3,
                pooled,
                spatial: (h, w),
                proj_cache,
            },
        )
    }

    /// Encode a clean image into the g-dimensional semantic vector.
    pub fn encode(&self, image: &LatentState) -> Result<Array1<f64>> {
        check_clean_rgb(image)?;
        Ok(self.forward(&image.data).0)
    }

    /// Head logits split per domain; used by training and the linear probe.
    pub fn classify(&self, image: &LatentState) -> Result<Vec<Vec<f64>>> {
        check_clean_rgb(image)?;
        let (feat, _) = self.forward(&image.data);
        let feat2 = feat.insert_axis(ndarray::Axis(0));
        let (logits, _) = self.head.forward(&self.store.values, &feat2);
        let mut out = Vec::new();
        let mut off = 0;
        for &n in &self.head_splits {
            out.push(logits.row(0).slice(ndarray::s![off..off + n]).to_vec());
            off += n;
        }
        Ok(out)
    }

    pub fn predict_prompt(&self, image: &LatentState, schema: &AttributeSchema) -> Result<Prompt> {
        let logits = self.classify(image)?;
        let idx: Vec<usize> = logits
            .iter()
            .map(|l| {
                l.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let _ = schema;
        Ok(Prompt::from_indices(&idx))
    }

    fn train_step(&mut self, image: &Array3<f64>, labels: &[usize]) -> f64 {
        let (feat, cache) = self.forward(image);
        let feat2 = feat.insert_axis(ndarray::Axis(0));
        let (logits, head_cache) = self.head.forward(&self.store.values, &feat2);
        // Softmax cross-entropy per domain head.
        let mut dlogits = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        let mut off = 0;
        for (d, &n) in self.head_splits.iter().enumerate() {
            let row: Vec<f64> = logits.row(0).slice(ndarray::s![off..off + n]).to_vec();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss -= (exps[labels[d]] / sum).ln();
            for j in 0..n {
                let p = exps[j] / sum;
                dlogits[[0, off + j]] = p - if j == labels[d] { 1.0 } else { 0.0 };
            }
            off += n;
        }
        let ParamStore { values, grads, .. } = &mut self.store;
        let values: &[f64] = values;
        let dfeat = self.head.backward(values, grads, &head_cache, &dlogits);
        let dpooled = self
            .proj
            .backward(values, grads, &cache.proj_cache, &dfeat);
        let (h, w) = cache.spatial;
        let ch = cache.pooled.shape()[1];
        let mut da3 = Array3::zeros((ch, h, w));
        for ci in 0..ch {
            let g = dpooled[[0, ci]] / (h * w) as f64;
            da3.index_axis_mut(ndarray::Axis(0), ci).fill(g);
        }
        let dz3 = silu_backward(&cache.a3, &da3);
        let da2 = self.conv3.backward(values, grads, &cache.c3, &dz3);
        let dz2 = silu_backward(&cache.a2, &da2);
        let da1 = self.conv2.backward(values, grads, &cache.c2, &dz2);
        let dz1 = silu_backward(&cache.a1, &da1);
        let _ = self.conv1.backward(values, grads, &cache.c1, &dz1);
        loss
    }
}

fn check_clean_rgb(image: &LatentState) -> Result<()> {
    if image.timestep != 0 {
        return Err(LaceError::InvalidArgument(format!(
            "encoder expects a clean image, got timestep {}",
            image.timestep
        )));
    }
    if image.shape().0 != 3 {
        return Err(LaceError::ShapeMismatch {
            expected: "3 channels".into(),
            got: format!("{}", image.shape().0),
        });
    }
    Ok(())
}

/// Train the global encoder with per-domain attribute classification.
pub fn train_global_encoder(
    encoder: &mut GlobalEncoder,
    images: &[LatentState],
    labels: &[Vec<usize>],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr, encoder.store.len());
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        encoder.store.zero_grads();
        let mut loss = 0.0;
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            loss += encoder.train_step(&images[i].data.clone(), &labels[i]);
        }
        let scale = 1.0 / batch as f64;
        encoder.store.grads.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss * scale);
        adam.step(&mut encoder.store);
    }
    encoder.trained = true;
    losses
}

// ---------------------------------------------------------------------------
// Local encoder: patch tokens with a reconstruction decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub store: ParamStore,
    pub token_dim: usize,
    pub patch: usize,
    pub trained: bool,
    patch_conv: Conv2d,
    mix: Conv2d,
    decoder: Linear,
}

impl LocalEncoder {
    pub fn new(token_dim: usize, patch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let patch_conv = Conv2d::new(&mut store, "le.patch", 3, token_dim, patch, patch, 0, &mut rng);
        let mix = Conv2d::new(&mut store, "le.mix", token_dim, token_dim, 1, 1, 0, &mut rng);
        let decoder = Linear::new(&mut store, "le.decoder", token_dim, patch * patch * 3, &mut rng);
        LocalEncoder {
            store,
            token_dim,
            patch,
            trained: false,
            patch_conv,
            mix,
            decoder,
        }
    }

    fn forward(&self, image: &Array3<f64>) -> (Array2<f64>, (Conv2dCache, Array3<f64>, Conv2dCache)) {
        let values = &self.store.values;
        let (z1, c1) = self.patch_conv.forward(values, image);
        let a1 = silu(&z1);
        let (z2, c2) = self.mix.forward(values, &a1);
        let (ch, gh, gw) = (z2.shape()[0], z2.shape()[1], z2.shape()[2]);
        // Tokens ordered row-major over the patch grid.
        let mut tokens = Array2::zeros((gh * gw, ch));
        for y in 0..gh {
            for x in 0..gw {
                for ci in 0..ch {
                    tokens[[y * gw + x, ci]] = z2[[ci, y, x]];
                }
            }
        }
        (tokens, (c1, z1, c2))
    }

    /// Encode a clean image into N = (H/p)(W/p) patch tokens.
    pub fn encode(&self, image: &LatentState) -> Result<Array2<f64>> {
        check_clean_rgb(image)?;
        let (_, h, w) = image.shape();
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(LaceError::InvalidArgument(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        Ok(self.forward(&image.data).0)
    }

    /// Decode tokens back to an image (training/probing only).
    pub fn reconstruct(&self, tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let (patches, _) = self.decoder.forward(&self.store.values, tokens);
        let p = self.patch;
        let gw = w / p;
        let mut img = Array3::zeros((3, h, w));
        for (idx, row) in patches.rows().into_iter().enumerate() {
            let gy = idx / gw;
            let gx = idx % gw;
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        img[[c, gy * p + py, gx * p + px]] = row[(c * p + py) * p + px];
                    }
                }
            }
        }
        img
    }

    fn train_step(&mut self, image: &Array3<f64>) -> f64 {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (tokens, (c1, z1, c2)) = self.forward(image);
        let (patches, dec_cache) = self.decoder.forward(&self.store.values, &tokens);
        let p = self.patch;
        let gw = w / p;
        // MSE against the source patches.
        let mut dpatches = Array2::zeros(patches.raw_dim());
        let mut loss = 0.0;
        let n = (3 * h * w) as f64;
        for (idx, row) in patches.rows().into_iter().enumerate() {
            let gy = idx / gw;
            let gx = idx % gw;
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        let target = image[[c, gy * p + py, gx * p + px]];
                        let pred = row[(c * p + py) * p + px];
                        loss += (pred - target).powi(2) / n;
                        dpatches[[idx, (c * p + py) * p + px]] = 2.0 * (pred - target) / n;
                    }
                }
            }
        }
        let ParamStore { values, grads, .. } = &mut self.store;
        let values: &[f64] = values;
        let dtokens = self.decoder.backward(values, grads, &dec_cache, &dpatches);
        // Back to the (C, gh, gw) map.
        let (ch, gh2, gw2) = (self.token_dim, h / p, w / p);
        let mut dz2 = Array3::zeros((ch, gh2, gw2));
        for y in 0..gh2 {
            for x in 0..gw2 {
                for ci in 0..ch {
                    dz2[[ci, y, x]] = dtokens[[y * gw2 + x, ci]];
                }
            }
        }
        let da1 = self.mix.backward(values, grads, &c2, &dz2);
        let dz1 = silu_backward(&z1, &da1);
        let _ = self.patch_conv.backward(values, grads, &c1, &dz1);
        loss
    }
}

/// Train the local encoder + decoder with the patch reconstruction objective.
pub fn train_local_encoder(
    encoder: &mut LocalEncoder,
    images: &[LatentState],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr, encoder.store.len());
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        encoder.store.zero_grads();
        let mut loss = 0.0;
        for _ in 0..batch {
            let i = rng.gen_range(0..images.len());
            loss += encoder.train_step(&images[i].data.clone());
        }
        let scale = 1.0 / batch as f64;
        encoder.store.grads.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss * scale);
        adam.step(&mut encoder.store);
    }
    encoder.trained = true;
    losses
}

// ---------------------------------------------------------------------------
// Adapter: zero-pad to a shared width, one learned projection to dim k
// ---------------------------------------------------------------------------

/// Global token, local tokens, and the fused projected sequence c_i.
#[derive(Debug, Clone)]
pub struct TokenBundle {
    pub global_token: Option<Array1<f64>>,
    pub local_tokens: Option<Array2<f64>>,
    pub fused: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub store: ParamStore,
    pub in_dim: usize,
    pub out_dim: usize,
    pub trained: bool,
    proj: Linear,
}

pub struct AdapterCache {
    padded: Array2<f64>,
    cache: LinearCache,
}

impl AdapterParams {
    /// `in_dim` = max(g, l); smaller token families are zero-padded before
    /// the shared projection.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        let mut store = ParamStore::new();
        // Zero init: at the start of adapter training, c_i tokens are all
        // zero and fused conditioning matches text-only behavior.
        let proj = Linear::new_zeros(&mut store, "adapter.proj", in_dim, out_dim);
        AdapterParams {
            store,
            in_dim,
            out_dim,
            trained: false,
            proj,
        }
    }

    fn pad_rows(&self, rows: Vec<Array1<f64>>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows.len(), self.in_dim));
        for (i, r) in rows.iter().enumerate() {
            if r.len() > self.in_dim {
                return Err(LaceError::ShapeMismatch {
                    expected: format!("<= {}", self.in_dim),
                    got: format!("{}", r.len()),
                });
            }
            out.row_mut(i)
                .slice_mut(ndarray::s![..r.len()])
                .assign(r);
        }
        Ok(out)
    }

    pub fn project(&self, padded: &Array2<f64>) -> (Array2<f64>, AdapterCache) {
        let (fused, cache) = self.proj.forward(&self.store.values, padded);
        (
            fused,
            AdapterCache {
                padded: padded.clone(),
                cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &AdapterCache, dfused: &Array2<f64>) {
        let ParamStore { values, grads, .. } = &mut self.store;
        let values: &[f64] = values;
        let _ = self.proj.backward(values, grads, &cache.cache, dfused);
        let _ = &cache.padded;
    }
}

/// Concatenate [global ; locals], zero-pad each token to the shared width,
/// and project to the cross-attention dimension.
pub fn fuse_glip(
    global_token: &Array1<f64>,
    local_tokens: &Array2<f64>,
    adapter: &AdapterParams,
) -> Result<TokenBundle> {
    let mut rows = vec![global_token.clone()];
    for r in local_tokens.rows() {
        rows.push(r.to_owned());
    }
    let padded = adapter.pad_rows(rows)?;
    let (fused, _) = adapter.project(&padded);
    Ok(TokenBundle {
        global_token: Some(global_token.clone()),
        local_tokens: Some(local_tokens.clone()),
        fused,
    })
}

/// Build c_i for the selected conditioning mode; `None` for text-only.
pub fn build_image_tokens(
    mode: ConditioningMode,
    image: &LatentState,
    global: &GlobalEncoder,
    local: &LocalEncoder,
    adapter: &AdapterParams,
) -> Result<Option<TokenBundle>> {
    match mode {
        ConditioningMode::TextOnly => Ok(None),
        ConditioningMode::GlobalOnly => {
            let g = global.encode(image)?;
            let padded = adapter.pad_rows(vec![g.clone()])?;
            let (fused, _) = adapter.project(&padded);
            Ok(Some(TokenBundle {
                global_token: Some(g),
                local_tokens: None,
                fused,
            }))
        }
        ConditioningMode::LocalOnly => {
            let l = local.encode(image)?;
            let rows: Vec<Array1<f64>> = l.rows().into_iter().map(|r| r.to_owned()).collect();
            let padded = adapter.pad_rows(rows)?;
            let (fused, _) = adapter.project(&padded);
            Ok(Some(TokenBundle {
                global_token: None,
                local_tokens: Some(l),
                fused,
            }))
        }
        ConditioningMode::Fused => {
            let g = global.encode(image)?;
            let l = local.encode(image)?;
            fuse_glip(&g, &l, adapter).map(Some)
        }
    }
}

/// Train only the adapter projection against the denoising objective, with
/// the denoiser and both encoders frozen. Returns the loss log.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    adapter: &mut AdapterParams,
    model: &mut crate::denoiser::DenoiserModel,
    global: &GlobalEncoder,
    local: &LocalEncoder,
    dataset: &[(crate::schedule::LatentState, Prompt)],
    schema: &AttributeSchema,
    schedule: &crate::schedule::NoiseSchedule,
    config: &crate::denoiser::TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    use rand_distr::StandardNormal;
    config.validate()?;
    if config.mode == ConditioningMode::TextOnly {
        return Err(LaceError::InvalidArgument(
            "adapter training needs an image-conditioned mode".into(),
        ));
    }
    if model.mode != config.mode {
        return Err(LaceError::InvalidArgument(format!(
            "model mode {:?} does not match config mode {:?}",
            model.mode, config.mode
        )));
    }
    if !model.trained {
        return Err(LaceError::NotReady("denoiser is untrained".into()));
    }
    match config.mode {
        ConditioningMode::GlobalOnly if !global.trained => {
            return Err(LaceError::NotReady("global encoder is untrained".into()));
        }
        ConditioningMode::LocalOnly if !local.trained => {
            return Err(LaceError::NotReady("local encoder is untrained".into()));
        }
        ConditioningMode::Fused if !(global.trained && local.trained) => {
            return Err(LaceError::NotReady("encoders are untrained".into()));
        }
        _ => {}
    }
    if dataset.is_empty() {
        return Err(LaceError::InvalidArgument("empty training dataset".into()));
    }
    // Frozen inputs are deterministic per image; precompute the padded rows.
    let mut padded_per_image = Vec::with_capacity(dataset.len());
    for (x0, _) in dataset {
        let rows: Vec<Array1<f64>> = match config.mode {
            ConditioningMode::GlobalOnly => vec![global.encode(x0)?],
            ConditioningMode::LocalOnly => local
                .encode(x0)?
                .rows()
                .into_iter()
                .map(|r| r.to_owned())
                .collect(),
            ConditioningMode::Fused => {
                let mut rows = vec![global.encode(x0)?];
                rows.extend(local.encode(x0)?.rows().into_iter().map(|r| r.to_owned()));
                rows
            }
            ConditioningMode::TextOnly => unreachable!(),
        };
        padded_per_image.push(adapter.pad_rows(rows)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, adapter.store.len());
    let null = Prompt::unconditional(schema);
    let nd = schema.num_domains();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        adapter.store.zero_grads();
        model.store.zero_grads();
        let mut loss_acc = 0.0;
        for _ in 0..config.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (x0, prompt) = &dataset[idx];
            let t = rng.gen_range(1..=schedule.num_steps());
            let noise =
                Array3::from_shape_fn(x0.data.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let x_t = crate::schedule::forward_diffuse(x0, t, &noise, schedule)?;
            let dropped = config.condition_dropout > 0.0 && rng.gen_bool(config.condition_dropout);
            let p = if dropped { &null } else { prompt };
            let c_t = model.embed.embed_prompt(&model.store.values, p)?;
            let (seq, proj_cache) = if dropped {
                (c_t.tokens.clone(), None)
            } else {
                let (fused, cache) = adapter.project(&padded_per_image[idx]);
                let nt = c_t.tokens.shape()[0];
                let mut seq = Array2::zeros((nt + fused.shape()[0], model.dims.token_dim));
                seq.slice_mut(ndarray::s![..nt, ..]).assign(&c_t.tokens);
                seq.slice_mut(ndarray::s![nt.., ..]).assign(&fused);
                (seq, Some(cache))
            };
            let (eps_hat, fwd_cache) = model.forward(&x_t.data, &seq, t);
            let n = eps_hat.len() as f64;
            let diff = &eps_hat - &noise;
            loss_acc += diff.mapv(|v| v * v).sum() / n;
            let deps = diff.mapv(|v| 2.0 * v / n / config.batch_size as f64);
            let dtokens = model.backward(&fwd_cache, &deps);
            if let Some(cache) = proj_cache {
                let dfused = dtokens.slice(ndarray::s![nd + 1.., ..]).to_owned();
                adapter.backward(&cache, &dfused);
            }
        }
        let loss = loss_acc / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(LaceError::Diverged(format!(
                "adapter loss became non-finite at step {step}"
            )));
        }
        // Only the adapter moves; the denoiser's accumulated grads are
        // discarded by the next zero_grads.
        adam.step(&mut adapter.store);
        log.push((step, loss));
    }
    model.store.zero_grads();
    adapter.trained = true;
    Ok(log)
}
