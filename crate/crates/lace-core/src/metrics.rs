//! Evaluation suite: background-preservation metrics (MSE, PSNR, SSIM),
//! a token-Gram structure distance, attribute correctness probes and the
//! line-oriented evaluation report.

use ndarray::{Array2, Array3};

use crate::conditioning::LocalEncoder;
use crate::error::{LaceError, Result};
use crate::guidance::TranslationRequest;
use crate::schedule::LatentState;
use crate::world::{measure_attributes, AttributeSchema};

pub const PSNR_CAP_DB: f64 = 99.0;

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LaceError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len() as f64;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    Ok(acc / n)
}

/// 10 log10(max^2 / mse), capped at 99 dB when the images are identical.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, max_value: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / m).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 2.0;

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::zeros((SSIM_WINDOW, SSIM_WINDOW));
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w[[y, x]] = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let s = w.sum();
    w / s
}

/// Mean local SSIM over valid 11x11 Gaussian windows, averaged across
/// channels. Dynamic range 2 for signals in [-1, 1].
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (ch, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LaceError::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[[wy, wx]];
                        let va = a[[c, oy + wy, ox + wx]];
                        let vb = b[[c, oy + wy, ox + wx]];
                        mu_a += g * va;
                        mu_b += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn token_gram(tokens: &Array2<f64>) -> Array2<f64> {
    let n = tokens.shape()[0];
    let norms: Vec<f64> = tokens
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    let mut g = tokens.dot(&tokens.t());
    for i in 0..n {
        for j in 0..n {
            g[[i, j]] /= norms[i] * norms[j];
        }
    }
    g
}

/// Mean absolute difference between the cosine Gram matrices of the two
/// images' local tokens. Low when layout matches, regardless of appearance.
pub fn structure_distance(a: &LatentState, b: &LatentState, encoder: &LocalEncoder) -> Result<f64> {
    if !encoder.trained {
        return Err(LaceError::NotReady("local encoder is untrained".into()));
    }
    check_same_shape(&a.data, &b.data)?;
    let ga = token_gram(&encoder.encode(a)?);
    let gb = token_gram(&encoder.encode(b)?);
    Ok((&ga - &gb).mapv(f64::abs).mean().unwrap())
}

/// Per-domain correctness of one translation output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    /// One flag per schema domain, in schema order.
    pub per_domain: Vec<bool>,
    pub all_correct: bool,
    /// Set when the output could not be measured at all.
    pub failure: Option<String>,
}

/// Edited domains must measure as their targets; unedited domains must match
/// the source image's measurement.
pub fn attribute_correctness(
    source: &LatentState,
    output: &LatentState,
    request: &TranslationRequest,
    schema: &AttributeSchema,
) -> Result<AttributeRecord> {
    let d = schema.num_domains();
    let src_m = measure_attributes(source, schema)?;
    let out_m = match measure_attributes(output, schema) {
        Ok(m) => m,
        Err(LaceError::Unmeasurable(reason)) => {
            return Ok(AttributeRecord {
                per_domain: vec![false; d],
                all_correct: false,
                failure: Some(reason),
            });
        }
        Err(e) => return Err(e),
    };
    let mut per_domain = Vec::with_capacity(d);
    for di in 0..d {
        let expected = request
            .edits
            .iter()
            .find(|e| e.domain == di)
            .map(|e| Some(e.target_value))
            .unwrap_or_else(|| src_m.prompt.value(di));
        per_domain.push(out_m.prompt.value(di) == expected);
    }
    let all_correct = per_domain.iter().all(|&b| b);
    Ok(AttributeRecord {
        per_domain,
        all_correct,
        failure: None,
    })
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054_f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

// ---------------------------------------------------------------------------
// EvalReport
// ---------------------------------------------------------------------------

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
    pub structure: f64,
    pub per_domain: Vec<bool>,
    pub all_correct: bool,
}

/// Aggregate means over a record list.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
    pub structure: f64,
    pub per_domain_rate: Vec<f64>,
    pub all_correct_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    pub domains: Vec<String>,
    pub records: Vec<ImageRecord>,
}

/// Metrics the reference tables report but that need pretrained networks;
/// kept as named null columns so table layouts line up.
const NULL_COLUMNS: &[&str] = &["fid", "fid_clip", "lpips", "clip_sim"];

impl EvalReport {
    pub fn new(seed: u64, config_hash: impl Into<String>, domains: Vec<String>) -> Self {
        EvalReport {
            seed,
            config_hash: config_hash.into(),
            domains,
            records: Vec::new(),
        }
    }

    pub fn aggregates(&self) -> Aggregates {
        let n = self.records.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageRecord) -> f64| {
            self.records.iter().map(|r| f(r)).sum::<f64>() / n
        };
        let per_domain_rate = (0..self.domains.len())
            .map(|d| {
                self.records
                    .iter()
                    .filter(|r| r.per_domain.get(d).copied().unwrap_or(false))
                    .count() as f64
                    / n
            })
            .collect();
        Aggregates {
            psnr: mean(&|r| r.psnr),
            mse: mean(&|r| r.mse),
            ssim: mean(&|r| r.ssim),
            structure: mean(&|r| r.structure),
            per_domain_rate,
            all_correct_rate: self.records.iter().filter(|r| r.all_correct).count() as f64 / n,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("#seed\t{}\n", self.seed));
        out.push_str(&format!("#config_hash\t{}\n", self.config_hash));
        out.push_str("name\tpsnr\tmse\tssim\tstructure");
        for c in NULL_COLUMNS {
            out.push_str(&format!("\t{c}"));
        }
        for d in &self.domains {
            out.push_str(&format!("\tcorrect_{d}"));
        }
        out.push_str("\tall_correct\n");
        let fmt_bool = |b: bool| if b { "1" } else { "0" };
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:?}\t{:?}\t{:?}\t{:?}",
                r.name, r.psnr, r.mse, r.ssim, r.structure
            ));
            for _ in NULL_COLUMNS {
                out.push_str("\tnull");
            }
            for &b in &r.per_domain {
                out.push_str(&format!("\t{}", fmt_bool(b)));
            }
            out.push_str(&format!("\t{}\n", fmt_bool(r.all_correct)));
        }
        let a = self.aggregates();
        out.push_str(&format!(
            "#aggregate\t{:?}\t{:?}\t{:?}\t{:?}",
            a.psnr, a.mse, a.ssim, a.structure
        ));
        for _ in NULL_COLUMNS {
            out.push_str("\tnull");
        }
        for r in &a.per_domain_rate {
            out.push_str(&format!("\t{r:?}"));
        }
        out.push_str(&format!("\t{:?}\n", a.all_correct_rate));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |m: &str| LaceError::InvalidArgument(format!("eval report parse: {m}"));
        let mut lines = text.lines();
        let seed_line = lines.next().ok_or_else(|| err("missing seed line"))?;
        let seed: u64 = seed_line
            .strip_prefix("#seed\t")
            .ok_or_else(|| err("bad seed line"))?
            .parse()
            .map_err(|_| err("bad seed value"))?;
        let hash_line = lines.next().ok_or_else(|| err("missing hash line"))?;
        let config_hash = hash_line
            .strip_prefix("#config_hash\t")
            .ok_or_else(|| err("bad hash line"))?
            .to_string();
        let header = lines.next().ok_or_else(|| err("missing header"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        let domains: Vec<String> = cols
            .iter()
            .filter_map(|c| c.strip_prefix("correct_"))
            .map(|s| s.to_string())
            .collect();
        let nd = domains.len();
        let mut records = Vec::new();
        let mut aggregate_line = None;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#aggregate\t") {
                aggregate_line = Some(rest.to_string());
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 + NULL_COLUMNS.len() + nd + 1 {
                return Err(err(&format!("row has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad float"));
            let per_domain = f[5 + NULL_COLUMNS.len()..5 + NULL_COLUMNS.len() + nd]
                .iter()
                .map(|s| *s == "1")
                .collect();
            records.push(ImageRecord {
                name: f[0].to_string(),
                psnr: num(f[1])?,
                mse: num(f[2])?,
                ssim: num(f[3])?,
                structure: num(f[4])?,
                per_domain,
                all_correct: *f.last().unwrap() == "1",
            });
        }
        let report = EvalReport {
            seed,
            config_hash,
            domains,
            records,
        };
        // The stored aggregate row must match what the records imply.
        if let Some(line) = aggregate_line {
            let a = report.aggregates();
            let f: Vec<&str> = line.split('\t').collect();
            let stored: Vec<f64> = [0, 1, 2, 3]
                .iter()
                .map(|&i| f[i].parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            let derived = [a.psnr, a.mse, a.ssim, a.structure];
            for (s, d) in stored.iter().zip(derived.iter()) {
                if s.to_bits() != d.to_bits() {
                    return Err(err("aggregate row inconsistent with records"));
                }
            }
        } else if !report.records.is_empty() {
            return Err(err("missing aggregate row"));
        }
        Ok(report)
    }
}
