//! Procedural ground-truth probe: recovers the attribute assignment of a
//! rendered (or translated) image without any learned component.

use super::render::{COLORS, DARK_BG, LIGHT_BG};
use super::{AttributeSchema, Prompt};
use crate::error::{LaceError, Result};
use crate::schedule::LatentState;

/// Chroma distance from the border median above which a pixel counts as
/// foreground; calibrated by the noisy-measurement robustness run.
const FOREGROUND_THRESHOLD: f64 = 0.25;
const MIN_FOREGROUND_PIXELS: usize = 10;

#[derive(Debug, Clone)]
pub struct Measurement {
    pub prompt: Prompt,
    /// Per-domain confidence in [0, 1], schema order.
    pub confidence: Vec<f64>,
}

/// Measure shape, color and background of a clean image. Degenerate images
/// (no detectable foreground) yield an explicit error rather than a guess.
pub fn measure_attributes(image: &LatentState, schema: &AttributeSchema) -> Result<Measurement> {
    if image.timestep != 0 {
        return Err(LaceError::InvalidArgument(format!(
            "measure_attributes expects timestep 0, got {}",
            image.timestep
        )));
    }
    let (ch, h, w) = image.shape();
    if ch != 3 || h < 16 || w < 16 {
        return Err(LaceError::ShapeMismatch {
            expected: "(3, >=16, >=16)".into(),
            got: format!("({ch}, {h}, {w})"),
        });
    }

    // Border ring statistics (outer 2 px frame).
    let mut border: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..h {
        for x in 0..w {
            if y < 2 || y >= h - 2 || x < 2 || x >= w - 2 {
                for c in 0..3 {
                    border[c].push(image.data[[c, y, x]]);
                }
            }
        }
    }
    let border_median: [f64; 3] = [
        median(&mut border[0]),
        median(&mut border[1]),
        median(&mut border[2]),
    ];

    // Foreground mask from chroma distance to the border median.
    let mut mask = vec![false; h * w];
    let mut area = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut d2 = 0.0;
            for c in 0..3 {
                let diff = image.data[[c, y, x]] - border_median[c];
                d2 += diff * diff;
            }
            if (d2 / 3.0).sqrt() > FOREGROUND_THRESHOLD {
                mask[y * w + x] = true;
                area += 1;
            }
        }
    }
    if area < MIN_FOREGROUND_PIXELS {
        return Err(LaceError::Unmeasurable(format!(
            "foreground area {area} below {MIN_FOREGROUND_PIXELS} pixels"
        )));
    }

    // Background: border luminance against the two known levels.
    let border_lum = (border_median[0] + border_median[1] + border_median[2]) / 3.0;
    let (bg_idx, bg_conf) = if (border_lum - LIGHT_BG).abs() <= (border_lum - DARK_BG).abs() {
        (0usize, level_confidence(border_lum, LIGHT_BG, DARK_BG))
    } else {
        (1usize, level_confidence(border_lum, DARK_BG, LIGHT_BG))
    };

    // Color: mean foreground RGB against the color prototypes.
    let mut fg_mean = [0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for c in 0..3 {
                    fg_mean[c] += image.data[[c, y, x]];
                }
            }
        }
    }
    for c in fg_mean.iter_mut() {
        *c /= area as f64;
    }
    let mut dists: Vec<(usize, f64)> = COLORS
        .iter()
        .enumerate()
        .map(|(i, proto)| {
            let d2: f64 = (0..3).map(|c| (fg_mean[c] - proto[c]).powi(2)).sum();
            (i, d2.sqrt())
        })
        .collect();
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let color_idx = dists[0].0;
    let color_conf = margin_confidence(dists[0].1, dists[1].1);

    // Shape: fill ratio of the mask over its bounding box. Areas are matched
    // across classes, so the signature is square ~1.0, circle ~pi/4,
    // triangle ~0.5.
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let bbox_area = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    let fill = area as f64 / bbox_area;
    const FILL_SIGNATURES: [f64; 3] = [std::f64::consts::FRAC_PI_4, 1.0, 0.5];
    let mut fills: Vec<(usize, f64)> = FILL_SIGNATURES
        .iter()
        .enumerate()
        .map(|(i, sig)| (i, (fill - sig).abs()))
        .collect();
    fills.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let shape_idx = fills[0].0;
    let shape_conf = margin_confidence(fills[0].1, fills[1].1);

    let shape_d = schema.domain_index("shape")?;
    let color_d = schema.domain_index("color")?;
    let bg_d = schema.domain_index("background")?;
    let mut prompt = Prompt::unconditional(schema);
    prompt.set_value(shape_d, shape_idx);
    prompt.set_value(color_d, color_idx);
    prompt.set_value(bg_d, bg_idx);
    let mut confidence = vec![0.0; schema.num_domains()];
    confidence[shape_d] = shape_conf;
    confidence[color_d] = color_conf;
    confidence[bg_d] = bg_conf;
    Ok(Measurement { prompt, confidence })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Confidence that `x` sits at `chosen` rather than `other`, 1 at the chosen
/// level, 0 at the midpoint.
fn level_confidence(x: f64, chosen: f64, other: f64) -> f64 {
    let half = (chosen - other).abs() / 2.0;
    let mid = (chosen + other) / 2.0;
    (((x - mid).abs() / half).min(1.0)).max(0.0)
}

/// Confidence from the margin between best and runner-up distances.
fn margin_confidence(best: f64, runner_up: f64) -> f64 {
    if runner_up <= f64::EPSILON {
        return 0.0;
    }
    ((runner_up - best) / runner_up).clamp(0.0, 1.0)
}
