//! Procedural renderer for the shapes dataset. Deterministic in
//! (prompt, seed); values live in [-1, 1] with 3x3 supersampled coverage at
//! shape boundaries.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttributeSchema, Prompt};
use crate::error::{LaceError, Result};
use crate::schedule::LatentState;

pub(crate) const LIGHT_BG: f64 = 0.7;
pub(crate) const DARK_BG: f64 = -0.7;

/// RGB prototypes for the color domain, in schema value order.
pub(crate) const COLORS: [[f64; 3]; 3] = [
    [0.8, -0.8, -0.8], // red
    [-0.8, 0.8, -0.8], // green
    [-0.8, -0.8, 0.8], // blue
];

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Render one sample: a single filled shape on a flat background, with
/// position and size jittered by the seed.
pub fn generate_sample(
    schema: &AttributeSchema,
    prompt: &Prompt,
    seed: u64,
    size: (usize, usize),
) -> Result<LatentState> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(LaceError::InvalidArgument(format!(
            "image size must be >= 16x16, got {h}x{w}"
        )));
    }
    if !prompt.is_fully_assigned() {
        let d = (0..prompt.num_domains())
            .find(|&d| prompt.value(d).is_none())
            .unwrap();
        return Err(LaceError::UnassignedDomain(schema.domains()[d].0.clone()));
    }
    let shape_d = schema.domain_index("shape")?;
    let color_d = schema.domain_index("color")?;
    let bg_d = schema.domain_index("background")?;
    let shape = match schema.value_name(shape_d, prompt.value(shape_d).unwrap()) {
        "circle" => ShapeKind::Circle,
        "square" => ShapeKind::Square,
        "triangle" => ShapeKind::Triangle,
        other => return Err(LaceError::InvalidArgument(format!("unknown shape {other}"))),
    };
    let color = COLORS[prompt.value(color_d).unwrap()];
    let bg = match schema.value_name(bg_d, prompt.value(bg_d).unwrap()) {
        "light" => LIGHT_BG,
        "dark" => DARK_BG,
        other => {
            return Err(LaceError::InvalidArgument(format!(
                "unknown background {other}"
            )))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = h.min(w) as f64;
    // Jitter keeps the shape clear of the 2-px border ring used by the
    // measurement probe.
    let cy = h as f64 * rng.gen_range(0.42..0.58);
    let cx = w as f64 * rng.gen_range(0.42..0.58);
    let radius = min_dim * rng.gen_range(0.22..0.30);

    let mut data = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            // 3x3 supersampled coverage.
            let mut inside = 0u32;
            for sy in 0..3 {
                for sx in 0..3 {
                    let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                    let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                    if point_inside(shape, px - cx, py - cy, radius) {
                        inside += 1;
                    }
                }
            }
            let cov = inside as f64 / 9.0;
            for c in 0..3 {
                data[[c, y, x]] = bg * (1.0 - cov) + color[c] * cov;
            }
        }
    }
    Ok(LatentState::clean(data))
}

fn point_inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => {
            // Match the circle's area so fill-ratio signatures, not size,
            // separate the classes.
            let half = r * (std::f64::consts::PI).sqrt() / 2.0;
            dx.abs() <= half && dy.abs() <= half
        }
        ShapeKind::Triangle => {
            // Upward isosceles triangle: apex at (0, -r), base at y = +r
            // spanning [-b, b] with b chosen for circle-equal area.
            let b = std::f64::consts::PI * r / 2.0;
            if dy < -r || dy > r {
                return false;
            }
            let frac = (dy + r) / (2.0 * r);
            dx.abs() <= b * frac
        }
    }
}
