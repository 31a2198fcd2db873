//! Guidance combinators: classifier-free guidance and multi-domain control
//! guidance over noise predictions, plus prompt-variant construction.

use ndarray::Array3;

use crate::error::{LaceError, Result};
use crate::world::{AttributeSchema, Prompt};

/// One requested attribute edit with its own guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub domain: usize,
    pub target_value: usize,
    pub scale: f64,
}

/// A source prompt plus the set of single-domain edits to apply.
#[derive(Debug, Clone)]
pub struct TranslationRequest {
    pub source: Prompt,
    pub edits: Vec<EditSpec>,
}

impl TranslationRequest {
    pub fn new(schema: &AttributeSchema, source: Prompt, edits: Vec<EditSpec>) -> Result<Self> {
        if !source.is_fully_assigned() {
            return Err(LaceError::UnassignedDomain(
                "source prompt must assign every domain".into(),
            ));
        }
        let mut seen = vec![false; schema.num_domains()];
        for e in &edits {
            if e.domain >= schema.num_domains() {
                return Err(LaceError::UnknownDomain(format!("domain index {}", e.domain)));
            }
            if e.target_value >= schema.domains()[e.domain].1.len() {
                return Err(LaceError::UnknownValue {
                    domain: schema.domains()[e.domain].0.clone(),
                    value: format!("index {}", e.target_value),
                });
            }
            if !e.scale.is_finite() {
                return Err(LaceError::InvalidArgument(format!(
                    "non-finite scale for domain {}",
                    e.domain
                )));
            }
            if seen[e.domain] {
                return Err(LaceError::DuplicateEditDomain(
                    schema.domains()[e.domain].0.clone(),
                ));
            }
            seen[e.domain] = true;
        }
        Ok(TranslationRequest { source, edits })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.edits.iter().map(|e| e.scale).collect()
    }

    /// Same edits with every scale replaced, for sweeps.
    pub fn with_uniform_scale(&self, s: f64) -> TranslationRequest {
        let mut r = self.clone();
        for e in &mut r.edits {
            e.scale = s;
        }
        r
    }

    /// The fully edited prompt (all targets applied at once).
    pub fn target_prompt(&self) -> Prompt {
        let mut p = self.source.clone();
        for e in &self.edits {
            p.set_value(e.domain, e.target_value);
        }
        p
    }
}

/// How the sampler combines predictions during the reverse pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    None,
    Cfg { weight: f64 },
    Mcg,
}

/// Variant d is the source prompt with only domain d's value substituted,
/// in edit order.
pub fn build_prompt_variants(request: &TranslationRequest) -> (Prompt, Vec<Prompt>) {
    let variants = request
        .edits
        .iter()
        .map(|e| {
            let mut p = request.source.clone();
            p.set_value(e.domain, e.target_value);
            p
        })
        .collect();
    (request.source.clone(), variants)
}

fn check_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LaceError::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// eps_src + s (eps_tgt - eps_src).
pub fn mcg_single(eps_src: &Array3<f64>, eps_tgt: &Array3<f64>, s: f64) -> Result<Array3<f64>> {
    check_shape(eps_src, eps_tgt)?;
    let mut out = eps_src.clone();
    out.zip_mut_with(eps_tgt, |o, &t| *o += s * (t - *o));
    Ok(out)
}

/// eps_uncond + w (eps_cond - eps_uncond). Same update as `mcg_single`
/// anchored at the unconditional prediction.
pub fn cfg_guide(eps_uncond: &Array3<f64>, eps_cond: &Array3<f64>, w: f64) -> Result<Array3<f64>> {
    mcg_single(eps_uncond, eps_cond, w)
}

/// eps_src + sum_d scales[d] (eps_targets[d] - eps_src), accumulated in
/// edit order.
pub fn mcg_multi(
    eps_src: &Array3<f64>,
    eps_targets: &[Array3<f64>],
    scales: &[f64],
) -> Result<Array3<f64>> {
    if eps_targets.len() != scales.len() {
        return Err(LaceError::InvalidArgument(format!(
            "{} targets but {} scales",
            eps_targets.len(),
            scales.len()
        )));
    }
    for t in eps_targets {
        check_shape(eps_src, t)?;
    }
    let mut out = eps_src.clone();
    for (t, &s) in eps_targets.iter().zip(scales) {
        ndarray::Zip::from(&mut out)
            .and(t)
            .and(eps_src)
            .for_each(|o, &ti, &si| *o += s * (ti - si));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn schema() -> AttributeSchema {
        AttributeSchema::shapes_default()
    }

    #[test]
    fn request_validation() {
        let s = schema();
        let src = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let ok = TranslationRequest::new(
            &s,
            src.clone(),
            vec![EditSpec {
                domain: 1,
                target_value: 2,
                scale: 1.0,
            }],
        );
        assert!(ok.is_ok());
        let dup = TranslationRequest::new(
            &s,
            src.clone(),
            vec![
                EditSpec {
                    domain: 1,
                    target_value: 2,
                    scale: 1.0,
                },
                EditSpec {
                    domain: 1,
                    target_value: 0,
                    scale: 0.5,
                },
            ],
        );
        assert!(matches!(dup, Err(LaceError::DuplicateEditDomain(_))));
        let bad_dom = TranslationRequest::new(
            &s,
            src.clone(),
            vec![EditSpec {
                domain: 9,
                target_value: 0,
                scale: 1.0,
            }],
        );
        assert!(matches!(bad_dom, Err(LaceError::UnknownDomain(_))));
        let bad_val = TranslationRequest::new(
            &s,
            src.clone(),
            vec![EditSpec {
                domain: 2,
                target_value: 7,
                scale: 1.0,
            }],
        );
        assert!(matches!(bad_val, Err(LaceError::UnknownValue { .. })));
        let inf = TranslationRequest::new(
            &s,
            src,
            vec![EditSpec {
                domain: 0,
                target_value: 1,
                scale: f64::NAN,
            }],
        );
        assert!(inf.is_err());
    }

    #[test]
    fn variants_single_substitution() {
        let s = schema();
        let src = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let req = TranslationRequest::new(
            &s,
            src.clone(),
            vec![EditSpec {
                domain: 1,
                target_value: 2,
                scale: 1.0,
            }],
        )
        .unwrap();
        let (r, vs) = build_prompt_variants(&req);
        assert_eq!(r, src);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0], Prompt::from_names(&s, &["circle", "blue", "light"]).unwrap());
    }

    #[test]
    fn variants_empty_and_hamming() {
        let s = schema();
        let src = Prompt::from_names(&s, &["square", "green", "dark"]).unwrap();
        let empty = TranslationRequest::new(&s, src.clone(), vec![]).unwrap();
        assert!(build_prompt_variants(&empty).1.is_empty());

        let req = TranslationRequest::new(
            &s,
            src.clone(),
            vec![
                EditSpec { domain: 0, target_value: 0, scale: 1.0 },
                EditSpec { domain: 1, target_value: 0, scale: 1.0 },
                EditSpec { domain: 2, target_value: 0, scale: 1.0 },
            ],
        )
        .unwrap();
        let (_, vs) = build_prompt_variants(&req);
        assert_eq!(vs.len(), 3);
        for (d, v) in vs.iter().enumerate() {
            let hamming: usize = (0..3).filter(|&i| v.value(i) != src.value(i)).count();
            assert_eq!(hamming, 1, "variant {d}");
            assert_eq!(v.value(d), Some(0));
        }
    }

    #[test]
    fn cfg_endpoints_and_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = randn(&mut rng, (2, 3, 3));
        let c = randn(&mut rng, (2, 3, 3));
        assert_eq!(cfg_guide(&u, &c, 0.0).unwrap(), u);
        let w1 = cfg_guide(&u, &c, 1.0).unwrap();
        for (a, b) in w1.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let u0 = Array3::zeros((1, 1, 2));
        let mut cc = Array3::zeros((1, 1, 2));
        cc[[0, 0, 0]] = 2.0;
        cc[[0, 0, 1]] = -4.0;
        let g = cfg_guide(&u0, &cc, 1.5).unwrap();
        assert_eq!(g[[0, 0, 0]], 3.0);
        assert_eq!(g[[0, 0, 1]], -6.0);
    }

    #[test]
    fn mcg_single_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, (3, 4, 4));
        let b = randn(&mut rng, (3, 4, 4));
        assert_eq!(mcg_single(&a, &b, 0.0).unwrap(), a);
        let s1 = mcg_single(&a, &b, 1.0).unwrap();
        for (x, y) in s1.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        let src = Array3::zeros((1, 1, 2));
        let mut tgt = Array3::zeros((1, 1, 2));
        tgt[[0, 0, 0]] = 1.0;
        tgt[[0, 0, 1]] = -2.0;
        let g = mcg_single(&src, &tgt, 0.5).unwrap();
        assert_eq!(g[[0, 0, 0]], 0.5);
        assert_eq!(g[[0, 0, 1]], -1.0);
    }

    #[test]
    fn mcg_multi_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = randn(&mut rng, (3, 5, 5));
        // All targets equal source -> exactly source.
        let same = vec![src.clone(), src.clone()];
        assert_eq!(mcg_multi(&src, &same, &[1.3, -0.7]).unwrap(), src);
        // D = 1 reduces to mcg_single, bitwise.
        let t = randn(&mut rng, (3, 5, 5));
        assert_eq!(
            mcg_multi(&src, std::slice::from_ref(&t), &[0.37]).unwrap(),
            mcg_single(&src, &t, 0.37).unwrap()
        );
        // Worked scalar example.
        let z = Array3::zeros((1, 1, 1));
        let mut t1 = z.clone();
        t1[[0, 0, 0]] = 1.0;
        let mut t2 = z.clone();
        t2[[0, 0, 0]] = -2.0;
        let g = mcg_multi(&z, &[t1, t2], &[1.0, 0.5]).unwrap();
        assert_eq!(g[[0, 0, 0]], 0.0);
    }

    #[test]
    fn mcg_multi_errors() {
        let src = Array3::<f64>::zeros((1, 2, 2));
        let bad_shape = Array3::<f64>::zeros((1, 2, 3));
        assert!(mcg_multi(&src, &[bad_shape], &[1.0]).is_err());
        assert!(mcg_multi(&src, &[src.clone()], &[1.0, 2.0]).is_err());
        assert_eq!(mcg_multi(&src, &[], &[]).unwrap(), src);
    }

    #[test]
    fn delta_additivity_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let src = randn(&mut rng, (2, 4, 4));
            let targets: Vec<_> = (0..3).map(|_| randn(&mut rng, (2, 4, 4))).collect();
            let scales = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let multi = mcg_multi(&src, &targets, &scales).unwrap();
            let mut summed = src.clone();
            for (t, &s) in targets.iter().zip(&scales) {
                let single = mcg_single(&src, t, s).unwrap();
                summed = summed + &single - &src;
            }
            for (a, b) in multi.iter().zip(summed.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cfg_is_mcg_special_case_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let u = randn(&mut rng, (3, 4, 4));
            let c = randn(&mut rng, (3, 4, 4));
            let w = rng.gen_range(-3.0..3.0);
            let a = cfg_guide(&u, &c, w).unwrap();
            let b = mcg_single(&u, &c, w).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn guided_prediction_affine_in_each_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = randn(&mut rng, (2, 3, 3));
        let targets: Vec<_> = (0..2).map(|_| randn(&mut rng, (2, 3, 3))).collect();
        // Fix s2, vary s1: g(s1) must satisfy g(a+b) = g(a) + g(b) - g(0).
        let s2 = 0.8;
        let g = |s1: f64| mcg_multi(&src, &targets, &[s1, s2]).unwrap();
        let (a, b) = (0.6, -1.1);
        let lhs = g(a + b);
        let rhs = g(a) + &g(b) - &g(0.0);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_world_mcg_exactness() {
        use crate::world::GaussianWorld;
        let s = schema();
        let world = GaussianWorld::random(s.clone(), (2, 4, 4), 42);
        let schedule =
            crate::schedule::make_schedule(crate::schedule::ScheduleKind::Linear, 50, 1e-4, 0.02)
                .unwrap();
        let src = Prompt::from_names(&s, &["circle", "red", "light"]).unwrap();
        let req = TranslationRequest::new(
            &s,
            src.clone(),
            vec![
                EditSpec { domain: 0, target_value: 1, scale: 1.0 },
                EditSpec { domain: 1, target_value: 2, scale: 1.0 },
                EditSpec { domain: 2, target_value: 1, scale: 1.0 },
            ],
        )
        .unwrap();
        let (_, variants) = build_prompt_variants(&req);
        let full_target = req.target_prompt();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &t in &[1usize, 10, 25, 50] {
            let x = crate::schedule::LatentState {
                data: randn(&mut rng, (2, 4, 4)),
                timestep: t,
            };
            let eps_src = world.analytic_epsilon(&x, &src, &schedule).unwrap();
            let eps_targets: Vec<_> = variants
                .iter()
                .map(|v| world.analytic_epsilon(&x, v, &schedule).unwrap())
                .collect();
            let guided = mcg_multi(&eps_src, &eps_targets, &[1.0, 1.0, 1.0]).unwrap();
            let exact = world.analytic_epsilon(&x, &full_target, &schedule).unwrap();
            for (a, b) in guided.iter().zip(exact.iter()) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }
}
