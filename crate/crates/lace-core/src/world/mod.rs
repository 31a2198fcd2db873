//! The two controlled test universes: a procedural multi-attribute shape
//! generator (desk-scale dataset stand-in) and an analytic Gaussian world
//! whose Bayes-optimal noise predictor is known in closed form.

mod dataset;
mod gaussian;
mod measure;
mod render;

pub use dataset::{
    emit_dataset, entry_seed, from_rgb8, load_dataset_images, load_manifest, load_png, save_png,
    to_rgb8, DatasetEntry,
};
pub use gaussian::GaussianWorld;
pub use measure::{measure_attributes, Measurement};
pub use render::generate_sample;

use crate::error::{LaceError, Result};

/// Ordered attribute domains and their value sets, plus the designated
/// unconditional token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    domains: Vec<(String, Vec<String>)>,
    null_token: String,
}

impl AttributeSchema {
    pub fn new(domains: Vec<(String, Vec<String>)>, null_token: impl Into<String>) -> Result<Self> {
        if domains.is_empty() {
            return Err(LaceError::InvalidArgument("schema needs >= 1 domain".into()));
        }
        for (i, (name, values)) in domains.iter().enumerate() {
            if values.len() < 2 {
                return Err(LaceError::InvalidArgument(format!(
                    "domain {name:?} needs >= 2 values"
                )));
            }
            if domains[..i].iter().any(|(n, _)| n == name) {
                return Err(LaceError::InvalidArgument(format!(
                    "duplicate domain {name:?}"
                )));
            }
        }
        Ok(AttributeSchema {
            domains,
            null_token: null_token.into(),
        })
    }

    /// The shape/color/background schema used throughout the artifact:
    /// 3 x 3 x 2 = 18 attribute combinations.
    pub fn shapes_default() -> Self {
        AttributeSchema::new(
            vec![
                (
                    "shape".into(),
                    vec!["circle".into(), "square".into(), "triangle".into()],
                ),
                (
                    "color".into(),
                    vec!["red".into(), "green".into(), "blue".into()],
                ),
                ("background".into(), vec!["light".into(), "dark".into()]),
            ],
            "<null>",
        )
        .expect("static schema is valid")
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[(String, Vec<String>)] {
        &self.domains
    }

    pub fn null_token(&self) -> &str {
        &self.null_token
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| LaceError::UnknownDomain(name.into()))
    }

    pub fn value_index(&self, domain: usize, value: &str) -> Result<usize> {
        let (dname, values) = &self.domains[domain];
        values
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| LaceError::UnknownValue {
                domain: dname.clone(),
                value: value.into(),
            })
    }

    pub fn value_name(&self, domain: usize, value: usize) -> &str {
        &self.domains[domain].1[value]
    }

    /// Total number of fully assigned prompts.
    pub fn num_combinations(&self) -> usize {
        self.domains.iter().map(|(_, v)| v.len()).product()
    }

    /// Enumerate every fully assigned prompt in row-major (last domain
    /// fastest) order.
    pub fn all_prompts(&self) -> Vec<Prompt> {
        let mut out = vec![Prompt::unconditional(self)];
        for (d, (_, values)) in self.domains.iter().enumerate() {
            let mut next = Vec::new();
            for p in &out {
                for v in 0..values.len() {
                    let mut q = p.clone();
                    q.assignment[d] = Some(v);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }
}

/// One value index per domain; `None` marks the unconditional token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt {
    assignment: Vec<Option<usize>>,
}

impl Prompt {
    pub fn unconditional(schema: &AttributeSchema) -> Self {
        Prompt {
            assignment: vec![None; schema.num_domains()],
        }
    }

    /// Build a fully assigned prompt from value names, one per domain in
    /// schema order.
    pub fn from_names(schema: &AttributeSchema, names: &[&str]) -> Result<Self> {
        if names.len() != schema.num_domains() {
            return Err(LaceError::InvalidArgument(format!(
                "expected {} values, got {}",
                schema.num_domains(),
                names.len()
            )));
        }
        let mut assignment = Vec::with_capacity(names.len());
        for (d, name) in names.iter().enumerate() {
            assignment.push(Some(schema.value_index(d, name)?));
        }
        Ok(Prompt { assignment })
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        Prompt {
            assignment: indices.iter().map(|&i| Some(i)).collect(),
        }
    }

    pub fn value(&self, domain: usize) -> Option<usize> {
        self.assignment[domain]
    }

    pub fn set_value(&mut self, domain: usize, value: usize) {
        self.assignment[domain] = Some(value);
    }

    pub fn num_domains(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_fully_assigned(&self) -> bool {
        self.assignment.iter().all(|a| a.is_some())
    }

    /// The all-null prompt with the same domain count.
    pub fn to_unconditional(&self) -> Prompt {
        Prompt {
            assignment: vec![None; self.assignment.len()],
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.assignment.iter().all(|a| a.is_none())
    }

    pub fn describe(&self, schema: &AttributeSchema) -> String {
        self.assignment
            .iter()
            .enumerate()
            .map(|(d, a)| {
                let v = match a {
                    Some(v) => schema.value_name(d, *v),
                    None => schema.null_token(),
                };
                format!("{}={}", schema.domains()[d].0, v)
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Parse the `domain=value;domain=value` form produced by `describe`.
    pub fn parse(schema: &AttributeSchema, text: &str) -> Result<Self> {
        let mut prompt = Prompt::unconditional(schema);
        for part in text.split(';').filter(|p| !p.is_empty()) {
            let (dname, vname) = part
                .split_once('=')
                .ok_or_else(|| LaceError::InvalidArgument(format!("bad assignment {part:?}")))?;
            let d = schema.domain_index(dname)?;
            if vname != schema.null_token() {
                prompt.assignment[d] = Some(schema.value_index(d, vname)?);
            }
        }
        Ok(prompt)
    }
}
