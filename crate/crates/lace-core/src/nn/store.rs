//! Flat parameter store shared by every trainable module. Parameters are
//! named slices of one contiguous buffer, which keeps checkpointing, Adam
//! updates and finite-difference probes trivial.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, ParamRef, Vec<usize>)>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize], init: impl FnMut() -> f64) -> ParamRef {
        assert!(
            !self.entries.iter().any(|(n, _, _)| n == name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        let mut init = init;
        self.values.extend((0..len).map(|_| init()));
        self.grads.extend(std::iter::repeat(0.0).take(len));
        let r = ParamRef { offset, len };
        self.entries.push((name.to_string(), r, shape.to_vec()));
        r
    }

    pub fn alloc_zeros(&mut self, name: &str, shape: &[usize]) -> ParamRef {
        self.alloc(name, shape, || 0.0)
    }

    /// He-style normal init scaled by 1/sqrt(fan_in).
    pub fn alloc_he<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamRef {
        let scale = (1.0 / fan_in as f64).sqrt();
        self.alloc(name, shape, || scale * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn get(&self, r: ParamRef) -> &[f64] {
        &self.values[r.offset..r.offset + r.len]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut [f64] {
        &mut self.values[r.offset..r.offset + r.len]
    }

    pub fn grad(&self, r: ParamRef) -> &[f64] {
        &self.grads[r.offset..r.offset + r.len]
    }

    pub fn grad_mut(&mut self, r: ParamRef) -> &mut [f64] {
        &mut self.grads[r.offset..r.offset + r.len]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ParamRef, &[usize])> {
        self.entries
            .iter()
            .map(|(n, r, s)| (n.as_str(), *r, s.as_slice()))
    }

    pub fn find(&self, name: &str) -> Option<(ParamRef, &[usize])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, r, s)| (*r, s.as_slice()))
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction; state lives outside the store so a frozen
/// store can still be evaluated cheaply.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(store.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.values.len() {
            let g = store.grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            store.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Restrict updates to one parameter range (used by the adapter stage,
    /// where everything else is frozen).
    pub fn step_range(&mut self, store: &mut ParamStore, range: std::ops::Range<usize>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in range {
            let g = store.grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            store.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_and_lookup() {
        let mut s = ParamStore::new();
        let a = s.alloc("w", &[2, 3], || 1.0);
        let b = s.alloc_zeros("b", &[3]);
        assert_eq!(s.len(), 9);
        assert_eq!(s.get(a), &[1.0; 6]);
        assert_eq!(s.get(b), &[0.0; 3]);
        let (r, shape) = s.find("w").unwrap();
        assert_eq!(r, a);
        assert_eq!(shape, &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.alloc_zeros("w", &[1]);
        s.alloc_zeros("w", &[1]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let p = s.alloc("x", &[2], || 5.0);
        let mut adam = Adam::new(0.1, s.len());
        for _ in 0..500 {
            s.zero_grads();
            let x: Vec<f64> = s.get(p).to_vec();
            for (g, xi) in s.grad_mut(p).iter_mut().zip(&x) {
                *g = 2.0 * xi;
            }
            adam.step(&mut s);
        }
        assert!(s.get(p).iter().all(|x| x.abs() < 1e-3));
    }
}
