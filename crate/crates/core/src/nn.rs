//! Parameter storage, initialisation and first-order optimizers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::graph::{Grads, Graph, Tensor, Var};
use crate::scalar::{c, Scalar};

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S> Default for ParamSet<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a graph leaf; `trainable(i)` picks the ones
    /// that receive gradients.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(usize) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Bound {
        self.bind(g, |_| false)
    }

    pub fn bind_trainable(&self, g: &mut Graph<S>) -> Bound {
        self.bind(g, |_| true)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.iter() {
                v.append_le_bytes(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Same tensors converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamSet`], slot for slot.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Collects gradients slot by slot.
    pub fn grads<S: Scalar>(&self, grads: &mut Grads<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

pub fn normal_tensor<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let v: Vec<S> = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            c(e * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape matches length")
}

/// He-normal initialisation for a weight with `fan_in` inputs.
pub fn he_tensor<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    ArrayD::zeros(IxDyn(shape))
}

/// First-order update rule over a whole [`ParamSet`].
pub trait Optimizer<S: Scalar> {
    /// Applies one update; slots with no gradient are left untouched.
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]);

    fn steps_taken(&self) -> usize;
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
    t: usize,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: c(lr),
            beta1: c(beta1),
            beta2: c(beta2),
            eps: c(1e-8),
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Updates a free-standing tensor list (used for latent optimisation).
    pub fn step_tensors(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(params.tensor_mut(i))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (S::one() - b1) * g;
                    *v = b2 * *v + (S::one() - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }

    fn steps_taken(&self) -> usize {
        self.t
    }
}

/// SGD with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Option<Tensor<S>>>,
    t: usize,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr: c(lr),
            momentum: c(momentum),
            velocity: Vec::new(),
            t: 0,
        }
    }
}

impl<S: Scalar> Optimizer<S> for Sgd<S> {
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        self.t += 1;
        let (mu, lr) = (self.momentum, self.lr);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let vel = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(params.tensor_mut(i))
                .and(vel)
                .and(g)
                .for_each(|p, v, &g| {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                });
        }
    }

    fn steps_taken(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = ps.bind_trainable(&mut g);
            let sq = g.square(b.var(0));
            let l = g.sum(sq);
            let mut grads = g.backward(l);
            opt.step(&mut ps, &b.grads(&mut grads));
        }
        assert!(ps.tensor(0).iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn zero_learning_rate_keeps_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new();
        ps.push("w", he_tensor(&mut rng, &[4, 4], 4));
        let before = ps.checksum();
        let mut opt = Sgd::new(0.0, 0.9);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[4, 4]), 1.0f32))];
        opt.step(&mut ps, &grads);
        assert_eq!(before, ps.checksum());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("a", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let c1 = ps.checksum();
        ps.tensor_mut(0)[[0]] = 1.5;
        assert_ne!(c1, ps.checksum());
    }
}
