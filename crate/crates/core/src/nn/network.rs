use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::layer::{Cache, Layer, LayerKind};
use super::{Real, Tensor};
use crate::error::Result;

/// A feed-forward stack of layers with a trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
    trainable: bool,
}

/// Forward activations kept for one backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
    pub output: Tensor<T>,
}

/// Gradient buffers laid out like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (pa, pb) in a.iter_mut().zip(b) {
                for (x, &y) in pa.iter_mut().zip(pb) {
                    *x = *x + y;
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flatten().flatten()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|v| *v == T::zero())
    }
}

/// Flat address of one scalar parameter inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIndex {
    pub layer: usize,
    pub param: usize,
    pub offset: usize,
}

impl<T: Real> Network<T> {
    pub fn new(name: impl Into<String>, kinds: Vec<LayerKind>) -> Self {
        Self { name: name.into(), layers: kinds.into_iter().map(Layer::new).collect(), trainable: true }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Kaiming-normal weights scaled by fan-in (gain 2 for layers followed by a
    /// rectifier, 1 for the last affine layer), zero biases, unit norm gains.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let last_weighted = self.layers.iter().rposition(|l| l.fan_in().is_some());
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let Some(fan_in) = layer.fan_in() else { continue };
            let gain = if Some(li) == last_weighted { 1.0 } else { 2.0 };
            let std = (gain / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in layer.params[0].data.iter_mut() {
                *v = T::lit(normal.sample(rng));
            }
            layer.params[1].data.fill(T::zero());
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?.0;
        }
        Ok(cur)
    }

    pub fn trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = out;
        }
        Ok(Trace { caches, output: cur })
    }

    /// Backpropagate through the recorded trace and return the input gradient.
    ///
    /// Parameter gradients are accumulated into `grads` only when the network
    /// is trainable; a frozen network passes gradients through untouched.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>, mut grads: Option<&mut Grads<T>>) -> Tensor<T> {
        self.backward_impl(trace, grad_out, &mut grads, true).expect("input gradient requested")
    }

    /// Like [`Network::backward`] but skips the input gradient of the first layer.
    pub fn backward_params(&self, trace: &Trace<T>, grad_out: &Tensor<T>, grads: &mut Grads<T>) {
        self.backward_impl(trace, grad_out, &mut Some(grads), false);
    }

    fn backward_impl(
        &self,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        grads: &mut Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut g = grad_out.clone();
        for (li, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let pg = match grads.as_deref_mut() {
                Some(gr) if self.trainable => Some(gr.layers[li].as_mut_slice()),
                _ => None,
            };
            let want_input = li > 0 || need_input;
            match layer.backward(cache, &g, pg, want_input) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            layers: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect())
                .collect(),
        }
    }

    /// `(name, shape, values)` of every parameter tensor in a stable order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &[usize], &[T])> {
        self.layers.iter().enumerate().flat_map(move |(li, l)| {
            l.params
                .iter()
                .map(move |p| (format!("{}.{}.{}", self.name, li, p.name), p.shape.as_slice(), p.data.as_slice()))
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(|p| p.data.len()).sum()
    }

    pub fn param_indices(&self) -> Vec<ParamIndex> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            for (param, p) in l.params.iter().enumerate() {
                out.extend((0..p.data.len()).map(|offset| ParamIndex { layer, param, offset }));
            }
        }
        out
    }

    pub fn param(&self, idx: ParamIndex) -> T {
        self.layers[idx.layer].params[idx.param].data[idx.offset]
    }

    pub fn param_mut(&mut self, idx: ParamIndex) -> &mut T {
        &mut self.layers[idx.layer].params[idx.param].data[idx.offset]
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, shape, data) in self.named_params() {
            hasher.update(name.as_bytes());
            for &d in shape {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            data.iter().for_each(|v| v.write_le(&mut buf));
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Copy of this network in another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            name: self.name.clone(),
            trainable: self.trainable,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut nl = Layer::<U>::new(l.kind.clone());
                    for (dst, src) in nl.params.iter_mut().zip(&l.params) {
                        dst.data = src.data.iter().map(|v| U::lit(v.as_f64())).collect();
                    }
                    nl
                })
                .collect(),
        }
    }
}
