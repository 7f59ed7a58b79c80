use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, Network, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers of one network, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Adam over a fixed set of networks. State is created lazily per network
/// name and never exists for frozen networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    /// One update of every `(network, gradient)` pair at learning rate `lr`.
    pub fn update(&mut self, lr: f64, targets: &mut [(&mut Network<T>, &Grads<T>)]) -> Result<()> {
        for (net, _) in targets.iter() {
            if !net.is_trainable() {
                return Err(Error::Frozen(net.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for (net, grads) in targets.iter_mut() {
            let moments = self.state.entry(net.name.clone()).or_insert_with(|| {
                let shapes = net.layers.iter().flat_map(|l| &l.params).map(|p| vec![T::zero(); p.data.len()]);
                Moments { m: shapes.clone().collect(), v: shapes.collect() }
            });
            let mut slot = 0;
            for (layer, lg) in net.layers.iter_mut().zip(&grads.layers) {
                for (param, g) in layer.params.iter_mut().zip(lg) {
                    let (m, v) = (&mut moments.m[slot], &mut moments.v[slot]);
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + one_b1 * g[i];
                        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                        let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                        param.data[i] = param.data[i] - step_size * m[i] / denom;
                    }
                    slot += 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerKind;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first Adam step is lr * sign(g) (up to eps).
        let mut net = Network::<f64>::new("lin", vec![LayerKind::Linear { inputs: 2, outputs: 1 }]);
        net.layers[0].params[0].data = vec![1.0, 2.0];
        let mut grads = net.zero_grads();
        grads.layers[0][0] = vec![0.5, -3.0];
        grads.layers[0][1] = vec![0.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(0.01, &mut [(&mut net, &grads)]).unwrap();
        let w = &net.layers[0].params[0].data;
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((w[1] - 2.01).abs() < 1e-7);
        assert_eq!(net.layers[0].params[1].data[0], 0.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn frozen_network_is_rejected() {
        let mut net = Network::<f32>::new("frozen", vec![LayerKind::Linear { inputs: 2, outputs: 1 }]);
        net.freeze();
        let grads = net.zero_grads();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.update(1e-3, &mut [(&mut net, &grads)]).is_err());
        assert!(opt.state.is_empty());
    }
}
