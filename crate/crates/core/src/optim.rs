use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// d = grad + weight_decay * p
/// v = momentum * v + d
/// p = p - lr * v
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<S: Scalar> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S, weight_decay: S) -> Result<Self> {
        if lr < S::zero() || momentum < S::zero() || weight_decay < S::zero() {
            return Err(Error::Parameter(format!(
                "SGD needs nonnegative lr/momentum/weight_decay, got {lr}/{momentum}/{weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    /// Updates every parameter of `net` that holds a gradient, then clears
    /// the gradients. `key` namespaces the momentum buffers per network.
    pub fn step(&mut self, key: &str, net: &mut Network<S>) {
        for (name, p) in net.params_mut() {
            let Some(grad) = p.grad().map(<[S]>::to_vec) else {
                continue;
            };
            let v = self
                .velocity
                .entry(format!("{key}/{name}"))
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            for ((w, g), vel) in p.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                let d = *g + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= self.lr * *vel;
            }
            p.zero_grad();
        }
    }
}
