use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which elements of each parameter are held fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum ElementMask {
    Trainable,
    Frozen,
    /// The leading block of this shape is frozen; the rest trains.
    Leading(Vec<usize>),
}

impl ElementMask {
    fn is_frozen(&self, shape: &[usize], flat: usize) -> bool {
        match self {
            ElementMask::Trainable => false,
            ElementMask::Frozen => true,
            ElementMask::Leading(block) => match (shape, block.as_slice()) {
                ([_], [n]) => flat < *n,
                ([_, cols], [r, c]) => flat / cols < *r && flat % cols < *c,
                _ => false,
            },
        }
    }
}

/// One [`ElementMask`] per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeMask {
    pub masks: Vec<ElementMask>,
}

impl FreezeMask {
    pub fn all(store: &ParamStore) -> Self {
        FreezeMask {
            masks: vec![ElementMask::Frozen; store.len()],
        }
    }

    /// Freezes every element that already existed in `old`: parameters with
    /// the same name keep their old leading block fixed; new names train.
    pub fn preexisting(old: &ParamStore, new: &ParamStore) -> Self {
        let masks = new
            .iter()
            .map(|p| match old.by_name(&p.name) {
                None => ElementMask::Trainable,
                Some(o) if o.value.shape() == p.value.shape() => ElementMask::Frozen,
                Some(o) => ElementMask::Leading(o.value.shape().to_vec()),
            })
            .collect();
        FreezeMask { masks }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, freeze: Option<&FreezeMask>) -> Result<()> {
        if self.m.len() != store.len() || freeze.is_some_and(|f| f.masks.len() != store.len()) {
            return Err(Error::InvalidArgument(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            if p.grad.shape() != self.m[i].shape() {
                return Err(Error::shape("adam step", p.grad.shape(), self.m[i].shape()));
            }
            let mask = freeze.map(|f| &f.masks[i]);
            if mask == Some(&ElementMask::Frozen) {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (theta, g) = (p.value.data_mut(), p.grad.data());
            for k in 0..theta.len() {
                if mask.is_some_and(|mk| mk.is_frozen(&shape, k)) {
                    continue;
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let (mh, vh) = (m[k] / c1, v[k] / c2);
                theta[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(vec![x])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s, None).unwrap();
        }
        assert_eq!(s.get(crate::autodiff::ParamId(0)).value.data(), &[0.7]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [1e-3, 0.5, -40.0] {
            let mut s = scalar_store(0.0);
            s.iter_mut().next().unwrap().grad = Tensor::vector(vec![g]);
            let mut adam = AdamState::new(
                AdamConfig {
                    lr: 0.01,
                    ..Default::default()
                },
                &s,
            );
            adam.step(&mut s, None).unwrap();
            let moved = s.iter().next().unwrap().value.data()[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{g}: {moved}");
        }
    }

    #[test]
    fn quadratic_descent_matches_scalar_simulation() {
        // independent scalar re-implementation
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..100 {
            let p = s.iter_mut().next().unwrap();
            p.grad = p.value.map(|t| 2.0 * t);
            adam.step(&mut s, None).unwrap();
        }
        let theta = s.iter().next().unwrap().value.data()[0];
        assert!(theta.abs() < 0.1, "{theta}");
        assert!((theta - x).abs() < 1e-12);
    }

    #[test]
    fn leading_mask_freezes_old_block_only() {
        let mut old = ParamStore::new();
        old.add("w", Tensor::zeros(&[2, 2])).unwrap();
        old.add("b", Tensor::zeros(&[2])).unwrap();
        let mut new = ParamStore::new();
        new.add("w", Tensor::zeros(&[3, 3])).unwrap();
        new.add("b", Tensor::zeros(&[2])).unwrap();
        new.add("c", Tensor::zeros(&[1])).unwrap();
        let mask = FreezeMask::preexisting(&old, &new);
        for p in new.iter_mut() {
            p.grad = Tensor::filled(p.value.shape(), 1.0);
        }
        AdamState::new(AdamConfig::default(), &new)
            .step(&mut new, Some(&mask))
            .unwrap();
        let w = new.by_name("w").unwrap().value.data().to_vec();
        let moved: Vec<bool> = w.iter().map(|x| *x != 0.0).collect();
        assert_eq!(
            moved,
            [false, false, true, false, false, true, true, true, true]
        );
        assert!(new
            .by_name("b")
            .unwrap()
            .value
            .data()
            .iter()
            .all(|x| *x == 0.0));
        assert!(new.by_name("c").unwrap().value.data()[0] != 0.0);
    }
}
