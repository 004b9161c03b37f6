use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::ParamStore;
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Diagonal Fisher estimate, one tensor per parameter in store order.
#[derive(Clone, Debug)]
pub struct Fisher {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl Fisher {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Fisher {
            names: store.iter().map(|p| p.name.clone()).collect(),
            values: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Re-lays the estimate out over `store`'s shapes: old entries occupy the
    /// leading blocks and every new element gets zero.
    pub fn resized(&self, store: &ParamStore) -> Result<Fisher> {
        let mut out = Fisher::zeros_like(store);
        for (name, f) in self.names.iter().zip(&self.values) {
            if let Some(i) = out.names.iter().position(|n| n == name) {
                f.copy_into_leading_block(&mut out.values[i])?;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Fisher) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument("fisher layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::shape("fisher sum", a.shape(), b.shape()));
            }
            a.add_assign(b);
        }
        Ok(())
    }
}

/// Empirical Fisher on the observed labels: the mean over sampled examples
/// of squared log-likelihood gradients.
///
/// `n_samples` examples are drawn without replacement; when it equals the
/// dataset size every example is used and `rng` is not touched.
pub fn compute_fisher<R: Rng + ?Sized>(
    model: &Model,
    data: &[Encoded],
    n_samples: usize,
    rng: &mut R,
) -> Result<Fisher> {
    if data.is_empty() || n_samples == 0 {
        return Err(Error::Empty("fisher dataset"));
    }
    if n_samples > data.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_samples} fisher samples requested from {} examples",
            data.len()
        )));
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    let mut indices: Vec<usize> = if n_samples == data.len() {
        (0..data.len()).collect()
    } else {
        sample(rng, data.len(), n_samples).into_vec()
    };
    indices.sort_unstable();

    let mut fisher = Fisher::zeros_like(&model.params);
    for &i in &indices {
        let (_, grads) = model.example_gradients(&data[i].ids, data[i].label)?;
        for (f, g) in fisher.values.iter_mut().zip(grads.iter()) {
            if let Some(g) = g {
                for (fk, gk) in f.data_mut().iter_mut().zip(g.data()) {
                    *fk += gk * gk;
                }
            }
        }
    }
    let inv = 1.0 / indices.len() as f64;
    for f in &mut fisher.values {
        f.scale_assign(inv);
    }
    Ok(fisher)
}

/// Quadratic anchor `(λ/2)·Σ F_k (θ_k − θ*_k)²`.
#[derive(Clone, Debug)]
pub struct EwcState {
    pub anchor: Vec<Tensor>,
    pub fisher: Fisher,
    pub lambda: f64,
}

impl EwcState {
    /// Anchors at the current parameter values.
    pub fn new(store: &ParamStore, fisher: Fisher, lambda: f64) -> Result<Self> {
        let names: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
        if fisher
            .names
            .iter()
            .map(String::as_str)
            .ne(names.iter().copied())
        {
            return Err(Error::InvalidArgument(
                "fisher layout does not match the model".into(),
            ));
        }
        if fisher
            .values
            .iter()
            .flat_map(|f| f.data())
            .any(|x| !(*x >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "fisher entries must be nonnegative".into(),
            ));
        }
        Ok(EwcState {
            anchor: store.iter().map(|p| p.value.clone()).collect(),
            fisher,
            lambda,
        })
    }

    /// Moves the anchor and Fisher onto an expanded parameter set. New
    /// elements are anchored at their current values with zero weight.
    pub fn resized(&self, store: &ParamStore) -> Result<Self> {
        let fisher = self.fisher.resized(store)?;
        let mut anchor: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        for (name, a) in self.fisher.names.iter().zip(&self.anchor) {
            if let Some(i) = fisher.names.iter().position(|n| n == name) {
                a.copy_into_leading_block(&mut anchor[i])?;
            }
        }
        Ok(EwcState {
            anchor,
            fisher,
            lambda: self.lambda,
        })
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.anchor.len() != store.len() {
            return Err(Error::InvalidArgument(
                "EWC state does not match the model".into(),
            ));
        }
        for (a, p) in self.anchor.iter().zip(store.iter()) {
            if a.shape() != p.value.shape() {
                return Err(Error::shape("EWC anchor", a.shape(), p.value.shape()));
            }
        }
        Ok(())
    }

    pub fn penalty(&self, store: &ParamStore) -> Result<f64> {
        self.check(store)?;
        let mut total = 0.0;
        for ((a, f), p) in self
            .anchor
            .iter()
            .zip(&self.fisher.values)
            .zip(store.iter())
        {
            for ((ak, fk), tk) in a.data().iter().zip(f.data()).zip(p.value.data()) {
                total += fk * (tk - ak) * (tk - ak);
            }
        }
        Ok(0.5 * self.lambda * total)
    }

    /// Adds `λ·F_k(θ_k − θ*_k)` to each parameter's gradient.
    pub fn add_gradient(&self, store: &mut ParamStore) -> Result<()> {
        self.check(store)?;
        let lambda = self.lambda;
        for ((a, f), p) in self
            .anchor
            .iter()
            .zip(&self.fisher.values)
            .zip(store.iter_mut())
        {
            let theta = p.value.data().to_vec();
            for (((g, ak), fk), tk) in p
                .grad
                .data_mut()
                .iter_mut()
                .zip(a.data())
                .zip(f.data())
                .zip(&theta)
            {
                *g += lambda * fk * (tk - ak);
            }
        }
        Ok(())
    }
}
