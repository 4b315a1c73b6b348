use rand::RngCore;

use super::layers::{Cache, Layer, LayerSpec, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Values saved by a traced forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// Gradients aligned with [`Network::params`].
#[derive(Clone, Debug)]
pub struct Grads<T>(pub Vec<Tensor<T>>);

impl<T: Real> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn flat(&self) -> Vec<T> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(specs: Vec<LayerSpec>, rng: &mut dyn RngCore) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::from_spec(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { specs, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Inference forward pass (running statistics, no dropout, frozen spectral state).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, Mode::Eval, None, false)?.0;
        }
        Ok(h)
    }

    /// Inference forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache, _) = layer.forward(&h, Mode::Eval, None, true)?;
            caches.push(cache.expect("traced"));
            h = y;
        }
        Ok((h, Trace { caches }))
    }

    /// Training-mode forward pass. With `update_state`, batch-norm running statistics and
    /// spectral power-iteration vectors advance by one step.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        rng: &mut dyn RngCore,
        update_state: bool,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        let mode = Mode::Train { update_state };
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache, upd) = layer.forward(&h, mode, Some(&mut *rng), true)?;
            caches.push(cache.expect("traced"));
            if let Some(u) = upd {
                updates.push((i, u));
            }
            h = y;
        }
        for (i, u) in updates {
            self.layers[i].apply_update(u);
        }
        Ok((h, Trace { caches }))
    }

    /// Backpropagate `grad_out` through the traced pass. Parameter gradients are only
    /// computed when requested.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Grads<T>>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        let mut g = grad_out.clone();
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let (dx, pg) = layer.backward(cache, &g, param_grads)?;
            per_layer.push(pg);
            g = dx;
        }
        let grads = param_grads.then(|| Grads(per_layer.into_iter().rev().flatten().collect()));
        Ok((g, grads))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters and buffers with stable names (`layers.{i}.{name}`).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named()
                    .into_iter()
                    .map(move |(n, t)| (format!("layers.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn set_named_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let rest = name
            .strip_prefix("layers.")
            .ok_or_else(|| Error::CheckpointCorrupt(format!("bad tensor name {name}")))?;
        let (idx, local) = rest
            .split_once('.')
            .ok_or_else(|| Error::CheckpointCorrupt(format!("bad tensor name {name}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::CheckpointCorrupt(format!("bad layer index in {name}")))?;
        self.layers
            .get_mut(idx)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("layer {idx} out of range")))?
            .set_named(local, value)
    }

    pub fn refresh_spectral(&mut self, iterations: usize) -> Result<()> {
        for l in &mut self.layers {
            l.refresh_spectral(iterations)?;
        }
        Ok(())
    }

    /// Effective (post-normalization) weight matrices of spectrally normalized layers.
    pub fn spectral_weights(&self) -> Result<Vec<(usize, Vec<T>, usize, usize)>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.is_spectral() {
                if let Some((w, r, c)) = l.effective_weight()? {
                    out.push((i, w, r, c));
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Network::<U>::new(self.specs.clone(), &mut rng).expect("specs already valid");
        for (name, t) in self.named_tensors() {
            out.set_named_tensor(&name, t.cast()).expect("same architecture");
        }
        out
    }
}
