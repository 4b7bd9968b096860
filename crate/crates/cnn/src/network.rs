use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::layers::{Cache, Layer, LayerKind, Mode};
use crate::spec::{BackboneSpec, HEAD_LAYER, NUM_LAYERS};
use crate::tensor::Tensor;
use crate::{bundle, CnnError};

/// A sequential stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Set for networks built from a backbone table.
    pub spec: Option<BackboneSpec>,
}

/// Per-layer caches from a forward pass, in layer order.
pub type Trace = Vec<Cache>;

/// Builds the backbone: loads a bundle when one is given, with the head always
/// freshly initialized if the bundle's head does not match the class count.
pub fn build_backbone(spec: &BackboneSpec) -> Result<Network, CnnError> {
    spec.validate()?;
    let mut net = Network::from_layers(&spec.layer_table(), spec.init_seed);
    net.spec = Some(spec.clone());
    if let Some(path) = &spec.weights {
        bundle::load_into(&mut net, path)?;
    }
    Ok(net)
}

impl Network {
    pub fn from_layers(kinds: &[LayerKind], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: kinds.iter().map(|&k| Layer::init(k, &mut rng)).collect(),
            spec: None,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Index of the trailing classifier layer.
    pub fn head(&self) -> usize {
        if self.spec.is_some() {
            HEAD_LAYER
        } else {
            self.layers.len() - 1
        }
    }

    /// Runs layers `0..=last`, returning the output and the caches needed to
    /// backpropagate. Does not modify the network.
    pub fn forward(&self, x: Tensor, mode: Mode, last: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Trace), CnnError> {
        if last >= self.layers.len() {
            return Err(CnnError::Argument(format!("layer {last} out of range for {} layers", self.layers.len())));
        }
        let mut caches = Vec::with_capacity(last + 1);
        let mut cur = x;
        for layer in &self.layers[..=last] {
            let (y, cache) = layer.forward(cur, mode, rng)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Forward pass through every layer that also folds batch statistics
    /// into running estimates when `mode` uses them.
    pub fn forward_train(&mut self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Trace), CnnError> {
        let (y, trace) = self.forward(x, mode, self.layers.len() - 1, rng)?;
        if mode.batch_stats {
            for (layer, cache) in self.layers.iter_mut().zip(&trace) {
                layer.commit(cache);
            }
        }
        Ok((y, trace))
    }

    /// Evaluation-mode outputs of the last layer.
    pub fn predict(&self, x: Tensor) -> Result<Tensor, CnnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::EVAL, self.layers.len() - 1, &mut rng)?.0)
    }

    /// Backpropagates `dy` from the end of `trace` down to layer `stop_at`
    /// and returns the gradient with respect to that layer's input.
    /// Parameter gradients accumulate for layers `stop_at..` when
    /// `param_grads` is set.
    pub fn backward(&mut self, trace: &Trace, dy: Tensor, stop_at: usize, param_grads: bool, guided: bool) -> Tensor {
        let mut g = dy;
        for i in (stop_at..trace.len()).rev() {
            g = self.layers[i].backward(&trace[i], g, param_grads, guided);
        }
        g
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    /// Content hash of one layer's parameters and buffers.
    pub fn layer_checksum(&self, i: usize) -> String {
        let mut h = Sha256::new();
        for p in &self.layers[i].params {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksums(&self) -> Vec<String> {
        (0..self.layers.len()).map(|i| self.layer_checksum(i)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub(crate) fn is_backbone(&self) -> bool {
        self.spec.is_some() && self.layers.len() == NUM_LAYERS
    }
}
