//! Multi-layer perceptual loss over a fixed feature network, with per-layer
//! weights renormalized from windowed loss statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{shape, validation, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{vgg16_until, ConvStack, ParamStore, VGG16};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tapped VGG-16 layers, shallow to deep.
pub const PERCEPT_LAYERS: [&str; 5] = ["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3"];

/// Parameter-name prefix of the perception network.
pub const PERCEPT_PREFIX: &str = "percept";

/// A fixed map from images to a list of feature tensors.
pub trait FeatureExtractor<S: Scalar> {
    fn num_layers(&self) -> usize;

    /// Feature nodes of `x` (`[N, 3, H, W]`), one per layer.
    fn features<'a>(&'a self, g: &mut Graph<'a, S>, x: NodeId) -> Result<Vec<NodeId>>;
}

/// The single-layer identity map.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl<S: Scalar> FeatureExtractor<S> for IdentityFeatures {
    fn num_layers(&self) -> usize {
        1
    }

    fn features<'a>(&'a self, _g: &mut Graph<'a, S>, x: NodeId) -> Result<Vec<NodeId>> {
        Ok(vec![x])
    }
}

/// VGG-16 through `conv5_3`, frozen. Taps are pre-activation conv outputs.
#[derive(Clone, Debug)]
pub struct PerceptNet<S: Scalar> {
    store: ParamStore<S>,
    trunk: ConvStack,
}

impl<S: Scalar> PerceptNet<S> {
    /// Random He-initialized weights; replace them with [`ParamStore::load`]
    /// through [`Self::store_mut`] to use pretrained ones.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let trunk = ConvStack::new(&mut store, PERCEPT_PREFIX, 3, &VGG16[..vgg16_until("conv5_3")], config, rng);
        store.set_trainable(PERCEPT_PREFIX, false);
        Ok(Self { store, trunk })
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    /// Loaded parameters stay frozen.
    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }
}

impl<S: Scalar> FeatureExtractor<S> for PerceptNet<S> {
    fn num_layers(&self) -> usize {
        PERCEPT_LAYERS.len()
    }

    fn features<'a>(&'a self, g: &mut Graph<'a, S>, x: NodeId) -> Result<Vec<NodeId>> {
        let out = self.trunk.forward(g, &self.store, x)?;
        PERCEPT_LAYERS
            .iter()
            .map(|name| out.layer(name).map(|l| l.pre).ok_or_else(|| shape(format!("missing layer {name}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptConfig {
    pub lambdas: Vec<f64>,
    /// Iterations per renormalization window.
    pub window: usize,
    pub epsilon: f64,
}

impl PerceptConfig {
    /// Unit weights for `layers` layers, window 100.
    pub fn new(layers: usize) -> Self {
        Self { lambdas: vec![1.0; layers], window: 100, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(validation(format!("lambdas {:?} must be positive and finite", self.lambdas)));
        }
        if self.window == 0 {
            return Err(validation("percept window must be >= 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(validation("percept epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for PerceptConfig {
    fn default() -> Self {
        Self::new(PERCEPT_LAYERS.len())
    }
}

/// Graph nodes of a perceptual loss evaluation.
#[derive(Clone, Debug)]
pub struct PerceptTerms {
    pub total: NodeId,
    /// Unweighted per-layer mean squared feature differences.
    pub per_layer: Vec<NodeId>,
}

/// `sum_j lambda_j * mean((phi_j(a) - phi_j(b))^2)` on graph nodes.
/// Batches are averaged, matching a per-image loss averaged over the batch.
pub fn perceptual_loss_node<'a, S: Scalar, F: FeatureExtractor<S>>(
    g: &mut Graph<'a, S>,
    extractor: &'a F,
    a: NodeId,
    b: NodeId,
    lambdas: &[f64],
) -> Result<PerceptTerms> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(shape(format!("perceptual loss: {:?} vs {:?}", g.value(a).shape(), g.value(b).shape())));
    }
    if lambdas.len() != extractor.num_layers() {
        return Err(validation(format!("{} lambdas for {} layers", lambdas.len(), extractor.num_layers())));
    }
    let fa = extractor.features(g, a)?;
    let fb = extractor.features(g, b)?;
    let mut per_layer = Vec::with_capacity(fa.len());
    for (&x, &y) in fa.iter().zip(&fb) {
        per_layer.push(g.mean_sq_diff(x, y)?);
    }
    let terms: Vec<(NodeId, f64)> = per_layer.iter().copied().zip(lambdas.iter().copied()).collect();
    let total = g.weighted_sum(&terms)?;
    Ok(PerceptTerms { total, per_layer })
}

/// Value of the perceptual loss between two `[N, 3, H, W]` batches.
pub fn perceptual_loss<S: Scalar, F: FeatureExtractor<S>>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    extractor: &F,
    config: &PerceptConfig,
) -> Result<f64> {
    config.validate()?;
    let mut g = Graph::new();
    let (na, nb) = (g.input(a.clone()), g.input(b.clone()));
    let terms = perceptual_loss_node(&mut g, extractor, na, nb, &config.lambdas)?;
    Ok(g.scalar_value(terms.total).to_f64_lossy())
}

/// `lambda_j = 1 / (mean_j + epsilon)`.
pub fn update_lambdas(layer_means: &[f64], epsilon: f64) -> Vec<f64> {
    layer_means.iter().map(|m| 1.0 / (m + epsilon)).collect()
}

/// Accumulates unweighted per-layer losses and renormalizes the weights
/// every `window` iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaNormalizer {
    pub lambdas: Vec<f64>,
    pub window: usize,
    pub epsilon: f64,
    sums: Vec<f64>,
    count: usize,
}

/// A completed window.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaUpdate {
    pub layer_means: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl LambdaNormalizer {
    pub fn new(config: &PerceptConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lambdas: config.lambdas.clone(),
            window: config.window,
            epsilon: config.epsilon,
            sums: vec![0.0; config.lambdas.len()],
            count: 0,
        })
    }

    /// Iterations recorded in the current window.
    pub fn pending(&self) -> usize {
        self.count
    }

    pub fn record(&mut self, per_layer: &[f64]) -> Result<Option<LambdaUpdate>> {
        if per_layer.len() != self.sums.len() {
            return Err(validation(format!("{} layer losses for {} layers", per_layer.len(), self.sums.len())));
        }
        for (s, v) in self.sums.iter_mut().zip(per_layer) {
            *s += v;
        }
        self.count += 1;
        if self.count < self.window {
            return Ok(None);
        }
        let layer_means: Vec<f64> = self.sums.iter().map(|s| s / self.count as f64).collect();
        self.lambdas = update_lambdas(&layer_means, self.epsilon);
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
        Ok(Some(LambdaUpdate { layer_means, lambdas: self.lambdas.clone() }))
    }
}
