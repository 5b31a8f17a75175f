//! Parameter storage and the layers the networks are assembled from.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{ConvGeometry, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// An ordered, named collection of parameter tensors owned by one network.
#[derive(Debug)]
pub struct ParamStore<S> {
    id: u64,
    params: Vec<Param<S>>,
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), params: self.params.clone() }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> usize {
        self.params.push(Param { name: name.into(), value, trainable });
        self.params.len() - 1
    }

    pub fn get(&self, index: usize) -> &Param<S> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<S> {
        &mut self.params[index]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (not) trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn load(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let idx = self.find(name).ok_or_else(|| Error::Incompatible(alloc::format!("no parameter named {name}")))?;
        let p = &mut self.params[idx];
        if p.value.shape() != value.shape() {
            return Err(Error::Incompatible(alloc::format!(
                "{name}: expected shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// FNV-1a over names and exact bit patterns; equal fingerprints mean
    /// bit-identical parameters (up to hash collision).
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.to_f64_lossy().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

/// He-normal initialized convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w = Tensor::randn(&[out_channels, in_channels, kernel, kernel], libm::sqrt(2.0 / fan_in), rng);
        let weight = store.add(alloc::format!("{name}.weight"), w, true);
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Self { weight, bias, geom: ConvGeometry { stride, pad }, in_channels, out_channels, kernel }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[out_features, in_features], libm::sqrt(2.0 / in_features as f64), rng);
        let weight = store.add(alloc::format!("{name}.weight"), w, true);
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_features]), true);
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// One entry of a VGG-style layer layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VggLayer {
    /// 3x3 same-padded convolution + ReLU with the given reference width.
    Conv(&'static str, usize),
    /// 2x2 max pooling, stride 2.
    Pool(&'static str),
}

/// VGG-16 convolutional trunk, `conv1_1` through `pool5`.
pub const VGG16: [VggLayer; 18] = [
    VggLayer::Conv("conv1_1", 64),
    VggLayer::Conv("conv1_2", 64),
    VggLayer::Pool("pool1"),
    VggLayer::Conv("conv2_1", 128),
    VggLayer::Conv("conv2_2", 128),
    VggLayer::Pool("pool2"),
    VggLayer::Conv("conv3_1", 256),
    VggLayer::Conv("conv3_2", 256),
    VggLayer::Conv("conv3_3", 256),
    VggLayer::Pool("pool3"),
    VggLayer::Conv("conv4_1", 512),
    VggLayer::Conv("conv4_2", 512),
    VggLayer::Conv("conv4_3", 512),
    VggLayer::Pool("pool4"),
    VggLayer::Conv("conv5_1", 512),
    VggLayer::Conv("conv5_2", 512),
    VggLayer::Conv("conv5_3", 512),
    VggLayer::Pool("pool5"),
];

/// Index just past `name` in [`VGG16`].
pub fn vgg16_until(name: &str) -> usize {
    VGG16
        .iter()
        .position(|l| matches!(l, VggLayer::Conv(n, _) | VggLayer::Pool(n) if *n == name))
        .map(|i| i + 1)
        .expect("unknown VGG-16 layer name")
}

#[derive(Clone, Debug)]
enum StackItem {
    Conv(&'static str, Conv2d),
    Pool,
}

/// Activations of one conv layer: the convolution output and its ReLU.
#[derive(Clone, Copy, Debug)]
pub struct LayerOut {
    pub name: &'static str,
    pub pre: NodeId,
    pub post: NodeId,
}

#[derive(Clone, Debug)]
pub struct StackOut {
    pub layers: Vec<LayerOut>,
    pub last: NodeId,
}

impl StackOut {
    pub fn layer(&self, name: &str) -> Option<LayerOut> {
        self.layers.iter().copied().find(|l| l.name == name)
    }
}

/// A sequence of VGG-style convs and pools with config-scaled widths.
#[derive(Clone, Debug)]
pub struct ConvStack {
    items: Vec<StackItem>,
    pub out_channels: usize,
    pub downsample: usize,
}

impl ConvStack {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        layout: &[VggLayer],
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let mut items = Vec::with_capacity(layout.len());
        let mut c = in_channels;
        let mut downsample = 1;
        for layer in layout {
            match *layer {
                VggLayer::Conv(name, base) => {
                    let out = config.width(base);
                    let conv = Conv2d::same3(store, &alloc::format!("{prefix}.{name}"), c, out, rng);
                    items.push(StackItem::Conv(name, conv));
                    c = out;
                }
                VggLayer::Pool(_) => {
                    items.push(StackItem::Pool);
                    downsample *= 2;
                }
            }
        }
        Self { items, out_channels: c, downsample }
    }

    pub fn num_convs(&self) -> usize {
        self.items.iter().filter(|i| matches!(i, StackItem::Conv(..))).count()
    }

    pub fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: NodeId) -> Result<StackOut> {
        let mut cur = x;
        let mut layers = Vec::new();
        for item in &self.items {
            match item {
                StackItem::Conv(name, conv) => {
                    let pre = conv.forward(g, store, cur)?;
                    let post = g.relu(pre);
                    layers.push(LayerOut { name, pre, post });
                    cur = post;
                }
                StackItem::Pool => cur = g.max_pool2(cur)?,
            }
        }
        Ok(StackOut { layers, last: cur })
    }
}
