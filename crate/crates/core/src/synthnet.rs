//! Synthesis network: context, guidance and attention encoders at 1/4
//! resolution, attention-gated fusion, and a VGG conv4/conv5/fc6/fc7 decoder
//! trunk followed by five upsampling stages with skip concatenation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::domain::{HoleSpec, ImageTensor};
use crate::error::{validation, Result};
use crate::graph::{Graph, NodeId};
use crate::locnet::{check_size, push_image};
use crate::nn::{vgg16_until, Conv2d, ConvStack, ParamStore, StackOut, VggLayer, VGG16};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::Planar;

/// Six convolutions down to 1/4 resolution, shared by the context and
/// attention encoders.
pub const BRANCH_LAYOUT: [VggLayer; 8] = [
    VggLayer::Conv("conv1_1", 64),
    VggLayer::Conv("conv1_2", 64),
    VggLayer::Pool("pool1"),
    VggLayer::Conv("conv2_1", 128),
    VggLayer::Conv("conv2_2", 128),
    VggLayer::Pool("pool2"),
    VggLayer::Conv("conv3_1", 256),
    VggLayer::Conv("conv3_2", 256),
];

/// Reference bottleneck width (fc6, fc7).
pub const BOTTLENECK: usize = 4096;

/// Reference output widths of the five upsampling stages, deepest first.
pub const UP_WIDTHS: [usize; 5] = [512, 256, 128, 64, 32];

/// Parameter-name prefix of the guidance encoder.
pub const GUIDANCE_PREFIX: &str = "synth.guide";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthOptions {
    /// Keep the guidance encoder fixed during training.
    pub freeze_guidance: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { freeze_guidance: true }
    }
}

/// Ablations used to probe which paths are live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Probe {
    /// Replace every guidance-encoder output (features and skips) by zeros.
    pub zero_guidance_branch: bool,
    /// Replace the guidance channels of the attention input by zeros.
    pub zero_attention_guidance: bool,
    /// Replace the guidance skip features by zeros.
    pub zero_skips: bool,
}

/// Guidance-encoder activations reused by the decoder.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceFeatures {
    pub conv1_2: NodeId,
    pub conv2_2: NodeId,
    pub conv3_3: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// fc7 activations, `[N, 4096*scale, R/32, R/32]`.
    pub bottleneck: NodeId,
    /// tanh output, `[N, 3, R, R]`.
    pub output: NodeId,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SynthForward {
    pub context: NodeId,
    pub guidance: GuidanceFeatures,
    pub attention: NodeId,
    pub fused: NodeId,
    pub bottleneck: NodeId,
    /// Whole-image network prediction.
    pub raw: NodeId,
    /// Prediction inside the hole, incomplete image outside.
    pub composite: NodeId,
}

/// `context + attention * guidance`, attention broadcast over channels.
pub fn fuse<S: Scalar>(g: &mut Graph<'_, S>, context: NodeId, guidance: NodeId, attention: NodeId) -> Result<NodeId> {
    let gated = g.channel_gate(guidance, attention)?;
    g.add(context, gated)
}

fn zeros_like<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    g.input(Tensor::zeros(&shape))
}

#[derive(Clone, Debug)]
pub struct SynthNet<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    context: ConvStack,
    guidance: ConvStack,
    attention: ConvStack,
    attention_head: Conv2d,
    trunk: ConvStack,
    fc6: Conv2d,
    fc7: Conv2d,
    up: Vec<Conv2d>,
    out: Conv2d,
}

impl<S: Scalar> SynthNet<S> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, options: SynthOptions, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = |b| config.width(b);
        let mut store = ParamStore::new();
        let context = ConvStack::new(&mut store, "synth.context", 4, &BRANCH_LAYOUT, &config, rng);
        let guidance = ConvStack::new(&mut store, GUIDANCE_PREFIX, 3, &VGG16[..vgg16_until("conv3_3")], &config, rng);
        let attention = ConvStack::new(&mut store, "synth.attention", 7, &BRANCH_LAYOUT, &config, rng);
        let attention_head = Conv2d::same3(&mut store, "synth.attention.head", w(256), 1, rng);
        let trunk = ConvStack::new(&mut store, "synth.dec", w(256), &VGG16[vgg16_until("conv3_3")..], &config, rng);
        let fc6 = Conv2d::new(&mut store, "synth.dec.fc6", w(512), w(BOTTLENECK), 1, 1, 0, rng);
        let fc7 = Conv2d::new(&mut store, "synth.dec.fc7", w(BOTTLENECK), w(BOTTLENECK), 1, 1, 0, rng);
        let skips = [w(512), w(512), w(256), w(128), w(64)];
        let mut up = Vec::with_capacity(UP_WIDTHS.len());
        let mut c = w(BOTTLENECK);
        for (i, (&base, &skip)) in UP_WIDTHS.iter().zip(&skips).enumerate() {
            let name = format!("synth.dec.up{}", UP_WIDTHS.len() - i);
            up.push(Conv2d::same3(&mut store, &name, c + skip, w(base), rng));
            c = w(base);
        }
        let out = Conv2d::same3(&mut store, "synth.dec.out", c, 3, rng);
        if options.freeze_guidance {
            store.set_trainable(GUIDANCE_PREFIX, false);
        }
        Ok(Self { config, store, context, guidance, attention, attention_head, trunk, fc6, fc7, up, out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// `(channels, side)` of the three encoder outputs.
    pub fn branch_dims(&self) -> (usize, usize) {
        (self.context.out_channels, self.config.resolution / self.context.downsample)
    }

    /// `(channels, side)` of the fc7 bottleneck.
    pub fn bottleneck_dims(&self) -> (usize, usize) {
        (self.fc7.out_channels, self.config.resolution / 32)
    }

    fn check_input(&self, g: &Graph<'_, S>, x: NodeId, channels: usize, name: &str) -> Result<usize> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != channels {
            return Err(validation(format!("{name} has {c} channels, expected {channels}")));
        }
        check_size(&self.config, name, h, w)?;
        Ok(n)
    }

    /// Context features from the incomplete image and its mask.
    pub fn encode_context<'a>(&'a self, g: &mut Graph<'a, S>, incomplete: NodeId, mask: NodeId) -> Result<NodeId> {
        self.check_input(g, incomplete, 3, "incomplete image")?;
        self.check_input(g, mask, 1, "mask")?;
        let x = g.concat(&[incomplete, mask])?;
        Ok(self.context.forward(g, &self.store, x)?.last)
    }

    /// Guidance features and skip activations from the aligned guidance.
    pub fn encode_guidance<'a>(&'a self, g: &mut Graph<'a, S>, aligned: NodeId) -> Result<GuidanceFeatures> {
        self.check_input(g, aligned, 3, "aligned guidance")?;
        let out: StackOut = self.guidance.forward(g, &self.store, aligned)?;
        let post = |name: &str| out.layer(name).map(|l| l.post).ok_or_else(|| validation(format!("missing {name}")));
        Ok(GuidanceFeatures { conv1_2: post("conv1_2")?, conv2_2: post("conv2_2")?, conv3_3: out.last })
    }

    /// Attention map in `(0, 1)`, `[N, 1, R/4, R/4]`.
    pub fn attention<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        incomplete: NodeId,
        aligned: NodeId,
        mask: NodeId,
    ) -> Result<NodeId> {
        let x = g.concat(&[incomplete, aligned, mask])?;
        let f = self.attention.forward(g, &self.store, x)?.last;
        let logit = self.attention_head.forward(g, &self.store, f)?;
        Ok(g.sigmoid(logit))
    }

    /// Decoder from the fused features and the guidance skips.
    pub fn decode<'a>(&'a self, g: &mut Graph<'a, S>, fused: NodeId, guidance: &GuidanceFeatures) -> Result<Decoded> {
        let trunk = self.trunk.forward(g, &self.store, fused)?;
        let conv = |name: &str| trunk.layer(name).map(|l| l.post).ok_or_else(|| validation(format!("missing {name}")));
        let skips = [conv("conv5_3")?, conv("conv4_3")?, fused, guidance.conv2_2, guidance.conv1_2];
        let x = self.fc6.forward(g, &self.store, trunk.last)?;
        let x = g.relu(x);
        let x = self.fc7.forward(g, &self.store, x)?;
        let bottleneck = g.relu(x);
        let mut x = bottleneck;
        for (conv, skip) in self.up.iter().zip(skips) {
            let u = g.upsample2x(x)?;
            let joined = g.concat(&[u, skip])?;
            let y = conv.forward(g, &self.store, joined)?;
            x = g.relu(y);
        }
        let y = self.out.forward(g, &self.store, x)?;
        Ok(Decoded { bottleneck, output: g.tanh(y) })
    }

    /// Full forward pass. `incomplete` and `aligned` are `[N, 3, R, R]`,
    /// `mask` is `[N, 1, R, R]` with 1 inside the hole.
    pub fn synthesize<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        incomplete: NodeId,
        aligned: NodeId,
        mask: NodeId,
    ) -> Result<SynthForward> {
        self.forward_probed(g, incomplete, aligned, mask, Probe::default())
    }

    pub fn forward_probed<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        incomplete: NodeId,
        aligned: NodeId,
        mask: NodeId,
        probe: Probe,
    ) -> Result<SynthForward> {
        let n = self.check_input(g, incomplete, 3, "incomplete image")?;
        if self.check_input(g, aligned, 3, "aligned guidance")? != n || self.check_input(g, mask, 1, "mask")? != n {
            return Err(validation("synthesis inputs disagree on batch size"));
        }
        let context = self.encode_context(g, incomplete, mask)?;
        let mut guidance = self.encode_guidance(g, aligned)?;
        if probe.zero_guidance_branch {
            guidance = GuidanceFeatures {
                conv1_2: zeros_like(g, guidance.conv1_2),
                conv2_2: zeros_like(g, guidance.conv2_2),
                conv3_3: zeros_like(g, guidance.conv3_3),
            };
        }
        if probe.zero_skips {
            guidance.conv1_2 = zeros_like(g, guidance.conv1_2);
            guidance.conv2_2 = zeros_like(g, guidance.conv2_2);
        }
        let attention_guidance = if probe.zero_attention_guidance { zeros_like(g, aligned) } else { aligned };
        let attention = self.attention(g, incomplete, attention_guidance, mask)?;
        let fused = fuse(g, context, guidance.conv3_3, attention)?;
        let decoded = self.decode(g, fused, &guidance)?;
        let mask_t = g.value(mask).clone();
        let composite = g.blend(decoded.output, incomplete, mask_t)?;
        Ok(SynthForward {
            context,
            guidance,
            attention,
            fused,
            bottleneck: decoded.bottleneck,
            raw: decoded.output,
            composite,
        })
    }

    /// Composited hole filling for one example.
    pub fn fill(&self, incomplete: &ImageTensor, aligned: &ImageTensor, hole: &HoleSpec) -> Result<ImageTensor> {
        let input = SynthInput::new(&self.config, incomplete, aligned, hole)?;
        let mut g = Graph::new();
        let (i, a, m) = input.nodes(&mut g);
        let out = self.synthesize(&mut g, i, a, m)?;
        let r = self.config.resolution;
        let data = g.value(out.composite).data().iter().map(|v| v.to_f64_lossy()).collect();
        ImageTensor::from_planar(Planar::new(3, r, r, data)?)
    }
}

/// Batched synthesis inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInput<S> {
    pub incomplete: Tensor<S>,
    pub aligned: Tensor<S>,
    pub mask: Tensor<S>,
}

impl<S: Scalar> SynthInput<S> {
    pub fn new(config: &ModelConfig, incomplete: &ImageTensor, aligned: &ImageTensor, hole: &HoleSpec) -> Result<Self> {
        check_size(config, "incomplete image", incomplete.height(), incomplete.width())?;
        check_size(config, "aligned guidance", aligned.height(), aligned.width())?;
        check_size(config, "hole mask", hole.height(), hole.width())?;
        let r = config.resolution;
        let mut i = Vec::with_capacity(3 * r * r);
        push_image(&mut i, incomplete);
        let mut a = Vec::with_capacity(3 * r * r);
        push_image(&mut a, aligned);
        Ok(Self {
            incomplete: Tensor::from_vec(&[1, 3, r, r], i)?,
            aligned: Tensor::from_vec(&[1, 3, r, r], a)?,
            mask: Tensor::from_vec(&[1, 1, r, r], hole.mask_values())?,
        })
    }

    pub fn stack(items: &[&SynthInput<S>]) -> Result<Self> {
        let pick = |f: fn(&SynthInput<S>) -> &Tensor<S>| -> Result<Tensor<S>> {
            Tensor::stack_batch(&items.iter().map(|x| f(x).clone()).collect::<Vec<_>>())
        };
        Ok(Self { incomplete: pick(|x| &x.incomplete)?, aligned: pick(|x| &x.aligned)?, mask: pick(|x| &x.mask)? })
    }

    /// Constant graph inputs `(incomplete, aligned, mask)`.
    pub fn nodes(&self, g: &mut Graph<'_, S>) -> (NodeId, NodeId, NodeId) {
        (g.input(self.incomplete.clone()), g.input(self.aligned.clone()), g.input(self.mask.clone()))
    }
}
