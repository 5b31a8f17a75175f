//! Localization network: a VGG-16 conv trunk over the 7-channel stack
//! (incomplete, guidance, mask) followed by three fully connected layers that
//! regress the six affine parameters, plus the point-displacement loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::domain::{warp_image, AffineTransform, HoleSpec, ImageTensor};
use crate::error::{validation, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{ConvStack, Linear, ParamStore, VGG16};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reference width of the two hidden fully connected layers.
pub const FC_WIDTH: usize = 4096;

/// Input channels: incomplete RGB, guidance RGB, hole mask.
pub const INPUT_CHANNELS: usize = 7;

/// The fixed loss points: corners and edge midpoints of the normalized frame.
pub const LOCALIZATION_POINTS: [[f64; 2]; 8] = [
    [-1.0, -1.0],
    [0.0, -1.0],
    [1.0, -1.0],
    [1.0, 0.0],
    [1.0, 1.0],
    [0.0, 1.0],
    [-1.0, 1.0],
    [-1.0, 0.0],
];

const CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

fn check_pairs(pred: &[AffineTransform], gt: &[AffineTransform]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(validation(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    Ok(())
}

fn mean_point_error(
    pred: &[AffineTransform],
    gt: &[AffineTransform],
    points: &[[f64; 2]],
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    check_pairs(pred, gt)?;
    if points.is_empty() {
        return Err(validation("no localization points"));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(gt) {
        for q in points {
            let (ax, ay) = p.apply(q[0], q[1]);
            let (bx, by) = t.apply(q[0], q[1]);
            acc += f((ax - bx) * (ax - bx) + (ay - by) * (ay - by));
        }
    }
    Ok(acc / (pred.len() * points.len()) as f64)
}

/// Mean over the batch and `points` of the squared distance between the
/// points mapped by `pred` and by `gt`.
pub fn localization_loss(pred: &[AffineTransform], gt: &[AffineTransform], points: &[[f64; 2]]) -> Result<f64> {
    mean_point_error(pred, gt, points, |d2| d2)
}

/// Mean Euclidean displacement of the four frame corners.
pub fn mean_corner_error(pred: &[AffineTransform], gt: &[AffineTransform]) -> Result<f64> {
    mean_point_error(pred, gt, &CORNERS, libm::sqrt)
}

/// Warps `guidance` so that its content under `transform` lands on the hole frame.
pub fn align_guidance(guidance: &ImageTensor, transform: &AffineTransform, out_height: usize, out_width: usize) -> ImageTensor {
    warp_image(guidance, transform, out_height, out_width)
}

/// Differentiable [`align_guidance`] on graph nodes: `guidance` is
/// `[N, C, H, W]`, `theta` is `[N, 6]`.
pub fn align_node<S: Scalar>(
    g: &mut Graph<'_, S>,
    guidance: NodeId,
    theta: NodeId,
    out_height: usize,
    out_width: usize,
) -> Result<NodeId> {
    let grid = g.affine_grid(theta, out_height, out_width)?;
    g.grid_sample(guidance, grid)
}

pub(crate) fn check_size(config: &ModelConfig, name: &str, h: usize, w: usize) -> Result<()> {
    let r = config.resolution;
    if h != r || w != r {
        return Err(validation(format!("{name} is {h}x{w}, network expects {r}x{r}")));
    }
    Ok(())
}

pub(crate) fn push_image<S: Scalar>(out: &mut Vec<S>, img: &ImageTensor) {
    out.extend(img.data().iter().map(|&v| S::from_f64_lossy(v)));
}

/// The `[1, 7, R, R]` network input for one example.
pub fn loc_input<S: Scalar>(
    config: &ModelConfig,
    incomplete: &ImageTensor,
    guidance: &ImageTensor,
    hole: &HoleSpec,
) -> Result<Tensor<S>> {
    check_size(config, "incomplete image", incomplete.height(), incomplete.width())?;
    check_size(config, "guidance image", guidance.height(), guidance.width())?;
    check_size(config, "hole mask", hole.height(), hole.width())?;
    let r = config.resolution;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * r * r);
    push_image(&mut data, incomplete);
    push_image(&mut data, guidance);
    data.extend(hole.mask_values::<S>());
    Tensor::from_vec(&[1, INPUT_CHANNELS, r, r], data)
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LocForward {
    /// `[N, 512*scale, R/32, R/32]` trunk output.
    pub features: NodeId,
    /// `[N, 6]` affine parameters.
    pub theta: NodeId,
}

#[derive(Clone, Debug)]
pub struct LocNet<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    trunk: ConvStack,
    fc: [Linear; 3],
}

impl<S: Scalar> LocNet<S> {
    /// He-initialized trunk and hidden layers; the output layer has zero
    /// weights and the identity transform as bias.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let trunk = ConvStack::new(&mut store, "loc", INPUT_CHANNELS, &VGG16, &config, rng);
        let side = config.resolution / trunk.downsample;
        let hidden = config.width(FC_WIDTH);
        let fc1 = Linear::new(&mut store, "loc.fc1", trunk.out_channels * side * side, hidden, rng);
        let fc2 = Linear::new(&mut store, "loc.fc2", hidden, hidden, rng);
        let fc3 = Linear::new(&mut store, "loc.fc3", hidden, 6, rng);
        store.get_mut(fc3.weight).value = Tensor::zeros(&[6, hidden]);
        let identity = AffineTransform::IDENTITY.theta.map(S::from_f64_lossy);
        store.get_mut(fc3.bias).value = Tensor::from_vec(&[6], identity.to_vec())?;
        Ok(Self { config, store, trunk, fc: [fc1, fc2, fc3] })
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

    pub fn num_convs(&self) -> usize {
        self.trunk.num_convs()
    }

    /// `(channels, height, width)` of the trunk output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let side = self.config.resolution / self.trunk.downsample;
        (self.trunk.out_channels, side, side)
    }

    /// `input` is `[N, 7, R, R]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, input: NodeId) -> Result<LocForward> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != INPUT_CHANNELS {
            return Err(validation(format!("localization input has {c} channels, expected {INPUT_CHANNELS}")));
        }
        check_size(&self.config, "localization input", h, w)?;
        let features = self.trunk.forward(g, &self.store, input)?.last;
        let mut x = g.flatten(features)?;
        for (i, fc) in self.fc.iter().enumerate() {
            x = fc.forward(g, &self.store, x)?;
            if i < 2 {
                x = g.relu(x);
            }
        }
        Ok(LocForward { features, theta: x })
    }

    /// One transform per batch item of `input` (`[N, 7, R, R]`).
    pub fn predict_batch(&self, input: Tensor<S>) -> Result<Vec<AffineTransform>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let out = self.forward(&mut g, x)?;
        let theta = g.value(out.theta);
        Ok(theta
            .data()
            .chunks(6)
            .map(|c| AffineTransform::new(core::array::from_fn(|k| c[k].to_f64_lossy())))
            .collect())
    }

    pub fn predict_transform(
        &self,
        incomplete: &ImageTensor,
        guidance: &ImageTensor,
        hole: &HoleSpec,
    ) -> Result<AffineTransform> {
        let input = loc_input(&self.config, incomplete, guidance, hole)?;
        let t = self.predict_batch(input)?.remove(0);
        if !t.is_finite() {
            return Err(crate::Error::NonFinite(format!("predicted transform {:?}", t.theta)));
        }
        Ok(t)
    }
}
