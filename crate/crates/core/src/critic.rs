//! Discriminator with a global critic over the whole image and a local
//! critic over a window around the hole, joined by one sigmoid head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::domain::BoxRegion;
use crate::error::{validation, Error, Result};
use crate::graph::{ConvGeometry, Graph, NodeId};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Reference widths of the five stride-2 convolutions of each critic.
pub const CRITIC_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Reference width of each critic's feature vector.
pub const CRITIC_FEATURES: usize = 1024;

/// Default adversarial weight.
pub const LAMBDA_ADV: f64 = 2.0;

/// The hole box grown to twice its size about its center, clipped to the
/// `width x height` frame.
pub fn local_patch_box(hole: &BoxRegion, width: usize, height: usize) -> Result<BoxRegion> {
    if hole.area() == 0 {
        return Err(Error::DegenerateHole(format!("{hole:?} has zero area")));
    }
    let grow = |lo: usize, hi: usize, n: usize| {
        let half = (hi - lo) as f64;
        let c = (lo + hi) as f64 * 0.5;
        let a = libm::floor(c - half).max(0.0) as usize;
        let b = (libm::ceil(c + half) as usize).min(n);
        (a, b)
    };
    let (x0, x1) = grow(hole.x0, hole.x1, width);
    let (y0, y1) = grow(hole.y0, hole.y1, height);
    Ok(BoxRegion::new(x0, y0, x1, y1))
}

/// Sampling theta that maps an output frame onto `b` inside a
/// `width x height` source frame.
fn crop_theta(b: &BoxRegion, width: usize, height: usize) -> [f64; 6] {
    let (w, h) = (width as f64, height as f64);
    let (ax, bx) = (2.0 * b.x0 as f64 / w - 1.0, 2.0 * b.x1 as f64 / w - 1.0);
    let (ay, by) = (2.0 * b.y0 as f64 / h - 1.0, 2.0 * b.y1 as f64 / h - 1.0);
    [(bx - ax) * 0.5, 0.0, (ax + bx) * 0.5, 0.0, (by - ay) * 0.5, (ay + by) * 0.5]
}

#[derive(Clone, Debug)]
struct Branch {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Branch {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input_side: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let mut c = 3;
        let mut side = input_side;
        let mut convs = Vec::new();
        for (i, &base) in CRITIC_WIDTHS.iter().enumerate() {
            let out = config.width(base);
            convs.push(Conv2d::new(store, &format!("{prefix}.conv{}", i + 1), c, out, 5, 2, 2, rng));
            c = out;
            side = (side - 1) / 2 + 1;
        }
        let fc = Linear::new(store, &format!("{prefix}.fc"), c * side * side, config.width(CRITIC_FEATURES), rng);
        Self { convs, fc }
    }

    fn forward<'a, S: Scalar>(&self, g: &mut Graph<'a, S>, store: &'a ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for conv in &self.convs {
            debug_assert_eq!(conv.geom, ConvGeometry { stride: 2, pad: 2 });
            let y = conv.forward(g, store, cur)?;
            cur = g.relu(y);
        }
        let flat = g.flatten(cur)?;
        let f = self.fc.forward(g, store, flat)?;
        Ok(g.relu(f))
    }
}

#[derive(Clone, Debug)]
pub struct Critic<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    global: Branch,
    local: Branch,
    head: Linear,
}

impl<S: Scalar> Critic<S> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let global = Branch::new(&mut store, "critic.global", config.resolution, &config, rng);
        let local = Branch::new(&mut store, "critic.local", config.resolution / 2, &config, rng);
        let head = Linear::new(&mut store, "critic.head", 2 * config.width(CRITIC_FEATURES), 1, rng);
        Ok(Self { config, store, global, local, head })
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

    /// Probabilities `[N, 1]` that each image of `images` (`[N, 3, R, R]`) is
    /// real; `holes[i]` locates the local critic's window for item `i`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, images: NodeId, holes: &[BoxRegion]) -> Result<NodeId> {
        let (n, c, h, w) = g.value(images).dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(validation(format!("critic expects [N, 3, {r}, {r}], got {:?}", g.value(images).shape())));
        }
        if holes.len() != n {
            return Err(validation(format!("{} holes for a batch of {n}", holes.len())));
        }
        let mut thetas = Vec::with_capacity(6 * n);
        for hole in holes {
            let b = local_patch_box(hole, w, h)?;
            thetas.extend(crop_theta(&b, w, h).iter().map(|&v| S::from_f64_lossy(v)));
        }
        let theta = g.input(Tensor::from_vec(&[n, 6], thetas)?);
        let grid = g.affine_grid(theta, r / 2, r / 2)?;
        let patches = g.grid_sample(images, grid)?;

        let fg = self.global.forward(g, &self.store, images)?;
        let fl = self.local.forward(g, &self.store, patches)?;
        let k = self.config.width(CRITIC_FEATURES);
        let fg = g.reshape(fg, &[n, k, 1, 1])?;
        let fl = g.reshape(fl, &[n, k, 1, 1])?;
        let joint = g.concat(&[fg, fl])?;
        let joint = g.flatten(joint)?;
        let logit = self.head.forward(g, &self.store, joint)?;
        Ok(g.sigmoid(logit))
    }

    /// Per-image probabilities.
    pub fn discriminate(&self, images: &Tensor<S>, holes: &[BoxRegion]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let p = self.forward(&mut g, x, holes)?;
        Ok(g.value(p).data().iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// `-(mean log D(real) + mean log(1 - D(fake)))` on graph nodes.
pub fn discriminator_loss_node<S: Scalar>(g: &mut Graph<'_, S>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let real = g.neg_log(d_real, PROB_EPS, false);
    let fake = g.neg_log(d_fake, PROB_EPS, true);
    g.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}

/// `mean -log D(fake)` on graph nodes.
pub fn generator_adv_loss_node<S: Scalar>(g: &mut Graph<'_, S>, d_fake: NodeId) -> NodeId {
    g.neg_log(d_fake, PROB_EPS, false)
}

/// `l_perc + lambda_adv * l_adv` on graph nodes.
pub fn combined_generator_loss_node<S: Scalar>(
    g: &mut Graph<'_, S>,
    perceptual: NodeId,
    adversarial: NodeId,
    lambda_adv: f64,
) -> Result<NodeId> {
    g.weighted_sum(&[(perceptual, 1.0), (adversarial, lambda_adv)])
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> Result<f64> {
    let n = xs.len();
    if n == 0 {
        return Err(validation("empty probability batch"));
    }
    Ok(xs.sum::<f64>() / n as f64)
}

/// Value form of [`discriminator_loss_node`] from critic probabilities.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    let real = mean(d_real.iter().map(|&p| -libm::log(clamp_prob(p))))?;
    let fake = mean(d_fake.iter().map(|&p| -libm::log(1.0 - clamp_prob(p))))?;
    Ok(real + fake)
}

/// Value form of [`generator_adv_loss_node`].
pub fn generator_adv_loss(d_fake: &[f64]) -> Result<f64> {
    mean(d_fake.iter().map(|&p| -libm::log(clamp_prob(p))))
}

pub fn combined_generator_loss(perceptual: f64, adversarial: f64, lambda_adv: f64) -> f64 {
    perceptual + lambda_adv * adversarial
}
