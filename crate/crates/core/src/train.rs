//! Single-iteration training logic. Each trainer owns its networks and
//! optimizer state; batches are a pure function of `(seed, iteration)` so an
//! interrupted run resumes on the same trajectory.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::critic::{
    combined_generator_loss_node, discriminator_loss_node, generator_adv_loss_node, Critic, LAMBDA_ADV,
};
use crate::domain::{AffineTransform, BoxRegion, HoleSpec, TrainingExample};
use crate::error::{validation, Error, Result};
use crate::graph::Graph;
use crate::locnet::{align_guidance, loc_input, mean_corner_error, LocNet, LOCALIZATION_POINTS};
use crate::optim::{Adam, AdamConfig};
use crate::percept::{perceptual_loss_node, LambdaNormalizer, LambdaUpdate, PerceptConfig, PerceptNet};
use crate::scalar::Scalar;
use crate::synthnet::{SynthInput, SynthNet, SynthOptions};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lambda_adv: f64,
    /// Iterations per perceptual weight renormalization.
    pub percept_window: usize,
    pub freeze_guidance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Published optimizer, loss weight and batch size at 224 px.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig::reference(),
            batch_size: 2,
            max_iterations: 841_000,
            checkpoint_interval: 10_000,
            seed: 0,
            adam: AdamConfig::default(),
            lambda_adv: LAMBDA_ADV,
            percept_window: 100,
            freeze_guidance: true,
        }
    }

    /// 64 px, quarter widths, batch 4.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            batch_size: 4,
            max_iterations: 2_000,
            checkpoint_interval: 500,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(validation("batch_size must be >= 1"));
        }
        let a = &self.adam;
        if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
            return Err(validation(format!("learning rate {} must be > 0", a.learning_rate)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(validation("adam betas must be in [0, 1) and epsilon > 0"));
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return Err(validation(format!("lambda_adv {} must be >= 0", self.lambda_adv)));
        }
        if self.percept_window == 0 || self.checkpoint_interval == 0 {
            return Err(validation("percept_window and checkpoint_interval must be >= 1"));
        }
        Ok(())
    }

    pub fn percept(&self) -> PerceptConfig {
        PerceptConfig { window: self.percept_window, ..PerceptConfig::default() }
    }
}

/// Example indices (with replacement) for `iteration`.
pub fn batch_indices(seed: u64, iteration: u64, examples: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4ba7_c4ba_7c4b);
    rng.set_stream(iteration);
    (0..batch).map(|_| rng.random_range(0..examples)).collect()
}

fn check_finite(what: &str, v: f64, iteration: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at iteration {iteration}")))
    }
}

/// A localization training example in network form.
#[derive(Clone, Debug, PartialEq)]
pub struct LocSample<S> {
    pub input: Tensor<S>,
    pub target: AffineTransform,
}

impl<S: Scalar> LocSample<S> {
    pub fn from_example(config: &ModelConfig, ex: &TrainingExample) -> Result<Self> {
        Ok(Self { input: loc_input(config, &ex.incomplete, &ex.guidance, &ex.hole)?, target: ex.gt_transform })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocStepStats {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct LocTrainer<S: Scalar> {
    pub net: LocNet<S>,
    pub adam: Adam<S>,
    /// Completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
}

impl<S: Scalar> LocTrainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = LocNet::new(config.model, &mut rng)?;
        let adam = Adam::new(net.store(), config.adam);
        Ok(Self { net, adam, iteration: 0, config })
    }

    /// One Adam step on the batch drawn for the current iteration.
    pub fn step(&mut self, samples: &[LocSample<S>]) -> Result<LocStepStats> {
        if samples.is_empty() {
            return Err(validation("no localization samples"));
        }
        let idx = batch_indices(self.config.seed, self.iteration, samples.len(), self.config.batch_size);
        let batch: Vec<&LocSample<S>> = idx.iter().map(|&i| &samples[i]).collect();
        let iteration = self.iteration;
        let loss = self.step_on(&batch)?;
        Ok(LocStepStats { iteration, loss })
    }

    /// One Adam step on an explicit batch; returns the pre-update loss.
    pub fn step_on(&mut self, batch: &[&LocSample<S>]) -> Result<f64> {
        let input = Tensor::stack_batch(&batch.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let target: Vec<S> = batch.iter().flat_map(|s| s.target.theta.map(S::from_f64_lossy)).collect();
        let points = LOCALIZATION_POINTS.map(|p| p.map(S::from_f64_lossy)).to_vec();
        let grads = {
            let mut g = Graph::new();
            let x = g.input(input);
            let out = self.net.forward(&mut g, x)?;
            let loss = g.point_loss(out.theta, target, points)?;
            let value = g.scalar_value(loss).to_f64_lossy();
            check_finite("localization loss", value, self.iteration)?;
            (g.backward(loss)?.for_store(self.net.store()), value)
        };
        self.adam.update(self.net.store_mut(), &grads.0)?;
        self.iteration += 1;
        Ok(grads.1)
    }

    /// Predicted transforms for `samples`, in order.
    pub fn predict(&self, samples: &[LocSample<S>]) -> Result<Vec<AffineTransform>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let input = Tensor::stack_batch(&chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
            out.extend(self.net.predict_batch(input)?);
        }
        Ok(out)
    }

    /// Mean corner displacement over `samples`.
    pub fn corner_error(&self, samples: &[LocSample<S>]) -> Result<f64> {
        let pred = self.predict(samples)?;
        let gt: Vec<AffineTransform> = samples.iter().map(|s| s.target).collect();
        mean_corner_error(&pred, &gt)
    }
}

/// A synthesis training example: inputs with ground-truth-aligned guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<S> {
    pub input: SynthInput<S>,
    pub ground_truth: Tensor<S>,
    pub hole: HoleSpec,
}

impl<S: Scalar> SynthSample<S> {
    pub fn from_example(config: &ModelConfig, ex: &TrainingExample) -> Result<Self> {
        let r = config.resolution;
        let aligned = align_guidance(&ex.guidance, &ex.gt_transform, r, r);
        let input = SynthInput::new(config, &ex.incomplete, &aligned, &ex.hole)?;
        let gt = ex.ground_truth.data().iter().map(|&v| S::from_f64_lossy(v)).collect();
        Ok(Self { input, ground_truth: Tensor::from_vec(&[1, 3, r, r], gt)?, hole: ex.hole.clone() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStepStats {
    pub iteration: u64,
    /// `None` when the adversarial term is disabled.
    pub d_loss: Option<f64>,
    pub adversarial: Option<f64>,
    pub perceptual: f64,
    pub g_loss: f64,
    /// Unweighted per-layer perceptual terms.
    pub per_layer: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub lambda_update: Option<LambdaUpdate>,
}

#[derive(Clone, Debug)]
pub struct SynthTrainer<S: Scalar> {
    pub generator: SynthNet<S>,
    pub critic: Critic<S>,
    pub percept: PerceptNet<S>,
    pub gen_adam: Adam<S>,
    pub critic_adam: Adam<S>,
    pub lambdas: LambdaNormalizer,
    /// Completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
}

impl<S: Scalar> SynthTrainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let options = SynthOptions { freeze_guidance: config.freeze_guidance };
        let generator = SynthNet::new(config.model, options, &mut rng)?;
        let critic = Critic::new(config.model, &mut rng)?;
        let percept = PerceptNet::new(&config.model, &mut rng)?;
        let gen_adam = Adam::new(generator.store(), config.adam);
        let critic_adam = Adam::new(critic.store(), config.adam);
        let lambdas = LambdaNormalizer::new(&config.percept())?;
        Ok(Self { generator, critic, percept, gen_adam, critic_adam, lambdas, iteration: 0, config })
    }

    pub fn step(&mut self, samples: &[SynthSample<S>]) -> Result<SynthStepStats> {
        if samples.is_empty() {
            return Err(validation("no synthesis samples"));
        }
        let idx = batch_indices(self.config.seed, self.iteration, samples.len(), self.config.batch_size);
        let batch: Vec<&SynthSample<S>> = idx.iter().map(|&i| &samples[i]).collect();
        self.step_on(&batch)
    }

    /// One discriminator step (skipped when `lambda_adv == 0`) followed by
    /// one generator step.
    pub fn step_on(&mut self, batch: &[&SynthSample<S>]) -> Result<SynthStepStats> {
        let d_loss = if self.config.lambda_adv > 0.0 { Some(self.critic_step(batch)?) } else { None };
        let mut stats = self.generator_step(batch)?;
        stats.d_loss = d_loss;
        self.iteration += 1;
        Ok(stats)
    }

    /// Updates the critic only, against the current generator's composites.
    pub fn critic_step(&mut self, batch: &[&SynthSample<S>]) -> Result<f64> {
        let (input, gt, holes) = stack_synth(batch)?;
        let fake = {
            let mut g = Graph::new();
            let (i, a, m) = input.nodes(&mut g);
            let out = self.generator.synthesize(&mut g, i, a, m)?;
            g.value(out.composite).clone()
        };
        let (grads, value) = {
            let mut g = Graph::new();
            let real = g.input(gt);
            let fake = g.input(fake);
            let d_real = self.critic.forward(&mut g, real, &holes)?;
            let d_fake = self.critic.forward(&mut g, fake, &holes)?;
            let loss = discriminator_loss_node(&mut g, d_real, d_fake)?;
            let value = g.scalar_value(loss).to_f64_lossy();
            check_finite("discriminator loss", value, self.iteration)?;
            (g.backward(loss)?.for_store(self.critic.store()), value)
        };
        self.critic_adam.update(self.critic.store_mut(), &grads)?;
        Ok(value)
    }

    /// Updates the generator only and feeds the perceptual weight
    /// normalizer. Does not advance `iteration`; `d_loss` is left `None`.
    pub fn generator_step(&mut self, batch: &[&SynthSample<S>]) -> Result<SynthStepStats> {
        let (input, gt, holes) = stack_synth(batch)?;
        let adversarial_on = self.config.lambda_adv > 0.0;
        let lambdas = self.lambdas.lambdas.clone();
        let (grads, perceptual, adversarial, per_layer, g_loss) = {
            let mut g = Graph::new();
            let (i, a, m) = input.nodes(&mut g);
            let out = self.generator.synthesize(&mut g, i, a, m)?;
            let real = g.input(gt);
            let terms = perceptual_loss_node(&mut g, &self.percept, out.composite, real, &lambdas)?;
            let (total, adversarial) = if adversarial_on {
                let d_fake = self.critic.forward(&mut g, out.composite, &holes)?;
                let adv = generator_adv_loss_node(&mut g, d_fake);
                let total = combined_generator_loss_node(&mut g, terms.total, adv, self.config.lambda_adv)?;
                (total, Some(g.scalar_value(adv).to_f64_lossy()))
            } else {
                (terms.total, None)
            };
            let g_loss = g.scalar_value(total).to_f64_lossy();
            check_finite("generator loss", g_loss, self.iteration)?;
            let per_layer: Vec<f64> = terms.per_layer.iter().map(|&n| g.scalar_value(n).to_f64_lossy()).collect();
            let perceptual = g.scalar_value(terms.total).to_f64_lossy();
            let grads = g.backward(total)?.for_store(self.generator.store());
            (grads, perceptual, adversarial, per_layer, g_loss)
        };
        self.gen_adam.update(self.generator.store_mut(), &grads)?;
        let lambda_update = self.lambdas.record(&per_layer)?;
        Ok(SynthStepStats {
            iteration: self.iteration,
            d_loss: None,
            adversarial,
            perceptual,
            g_loss,
            per_layer,
            lambdas,
            lambda_update,
        })
    }
}

fn stack_synth<S: Scalar>(batch: &[&SynthSample<S>]) -> Result<(SynthInput<S>, Tensor<S>, Vec<BoxRegion>)> {
    if batch.is_empty() {
        return Err(validation("empty synthesis batch"));
    }
    let input = SynthInput::stack(&batch.iter().map(|s| &s.input).collect::<Vec<_>>())?;
    let gt = Tensor::stack_batch(&batch.iter().map(|s| s.ground_truth.clone()).collect::<Vec<_>>())?;
    let holes = batch.iter().map(|s| s.hole.bbox()).collect();
    Ok((input, gt, holes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_depend_only_on_seed_and_iteration() {
        assert_eq!(batch_indices(3, 17, 10, 4), batch_indices(3, 17, 10, 4));
        assert_ne!(batch_indices(3, 17, 10, 4), batch_indices(3, 18, 10, 4));
        assert!(batch_indices(1, 0, 5, 100).iter().all(|&i| i < 5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::desk() }.validate().is_err());
        let mut c = TrainConfig::desk();
        c.adam.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
