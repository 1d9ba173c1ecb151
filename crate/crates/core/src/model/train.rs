//! Training steps. Stage one fits the base denoiser on character images with
//! text conditioning; stage two freezes it and trains only the garment
//! extractor and the fusion projections.

use crate::diffusion::{add_noise, denoising_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{sample_condition_mask, ConditionPair, DropPolicy};
use crate::tensor::{accumulate, AdamW, Bound, Ctx, ParameterStore, Scalar, SeededRng, Tape, Tensor};

use super::config::DenoiserConfig;
use super::forward::{Conditioning, Network};

/// Paired training examples stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct PairedBatch<S: Scalar = f32> {
    /// `[B, C, H, W]` clean garment images.
    pub garments: Tensor<S>,
    /// `[B, C, H, W]` clean character images.
    pub characters: Tensor<S>,
    pub tokens: Vec<Vec<usize>>,
}

impl<S: Scalar> PairedBatch<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, cfg: &DenoiserConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let [c, h, w] = cfg.image_shape();
        let want = [self.len(), c, h, w];
        for t in [&self.garments, &self.characters] {
            if t.shape() != want {
                return Err(Error::dim("batch", t.shape(), &want));
            }
        }
        Ok(())
    }
}

/// Random quantities of one training step, drawn up front so the same step
/// can be replayed exactly (gradient checks, f64 re-evaluation).
#[derive(Debug, Clone)]
pub struct StepDraw<S: Scalar = f32> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
    pub conditions: Vec<ConditionPair>,
}

impl<S: Scalar> StepDraw<S> {
    pub fn sample(
        cfg: &DenoiserConfig,
        sched: &NoiseSchedule,
        batch: usize,
        policy: &DropPolicy,
        rng: &mut SeededRng,
    ) -> Self {
        let [c, h, w] = cfg.image_shape();
        let t = (0..batch).map(|_| 1 + rng.below(sched.steps())).collect();
        let conditions = (0..batch).map(|_| sample_condition_mask(rng, policy)).collect();
        let eps = rng.normal_tensor(&[batch, c, h, w]);
        StepDraw { t, eps, conditions }
    }

    pub fn cast<T: Scalar>(&self) -> StepDraw<T> {
        StepDraw {
            t: self.t.clone(),
            eps: self.eps.cast(),
            conditions: self.conditions.clone(),
        }
    }
}

fn noised<S: Scalar>(clean: &Tensor<S>, draw: &StepDraw<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let items = (0..draw.t.len())
        .map(|b| {
            let z0 = clean.slice_outer(b, b + 1)?;
            let e = draw.eps.slice_outer(b, b + 1)?;
            add_noise(&z0, &e, draw.t[b], sched)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_outer(&items)
}

/// Denoising loss of the fused model for one drawn step. Garments whose
/// condition is dropped are not run through the extractor.
#[allow(clippy::too_many_arguments)]
pub fn fusion_loss<S: Scalar>(
    ctx: &Ctx<'_, S>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    denoiser: &Bound<S>,
    extractor: &Bound<S>,
    fusion: &Bound<S>,
    batch: &PairedBatch<S>,
    draw: &StepDraw<S>,
) -> Result<Tensor<S>> {
    batch.check(cfg)?;
    let z_t = noised(&batch.characters, draw, sched)?;
    let present: Vec<usize> = (0..batch.len())
        .filter(|b| draw.conditions[*b].garment_present)
        .collect();
    let features = if present.is_empty() {
        None
    } else {
        let garments = Tensor::stack_outer(
            &present
                .iter()
                .map(|b| batch.garments.slice_outer(*b, b + 1))
                .collect::<Result<Vec<_>>>()?,
        )?;
        Some(Network::new(cfg, extractor, None).extract(ctx, &garments)?)
    };
    let mut slot = 0;
    let conds: Vec<Conditioning> = draw
        .conditions
        .iter()
        .zip(&batch.tokens)
        .map(|(c, tokens)| Conditioning {
            tokens: c.text_present.then(|| tokens.clone()),
            garment: c.garment_present.then(|| {
                slot += 1;
                slot - 1
            }),
        })
        .collect();
    let eps_hat = Network::new(cfg, denoiser, Some(fusion)).predict(ctx, &z_t, &draw.t, &conds, features.as_ref())?;
    denoising_loss(ctx, &eps_hat, &draw.eps)
}

/// Denoising loss of the base denoiser alone; items whose text is dropped
/// see the null caption.
pub fn base_loss<S: Scalar>(
    ctx: &Ctx<'_, S>,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    denoiser: &Bound<S>,
    batch: &PairedBatch<S>,
    draw: &StepDraw<S>,
) -> Result<Tensor<S>> {
    batch.check(cfg)?;
    let z_t = noised(&batch.characters, draw, sched)?;
    let conds: Vec<Conditioning> = draw
        .conditions
        .iter()
        .zip(&batch.tokens)
        .map(|(c, tokens)| Conditioning {
            tokens: c.text_present.then(|| tokens.clone()),
            garment: None,
        })
        .collect();
    let eps_hat = Network::new(cfg, denoiser, None).predict(ctx, &z_t, &draw.t, &conds, None)?;
    denoising_loss(ctx, &eps_hat, &draw.eps)
}

/// Trainable state of stage two.
pub struct FusionTrainer<'a> {
    pub cfg: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    pub policy: DropPolicy,
    pub optimizer: AdamW,
}

impl FusionTrainer<'_> {
    /// One update of extractor and fusion weights; the denoiser is only read.
    pub fn step(
        &mut self,
        denoiser: &ParameterStore<f32>,
        extractor: &mut ParameterStore<f32>,
        fusion: &mut ParameterStore<f32>,
        batch: &PairedBatch<f32>,
        rng: &mut SeededRng,
    ) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let draw = StepDraw::sample(self.cfg, self.sched, batch.len(), &self.policy, rng);
        let tape = Tape::new();
        let ctx = Ctx::recording(&tape);
        let frozen = denoiser.bind_frozen();
        let (eb, fb) = (extractor.bind(&ctx), fusion.bind(&ctx));
        let loss = fusion_loss(&ctx, self.cfg, self.sched, &frozen, &eb, &fb, batch, &draw)?;
        let grads = tape.gradients(&loss)?;
        accumulate(&tape, &grads, extractor);
        accumulate(&tape, &grads, fusion);
        self.optimizer.step(&mut [extractor, fusion]);
        loss.item()
    }
}

/// Trainable state of stage one.
pub struct BaseTrainer<'a> {
    pub cfg: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    /// Probability of replacing the caption with the null token.
    pub text_drop: f64,
    pub optimizer: AdamW,
}

impl BaseTrainer<'_> {
    pub fn step(
        &mut self,
        denoiser: &mut ParameterStore<f32>,
        batch: &PairedBatch<f32>,
        rng: &mut SeededRng,
    ) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let policy = DropPolicy::new(0.0, self.text_drop, 0.0)?;
        let draw = StepDraw::sample(self.cfg, self.sched, batch.len(), &policy, rng);
        let tape = Tape::new();
        let ctx = Ctx::recording(&tape);
        let bound = denoiser.bind(&ctx);
        let loss = base_loss(&ctx, self.cfg, self.sched, &bound, batch, &draw)?;
        let grads = tape.gradients(&loss)?;
        accumulate(&tape, &grads, denoiser);
        self.optimizer.step(&mut [denoiser]);
        loss.item()
    }
}
