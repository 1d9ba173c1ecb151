//! Guided sampling with the frozen denoiser and the garment plug-in.

use crate::diffusion::{sampler_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidanceScales};
use crate::tensor::{Ctx, ParameterStore, SeededRng, Tensor};

use super::config::DenoiserConfig;
use super::forward::{Conditioning, GarmentFeatures, Network};

/// Everything needed to draw samples.
pub struct Sampler<'a> {
    pub cfg: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    pub denoiser: &'a ParameterStore<f32>,
    /// Extractor and fusion weights; without them every garment branch
    /// falls back to the null garment.
    pub plugin: Option<(&'a ParameterStore<f32>, &'a ParameterStore<f32>)>,
    pub mode: GuidanceMode,
    pub scales: GuidanceScales,
    pub steps: usize,
    pub clip: bool,
}

/// One image to draw.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// `[C, H, W]` garment image in `[-1, 1]`.
    pub garment: Option<Tensor<f32>>,
    pub tokens: Vec<usize>,
    pub seed: u64,
}

/// Per-step noise predictions of every guidance branch, kept for inspection.
pub type BranchLog = Vec<Vec<Tensor<f32>>>;

impl Sampler<'_> {
    pub fn extract(&self, garments: &Tensor<f32>) -> Result<Option<GarmentFeatures<f32>>> {
        match self.plugin {
            Some((extractor, _)) => {
                let bound = extractor.bind_frozen();
                Ok(Some(
                    Network::new(self.cfg, &bound, None).extract(&Ctx::inference(), garments)?,
                ))
            }
            None => Ok(None),
        }
    }

    /// Draws one image per request; returns `[B, C, H, W]`.
    pub fn sample(&self, requests: &[SampleRequest]) -> Result<Tensor<f32>> {
        self.sample_logged(requests, None)
    }

    /// Like [`Self::sample`], optionally recording the branch predictions of
    /// every step (outer index: step, inner: branch in mode order).
    pub fn sample_logged(&self, requests: &[SampleRequest], mut log: Option<&mut BranchLog>) -> Result<Tensor<f32>> {
        if requests.is_empty() {
            return Err(Error::Contract("nothing to sample".into()));
        }
        let [c, h, w] = self.cfg.image_shape();
        let grid = self.sched.step_grid(self.steps)?;

        // garment features, extracted once and shared across steps
        let mut garment_slot = vec![None; requests.len()];
        let mut garments = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            if let Some(g) = &r.garment {
                if g.shape() != [c, h, w] {
                    return Err(Error::dim("sample", g.shape(), &[c, h, w]));
                }
                garment_slot[i] = Some(garments.len());
                garments.push(g.reshape(&[1, c, h, w])?);
            }
        }
        let features = if garments.is_empty() {
            None
        } else {
            self.extract(&Tensor::stack_outer(&garments)?)?
        };
        let fusion_bound = self.plugin.map(|(_, f)| f.bind_frozen());
        let base = self.denoiser.bind_frozen();
        let net = Network::new(self.cfg, &base, fusion_bound.as_ref());

        let branches = self.mode.branches();
        let mut conds = Vec::with_capacity(requests.len() * branches.len());
        for br in branches {
            for (i, r) in requests.iter().enumerate() {
                conds.push(Conditioning {
                    tokens: br.text_present.then(|| r.tokens.clone()),
                    garment: if br.garment_present && features.is_some() {
                        garment_slot[i]
                    } else {
                        None
                    },
                });
            }
        }

        let noise: Vec<Tensor<f32>> = requests
            .iter()
            .map(|r| SeededRng::new(r.seed).normal_tensor(&[1, c, h, w]))
            .collect();
        let mut z = Tensor::stack_outer(&noise)?;
        let n = requests.len();
        let ctx = Ctx::inference();
        for (si, &t) in grid.iter().enumerate() {
            let t_prev = grid.get(si + 1).copied().unwrap_or(0);
            let zz = Tensor::stack_outer(&vec![z.clone(); branches.len()])?;
            let eps_all = net.predict(&ctx, &zz, &vec![t; zz.shape()[0]], &conds, features.as_ref())?;
            let preds: Vec<Tensor<f32>> = (0..branches.len())
                .map(|b| eps_all.slice_outer(b * n, (b + 1) * n))
                .collect::<Result<_>>()?;
            if let Some(log) = log.as_deref_mut() {
                log.push(preds.clone());
            }
            let eps_hat = self.mode.combine(&preds, self.scales)?;
            z = sampler_step(&z, &eps_hat, t, t_prev, self.sched, self.clip)?;
        }
        Ok(z)
    }
}
