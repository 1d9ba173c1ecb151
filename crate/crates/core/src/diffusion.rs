//! Noise schedule, forward noising, the denoising loss and a deterministic
//! DDIM-style sampler, all in pixel space.

use crate::error::{Error, Result};
use crate::tensor::{Ctx, Scalar, SeededRng, Tensor};

/// Per-step variances and their cumulative signal fractions; steps are
/// numbered `1..=T`, with step 0 meaning the clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} .. {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        // betas below the f64 resolution of 1 leave alpha_bar flat
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal fraction at step `t`; `t = 0` is exactly 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Step { t, max: self.steps() }),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, max: self.steps() });
        }
        Ok(())
    }

    /// `steps` uniformly spaced, strictly descending time steps ending above 0.
    pub fn step_grid(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!(
                "sampler steps must be in 1..={total}, got {steps}"
            )));
        }
        Ok((0..steps).map(|i| (steps - i) * total / steps).collect())
    }
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
pub fn add_noise_at<S: Scalar>(z0: &Tensor<S>, eps: &Tensor<S>, alpha_bar: f64) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::dim("add_noise", z0.shape(), eps.shape()));
    }
    let a = S::lit(alpha_bar.sqrt());
    let b = S::lit((1.0 - alpha_bar).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * *z + b * *e).collect();
    Tensor::from_vec(z0.shape(), data)
}

pub fn add_noise<S: Scalar>(z0: &Tensor<S>, eps: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    sched.check_step(t)?;
    add_noise_at(z0, eps, sched.alpha_bar(t)?)
}

/// Mean squared error between predicted and true noise.
pub fn denoising_loss<S: Scalar>(ctx: &Ctx<'_, S>, eps_pred: &Tensor<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    ctx.mse(eps_pred, eps)
}

/// Clean-image estimate implied by a noise prediction at step `t`.
pub fn predict_clean<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor<S>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::dim("predict_clean", z_t.shape(), eps_hat.shape()));
    }
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv_a = S::lit(1.0 / ab.sqrt());
    let b = S::lit((1.0 - ab).sqrt());
    let one = S::one();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| {
            let x = (*z - b * *e) * inv_a;
            if clip {
                x.max(-one).min(one)
            } else {
                x
            }
        })
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Deterministic update from step `t` to `t_prev < t`.
pub fn sampler_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<Tensor<S>> {
    if t_prev >= t {
        return Err(Error::Ordering { t, t_prev });
    }
    let z0 = predict_clean(z_t, eps_hat, t, sched, clip)?;
    if t_prev == 0 {
        return Ok(z0);
    }
    add_noise_at(&z0, eps_hat, sched.alpha_bar(t_prev)?)
}

/// Runs the sampler from seeded Gaussian noise over the uniform descending
/// grid, asking `eps_fn(z_t, t)` for the (already guided) noise estimate.
pub fn sample_loop<S, F>(
    shape: &[usize],
    sched: &NoiseSchedule,
    steps: usize,
    clip: bool,
    rng: &mut SeededRng,
    mut eps_fn: F,
) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    let grid = sched.step_grid(steps)?;
    let mut z = rng.normal_tensor::<S>(shape);
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let eps_hat = eps_fn(&z, t)?;
        z = sampler_step(&z, &eps_hat, t, t_prev, sched, clip)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, n: usize) -> Tensor<f64> {
        Tensor::full(&[3, n, n], v)
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn conventional_schedule_decreases_to_near_zero() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        // direct product evaluation
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!((ab[999] - direct).abs() < 1e-15);
        assert!(ab[999] < 0.01);
        assert!(ab[0] > 0.999);
    }

    #[test]
    fn vanishing_betas_rejected() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1e-20]).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(NoiseSchedule::linear(10, 0.02, 0.01), Err(Error::Config(_))));
        assert!(NoiseSchedule::linear(0, 0.01, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_closed_forms() {
        let z0 = constant(1.0, 2);
        let eps = constant(-0.3, 2);
        assert_eq!(add_noise_at(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(add_noise_at(&z0, &eps, 0.0).unwrap(), eps);
        let half = add_noise_at(&z0, &constant(0.0, 2), 0.25).unwrap();
        assert!(half.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn add_noise_step_range() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let z = constant(0.0, 1);
        assert!(matches!(add_noise(&z, &z, 0, &s), Err(Error::Step { .. })));
        assert!(matches!(add_noise(&z, &z, 11, &s), Err(Error::Step { .. })));
        assert!(add_noise(&z, &z, 10, &s).is_ok());
    }

    #[test]
    fn loss_examples() {
        let ctx = Ctx::<f64>::inference();
        let mut rng = SeededRng::new(1);
        let eps: Tensor<f64> = rng.normal_tensor(&[3, 4, 4]);
        assert_eq!(denoising_loss(&ctx, &eps, &eps).unwrap().item().unwrap(), 0.0);
        let shifted = Tensor::from_vec(eps.shape(), eps.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((denoising_loss(&ctx, &shifted, &eps).unwrap().item().unwrap() - 1.0).abs() < 1e-12);

        let ctx32 = Ctx::<f32>::inference();
        let a: Tensor<f32> = rng.normal_tensor(&[3, 8, 8]);
        let b: Tensor<f32> = rng.normal_tensor(&[3, 8, 8]);
        let got = denoising_loss(&ctx32, &a, &b).unwrap().item().unwrap() as f64;
        // two-pass oracle: differences first, then their mean square
        let diffs: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| *x as f64 - *y as f64)
            .collect();
        let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((got - oracle).abs() < 1e-6);
        assert!(denoising_loss(&ctx32, &a, &Tensor::zeros(&[3, 8, 7])).is_err());
    }

    #[test]
    fn sampler_inverts_true_noise() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut rng = SeededRng::new(2);
        let z0 = Tensor::<f32>::from_vec(
            &[3, 4, 4],
            (0..48).map(|_| (rng.uniform() * 2.0 - 1.0) as f32).collect(),
        )
        .unwrap();
        let eps: Tensor<f32> = rng.normal_tensor(&[3, 4, 4]);
        for t in [1, 17, 100, 200] {
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let back = sampler_step(&zt, &eps, t, 0, &s, false).unwrap();
            assert!(back.max_abs_diff(&z0).unwrap() < 1e-5, "t = {t}");
            assert_eq!(back, predict_clean(&zt, &eps, t, &s, false).unwrap());
        }
    }

    #[test]
    fn sampler_rejects_non_descending() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let z = Tensor::<f32>::zeros(&[1]);
        assert!(matches!(
            sampler_step(&z, &z, 5, 5, &s, true),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn step_grid_is_uniform_and_descending() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let g = s.step_grid(20).unwrap();
        assert_eq!(g.first(), Some(&200));
        assert_eq!(g.last(), Some(&10));
        assert!(g.windows(2).all(|w| w[0] - w[1] == 10));
        assert!(s.step_grid(201).is_err());
        assert_eq!(s.step_grid(200).unwrap().last(), Some(&1));
    }

    #[test]
    fn linear_denoiser_trajectory_matches_f64_rollout() {
        // eps_hat = 0.3 * z + 0.1 applied for 20 steps
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let seed = 77;
        let got = sample_loop::<f32, _>(&[3, 4, 4], &s, 20, true, &mut SeededRng::new(seed), |z, _| {
            Tensor::from_vec(z.shape(), z.data().iter().map(|v| 0.3 * v + 0.1).collect())
        })
        .unwrap();

        // independent scripted rollout in f64 with its own noise draw
        let mut z: Vec<f64> = SeededRng::new(seed)
            .normal_tensor::<f32>(&[3, 4, 4])
            .data()
            .iter()
            .map(|v| *v as f64)
            .collect();
        let ab = |t: usize| if t == 0 { 1.0 } else { s.alpha_bars()[t - 1] };
        let ts: Vec<usize> = (0..20).map(|i| 200 - 10 * i).collect();
        for (i, &t) in ts.iter().enumerate() {
            let tp = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            for v in z.iter_mut() {
                let e = 0.3 * *v + 0.1;
                let x0 = ((*v - (1.0 - ab(t)).sqrt() * e) / ab(t).sqrt()).clamp(-1.0, 1.0);
                *v = ab(tp).sqrt() * x0 + (1.0 - ab(tp)).sqrt() * e;
            }
        }
        for (a, b) in got.data().iter().zip(&z) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedules_decrease(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
                let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
                prop_assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
                prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
                prop_assert!(s.alpha_bars()[0] < 1.0);
            }

            #[test]
            fn noising_inverts_exactly(seed in any::<u64>(), t in 1usize..=1000) {
                // f64: near t = T the division by sqrt(alpha_bar) ~ 0.008 lifts f32 rounding to 1e-5
                let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
                let mut rng = SeededRng::new(seed);
                let z0: Tensor<f64> =
                    Tensor::from_vec(&[3, 4, 4], (0..48).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap();
                let eps: Tensor<f64> = rng.normal_tensor(&[3, 4, 4]);
                let zt = add_noise(&z0, &eps, t, &s).unwrap();
                let back = sampler_step(&zt, &eps, t, 0, &s, false).unwrap();
                prop_assert!(back.max_abs_diff(&z0).unwrap() < 1e-5);
            }

            #[test]
            fn sampling_is_deterministic(seed in any::<u64>(), steps in 1usize..20) {
                let s = NoiseSchedule::linear(40, 1e-3, 0.1).unwrap();
                let run = || {
                    sample_loop::<f32, _>(&[3, 4, 4], &s, steps, true, &mut SeededRng::new(seed), |z, t| {
                        Tensor::from_vec(z.shape(), z.data().iter().map(|v| 0.5 * v + 0.01 * t as f32).collect())
                    })
                    .unwrap()
                };
                let (a, b) = (run(), run());
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
