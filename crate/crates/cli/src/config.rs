//! Run configuration: a line-based `key = value` file with `#` comments and
//! dotted keys, layered over a named preset.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use weave_core::diffusion::NoiseSchedule;
use weave_core::guidance::{DropPolicy, GuidanceMode, GuidanceScales};
use weave_core::metric::{KernelId, MatchConfig};
use weave_core::model::DenoiserConfig;
use weave_core::tensor::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => bail!("unknown preset `{other}` (expected toy or paper)"),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub clip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Stage one: base denoiser.
    pub base_steps: usize,
    pub base_lr: f64,
    /// Caption dropout of stage one.
    pub text_drop: f64,
    /// Stage two: extractor and fusion.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Linear warmup length of both stages.
    pub warmup: usize,
    /// Cosine decay to a tenth of the peak after warmup; constant otherwise.
    pub cosine: bool,
    /// Decay of the weight average that is saved instead of the raw weights.
    pub ema: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub train_n: usize,
    pub eval_n: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

/// Metric preset plus per-field overrides, resolved against the schedule and
/// model once the whole file has been read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub preset: Preset,
    pub feature_step: Option<usize>,
    pub feature_layer: Option<usize>,
    pub sample_distance: Option<usize>,
    pub sample_threshold: Option<f64>,
    pub patch_size: Option<usize>,
    pub mismatch_penalty: Option<f64>,
    pub kernel: KernelId,
    /// Seed of the noise used for feature extraction.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub drop: DropPolicy,
    pub mode: GuidanceMode,
    pub scales: GuidanceScales,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metric: MetricConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    /// 32x32 images, T = 200, d = 64, two levels of two blocks.
    pub fn toy() -> Self {
        RunConfig {
            preset: Preset::Toy,
            seed: 0,
            model: DenoiserConfig {
                image_size: 32,
                channels: 3,
                patch_size: 4,
                model_dim: 64,
                heads: 4,
                blocks_per_level: 2,
                levels: 2,
                text_vocab_size: weave_core::data::VOCAB_SIZE,
                max_tokens: 4,
                time_dim: 32,
                ffn_mult: 2,
            },
            // the T = 1000 endpoints scaled by 1000 / T, so alpha_bar_T is near 0
            schedule: ScheduleConfig {
                steps: 200,
                beta_start: 5e-4,
                beta_end: 0.1,
            },
            drop: DropPolicy::default(),
            mode: GuidanceMode::Joint,
            scales: GuidanceScales::default(),
            sampler: SamplerConfig { steps: 20, clip: true },
            train: TrainConfig {
                base_steps: 20_000,
                base_lr: 2e-3,
                text_drop: 0.1,
                steps: 10_000,
                lr: 1e-3,
                batch_size: 8,
                weight_decay: 0.01,
                grad_clip: Some(1.0),
                warmup: 100,
                cosine: true,
                ema: Some(0.999),
            },
            data: DataConfig {
                train_n: 512,
                eval_n: 64,
                seed: 0,
                eval_seed: 1,
            },
            metric: MetricConfig {
                preset: Preset::Toy,
                feature_step: None,
                feature_layer: None,
                sample_distance: None,
                sample_threshold: None,
                patch_size: None,
                mismatch_penalty: None,
                kernel: KernelId::MaskedL2,
                seed: 0,
            },
            compare: CompareConfig { n: 50, seed: 1000 },
        }
    }

    /// Full-scale training settings (batch 16, 100k steps, lr 5e-5, T = 1000)
    /// and the full-resolution metric constants. Far beyond a CPU budget.
    pub fn paper() -> Self {
        let toy = RunConfig::toy();
        RunConfig {
            preset: Preset::Paper,
            model: DenoiserConfig {
                patch_size: 2,
                ..toy.model
            },
            schedule: ScheduleConfig {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            train: TrainConfig {
                base_steps: 100_000,
                base_lr: 5e-5,
                text_drop: 0.1,
                steps: 100_000,
                lr: 5e-5,
                batch_size: 16,
                weight_decay: 0.01,
                grad_clip: None,
                warmup: 0,
                cosine: false,
                ema: None,
            },
            data: DataConfig {
                train_n: 512,
                eval_n: 64,
                seed: 0,
                eval_seed: 1,
            },
            metric: MetricConfig {
                preset: Preset::Paper,
                ..toy.metric
            },
            ..toy
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => RunConfig::toy(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key `{key}`", i + 1);
            }
            entries.push((i + 1, key, value));
        }
        let preset = match entries.iter().find(|e| e.1 == "preset") {
            Some((line, _, v)) => v.parse().with_context(|| format!("line {line}"))?,
            None => Preset::Toy,
        };
        let mut cfg = RunConfig::preset(preset);
        for (line, key, value) in entries {
            if key != "preset" {
                cfg.set(key, value).with_context(|| format!("line {line}: `{key}`"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn p<T: FromStr>(v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| anyhow!("bad value `{v}`: {e}"))
        }
        fn opt<T: FromStr>(v: &str) -> Result<Option<T>>
        where
            T::Err: fmt::Display,
        {
            if v == "none" {
                Ok(None)
            } else {
                p(v).map(Some)
            }
        }
        let m = &mut self.model;
        match key {
            "seed" => self.seed = p(v)?,
            "image_size" | "model.image_size" => m.image_size = p(v)?,
            "model.patch_size" => m.patch_size = p(v)?,
            "model.dim" => m.model_dim = p(v)?,
            "model.heads" => m.heads = p(v)?,
            "model.blocks_per_level" => m.blocks_per_level = p(v)?,
            "model.levels" => m.levels = p(v)?,
            "model.time_dim" => m.time_dim = p(v)?,
            "model.ffn_mult" => m.ffn_mult = p(v)?,
            "model.max_tokens" => m.max_tokens = p(v)?,
            "schedule.steps" => self.schedule.steps = p(v)?,
            "schedule.beta_start" => self.schedule.beta_start = p(v)?,
            "schedule.beta_end" => self.schedule.beta_end = p(v)?,
            "drop.garment_only" => self.drop.garment_only = p(v)?,
            "drop.text_only" => self.drop.text_only = p(v)?,
            "drop.both" => self.drop.both = p(v)?,
            "guidance.mode" => self.mode = p(v)?,
            "guidance.s_t" => self.scales = GuidanceScales::new(self.scales.s_g, p(v)?)?,
            "guidance.s_g" => self.scales = GuidanceScales::new(p(v)?, self.scales.s_t)?,
            "sampler.steps" => self.sampler.steps = p(v)?,
            "sampler.clip" => self.sampler.clip = p(v)?,
            "train.base_steps" => self.train.base_steps = p(v)?,
            "train.base_lr" => self.train.base_lr = p(v)?,
            "train.text_drop" => self.train.text_drop = p(v)?,
            "train.steps" => self.train.steps = p(v)?,
            "train.lr" => self.train.lr = p(v)?,
            "train.batch_size" => self.train.batch_size = p(v)?,
            "train.weight_decay" => self.train.weight_decay = p(v)?,
            "train.grad_clip" => self.train.grad_clip = opt(v)?,
            "train.warmup" => self.train.warmup = p(v)?,
            "train.lr_schedule" => {
                self.train.cosine = match v {
                    "cosine" => true,
                    "constant" => false,
                    _ => bail!("expected cosine or constant"),
                }
            }
            "train.ema" => self.train.ema = opt(v)?,
            "data.train_n" => self.data.train_n = p(v)?,
            "data.eval_n" => self.data.eval_n = p(v)?,
            "data.seed" => self.data.seed = p(v)?,
            "data.eval_seed" => self.data.eval_seed = p(v)?,
            "metric.preset" => self.metric.preset = p(v)?,
            "metric.t" => self.metric.feature_step = opt(v)?,
            "metric.layer" => self.metric.feature_layer = opt(v)?,
            "metric.d_s" => self.metric.sample_distance = opt(v)?,
            "metric.tau_s" => self.metric.sample_threshold = opt(v)?,
            "metric.patch" => self.metric.patch_size = opt(v)?,
            "metric.penalty" => self.metric.mismatch_penalty = opt(v)?,
            "metric.kernel" => self.metric.kernel = p(v)?,
            "metric.seed" => self.metric.seed = p(v)?,
            "compare.n" => self.compare.n = p(v)?,
            "compare.seed" => self.compare.seed = p(v)?,
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.channels != 3 {
            bail!("only RGB images are supported");
        }
        if self.model.text_vocab_size < weave_core::data::VOCAB_SIZE {
            bail!("text vocabulary smaller than the caption vocabulary");
        }
        self.noise_schedule()?;
        self.drop.validate()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            bail!("sampler.steps must be in 1..={}", self.schedule.steps);
        }
        let t = &self.train;
        if t.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        for (name, lr) in [("train.lr", t.lr), ("train.base_lr", t.base_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                bail!("{name} must be positive");
            }
        }
        if !(0.0..=1.0).contains(&t.text_drop) {
            bail!("train.text_drop must be a probability");
        }
        if t.ema.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            bail!("train.ema must be in [0, 1) or none");
        }
        if t.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            bail!("train.grad_clip must be positive or none");
        }
        if self.data.train_n == 0 || self.data.eval_n == 0 {
            bail!("data sizes must be >= 1");
        }
        let mc = self.match_config();
        mc.validate()?;
        if mc.feature_step > self.schedule.steps {
            bail!("metric.t exceeds schedule.steps");
        }
        if self.compare.n == 0 {
            bail!("compare.n must be >= 1");
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)?)
    }

    pub fn match_config(&self) -> MatchConfig {
        let base = match self.metric.preset {
            Preset::Toy => MatchConfig::toy(self.schedule.steps, &self.model),
            Preset::Paper => MatchConfig::paper(),
        };
        let m = &self.metric;
        MatchConfig {
            feature_step: m.feature_step.unwrap_or(base.feature_step),
            feature_layer: m.feature_layer.unwrap_or(base.feature_layer),
            sample_distance: m.sample_distance.unwrap_or(base.sample_distance),
            sample_threshold: m.sample_threshold.unwrap_or(base.sample_threshold),
            patch_size: m.patch_size.unwrap_or(base.patch_size),
            mismatch_penalty: m.mismatch_penalty.unwrap_or(base.mismatch_penalty),
            kernel: m.kernel,
        }
    }

    /// Learning rate of step `step` out of `total` for peak rate `peak`.
    pub fn lr_at(&self, peak: f64, step: usize, total: usize) -> f64 {
        let w = self.train.warmup;
        if step < w {
            return peak * (step + 1) as f64 / w as f64;
        }
        if !self.train.cosine || total <= w + 1 {
            return peak;
        }
        let progress = (step - w) as f64 / (total - w - 1) as f64;
        peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.train.weight_decay,
            max_grad_norm: self.train.grad_clip,
            ..AdamWConfig::default()
        }
    }

    /// Every setting as `key = value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mc = &self.metric;
        let o = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", self.preset.to_string());
        put("seed", self.seed.to_string());
        put("image_size", m.image_size.to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.dim", m.model_dim.to_string());
        put("model.heads", m.heads.to_string());
        put("model.blocks_per_level", m.blocks_per_level.to_string());
        put("model.levels", m.levels.to_string());
        put("model.time_dim", m.time_dim.to_string());
        put("model.ffn_mult", m.ffn_mult.to_string());
        put("model.max_tokens", m.max_tokens.to_string());
        put("schedule.steps", self.schedule.steps.to_string());
        put("schedule.beta_start", format!("{:?}", self.schedule.beta_start));
        put("schedule.beta_end", format!("{:?}", self.schedule.beta_end));
        put("drop.garment_only", format!("{:?}", self.drop.garment_only));
        put("drop.text_only", format!("{:?}", self.drop.text_only));
        put("drop.both", format!("{:?}", self.drop.both));
        put("guidance.mode", self.mode.to_string());
        put("guidance.s_t", format!("{:?}", self.scales.s_t));
        put("guidance.s_g", format!("{:?}", self.scales.s_g));
        put("sampler.steps", self.sampler.steps.to_string());
        put("sampler.clip", self.sampler.clip.to_string());
        put("train.base_steps", t.base_steps.to_string());
        put("train.base_lr", format!("{:?}", t.base_lr));
        put("train.text_drop", format!("{:?}", t.text_drop));
        put("train.steps", t.steps.to_string());
        put("train.lr", format!("{:?}", t.lr));
        put("train.batch_size", t.batch_size.to_string());
        put("train.weight_decay", format!("{:?}", t.weight_decay));
        put("train.grad_clip", o(t.grad_clip.map(|v| format!("{v:?}"))));
        put("train.warmup", t.warmup.to_string());
        put(
            "train.lr_schedule",
            (if t.cosine { "cosine" } else { "constant" }).to_string(),
        );
        put("train.ema", o(t.ema.map(|v| format!("{v:?}"))));
        put("data.train_n", self.data.train_n.to_string());
        put("data.eval_n", self.data.eval_n.to_string());
        put("data.seed", self.data.seed.to_string());
        put("data.eval_seed", self.data.eval_seed.to_string());
        put("metric.preset", mc.preset.to_string());
        put("metric.t", o(mc.feature_step.map(|v| v.to_string())));
        put("metric.layer", o(mc.feature_layer.map(|v| v.to_string())));
        put("metric.d_s", o(mc.sample_distance.map(|v| v.to_string())));
        put("metric.tau_s", o(mc.sample_threshold.map(|v| format!("{v:?}"))));
        put("metric.patch", o(mc.patch_size.map(|v| v.to_string())));
        put("metric.penalty", o(mc.mismatch_penalty.map(|v| format!("{v:?}"))));
        put("metric.kernel", mc.kernel.to_string());
        put("metric.seed", mc.seed.to_string());
        put("compare.n", self.compare.n.to_string());
        put("compare.seed", self.compare.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_toy_preset() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::toy());
    }

    #[test]
    fn echo_round_trips() {
        for cfg in [RunConfig::toy(), RunConfig::paper()] {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let mut cfg = RunConfig::toy();
        cfg.metric.sample_threshold = Some(2.5);
        cfg.train.grad_clip = None;
        cfg.train.ema = None;
        cfg.train.cosine = false;
        cfg.scales = GuidanceScales::new(1.25, 3.0).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "preset = toy\nguidance.s_t = 5.0  # stronger text\ntrain.steps = 10\nguidance.mode = independent\n",
        )
        .unwrap();
        assert_eq!(cfg.scales.s_t, 5.0);
        assert_eq!(cfg.scales.s_g, 2.5);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.mode, GuidanceMode::Independent);
    }

    #[test]
    fn presets_resolve_metric_settings() {
        let toy = RunConfig::toy().match_config();
        assert_eq!((toy.feature_step, toy.sample_distance, toy.patch_size), (8, 8, 9));
        let paper = RunConfig::paper();
        let mc = paper.match_config();
        assert_eq!((mc.feature_step, mc.feature_layer, mc.patch_size), (41, 11, 33));
        assert_eq!(
            (paper.train.batch_size, paper.train.steps, paper.train.lr),
            (16, 100_000, 5e-5)
        );
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = RunConfig::toy();
        let w = cfg.train.warmup;
        assert_eq!(cfg.lr_at(1.0, 0, 1000), 1.0 / w as f64);
        assert_eq!(cfg.lr_at(1.0, w - 1, 1000), 1.0);
        assert!((cfg.lr_at(1.0, w, 1000) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_at(1.0, 999, 1000) - 0.1).abs() < 1e-12);
        let mut flat = cfg.clone();
        flat.train.cosine = false;
        assert_eq!(flat.lr_at(2.0, 700, 1000), 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense = 1",
            "train.steps 10",
            "seed = 1\nseed = 2",
            "preset = huge",
            "model.heads = 5",
            "guidance.s_t = -1",
            "sampler.steps = 500",
            "drop.both = 0.9\ndrop.text_only = 0.2",
            "metric.patch = 8",
            "train.batch_size = 0",
            "train.ema = 1.0",
            "train.lr_schedule = step",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
