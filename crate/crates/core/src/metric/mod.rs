//! Matched-points LPIPS: sample points on the garment, match them into the
//! character by diffusion-feature cosine similarity, compare masked patches
//! around each pair and penalize matches that land off the character's
//! garment.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::model::{Conditioning, DenoiserConfig, ForwardOptions, Network};
use crate::tensor::{Ctx, ParameterStore, SeededRng, Tensor};

pub type Point = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelId {
    /// Mean squared difference over the masked patch, divided by 4.
    #[default]
    MaskedL2,
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("masked-l2")
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-l2" => Ok(KernelId::MaskedL2),
            other => Err(Error::Config(format!("unknown distance kernel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub feature_step: usize,
    /// Index into the up-path blocks of the denoiser.
    pub feature_layer: usize,
    pub sample_distance: usize,
    pub sample_threshold: f64,
    pub patch_size: usize,
    pub mismatch_penalty: f64,
    pub kernel: KernelId,
}

impl MatchConfig {
    /// Settings for 768x576 images with a full-size UNet.
    pub fn paper() -> Self {
        MatchConfig {
            feature_step: 41,
            feature_layer: 11,
            sample_distance: 40,
            sample_threshold: 17.0,
            patch_size: 33,
            mismatch_penalty: 0.6,
            kernel: KernelId::MaskedL2,
        }
    }

    /// Settings scaled for 32x32 images and the toy denoiser.
    pub fn toy(total_steps: usize, cfg: &DenoiserConfig) -> Self {
        let ups = cfg.up_blocks().len();
        MatchConfig {
            feature_step: ((0.04 * total_steps as f64).round() as usize).max(1),
            feature_layer: ups.saturating_sub(2),
            sample_distance: 8,
            sample_threshold: 4.0,
            patch_size: 9,
            mismatch_penalty: 0.6,
            kernel: KernelId::MaskedL2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size {} must be odd and >= 3",
                self.patch_size
            )));
        }
        if self.sample_distance == 0 {
            return Err(Error::Config("sample distance must be >= 1".into()));
        }
        if !(0.0..).contains(&self.sample_threshold) || !(0.0..).contains(&self.mismatch_penalty) {
            return Err(Error::Config("threshold and penalty must be >= 0".into()));
        }
        if self.feature_step == 0 {
            return Err(Error::Config("feature step must be >= 1".into()));
        }
        Ok(())
    }
}

/// Grid points spaced `d_s` apart, centred in the mask's bounding box, that
/// fall inside the mask; row-major order.
pub fn sample_mask_points(mask: &Mask, d_s: usize) -> Result<Vec<Point>> {
    if d_s == 0 {
        return Err(Error::Config("sample distance must be >= 1".into()));
    }
    let (r0, r1, c0, c1) = mask
        .bounding_box()
        .ok_or_else(|| Error::EmptyRegion("mask has no pixels".into()))?;
    let offset = |lo: usize, hi: usize| lo + ((hi - lo) % d_s) / 2;
    let mut points = Vec::new();
    for r in (offset(r0, r1)..=r1).step_by(d_s) {
        for c in (offset(c0, c1)..=c1).step_by(d_s) {
            if mask.get(r, c) {
                points.push((r, c));
            }
        }
    }
    Ok(points)
}

/// `[C, H, W]` features aligned with image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim("feature map", &[channels, height, width], &[data.len()]));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn vector(&self, r: usize, c: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..self.channels)
            .map(|k| self.data[k * hw + r * self.width + c])
            .collect()
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn upsample(&self, height: usize, width: usize) -> FeatureMap {
        let (sh, sw) = (self.height, self.width);
        let coord = |i: usize, src: usize, dst: usize| {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            (lo, (lo + 1).min(src - 1), x - lo as f64)
        };
        let mut data = vec![0.0; self.channels * height * width];
        for r in 0..height {
            let (r0, r1, fr) = coord(r, sh, height);
            for c in 0..width {
                let (c0, c1, fc) = coord(c, sw, width);
                for k in 0..self.channels {
                    let at = |rr: usize, cc: usize| self.data[k * sh * sw + rr * sw + cc];
                    let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                    let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                    data[k * height * width + r * width + c] = top * (1.0 - fr) + bottom * fr;
                }
            }
        }
        FeatureMap {
            channels: self.channels,
            height,
            width,
            data,
        }
    }
}

/// Hidden state of one up-path block as a token grid, before upsampling.
pub fn diffusion_tokens(
    image: &Tensor<f32>,
    feature_step: usize,
    feature_layer: usize,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    denoiser: &ParameterStore<f32>,
    seed: u64,
) -> Result<FeatureMap> {
    let ups = cfg.up_blocks();
    let block = *ups.get(feature_layer).ok_or_else(|| {
        Error::Architecture(format!(
            "feature layer {feature_layer} but the denoiser has {} up blocks",
            ups.len()
        ))
    })?;
    let [c, h, w] = cfg.image_shape();
    if image.shape() != [c, h, w] {
        return Err(Error::dim("diffusion_features", image.shape(), &[c, h, w]));
    }
    let eps: Tensor<f32> = SeededRng::new(seed).normal_tensor(&[c, h, w]);
    let z_t = add_noise(image, &eps, feature_step, sched)?.reshape(&[1, c, h, w])?;
    let bound = denoiser.bind_frozen();
    let trace = Network::new(cfg, &bound, None).forward(
        &Ctx::inference(),
        &z_t,
        &[feature_step],
        &[Conditioning::null()],
        None,
        ForwardOptions::default(),
    )?;
    let tokens = &trace.block_outputs[block];
    let info = cfg.blocks()[block];
    let g = cfg.grid(info.level);
    let d = cfg.model_dim;
    // tokens are [g*g, d] row-major over the grid; transpose to [d, g, g]
    let mut data = vec![0.0; d * g * g];
    for n in 0..g * g {
        for k in 0..d {
            data[k * g * g + n] = tokens.data()[n * d + k] as f64;
        }
    }
    FeatureMap::new(d, g, g, data)
}

pub fn diffusion_features(
    image: &Tensor<f32>,
    feature_step: usize,
    feature_layer: usize,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    denoiser: &ParameterStore<f32>,
    seed: u64,
) -> Result<FeatureMap> {
    let grid = diffusion_tokens(image, feature_step, feature_layer, cfg, sched, denoiser, seed)?;
    Ok(grid.upsample(cfg.image_size, cfg.image_size))
}

/// For each garment point, the character pixel of highest cosine similarity.
/// Ties go to the first pixel in row-major order; a zero feature vector has
/// similarity -1 with everything.
pub fn match_points(feat_g: &FeatureMap, feat_c: &FeatureMap, points: &[Point]) -> Result<Vec<Point>> {
    if feat_g.channels != feat_c.channels {
        return Err(Error::dim("match_points", &[feat_g.channels], &[feat_c.channels]));
    }
    let (h, w, ch) = (feat_c.height, feat_c.width, feat_c.channels);
    let hw = h * w;
    // unit-normalized character features, pixel-major
    let mut unit_c = vec![0.0; hw * ch];
    let mut zero_c = vec![false; hw];
    for p in 0..hw {
        let norm = (0..ch).map(|k| feat_c.data[k * hw + p].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_c[p] = true;
        } else {
            for k in 0..ch {
                unit_c[p * ch + k] = feat_c.data[k * hw + p] / norm;
            }
        }
    }
    points
        .iter()
        .map(|&(r, c)| {
            if r >= feat_g.height || c >= feat_g.width {
                return Err(Error::Contract(format!("point ({r}, {c}) outside feature map")));
            }
            let v = feat_g.vector(r, c);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut best = (f64::NEG_INFINITY, 0);
            for p in 0..hw {
                let sim = if norm == 0.0 || zero_c[p] {
                    -1.0
                } else {
                    v.iter()
                        .zip(&unit_c[p * ch..(p + 1) * ch])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / norm
                };
                if sim > best.0 {
                    best = (sim, p);
                }
            }
            Ok((best.1 / w, best.1 % w))
        })
        .collect()
}

/// `s x s x C` patch around a point, zero beyond the image and outside the
/// mask; channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

pub fn extract_patch(image: &Tensor<f32>, mask: &Mask, center: Point, size: usize) -> Result<Patch> {
    let &[ch, h, w] = image.shape() else {
        return Err(Error::dim("extract_patch", image.shape(), &[3, 0, 0]));
    };
    if mask.height != h || mask.width != w {
        return Err(Error::dim("extract_patch", &[h, w], &[mask.height, mask.width]));
    }
    let half = (size / 2) as isize;
    let mut values = vec![0.0; ch * size * size];
    for dr in 0..size {
        for dc in 0..size {
            let r = center.0 as isize + dr as isize - half;
            let c = center.1 as isize + dc as isize - half;
            if mask.get_signed(r, c) {
                for k in 0..ch {
                    values[k * size * size + dr * size + dc] =
                        image.data()[k * h * w + r as usize * w + c as usize] as f64;
                }
            }
        }
    }
    Ok(Patch {
        size,
        channels: ch,
        values,
    })
}

/// Distance between two equally sized patches. A learned perceptual kernel
/// can be swapped in behind this trait.
pub trait PatchKernel {
    fn distance(&self, a: &Patch, b: &Patch) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MaskedL2;

impl PatchKernel for MaskedL2 {
    fn distance(&self, a: &Patch, b: &Patch) -> f64 {
        let n = a.values.len() as f64;
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n
            / 4.0
    }
}

pub fn kernel_of(id: KernelId) -> Box<dyn PatchKernel> {
    match id {
        KernelId::MaskedL2 => Box::new(MaskedL2),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn patch_distance(
    img_g: &Tensor<f32>,
    img_c: &Tensor<f32>,
    p_g: Point,
    p_c: Point,
    mask_g: &Mask,
    mask_c: &Mask,
    size: usize,
    kernel: &dyn PatchKernel,
) -> Result<f64> {
    if size.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size {size} must be odd")));
    }
    let a = extract_patch(img_g, mask_g, p_g, size)?;
    let b = extract_patch(img_c, mask_c, p_c, size)?;
    Ok(kernel.distance(&a, &b))
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        return out;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
    out
}

/// Euclidean distance from every pixel to the nearest in-mask pixel (0 on
/// the mask), by separable row and column passes. Infinite for an empty mask.
pub fn distance_to_mask(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid: Vec<f64> = mask.data.iter().map(|m| if *m { 0.0 } else { f64::INFINITY }).collect();
    for r in 0..h {
        let row = edt_1d(&grid[r * w..(r + 1) * w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    for c in 0..w {
        let col: Vec<f64> = (0..h).map(|r| grid[r * w + c]).collect();
        for (r, v) in edt_1d(&col).into_iter().enumerate() {
            grid[r * w + c] = v;
        }
    }
    grid.into_iter().map(f64::sqrt).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub points_g: Vec<Point>,
    pub points_c: Vec<Point>,
    pub per_point: Vec<f64>,
    pub mismatched: Vec<bool>,
    pub mean: f64,
}

impl MetricReport {
    pub fn mismatch_count(&self) -> usize {
        self.mismatched.iter().filter(|m| **m).count()
    }
}

/// Metric given precomputed feature maps for both images.
#[allow(clippy::too_many_arguments)]
pub fn mp_lpips_with_features(
    img_g: &Tensor<f32>,
    mask_g: &Mask,
    img_c: &Tensor<f32>,
    mask_c: &Mask,
    feat_g: &FeatureMap,
    feat_c: &FeatureMap,
    config: &MatchConfig,
    kernel: &dyn PatchKernel,
) -> Result<MetricReport> {
    config.validate()?;
    if mask_c.is_empty() {
        return Err(Error::EmptyRegion("character garment mask is empty".into()));
    }
    let points_g = sample_mask_points(mask_g, config.sample_distance)?;
    let points_c = match_points(feat_g, feat_c, &points_g)?;
    let dist = distance_to_mask(mask_c);
    let mut per_point = Vec::with_capacity(points_g.len());
    let mut mismatched = Vec::with_capacity(points_g.len());
    for (pg, pc) in points_g.iter().zip(&points_c) {
        let off = dist[pc.0 * mask_c.width + pc.1] > config.sample_threshold;
        mismatched.push(off);
        per_point.push(if off {
            config.mismatch_penalty
        } else {
            patch_distance(img_g, img_c, *pg, *pc, mask_g, mask_c, config.patch_size, kernel)?
        });
    }
    // running mean: exact when every point carries the same value
    let mean = per_point
        .iter()
        .enumerate()
        .fold(0.0, |m, (k, x)| m + (x - m) / (k + 1) as f64);
    Ok(MetricReport {
        points_g,
        points_c,
        per_point,
        mismatched,
        mean,
    })
}

/// Source of diffusion features for the metric.
pub struct FeatureExtractor<'a> {
    pub cfg: &'a DenoiserConfig,
    pub sched: &'a NoiseSchedule,
    pub denoiser: &'a ParameterStore<f32>,
    pub seed: u64,
}

impl FeatureExtractor<'_> {
    pub fn features(&self, image: &Tensor<f32>, config: &MatchConfig) -> Result<FeatureMap> {
        diffusion_features(
            image,
            config.feature_step,
            config.feature_layer,
            self.cfg,
            self.sched,
            self.denoiser,
            self.seed,
        )
    }
}

/// Full metric: features of both images, matching, patch distances and the
/// mismatch penalty, averaged over the sampled garment points.
pub fn mp_lpips(
    img_g: &Tensor<f32>,
    mask_g: &Mask,
    img_c: &Tensor<f32>,
    mask_c: &Mask,
    config: &MatchConfig,
    extractor: &FeatureExtractor<'_>,
) -> Result<MetricReport> {
    config.validate()?;
    let feat_g = extractor.features(img_g, config)?;
    let feat_c = extractor.features(img_c, config)?;
    let kernel = kernel_of(config.kernel);
    mp_lpips_with_features(img_g, mask_g, img_c, mask_c, &feat_g, &feat_c, config, kernel.as_ref())
}
