//! Batched forward pass of the token UNet, with optional garment fusion in
//! every self-attention block.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Bound, Ctx, GroupSpan, Scalar, Tensor};

use super::config::{DenoiserConfig, Path};
use super::weights::{block_key, fusion_key};

/// Token id of the null caption.
pub const NULL_TOKEN: usize = 0;

/// Conditions of one batch item. `None` stands for the null condition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Conditioning {
    pub tokens: Option<Vec<usize>>,
    /// Index of this item's garment within the [`GarmentFeatures`] batch.
    pub garment: Option<usize>,
}

impl Conditioning {
    pub fn null() -> Self {
        Conditioning::default()
    }
}

/// Per-block normalized hidden states of the extractor for `count` garments;
/// block `i` holds `count * tokens_i` rows of width `d`.
#[derive(Debug, Clone)]
pub struct GarmentFeatures<S: Scalar = f32> {
    pub blocks: Vec<Tensor<S>>,
    pub count: usize,
}

impl<S: Scalar> GarmentFeatures<S> {
    /// Features of garment `g` alone.
    pub fn select(&self, g: usize) -> Result<GarmentFeatures<S>> {
        if g >= self.count {
            return Err(Error::Contract(format!("garment {g} of {}", self.count)));
        }
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let rows = b.shape()[0] / self.count;
                let t = b.detach().reshape(&[self.count, rows, b.shape()[1]])?;
                t.slice_outer(g, g + 1)?.reshape(&[rows, b.shape()[1]])
            })
            .collect::<Result<_>>()?;
        Ok(GarmentFeatures { blocks, count: 1 })
    }

    pub fn detach(&self) -> GarmentFeatures<S> {
        GarmentFeatures {
            blocks: self.blocks.iter().map(Tensor::detach).collect(),
            count: self.count,
        }
    }
}

/// What a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar = f32> {
    /// `[B, C, H, W]`; absent when the pass stopped early.
    pub eps: Option<Tensor<S>>,
    /// Normalized state entering each self-attention block (`[B * tokens_i, d]`).
    pub alphas: Vec<Tensor<S>>,
    /// Hidden state leaving each block.
    pub block_outputs: Vec<Tensor<S>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Stop right after capturing the alpha of this block.
    pub stop_after_alpha: Option<usize>,
}

/// Projection weights of one fused self-attention.
pub struct AttentionWeights<'a, S: Scalar> {
    pub w_q: &'a Tensor<S>,
    pub w_k: &'a Tensor<S>,
    pub w_v: &'a Tensor<S>,
    pub w_kg: Option<&'a Tensor<S>>,
    pub w_vg: Option<&'a Tensor<S>>,
}

/// Garment rows available to a fused attention, with the key range each
/// query group may read (empty for items without a garment).
pub struct GarmentKeys<'a, S: Scalar> {
    pub beta: &'a Tensor<S>,
    pub spans: &'a [GroupSpan],
}

/// `softmax(q k^T / sqrt(dh)) v + softmax(q kg^T / sqrt(dh)) vg`, the sum of two
/// separate attentions, before the output projection.
pub fn fused_attention_core<S: Scalar>(
    ctx: &Ctx<'_, S>,
    alpha: &Tensor<S>,
    self_spans: &[GroupSpan],
    garment: Option<GarmentKeys<'_, S>>,
    w: &AttentionWeights<'_, S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let q = ctx.matmul(alpha, w.w_q)?;
    let k = ctx.matmul(alpha, w.w_k)?;
    let v = ctx.matmul(alpha, w.w_v)?;
    let plain = ctx.attention(&q, &k, &v, heads, self_spans)?;
    let Some(g) = garment else {
        return Ok(plain);
    };
    let (w_kg, w_vg) = match (w.w_kg, w.w_vg) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Contract("garment keys given without fusion weights".into())),
    };
    if g.beta.dims2("fused_attention")?.1 != alpha.dims2("fused_attention")?.1 {
        return Err(Error::dim("fused_attention", alpha.shape(), g.beta.shape()));
    }
    let kg = ctx.matmul(g.beta, w_kg)?;
    let vg = ctx.matmul(g.beta, w_vg)?;
    let extra = ctx.attention(&q, &kg, &vg, heads, g.spans)?;
    ctx.add(&plain, &extra)
}

/// Single-sequence form: `alpha` is `[n x d]`, `beta` is `[m x d]`.
#[allow(clippy::too_many_arguments)]
pub fn fused_self_attention<S: Scalar>(
    ctx: &Ctx<'_, S>,
    alpha: &Tensor<S>,
    beta: &Tensor<S>,
    w_q: &Tensor<S>,
    w_k: &Tensor<S>,
    w_v: &Tensor<S>,
    w_kg: &Tensor<S>,
    w_vg: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let (n, d) = alpha.dims2("fused_self_attention")?;
    let (m, _) = beta.dims2("fused_self_attention")?;
    for w in [w_q, w_k, w_v, w_kg, w_vg] {
        if w.shape() != [d, d] {
            return Err(Error::dim("fused_self_attention", &[d, d], w.shape()));
        }
    }
    if n == 0 || m == 0 {
        return Err(Error::Contract("fused attention needs n, m >= 1".into()));
    }
    let spans = [GroupSpan {
        queries: 0..n,
        keys: 0..m,
    }];
    let garment = GarmentKeys { beta, spans: &spans };
    let w = AttentionWeights {
        w_q,
        w_k,
        w_v,
        w_kg: Some(w_kg),
        w_vg: Some(w_vg),
    };
    fused_attention_core(
        ctx,
        alpha,
        &[GroupSpan {
            queries: 0..n,
            keys: 0..n,
        }],
        Some(garment),
        &w,
        heads,
    )
}

/// Sinusoidal embedding of each step, `[B, dim]`.
pub fn timestep_embedding<S: Scalar>(steps: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
        data.extend(s.into_iter().chain(c).map(S::lit));
    }
    Tensor::raw(vec![steps.len(), dim], data)
}

/// Gather index turning `[B, C, H, W]` pixels into `[B * N, C * p * p]` tokens.
fn patch_index(cfg: &DenoiserConfig, batch: usize) -> Vec<usize> {
    let (c, p, hw) = (cfg.channels, cfg.patch_size, cfg.image_size);
    let g = cfg.grid(0);
    let mut idx = Vec::with_capacity(batch * c * hw * hw);
    for b in 0..batch {
        for gr in 0..g {
            for gc in 0..g {
                for ch in 0..c {
                    for pr in 0..p {
                        for pc in 0..p {
                            idx.push(b * c * hw * hw + ch * hw * hw + (gr * p + pr) * hw + gc * p + pc);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of a gather index.
fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Gather index merging 2x2 token neighbourhoods of a `g x g` grid:
/// `[B * g^2, d]` to `[B * g^2 / 4, 4d]`.
fn merge_index(batch: usize, g: usize, d: usize) -> Vec<usize> {
    let h = g / 2;
    let mut idx = Vec::with_capacity(batch * g * g * d);
    for b in 0..batch {
        for r in 0..h {
            for c in 0..h {
                for dr in 0..2 {
                    for dc in 0..2 {
                        let row = b * g * g + (2 * r + dr) * g + 2 * c + dc;
                        idx.extend((0..d).map(|k| row * d + k));
                    }
                }
            }
        }
    }
    idx
}

fn spans_per_item(batch: usize, rows: usize) -> Vec<GroupSpan> {
    (0..batch)
        .map(|b| GroupSpan {
            queries: b * rows..(b + 1) * rows,
            keys: b * rows..(b + 1) * rows,
        })
        .collect()
}

/// The denoiser (or extractor) bound for one pass, plus optional fusion
/// weights.
pub struct Network<'a, S: Scalar> {
    pub cfg: &'a DenoiserConfig,
    pub weights: &'a Bound<S>,
    pub fusion: Option<&'a Bound<S>>,
}

impl<'a, S: Scalar> Network<'a, S> {
    pub fn new(cfg: &'a DenoiserConfig, weights: &'a Bound<S>, fusion: Option<&'a Bound<S>>) -> Self {
        Network { cfg, weights, fusion }
    }

    fn w(&self, name: &str) -> Result<&Tensor<S>> {
        self.weights.get(name)
    }

    fn bw(&self, block: usize, leaf: &str) -> Result<&Tensor<S>> {
        self.weights.get(&block_key(block, leaf))
    }

    fn text_rows(&self, ctx: &Ctx<'_, S>, conds: &[Conditioning]) -> Result<(Tensor<S>, Vec<Range<usize>>)> {
        let mut ids = Vec::new();
        let mut ranges = Vec::with_capacity(conds.len());
        for c in conds {
            let start = ids.len();
            match &c.tokens {
                Some(tokens) if !tokens.is_empty() => {
                    if tokens.len() > self.cfg.max_tokens {
                        return Err(Error::Contract(format!(
                            "{} tokens exceed max_tokens {}",
                            tokens.len(),
                            self.cfg.max_tokens
                        )));
                    }
                    if let Some(bad) = tokens.iter().find(|t| **t >= self.cfg.text_vocab_size) {
                        return Err(Error::Contract(format!(
                            "token id {bad} outside vocabulary of {}",
                            self.cfg.text_vocab_size
                        )));
                    }
                    ids.extend_from_slice(tokens);
                }
                _ => ids.push(NULL_TOKEN),
            }
            ranges.push(start..ids.len());
        }
        Ok((ctx.gather_rows(self.w("text.embed")?, &ids)?, ranges))
    }

    /// Runs the network on `z` (`[B, C, H, W]`) at per-item steps `t`.
    pub fn forward(
        &self,
        ctx: &Ctx<'_, S>,
        z: &Tensor<S>,
        t: &[usize],
        conds: &[Conditioning],
        features: Option<&GarmentFeatures<S>>,
        opts: ForwardOptions,
    ) -> Result<ForwardTrace<S>> {
        let cfg = self.cfg;
        let [c, h, w] = cfg.image_shape();
        let batch = t.len();
        if z.shape() != [batch, c, h, w] || conds.len() != batch {
            return Err(Error::dim("forward", z.shape(), &[batch, c, h, w]));
        }
        let blocks = cfg.blocks();
        if let Some(f) = features {
            if f.blocks.len() != blocks.len() {
                return Err(Error::Architecture(format!(
                    "garment features cover {} blocks, network has {}",
                    f.blocks.len(),
                    blocks.len()
                )));
            }
            for (fb, info) in f.blocks.iter().zip(&blocks) {
                if fb.shape() != [f.count * info.tokens, cfg.model_dim] {
                    return Err(Error::Architecture(format!(
                        "block {} features have shape {:?}, expected [{}, {}]",
                        info.index,
                        fb.shape(),
                        f.count * info.tokens,
                        cfg.model_dim
                    )));
                }
            }
            if self.fusion.is_none() {
                return Err(Error::Contract("garment features given without fusion weights".into()));
            }
        }
        for cnd in conds {
            match (cnd.garment, features) {
                (Some(g), Some(f)) if g < f.count => {}
                (Some(g), _) => {
                    return Err(Error::Contract(format!("item refers to missing garment {g}")));
                }
                (None, _) => {}
            }
        }

        let d = cfg.model_dim;
        let n0 = cfg.tokens_at(0);
        let pidx = patch_index(cfg, batch);
        let tokens = ctx.gather(z, Arc::new(pidx), &[batch * n0, cfg.patch_features()])?;
        let mut x = ctx.linear(&tokens, self.w("patch.w")?, Some(self.w("patch.b")?))?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..n0 * d).collect();
        let pos = ctx.gather(self.w("pos")?, Arc::new(pos_idx), &[batch * n0, d])?;
        x = ctx.add(&x, &pos)?;

        let temb = timestep_embedding::<S>(t, cfg.time_dim);
        let temb = ctx.silu(&ctx.linear(&temb, self.w("time.w1")?, Some(self.w("time.b1")?))?);
        let temb = ctx.silu(&ctx.linear(&temb, self.w("time.w2")?, Some(self.w("time.b2")?))?);

        let (text, text_ranges) = self.text_rows(ctx, conds)?;

        let mut trace = ForwardTrace {
            eps: None,
            alphas: Vec::with_capacity(blocks.len()),
            block_outputs: Vec::with_capacity(blocks.len()),
        };
        let mut skips: Vec<Tensor<S>> = Vec::new();
        let mut level = 0;
        for info in &blocks {
            // level transitions
            if info.path == Path::Down && info.level != level {
                skips.push(x.clone());
                let g = cfg.grid(level);
                let merged = ctx.gather(&x, Arc::new(merge_index(batch, g, d)), &[batch * g * g / 4, 4 * d])?;
                let key = format!("merge.{level:02}");
                x = ctx.linear(
                    &merged,
                    self.w(&format!("{key}.w"))?,
                    Some(self.w(&format!("{key}.b"))?),
                )?;
                level = info.level;
            } else if info.path == Path::Up && info.level != level {
                let key = format!("split.{:02}", info.level);
                let wide = ctx.linear(&x, self.w(&format!("{key}.w"))?, Some(self.w(&format!("{key}.b"))?))?;
                let g = cfg.grid(info.level);
                let back = invert(&merge_index(batch, g, d));
                let split = ctx.gather(&wide, Arc::new(back), &[batch * g * g, d])?;
                let skip = skips.pop().ok_or_else(|| Error::Architecture("missing skip".into()))?;
                x = ctx.add(&split, &skip)?;
                level = info.level;
            }

            let i = info.index;
            let n = info.tokens;
            let tb = ctx.linear(&temb, self.bw(i, "time.w")?, Some(self.bw(i, "time.b")?))?;
            x = ctx.add_group_rows(&x, &tb, n)?;

            let alpha = ctx.layer_norm(&x, self.bw(i, "ln1.g")?, self.bw(i, "ln1.b")?, 1e-5)?;
            trace.alphas.push(alpha.clone());
            if opts.stop_after_alpha == Some(i) {
                return Ok(trace);
            }

            let garment_spans: Vec<GroupSpan> = match features {
                Some(_) => conds
                    .iter()
                    .enumerate()
                    .map(|(b, cnd)| GroupSpan {
                        queries: b * n..(b + 1) * n,
                        keys: match cnd.garment {
                            Some(g) => g * n..(g + 1) * n,
                            None => 0..0,
                        },
                    })
                    .collect(),
                None => Vec::new(),
            };
            let garment = match (features, self.fusion) {
                (Some(f), Some(fusion)) => Some((
                    f,
                    (fusion.get(&fusion_key(i, "w_kg"))?, fusion.get(&fusion_key(i, "w_vg"))?),
                )),
                _ => None,
            };
            let weights = AttentionWeights {
                w_q: self.bw(i, "attn.w_q")?,
                w_k: self.bw(i, "attn.w_k")?,
                w_v: self.bw(i, "attn.w_v")?,
                w_kg: garment.map(|(_, w)| w.0),
                w_vg: garment.map(|(_, w)| w.1),
            };
            let keys = garment.map(|(f, _)| GarmentKeys {
                beta: &f.blocks[i],
                spans: &garment_spans,
            });
            let attn = fused_attention_core(ctx, &alpha, &spans_per_item(batch, n), keys, &weights, cfg.heads)?;
            let attn = ctx.linear(&attn, self.bw(i, "attn.w_o")?, Some(self.bw(i, "attn.b_o")?))?;
            x = ctx.add(&x, &attn)?;

            let hn = ctx.layer_norm(&x, self.bw(i, "ln2.g")?, self.bw(i, "ln2.b")?, 1e-5)?;
            let q = ctx.matmul(&hn, self.bw(i, "cross.w_q")?)?;
            let k = ctx.matmul(&text, self.bw(i, "cross.w_k")?)?;
            let v = ctx.matmul(&text, self.bw(i, "cross.w_v")?)?;
            let cross_spans: Vec<GroupSpan> = text_ranges
                .iter()
                .enumerate()
                .map(|(b, r)| GroupSpan {
                    queries: b * n..(b + 1) * n,
                    keys: r.clone(),
                })
                .collect();
            let cross = ctx.attention(&q, &k, &v, cfg.heads, &cross_spans)?;
            let cross = ctx.linear(&cross, self.bw(i, "cross.w_o")?, Some(self.bw(i, "cross.b_o")?))?;
            x = ctx.add(&x, &cross)?;

            let hn = ctx.layer_norm(&x, self.bw(i, "ln3.g")?, self.bw(i, "ln3.b")?, 1e-5)?;
            let f = ctx.gelu(&ctx.linear(&hn, self.bw(i, "ffn.w1")?, Some(self.bw(i, "ffn.b1")?))?);
            let f = ctx.linear(&f, self.bw(i, "ffn.w2")?, Some(self.bw(i, "ffn.b2")?))?;
            x = ctx.add(&x, &f)?;
            trace.block_outputs.push(x.clone());
        }

        let hn = ctx.layer_norm(&x, self.w("head.ln.g")?, self.w("head.ln.b")?, 1e-5)?;
        let out = ctx.linear(&hn, self.w("head.w")?, Some(self.w("head.b")?))?;
        let unpatch = invert(&patch_index(cfg, batch));
        trace.eps = Some(ctx.gather(&out, Arc::new(unpatch), &[batch, c, h, w])?);
        Ok(trace)
    }

    /// Noise prediction only.
    pub fn predict(
        &self,
        ctx: &Ctx<'_, S>,
        z: &Tensor<S>,
        t: &[usize],
        conds: &[Conditioning],
        features: Option<&GarmentFeatures<S>>,
    ) -> Result<Tensor<S>> {
        let trace = self.forward(ctx, z, t, conds, features, ForwardOptions::default())?;
        Ok(trace.eps.expect("full pass"))
    }

    /// Runs this network as the garment extractor on clean garment images
    /// (`[G, C, H, W]`) at step 0 with the null caption, stopping after the
    /// last self-attention input has been captured.
    pub fn extract(&self, ctx: &Ctx<'_, S>, garments: &Tensor<S>) -> Result<GarmentFeatures<S>> {
        let [c, h, w] = self.cfg.image_shape();
        if garments.shape().len() != 4 || garments.shape()[1..] != [c, h, w] {
            return Err(Error::dim("extract", garments.shape(), &[0, c, h, w]));
        }
        let count = garments.shape()[0];
        let last = self.cfg.block_count() - 1;
        let trace = self.forward(
            ctx,
            garments,
            &vec![0; count],
            &vec![Conditioning::null(); count],
            None,
            ForwardOptions {
                stop_after_alpha: Some(last),
            },
        )?;
        Ok(GarmentFeatures {
            blocks: trace.alphas,
            count,
        })
    }
}
