//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Criteria 8-10 share one training run of the toy preset. Its checkpoint is
//! cached under the test scratch directory, keyed by the config text; set
//! `WEAVE_RETRAIN=1` to ignore the cache. `WEAVE_CRITERIA=1,3` runs a subset.
//!
//! The target reports and exits 0 so that `cargo test` goes on to the other
//! targets; `WEAVE_STRICT=1` makes any failing criterion exit 1.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use weave_cli::config::RunConfig;
use weave_cli::experiment::{self, Checkpoint, EvalItem};
use weave_core::data::{make_dataset, render_character};
use weave_core::guidance::{
    cfg_independent, cfg_independent_as_printed, cfg_joint, cfg_single, sample_condition_mask, ConditionPair,
    DropPolicy, GuidanceScales,
};
use weave_core::image::Mask;
use weave_core::metric::{
    match_points, mp_lpips, mp_lpips_with_features, FeatureExtractor, FeatureMap, MaskedL2, Point,
};
use weave_core::model::{
    fused_self_attention, fusion_loss, init_denoiser, init_extractor_from_denoiser, Conditioning, Network, PairedBatch,
    StepDraw,
};
use weave_core::{Ctx, ParameterStore, Scalar, SeededRng, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn toy() -> RunConfig {
    RunConfig::toy()
}

fn jitter<S: Scalar>(store: &mut ParameterStore<S>, rng: &mut SeededRng, std: f64) {
    for (_, p) in store.iter_mut() {
        let noise: Tensor<S> = rng.normal_tensor_scaled(p.value.shape(), std);
        let v = p.value.data().iter().zip(noise.data()).map(|(a, b)| *a + *b).collect();
        p.value = Tensor::from_vec(p.value.shape(), v).unwrap();
    }
}

// ---------------------------------------------------------------- 1

fn fusion_no_op() -> Result<Verdict> {
    let cfg = toy().model;
    let mut rng = SeededRng::new(101);
    let mut den = init_denoiser::<f32>(&cfg, &mut rng)?;
    // the output head starts at zero, which would make the comparison vacuous
    jitter(&mut den, &mut rng, 0.05);
    let (ext, fus) = init_extractor_from_denoiser(&cfg, &den)?;
    let (db, eb, fb) = (den.bind_frozen(), ext.bind_frozen(), fus.bind_frozen());
    let ctx = Ctx::inference();
    let n = 4;
    let garments: Tensor<f32> = rng.normal_tensor(&[n, 3, 32, 32]);
    let feats = Network::new(&cfg, &eb, None).extract(&ctx, &garments)?;
    let z: Tensor<f32> = rng.normal_tensor(&[n, 3, 32, 32]);
    let with: Vec<Conditioning> = (0..n)
        .map(|i| Conditioning {
            tokens: (i % 2 == 0).then(|| vec![1 + i, 5, 9, 12]),
            garment: Some(i),
        })
        .collect();
    let without: Vec<Conditioning> = with
        .iter()
        .map(|c| Conditioning {
            garment: None,
            ..c.clone()
        })
        .collect();
    let steps = [1, 50, 120, 199];
    let net = Network::new(&cfg, &db, Some(&fb));
    let a = net.predict(&ctx, &z, &steps, &with, Some(&feats))?;
    let b = net.predict(&ctx, &z, &steps, &without, None)?;
    let diff = a.max_abs_diff(&b)?;
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    verdict(
        diff < 1e-6 && scale > 1e-3,
        format!("max |with - without| = {diff:.1e} (limit 1e-6), output scale {scale:.3}"),
    )
}

// ---------------------------------------------------------------- 2

/// Row-major `[rows x d] * [d x d]`.
fn project(x: &[f64], rows: usize, w: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| x[i * d + k] * w[k * d + j]).sum();
        }
    }
    out
}

/// Per-head softmax attention of `q` rows over `k`/`v` rows.
fn dense_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| cols.clone().map(|e| q[i * d + e] * k[j * d + e]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for e in cols.clone() {
                out[i * d + e] = (0..m).map(|j| weights[j] * v[j * d + e]).sum::<f64>() / total;
            }
        }
    }
    out
}

fn fused_attention_oracle() -> Result<Verdict> {
    let mut rng = SeededRng::new(202);
    let ctx = Ctx::<f64>::inference();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let heads = 1 + rng.below(4);
        let lo = 4usize.div_ceil(heads);
        let hd = lo + rng.below(32 / heads - lo + 1);
        let d = heads * hd;
        let n = 2 + rng.below(7);
        let m = 1 + rng.below(8);
        let alpha: Tensor<f64> = rng.normal_tensor(&[n, d]);
        let beta: Tensor<f64> = rng.normal_tensor(&[m, d]);
        let w: Vec<Tensor<f64>> = (0..5)
            .map(|_| rng.normal_tensor_scaled(&[d, d], 1.0 / (d as f64).sqrt()))
            .collect();
        let got = fused_self_attention(&ctx, &alpha, &beta, &w[0], &w[1], &w[2], &w[3], &w[4], heads)?;
        let (a, b) = (alpha.to_vec(), beta.to_vec());
        let wv: Vec<Vec<f64>> = w.iter().map(Tensor::to_vec).collect();
        let q = project(&a, n, &wv[0], d);
        let plain = dense_attention(
            &q,
            &project(&a, n, &wv[1], d),
            &project(&a, n, &wv[2], d),
            n,
            n,
            d,
            heads,
        );
        let extra = dense_attention(
            &q,
            &project(&b, m, &wv[3], d),
            &project(&b, m, &wv[4], d),
            n,
            m,
            d,
            heads,
        );
        for (i, g) in got.data().iter().enumerate() {
            worst = worst.max((g - (plain[i] + extra[i])).abs());
        }
    }
    verdict(
        worst < 1e-5,
        format!("100 random cases, max abs error {worst:.1e} (limit 1e-5)"),
    )
}

// ---------------------------------------------------------------- 3

fn guidance_identities() -> Result<Verdict> {
    let mut rng = SeededRng::new(303);
    let mut worst: f64 = 0.0;
    let mut track = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<()> {
        worst = worst.max(a.max_abs_diff(b)?);
        Ok(())
    };
    let shape = [2, 3, 8, 8];
    for _ in 0..20 {
        let e: Vec<Tensor<f64>> = (0..4).map(|_| rng.normal_tensor(&shape)).collect();
        let (e00, e0t, eg0, egt) = (&e[0], &e[1], &e[2], &e[3]);
        let one = GuidanceScales::new(1.0, 1.0)?;
        let zero = GuidanceScales::new(0.0, 0.0)?;
        track(&cfg_single(e00, egt, 1.0)?, egt)?;
        track(&cfg_single(e00, egt, 0.0)?, e00)?;
        track(&cfg_joint(e00, eg0, egt, one)?, egt)?;
        track(&cfg_joint(e00, eg0, egt, zero)?, e00)?;
        let sum: Vec<f64> = (0..e00.len())
            .map(|i| e0t.data()[i] + eg0.data()[i] - e00.data()[i])
            .collect();
        let sum = Tensor::from_vec(&shape, sum)?;
        track(&cfg_independent(e00, e0t, eg0, one)?, &sum)?;
        track(&cfg_independent(e00, e0t, eg0, zero)?, e00)?;
        track(&cfg_independent_as_printed(e00, e0t, eg0, one)?, &sum)?;

        // conditionally additive: eGT - eG0 == e0T - e00
        let a: Tensor<f64> = rng.normal_tensor(&shape);
        let b: Tensor<f64> = rng.normal_tensor(&shape);
        let add = |x: &Tensor<f64>, y: &Tensor<f64>| {
            Tensor::from_vec(&shape, x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect()).unwrap()
        };
        let (g0, t0) = (add(e00, &a), add(e00, &b));
        let gt = add(&g0, &b);
        for scales in [
            GuidanceScales::default(),
            GuidanceScales::new(rng.uniform() * 10.0, rng.uniform() * 10.0)?,
        ] {
            track(
                &cfg_joint(e00, &g0, &gt, scales)?,
                &cfg_independent(e00, &t0, &g0, scales)?,
            )?;
        }
    }
    let s = |v: f64| Tensor::<f64>::scalar(v);
    let ex_ind = cfg_independent(&s(0.0), &s(1.0), &s(2.0), GuidanceScales::default())?.item()?;
    let ex_joint = cfg_joint(&s(0.0), &s(1.0), &s(2.0), GuidanceScales::default())?.item()?;
    let ex_single = cfg_single(&s(0.0), &s(1.0), 7.5)?.item()?;
    let examples = ex_ind == 12.5 && ex_joint == 10.0 && ex_single == 7.5;
    verdict(
        worst < 1e-6 && examples,
        format!(
            "telescoping and additive-quadruple max error {worst:.1e} (limit 1e-6); \
             scalar examples independent {ex_ind}, joint {ex_joint}, single {ex_single}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn dropout_statistics() -> Result<Verdict> {
    let policy = DropPolicy::default();
    let mut rng = SeededRng::new(404);
    let n = 100_000;
    let states = [
        ConditionPair::new(false, true),
        ConditionPair::new(true, false),
        ConditionPair::new(false, false),
        ConditionPair::FULL,
    ];
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let c = sample_condition_mask(&mut rng, &policy);
        counts[states.iter().position(|s| *s == c).unwrap()] += 1;
    }
    let expect = [0.05, 0.05, 0.05, 0.85];
    let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
    let in_band = freq[..3].iter().all(|f| (f - 0.05).abs() <= 0.005);
    let chi2: f64 = counts
        .iter()
        .zip(expect)
        .map(|(c, p)| {
            let e = p * n as f64;
            (*c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(3.0)?.cdf(chi2);
    verdict(
        in_band && p_value > 0.001,
        format!(
            "drop frequencies {:.4}/{:.4}/{:.4} (0.05 +- 0.005), chi2 {chi2:.2}, p = {p_value:.3} (reject below 0.001)",
            freq[0], freq[1], freq[2]
        ),
    )
}

// ---------------------------------------------------------------- 5

fn gradient_check() -> Result<Verdict> {
    let cfg = toy();
    let model = &cfg.model;
    let sched = cfg.noise_schedule()?;
    let mut rng = SeededRng::new(505);
    let mut den = init_denoiser::<f64>(model, &mut rng)?;
    jitter(&mut den, &mut rng, 0.05);
    let (mut ext, mut fus) = init_extractor_from_denoiser(model, &den)?;
    // away from W_VG = 0, where the extractor and W_KG receive no gradient
    jitter(&mut ext, &mut rng, 0.02);
    jitter(&mut fus, &mut rng, 0.05);
    let data = make_dataset(2, 7, model.image_size)?;
    let stack = |f: &dyn Fn(usize) -> Tensor<f32>| -> Result<Tensor<f64>> {
        let parts: Vec<Tensor<f32>> = (0..2).map(f).collect();
        Ok(Tensor::stack_outer(&parts)?.cast())
    };
    let [c, h, w] = model.image_shape();
    let batch = PairedBatch::<f64> {
        garments: stack(&|i| data[i].garment.to_tensor().reshape(&[1, c, h, w]).unwrap())?,
        characters: stack(&|i| data[i].character.to_tensor().reshape(&[1, c, h, w]).unwrap())?,
        tokens: data.iter().map(|s| s.tokens.clone()).collect(),
    };
    let mut draw = StepDraw::<f64>::sample(model, &sched, 2, &DropPolicy::NEVER, &mut rng);
    draw.conditions[1] = ConditionPair::new(true, false);
    let frozen = den.bind_frozen();
    let loss_of = |e: &ParameterStore<f64>, f: &ParameterStore<f64>| -> Result<f64> {
        let (eb, fb) = (e.bind_frozen(), f.bind_frozen());
        Ok(fusion_loss(&Ctx::inference(), model, &sched, &frozen, &eb, &fb, &batch, &draw)?.item()?)
    };
    let tape = Tape::new();
    let ctx = Ctx::recording(&tape);
    let (eb, fb) = (ext.bind(&ctx), fus.bind(&ctx));
    let loss = fusion_loss(&ctx, model, &sched, &frozen, &eb, &fb, &batch, &draw)?;
    weave_core::tensor::backward(&loss, &tape, &mut ext)?;
    weave_core::tensor::backward(&loss, &tape, &mut fus)?;

    let h = 1e-3;
    let (mut groups, mut scalars, mut worst, mut worst_name) = (0, 0, 0.0f64, String::new());
    for which in 0..2 {
        let store = if which == 0 { &ext } else { &fus };
        for (name, p) in store.iter() {
            groups += 1;
            let scale = p.grad.iter().fold(1e-8f64, |a, g| a.max(g.abs()));
            let len = p.value.len();
            let top = (0..len)
                .max_by(|&a, &b| p.grad[a].abs().total_cmp(&p.grad[b].abs()))
                .unwrap();
            let mut picks: Vec<usize> = (0..len).step_by(len.div_ceil(3)).collect();
            picks.push(top);
            for j in picks {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = p.value.to_vec();
                    v[j] += delta;
                    let (mut e2, mut f2) = (ext.clone(), fus.clone());
                    let target = if which == 0 { &mut e2 } else { &mut f2 };
                    target.set(name, Tensor::from_vec(p.value.shape(), v)?)?;
                    loss_of(&e2, &f2)
                };
                let numeric = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h);
                let err = (numeric - p.grad[j]).abs() / scale;
                scalars += 1;
                if err > worst {
                    worst = err;
                    worst_name = format!("{}/{name}", store.tag());
                }
            }
        }
    }

    // frozen denoiser across 100 real training steps
    let mut short = toy();
    short.train.steps = 100;
    let base = init_denoiser::<f32>(&short.model, &mut SeededRng::new(506))?;
    let before = base.to_checkpoint_bytes();
    let (e1, _) = experiment::train_plugin(&short, &base, |_, _, _| {})?;
    let untouched = base.to_checkpoint_bytes() == before;
    let (e0, _) = init_extractor_from_denoiser(&short.model, &base)?;
    let moved = e1.to_checkpoint_bytes() != e0.to_checkpoint_bytes();

    verdict(
        worst < 1e-4 && untouched && moved,
        format!(
            "{groups} parameter groups, {scalars} scalars, worst relative error {worst:.1e} at {worst_name} \
             (limit 1e-4); denoiser bytes unchanged after 100 steps: {untouched}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn brute_force_match(fg: &FeatureMap, fc: &FeatureMap, p: Point) -> Point {
    let g = fg.vector(p.0, p.1);
    let ng = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for r in 0..fc.height {
        for c in 0..fc.width {
            let v = fc.vector(r, c);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if ng == 0.0 || nv == 0.0 {
                -1.0
            } else {
                g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (ng * nv)
            };
            if cos > best.0 {
                best = (cos, (r, c));
            }
        }
    }
    best.1
}

fn matching_oracle() -> Result<Verdict> {
    let mut rng = SeededRng::new(606);
    let (size, ch) = (16, 6);
    let mut total = 0;
    let mut tied = 0;
    for case in 0..20 {
        let gaussian =
            |rng: &mut SeededRng| -> Vec<f64> { (0..ch).map(|_| rng.normal_tensor::<f64>(&[1]).data()[0]).collect() };
        // character vectors come from a small codebook so exact ties are common
        let book: Vec<Vec<f64>> = (0..10)
            .map(|k| if k == 0 { vec![0.0; ch] } else { gaussian(&mut rng) })
            .collect();
        let mut fc = vec![0.0; ch * size * size];
        let mut fg = vec![0.0; ch * size * size];
        for p in 0..size * size {
            let v = &book[rng.below(book.len())];
            let u = if case % 4 == 0 && p % 17 == 0 {
                vec![0.0; ch]
            } else {
                gaussian(&mut rng)
            };
            for k in 0..ch {
                fc[k * size * size + p] = v[k];
                fg[k * size * size + p] = u[k];
            }
        }
        let fg = FeatureMap::new(ch, size, size, fg)?;
        let fc = FeatureMap::new(ch, size, size, fc)?;
        let points: Vec<Point> = (0..size).flat_map(|r| (0..size).map(move |c| (r, c))).collect();
        let got = match_points(&fg, &fc, &points)?;
        for (p, m) in points.iter().zip(&got) {
            total += 1;
            let want = brute_force_match(&fg, &fc, *p);
            ensure!(
                *m == want,
                "pair {case}, point {p:?}: matched {m:?}, brute force {want:?}"
            );
            if fc.vector(want.0, want.1) != vec![0.0; ch] {
                let same = points
                    .iter()
                    .filter(|q| fc.vector(q.0, q.1) == fc.vector(want.0, want.1))
                    .count();
                tied += usize::from(same > 1);
            }
        }
    }
    verdict(
        true,
        format!(
            "20 pairs of 16x16 maps, {total} points equal to the brute-force scan ({tied} resolved among exact ties)"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn random_features(rng: &mut SeededRng, ch: usize, size: usize) -> Result<FeatureMap> {
    Ok(FeatureMap::new(
        ch,
        size,
        size,
        rng.normal_tensor::<f64>(&[ch * size * size]).to_vec(),
    )?)
}

fn metric_structure() -> Result<Verdict> {
    let cfg = toy();
    let mc = cfg.match_config();
    let sched = cfg.noise_schedule()?;
    let size = cfg.model.image_size;
    let data = make_dataset(6, 17, size)?;
    let mut rng = SeededRng::new(707);
    let den = init_denoiser::<f32>(&cfg.model, &mut rng)?;
    let extractor = FeatureExtractor {
        cfg: &cfg.model,
        sched: &sched,
        denoiser: &den,
        seed: 0,
    };

    // identity pair, with diffusion features and with generic random ones
    let s = &data[0];
    let g = s.garment.to_tensor();
    let id_diffusion = mp_lpips(&g, &s.garment_mask, &g, &s.garment_mask, &mc, &extractor)?.mean;
    let f = random_features(&mut rng, 8, size)?;
    let id_random = mp_lpips_with_features(&g, &s.garment_mask, &g, &s.garment_mask, &f, &f, &mc, &MaskedL2)?.mean;

    // every match lands far outside a one-pixel character region
    let mut corner = Mask::new(size, size);
    corner.set(size - 1, size - 1, true);
    let mut data0 = vec![0.0; 8 * size * size];
    data0[0] = 1.0;
    let fc = FeatureMap::new(8, size, size, data0)?;
    let c = s.character.to_tensor();
    let all_off = mp_lpips_with_features(&g, &s.garment_mask, &c, &corner, &f, &fc, &mc, &MaskedL2)?;
    let penalty_ok = all_off.mean == 0.6 && all_off.mismatched.iter().all(|m| *m);

    // mean against the row average, and locality, over real pairs
    let mut mean_err: f64 = 0.0;
    let mut local = true;
    for s in &data {
        let (g, c) = (s.garment.to_tensor(), s.character.to_tensor());
        let fg = extractor.features(&g, &mc)?;
        let fcm = extractor.features(&c, &mc)?;
        let rep = mp_lpips_with_features(&g, &s.garment_mask, &c, &s.character_mask, &fg, &fcm, &mc, &MaskedL2)?;
        let avg = rep.per_point.iter().sum::<f64>() / rep.per_point.len() as f64;
        mean_err = mean_err.max((avg - rep.mean).abs());
        // repaint every pixel outside both masks
        let (mut g2, mut c2) = (g.to_vec(), c.to_vec());
        let hw = size * size;
        for p in 0..hw {
            for k in 0..3 {
                if !s.garment_mask.data[p] {
                    g2[k * hw + p] = rng.uniform() as f32 * 2.0 - 1.0;
                }
                if !s.character_mask.data[p] {
                    c2[k * hw + p] = rng.uniform() as f32 * 2.0 - 1.0;
                }
            }
        }
        let (g2, c2) = (Tensor::from_vec(g.shape(), g2)?, Tensor::from_vec(c.shape(), c2)?);
        let rep2 = mp_lpips_with_features(&g2, &s.garment_mask, &c2, &s.character_mask, &fg, &fcm, &mc, &MaskedL2)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        local &= bits(&rep.per_point) == bits(&rep2.per_point);
    }
    verdict(
        id_diffusion == 0.0 && id_random == 0.0 && penalty_ok && mean_err < 1e-9 && local,
        format!(
            "identity {id_diffusion} (diffusion features) / {id_random} (random features); all-mismatch mean {} \
             over {} points; mean vs row average {mean_err:.1e}; locality bit-exact: {local}",
            all_off.mean,
            all_off.per_point.len()
        ),
    )
}

// ---------------------------------------------------------------- 8-10

struct Trained {
    cfg: RunConfig,
    dir: PathBuf,
    ckpt: Checkpoint,
    train_seconds: f64,
    cached: bool,
}

const TRAIN_SECONDS_FILE: &str = "train_seconds";

fn trained_toy(slot: &mut Option<Trained>) -> Result<&Trained> {
    if slot.is_none() {
        let cfg = toy();
        let text = cfg.to_text();
        let mut hasher = DefaultHasher::new();
        text.hash(&mut hasher);
        env!("CARGO_PKG_VERSION").hash(&mut hasher);
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-{:016x}", hasher.finish()));
        let retrain = std::env::var_os("WEAVE_RETRAIN").is_some();
        let recorded = fs::read_to_string(dir.join(TRAIN_SECONDS_FILE)).ok();
        let trained = match recorded {
            Some(secs) if !retrain => Trained {
                ckpt: Checkpoint::load(&dir, &cfg)?,
                train_seconds: secs.trim().parse()?,
                cfg,
                dir,
                cached: true,
            },
            _ => {
                println!("training the toy preset (both stages) ...");
                let start = Instant::now();
                let ckpt = experiment::train_to_dir(&cfg, &dir)?;
                let secs = start.elapsed().as_secs_f64();
                fs::write(dir.join(TRAIN_SECONDS_FILE), format!("{secs}\n"))?;
                Trained {
                    ckpt,
                    train_seconds: secs,
                    cfg,
                    dir,
                    cached: false,
                }
            }
        };
        *slot = Some(trained);
    }
    Ok(slot.as_ref().unwrap())
}

fn training_note(t: &Trained) -> String {
    format!(
        "toy training {:.0} s{} (limit 1800 s)",
        t.train_seconds,
        if t.cached { ", cached checkpoint" } else { "" }
    )
}

fn toy_reproduction(slot: &mut Option<Trained>) -> Result<Verdict> {
    let t = trained_toy(slot)?;
    let eval = make_dataset(50, t.cfg.data.eval_seed, t.cfg.model.image_size)?;
    let rows = experiment::garment_consistency(&t.cfg, &t.ckpt, &eval)?;
    let wins = rows.iter().filter(|r| r.own < r.other).count();
    let bg = rows.iter().filter(|r| r.background_ok).count();
    let (win_rate, bg_rate) = (wins as f64 / rows.len() as f64, bg as f64 / rows.len() as f64);
    // the same comparison on the true renders bounds what a sample can reach
    let mut truth_wins = 0;
    for (i, s) in eval.iter().enumerate() {
        let other = &eval[(i + 1) % eval.len()];
        let den = &t.ckpt.denoiser;
        let own = experiment::garment_distance(
            &t.cfg,
            den,
            &s.garment,
            &s.garment_mask,
            &s.character,
            &s.character_mask,
        )?;
        let (_, other_mask) = render_character(&s.character_spec, &other.garment_spec, t.cfg.model.image_size)?;
        let alt = experiment::garment_distance(
            &t.cfg,
            den,
            &other.garment,
            &other.garment_mask,
            &s.character,
            &other_mask,
        )?;
        truth_wins += usize::from(own.mean < alt.mean);
    }
    verdict(
        win_rate >= 0.8 && bg_rate >= 0.7 && t.train_seconds <= 1800.0,
        format!(
            "own garment closer in {wins}/{} pairs ({:.0}%, need 80%); background probe {bg}/{} ({:.0}%, need 70%); \
             ground-truth renders {truth_wins}/{}; S_T = {}, S_G = {}; {}",
            rows.len(),
            100.0 * win_rate,
            rows.len(),
            100.0 * bg_rate,
            eval.len(),
            t.cfg.scales.s_t,
            t.cfg.scales.s_g,
            training_note(t)
        ),
    )
}

fn ablation_direction(slot: &mut Option<Trained>) -> Result<Verdict> {
    let t = trained_toy(slot)?;
    let n = t.cfg.compare.n.max(50);
    let eval = make_dataset(n, t.cfg.data.eval_seed, t.cfg.model.image_size)?;
    let items: Vec<EvalItem> = eval.iter().map(EvalItem::from_sample).collect();
    let report = experiment::compare_cfg(&t.cfg, &t.ckpt, &items)?;
    verdict(
        report.mean_joint <= report.mean_independent,
        format!(
            "{n} seeds: mean MP-LPIPS joint {:.4}, independent {:.4} (full-scale reference {} vs {})",
            report.mean_joint, report.mean_independent, report.reference.joint, report.reference.independent
        ),
    )
}

fn sample_determinism(slot: &mut Option<Trained>) -> Result<Verdict> {
    let t = trained_toy(slot)?;
    let scratch = tempfile::tempdir()?;
    let cfg_path = scratch.path().join("toy.cfg");
    fs::write(&cfg_path, t.cfg.to_text())?;
    let s = make_dataset(1, t.cfg.data.eval_seed, t.cfg.model.image_size)?.remove(0);
    let garment = scratch.path().join("garment.ppm");
    s.garment.save(&garment)?;
    let tokens = s.tokens.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let run = |name: &str| -> Result<Vec<u8>> {
        let out = scratch.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_weave"))
            .args(["sample", "--config"])
            .arg(&cfg_path)
            .arg("--ckpt")
            .arg(&t.dir)
            .arg("--garment")
            .arg(&garment)
            .args(["--tokens", &tokens, "--seed", "4242", "--out"])
            .arg(&out)
            .status()?;
        ensure!(status.success(), "weave sample exited with {status}");
        Ok(fs::read(out)?)
    };
    let (a, b) = (run("a.ppm")?, run("b.ppm")?);
    verdict(
        a == b,
        format!(
            "two runs of `weave sample --seed 4242`: {} bytes each, identical: {}",
            a.len(),
            a == b
        ),
    )
}

// ----------------------------------------------------------------

type Check = fn(&mut Option<Trained>) -> Result<Verdict>;

fn main() {
    let criteria: [(u32, &str, Option<u64>, Check); 10] = [
        (1, "fusion no-op identity", Some(1), |_| fusion_no_op()),
        (2, "fused attention oracle", Some(5), |_| fused_attention_oracle()),
        (3, "guidance identities", Some(1), |_| guidance_identities()),
        (4, "dropout statistics", Some(5), |_| dropout_statistics()),
        (5, "gradient check and frozen denoiser", Some(300), |_| gradient_check()),
        (6, "matching oracle", Some(10), |_| matching_oracle()),
        (7, "metric structure", Some(30), |_| metric_structure()),
        (8, "toy garment consistency", None, toy_reproduction),
        (9, "joint vs independent guidance", None, ablation_direction),
        (10, "sample determinism", Some(60), sample_determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("WEAVE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut trained = None;
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, limit, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = check(&mut trained);
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed < Duration::from_secs(l));
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass && in_time, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let budget = limit.map(|l| format!(", limit {l} s")).unwrap_or_default();
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {ran} criteria pass");
    } else {
        println!("acceptance: {} of {ran} criteria fail: {failed:?}", failed.len());
        if std::env::var_os("WEAVE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
