use std::ops::Range;
use std::sync::Arc;

use super::{gemm, Ctx, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// One attention problem inside a batched [`Ctx::attention`] call: the query
/// rows attend over the key/value rows. Key ranges may be shared between
/// groups; an empty key range yields a zero output for its queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpan {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    let inv = S::one() / total;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let one = S::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let th = u.tanh();
    let y = half * x * (one + th);
    let du = c * (one + S::lit(3.0) * k * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

impl<'t, S: Scalar> Ctx<'t, S> {
    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::dense(a.data(), 0, m, k),
            MatRef::dense(b.data(), 0, k, n),
            S::zero(),
            MatMut::dense(&mut out, 0, m, n),
        );
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(vec![m, n], out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![S::zero(); m * k];
                gemm(
                    S::one(),
                    MatRef::dense(g, 0, m, n),
                    MatRef::dense(&bd, 0, k, n).t(),
                    S::zero(),
                    MatMut::dense(&mut ga, 0, m, k),
                );
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![S::zero(); k * n];
                gemm(
                    S::one(),
                    MatRef::dense(&ad, 0, m, k).t(),
                    MatRef::dense(g, 0, m, n),
                    S::zero(),
                    MatMut::dense(&mut gb, 0, k, n),
                );
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `x . w + b` with `b` broadcast over rows.
    pub fn linear(&self, x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(&y, b),
            None => Ok(y),
        }
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        Ok(self.record(a.shape().to_vec(), out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        Ok(self.record(a.shape().to_vec(), out, &[a, b], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -*v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bd.iter()).map(|(g, b)| *g * *b).collect()),
                needs[1].then(|| g.iter().zip(ad.iter()).map(|(g, a)| *g * *a).collect()),
            ]
        }))
    }

    pub fn scale(&self, a: &Tensor<S>, s: S) -> Tensor<S> {
        let out = a.data().iter().map(|x| *x * s).collect();
        self.record(a.shape().to_vec(), out, &[a], move |g, _| {
            vec![Some(g.iter().map(|v| *v * s).collect())]
        })
    }

    /// Adds the vector `v` (length = columns) to every row of `x`.
    pub fn add_row(&self, x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let (r, c) = x.dims2("add_row")?;
        if v.len() != c {
            return Err(Error::dim("add_row", x.shape(), v.shape()));
        }
        let vd = v.data();
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(vd).for_each(|(a, b)| *a = *a + *b);
        }
        Ok(self.record(vec![r, c], out, &[x, v], move |g, needs| {
            let gv = needs[1].then(|| {
                let mut acc = vec![S::zero(); c];
                for row in g.chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gv]
        }))
    }

    /// Adds row `g` of `v` (`[groups x c]`) to each of the `rows_per_group`
    /// consecutive rows of group `g` in `x`.
    pub fn add_group_rows(&self, x: &Tensor<S>, v: &Tensor<S>, rows_per_group: usize) -> Result<Tensor<S>> {
        let (r, c) = x.dims2("add_group_rows")?;
        let (groups, c2) = v.dims2("add_group_rows")?;
        if c != c2 || groups * rows_per_group != r {
            return Err(Error::dim("add_group_rows", x.shape(), v.shape()));
        }
        let vd = v.data();
        let mut out = x.to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let src = &vd[(i / rows_per_group) * c..][..c];
            row.iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b);
        }
        Ok(self.record(vec![r, c], out, &[x, v], move |g, needs| {
            let gv = needs[1].then(|| {
                let mut acc = vec![S::zero(); groups * c];
                for (i, row) in g.chunks_exact(c).enumerate() {
                    let dst = &mut acc[(i / rows_per_group) * c..][..c];
                    dst.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), gv]
        }))
    }

    pub fn gelu(&self, x: &Tensor<S>) -> Tensor<S> {
        let (out, deriv): (Vec<S>, Vec<S>) = x.data().iter().map(|v| gelu_parts(*v)).unzip();
        self.record(x.shape().to_vec(), out, &[x], move |g, _| {
            vec![Some(g.iter().zip(&deriv).map(|(g, d)| *g * *d).collect())]
        })
    }

    pub fn silu(&self, x: &Tensor<S>) -> Tensor<S> {
        let one = S::one();
        let sig: Vec<S> = x.data().iter().map(|v| one / (one + (-*v).exp())).collect();
        let out = x.data().iter().zip(&sig).map(|(v, s)| *v * *s).collect();
        let xd = x.data_arc();
        self.record(x.shape().to_vec(), out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(sig.iter().zip(xd.iter()))
                    .map(|(g, (s, v))| *g * *s * (one + *v * (one - *s)))
                    .collect(),
            )]
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (r, c) = x.dims2("softmax_rows")?;
        let mut out = x.to_vec();
        if c > 0 {
            out.chunks_exact_mut(c).for_each(softmax_in_place);
        }
        let y = Arc::new(out.clone());
        Ok(self.record(vec![r, c], out, &[x], move |g, _| {
            let mut gx = vec![S::zero(); r * c];
            for i in 0..r {
                let (yr, gr) = (&y[i * c..][..c], &g[i * c..][..c]);
                let dot: S = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                for j in 0..c {
                    gx[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let (r, c) = x.dims2("layer_norm")?;
        if gain.len() != c || bias.len() != c {
            return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
        }
        let eps = S::lit(eps);
        let inv_c = S::one() / S::lit(c as f64);
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        for i in 0..r {
            let row = &x.data()[i * c..][..c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let (gd, bd) = (gain.data(), bias.data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(idx, xh)| *xh * gd[idx % c] + bd[idx % c])
            .collect();
        let gain_arc = gain.data_arc();
        Ok(self.record(vec![r, c], out, &[x, gain, bias], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![S::zero(); r * c];
                for i in 0..r {
                    let gr = &g[i * c..][..c];
                    let xr = &xhat[i * c..][..c];
                    let dxhat: Vec<S> = gr.iter().zip(gain_arc.iter()).map(|(a, b)| *a * *b).collect();
                    let m1 = dxhat.iter().copied().sum::<S>() * inv_c;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| *a * *b).sum::<S>() * inv_c;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
                gx
            });
            let gg = needs[1].then(|| {
                let mut acc = vec![S::zero(); c];
                for (idx, (gv, xh)) in g.iter().zip(&xhat).enumerate() {
                    acc[idx % c] = acc[idx % c] + *gv * *xh;
                }
                acc
            });
            let gb = needs[2].then(|| {
                let mut acc = vec![S::zero(); c];
                for (idx, gv) in g.iter().enumerate() {
                    acc[idx % c] = acc[idx % c] + *gv;
                }
                acc
            });
            vec![gx, gg, gb]
        }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers reshapes,
    /// permutations, slices and embedding lookups.
    pub fn gather(&self, x: &Tensor<S>, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        let n = x.len();
        if let Some(bad) = index.iter().find(|i| **i >= n) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let xd = x.data();
        let out = index.iter().map(|i| xd[*i]).collect();
        Ok(self.record(shape.to_vec(), out, &[x], move |g, _| {
            let mut gx = vec![S::zero(); n];
            for (gv, i) in g.iter().zip(index.iter()) {
                gx[*i] = gx[*i] + *gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Selects rows of a `[rows x c]` table.
    pub fn gather_rows(&self, table: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
        let (n, c) = table.dims2("gather_rows")?;
        if let Some(bad) = rows.iter().find(|r| **r >= n) {
            return Err(Error::Contract(format!("row {bad} out of range for table of {n} rows")));
        }
        let index: Vec<usize> = rows.iter().flat_map(|r| (r * c)..(r * c + c)).collect();
        self.gather(table, Arc::new(index), &[rows.len(), c])
    }

    pub fn sum(&self, x: &Tensor<S>) -> Tensor<S> {
        let n = x.len();
        let total = x.data().iter().copied().sum();
        self.record(vec![], vec![total], &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, x: &Tensor<S>) -> Tensor<S> {
        let n = x.len();
        let inv = S::one() / S::lit(n as f64);
        let total: S = x.data().iter().copied().sum();
        self.record(vec![], vec![total * inv], &[x], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mse", a, b)?;
        let n = a.len();
        let diff: Vec<S> = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        let inv = S::one() / S::lit(n as f64);
        let value = diff.iter().map(|d| *d * *d).sum::<S>() * inv;
        Ok(self.record(vec![], vec![value], &[a, b], move |g, needs| {
            let k = S::lit(2.0) * inv * g[0];
            let ga: Vec<S> = diff.iter().map(|d| *d * k).collect();
            let gb = needs[1].then(|| ga.iter().map(|v| -*v).collect());
            vec![needs[0].then_some(ga), gb]
        }))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[nq x d]`, `k` is `[nk x d]`, `v` is `[nk x dv]`; heads split
    /// both `d` and `dv` evenly and each head scores with `1/sqrt(d/heads)`.
    /// Query rows outside every group produce zeros.
    pub fn attention(
        &self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        heads: usize,
        groups: &[GroupSpan],
    ) -> Result<Tensor<S>> {
        let (nq, d) = q.dims2("attention")?;
        let (nk, dk_total) = k.dims2("attention")?;
        let (nv, dv) = v.dims2("attention")?;
        if d != dk_total || nk != nv {
            return Err(Error::dim("attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Contract(format!("{heads} heads do not divide widths {d}/{dv}")));
        }
        let mut claimed = vec![false; nq];
        for span in groups {
            if span.queries.end > nq || span.keys.end > nk {
                return Err(Error::Contract(format!(
                    "attention span {span:?} exceeds {nq}/{nk} rows"
                )));
            }
            for r in span.queries.clone() {
                if std::mem::replace(&mut claimed[r], true) {
                    return Err(Error::Contract(format!("query row {r} claimed by two groups")));
                }
            }
        }
        let hd = d / heads;
        let hv = dv / heads;
        let scale = S::one() / S::lit(hd as f64).sqrt();
        let (qd, kd, vd) = (q.data_arc(), k.data_arc(), v.data_arc());
        let mut out = vec![S::zero(); nq * dv];
        let mut probs: Vec<Vec<S>> = Vec::with_capacity(groups.len() * heads);
        for span in groups {
            let (mq, mk) = (span.queries.len(), span.keys.len());
            for h in 0..heads {
                if mq == 0 || mk == 0 {
                    probs.push(Vec::new());
                    continue;
                }
                let mut p = vec![S::zero(); mq * mk];
                gemm(
                    scale,
                    MatRef::strided(&qd, span.queries.start * d + h * hd, mq, hd, d),
                    MatRef::strided(&kd, span.keys.start * d + h * hd, mk, hd, d).t(),
                    S::zero(),
                    MatMut::dense(&mut p, 0, mq, mk),
                );
                p.chunks_exact_mut(mk).for_each(softmax_in_place);
                gemm(
                    S::one(),
                    MatRef::dense(&p, 0, mq, mk),
                    MatRef::strided(&vd, span.keys.start * dv + h * hv, mk, hv, dv),
                    S::zero(),
                    MatMut::strided(&mut out, span.queries.start * dv + h * hv, mq, hv, dv),
                );
                probs.push(p);
            }
        }
        let groups = groups.to_vec();
        Ok(self.record(vec![nq, dv], out, &[q, k, v], move |g, needs| {
            let mut gq = vec![S::zero(); nq * d];
            let mut gk = vec![S::zero(); nk * d];
            let mut gv = vec![S::zero(); nk * dv];
            for (gi, span) in groups.iter().enumerate() {
                let (mq, mk) = (span.queries.len(), span.keys.len());
                if mq == 0 || mk == 0 {
                    continue;
                }
                for h in 0..heads {
                    let p = &probs[gi * heads + h];
                    let g_out = MatRef::strided(g, span.queries.start * dv + h * hv, mq, hv, dv);
                    if needs[2] {
                        gemm(
                            S::one(),
                            MatRef::dense(p, 0, mq, mk).t(),
                            g_out,
                            S::one(),
                            MatMut::strided(&mut gv, span.keys.start * dv + h * hv, mk, hv, dv),
                        );
                    }
                    if !(needs[0] || needs[1]) {
                        continue;
                    }
                    let mut ds = vec![S::zero(); mq * mk];
                    gemm(
                        S::one(),
                        g_out,
                        MatRef::strided(&vd, span.keys.start * dv + h * hv, mk, hv, dv).t(),
                        S::zero(),
                        MatMut::dense(&mut ds, 0, mq, mk),
                    );
                    for (dr, pr) in ds.chunks_exact_mut(mk).zip(p.chunks_exact(mk)) {
                        let dot: S = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                        dr.iter_mut().zip(pr).for_each(|(a, b)| *a = *b * (*a - dot));
                    }
                    if needs[0] {
                        gemm(
                            scale,
                            MatRef::dense(&ds, 0, mq, mk),
                            MatRef::strided(&kd, span.keys.start * d + h * hd, mk, hd, d),
                            S::one(),
                            MatMut::strided(&mut gq, span.queries.start * d + h * hd, mq, hd, d),
                        );
                    }
                    if needs[1] {
                        gemm(
                            scale,
                            MatRef::dense(&ds, 0, mq, mk).t(),
                            MatRef::strided(&qd, span.queries.start * d + h * hd, mq, hd, d),
                            S::one(),
                            MatMut::strided(&mut gk, span.keys.start * d + h * hd, mk, hd, d),
                        );
                    }
                }
            }
            vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
        }))
    }
}
