use super::{gemm, numel, BackwardFn, Tensor};
use crate::error::{Error, Result};

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` is a trailing-suffix of `a`, repeated over the leading dims.
    RhsSuffix,
    /// `a` is a trailing-suffix of `b`.
    LhsSuffix,
}

fn broadcast_mode(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::RhsSuffix)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Broadcast::LhsSuffix)
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Folds a full-size gradient back onto a suffix-broadcast operand.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable `log softmax` of a slice, outside any graph.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = row_max(x);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: &'static str, mul: bool) -> Result<Tensor> {
        let mode = broadcast_mode(op, self.shape(), other.shape())?;
        let (big, small, swap) = match mode {
            Broadcast::Same | Broadcast::RhsSuffix => (self, other, false),
            Broadcast::LhsSuffix => (other, self, true),
        };
        let out_shape = big.shape().to_vec();
        let bd = big.data();
        let sd = small.data();
        let n_small = sd.len();
        let sign = if op == "sub" { -1.0 } else { 1.0 };
        let data: Vec<f64> = bd
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = sd[i % n_small];
                match (mul, swap) {
                    (true, _) => x * y,
                    (false, false) => x + sign * y,
                    (false, true) => sign * x + y,
                }
            })
            .collect();
        drop(bd);
        drop(sd);

        let backward: BackwardFn = Box::new(move |g, _out, parents| {
            let a = &parents[0];
            let b = &parents[1];
            let (na, nb) = (a.numel(), b.numel());
            let n = g.len();
            let (ga, gb) = if mul {
                let ad = a.data();
                let bdat = b.data();
                let mut ga_full = vec![0.0; if a.requires_grad() { n } else { 0 }];
                let mut gb_full = vec![0.0; if b.requires_grad() { n } else { 0 }];
                for i in 0..n {
                    if !ga_full.is_empty() {
                        ga_full[i] = g[i] * bdat[i % nb];
                    }
                    if !gb_full.is_empty() {
                        gb_full[i] = g[i] * ad[i % na];
                    }
                }
                (ga_full, gb_full)
            } else {
                let gb_full: Vec<f64> = if b.requires_grad() {
                    g.iter().map(|v| v * sign).collect()
                } else {
                    Vec::new()
                };
                let ga_full = if a.requires_grad() { g.to_vec() } else { Vec::new() };
                (ga_full, gb_full)
            };
            vec![
                a.requires_grad().then(|| reduce_to(&ga, na)),
                b.requires_grad().then(|| reduce_to(&gb, nb)),
            ]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], backward))
    }

    /// Elementwise sum. Either operand may be a trailing suffix of the other.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", false)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", false)
    }

    /// Elementwise product with the same broadcasting rule as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", true)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * k).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _, parents| {
                let x = parents[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Batched matrix product. `other` is either a plain `[k, n]` matrix shared
    /// across the batch or has the same leading dims as `self`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batches = numel(batch_a);
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);

        let mut data = vec![0.0; batches * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            if shared_rhs {
                gemm::nn(&ad, &bd, &mut data, batches * m, k, n);
            } else {
                for bi in 0..batches {
                    gemm::nn(
                        &ad[bi * m * k..(bi + 1) * m * k],
                        &bd[bi * k * n..(bi + 1) * k * n],
                        &mut data[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }

        let backward: BackwardFn = Box::new(move |g, _, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let ad = a.data();
            let bd = b.data();
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; ad.len()];
                if shared_rhs {
                    gemm::nt(g, &bd, &mut ga, batches * m, n, k);
                } else {
                    for bi in 0..batches {
                        gemm::nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![0.0; bd.len()];
                if shared_rhs {
                    gemm::tn(&ad, g, &mut gb, batches * m, k, n);
                } else {
                    for bi in 0..batches {
                        gemm::tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone(), other.clone()], backward))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        let in_shape = self.shape().to_vec();
        let (data, out_shape) = permute_data(&self.data(), &in_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(permute_data(g, &out_shape_c, &inverse).0)]),
        ))
    }

    pub fn transpose_last_two(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose_last_two", self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        self.softmax_impl(false)
    }

    /// Row softmax over `[.., q, k]` where query `i` only sees keys
    /// `j <= i + (k - q)`; masked entries are exactly zero.
    pub fn softmax_rows_causal(&self) -> Result<Tensor> {
        if self.rank() < 2 || self.shape()[self.rank() - 2] > self.shape()[self.rank() - 1] {
            return Err(Error::contract(format!("causal softmax needs [.., q, k] with q <= k, got {:?}", self.shape())));
        }
        Ok(self.softmax_impl(true))
    }

    fn softmax_impl(&self, causal: bool) -> Tensor {
        let shape = self.shape().to_vec();
        let n = *shape.last().unwrap();
        let q = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let offset = n - q.min(n);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (r, (row, orow)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let visible = if causal { (r % q) + offset + 1 } else { n };
            let m = row_max(&row[..visible]);
            let mut z = 0.0;
            for j in 0..visible {
                let e = (row[j] - m).exp();
                orow[j] = e;
                z += e;
            }
            orow[..visible].iter_mut().for_each(|v| *v /= z);
        }
        drop(x);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for ((grow, yrow), gxrow) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxrow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (`eps` inside the square root), then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        drop((x, gm, bt));

        let backward: BackwardFn = Box::new(move |g, _, parents| {
            let gamma = parents[1].data();
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut gh = vec![0.0; d];
            for r in 0..rows {
                let grow = &g[r * d..(r + 1) * d];
                let hrow = &xhat[r * d..(r + 1) * d];
                let mut sum_gh = 0.0;
                let mut sum_gh_h = 0.0;
                for j in 0..d {
                    ggamma[j] += grow[j] * hrow[j];
                    gbeta[j] += grow[j];
                    gh[j] = grow[j] * gamma[j];
                    sum_gh += gh[j];
                    sum_gh_h += gh[j] * hrow[j];
                }
                let k = inv_std[r] / d as f64;
                for j in 0..d {
                    gx[r * d + j] = k * (d as f64 * gh[j] - sum_gh - hrow[j] * sum_gh_h);
                }
            }
            vec![
                parents[0].requires_grad().then_some(gx),
                parents[1].requires_grad().then_some(ggamma),
                parents[2].requires_grad().then_some(gbeta),
            ]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        for p in &parts[1..] {
            let ok = p.rank() == rank
                && p.shape()[..axis] == first.shape()[..axis]
                && p.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let chunks: Vec<usize> = parts.iter().map(|p| numel(&p.shape()[axis..])).collect();
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &c) in datas.iter().zip(&chunks) {
                    data.extend_from_slice(&d[o * c..(o + 1) * c]);
                }
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parents,
            Box::new(move |g, _, parents| {
                let mut grads: Vec<Vec<f64>> = chunks.iter().map(|&c| Vec::with_capacity(c * outer)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &c) in grads.iter_mut().zip(&chunks) {
                        gr.extend_from_slice(&g[pos..pos + c]);
                        pos += c;
                    }
                }
                grads
                    .into_iter()
                    .zip(parents)
                    .map(|(gr, p)| p.requires_grad().then_some(gr))
                    .collect()
            }),
        ))
    }

    pub fn concat_last_axis(&self, other: &Tensor) -> Result<Tensor> {
        Tensor::concat(&[self, other], self.rank().saturating_sub(1))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis] * inner;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n_in = numel(&shape);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n_in];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers rows of a `[V, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", table.shape(), &[ids.len()]));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                size: v,
            });
        }
        let t = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        drop(t);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![table.clone()],
            Box::new(move |g, _, _| {
                let mut gt = vec![0.0; v * d];
                for (row, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Repeats the tensor `count` times along a new leading axis.
    pub fn expand_leading(&self, count: usize) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::contract("expand to zero copies"));
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape());
        let x = self.data();
        let mut data = Vec::with_capacity(count * x.len());
        for _ in 0..count {
            data.extend_from_slice(&x);
        }
        let n = x.len();
        drop(x);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(reduce_to(g, n))]),
        ))
    }

    /// Unfolds `[B, H, W, C]` into `[B, Ho*Wo, k*k*C]` patches with zero
    /// padding; row order is raster over output positions, column order
    /// is `(ky, kx, c)`.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::shape("im2col", self.shape(), &[kernel, stride, pad]));
        }
        let (b, h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("im2col", self.shape(), &[kernel, stride, pad]));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * c;
        let n_in = self.numel();

        // Source offset for each output cell, or None for padding.
        let mut index: Vec<Option<usize>> = Vec::with_capacity(b * ho * wo * cols);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for ci in 0..c {
                                index.push(
                                    inside.then(|| ((bi * h + iy as usize) * w + ix as usize) * c + ci),
                                );
                            }
                        }
                    }
                }
            }
        }
        let x = self.data();
        let data = index.iter().map(|ix| ix.map_or(0.0, |i| x[i])).collect();
        drop(x);
        Ok(Tensor::from_op(
            vec![b, ho * wo, cols],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n_in];
                for (gv, ix) in g.iter().zip(&index) {
                    if let Some(i) = ix {
                        gx[*i] += gv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean token cross-entropy of `[N, V]` logits against `targets`, skipping
    /// positions equal to `ignore`. With `smoothing > 0` the target
    /// distribution is `(1 - smoothing)` on the gold token plus
    /// `smoothing / V` everywhere.
    pub fn cross_entropy(&self, targets: &[usize], ignore: usize, smoothing: f64) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        let v = self.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy over a batch with only padding targets"));
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let logp = log_softmax_slice(row);
            let mut nll = -(1.0 - smoothing) * logp[t];
            if smoothing > 0.0 {
                nll -= smoothing / v as f64 * logp.iter().sum::<f64>();
            }
            total += nll;
            for (p, lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        drop(x);
        let targets = targets.to_vec();
        let denom = count as f64;
        Ok(Tensor::from_op(
            vec![1],
            vec![total / denom],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g[0] / denom;
                let mut gx = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == ignore {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = smoothing / v as f64;
                        if j == t {
                            q += 1.0 - smoothing;
                        }
                        gx[r * v + j] = scale * (probs[r * v + j] - q);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let n = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(m.matmul(&n).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::randn(&[3, 4], 1.0, &mut rng());
        let out = z.matmul(&any).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let u = t(&[3], &[0.0, 0.0, 0.0]).softmax_rows();
        assert_close(&u.to_vec(), &[1.0 / 3.0; 3], 1e-15);
        let s = t(&[2], &[0.0, 2f64.ln()]).softmax_rows();
        assert_close(&s.to_vec(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng());
        let y = x.softmax_rows_causal().unwrap().to_vec();
        assert_eq!(y[0], 1.0);
        assert_eq!((y[1], y[2], y[5]), (0.0, 0.0, 0.0));
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let c = t(&[2], &[5.0, 5.0]).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.to_vec(), vec![0.0, 0.0]);
        let r = t(&[2], &[1.0, 3.0]).layer_norm(&ones, &zeros, 0.0).unwrap();
        assert_close(&r.to_vec(), &[-1.0, 1.0], 1e-15);
        let b = t(&[2], &[0.25, 0.25]);
        let o = t(&[2], &[1.0, 7.0]).layer_norm(&zeros, &b, 1e-5).unwrap();
        assert_eq!(o.to_vec(), vec![0.25, 0.25]);
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().to_vec(), vec![0.0, 0.0, 2.0]);
        let a = Tensor::zeros(&[2, 4, 3]);
        let b = Tensor::zeros(&[2, 4, 5]);
        assert_eq!(a.concat_last_axis(&b).unwrap().shape(), &[2, 4, 8]);
        let table = Tensor::eye(4);
        assert_eq!(Tensor::embedding(&table, &[2]).unwrap().to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(Tensor::embedding(&table, &[4]), Err(Error::Index { .. })));
    }

    #[test]
    fn suffix_broadcast_add() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(x.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(b.add(&x).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(b.sub(&x).unwrap().to_vec(), vec![9.0, 18.0, 7.0, 16.0]);
        assert!(x.add(&t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn im2col_shape_and_padding() {
        let x = Tensor::ones(&[1, 4, 4, 1]);
        let cols = x.im2col(3, 2, 1).unwrap();
        assert_eq!(cols.shape(), &[1, 4, 9]);
        // top-left window: first row and column fall in the padding
        let first = &cols.to_vec()[..9];
        assert_eq!(first, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(&[3, 5]);
        let l = logits.cross_entropy(&[1, 0, 4], 0, 0.0).unwrap();
        assert!((l.item() - 5f64.ln()).abs() < 1e-12);
        assert!(logits.cross_entropy(&[0, 0, 0], 0, 0.0).is_err());
    }

    fn grad_ok(f: impl Fn() -> Tensor, params: &[Tensor]) {
        let report = check_gradients(f, params, &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r).trainable();
        let b = Tensor::randn(&[4, 5], 1.0, &mut r).trainable();
        let c = Tensor::randn(&[2, 4, 5], 1.0, &mut r).trainable();
        let w = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
        let weigh = |x: Tensor| x.mul(&w).unwrap().sum();
        grad_ok(|| weigh(a.matmul(&b).unwrap()), &[a.clone(), b.clone()]);
        grad_ok(|| weigh(a.matmul(&c).unwrap()), &[a.clone(), c.clone()]);

        let x = Tensor::randn(&[3, 4], 1.0, &mut r).trainable();
        let wx = Tensor::randn(&[3, 4], 1.0, &mut r);
        let weigh4 = |y: Tensor| y.mul(&wx).unwrap().sum();
        grad_ok(|| weigh4(x.softmax_rows()), &[x.clone()]);
        let sq = Tensor::randn(&[4, 4], 1.0, &mut r).trainable();
        let wsq = Tensor::randn(&[4, 4], 1.0, &mut r);
        grad_ok(|| sq.softmax_rows_causal().unwrap().mul(&wsq).unwrap().sum(), &[sq.clone()]);

        let g = Tensor::randn(&[4], 1.0, &mut r).trainable();
        let be = Tensor::randn(&[4], 1.0, &mut r).trainable();
        grad_ok(|| weigh4(x.layer_norm(&g, &be, 1e-5).unwrap()), &[x.clone(), g.clone(), be.clone()]);

        let bias = Tensor::randn(&[4], 1.0, &mut r).trainable();
        grad_ok(|| weigh4(x.add(&bias).unwrap().relu()), &[x.clone(), bias.clone()]);
        grad_ok(|| weigh4(x.mul(&bias).unwrap()), &[x.clone(), bias.clone()]);
        grad_ok(|| weigh4(bias.sub(&x).unwrap()), &[x.clone(), bias.clone()]);

        let table = Tensor::randn(&[5, 4], 1.0, &mut r).trainable();
        grad_ok(|| weigh4(Tensor::embedding(&table, &[1, 3, 1]).unwrap()), &[table.clone()]);
        grad_ok(
            || {
                let e = x.expand_leading(2).unwrap();
                let cat = Tensor::concat(&[&e, &e.scale(2.0)], 1).unwrap();
                cat.narrow(1, 1, 5).unwrap().permute(&[2, 0, 1]).unwrap().softmax_rows().mul(&cat.narrow(1, 0, 5).unwrap().permute(&[2, 0, 1]).unwrap()).unwrap().sum()
            },
            &[x.clone()],
        );

        let img = Tensor::uniform(&[2, 4, 4, 2], 0.0, 1.0, &mut r).trainable();
        let wi = Tensor::randn(&[2, 4, 18], 1.0, &mut r);
        grad_ok(|| img.im2col(3, 2, 1).unwrap().mul(&wi).unwrap().sum(), &[img.clone()]);

        let logits = Tensor::randn(&[4, 6], 1.0, &mut r).trainable();
        grad_ok(|| logits.cross_entropy(&[1, 0, 5, 2], 0, 0.0).unwrap(), &[logits.clone()]);
        grad_ok(|| logits.cross_entropy(&[1, 3, 5, 2], 0, 0.1).unwrap(), &[logits.clone()]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::randn(&[5], 1.0, &mut rng()).trainable();
        x.softmax_rows().sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
            let n = vals.len();
            let x = Tensor::new(&[n], vals.clone()).unwrap();
            let y = x.softmax_rows().to_vec();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(y.iter().all(|&p| p >= 0.0));
            let shifted = Tensor::new(&[n], vals.iter().map(|v| v + shift).collect()).unwrap();
            let ys = shifted.softmax_rows().to_vec();
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn reshape_and_transpose_round_trip(rows in 1usize..6, cols in 1usize..6, batch in 1usize..4) {
            let n = rows * cols * batch;
            let x = Tensor::new(&[batch, rows, cols], (0..n).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
            let back = x.transpose_last_two().unwrap().transpose_last_two().unwrap();
            prop_assert_eq!(back.to_vec(), x.to_vec());
            prop_assert_eq!(back.shape(), x.shape());
            let flat = x.reshape(&[n]).unwrap().reshape(&[batch, rows, cols]).unwrap();
            prop_assert_eq!(flat.to_vec(), x.to_vec());
            let p = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(p.to_vec(), x.to_vec());
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[3, 4], 1.0, &mut r);
            let b = Tensor::randn(&[4, 2], 1.0, &mut r);
            let g = Tensor::ones(&[2]);
            let z = Tensor::zeros(&[2]);
            let run = || a.matmul(&b).unwrap().layer_norm(&g, &z, 1e-5).unwrap().softmax_rows().to_vec();
            let first = run();
            let second = run();
            prop_assert!(first.iter().zip(&second).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
