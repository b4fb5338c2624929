//! Numeric kernels behind the graph ops.
//!
//! Every kernel follows two rules that make whole runs reproducible down to
//! the bit, independent of thread count:
//!
//! * parallelism only ever splits *disjoint output regions* across threads
//!   (batch rows, channel slabs), never a reduction;
//! * within one output element, floating-point accumulation order is fixed
//!   by the loop structure.
//!
//! Inner loops are arranged so the accumulations run over independent
//! output lanes (axpy style) wherever possible, which the compiler can
//! vectorise without reassociating anything.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.h + 2 * self.pad >= self.kh
            && self.w + 2 * self.pad >= self.kw
    }
}

/// Range of output columns for which `ix = ox * stride + k - pad` lands in
/// `[0, limit)`. Returns an empty range when no column is valid.
#[inline]
fn valid_out_range(limit: usize, out_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let s = stride as i64;
    let shift = k as i64 - pad as i64;
    // smallest ox with ox*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    // largest ox with ox*s + shift <= limit-1
    let hi = (limit as i64 - 1 - shift).div_euclid(s);
    let lo = lo.max(0) as usize;
    let hi = (hi.min(out_len as i64 - 1).max(-1) + 1) as usize; // exclusive
    (lo.min(out_len), hi.max(lo).min(out_len))
}

pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    d: ConvDims,
) -> Vec<S> {
    let (oh, ow) = d.out_hw();
    let mut out = vec![S::zero(); d.n * d.cout * oh * ow];
    let plane = oh * ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(p, o)| {
        let n = p / d.cout;
        let k = p % d.cout;
        if let Some(b) = bias {
            o.fill(b[k]);
        }
        for c in 0..d.cin {
            let xc = &x[(n * d.cin + c) * d.h * d.w..][..d.h * d.w];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let wv = w[((k * d.cin + c) * d.kh + kh) * d.kw + kw];
                    if wv == S::zero() {
                        continue;
                    }
                    let (lo, hi) = valid_out_range(d.w, ow, d.stride, kw, d.pad);
                    for oy in 0..oh {
                        let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                        if iy < 0 || iy >= d.h as i64 {
                            continue;
                        }
                        let xrow = &xc[iy as usize * d.w..][..d.w];
                        let orow = &mut o[oy * ow..][..ow];
                        let shift = kw as i64 - d.pad as i64;
                        if d.stride == 1 {
                            let xoff = (lo as i64 + shift) as usize;
                            let xs = &xrow[xoff..xoff + (hi - lo)];
                            let os = &mut orow[lo..hi];
                            for (ov, &xv) in os.iter_mut().zip(xs) {
                                *ov = *ov + wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * d.stride) as i64 + shift;
                                orow[ox] = orow[ox] + wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<S: Scalar>(go: &[S], w: &[S], d: ConvDims) -> Vec<S> {
    let (oh, ow) = d.out_hw();
    let mut gx = vec![S::zero(); d.n * d.cin * d.h * d.w];
    let plane = d.h * d.w;
    gx.par_chunks_mut(plane).enumerate().for_each(|(p, gxc)| {
        let n = p / d.cin;
        let c = p % d.cin;
        for k in 0..d.cout {
            let gok = &go[(n * d.cout + k) * oh * ow..][..oh * ow];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let wv = w[((k * d.cin + c) * d.kh + kh) * d.kw + kw];
                    if wv == S::zero() {
                        continue;
                    }
                    let (lo, hi) = valid_out_range(d.w, ow, d.stride, kw, d.pad);
                    for oy in 0..oh {
                        let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                        if iy < 0 || iy >= d.h as i64 {
                            continue;
                        }
                        let gxrow = &mut gxc[iy as usize * d.w..][..d.w];
                        let gorow = &gok[oy * ow..][..ow];
                        let shift = kw as i64 - d.pad as i64;
                        if d.stride == 1 {
                            let xoff = (lo as i64 + shift) as usize;
                            let gxs = &mut gxrow[xoff..xoff + (hi - lo)];
                            let gos = &gorow[lo..hi];
                            for (gxv, &gov) in gxs.iter_mut().zip(gos) {
                                *gxv = *gxv + wv * gov;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * d.stride) as i64 + shift;
                                gxrow[ix as usize] = gxrow[ix as usize] + wv * gorow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn conv2d_backward_weights<S: Scalar>(go: &[S], x: &[S], d: ConvDims) -> Vec<S> {
    let (oh, ow) = d.out_hw();
    let mut gw = vec![S::zero(); d.cout * d.cin * d.kh * d.kw];
    let slab = d.cin * d.kh * d.kw;
    gw.par_chunks_mut(slab).enumerate().for_each(|(k, gwk)| {
        for n in 0..d.n {
            let gok = &go[(n * d.cout + k) * oh * ow..][..oh * ow];
            for c in 0..d.cin {
                let xc = &x[(n * d.cin + c) * d.h * d.w..][..d.h * d.w];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let (lo, hi) = valid_out_range(d.w, ow, d.stride, kw, d.pad);
                        let shift = kw as i64 - d.pad as i64;
                        let mut acc = S::zero();
                        for oy in 0..oh {
                            let iy = (oy * d.stride + kh) as i64 - d.pad as i64;
                            if iy < 0 || iy >= d.h as i64 {
                                continue;
                            }
                            let xrow = &xc[iy as usize * d.w..][..d.w];
                            let gorow = &gok[oy * ow..][..ow];
                            if d.stride == 1 {
                                let xoff = (lo as i64 + shift) as usize;
                                let xs = &xrow[xoff..xoff + (hi - lo)];
                                let gos = &gorow[lo..hi];
                                for (&xv, &gov) in xs.iter().zip(gos) {
                                    acc = acc + xv * gov;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * d.stride) as i64 + shift;
                                    acc = acc + xrow[ix as usize] * gorow[ox];
                                }
                            }
                        }
                        let slot = (c * d.kh + kh) * d.kw + kw;
                        gwk[slot] = gwk[slot] + acc;
                    }
                }
            }
        }
    });
    gw
}

pub fn conv2d_backward_bias<S: Scalar>(go: &[S], d: ConvDims) -> Vec<S> {
    let (oh, ow) = d.out_hw();
    let mut gb = vec![S::zero(); d.cout];
    for n in 0..d.n {
        for k in 0..d.cout {
            let gok = &go[(n * d.cout + k) * oh * ow..][..oh * ow];
            let mut acc = S::zero();
            for &g in gok {
                acc = acc + g;
            }
            gb[k] = gb[k] + acc;
        }
    }
    gb
}

/// `a` is \[n, k\], `b` is \[k, m\], output \[n, m\].
pub fn matmul_forward<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, orow)| {
        let arow = &a[i * k..][..k];
        for (j, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[j * m..][..m];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    });
    out
}

/// Gradient wrt `a`: go · bᵀ, computed against an explicit transpose so the
/// inner loop stays an axpy over contiguous lanes.
pub fn matmul_backward_a<S: Scalar>(go: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut bt = vec![S::zero(); m * k];
    for j in 0..k {
        for l in 0..m {
            bt[l * k + j] = b[j * m + l];
        }
    }
    let mut ga = vec![S::zero(); n * k];
    ga.par_chunks_mut(k).enumerate().for_each(|(i, garow)| {
        let gorow = &go[i * m..][..m];
        for (l, &gv) in gorow.iter().enumerate() {
            if gv == S::zero() {
                continue;
            }
            let btrow = &bt[l * k..][..k];
            for (gav, &btv) in garow.iter_mut().zip(btrow) {
                *gav = *gav + gv * btv;
            }
        }
    });
    ga
}

/// Gradient wrt `b`: aᵀ · go.
pub fn matmul_backward_b<S: Scalar>(go: &[S], a: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut gb = vec![S::zero(); k * m];
    for i in 0..n {
        let arow = &a[i * k..][..k];
        let gorow = &go[i * m..][..m];
        for (j, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let gbrow = &mut gb[j * m..][..m];
            for (gbv, &gv) in gbrow.iter_mut().zip(gorow) {
                *gbv = *gbv + av * gv;
            }
        }
    }
    gb
}

/// Saved statistics from a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<S> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
    pub xn: Vec<S>,
}

/// Training-mode 2-D batch normalization over (n, h, w) per channel.
///
/// Normalization uses the biased batch variance; the running variance is
/// updated with the unbiased estimate. `weight`/`bias` are the optional
/// learned affine parameters.
#[allow(clippy::too_many_arguments)]
pub fn bn2d_forward_train<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    weight: Option<&[S]>,
    bias: Option<&[S]>,
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: f64,
    eps: f64,
) -> (Vec<S>, BnSaved<S>) {
    let ne = (n * hw) as f64;
    let mut out = vec![S::zero(); x.len()];
    let mut mean = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    let mut xn = vec![S::zero(); x.len()];
    for ch in 0..c {
        let mut sum = S::zero();
        for ni in 0..n {
            let xs = &x[(ni * c + ch) * hw..][..hw];
            for &v in xs {
                sum = sum + v;
            }
        }
        let mu = sum / S::from_f64(ne);
        let mut sq = S::zero();
        for ni in 0..n {
            let xs = &x[(ni * c + ch) * hw..][..hw];
            for &v in xs {
                let d = v - mu;
                sq = sq + d * d;
            }
        }
        let var = sq / S::from_f64(ne);
        let istd = S::one() / (var + S::from_f64(eps)).sqrt();
        mean[ch] = mu;
        inv_std[ch] = istd;
        let m = S::from_f64(momentum);
        running_mean[ch] = (S::one() - m) * running_mean[ch] + m * mu;
        let unbiased = if ne > 1.0 {
            var * S::from_f64(ne / (ne - 1.0))
        } else {
            var
        };
        running_var[ch] = (S::one() - m) * running_var[ch] + m * unbiased;
        let (wv, bv) = (
            weight.map_or(S::one(), |w| w[ch]),
            bias.map_or(S::zero(), |b| b[ch]),
        );
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let nv = (x[base + i] - mu) * istd;
                xn[base + i] = nv;
                out[base + i] = wv * nv + bv;
            }
        }
    }
    (out, BnSaved { mean, inv_std, xn })
}

/// Inference-mode batch normalization using running statistics.
pub fn bn2d_forward_eval<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    weight: Option<&[S]>,
    bias: Option<&[S]>,
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        let istd = S::one() / (running_var[ch] + S::from_f64(eps)).sqrt();
        let scale = weight.map_or(S::one(), |w| w[ch]) * istd;
        let shift = bias.map_or(S::zero(), |b| b[ch]) - scale * running_mean[ch];
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                out[base + i] = scale * x[base + i] + shift;
            }
        }
    }
    out
}

/// Backward through training-mode batch norm.
///
/// Returns (grad x, grad weight, grad bias); the parameter grads are `None`
/// when the corresponding affine input was absent.
pub fn bn2d_backward_train<S: Scalar>(
    go: &[S],
    saved: &BnSaved<S>,
    n: usize,
    c: usize,
    hw: usize,
    weight: Option<&[S]>,
) -> (Vec<S>, Option<Vec<S>>, Option<Vec<S>>) {
    let ne = S::from_f64((n * hw) as f64);
    let mut gx = vec![S::zero(); go.len()];
    let mut gw = weight.map(|_| vec![S::zero(); c]);
    let mut gb_acc = vec![S::zero(); c];
    for ch in 0..c {
        let wv = weight.map_or(S::one(), |w| w[ch]);
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let g = go[base + i];
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * saved.xn[base + i];
            }
        }
        gb_acc[ch] = sum_g;
        if let Some(gw) = gw.as_mut() {
            gw[ch] = sum_gx;
        }
        let istd = saved.inv_std[ch];
        let k = wv * istd / ne;
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for i in 0..hw {
                let g = go[base + i];
                gx[base + i] = k * (ne * g - sum_g - saved.xn[base + i] * sum_gx);
            }
        }
    }
    let gb = Some(gb_acc);
    (gx, gw, gb)
}

/// Max over the spatial plane, keeping flat argmax indices for backward.
/// Ties resolve to the first maximum in scan order.
pub fn global_max_pool_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<S>, Vec<u32>) {
    let mut out = vec![S::zero(); n * c];
    let mut arg = vec![0u32; n * c];
    for p in 0..n * c {
        let xs = &x[p * hw..][..hw];
        let mut best = xs[0];
        let mut bi = 0u32;
        for (i, &v) in xs.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = i as u32;
            }
        }
        out[p] = best;
        arg[p] = bi;
    }
    (out, arg)
}

pub fn global_max_pool_backward<S: Scalar>(
    go: &[S],
    arg: &[u32],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<S> {
    let mut gx = vec![S::zero(); n * c * hw];
    for p in 0..n * c {
        gx[p * hw + arg[p] as usize] = go[p];
    }
    gx
}

/// Softmax cross-entropy with mean reduction over the batch.
///
/// Returns (mean loss, per-row probabilities). The loss for a row is
/// computed in log-space for stability.
pub fn softmax_ce_forward<S: Scalar>(
    logits: &[S],
    targets: &[usize],
    n: usize,
    a: usize,
) -> (S, Vec<S>) {
    let mut probs = vec![S::zero(); n * a];
    let mut total = S::zero();
    for i in 0..n {
        let row = &logits[i * a..][..a];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            probs[i * a + j] = e;
            sum = sum + e;
        }
        let inv = S::one() / sum;
        for j in 0..a {
            probs[i * a + j] = probs[i * a + j] * inv;
        }
        total = total + (mx + sum.ln() - row[targets[i]]);
    }
    (total / S::from_f64(n as f64), probs)
}

pub fn softmax_ce_backward<S: Scalar>(
    gloss: S,
    probs: &[S],
    targets: &[usize],
    n: usize,
    a: usize,
) -> Vec<S> {
    let scale = gloss / S::from_f64(n as f64);
    let mut g = vec![S::zero(); n * a];
    for i in 0..n {
        for j in 0..a {
            let ind = if targets[i] == j { S::one() } else { S::zero() };
            g[i * a + j] = scale * (probs[i * a + j] - ind);
        }
    }
    g
}

/// Plain softmax, used at inference time when probabilities are reported.
pub fn softmax_rows<S: Scalar>(logits: &[S], n: usize, a: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * a];
    for i in 0..n {
        let row = &logits[i * a..][..a];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[i * a + j] = e;
            sum = sum + e;
        }
        let inv = S::one() / sum;
        for j in 0..a {
            out[i * a + j] = out[i * a + j] * inv;
        }
    }
    out
}

pub fn embedding_forward<S: Scalar>(table: &[S], e: usize, ids: &[usize]) -> Vec<S> {
    let mut out = vec![S::zero(); ids.len() * e];
    for (i, &id) in ids.iter().enumerate() {
        out[i * e..][..e].copy_from_slice(&table[id * e..][..e]);
    }
    out
}

pub fn embedding_backward<S: Scalar>(go: &[S], v: usize, e: usize, ids: &[usize]) -> Vec<S> {
    let mut gt = vec![S::zero(); v * e];
    for (i, &id) in ids.iter().enumerate() {
        let row = &go[i * e..][..e];
        let trow = &mut gt[id * e..][..e];
        for (t, &g) in trow.iter_mut().zip(row) {
            *t = *t + g;
        }
    }
    gt
}

/// Feature-wise linear modulation: `out[n,c,·] = gamma[n,c] * x[n,c,·] + beta[n,c]`.
pub fn film_forward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    debug_assert_eq!(x.len(), n * c * hw);
    out.par_chunks_mut(hw).enumerate().for_each(|(p, orow)| {
        let g = gamma[p];
        let b = beta[p];
        let xs = &x[p * hw..][..hw];
        for (ov, &xv) in orow.iter_mut().zip(xs) {
            *ov = g * xv + b;
        }
    });
    out
}

/// Backward for FiLM: returns (grad x, grad gamma, grad beta).
pub fn film_backward<S: Scalar>(
    go: &[S],
    x: &[S],
    gamma: &[S],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::zero(); x.len()];
    let mut gg = vec![S::zero(); n * c];
    let mut gb = vec![S::zero(); n * c];
    for p in 0..n * c {
        let g = gamma[p];
        let gos = &go[p * hw..][..hw];
        let xs = &x[p * hw..][..hw];
        let gxs = &mut gx[p * hw..][..hw];
        let mut sg = S::zero();
        let mut sb = S::zero();
        for i in 0..hw {
            gxs[i] = g * gos[i];
            sg = sg + gos[i] * xs[i];
            sb = sb + gos[i];
        }
        gg[p] = sg;
        gb[p] = sb;
    }
    (gx, gg, gb)
}
