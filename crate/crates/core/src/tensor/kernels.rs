//! Raw forward/backward kernels over row-major `f64` buffers.
//!
//! Parallel loops are split by output element only, so every kernel is
//! bit-reproducible across thread counts.

use crate::par;

/// `dst[y][x] += w * src[y + dy][x + dx]` over the in-bounds region.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], w: f64, dy: isize, dx: isize, h: usize, wd: usize) {
    let (h, wd) = (h as isize, wd as isize);
    let y0 = 0.max(-dy);
    let y1 = h.min(h - dy);
    let x0 = 0.max(-dx);
    let x1 = wd.min(wd - dx);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    let len = (x1 - x0) as usize;
    for y in y0..y1 {
        let d = (y * wd + x0) as usize;
        let s = ((y + dy) * wd + x0 + dx) as usize;
        let drow = &mut dst[d..d + len];
        let srow = &src[s..s + len];
        for (o, i) in drow.iter_mut().zip(srow) {
            *o += w * i;
        }
    }
}

/// `sum over in-bounds (y, x) of a[y][x] * b[y + dy][x + dx]`.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], dy: isize, dx: isize, h: usize, wd: usize) -> f64 {
    let (h, wd) = (h as isize, wd as isize);
    let y0 = 0.max(-dy);
    let y1 = h.min(h - dy);
    let x0 = 0.max(-dx);
    let x1 = wd.min(wd - dx);
    if y0 >= y1 || x0 >= x1 {
        return 0.0;
    }
    let len = (x1 - x0) as usize;
    let mut acc = 0.0;
    for y in y0..y1 {
        let ia = (y * wd + x0) as usize;
        let ib = ((y + dy) * wd + x0 + dx) as usize;
        acc += dot(&a[ia..ia + len], &b[ib..ib + len]);
    }
    acc
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the loop vectorize; the order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.k;
        let pad = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - pad, (t % k) as isize - pad))
    }
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.h * self.w * self.cin_g() * self.k * self.k) as u64
    }
}

/// Grouped same-padded cross-correlation.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k * g.k);
    let mut out = vec![0.0; g.batch * g.cout * hw];
    par::for_each_chunk_mut(&mut out, hw, |idx, plane| {
        let (b, o) = (idx / g.cout, idx % g.cout);
        let grp = o / cout_g;
        if let Some(bias) = bias {
            plane.iter_mut().for_each(|v| *v = bias[o]);
        }
        for ci in 0..cin_g {
            let i = grp * cin_g + ci;
            let src = &x[(b * g.cin + i) * hw..(b * g.cin + i + 1) * hw];
            let wbase = (o * cin_g + ci) * kk;
            for (t, dy, dx) in g.offsets() {
                let wv = w[wbase + t];
                if wv != 0.0 {
                    shifted_axpy(plane, src, wv, dy, dx, g.h, g.w);
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, dbias)` for [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: ConvGeom,
    need_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let hw = g.h * g.w;
    let (cin_g, cout_g, kk) = (g.cin_g(), g.cout_g(), g.k * g.k);

    let mut dx = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut dx, hw, |idx, plane| {
        let (b, i) = (idx / g.cin, idx % g.cin);
        let grp = i / cin_g;
        let ci = i % cin_g;
        for o in grp * cout_g..(grp + 1) * cout_g {
            let src = &dout[(b * g.cout + o) * hw..(b * g.cout + o + 1) * hw];
            let wbase = (o * cin_g + ci) * kk;
            for (t, dy, dx_) in g.offsets() {
                let wv = w[wbase + t];
                if wv != 0.0 {
                    shifted_axpy(plane, src, wv, -dy, -dx_, g.h, g.w);
                }
            }
        }
    });

    let mut dw = vec![0.0; w.len()];
    par::for_each_chunk_mut(&mut dw, cin_g * kk, |o, wrow| {
        let grp = o / cout_g;
        for ci in 0..cin_g {
            let i = grp * cin_g + ci;
            for (t, dy, dx_) in g.offsets() {
                let mut acc = 0.0;
                for b in 0..g.batch {
                    let go = &dout[(b * g.cout + o) * hw..(b * g.cout + o + 1) * hw];
                    let xi = &x[(b * g.cin + i) * hw..(b * g.cin + i + 1) * hw];
                    acc += shifted_dot(go, xi, dy, dx_, g.h, g.w);
                }
                wrow[ci * kk + t] = acc;
            }
        }
    });

    let db = need_bias.then(|| {
        (0..g.cout)
            .map(|o| {
                (0..g.batch)
                    .map(|b| {
                        dout[(b * g.cout + o) * hw..(b * g.cout + o + 1) * hw]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    });
    (dx, dw, db)
}

/// Batched `[n, m, k] x [n, k, p] -> [n, m, p]`.
pub(crate) fn matmul_forward(
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    k: usize,
    p: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; n * m * p];
    par::for_each_chunk_mut(&mut c, p, |row, crow| {
        let (bi, i) = (row / m, row % m);
        let arow = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let bmat = &b[bi * k * p..(bi + 1) * k * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(crow, av, &bmat[kk * p..(kk + 1) * p]);
            }
        }
    });
    c
}

pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; a.len()];
    par::for_each_chunk_mut(&mut da, k, |row, darow| {
        let (bi, i) = (row / m, row % m);
        let dcrow = &dc[(bi * m + i) * p..(bi * m + i + 1) * p];
        let bmat = &b[bi * k * p..(bi + 1) * k * p];
        for (kk, d) in darow.iter_mut().enumerate() {
            *d = dot(dcrow, &bmat[kk * p..(kk + 1) * p]);
        }
    });
    let mut db = vec![0.0; b.len()];
    par::for_each_chunk_mut(&mut db, p, |row, dbrow| {
        let (bi, kk) = (row / k, row % k);
        for i in 0..m {
            let av = a[(bi * m + i) * k + kk];
            if av != 0.0 {
                axpy(dbrow, av, &dc[(bi * m + i) * p..(bi * m + i + 1) * p]);
            }
        }
    });
    (da, db)
}

/// Fused scaled dot-product attention over `[n, t, d]` inputs, never
/// materializing the `t x t` score matrix. Returns the output and the per-row
/// log-sum-exp needed by the backward pass.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    t: usize,
    d: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * t * d];
    let mut lse = vec![0.0; n * t];
    par::for_each_chunk_mut2(&mut out, d, &mut lse, 1, |row, orow, l| {
        let bi = row / t;
        let qrow = &q[row * d..(row + 1) * d];
        let kmat = &k[bi * t * d..(bi + 1) * t * d];
        let vmat = &v[bi * t * d..(bi + 1) * t * d];
        let mut scores: Vec<f64> = (0..t)
            .map(|j| scale * dot(qrow, &kmat[j * d..(j + 1) * d]))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, &e) in scores.iter().enumerate() {
            axpy(orow, e / sum, &vmat[j * d..(j + 1) * d]);
        }
        l[0] = max + sum.ln();
    });
    (out, lse)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    dout: &[f64],
    n: usize,
    t: usize,
    d: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // delta_i = sum_j p_ij * dp_ij = dO_i . O_i
    let delta: Vec<f64> = (0..n * t)
        .map(|r| dot(&dout[r * d..(r + 1) * d], &out[r * d..(r + 1) * d]))
        .collect();

    let mut dq = vec![0.0; q.len()];
    par::for_each_chunk_mut(&mut dq, d, |row, dqrow| {
        let bi = row / t;
        let qrow = &q[row * d..(row + 1) * d];
        let dorow = &dout[row * d..(row + 1) * d];
        for j in 0..t {
            let kj = &k[(bi * t + j) * d..(bi * t + j + 1) * d];
            let vj = &v[(bi * t + j) * d..(bi * t + j + 1) * d];
            let p = (scale * dot(qrow, kj) - lse[row]).exp();
            let ds = p * (dot(dorow, vj) - delta[row]);
            axpy(dqrow, scale * ds, kj);
        }
    });

    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    par::for_each_chunk_mut2(&mut dk, d, &mut dv, d, |row, dkrow, dvrow| {
        let bi = row / t;
        let kj = &k[row * d..(row + 1) * d];
        let vj = &v[row * d..(row + 1) * d];
        for i in 0..t {
            let r = bi * t + i;
            let qi = &q[r * d..(r + 1) * d];
            let doi = &dout[r * d..(r + 1) * d];
            let p = (scale * dot(qi, kj) - lse[r]).exp();
            axpy(dvrow, p, doi);
            let ds = p * (dot(doi, vj) - delta[r]);
            axpy(dkrow, scale * ds, qi);
        }
    });
    (dq, dk, dv)
}

/// Layer norm across axis 1 of `[b, c, p]`. Returns `(y, xhat, inv_std)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    b: usize,
    c: usize,
    p: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; b * p];
    let mut inv = vec![0.0; b * p];
    const CHUNK: usize = 1024;
    par::for_each_chunk_mut2(&mut mean, CHUNK, &mut inv, CHUNK, |ci, mchunk, ichunk| {
        let start = ci * CHUNK;
        for (off, (m, iv)) in mchunk.iter_mut().zip(ichunk.iter_mut()).enumerate() {
            let flat = start + off;
            let (bi, pi) = (flat / p, flat % p);
            let base = bi * c * p + pi;
            let mut s = 0.0;
            for ch in 0..c {
                s += x[base + ch * p];
            }
            let mu = s / c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let dlt = x[base + ch * p] - mu;
                var += dlt * dlt;
            }
            *m = mu;
            *iv = 1.0 / (var / c as f64 + eps).sqrt();
        }
    });
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    par::for_each_chunk_mut2(&mut xhat, p, &mut y, p, |plane, xh, yp| {
        let (bi, ch) = (plane / c, plane % c);
        let src = &x[plane * p..(plane + 1) * p];
        let m = &mean[bi * p..(bi + 1) * p];
        let iv = &inv[bi * p..(bi + 1) * p];
        for j in 0..p {
            let n = (src[j] - m[j]) * iv[j];
            xh[j] = n;
            yp[j] = n * gamma[ch] + beta[ch];
        }
    });
    (y, xhat, inv)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    inv: &[f64],
    gamma: &[f64],
    dy: &[f64],
    b: usize,
    c: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Per-location sums of dxhat and dxhat * xhat.
    let mut s1 = vec![0.0; b * p];
    let mut s2 = vec![0.0; b * p];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * p;
            let gch = gamma[ch];
            for j in 0..p {
                let dxh = dy[base + j] * gch;
                s1[bi * p + j] += dxh;
                s2[bi * p + j] += dxh * xhat[base + j];
            }
        }
    }
    let cf = c as f64;
    let mut dx = vec![0.0; xhat.len()];
    par::for_each_chunk_mut(&mut dx, p, |plane, dxp| {
        let (bi, ch) = (plane / c, plane % c);
        let base = plane * p;
        for j in 0..p {
            let loc = bi * p + j;
            let dxh = dy[base + j] * gamma[ch];
            dxp[j] = inv[loc] / cf * (cf * dxh - s1[loc] - xhat[base + j] * s2[loc]);
        }
    });
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * p;
            dgamma[ch] += dot(&dy[base..base + p], &xhat[base..base + p]);
            dbeta[ch] += dy[base..base + p].iter().sum::<f64>();
        }
    }
    (dx, dgamma, dbeta)
}

/// Applies `f` to every lane of length `a` with stride `inner` inside each
/// `[outer, a, inner]` block; `f` receives the gathered lane and writes back.
fn for_each_lane(
    data: &mut [f64],
    a: usize,
    inner: usize,
    f: impl Fn(usize, &mut [f64]) + Sync + Send,
) {
    if inner == 1 {
        par::for_each_chunk_mut(data, a, |lane, row| f(lane, row));
        return;
    }
    par::for_each_chunk_mut(data, a * inner, |o, block| {
        let mut buf = vec![0.0; a];
        for i in 0..inner {
            for j in 0..a {
                buf[j] = block[j * inner + i];
            }
            f(o * inner + i, &mut buf);
            for j in 0..a {
                block[j * inner + i] = buf[j];
            }
        }
    });
}

/// Gathers lane `lane` of a `[outer, a, inner]` buffer.
fn lane_values(data: &[f64], a: usize, inner: usize, lane: usize) -> Vec<f64> {
    let (o, i) = (lane / inner, lane % inner);
    (0..a).map(|j| data[(o * a + j) * inner + i]).collect()
}

pub(crate) fn softmax_forward(x: &[f64], a: usize, inner: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for_each_lane(&mut y, a, inner, |_, lane| {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    });
    y
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], a: usize, inner: usize) -> Vec<f64> {
    let mut dx = dy.to_vec();
    for_each_lane(&mut dx, a, inner, |lane_idx, lane| {
        let ys = lane_values(y, a, inner, lane_idx);
        let s: f64 = ys.iter().zip(lane.iter()).map(|(p, g)| p * g).sum();
        for (g, p) in lane.iter_mut().zip(&ys) {
            *g = p * (*g - s);
        }
    });
    dx
}

/// Returns `(y, norms)` with one clamped norm per lane.
pub(crate) fn l2_normalize_forward(
    x: &[f64],
    outer: usize,
    a: usize,
    inner: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = x.to_vec();
    for_each_lane(&mut y, a, inner, |_, lane| {
        let n = lane.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        lane.iter_mut().for_each(|v| *v /= n);
    });
    let norms = (0..outer * inner)
        .map(|lane| {
            lane_values(x, a, inner, lane)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (y, norms)
}

pub(crate) fn l2_normalize_backward(
    y: &[f64],
    norms: &[f64],
    dy: &[f64],
    a: usize,
    inner: usize,
    eps: f64,
) -> Vec<f64> {
    let mut dx = dy.to_vec();
    for_each_lane(&mut dx, a, inner, |lane_idx, lane| {
        let n = norms[lane_idx];
        if n > eps {
            let ys = lane_values(y, a, inner, lane_idx);
            let s: f64 = ys.iter().zip(lane.iter()).map(|(p, g)| p * g).sum();
            for (g, p) in lane.iter_mut().zip(&ys) {
                *g = (*g - p * s) / n;
            }
        } else {
            lane.iter_mut().for_each(|g| *g /= eps);
        }
    });
    dx
}

/// Space-to-depth: `[b, c, h, w] -> [b, c r^2, h/r, w/r]`.
pub(crate) fn pixel_unshuffle(x: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![0.0; x.len()];
    let co = c * r * r;
    par::for_each_chunk_mut(&mut out, ho * wo, |plane, dst| {
        let (bi, oc) = (plane / co, plane % co);
        let (ci, i, j) = (oc / (r * r), (oc / r) % r, oc % r);
        let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y * r + i) * w + xx * r + j];
            }
        }
    });
    out
}

/// Depth-to-space: `[b, c, h, w] -> [b, c/r^2, h r, w r]`.
pub(crate) fn pixel_shuffle(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<f64> {
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; x.len()];
    let _ = b;
    par::for_each_chunk_mut(&mut out, ho * wo, |plane, dst| {
        let (bi, oc) = (plane / co, plane % co);
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                let src = &x[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[(y * r + i) * wo + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    });
    out
}

/// General axis permutation; `axes[k]` is the input axis placed at output axis `k`.
pub(crate) fn permute(x: &[f64], dims: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = dims.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let last = out_dims[nd - 1];
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, last, |row, dst| {
        // Decompose the row index over the leading output dims.
        let mut rem = row;
        let mut base = 0;
        for k in (0..nd - 1).rev() {
            let idx = rem % out_dims[k];
            rem /= out_dims[k];
            base += idx * strides[k];
        }
        let s = strides[nd - 1];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = x[base + j * s];
        }
    });
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
