//! Forward and backward kernels on row-major `f64` buffers. Backward
//! functions accumulate parameter gradients with `+=`.

pub(crate) const LN_EPS: f64 = 1e-6;

/// `y[n, m] = x[n, k] · w[k, m] + b[m]`
pub(crate) fn linear(x: &[f64], n: usize, k: usize, w: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    let mut y = Vec::with_capacity(n * m);
    for row in x.chunks_exact(k) {
        let start = y.len();
        y.extend_from_slice(b);
        let out = &mut y[start..];
        for (a, wrow) in row.iter().zip(w.chunks_exact(m)) {
            if *a == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    }
    y
}

/// Accumulates `dw`, `db` and returns `dx` when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    k: usize,
    w: &[f64],
    m: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    for (xrow, dyrow) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
        for (g, d) in db.iter_mut().zip(dyrow) {
            *g += d;
        }
        for (a, dwrow) in xrow.iter().zip(dw.chunks_exact_mut(m)) {
            if *a == 0.0 {
                continue;
            }
            for (g, d) in dwrow.iter_mut().zip(dyrow) {
                *g += a * d;
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = Vec::with_capacity(x.len());
    for dyrow in dy.chunks_exact(m) {
        for wrow in w.chunks_exact(m) {
            dx.push(dot(wrow, dyrow));
        }
    }
    Some(dx)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorizes
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for ((v, gv), bv) in row.iter().zip(g).zip(b) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * gv + bv);
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    d: usize,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![0.0; d];
    for ((dyrow, xrow), r) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)).zip(&cache.rstd) {
        for j in 0..d {
            dg[j] += dyrow[j] * xrow[j];
            db[j] += dyrow[j];
            dxhat[j] = dyrow[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xrow) / d as f64;
        for j in 0..d {
            dx.push(r * (dxhat[j] - mean_d - xrow[j] * mean_dx));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|u| 0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh()))
        .collect()
}

/// `dx = dy * gelu'(x)`
pub(crate) fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(u, d)| {
            let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u);
            d * (0.5 * (1.0 + t) + 0.5 * u * dt)
        })
        .collect()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head self-attention core on a packed `[n, 3d]` q|k|v buffer.
/// Returns the concatenated head outputs `[n, d]` and the attention
/// probabilities `[heads, n, n]`.
pub(crate) fn attention(qkv: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let q = &qkv[i * stride + qo..i * stride + qo + dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q, &qkv[j * stride + ko..j * stride + ko + dh]) * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, s) in row.iter_mut().enumerate() {
                *s /= total;
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                for (ov, vv) in o.iter_mut().zip(v) {
                    *ov += *s * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradient of [`attention`] with respect to the packed qkv buffer.
pub(crate) fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let mut dqkv = vec![0.0; n * stride];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let go = &dout[i * d + h * dh..i * d + (h + 1) * dh];
            // dP and dV
            for j in 0..n {
                let v = &qkv[j * stride + vo..j * stride + vo + dh];
                dp[j] = dot(go, v);
                let dv = &mut dqkv[j * stride + vo..j * stride + vo + dh];
                for (g, o) in dv.iter_mut().zip(go) {
                    *g += p[j] * o;
                }
            }
            // softmax jacobian
            let inner = dot(p, &dp);
            for j in 0..n {
                let ds = p[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    let kv = qkv[j * stride + ko + t];
                    let qv = qkv[i * stride + qo + t];
                    dqkv[i * stride + qo + t] += ds * kv;
                    dqkv[j * stride + ko + t] += ds * qv;
                }
            }
        }
    }
    dqkv
}

/// 3x3 convolution with zero padding on a channels-last `[h, w, cin]` grid.
/// Weight rows are indexed `(ky * 3 + kx) * cin + ci`.
pub(crate) fn conv3x3(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; h * w * cout];
    for yy in 0..h {
        for xx in 0..w {
            let out = &mut y[(yy * w + xx) * cout..(yy * w + xx + 1) * cout];
            out.copy_from_slice(bias);
            for ky in 0..3 {
                let sy = yy + ky;
                if sy < 1 || sy > h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > w {
                        continue;
                    }
                    let src = &x[((sy - 1) * w + sx - 1) * cin..((sy - 1) * w + sx) * cin];
                    let wk = &weight[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (a, wrow) in src.iter().zip(wk.chunks_exact(cout)) {
                        for (o, wv) in out.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    dy: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * cin];
    for yy in 0..h {
        for xx in 0..w {
            let g = &dy[(yy * w + xx) * cout..(yy * w + xx + 1) * cout];
            for (b, gv) in dbias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..3 {
                let sy = yy + ky;
                if sy < 1 || sy > h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > w {
                        continue;
                    }
                    let base = ((sy - 1) * w + sx - 1) * cin;
                    let k0 = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = x[base + ci];
                        let wrow = &weight[k0 + ci * cout..k0 + (ci + 1) * cout];
                        let dwrow = &mut dweight[k0 + ci * cout..k0 + (ci + 1) * cout];
                        for (dwv, gv) in dwrow.iter_mut().zip(g) {
                            *dwv += a * gv;
                        }
                        dx[base + ci] += dot(wrow, g);
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    fn vals(n: usize, seed: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn layer_norm_gradient() {
        let d = 5;
        let x = vals(10, 1);
        let g = vals(5, 2);
        let b = vals(5, 3);
        let r = vals(10, 4);
        let loss = |x: &[f64]| dot(&layer_norm(x, d, &g, &b).0, &r);
        let (_, cache) = layer_norm(&x, d, &g, &b);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let dx = layer_norm_backward(&cache, d, &g, &r, &mut dg, &mut db);
        for i in 0..x.len() {
            assert!((dx[i] - numeric(loss, &x, i)).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_gradient() {
        let (n, d, heads) = (4, 6, 2);
        let qkv = vals(n * 3 * d, 5);
        let r = vals(n * d, 6);
        let loss = |q: &[f64]| dot(&attention(q, n, d, heads).0, &r);
        let (_, probs) = attention(&qkv, n, d, heads);
        let dq = attention_backward(&qkv, &probs, &r, n, d, heads);
        for i in 0..qkv.len() {
            assert!((dq[i] - numeric(loss, &qkv, i)).abs() < 1e-7, "i={i}");
        }
    }

    #[test]
    fn conv_gradient() {
        let (h, w, ci, co) = (3, 4, 2, 3);
        let x = vals(h * w * ci, 7);
        let wt = vals(9 * ci * co, 8);
        let b = vals(co, 9);
        let r = vals(h * w * co, 10);
        let (mut dw, mut db) = (vec![0.0; wt.len()], vec![0.0; co]);
        let dx = conv3x3_backward(&x, h, w, ci, &wt, co, &r, &mut dw, &mut db);
        let lx = |x: &[f64]| dot(&conv3x3(x, h, w, ci, &wt, &b, co), &r);
        let lw = |wt: &[f64]| dot(&conv3x3(&x, h, w, ci, wt, &b, co), &r);
        for i in 0..x.len() {
            assert!((dx[i] - numeric(lx, &x, i)).abs() < 1e-7);
        }
        for i in 0..wt.len() {
            assert!((dw[i] - numeric(lw, &wt, i)).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_gradient() {
        let (n, k, m) = (3, 4, 2);
        let x = vals(n * k, 11);
        let w = vals(k * m, 12);
        let b = vals(m, 13);
        let r = vals(n * m, 14);
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; m]);
        let dx = linear_backward(&x, k, &w, m, &r, &mut dw, &mut db, true).unwrap();
        let lx = |x: &[f64]| dot(&linear(x, n, k, &w, &b, m), &r);
        let lw = |w: &[f64]| dot(&linear(&x, n, k, w, &b, m), &r);
        for i in 0..x.len() {
            assert!((dx[i] - numeric(lx, &x, i)).abs() < 1e-8);
        }
        for i in 0..w.len() {
            assert!((dw[i] - numeric(lw, &w, i)).abs() < 1e-8);
        }
    }

    #[test]
    fn gelu_and_softplus() {
        let x = vals(20, 15);
        let ones = vec![1.0; 20];
        let d = gelu_backward(&x, &ones);
        for i in 0..x.len() {
            assert!((d[i] - numeric(|v| gelu(v).iter().sum(), &x, i)).abs() < 1e-8);
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(0.3) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
    }
}
