use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2};

use super::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub(crate) const ROTARY_BASE: f64 = 10_000.0;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(SQRT_2_OVER_PI) * (x + F::of(GELU_C) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(SQRT_2_OVER_PI) * (x + F::of(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = F::of(SQRT_2_OVER_PI) * (F::one() + F::of(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn normalize_rows<F: Scalar>(x: ArrayView2<F>, eps: F) -> (Array2<F>, Array1<F>) {
    let n = F::of(x.ncols() as f64);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *r = inv;
    }
    (xhat, rstd)
}

pub(crate) fn layer_norm_backward<F: Scalar>(
    dxhat: ArrayView2<F>,
    xhat: ArrayView2<F>,
    rstd: ArrayView1<F>,
) -> Array2<F> {
    let n = F::of(dxhat.ncols() as f64);
    let mut gx = Array2::zeros(dxhat.dim());
    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(i);
        let xh = xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dhx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        let r = rstd[i];
        for ((g, &a), &b) in row.iter_mut().zip(dh).zip(xh) {
            *g = r * (a - mean_dh - b * mean_dhx);
        }
    }
    gx
}

/// Rotates component pairs `(2i, 2i+1)` of each head by `t·base^(-2i/hd)`
/// where `t` is the row index; `inverse` rotates by the negative angle.
pub(crate) fn rotary<F: Scalar>(x: ArrayView2<F>, heads: usize, inverse: bool) -> Array2<F> {
    let (t, d) = x.dim();
    assert!(heads > 0 && d % heads == 0, "model dim not divisible by heads");
    let hd = d / heads;
    assert!(hd % 2 == 0, "rotary needs an even head dimension, got {hd}");
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROTARY_BASE.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.to_owned();
    for pos in 0..t {
        let mut row = out.row_mut(pos);
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * pos as f64 * f;
            let (sin, cos) = (F::of(angle.sin()), F::of(angle.cos()));
            for h in 0..heads {
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_inplace<F: Scalar>(mut x: ArrayViewMut2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Scalar>(x: ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    softmax_rows_inplace(out.view_mut());
    out
}

fn head_scores<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>) -> Array2<F> {
    let scale = F::of(1.0 / (q.ncols() as f64).sqrt());
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|v| v * scale);
    softmax_rows_inplace(scores.view_mut());
    scores
}

/// Per-head attention weight matrices `softmax(Q_h K_hᵀ / √d_h)`.
pub fn attention_weights<F: Scalar>(q: ArrayView2<F>, k: ArrayView2<F>, heads: usize) -> Vec<Array2<F>> {
    let hd = q.ncols() / heads;
    (0..heads)
        .map(|h| {
            let cols = s![.., h * hd..(h + 1) * hd];
            head_scores(q.slice(cols), k.slice(cols))
        })
        .collect()
}

pub(crate) fn attention_forward<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    heads: usize,
) -> Array2<F> {
    let hd = q.ncols() / heads;
    let t = q.nrows();
    let mut out = Array2::zeros(q.dim());
    for h in 0..heads {
        let c = h * hd..(h + 1) * hd;
        let (kh, vh) = (k.slice(s![.., c.clone()]), v.slice(s![.., c.clone()]));
        // softmax is row-wise, so query blocks keep the live score matrix
        // at ATTENTION_ROW_BLOCK × T instead of T × T
        for r in (0..t).step_by(ATTENTION_ROW_BLOCK) {
            let rows = r..(r + ATTENTION_ROW_BLOCK).min(t);
            let p = head_scores(q.slice(s![rows.clone(), c.clone()]), kh);
            out.slice_mut(s![rows, c.clone()]).assign(&p.dot(&vh));
        }
    }
    out
}

const ATTENTION_ROW_BLOCK: usize = 256;

pub(crate) fn attention_backward<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    gout: ArrayView2<F>,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let hd = q.ncols() / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut gq = Array2::zeros(q.dim());
    let mut gk = Array2::zeros(k.dim());
    let mut gv = Array2::zeros(v.dim());
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh, go) = (q.slice(cols), k.slice(cols), v.slice(cols), gout.slice(cols));
        let p = head_scores(qh, kh);
        gv.slice_mut(cols).assign(&p.t().dot(&go));
        let mut ds = go.dot(&vh.t());
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
            drow.zip_mut_with(&prow, |d, &pv| *d = pv * (*d - dot) * scale);
        }
        gq.slice_mut(cols).assign(&ds.dot(&kh));
        gk.slice_mut(cols).assign(&ds.t().dot(&qh));
    }
    (gq, gk, gv)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub len: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn new(len: usize, c_in: usize, kernel: usize, stride: usize, pad_left: usize, pad_right: usize) -> Self {
        let padded = len + pad_left + pad_right;
        assert!(stride > 0 && kernel > 0);
        assert!(padded >= kernel, "input shorter than the convolution kernel");
        Self {
            len,
            c_in,
            kernel,
            stride,
            pad_left,
            out_len: (padded - kernel) / stride + 1,
        }
    }

    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j)
            .checked_sub(self.pad_left)
            .filter(|&i| i < self.len)
    }
}

pub(crate) fn im2col<F: Scalar>(x: ArrayView2<F>, g: &ConvGeom) -> Array2<F> {
    let mut patches = Array2::zeros((g.out_len, g.kernel * g.c_in));
    for (t, mut row) in patches.rows_mut().into_iter().enumerate() {
        for j in 0..g.kernel {
            if let Some(src) = g.source(t, j) {
                row.slice_mut(s![j * g.c_in..(j + 1) * g.c_in]).assign(&x.row(src));
            }
        }
    }
    patches
}

pub(crate) fn col2im<F: Scalar>(gpatches: ArrayView2<F>, g: &ConvGeom) -> Array2<F> {
    let mut gx = Array2::zeros((g.len, g.c_in));
    for (t, row) in gpatches.rows().into_iter().enumerate() {
        for j in 0..g.kernel {
            if let Some(src) = g.source(t, j) {
                let mut dst = gx.row_mut(src);
                dst += &row.slice(s![j * g.c_in..(j + 1) * g.c_in]);
            }
        }
    }
    gx
}

pub(crate) fn depthwise_forward<F: Scalar>(x: ArrayView2<F>, w: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (t, _) = x.dim();
    let k = w.nrows();
    let pad = k / 2;
    let mut out = b.broadcast(x.dim()).expect("bias").to_owned();
    for i in 0..t {
        let mut orow = out.row_mut(i);
        for j in 0..k {
            let Some(src) = (i + j).checked_sub(pad).filter(|&s| s < t) else {
                continue;
            };
            let xs = x.row(src);
            let wj = w.row(j);
            for ((o, &xv), &wv) in orow.iter_mut().zip(xs).zip(wj) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<F: Scalar>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    gout: ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let (t, _) = x.dim();
    let k = w.nrows();
    let pad = k / 2;
    let mut gx = Array2::zeros(x.dim());
    let mut gw = Array2::zeros(w.dim());
    for i in 0..t {
        let go = gout.row(i);
        for j in 0..k {
            let Some(src) = (i + j).checked_sub(pad).filter(|&s| s < t) else {
                continue;
            };
            let xs = x.row(src);
            let wj = w.row(j);
            let mut gxs = gx.row_mut(src);
            for ((gxv, &g), &wv) in gxs.iter_mut().zip(go).zip(wj) {
                *gxv += g * wv;
            }
            let mut gwj = gw.row_mut(j);
            for ((gwv, &g), &xv) in gwj.iter_mut().zip(go).zip(xs) {
                *gwv += g * xv;
            }
        }
    }
    (gx, gw)
}

/// Mean log-sum-exp cross-entropy over `rows`; optionally returns the
/// gradient with respect to the logits (zero outside `rows`).
pub(crate) fn masked_ce<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[usize],
    rows: &[usize],
    want_grad: bool,
) -> (F, Option<Array2<F>>) {
    let mut grad = want_grad.then(|| Array2::zeros(logits.dim()));
    if rows.is_empty() {
        return (F::zero(), grad);
    }
    let inv = 1.0 / rows.len() as f64;
    let mut total = 0.0f64;
    for &r in rows {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|&v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[targets[r]].as_f64();
        if let Some(g) = grad.as_mut() {
            let mut grow = g.row_mut(r);
            for (gv, &v) in grow.iter_mut().zip(row) {
                *gv = F::of((v.as_f64() - lse).exp() * inv);
            }
            grow[targets[r]] -= F::of(inv);
        }
    }
    (F::of(total * inv), grad)
}

pub(crate) fn masked_mse<F: Scalar>(pred: ArrayView2<F>, target: ArrayView2<F>, rows: &[usize]) -> F {
    if rows.is_empty() {
        return F::zero();
    }
    let cols = pred.ncols();
    let sum: f64 = rows
        .iter()
        .flat_map(|&r| pred.row(r).into_iter().zip(target.row(r)))
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    F::of(sum / (rows.len() * cols) as f64)
}

pub(crate) fn masked_mse_grad<F: Scalar>(pred: ArrayView2<F>, target: ArrayView2<F>, rows: &[usize]) -> Array2<F> {
    let mut g = Array2::zeros(pred.dim());
    if rows.is_empty() {
        return g;
    }
    let c = F::of(2.0 / (rows.len() * pred.ncols()) as f64);
    for &r in rows {
        let diff = &pred.row(r) - &target.row(r);
        g.slice_mut(s![r, ..]).assign(&diff.mapv(|d| d * c));
    }
    g
}
