//! Forward and backward kernels for the encoder's building blocks.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Real;

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn cast<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// `x W + b` with `W` stored as (in, out).
pub(crate) fn linear<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients, returns the input gradient.
pub(crate) fn linear_backward<F: Real>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    ndarray::linalg::general_mat_mul(F::one(), &x.t(), dy, F::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct NormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Real>(
    x: &Array2<F>,
    scale: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, NormCache<F>) {
    let n = x.ncols();
    let inv_n = cast::<F>(1.0 / n as f64);
    let eps = cast::<F>(NORM_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() * inv_n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) * inv_n;
        let s = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * s);
        *r = s;
    }
    let mut y = &xhat * scale;
    y += bias;
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    scale: &Array1<F>,
    dy: &Array2<F>,
    dscale: &mut Array1<F>,
    dbias: &mut Array1<F>,
) -> Array2<F> {
    *dscale += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let n = dy.ncols();
    let inv_n = cast::<F>(1.0 / n as f64);
    let mut dx = dy * scale;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() * inv_n;
        let mean_dx = row.iter().zip(xh.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x) * inv_n;
        for (d, &x) in row.iter_mut().zip(xh.iter()) {
            *d = s * (*d - mean_d - x * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU
pub(crate) fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    let k = cast::<F>((2.0 / std::f64::consts::PI).sqrt());
    let c = cast::<F>(GELU_C);
    let half = cast::<F>(0.5);
    x.mapv(|v| half * v * (F::one() + (k * (v + c * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let k = cast::<F>((2.0 / std::f64::consts::PI).sqrt());
    let c = cast::<F>(GELU_C);
    let c3 = cast::<F>(3.0 * GELU_C);
    let half = cast::<F>(0.5);
    let mut out = dy.to_owned();
    ndarray::Zip::from(&mut out).and(x).for_each(|d, &v| {
        let t = (k * (v + c * v * v * v)).tanh();
        let dt = (F::one() - t * t) * k * (F::one() + c3 * v * v);
        *d *= half * (F::one() + t) + half * v * dt;
    });
    out
}

/// Softmax attention restricted to groups of positions (one group per row
/// for row attention, one per column for column attention). Positions in
/// no group get a zero context vector.
pub(crate) struct GroupAttention<'a> {
    pub groups: &'a [Vec<usize>],
    pub heads: usize,
}

/// Per group and head, the row-major `len x len` probability matrix.
pub(crate) type AttentionProbs<F> = Vec<Vec<Vec<F>>>;

impl GroupAttention<'_> {
    pub fn forward<F: Real>(
        &self,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
    ) -> (Array2<F>, AttentionProbs<F>) {
        let hidden = q.ncols();
        let dh = hidden / self.heads;
        let scale = cast::<F>(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (slice(q), slice(k), slice(v));
        let mut ctx = Array2::<F>::zeros(q.raw_dim());
        let out = ctx.as_slice_mut().expect("standard layout");
        let mut probs = Vec::with_capacity(self.groups.len());

        for group in self.groups {
            let len = group.len();
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let off = h * dh;
                let mut p = vec![F::zero(); len * len];
                for (i, &pi) in group.iter().enumerate() {
                    let qi = &qs[pi * hidden + off..pi * hidden + off + dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = F::neg_infinity();
                    for (j, &pj) in group.iter().enumerate() {
                        let kj = &ks[pj * hidden + off..pj * hidden + off + dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                    let oi = &mut out[pi * hidden + off..pi * hidden + off + dh];
                    for (j, &pj) in group.iter().enumerate() {
                        let w = row[j];
                        let vj = &vs[pj * hidden + off..pj * hidden + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        (ctx, probs)
    }

    pub fn backward<F: Real>(
        &self,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
        probs: &AttentionProbs<F>,
        dctx: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let hidden = q.ncols();
        let dh = hidden / self.heads;
        let scale = cast::<F>(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs, dos) = (slice(q), slice(k), slice(v), slice(dctx));
        let mut dq = Array2::<F>::zeros(q.raw_dim());
        let mut dk = Array2::<F>::zeros(q.raw_dim());
        let mut dv = Array2::<F>::zeros(q.raw_dim());
        let (dqs, dks, dvs) = (
            dq.as_slice_mut().expect("standard layout"),
            dk.as_slice_mut().expect("standard layout"),
            dv.as_slice_mut().expect("standard layout"),
        );

        for (group, per_head) in self.groups.iter().zip(probs) {
            let len = group.len();
            let mut ds = vec![F::zero(); len];
            for (h, p) in per_head.iter().enumerate() {
                let off = h * dh;
                let at = |pos: usize| pos * hidden + off..pos * hidden + off + dh;
                for (i, &pi) in group.iter().enumerate() {
                    let doi = &dos[at(pi)];
                    let prow = &p[i * len..(i + 1) * len];
                    let mut weighted = F::zero();
                    for (j, &pj) in group.iter().enumerate() {
                        let dp = dot(doi, &vs[at(pj)]);
                        ds[j] = dp;
                        weighted += prow[j] * dp;
                        let dvj = &mut dvs[at(pj)];
                        for (d, &g) in dvj.iter_mut().zip(doi) {
                            *d += prow[j] * g;
                        }
                    }
                    for j in 0..len {
                        ds[j] = prow[j] * (ds[j] - weighted) * scale;
                    }
                    let qi = &qs[at(pi)];
                    for (j, &pj) in group.iter().enumerate() {
                        let g = ds[j];
                        let kj = &ks[at(pj)];
                        let dqi = &mut dqs[at(pi)];
                        for (d, &x) in dqi.iter_mut().zip(kj) {
                            *d += g * x;
                        }
                        let dkj = &mut dks[at(pj)];
                        for (d, &x) in dkj.iter_mut().zip(qi) {
                            *d += g * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Log-sum-exp of one logit row.
pub(crate) fn log_sum_exp<F: Real>(row: ArrayView2<'_, F>, r: usize) -> F {
    let row = row.row(r);
    let max = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    max + row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let x: Array2<f64> = array![[1.0, 2.0, 3.0, 6.0], [0.5, -0.5, 0.5, -0.5]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let x = array![[0.3, -1.2, 2.0], [0.1, 0.4, -0.7]];
        let scale = array![1.5, -0.5, 0.8];
        let bias = array![0.1, 0.2, 0.3];
        let w = array![[0.2, -1.0, 0.7], [1.1, 0.3, -0.4]];
        let f = |x: &Array2<f64>| (&layer_norm(x, &scale, &bias).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &scale, &bias);
        let mut ds = Array1::zeros(3);
        let mut db = Array1::zeros(3);
        let dx = layer_norm_backward(&cache, &scale, &w, &mut ds, &mut db);
        assert_close(&dx, &numeric_grad(f, &x), 1e-6);
    }

    #[test]
    fn gelu_gradient() {
        let x = array![[-3.0, -0.5, 0.0, 0.7, 2.5]];
        let f = |x: &Array2<f64>| gelu(x).sum();
        let dx = gelu_backward(&x, &Array2::ones(x.raw_dim()));
        assert_close(&dx, &numeric_grad(f, &x), 1e-6);
        assert!(gelu(&array![[0.0_f64]])[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn attention_gradient_and_isolation() {
        // 5 positions, two groups; position 4 belongs to none
        let groups = vec![vec![0, 2, 3], vec![1]];
        let att = GroupAttention { groups: &groups, heads: 2 };
        let q = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let k = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j * 5) % 7) as f64 * 0.2 - 0.5);
        let v = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.4 - 0.3);
        let w = Array2::from_shape_fn((5, 4), |(i, j)| ((i * j + 1) % 3) as f64 - 1.0);

        let (ctx, probs) = att.forward(&q, &k, &v);
        assert!(ctx.row(4).iter().all(|&x| x == 0.0));
        // singleton group copies its own value vector
        assert_close(&ctx.row(1).to_owned().insert_axis(Axis(0)), &v.row(1).to_owned().insert_axis(Axis(0)), 1e-12);

        let (dq, dk, dv) = att.backward(&q, &k, &v, &probs, &w);
        let fq = |x: &Array2<f64>| (&att.forward(x, &k, &v).0 * &w).sum();
        let fk = |x: &Array2<f64>| (&att.forward(&q, x, &v).0 * &w).sum();
        let fv = |x: &Array2<f64>| (&att.forward(&q, &k, x).0 * &w).sum();
        assert_close(&dq, &numeric_grad(fq, &q), 1e-6);
        assert_close(&dk, &numeric_grad(fk, &k), 1e-6);
        assert_close(&dv, &numeric_grad(fv, &v), 1e-6);
    }
}
