//! Dense kernels on row-major slices.

use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `out = a (m x k) * b (k x n) + bias`, overwriting `out`.
pub(crate) fn matmul_bias<F: Real>(
    a: &[F],
    b: &[F],
    bias: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.copy_from_slice(bias);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Backward of `out = a b + bias`: accumulates `db += a^T dout`,
/// `dbias += sum_rows dout` and, when requested, writes `da = dout b^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_bias_backward<F: Real>(
    a: &[F],
    b: &[F],
    dout: &[F],
    m: usize,
    k: usize,
    n: usize,
    db: &mut [F],
    dbias: &mut [F],
    da: Option<&mut [F]>,
) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for (acc, &g) in dbias.iter_mut().zip(drow) {
            *acc += g;
        }
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (acc, &g) in dbrow.iter_mut().zip(drow) {
                *acc += av * g;
            }
        }
    }
    if let Some(da) = da {
        for i in 0..m {
            let drow = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let mut s = F::zero();
                for (&g, &bv) in drow.iter().zip(brow) {
                    s += g * bv;
                }
                da[i * k + p] = s;
            }
        }
    }
}

/// Row-wise layer norm. Returns `(normalized, rstd)` for the backward pass.
pub(crate) fn layer_norm<F: Real>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    rows: usize,
    d: usize,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let mut xhat = vec![F::zero(); rows * d];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::c(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (xhat, rstd)
}

/// Accumulates gain/bias gradients and writes `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    rows: usize,
    d: usize,
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let inv_d = F::c(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_x = F::zero();
        for c in 0..d {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_x += dxhat[c] * xr[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_x *= inv_d;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_x);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<F: Real>(u: F) -> F {
    let t = (F::c(GELU_C) * (u + F::c(GELU_A) * u * u * u)).tanh();
    F::c(0.5) * u * (F::one() + t)
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::c(GELU_C);
    let a = F::c(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    F::c(0.5) * (F::one() + t)
        + F::c(0.5) * u * (F::one() - t * t) * c * (F::one() + F::c(3.0) * a * u * u)
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}
