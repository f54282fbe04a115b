//! Dense row-major kernels shared by the learners. Matrices are stored as
//! `[rows x cols]` slices; weights are `[in x out]` so that `y = x W + b`.

pub const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `x[rows x m] W[m x n] + b` into a fresh buffer.
pub fn affine(x: &[f64], rows: usize, m: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * m);
    debug_assert_eq!(w.len(), m * n);
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        out.extend_from_slice(b);
        let row = &mut out[r * n..(r + 1) * n];
        for (i, &xi) in x[r * m..(r + 1) * m].iter().enumerate() {
            for (o, &wij) in row.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *o += xi * wij;
            }
        }
    }
    out
}

/// Accumulates `dW += x^T dy` and `db += colsum(dy)`.
pub fn affine_grad_params(
    x: &[f64],
    rows: usize,
    m: usize,
    dy: &[f64],
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dy_row = &dy[r * n..(r + 1) * n];
        for (d, &g) in db.iter_mut().zip(dy_row) {
            *d += g;
        }
        for (i, &xi) in x[r * m..(r + 1) * m].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (d, &g) in dw[i * n..(i + 1) * n].iter_mut().zip(dy_row) {
                *d += xi * g;
            }
        }
    }
}

/// Accumulates `dx += dy W^T`.
pub fn affine_grad_input(dy: &[f64], rows: usize, n: usize, w: &[f64], m: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let dy_row = &dy[r * n..(r + 1) * n];
        for i in 0..m {
            dx[r * m + i] += dot(dy_row, &w[i * n..(i + 1) * n]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * d];
    let mut cache = LayerNormCache {
        xhat: vec![0.0; rows * d],
        inv_std: vec![0.0; rows],
    };
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        cache.inv_std[r] = inv_std;
        for c in 0..d {
            let xh = (row[c] - mean) * inv_std;
            cache.xhat[r * d + c] = xh;
            y[r * d + c] = gamma[c] * xh + beta[c];
        }
    }
    (y, cache)
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward(
    dy: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    cache: &LayerNormCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        let dy_row = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            dgamma[c] += dy_row[c] * xhat[c];
            dbeta[c] += dy_row[c];
            dxhat[c] = dy_row[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xhat) / d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.inv_std[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    dx
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh())
}

#[inline]
pub fn gelu_grad(a: f64) -> f64 {
    let t = (GELU_C * (a + 0.044715 * a * a * a)).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * a * a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &a in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(a + h) - gelu(a - h)) / (2.0 * h);
            assert!((fd - gelu_grad(a)).abs() < 1e-8, "a={a}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn affine_small() {
        // [1 2] * [[1 0 2],[3 1 0]] + [1 1 1] = [8 3 3]
        let y = affine(
            &[1.0, 2.0],
            1,
            2,
            &[1.0, 0.0, 2.0, 3.0, 1.0, 0.0],
            &[1.0; 3],
            3,
        );
        assert_eq!(y, vec![8.0, 3.0, 3.0]);
    }
}
