//! Scalar numeric primitives for the toy transformer.
//!
//! Everything is f32, row-major, and written as plain loops over contiguous
//! slices so results are bitwise reproducible on any thread count (each
//! sequence is processed on a single thread; reductions are in index order).

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// y = W x + b, where W is `[rows][cols]` row-major, x has `cols` entries and
/// y has `rows` entries.
pub fn affine(w: &[f32], b: &[f32], x: &[f32], y: &mut [f32]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    debug_assert_eq!(b.len(), y.len());
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * cols..(o + 1) * cols], x);
    }
}

/// Backward of [`affine`]: given dy, accumulates dW, db and writes dx.
pub fn affine_backward(
    w: &[f32],
    x: &[f32],
    dy: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let cols = x.len();
    let rows = dy.len();
    for i in dx.iter_mut() {
        *i = 0.0;
    }
    for o in 0..rows {
        let g = dy[o];
        db[o] += g;
        let wrow = &w[o * cols..(o + 1) * cols];
        let dwrow = &mut dw[o * cols..(o + 1) * cols];
        for i in 0..cols {
            dwrow[i] += g * x[i];
            dx[i] += g * wrow[i];
        }
    }
}

/// Numerically stable in-place softmax over `row`.
pub fn softmax_inplace(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Layer norm over `x` with gain `g` and bias `b`; writes the normalized
/// output to `y` and returns (mean, inverse standard deviation) for backward.
pub fn layernorm(x: &[f32], g: &[f32], b: &[f32], y: &mut [f32]) -> (f32, f32) {
    let d = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0f32;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        y[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
    (mean, rstd)
}

/// Backward of [`layernorm`]; accumulates dg, db and writes dx.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    x: &[f32],
    g: &[f32],
    mean: f32,
    rstd: f32,
    dy: &[f32],
    dg: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let n = x.len();
    let d = n as f32;
    // xhat_i = (x_i - mean) * rstd; y_i = g_i * xhat_i + b_i
    let mut sum_dxhat = 0.0f32;
    let mut sum_dxhat_xhat = 0.0f32;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * g[i];
        dg[i] += dy[i] * xhat;
        db[i] += dy[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * g[i];
        dx[i] = rstd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU activation (tanh approximation).
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_example() {
        // W = [[1,2],[3,4],[5,6]], x = [1,-1], b = [0.5, 0, -0.5]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, 0.0, -0.5];
        let x = [1.0, -1.0];
        let mut y = [0.0f32; 3];
        affine(&w, &b, &x, &mut y);
        assert_eq!(y, [-0.5, -1.0, -1.5]);
    }

    #[test]
    fn softmax_row_sums_to_one_and_orders() {
        let mut row = [1.0f32, 2.0, 3.0];
        softmax_inplace(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn softmax_with_huge_negative_zeroes_entry() {
        let mut row = [0.0f32, 0.0, -1e9];
        softmax_inplace(&mut row);
        assert!(row[2] < 1e-6);
        assert!((row[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn layernorm_normalizes() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let g = [1.0f32; 4];
        let b = [0.0f32; 4];
        let mut y = [0.0f32; 4];
        layernorm(&x, &g, &b, &mut y);
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn affine_backward_matches_finite_difference() {
        let w = [0.3f32, -0.2, 0.5, 0.1, -0.4, 0.25];
        let b = [0.05f32, -0.1, 0.2];
        let x = [0.7f32, -1.3];
        let dy = [0.11f32, -0.37, 0.53];
        let mut dw = [0.0f32; 6];
        let mut db = [0.0f32; 3];
        let mut dx = [0.0f32; 2];
        affine_backward(&w, &x, &dy, &mut dw, &mut db, &mut dx);
        // Loss L = sum_o dy[o] * y[o]; check dL/dx and dL/dW numerically.
        let forward = |w: &[f32], x: &[f32]| -> f32 {
            let mut y = [0.0f32; 3];
            affine(w, &b, x, &mut y);
            y.iter().zip(&dy).map(|(a, g)| a * g).sum()
        };
        let h = 1e-3f32;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let num = (forward(&w, &xp) - forward(&w, &xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-3, "dx[{i}]: {num} vs {}", dx[i]);
        }
        for i in 0..6 {
            let mut wp = w;
            let mut wm = w;
            wp[i] += h;
            wm[i] -= h;
            let num = (forward(&wp, &x) - forward(&wm, &x)) / (2.0 * h);
            assert!((num - dw[i]).abs() < 1e-3, "dw[{i}]: {num} vs {}", dw[i]);
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_difference() {
        let x = [0.6f32, -0.2, 1.4, 0.9];
        let g = [1.1f32, 0.9, 1.05, 0.85];
        let b = [0.0f32, 0.1, -0.1, 0.2];
        let dy = [0.3f32, -0.7, 0.2, 0.5];
        let mut y = [0.0f32; 4];
        let (mean, rstd) = layernorm(&x, &g, &b, &mut y);
        let mut dg = [0.0f32; 4];
        let mut dbb = [0.0f32; 4];
        let mut dx = [0.0f32; 4];
        layernorm_backward(&x, &g, mean, rstd, &dy, &mut dg, &mut dbb, &mut dx);
        let forward = |x: &[f32]| -> f32 {
            let mut y = [0.0f32; 4];
            layernorm(x, &g, &b, &mut y);
            y.iter().zip(&dy).map(|(a, gr)| a * gr).sum()
        };
        let h = 1e-3f32;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let num = (forward(&xp) - forward(&xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 2e-3, "dx[{i}]: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f32, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-3;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-3, "at {x}");
        }
    }
}
