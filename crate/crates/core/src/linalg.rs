//! Truncated-SVD least squares shared by the lighting solve and SH rotation.

use nalgebra::DMatrix;

/// Relative singular-value cutoff for the pseudoinverse.
pub const RCOND: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// One solution column per right-hand side.
    pub solution: DMatrix<f64>,
    pub rank: usize,
    /// `σ_max / σ_min` over the full spectrum; infinite when singular.
    pub condition_number: f64,
}

/// Minimum-norm least-squares solution of `a · x = b` for every column of `b`.
pub fn lstsq(a: DMatrix<f64>, b: &DMatrix<f64>) -> LeastSquares {
    let cols = a.ncols();
    let qr = a.qr();
    let qt_b = qr.q().transpose() * b;
    let (w, v) = jacobi_svd(qr.r());
    let sv: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let s_max = sv.iter().cloned().fold(0.0, f64::max);
    let s_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cutoff = RCOND * s_max;
    let mut solution = DMatrix::zeros(cols, b.ncols());
    let mut rank = 0;
    for (j, &s) in sv.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        rank += 1;
        // x += v_j (u_j · c) / s_j with u_j = w_j / s_j
        let coef = w.column(j).transpose() * &qt_b / (s * s);
        solution += v.column(j) * coef;
    }
    let condition_number = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    LeastSquares {
        solution,
        rank,
        condition_number,
    }
}

/// One-sided Jacobi: returns `(W, V)` with `a = W · Vᵀ`, `V` orthogonal and the
/// columns of `W` mutually orthogonal (their norms are the singular values).
fn jacobi_svd(mut w: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = w.ncols();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, p)], m[(r, q)]);
        m[(r, p)] = c * x - s * y;
        m[(r, q)] = s * x + c * y;
    }
}
