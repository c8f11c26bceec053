//! Dense Cholesky factorization and triangular solves.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular `L` with `a = L Lᵀ`, or `None` if `a` is not
/// numerically positive definite.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_t(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `(L Lᵀ) x = b`.
pub fn cho_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_upper_t(l, y.view())
}

/// `(L Lᵀ)⁻¹`.
pub fn cho_inverse(l: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cho_solve(l, e.view());
        inv.column_mut(j).assign(&col);
    }
    // symmetrize away round-off
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = m;
            inv[[j, i]] = m;
        }
    }
    inv
}

/// `log |L Lᵀ|`.
pub fn cho_logdet(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Factorizes `a + jitter·I`, escalating the jitter ×10 from
/// `1e-6·mean(diag a)` up to `1e-2·mean(diag a)`. Returns the factor and
/// the jitter actually added (0 when none was needed).
pub fn cholesky_jittered(a: ArrayView2<f64>) -> Option<(Array2<f64>, f64)> {
    if let Some(l) = cholesky(a) {
        return Some((l, 0.0));
    }
    let n = a.nrows();
    let mean_diag = (a.diag().sum() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-6;
    while rel <= 1e-2 * (1.0 + 1e-9) {
        let mut b = a.to_owned();
        let jitter = rel * mean_diag;
        for i in 0..n {
            b[[i, i]] += jitter;
        }
        if let Some(l) = cholesky(b.view()) {
            return Some((l, jitter));
        }
        rel *= 10.0;
    }
    None
}
