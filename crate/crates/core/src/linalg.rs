//! Weighted least-squares core: thin QR for the solve, column-pivoted QR for
//! the rank check. No explicit normal-equation inversion.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

/// Condition estimate above which the cross-product is treated as singular.
pub(crate) const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug)]
pub(crate) struct WlsSolution {
    pub beta: Array1<f64>,
    /// Leverages h_i = w_i t_i' (T'WT)^-1 t_i.
    pub hat: Array1<f64>,
    /// (T'WT)^-1.
    pub cov: Array2<f64>,
}

/// Solve min_beta || W^{1/2} (response - design * beta) ||^2 and return the
/// leverage diagonals and unscaled covariance along with the estimate.
pub(crate) fn weighted_least_squares(
    design: &Array2<f64>,
    weights: &Array1<f64>,
    response: &Array1<f64>,
) -> Result<WlsSolution> {
    let n = design.nrows();
    let p = design.ncols();
    assert_eq!(weights.len(), n);
    assert_eq!(response.len(), n);
    if n < p {
        return Err(Error::Validation(format!(
            "need at least as many observations ({n}) as parameters ({p})"
        )));
    }

    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut b = DVector::<f64>::zeros(n);
    for i in 0..n {
        let s = weights[i].sqrt();
        if !s.is_finite() {
            return Err(Error::Domain(format!("weight w[{i}] = {} invalid", weights[i])));
        }
        for j in 0..p {
            a[(i, j)] = design[[i, j]] * s;
        }
        b[i] = response[i] * s;
    }

    // rank check via the pivoted R diagonal
    let piv = a.clone().col_piv_qr();
    let rp = piv.r();
    let mut dmax: f64 = 0.0;
    let mut dmin = f64::INFINITY;
    for j in 0..p {
        let d = rp[(j, j)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    if dmin <= 0.0 || dmin.is_nan() || condition > CONDITION_LIMIT {
        return Err(Error::Singular {
            pivot: dmin,
            condition,
        });
    }

    let qr = a.qr();
    let q = qr.q(); // n x p
    let r = qr.r(); // p x p upper triangular

    let qtb = q.transpose() * &b;
    let beta_v = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::Singular { pivot: dmin, condition })?;

    let rinv = r
        .solve_upper_triangular(&DMatrix::<f64>::identity(p, p))
        .ok_or(Error::Singular { pivot: dmin, condition })?;

    let mut hat = Array1::zeros(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..p {
            s += q[(i, j)] * q[(i, j)];
        }
        hat[i] = s;
    }

    // (T'WT)^-1 = R^-1 R^-T
    let mut cov = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..p {
                s += rinv[(i, k)] * rinv[(j, k)];
            }
            cov[[i, j]] = s;
        }
    }

    Ok(WlsSolution {
        beta: Array1::from_iter(beta_v.iter().copied()),
        hat,
        cov,
    })
}

/// Fitted values of `response` projected onto the column space of `design`,
/// tolerant of rank deficiency (projection uses the leading pivoted
/// Householder directions). Returns (fitted, rank).
pub(crate) fn project_onto_columns(
    design: &Array2<f64>,
    response: &Array1<f64>,
) -> (Array1<f64>, usize) {
    let n = design.nrows();
    let p = design.ncols();
    let mut a = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] = design[[i, j]];
        }
    }
    let piv = a.col_piv_qr();
    let r = piv.r();
    let k = n.min(p);
    let mut dmax: f64 = 0.0;
    for j in 0..k {
        dmax = dmax.max(r[(j, j)].abs());
    }
    let tol = dmax * 1e-10 * (n.max(p) as f64);
    let rank = (0..k).take_while(|&j| r[(j, j)].abs() > tol).count();
    let q = piv.q();
    let mut fitted = DVector::<f64>::zeros(n);
    for j in 0..rank {
        let mut dot = 0.0;
        for i in 0..n {
            dot += q[(i, j)] * response[i];
        }
        for i in 0..n {
            fitted[i] += q[(i, j)] * dot;
        }
    }
    (Array1::from_iter(fitted.iter().copied()), rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn matches_normal_equations_on_small_problem() {
        let design = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        let y = array![1.0, 2.4, 2.9, 4.3];
        let w = array![1.0, 1.0, 1.0, 1.0];
        let sol = weighted_least_squares(&design, &w, &y).unwrap();
        // hand-computed OLS: slope = 1.04, intercept = 1.09
        assert_relative_eq!(sol.beta[0], 1.09, max_relative = 1e-12);
        assert_relative_eq!(sol.beta[1], 1.04, max_relative = 1e-12);
        let trace: f64 = sol.hat.sum();
        assert_relative_eq!(trace, 2.0, epsilon = 1e-10);
        // cov = (X'X)^-1; for this design X'X = [[4,6],[6,14]], det = 20
        assert_relative_eq!(sol.cov[[0, 0]], 14.0 / 20.0, max_relative = 1e-12);
        assert_relative_eq!(sol.cov[[1, 1]], 4.0 / 20.0, max_relative = 1e-12);
        assert_relative_eq!(sol.cov[[0, 1]], -6.0 / 20.0, max_relative = 1e-12);
    }

    #[test]
    fn weights_enter_as_inverse_variances() {
        let design = array![[1.0], [1.0], [1.0]];
        let y = array![1.0, 2.0, 4.0];
        let w = array![1.0, 1.0, 2.0];
        let sol = weighted_least_squares(&design, &w, &y).unwrap();
        assert_relative_eq!(sol.beta[0], (1.0 + 2.0 + 8.0) / 4.0, max_relative = 1e-12);
        // intercept-only, weighted: h_i = w_i / sum(w)
        assert_relative_eq!(sol.hat[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(sol.hat[2], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn singular_design_is_reported() {
        let design = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![1.0, 2.0, 3.0];
        let w = array![1.0, 1.0, 1.0];
        match weighted_least_squares(&design, &w, &y) {
            Err(Error::Singular { .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn projection_handles_redundant_columns() {
        // third column = first + second
        let design = array![
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 2.0],
            [1.0, 2.0, 3.0],
            [1.0, 3.0, 4.0]
        ];
        let y = array![1.0, 2.4, 2.9, 4.3];
        let (fitted, rank) = project_onto_columns(&design, &y);
        assert_eq!(rank, 2);
        let two_col = design.slice(ndarray::s![.., 0..2]).to_owned();
        let w = Array1::ones(4);
        let sol = weighted_least_squares(&two_col, &w, &y).unwrap();
        let direct = two_col.dot(&sol.beta);
        for i in 0..4 {
            assert_relative_eq!(fitted[i], direct[i], epsilon = 1e-10);
        }
    }
}
