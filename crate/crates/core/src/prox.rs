//! Closed-form kernels for the alternating-minimization subproblems: the
//! group-lasso proximal operator, the two weighted cone projections, the
//! scalar (r, s) subproblem, and the coefficient assembly that maps the
//! (v, u) block onto independent scalar problems.

use crate::error::{CoreError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{AuxState, DataBatch, HyperParams, Params};
use crate::penalty::Multipliers;

/// Coefficients of one scalar subproblem
/// φ(r, s) = c·(r − max{s, αs}) + (d1/2)(r − d3/d1)² + (d2/2)(s − d4/d2)²
/// minimized over {r ≥ s, r ≥ αs}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCoeffs {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub c: f64,
    pub alpha: f64,
}

impl ScalarCoeffs {
    pub fn phi(&self, r: f64, s: f64) -> f64 {
        let sig = s.max(self.alpha * s);
        self.c * (r - sig)
            + 0.5 * self.d1 * (r - self.d3 / self.d1).powi(2)
            + 0.5 * self.d2 * (s - self.d4 / self.d2).powi(2)
    }
}

/// Column-wise soft threshold: col ← max(0, 1 − threshold/‖col‖)·col.
pub fn prox_group_lasso(m: &DenseMatrix, threshold: f64) -> DenseMatrix {
    debug_assert!(threshold >= 0.0);
    let mut out = m.clone();
    prox_group_lasso_inplace(&mut out, threshold);
    out
}

pub fn prox_group_lasso_inplace(m: &mut DenseMatrix, threshold: f64) {
    if threshold == 0.0 {
        return;
    }
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mut sq = 0.0;
        for i in 0..rows {
            let v = m[(i, j)];
            sq += v * v;
        }
        let norm = sq.sqrt();
        let scale = if norm <= threshold { 0.0 } else { 1.0 - threshold / norm };
        for i in 0..rows {
            m[(i, j)] *= scale;
        }
    }
}

fn weighted_dist_sq(d1: f64, d2: f64, r: f64, s: f64, p: f64, q: f64) -> f64 {
    d1 * (r - p) * (r - p) + d2 * (s - q) * (s - q)
}

/// Projection of (p, q) onto {(r, s): r ≥ s, s ≥ 0} in the diag(d1, d2) metric.
///
/// Candidate enumeration: the point itself when feasible, the weighted
/// projection onto the edge r = s, the foot (p, 0) on the edge s = 0, and the
/// vertex. The feasible candidate with least weighted distance wins.
pub fn project_cone_pos(p: f64, q: f64, d1: f64, d2: f64) -> (f64, f64) {
    debug_assert!(d1 > 0.0 && d2 > 0.0);
    if p >= q && q >= 0.0 {
        return (p, q);
    }
    let mut best = (0.0, 0.0);
    let mut best_d = weighted_dist_sq(d1, d2, 0.0, 0.0, p, q);
    let t = (d1 * p + d2 * q) / (d1 + d2);
    if t >= 0.0 {
        let d = weighted_dist_sq(d1, d2, t, t, p, q);
        if d < best_d {
            best_d = d;
            best = (t, t);
        }
    }
    if p >= 0.0 {
        let d = weighted_dist_sq(d1, d2, p, 0.0, p, q);
        if d < best_d {
            best = (p, 0.0);
        }
    }
    best
}

/// Projection of (p, q) onto {(r, s): r ≥ αs, s ≤ 0} in the diag(d1, d2)
/// metric, for 0 ≤ α < 1.
pub fn project_cone_neg(p: f64, q: f64, d1: f64, d2: f64, alpha: f64) -> (f64, f64) {
    debug_assert!(d1 > 0.0 && d2 > 0.0);
    debug_assert!((0.0..1.0).contains(&alpha));
    if p >= alpha * q && q <= 0.0 {
        return (p, q);
    }
    let mut best = (0.0, 0.0);
    let mut best_d = weighted_dist_sq(d1, d2, 0.0, 0.0, p, q);
    let s_line = ((alpha * d1 * p + d2 * q) / (alpha * alpha * d1 + d2)).min(0.0);
    let r_line = alpha * s_line;
    let d = weighted_dist_sq(d1, d2, r_line, s_line, p, q);
    if d < best_d {
        best_d = d;
        best = (r_line, s_line);
    }
    if p >= 0.0 {
        let d = weighted_dist_sq(d1, d2, p, 0.0, p, q);
        if d < best_d {
            best = (p, 0.0);
        }
    }
    best
}

/// Global minimizer of the scalar subproblem over {r ≥ s, r ≥ αs}.
///
/// The two half-plane restrictions s ≥ 0 and s ≤ 0 each reduce to a weighted
/// cone projection of a shifted point; the winner by objective value is the
/// global solution. Ties go to the s ≥ 0 branch.
pub fn solve_scalar_vu(coef: &ScalarCoeffs) -> (f64, f64) {
    let ScalarCoeffs { d1, d2, d3, d4, c, alpha } = *coef;
    let (r1, s1) = project_cone_pos((d3 - c) / d1, (d4 + c) / d2, d1, d2);
    let (r2, s2) = project_cone_neg((d3 - c) / d1, (d4 + alpha * c) / d2, d1, d2, alpha);
    let phi1 = coef.phi(r1, s1);
    let phi2 = coef.phi(r2, s2);
    if phi2 < phi1 - 1e-14 * (1.0 + phi1.abs()) {
        (r2, s2)
    } else {
        (r1, s1)
    }
}

/// Residual g_{n,ℓ} = u_{n,ℓ} − (W_ℓ v_{n,ℓ−1} + b_ℓ) at the assembly state:
/// new (w, b), old (v, u).
fn residual_g(
    params_new: &Params,
    aux_old: &AuxState,
    batch: &DataBatch,
    n: usize,
    layer: usize,
) -> Vec<f64> {
    let w = &params_new.weights[layer - 1];
    let b = &params_new.biases[layer - 1];
    let prev: Vec<f64> = if layer == 1 {
        batch.x.col(n)
    } else {
        aux_old.v.sample(layer - 1, n).to_vec()
    };
    let mut g = vec![0.0; w.rows()];
    crate::linalg::matvec_into(w, &prev, &mut g);
    for ((gi, ui), bi) in g.iter_mut().zip(aux_old.u.sample(layer, n)).zip(b) {
        *gi = ui - (*gi + bi);
    }
    g
}

/// Scalar coefficients for coordinate (n, ℓ, i) of the (v, u) subproblem.
///
/// `tau[l-1]` holds τ_ℓ; τ₁ = hp.tau1 and τ_ℓ for ℓ ≥ 2 follows the
/// spectral-norm rule. This is the reference per-coordinate form; the inner
/// solver assembles whole layers at once but must agree with it exactly.
#[allow(clippy::too_many_arguments)]
pub fn assemble_scalar_coeffs(
    params_new: &Params,
    aux_old: &AuxState,
    xi: &Multipliers,
    rho: f64,
    tau: &[f64],
    batch: &DataBatch,
    hp: &HyperParams,
    n: usize,
    layer: usize,
    i: usize,
) -> Result<ScalarCoeffs> {
    let layer_count = aux_old.v.layer_count();
    if layer == 0 || layer > layer_count || n >= aux_old.v.n_samples() || i >= aux_old.v.dim(layer) {
        return Err(CoreError::IndexOutOfRange {
            op: "assemble_scalar_coeffs",
            detail: format!("(n, layer, i) = ({n}, {layer}, {i})"),
        });
    }
    let n_samples = batch.n_samples() as f64;

    // s-side: u at (n, layer, i)
    let u_old = aux_old.u.sample(layer, n)[i];
    let xi_i = xi.xi.sample(layer, n)[i];
    let (d2, d4) = if layer >= 2 {
        let tau_l = tau[layer - 1];
        let g = residual_g(params_new, aux_old, batch, n, layer);
        (tau_l, tau_l * u_old - rho * g[i] - xi_i)
    } else {
        let w1 = &params_new.weights[0];
        let x = batch.x.col(n);
        let mut affine = vec![0.0; w1.rows()];
        crate::linalg::matvec_into(w1, &x, &mut affine);
        let w1xb = affine[i] + params_new.biases[0][i];
        (rho + hp.tau1, rho * w1xb + hp.tau1 * u_old - xi_i)
    };

    // r-side: v at (n, layer, i)
    let (d1, d3) = if layer <= layer_count - 1 {
        let tau_next = tau[layer];
        let w_next = &params_new.weights[layer];
        let g_next = residual_g(params_new, aux_old, batch, n, layer + 1);
        let xi_next = xi.xi.sample(layer + 1, n);
        let mut wt_xi = vec![0.0; w_next.cols()];
        crate::linalg::matvec_transpose_into(w_next, xi_next, &mut wt_xi);
        let mut wt_g = vec![0.0; w_next.cols()];
        crate::linalg::matvec_transpose_into(w_next, &g_next, &mut wt_g);
        let v_old = aux_old.v.sample(layer, n)[i];
        (
            2.0 * hp.lambda_v + tau_next,
            tau_next * v_old + wt_xi[i] + rho * wt_g[i],
        )
    } else {
        let y_i = batch.y[(i, n)];
        (2.0 / n_samples + 2.0 * hp.lambda_v, 2.0 / n_samples * y_i)
    };

    Ok(ScalarCoeffs {
        d1,
        d2,
        d3,
        d4,
        c: hp.beta[layer - 1],
        alpha: hp.alpha,
    })
}
