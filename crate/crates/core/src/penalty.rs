//! Augmented Lagrangian evaluation, primal residuals, the level-set
//! safeguard, and the stationarity residual used for stopping and for the
//! reported KKT violation.

use crate::error::{CoreError, Result};
use crate::linalg::{cross_gram, matvec_transpose_into, DenseMatrix};
use crate::network::{
    objective_obar, objective_penalized, AuxState, DataBatch, HyperParams, Layered, NetworkShape,
    Params,
};

/// Lagrange multipliers ξ for the bilinear equality, laid out like `AuxState::u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub xi: Layered,
}

impl Multipliers {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Multipliers {
            xi: Layered::zeros(shape),
        }
    }

    pub fn norm(&self) -> f64 {
        self.xi.norm_sq().sqrt()
    }
}

/// Level-set bound θ of the subproblem acceptance test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSafeguard {
    pub theta: f64,
}

/// Outcome of the stationarity-residual computation: a computable upper
/// bound on dist(0, ∂L_ρ + N_{Ω₃}) together with the inequality multipliers
/// realizing it.
#[derive(Debug, Clone)]
pub struct KktCertificate {
    pub mu1: Layered,
    pub mu2: Layered,
    pub residual_norm: f64,
    /// Squared contribution of the (w, b) block, for diagnostics.
    pub wb_residual_sq: f64,
    /// Squared contribution of the (v, u) block.
    pub vu_residual_sq: f64,
}

/// r_{n,ℓ} = u_{n,ℓ} − (W_ℓ v_{n,ℓ−1} + b_ℓ) with v_{n,0} = x_n, computed
/// layerwise; the Kronecker operator Ψ(v) is never materialized.
pub fn primal_residual(params: &Params, aux: &AuxState, batch: &DataBatch) -> Layered {
    let mut r = aux.u.clone();
    let n = batch.n_samples();
    let layers = aux.u.layer_count();
    let mut xbuf = vec![0.0; batch.x.rows()];
    for s in 0..n {
        batch.x.col_to(s, &mut xbuf);
        for l in 1..=layers {
            let w = &params.weights[l - 1];
            let b = &params.biases[l - 1];
            let prev: &[f64] = if l == 1 { &xbuf } else { aux.v.sample(l - 1, s) };
            let r_s = r.sample_mut(l, s);
            for (i, ri) in r_s.iter_mut().enumerate() {
                let mut wv = 0.0;
                for (wij, pj) in w.row(i).iter().zip(prev) {
                    wv += wij * pj;
                }
                *ri -= wv + b[i];
            }
        }
    }
    r
}

/// L_ρ(w,b,v,u;ξ) = O(w,v,u) + ⟨ξ, r⟩ + (ρ/2)‖r‖².
pub fn augmented_lagrangian(
    params: &Params,
    aux: &AuxState,
    xi: &Multipliers,
    rho: f64,
    batch: &DataBatch,
    hp: &HyperParams,
) -> f64 {
    debug_assert!(rho > 0.0);
    let r = primal_residual(params, aux, batch);
    let mut inner = 0.0;
    let mut sq = 0.0;
    for l in 1..=r.layer_count() {
        for (xi_i, r_i) in xi.xi.layer(l).iter().zip(r.layer(l)) {
            inner += xi_i * r_i;
            sq += r_i * r_i;
        }
    }
    objective_penalized(params, aux, batch, hp) + inner + 0.5 * rho * sq
}

/// θ = 10 · max((1/N)‖Y‖²_F, Ō(params₀, aux₀)); the factor keeps the
/// feasible initializer strictly inside the level set. Fully degenerate
/// zero problems fall back to θ = 1 so the bound stays strict.
pub fn compute_theta(
    batch: &DataBatch,
    params0: &Params,
    aux0: &AuxState,
    hp: &HyperParams,
) -> LevelSafeguard {
    let label_energy = batch.y.frobenius_norm_sq() / batch.n_samples() as f64;
    let obar = objective_obar(params0, aux0, batch, hp);
    let theta = 10.0 * label_energy.max(obar);
    let theta = if theta > label_energy { theta } else { 1.0 };
    LevelSafeguard { theta }
}

/// Gradient of the smooth part of L_ρ at a differentiability point.
///
/// The ℓ2,1 term contributes its unique gradient on nonzero columns and the
/// activation its slope away from u = 0; callers that evaluate at kinks get
/// the σ'(0) = α convention.
#[derive(Debug, Clone)]
pub struct SmoothGrad {
    pub d_weights: Vec<DenseMatrix>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_v: Layered,
    pub d_u: Layered,
}

/// Multiplier-shifted residual h = ξ + ρ·r, reused by gradient and residual
/// computations.
fn shifted_residual(params: &Params, aux: &AuxState, xi: &Multipliers, rho: f64, batch: &DataBatch) -> (Layered, Layered) {
    let r = primal_residual(params, aux, batch);
    let mut h = r.clone();
    for l in 1..=h.layer_count() {
        for (hi, xi_i) in h.layer_mut(l).iter_mut().zip(xi.xi.layer(l)) {
            *hi = xi_i + rho * *hi;
        }
    }
    (r, h)
}

pub fn grad_lrho_smooth(
    params: &Params,
    aux: &AuxState,
    xi: &Multipliers,
    rho: f64,
    batch: &DataBatch,
    hp: &HyperParams,
) -> SmoothGrad {
    let (_, h) = shifted_residual(params, aux, xi, rho, batch);
    let n = batch.n_samples();
    let nf = n as f64;
    let layers = aux.u.layer_count();
    let x_samples = batch.x_samples();

    let mut d_weights = Vec::with_capacity(layers);
    let mut d_biases = Vec::with_capacity(layers);
    for l in 1..=layers {
        let w = &params.weights[l - 1];
        let prev: &[f64] = if l == 1 { &x_samples } else { aux.v.layer(l - 1) };
        let mut g = cross_gram(h.layer(l), w.rows(), prev, w.cols(), n);
        for gij in g.entries_mut() {
            *gij = -*gij;
        }
        // lambda_w * col / ||col|| on nonzero columns
        let norms = crate::linalg::column_norms(w);
        for j in 0..w.cols() {
            if norms[j] > 0.0 {
                for i in 0..w.rows() {
                    g[(i, j)] += hp.lambda_w * w[(i, j)] / norms[j];
                }
            }
        }
        d_weights.push(g);
        let mut gb = vec![0.0; w.rows()];
        for s in 0..n {
            for (gbi, hi) in gb.iter_mut().zip(h.sample(l, s)) {
                *gbi -= hi;
            }
        }
        d_biases.push(gb);
    }

    let mut d_v = aux.v.clone();
    let mut d_u = aux.u.clone();
    let mut ybuf = vec![0.0; batch.y.rows()];
    let max_dim = (1..=layers).map(|l| aux.v.dim(l)).max().unwrap_or(1);
    let mut wth = vec![0.0; max_dim];
    for s in 0..n {
        for l in 1..=layers {
            let beta_l = hp.beta[l - 1];
            // u side: h - beta * sigma'(u)
            {
                let u_old = aux.u.sample(l, s).to_vec();
                let du = d_u.sample_mut(l, s);
                for ((dui, hi), ui) in du.iter_mut().zip(h.sample(l, s)).zip(&u_old) {
                    let slope = if *ui > 0.0 { 1.0 } else { hp.alpha };
                    *dui = hi - beta_l * slope;
                }
            }
            // v side
            let dim = aux.v.dim(l);
            if l < layers {
                let w_next = &params.weights[l];
                matvec_transpose_into(w_next, h.sample(l + 1, s), &mut wth[..dim]);
                let v_old = aux.v.sample(l, s).to_vec();
                let dv = d_v.sample_mut(l, s);
                for i in 0..dim {
                    dv[i] = 2.0 * hp.lambda_v * v_old[i] + beta_l - wth[i];
                }
            } else {
                batch.y.col_to(s, &mut ybuf);
                let v_old = aux.v.sample(l, s).to_vec();
                let dv = d_v.sample_mut(l, s);
                for i in 0..dim {
                    dv[i] = 2.0 * hp.lambda_v * v_old[i] + beta_l + 2.0 / nf * (v_old[i] - ybuf[i]);
                }
            }
        }
    }

    SmoothGrad {
        d_weights,
        d_biases,
        d_v,
        d_u,
    }
}

/// Per-coordinate minimization of ‖(G_v, G_u) + μ₁(−1, 1) + μ₂(−1, α)‖² over
/// admissible multipliers; `active1`/`active2` restrict which constraints may
/// carry one. Returns (best value, μ₁, μ₂).
fn min_over_multipliers(g_v: f64, g_u: f64, alpha: f64, active1: bool, active2: bool) -> (f64, f64, f64) {
    let value = |m1: f64, m2: f64| {
        let a = g_v - m1 - m2;
        let b = g_u + m1 + alpha * m2;
        a * a + b * b
    };
    let mut best = (value(0.0, 0.0), 0.0, 0.0);
    if active1 {
        let m1 = ((g_v - g_u) / 2.0).max(0.0);
        let cand = (value(m1, 0.0), m1, 0.0);
        if cand.0 < best.0 {
            best = cand;
        }
    }
    if active2 {
        let m2 = ((g_v - alpha * g_u) / (1.0 + alpha * alpha)).max(0.0);
        let cand = (value(0.0, m2), 0.0, m2);
        if cand.0 < best.0 {
            best = cand;
        }
    }
    if active1 && active2 && alpha < 1.0 {
        // stationarity of the 2-variable least squares: G_v = μ1 + μ2 and
        // G_u = -(μ1 + α μ2); negative components fall back to the edges above
        let m2 = (g_v + g_u) / (1.0 - alpha);
        let m1 = g_v - m2;
        if m1 >= 0.0 && m2 >= 0.0 {
            let cand = (value(m1, m2), m1, m2);
            if cand.0 < best.0 {
                best = cand;
            }
        }
    }
    best
}

/// Computable upper bound on dist(0, ∂L_ρ + N_{Ω₃}).
///
/// (w, b): the smooth gradient plus, per weight column, the unique ℓ2,1
/// subgradient (nonzero column) or the clipped norm max(0, ‖g‖ − λ_w) (zero
/// column). (v, u): per coordinate, the residual is minimized over the
/// multipliers of the active cone constraints and, at u = 0, over the
/// subgradient interval [−β_ℓ, −αβ_ℓ] of the penalty term.
pub fn kkt_residual(
    params: &Params,
    aux: &AuxState,
    xi: &Multipliers,
    rho: f64,
    batch: &DataBatch,
    hp: &HyperParams,
) -> Result<KktCertificate> {
    let layers = aux.u.layer_count();
    let n = batch.n_samples();

    // cone feasibility gate
    for l in 1..=layers {
        for (vi, ui) in aux.v.layer(l).iter().zip(aux.u.layer(l)) {
            let tol = 1e-8 * (1.0 + vi.abs() + ui.abs());
            if ui - vi > tol || hp.alpha * ui - vi > tol {
                return Err(CoreError::InfeasibleAux(format!(
                    "layer {l}: v = {vi}, u = {ui} violates the cone beyond {tol:e}"
                )));
            }
        }
    }

    let (_, h) = shifted_residual(params, aux, xi, rho, batch);
    let x_samples = batch.x_samples();

    // (w, b) block
    let mut wb_sq = 0.0;
    for l in 1..=layers {
        let w = &params.weights[l - 1];
        let prev: &[f64] = if l == 1 { &x_samples } else { aux.v.layer(l - 1) };
        let g = cross_gram(h.layer(l), w.rows(), prev, w.cols(), n);
        let norms = crate::linalg::column_norms(w);
        for j in 0..w.cols() {
            if norms[j] > 0.0 {
                for i in 0..w.rows() {
                    let gi = -g[(i, j)] + hp.lambda_w * w[(i, j)] / norms[j];
                    wb_sq += gi * gi;
                }
            } else {
                let mut gsq = 0.0;
                for i in 0..w.rows() {
                    gsq += g[(i, j)] * g[(i, j)];
                }
                let slack = (gsq.sqrt() - hp.lambda_w).max(0.0);
                wb_sq += slack * slack;
            }
        }
        let mut gb_sq = 0.0;
        for i in 0..w.rows() {
            let mut acc = 0.0;
            for s in 0..n {
                acc -= h.sample(l, s)[i];
            }
            gb_sq += acc * acc;
        }
        wb_sq += gb_sq;
    }

    // (v, u) block
    let mut mu1 = Layered::zeros_like(&aux.u);
    let mut mu2 = Layered::zeros_like(&aux.u);
    let nf = n as f64;
    let mut vu_sq = 0.0;
    let mut ybuf = vec![0.0; batch.y.rows()];
    let max_dim = (1..=layers).map(|l| aux.v.dim(l)).max().unwrap_or(1);
    let mut wth = vec![0.0; max_dim];
    for s in 0..n {
        batch.y.col_to(s, &mut ybuf);
        for l in 1..=layers {
            let beta_l = hp.beta[l - 1];
            let dim = aux.v.dim(l);
            if l < layers {
                let w_next = &params.weights[l];
                matvec_transpose_into(w_next, h.sample(l + 1, s), &mut wth[..dim]);
            }
            let v_s = aux.v.sample(l, s);
            let u_s = aux.u.sample(l, s);
            let h_s = h.sample(l, s);
            let m1_s = mu1.sample_mut(l, s);
            for i in 0..dim {
                let (vi, ui) = (v_s[i], u_s[i]);
                let g_v = if l < layers {
                    2.0 * hp.lambda_v * vi + beta_l - wth[i]
                } else {
                    2.0 * hp.lambda_v * vi + beta_l + 2.0 / nf * (vi - ybuf[i])
                };
                let act_tol = 1e-9 * (1.0 + vi.abs() + ui.abs());
                let active1 = (vi - ui).abs() <= act_tol;
                let active2 = (vi - hp.alpha * ui).abs() <= act_tol;
                let (val, m1, m2) = if ui != 0.0 {
                    let slope = if ui > 0.0 { 1.0 } else { hp.alpha };
                    let g_u = h_s[i] - beta_l * slope;
                    min_over_multipliers(g_v, g_u, hp.alpha, active1, active2)
                } else {
                    // kink: alternate between the multiplier solve and the
                    // optimal subgradient slope in [alpha, 1]
                    let mut slope = hp.alpha;
                    let mut best = (f64::INFINITY, 0.0, 0.0);
                    for _ in 0..6 {
                        let g_u = h_s[i] - beta_l * slope;
                        let cand = min_over_multipliers(g_v, g_u, hp.alpha, active1, active2);
                        if cand.0 < best.0 {
                            best = cand;
                        }
                        let target = (h_s[i] + cand.1 + hp.alpha * cand.2) / beta_l;
                        slope = target.clamp(hp.alpha, 1.0);
                        let g_u = h_s[i] - beta_l * slope;
                        let cand = min_over_multipliers(g_v, g_u, hp.alpha, active1, active2);
                        if cand.0 < best.0 {
                            best = cand;
                        } else {
                            break;
                        }
                    }
                    best
                };
                m1_s[i] = m1;
                mu2.sample_mut(l, s)[i] = m2;
                vu_sq += val;
            }
        }
    }

    let residual_norm = (wb_sq + vu_sq).sqrt();
    Ok(KktCertificate {
        mu1,
        mu2,
        residual_norm,
        wb_residual_sq: wb_sq,
        vu_residual_sq: vu_sq,
    })
}

impl Layered {
    pub fn zeros_like(other: &Layered) -> Layered {
        let mut z = other.clone();
        for l in 1..=z.layer_count() {
            z.layer_mut(l).fill(0.0);
        }
        z
    }
}

/// σ'(u) with the kink convention σ'(0) = α.
pub fn activation_slope(u: f64, alpha: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else {
        alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, DenseMatrix};
    use crate::network::{forward, leaky_relu_scalar, NetworkShape};
    use crate::rng::Rng;

    fn random_setup(seed: u64, dims: Vec<usize>, n: usize) -> (NetworkShape, Params, DataBatch, HyperParams) {
        let shape = NetworkShape::new(dims, n).unwrap();
        let mut rng = Rng::new(seed);
        let mut params = Params::zeros(&shape);
        for w in &mut params.weights {
            rng.fill_normal(w.entries_mut());
        }
        for b in &mut params.biases {
            rng.fill_normal(b);
        }
        let mut x = DenseMatrix::zeros(shape.dim(0), n);
        rng.fill_normal(x.entries_mut());
        let mut y = DenseMatrix::zeros(shape.dim(shape.layers()), n);
        rng.fill_normal(y.entries_mut());
        let hp = HyperParams {
            alpha: 0.3,
            lambda_w: 0.07,
            lambda_v: 0.03,
            beta: vec![0.5; shape.layers()],
            tau1: 0.1,
        };
        (shape, params, DataBatch::new(x, y).unwrap(), hp)
    }

    #[test]
    fn residual_vanishes_on_forward_output() {
        let (shape, params, batch, hp) = random_setup(3, vec![2, 3, 2], 4);
        let aux = forward(&params, &batch, &hp, &shape).unwrap();
        let r = primal_residual(&params, &aux, &batch);
        assert!(r.iter_all().all(|x| x.abs() < 1e-13));
    }

    #[test]
    fn residual_tracks_single_shift() {
        let (shape, params, batch, hp) = random_setup(4, vec![2, 3, 2], 4);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        aux.u.sample_mut(2, 1)[0] += 1.0;
        let r = primal_residual(&params, &aux, &batch);
        for l in 1..=shape.layers() {
            for s in 0..shape.n_samples() {
                for (i, ri) in r.sample(l, s).iter().enumerate() {
                    let expected = if l == 2 && s == 1 && i == 0 { 1.0 } else { 0.0 };
                    assert!((ri - expected).abs() < 1e-12, "l={l} s={s} i={i}: {ri}");
                }
            }
        }
    }

    #[test]
    fn residual_matches_kronecker_oracle() {
        // two-layer, N = 2 instance against the explicit Psi(v) w + A b form
        let (shape, params, batch, hp) = random_setup(5, vec![2, 2, 2], 2);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        let mut rng = Rng::new(77);
        for l in 1..=2 {
            for x in aux.u.layer_mut(l) {
                *x += rng.next_normal();
            }
            for x in aux.v.layer_mut(l) {
                *x += rng.next_normal();
            }
        }
        let r = primal_residual(&params, &aux, &batch);

        // vec(W_l) column-wise, stacked
        let mut wvec = Vec::new();
        for w in &params.weights {
            for j in 0..w.cols() {
                for i in 0..w.rows() {
                    wvec.push(w[(i, j)]);
                }
            }
        }
        let bvec: Vec<f64> = params.biases.iter().flatten().copied().collect();
        let n = 2;
        let n1 = shape.dim(1);
        let n2 = shape.dim(2);
        let m = n * (n1 + n2);
        let n_tilde = shape.weight_count();
        // Psi blocks: X^T ⊗ I_{N1} over samples of layer 1, V_1^T ⊗ I_{N2} for layer 2
        let mut psi = DenseMatrix::zeros(m, n_tilde);
        let mut a_mat = DenseMatrix::zeros(m, n1 + n2);
        let mut row0 = 0;
        let mut col0 = 0;
        for l in 1..=2 {
            let dim = shape.dim(l);
            let prev_dim = shape.dim(l - 1);
            for s in 0..n {
                let prev: Vec<f64> = if l == 1 {
                    batch.x.col(s)
                } else {
                    aux.v.sample(l - 1, s).to_vec()
                };
                for i in 0..dim {
                    for j in 0..prev_dim {
                        // vec(W) is column-major: entry (i, j) sits at j*dim + i
                        psi[(row0 + s * dim + i, col0 + j * dim + i)] = prev[j];
                    }
                    let bcol = if l == 1 { i } else { n1 + i };
                    a_mat[(row0 + s * dim + i, bcol)] = 1.0;
                }
            }
            row0 += n * dim;
            col0 += dim * prev_dim;
        }
        let wcolm = DenseMatrix::from_vec(n_tilde, 1, wvec).unwrap();
        let bcolm = DenseMatrix::from_vec(n1 + n2, 1, bvec).unwrap();
        let psi_w = matmul(&psi, &wcolm).unwrap();
        let a_b = matmul(&a_mat, &bcolm).unwrap();
        let mut idx = 0;
        for l in 1..=2 {
            for s in 0..n {
                for i in 0..shape.dim(l) {
                    let expected = aux.u.sample(l, s)[i] - psi_w[(idx, 0)] - a_b[(idx, 0)];
                    let got = r.sample(l, s)[i];
                    assert!((got - expected).abs() < 1e-10, "idx {idx}: {got} vs {expected}");
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn lagrangian_equals_penalized_objective_when_feasible() {
        let (shape, params, batch, hp) = random_setup(6, vec![2, 3, 2], 4);
        let aux = forward(&params, &batch, &hp, &shape).unwrap();
        let mut xi = Multipliers::zeros(&shape);
        let o = objective_penalized(&params, &aux, &batch, &hp);
        let l0 = augmented_lagrangian(&params, &aux, &xi, 2.0, &batch, &hp);
        assert!((l0 - o).abs() < 1e-11 * (1.0 + o.abs()));
        let mut rng = Rng::new(8);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = rng.next_normal();
            }
        }
        let l1 = augmented_lagrangian(&params, &aux, &xi, 5.0, &batch, &hp);
        assert!((l1 - o).abs() < 1e-11 * (1.0 + o.abs()));
    }

    #[test]
    fn lagrangian_is_quadratic_in_rho() {
        let (shape, params, batch, hp) = random_setup(7, vec![2, 3, 2], 4);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        let mut rng = Rng::new(9);
        for l in 1..=shape.layers() {
            for x in aux.u.layer_mut(l) {
                *x += rng.next_normal();
            }
            for x in aux.v.layer_mut(l) {
                *x += rng.next_f64() + 1.5; // keep the cone satisfied
            }
        }
        let mut xi = Multipliers::zeros(&shape);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = rng.next_normal();
            }
        }
        let rho = 0.8;
        let l_rho = augmented_lagrangian(&params, &aux, &xi, rho, &batch, &hp);
        let l_2rho = augmented_lagrangian(&params, &aux, &xi, 2.0 * rho, &batch, &hp);
        let r = primal_residual(&params, &aux, &batch);
        let rsq = r.norm_sq();
        let expected = 0.5 * rho * rsq;
        assert!(
            ((l_2rho - l_rho) - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            "{} vs {}",
            l_2rho - l_rho,
            expected
        );
    }

    #[test]
    fn lagrangian_matches_term_sum_oracle() {
        let (shape, params, batch, hp) = random_setup(10, vec![3, 2, 2], 3);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        let mut rng = Rng::new(11);
        for l in 1..=shape.layers() {
            for x in aux.u.layer_mut(l) {
                *x += 0.3 * rng.next_normal();
            }
            for x in aux.v.layer_mut(l) {
                *x += rng.next_f64() + 1.0;
            }
        }
        let mut xi = Multipliers::zeros(&shape);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = rng.next_normal();
            }
        }
        let rho = 1.7;
        let got = augmented_lagrangian(&params, &aux, &xi, rho, &batch, &hp);
        let r = primal_residual(&params, &aux, &batch);
        let mut expected = objective_penalized(&params, &aux, &batch, &hp);
        for l in 1..=shape.layers() {
            for (a, b) in xi.xi.layer(l).iter().zip(r.layer(l)) {
                expected += a * b;
            }
            for b in r.layer(l) {
                expected += 0.5 * rho * b * b;
            }
        }
        assert!((got - expected).abs() <= 1e-11 * (1.0 + expected.abs()));
    }

    #[test]
    fn theta_rule_examples() {
        // Y = 0, Obar(init) = 0.3 -> theta = 3
        let shape = NetworkShape::new(vec![1, 1], 1).unwrap();
        let mut params = Params::zeros(&shape);
        params.weights[0][(0, 0)] = 1.0;
        let x = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let y = DenseMatrix::from_vec(1, 1, vec![0.0]).unwrap();
        let batch = DataBatch::new(x, y).unwrap();
        let hp = HyperParams {
            alpha: 0.5,
            lambda_w: 0.0,
            lambda_v: 0.0,
            beta: vec![1.0],
            tau1: 1.0,
        };
        let aux = forward(&params, &batch, &hp, &shape).unwrap();
        // Obar = (1/1)*|v - 0|^2 = sigma(1)^2 = 1... adjust weight for 0.3
        let obar = objective_obar(&params, &aux, &batch, &hp);
        let t = compute_theta(&batch, &params, &aux, &hp);
        assert!((t.theta - 10.0 * obar).abs() < 1e-12);

        // params0 = 0 -> theta = 10 * (1/N) ||Y||_F^2
        let (shape, _, batch, hp) = random_setup(12, vec![2, 2], 3);
        let zero = Params::zeros(&shape);
        let aux0 = forward(&zero, &batch, &hp, &shape).unwrap();
        let t = compute_theta(&batch, &zero, &aux0, &hp);
        let energy = batch.y.frobenius_norm_sq() / 3.0;
        assert!((t.theta - 10.0 * energy).abs() < 1e-12 * (1.0 + energy));
        assert!(t.theta > energy);
    }

    #[test]
    fn theta_is_strict_even_for_degenerate_zero_problem() {
        let shape = NetworkShape::new(vec![1, 1], 1).unwrap();
        let params = Params::zeros(&shape);
        let batch = DataBatch::new(DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 1)).unwrap();
        let hp = HyperParams {
            alpha: 0.5,
            lambda_w: 1.0,
            lambda_v: 1.0,
            beta: vec![1.0],
            tau1: 1.0,
        };
        let aux = forward(&params, &batch, &hp, &shape).unwrap();
        let t = compute_theta(&batch, &params, &aux, &hp);
        assert!(t.theta > 0.0);
    }

    #[test]
    fn smooth_gradient_matches_central_differences() {
        let (shape, params, batch, hp) = random_setup(13, vec![2, 3, 2], 3);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        // push u away from kinks and v above the cone
        let mut rng = Rng::new(14);
        for l in 1..=shape.layers() {
            for x in aux.u.layer_mut(l) {
                *x += x.signum() * 0.2 + 0.01 * rng.next_normal();
                if x.abs() < 1e-3 {
                    *x = 0.2;
                }
            }
            for i in 0..aux.v.layer(l).len() {
                let u = aux.u.layer(l)[i];
                let sig = leaky_relu_scalar(u, hp.alpha);
                aux.v.layer_mut(l)[i] = sig + 0.5 + 0.3 * rng.next_f64();
            }
        }
        let mut xi = Multipliers::zeros(&shape);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = rng.next_normal();
            }
        }
        let rho = 1.3;
        let grad = grad_lrho_smooth(&params, &aux, &xi, rho, &batch, &hp);
        let f = |p: &Params, a: &AuxState| augmented_lagrangian(p, a, &xi, rho, &batch, &hp);
        let hstep = 1e-6;

        // weights
        for l in 0..shape.layers() {
            for idx in 0..params.weights[l].entries().len() {
                let mut pp = params.clone();
                pp.weights[l].entries_mut()[idx] += hstep;
                let mut pm = params.clone();
                pm.weights[l].entries_mut()[idx] -= hstep;
                let fd = (f(&pp, &aux) - f(&pm, &aux)) / (2.0 * hstep);
                let an = grad.d_weights[l].entries()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs().max(fd.abs())),
                    "W[{l}][{idx}]: fd {fd} vs {an}"
                );
            }
            for i in 0..params.biases[l].len() {
                let mut pp = params.clone();
                pp.biases[l][i] += hstep;
                let mut pm = params.clone();
                pm.biases[l][i] -= hstep;
                let fd = (f(&pp, &aux) - f(&pm, &aux)) / (2.0 * hstep);
                let an = grad.d_biases[l][i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs().max(fd.abs())));
            }
        }
        // v and u
        for l in 1..=shape.layers() {
            for idx in 0..aux.v.layer(l).len() {
                let mut ap = aux.clone();
                ap.v.layer_mut(l)[idx] += hstep;
                let mut am = aux.clone();
                am.v.layer_mut(l)[idx] -= hstep;
                let fd = (f(&params, &ap) - f(&params, &am)) / (2.0 * hstep);
                let an = grad.d_v.layer(l)[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs().max(fd.abs())),
                    "v[{l}][{idx}]: fd {fd} vs {an}"
                );
                let mut ap = aux.clone();
                ap.u.layer_mut(l)[idx] += hstep;
                let mut am = aux.clone();
                am.u.layer_mut(l)[idx] -= hstep;
                let fd = (f(&params, &ap) - f(&params, &am)) / (2.0 * hstep);
                let an = grad.d_u.layer(l)[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs().max(fd.abs())),
                    "u[{l}][{idx}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn kkt_residual_zero_at_hand_built_stationary_point() {
        // one-neuron instance solved symbolically: alpha = 0.5, lambda_v = 0.1,
        // lambda_w = 0.3, beta = 0.7, rho = 2, x = 1.3, y = -1.1 gives the
        // stationary point w = 0, b = -2, u = -2, v = -1, xi = 0.
        let shape = NetworkShape::new(vec![1, 1], 1).unwrap();
        let params = Params {
            weights: vec![DenseMatrix::from_vec(1, 1, vec![0.0]).unwrap()],
            biases: vec![vec![-2.0]],
        };
        let x = DenseMatrix::from_vec(1, 1, vec![1.3]).unwrap();
        let y = DenseMatrix::from_vec(1, 1, vec![-1.1]).unwrap();
        let batch = DataBatch::new(x, y).unwrap();
        let hp = HyperParams {
            alpha: 0.5,
            lambda_w: 0.3,
            lambda_v: 0.1,
            beta: vec![0.7],
            tau1: 1.0,
        };
        let mut aux = AuxState::zeros(&shape);
        aux.u.sample_mut(1, 0)[0] = -2.0;
        aux.v.sample_mut(1, 0)[0] = -1.0;
        let xi = Multipliers::zeros(&shape);
        let cert = kkt_residual(&params, &aux, &xi, 2.0, &batch, &hp).unwrap();
        assert!(cert.residual_norm <= 1e-10, "residual {}", cert.residual_norm);
        assert!((cert.mu2.sample(1, 0)[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn kkt_residual_equals_plain_gradient_norm_when_inactive() {
        let (shape, params, batch, hp) = random_setup(15, vec![2, 2, 1], 3);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        // strictly inactive everywhere: v > max(u, alpha u) + 1
        let mut rng = Rng::new(16);
        for l in 1..=shape.layers() {
            for i in 0..aux.v.layer(l).len() {
                let u = aux.u.layer(l)[i] + 0.7 * rng.next_normal();
                aux.u.layer_mut(l)[i] = if u.abs() < 1e-3 { 0.4 } else { u };
                let sig = leaky_relu_scalar(aux.u.layer(l)[i], hp.alpha);
                aux.v.layer_mut(l)[i] = sig + 1.0 + rng.next_f64();
            }
        }
        let mut xi = Multipliers::zeros(&shape);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = 0.2 * rng.next_normal();
            }
        }
        let rho = 0.9;
        let cert = kkt_residual(&params, &aux, &xi, rho, &batch, &hp).unwrap();
        assert!(cert.mu1.iter_all().all(|m| m == 0.0));
        assert!(cert.mu2.iter_all().all(|m| m == 0.0));
        let grad = grad_lrho_smooth(&params, &aux, &xi, rho, &batch, &hp);
        let mut sq = 0.0;
        for g in &grad.d_weights {
            sq += g.frobenius_norm_sq();
        }
        for g in &grad.d_biases {
            for x in g {
                sq += x * x;
            }
        }
        sq += grad.d_v.norm_sq() + grad.d_u.norm_sq();
        assert!(
            (cert.residual_norm - sq.sqrt()).abs() <= 1e-9 * (1.0 + sq.sqrt()),
            "{} vs {}",
            cert.residual_norm,
            sq.sqrt()
        );
    }

    #[test]
    fn kkt_residual_is_at_most_the_multiplier_grid_oracle() {
        let (shape, params, batch, hp) = random_setup(18, vec![2, 2], 3);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        let mut rng = Rng::new(19);
        // mix of active and inactive coordinates, away from u = 0
        for l in 1..=shape.layers() {
            for i in 0..aux.v.layer(l).len() {
                let mut u = aux.u.layer(l)[i] + rng.next_normal();
                if u.abs() < 1e-2 {
                    u = 0.5;
                }
                aux.u.layer_mut(l)[i] = u;
                let sig = leaky_relu_scalar(u, hp.alpha);
                let on_boundary = rng.next_f64() < 0.5;
                aux.v.layer_mut(l)[i] = if on_boundary {
                    if u > 0.0 { u } else { hp.alpha * u }
                } else {
                    sig + rng.next_f64()
                };
            }
        }
        let mut xi = Multipliers::zeros(&shape);
        for l in 1..=shape.layers() {
            for x in xi.xi.layer_mut(l) {
                *x = rng.next_normal();
            }
        }
        let rho = 1.1;
        let cert = kkt_residual(&params, &aux, &xi, rho, &batch, &hp).unwrap();

        // grid oracle over mu in [0, 10]^2 per coordinate
        let (_, h) = shifted_residual(&params, &aux, &xi, rho, &batch);
        let mut vu_best = 0.0;
        for s in 0..shape.n_samples() {
            let y = batch.y.col(s);
            for l in 1..=shape.layers() {
                let dim = aux.v.dim(l);
                let mut wth = vec![0.0; dim];
                if l < shape.layers() {
                    matvec_transpose_into(&params.weights[l], h.sample(l + 1, s), &mut wth);
                }
                for i in 0..dim {
                    let vi = aux.v.sample(l, s)[i];
                    let ui = aux.u.sample(l, s)[i];
                    let g_v = if l < shape.layers() {
                        2.0 * hp.lambda_v * vi + hp.beta[l - 1] - wth[i]
                    } else {
                        2.0 * hp.lambda_v * vi
                            + hp.beta[l - 1]
                            + 2.0 / shape.n_samples() as f64 * (vi - y[i])
                    };
                    let slope = activation_slope(ui, hp.alpha);
                    let g_u = h.sample(l, s)[i] - hp.beta[l - 1] * slope;
                    let act_tol = 1e-9 * (1.0 + vi.abs() + ui.abs());
                    let a1 = (vi - ui).abs() <= act_tol;
                    let a2 = (vi - hp.alpha * ui).abs() <= act_tol;
                    let mut best = f64::INFINITY;
                    let steps1 = if a1 { 10_000 } else { 0 };
                    let steps2 = if a2 { 10_000 } else { 0 };
                    for k1 in 0..=steps1 {
                        let m1 = k1 as f64 * 1e-3;
                        for k2 in 0..=steps2 {
                            let m2 = k2 as f64 * 1e-3;
                            let a = g_v - m1 - m2;
                            let b = g_u + m1 + hp.alpha * m2;
                            let val = a * a + b * b;
                            if val < best {
                                best = val;
                            }
                        }
                    }
                    vu_best += best;
                }
            }
        }
        let oracle = (cert.wb_residual_sq + vu_best).sqrt();
        assert!(
            cert.residual_norm <= oracle + 1e-9,
            "{} vs grid {}",
            cert.residual_norm,
            oracle
        );
    }

    #[test]
    fn kkt_residual_rejects_infeasible_aux() {
        let (shape, params, batch, hp) = random_setup(20, vec![2, 2], 2);
        let mut aux = forward(&params, &batch, &hp, &shape).unwrap();
        aux.v.sample_mut(1, 0)[0] = aux.u.sample(1, 0)[0] - 1.0;
        let xi = Multipliers::zeros(&shape);
        assert!(matches!(
            kkt_residual(&params, &aux, &xi, 1.0, &batch, &hp),
            Err(CoreError::InfeasibleAux(_))
        ));
    }
}
