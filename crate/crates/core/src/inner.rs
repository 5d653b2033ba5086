//! Alternating minimization for the augmented Lagrangian subproblem:
//! recursive initialization, the (w, b) block via proximal gradient with
//! Barzilai-Borwein steps, the (v, u) block via the closed-form scalar
//! kernels, the per-sweep descent assertion, and inner stopping.

use crate::error::{CoreError, Result};
use crate::linalg::{cross_gram, matvec_into, matvec_transpose_into, spectral_norm, DenseMatrix};
use crate::network::{forward, AuxState, DataBatch, HyperParams, NetworkShape, Params};
use crate::penalty::{augmented_lagrangian, kkt_residual, Multipliers};
use crate::prox::{prox_group_lasso_inplace, solve_scalar_vu, ScalarCoeffs};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Immutable per-run data shared by every sweep: sample-major input copies
/// and the centered layer-1 Gram, which never change while training.
#[derive(Debug, Clone)]
pub struct ProblemContext {
    pub shape: NetworkShape,
    x_samples: Vec<f64>,
    x_mean: Vec<f64>,
    x_centered: Vec<f64>,
    gram_x: DenseMatrix,
    y_samples: Vec<f64>,
}

impl ProblemContext {
    pub fn new(shape: NetworkShape, batch: &DataBatch) -> Result<Self> {
        if batch.x.rows() != shape.dim(0)
            || batch.y.rows() != shape.dim(shape.layers())
            || batch.n_samples() != shape.n_samples()
        {
            return Err(CoreError::DimensionMismatch {
                op: "ProblemContext::new",
                detail: "batch does not match shape".into(),
            });
        }
        let n = shape.n_samples();
        let d0 = shape.dim(0);
        let x_samples = batch.x_samples();
        let mut x_mean = vec![0.0; d0];
        for s in 0..n {
            for (m, v) in x_mean.iter_mut().zip(&x_samples[s * d0..(s + 1) * d0]) {
                *m += v;
            }
        }
        for m in x_mean.iter_mut() {
            *m /= n as f64;
        }
        let mut x_centered = x_samples.clone();
        for s in 0..n {
            for (v, m) in x_centered[s * d0..(s + 1) * d0].iter_mut().zip(&x_mean) {
                *v -= m;
            }
        }
        let gram_x = cross_gram(&x_centered, d0, &x_centered, d0, n);
        let y_samples = batch.y_samples();
        Ok(ProblemContext {
            shape,
            x_samples,
            x_mean,
            x_centered,
            gram_x,
            y_samples,
        })
    }

    pub fn x_sample(&self, s: usize) -> &[f64] {
        let d0 = self.shape.dim(0);
        &self.x_samples[s * d0..(s + 1) * d0]
    }

    pub fn y_sample(&self, s: usize) -> &[f64] {
        let dl = self.shape.dim(self.shape.layers());
        &self.y_samples[s * dl..(s + 1) * dl]
    }
}

/// Iteration caps for the inner solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InnerCaps {
    /// Maximum alternating sweeps per subproblem solve.
    pub max_inner: usize,
    /// Maximum proximal-gradient iterations per (w, b) block solve.
    pub max_wb_iters: usize,
}

impl Default for InnerCaps {
    fn default() -> Self {
        InnerCaps {
            max_inner: 500,
            max_wb_iters: 200,
        }
    }
}

/// Block step norms of the latest sweep (squared distances are kept; the
/// descent inequality consumes them squared anyway).
#[derive(Debug, Clone, Copy, Default)]
pub struct StepNorms {
    pub dw_sq: f64,
    pub db_sq: f64,
    pub dv_sq: f64,
    pub du_sq: f64,
    /// Σ over layers 1..L-1 only, the part covered by the proximal term.
    pub dv_hidden_sq: f64,
}

/// Mutable state of one alternating-minimization run.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub params: Params,
    pub aux: AuxState,
    /// τ_ℓ for ℓ = 1..=L; entry 0 is τ₁ and entries 1.. follow the
    /// spectral-norm rule for the current weights.
    pub tau: Vec<f64>,
    pub sweep: usize,
    pub l_value: f64,
    pub steps: StepNorms,
}

/// Summary of one inner solve.
#[derive(Debug, Clone, Copy)]
pub struct InnerReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub satisfied_theta: bool,
    pub descent_violations: usize,
}

/// Stored initializer reused when a fresh candidate leaves the level set.
#[derive(Debug, Clone)]
pub struct InitSnapshot {
    pub params: Params,
    pub aux: AuxState,
}

/// Initialization rule: the candidate is the previous solution's parameters
/// with a fresh feasible forward pass. On later outer iterations the
/// candidate is rejected in favor of the stored initializer whenever its
/// Lagrangian value already reaches θ.
pub fn init_inner(
    prev_params: &Params,
    prev_init: Option<&InitSnapshot>,
    rho: f64,
    xi: &Multipliers,
    batch: &DataBatch,
    hp: &HyperParams,
    shape: &NetworkShape,
    theta: f64,
) -> Result<InitSnapshot> {
    let aux = forward(prev_params, batch, hp, shape)?;
    let candidate = InitSnapshot {
        params: prev_params.clone(),
        aux,
    };
    if let Some(stored) = prev_init {
        let l_candidate = augmented_lagrangian(&candidate.params, &candidate.aux, xi, rho, batch, hp);
        if l_candidate >= theta {
            return Ok(stored.clone());
        }
    }
    Ok(candidate)
}

/// τ₁ plus the per-layer proximal weights τ_ℓ = ρ(1 + σ_max(W_ℓ)²) + τ₁ for
/// ℓ ≥ 2, using the augmented-block spectral identity.
pub fn recompute_tau(params: &Params, rho: f64, tau1: f64) -> Vec<f64> {
    let mut tau = Vec::with_capacity(params.weights.len());
    tau.push(tau1);
    for w in params.weights.iter().skip(1) {
        let sigma = spectral_norm(w, 1e-10, 10_000).sigma;
        tau.push(rho * (1.0 + sigma * sigma) + tau1);
    }
    tau
}

/// One (w, b) block solve: per layer ℓ independently minimize
/// λ_w‖W_ℓ‖_{2,1} + (ρ/2)Σ_n‖t_{n,ℓ} − W_ℓ v_{n,ℓ−1} − b_ℓ‖²
/// with t = u + ξ/ρ, by exact elimination of b and proximal-gradient steps
/// on W with a safeguarded Barzilai-Borwein step length.
#[allow(clippy::too_many_arguments)]
pub fn solve_wb(
    ctx: &ProblemContext,
    aux_fixed: &AuxState,
    xi: &Multipliers,
    rho: f64,
    batch: &DataBatch,
    hp: &HyperParams,
    tol_wb: f64,
    max_it: usize,
    warm: &Params,
) -> Result<Params> {
    debug_assert!(rho > 0.0);
    let shape = &ctx.shape;
    let layers = shape.layers();
    let n = shape.n_samples();
    let _ = batch;

    let solve_layer = |l: usize| -> Result<(DenseMatrix, Vec<f64>)> {
        let dim = shape.dim(l);
        let prev_dim = shape.dim(l - 1);
        let nf = n as f64;

        // t = u + xi / rho, centered
        let mut t = vec![0.0; n * dim];
        for s in 0..n {
            let u_s = aux_fixed.u.sample(l, s);
            let xi_s = xi.xi.sample(l, s);
            for i in 0..dim {
                t[s * dim + i] = u_s[i] + xi_s[i] / rho;
            }
        }
        let mut t_mean = vec![0.0; dim];
        for s in 0..n {
            for (m, v) in t_mean.iter_mut().zip(&t[s * dim..(s + 1) * dim]) {
                *m += v;
            }
        }
        for m in t_mean.iter_mut() {
            *m /= nf;
        }
        for s in 0..n {
            for (v, m) in t[s * dim..(s + 1) * dim].iter_mut().zip(&t_mean) {
                *v -= m;
            }
        }

        // centered predecessor activations and their Gram
        let (p_centered, p_mean, gram): (std::borrow::Cow<[f64]>, Vec<f64>, std::borrow::Cow<DenseMatrix>) =
            if l == 1 {
                (
                    std::borrow::Cow::Borrowed(&ctx.x_centered[..]),
                    ctx.x_mean.clone(),
                    std::borrow::Cow::Borrowed(&ctx.gram_x),
                )
            } else {
                let src = aux_fixed.v.layer(l - 1);
                let mut mean = vec![0.0; prev_dim];
                for s in 0..n {
                    for (m, v) in mean.iter_mut().zip(&src[s * prev_dim..(s + 1) * prev_dim]) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= nf;
                }
                let mut centered = src.to_vec();
                for s in 0..n {
                    for (v, m) in centered[s * prev_dim..(s + 1) * prev_dim].iter_mut().zip(&mean) {
                        *v -= m;
                    }
                }
                let g = cross_gram(&centered, prev_dim, &centered, prev_dim, n);
                (std::borrow::Cow::Owned(centered), mean, std::borrow::Cow::Owned(g))
            };
        let cross = cross_gram(&t, dim, &p_centered, prev_dim, n);
        let tt: f64 = t.iter().map(|x| x * x).sum();

        // smooth part through the Gram form: f(W) = (rho/2)(tr(W G Wᵀ) - 2 tr(C Wᵀ) + tt)
        let smooth_val_grad = |w: &DenseMatrix| -> (f64, DenseMatrix) {
            let wg = crate::linalg::matmul(w, &gram).expect("shape");
            let mut val = tt;
            let mut grad = wg;
            for ((gij, wij), cij) in grad
                .entries_mut()
                .iter_mut()
                .zip(w.entries())
                .zip(cross.entries())
            {
                val += *gij * wij - 2.0 * cij * wij;
                *gij = rho * (*gij - cij);
            }
            (0.5 * rho * val, grad)
        };
        let objective = |w: &DenseMatrix| -> f64 {
            let (sv, _) = smooth_val_grad(w);
            let norms = crate::linalg::column_norms(w);
            let mut reg = 0.0;
            for j in 0..norms.len() {
                reg += norms[j];
            }
            sv + hp.lambda_w * reg
        };

        let mut w = warm.weights[l - 1].clone();
        let (mut f_cur, mut grad) = smooth_val_grad(&w);
        let mut reg_cur = hp.lambda_w * {
            let norms = crate::linalg::column_norms(&w);
            (0..norms.len()).map(|j| norms[j]).sum::<f64>()
        };
        let mut step = {
            let gf = gram.frobenius_norm();
            if gf > 0.0 {
                1.0 / (rho * gf)
            } else {
                1.0
            }
        };
        let mut prev_w: Option<DenseMatrix> = None;
        let mut prev_grad: Option<DenseMatrix> = None;

        for _ in 0..max_it {
            // Barzilai-Borwein step from the last accepted move
            if let (Some(pw), Some(pg)) = (&prev_w, &prev_grad) {
                let mut ss = 0.0;
                let mut sg = 0.0;
                for ((wc, wp), (gc, gp)) in w
                    .entries()
                    .iter()
                    .zip(pw.entries())
                    .zip(grad.entries().iter().zip(pg.entries()))
                {
                    let s = wc - wp;
                    let g = gc - gp;
                    ss += s * s;
                    sg += s * g;
                }
                if sg > 0.0 {
                    step = (ss / sg).clamp(1e-8, 1e8);
                }
            }

            // backtrack until the block objective does not increase
            let mut accepted: Option<(DenseMatrix, f64, f64)> = None;
            let mut trial_step = step;
            for _ in 0..60 {
                let mut w_new = w.clone();
                for (wn, g) in w_new.entries_mut().iter_mut().zip(grad.entries()) {
                    *wn -= trial_step * g;
                }
                prox_group_lasso_inplace(&mut w_new, trial_step * hp.lambda_w);
                let f_new = objective(&w_new);
                if !f_new.is_finite() {
                    return Err(CoreError::NonFinite {
                        op: "solve_wb",
                        detail: format!("layer {l}, step {trial_step:e}"),
                    });
                }
                if f_new <= f_cur + reg_cur {
                    accepted = Some((w_new, f_new, trial_step));
                    break;
                }
                trial_step *= 0.5;
            }
            let Some((w_new, f_new, used_step)) = accepted else {
                break; // no non-increasing step found; current point is as good as it gets
            };
            let mut move_sq = 0.0;
            for (a, b) in w_new.entries().iter().zip(w.entries()) {
                let d = a - b;
                move_sq += d * d;
            }
            let mapping_norm = move_sq.sqrt() / used_step;
            prev_w = Some(w.clone());
            prev_grad = Some(grad.clone());
            w = w_new;
            let (fs, g) = smooth_val_grad(&w);
            grad = g;
            f_cur = fs;
            reg_cur = f_new - fs;
            if mapping_norm <= tol_wb {
                break;
            }
        }

        // exact bias from the stationarity identity
        let mut wp = vec![0.0; dim];
        matvec_into(&w, &p_mean, &mut wp);
        let mut b = vec![0.0; dim];
        for i in 0..dim {
            b[i] = t_mean[i] - wp[i];
        }
        if !w.is_finite() || b.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                op: "solve_wb",
                detail: format!("layer {l} produced non-finite parameters"),
            });
        }
        Ok((w, b))
    };

    #[cfg(feature = "parallel")]
    let solved: Result<Vec<(DenseMatrix, Vec<f64>)>> =
        (1..=layers).into_par_iter().map(solve_layer).collect();
    #[cfg(not(feature = "parallel"))]
    let solved: Result<Vec<(DenseMatrix, Vec<f64>)>> = (1..=layers).map(solve_layer).collect();

    let solved = solved?;
    let mut out = Params::zeros(shape);
    for (idx, (w, b)) in solved.into_iter().enumerate() {
        out.weights[idx] = w;
        out.biases[idx] = b;
    }
    Ok(out)
}

/// Exact minimizer of the proximal (v, u) subproblem: every coordinate pair
/// is an independent scalar problem solved in closed form. Reads the old
/// state, writes a fresh one; evaluation order cannot affect the result.
pub fn solve_vu(
    ctx: &ProblemContext,
    params_new: &Params,
    aux_old: &AuxState,
    xi: &Multipliers,
    rho: f64,
    hp: &HyperParams,
    tau: &[f64],
) -> AuxState {
    let shape = &ctx.shape;
    let layers = shape.layers();
    let n = shape.n_samples();
    let nf = n as f64;

    struct SampleOut {
        v: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
    }

    let solve_sample = |s: usize| -> SampleOut {
        // affine_l = W_l v_old_{l-1} + b_l and g_l = u_old_l - affine_l
        let mut affine: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 1..=layers {
            let w = &params_new.weights[l - 1];
            let b = &params_new.biases[l - 1];
            let prev: &[f64] = if l == 1 {
                ctx.x_sample(s)
            } else {
                aux_old.v.sample(l - 1, s)
            };
            let mut a = vec![0.0; w.rows()];
            matvec_into(w, prev, &mut a);
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += bi;
            }
            let mut gi = vec![0.0; w.rows()];
            for ((g_i, u_i), a_i) in gi.iter_mut().zip(aux_old.u.sample(l, s)).zip(&a) {
                *g_i = u_i - a_i;
            }
            affine.push(a);
            g.push(gi);
        }

        let mut v_out: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut u_out: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 1..=layers {
            let dim = shape.dim(l);
            let u_old = aux_old.u.sample(l, s);
            let v_old = aux_old.v.sample(l, s);
            let xi_s = xi.xi.sample(l, s);

            // r-side coefficients (v at layer l)
            let (d1, d3): (f64, Vec<f64>) = if l < layers {
                let tau_next = tau[l];
                let w_next = &params_new.weights[l];
                let mut wt_xi = vec![0.0; dim];
                matvec_transpose_into(w_next, xi.xi.sample(l + 1, s), &mut wt_xi);
                let mut wt_g = vec![0.0; dim];
                matvec_transpose_into(w_next, &g[l], &mut wt_g);
                let d3 = (0..dim)
                    .map(|i| tau_next * v_old[i] + wt_xi[i] + rho * wt_g[i])
                    .collect();
                (2.0 * hp.lambda_v + tau_next, d3)
            } else {
                let y = ctx.y_sample(s);
                let d3 = (0..dim).map(|i| 2.0 / nf * y[i]).collect();
                (2.0 / nf + 2.0 * hp.lambda_v, d3)
            };

            // s-side coefficients (u at layer l)
            let (d2, d4): (f64, Vec<f64>) = if l >= 2 {
                let tau_l = tau[l - 1];
                let d4 = (0..dim)
                    .map(|i| tau_l * u_old[i] - rho * g[l - 1][i] - xi_s[i])
                    .collect();
                (tau_l, d4)
            } else {
                let d4 = (0..dim)
                    .map(|i| rho * affine[0][i] + hp.tau1 * u_old[i] - xi_s[i])
                    .collect();
                (rho + hp.tau1, d4)
            };

            let c = hp.beta[l - 1];
            let mut v_new = vec![0.0; dim];
            let mut u_new = vec![0.0; dim];
            for i in 0..dim {
                let coef = ScalarCoeffs {
                    d1,
                    d2,
                    d3: d3[i],
                    d4: d4[i],
                    c,
                    alpha: hp.alpha,
                };
                let (r, sv) = solve_scalar_vu(&coef);
                v_new[i] = r;
                u_new[i] = sv;
            }
            v_out.push(v_new);
            u_out.push(u_new);
        }
        SampleOut { v: v_out, u: u_out }
    };

    #[cfg(feature = "parallel")]
    let per_sample: Vec<SampleOut> = (0..n).into_par_iter().map(solve_sample).collect();
    #[cfg(not(feature = "parallel"))]
    let per_sample: Vec<SampleOut> = (0..n).map(solve_sample).collect();

    let mut aux_new = AuxState::zeros(shape);
    for (s, so) in per_sample.into_iter().enumerate() {
        for l in 1..=layers {
            aux_new.v.sample_mut(l, s).copy_from_slice(&so.v[l - 1]);
            aux_new.u.sample_mut(l, s).copy_from_slice(&so.u[l - 1]);
        }
    }
    aux_new
}

/// Runs alternating sweeps until the stationarity surrogate drops below
/// `eps_k` or the sweep cap is reached. Each sweep asserts the descent
/// inequality with constants λ_w/2 and τ₁/2 and counts any violation; exit
/// with L_ρ at or above θ is a hard error.
#[allow(clippy::too_many_arguments)]
pub fn run_inner(
    ctx: &ProblemContext,
    start: &InitSnapshot,
    xi: &Multipliers,
    rho: f64,
    batch: &DataBatch,
    hp: &HyperParams,
    theta: f64,
    eps_k: f64,
    caps: &InnerCaps,
) -> Result<(InnerState, InnerReport)> {
    debug_assert!(eps_k > 0.0);
    let tol_wb = 1e-8_f64.min(0.1 * eps_k);
    let mut params = start.params.clone();
    let mut aux = start.aux.clone();
    let mut l_cur = augmented_lagrangian(&params, &aux, xi, rho, batch, hp);
    let mut descent_violations = 0usize;
    let mut steps = StepNorms::default();
    let mut tau = recompute_tau(&params, rho, hp.tau1);
    let mut final_residual = f64::INFINITY;
    let mut sweep = 0usize;

    while sweep < caps.max_inner {
        sweep += 1;
        let params_new = solve_wb(ctx, &aux, xi, rho, batch, hp, tol_wb, caps.max_wb_iters, &params)?;
        tau = recompute_tau(&params_new, rho, hp.tau1);
        let aux_new = solve_vu(ctx, &params_new, &aux, xi, rho, hp, &tau);

        if !params_new.is_finite() || !aux_new.v.is_finite() || !aux_new.u.is_finite() {
            return Err(CoreError::NonFinite {
                op: "run_inner",
                detail: format!("sweep {sweep}, rho = {rho:e}"),
            });
        }

        let (dw_sq, db_sq) = params_new.sq_distance(&params);
        let du_sq = aux_new.u.sq_distance(&aux.u);
        let dv_sq = aux_new.v.sq_distance(&aux.v);
        let layers = ctx.shape.layers();
        let mut dv_hidden_sq = 0.0;
        for l in 1..layers {
            for (a, b) in aux_new.v.layer(l).iter().zip(aux.v.layer(l)) {
                let d = a - b;
                dv_hidden_sq += d * d;
            }
        }
        let l_new = augmented_lagrangian(&params_new, &aux_new, xi, rho, batch, hp);
        let required =
            0.5 * hp.lambda_w * dw_sq + 0.5 * hp.tau1 * du_sq + 0.5 * hp.tau1 * dv_hidden_sq;
        let decrease = l_cur - l_new;
        if decrease < required - 1e-10 * (1.0 + l_new.abs()) {
            descent_violations += 1;
        }

        params = params_new;
        aux = aux_new;
        l_cur = l_new;
        steps = StepNorms {
            dw_sq,
            db_sq,
            dv_sq,
            du_sq,
            dv_hidden_sq,
        };

        let cert = kkt_residual(&params, &aux, xi, rho, batch, hp)?;
        final_residual = cert.residual_norm;
        if final_residual <= eps_k {
            break;
        }
    }

    if l_cur >= theta {
        return Err(CoreError::ThetaViolated {
            l_value: l_cur,
            theta,
        });
    }

    let state = InnerState {
        params,
        aux,
        tau,
        sweep,
        l_value: l_cur,
        steps,
    };
    let report = InnerReport {
        iterations: sweep,
        final_residual,
        satisfied_theta: state.l_value < theta,
        descent_violations,
    };
    Ok((state, report))
}
