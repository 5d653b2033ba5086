//! Evaluation quantities: training/test error, classification accuracy,
//! feasibility violations, column sparsity ratios, and Dolan-Moré
//! performance profiles.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::linalg::column_norms;
use crate::network::{
    leaky_relu_scalar, predict_sample, AuxState, DataBatch, HyperParams, Params,
};

/// One evaluation snapshot. Fields that only exist for classification runs
/// or for the Lagrangian solver are optional.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub train_err: f64,
    pub test_err: f64,
    /// Paper-literal test error (divided by N instead of N_test).
    pub test_err_paper_n: f64,
    pub accuracy: Option<f64>,
    pub test_acc: Option<f64>,
    pub feasvi1: Option<f64>,
    pub feasvi2: Option<f64>,
    pub feasvi: Option<f64>,
    pub kktvi: Option<f64>,
    /// (tolerance, ratio) pairs, ascending in tolerance.
    pub sparsity: Vec<(f64, f64)>,
}

/// Sum over the batch of ‖net(x_n) − y_n‖², un-normalized.
pub fn sum_sq_err(params: &Params, batch: &DataBatch, alpha: f64) -> f64 {
    let n = batch.n_samples();
    let mut acc = 0.0;
    let mut xbuf = vec![0.0; batch.x.rows()];
    let mut ybuf = vec![0.0; batch.y.rows()];
    for s in 0..n {
        batch.x.col_to(s, &mut xbuf);
        batch.y.col_to(s, &mut ybuf);
        let out = predict_sample(params, &xbuf, alpha);
        for (o, y) in out.iter().zip(&ybuf) {
            let d = o - y;
            acc += d * d;
        }
    }
    acc
}

/// (TrainErr, TestErr): mean squared error over the training batch and over
/// the test batch, each normalized by its own sample count.
pub fn train_test_err(
    params: &Params,
    batch_train: &DataBatch,
    batch_test: &DataBatch,
    hp: &HyperParams,
) -> (f64, f64) {
    let train = sum_sq_err(params, batch_train, hp.alpha) / batch_train.n_samples() as f64;
    let test = sum_sq_err(params, batch_test, hp.alpha) / batch_test.n_samples() as f64;
    (train, test)
}

/// Fraction of samples whose predicted argmax matches the one-hot label;
/// ties break toward the lowest index.
pub fn accuracy(params: &Params, batch: &DataBatch, alpha: f64) -> f64 {
    let n = batch.n_samples();
    let mut hits = 0usize;
    let mut xbuf = vec![0.0; batch.x.rows()];
    let mut ybuf = vec![0.0; batch.y.rows()];
    for s in 0..n {
        batch.x.col_to(s, &mut xbuf);
        batch.y.col_to(s, &mut ybuf);
        let out = predict_sample(params, &xbuf, alpha);
        if argmax(&out) == argmax(&ybuf) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// (FeasVi1, FeasVi2, FeasVi): mean squared violations of v = σ(u) and
/// u = Wv + b, and their sum averaged over the unit count.
pub fn feasibility_violations(
    params: &Params,
    aux: &AuxState,
    batch: &DataBatch,
    hp: &HyperParams,
) -> (f64, f64, f64) {
    let n = batch.n_samples() as f64;
    let mut f1 = 0.0;
    for l in 1..=aux.v.layer_count() {
        for (vi, ui) in aux.v.layer(l).iter().zip(aux.u.layer(l)) {
            let d = vi - leaky_relu_scalar(*ui, hp.alpha);
            f1 += d * d;
        }
    }
    f1 /= n;
    let r = crate::penalty::primal_residual(params, aux, batch);
    let f2 = r.norm_sq() / n;
    let unit_count: usize = (1..=aux.v.layer_count()).map(|l| aux.v.dim(l)).sum();
    let feasvi = (f1 + f2) / unit_count as f64;
    (f1, f2, feasvi)
}

/// Fraction of weight columns across all layers whose ℓ2 norm is at most
/// `tolerance`; the denominator is the total column count Σ_{ℓ=0}^{L-1} N_ℓ.
pub fn column_sparsity_ratio(params: &Params, tolerance: f64) -> f64 {
    debug_assert!(tolerance >= 0.0);
    let mut hits = 0usize;
    let mut total = 0usize;
    for w in &params.weights {
        let norms = column_norms(w);
        for j in 0..norms.len() {
            total += 1;
            if norms[j] <= tolerance {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

/// Ratio assigned to runs marked as failed in performance profiles.
pub const PROFILE_FAIL_RATIO: f64 = 10_000.0;

/// Dolan-Moré performance profiles. `results` maps each solver to its
/// per-problem measurements over a shared problem list, `None` marking a
/// failed run. Returns, per solver, the step function π_s as sorted
/// (ω, π_s(ω)) breakpoints ending at ω = 10000 where every profile is 1.
pub fn performance_profile(
    results: &BTreeMap<String, Vec<Option<f64>>>,
) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let n_problems = match results.values().next() {
        Some(v) if !v.is_empty() => v.len(),
        _ => return Err(CoreError::EmptyProblemSet),
    };
    for (name, vals) in results {
        if vals.len() != n_problems {
            return Err(CoreError::DimensionMismatch {
                op: "performance_profile",
                detail: format!("solver `{name}` has {} values, expected {n_problems}", vals.len()),
            });
        }
    }

    let mut ratios: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in 0..n_problems {
        let best = results
            .values()
            .filter_map(|vals| vals[p])
            .fold(f64::INFINITY, f64::min);
        for (name, vals) in results {
            let r = match vals[p] {
                None => PROFILE_FAIL_RATIO,
                Some(v) => {
                    if best.is_infinite() {
                        PROFILE_FAIL_RATIO
                    } else if best == 0.0 {
                        if v == 0.0 {
                            1.0
                        } else {
                            PROFILE_FAIL_RATIO
                        }
                    } else {
                        (v / best).min(PROFILE_FAIL_RATIO)
                    }
                }
            };
            ratios.entry(name).or_default().push(r);
        }
    }

    let mut out = BTreeMap::new();
    for (name, mut rs) in ratios {
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut breakpoints: Vec<(f64, f64)> = Vec::new();
        for (i, r) in rs.iter().enumerate() {
            let pi = (i + 1) as f64 / n_problems as f64;
            match breakpoints.last_mut() {
                Some(last) if last.0 == *r => last.1 = pi,
                _ => breakpoints.push((*r, pi)),
            }
        }
        if breakpoints.last().map(|b| b.0) != Some(PROFILE_FAIL_RATIO) {
            breakpoints.push((PROFILE_FAIL_RATIO, 1.0));
        }
        out.insert(name.to_string(), breakpoints);
    }
    Ok(out)
}

/// Evaluates a breakpoint profile at ω.
pub fn profile_value(breakpoints: &[(f64, f64)], omega: f64) -> f64 {
    let mut value = 0.0;
    for (w, pi) in breakpoints {
        if *w <= omega {
            value = *pi;
        } else {
            break;
        }
    }
    value
}
