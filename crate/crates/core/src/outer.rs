//! Outer inexact augmented Lagrangian loop: multiplier updates, the
//! penalty/tolerance schedule with its feasibility window, stopping rules,
//! and per-iteration logging.

use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::inner::{init_inner, run_inner, InitSnapshot, InnerCaps, ProblemContext};
use crate::metrics::{feasibility_violations, train_test_err};
use crate::network::{forward, AuxState, DataBatch, HyperParams, Layered, NetworkShape, Params};
use crate::penalty::{compute_theta, primal_residual, Multipliers};
use crate::rng::Rng;

/// Parameters of the outer loop. The practical defaults follow the
/// experiment protocol; `theory_mode` raises η₃ above 1, the regime the
/// convergence guarantee asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct IalmConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub eps0: f64,
    pub rho0: f64,
    pub gamma: usize,
    pub stop_eps: f64,
    pub stop_rho_factor: f64,
    pub max_outer: usize,
    pub caps: InnerCaps,
    pub init: InitScheme,
}

impl IalmConfig {
    /// η₁=0.99, η₂=5/6, η₃=0.01, η₄=2/3, ε₀=0.1, ρ₀=1/N, γ=2L; stop at
    /// ε < 1e-6 or ρ > 10³ρ₀, with an outer cap of 1000.
    pub fn defaults_for(shape: &NetworkShape) -> Self {
        IalmConfig {
            eta1: 0.99,
            eta2: 5.0 / 6.0,
            eta3: 0.01,
            eta4: 2.0 / 3.0,
            eps0: 0.1,
            rho0: 1.0 / shape.n_samples() as f64,
            gamma: 2 * shape.layers(),
            stop_eps: 1e-6,
            stop_rho_factor: 1e3,
            max_outer: 1000,
            caps: InnerCaps::default(),
            init: InitScheme::OverN,
        }
    }

    /// η₃ = 1.01, the smallest convenient value satisfying the convergence
    /// theory's η₃ > 1 requirement.
    pub fn theory_mode(mut self) -> Self {
        self.eta3 = 1.01;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta4", self.eta4)] {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(CoreError::InvalidConfig {
                    field: match field {
                        "eta1" => "eta1",
                        "eta2" => "eta2",
                        _ => "eta4",
                    },
                    detail: format!("must lie in (0, 1), got {v}"),
                });
            }
        }
        if self.eta3 <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "eta3",
                detail: "must be > 0".into(),
            });
        }
        if self.eps0 <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "eps0",
                detail: "must be > 0".into(),
            });
        }
        if self.rho0 <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "rho0",
                detail: "must be > 0".into(),
            });
        }
        if self.gamma == 0 {
            return Err(CoreError::InvalidConfig {
                field: "gamma",
                detail: "must be >= 1".into(),
            });
        }
        if self.max_outer == 0 {
            return Err(CoreError::InvalidConfig {
                field: "max_outer",
                detail: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// One outer-iteration log row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub k: usize,
    pub rho: f64,
    pub eps: f64,
    pub l_value: f64,
    pub o_value: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub feasvi1: f64,
    pub feasvi2: f64,
    pub kktvi: f64,
    pub inner_iters: usize,
    /// Measured wall time of the iteration. Reported in summaries only; the
    /// CSV leaves this column empty so identical runs emit identical bytes.
    pub wall_seconds: f64,
    pub feas_norm: f64,
}

/// ξ ← ξ + ρ·r, componentwise.
pub fn update_multipliers(xi: &Multipliers, rho: f64, residual: &Layered) -> Multipliers {
    debug_assert!(rho > 0.0);
    let mut out = xi.clone();
    for l in 1..=out.xi.layer_count() {
        for (x, r) in out.xi.layer_mut(l).iter_mut().zip(residual.layer(l)) {
            *x += rho * r;
        }
    }
    out
}

/// Step 3 of the outer loop. `feas_history` holds ‖r^{(t)}‖ for
/// t = 1..=k in order, the current iteration's value last. Returns the next
/// (ρ, ε): unchanged while k ≤ γ; ε shrinks gently when the feasibility
/// norm beat the best of the trailing window, otherwise ρ escalates to
/// max{ρ/η₂, ‖ξ‖^{1+η₃}} and ε drops by η₄.
#[allow(clippy::too_many_arguments)]
pub fn schedule_step(
    k: usize,
    gamma: usize,
    eta1: f64,
    eta2: f64,
    eta3: f64,
    eta4: f64,
    rho: f64,
    eps: f64,
    feas_history: &[f64],
    xi_norm: f64,
) -> Result<(f64, f64)> {
    if k <= gamma {
        return Ok((rho, eps));
    }
    if feas_history.len() < gamma + 1 {
        return Err(CoreError::ShortHistory {
            needed: gamma + 1,
            have: feas_history.len(),
        });
    }
    let current = *feas_history.last().unwrap();
    let window = &feas_history[feas_history.len() - 1 - gamma..feas_history.len() - 1];
    let prev_max = window.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if current <= eta1 * prev_max {
        Ok((rho, eta1.sqrt() * eps))
    } else {
        Ok(((rho / eta2).max(xi_norm.powf(1.0 + eta3)), eta4 * eps))
    }
}

/// Full outcome of one training run.
#[derive(Debug, Clone)]
pub struct IalmRun {
    pub params: Params,
    pub aux: AuxState,
    pub records: Vec<RunRecord>,
    pub theta: f64,
    pub seed: u64,
    /// Present when the inner solver aborted; the records hold the log up to
    /// that point.
    pub failure: Option<String>,
}

/// Weight initialization scheme.
///
/// `OverN` is the experiment protocol's W ~ randn/N. That scale collapses
/// on wide inputs with [0, 1] features: the hidden activations start around
/// (1/N)² and the group prox freezes whole layers at exactly zero before any
/// signal reaches them, an absorbing state. `FanIn` (randn/√N_{ℓ-1}) keeps
/// early activations O(1) and is the scale to use on image-sized inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    OverN,
    FanIn,
}

/// Gaussian parameter initialization with b = 0, driven by the seed alone.
pub fn init_params(shape: &NetworkShape, seed: u64, scheme: InitScheme) -> Params {
    let mut rng = Rng::new(seed).derive(0x57_49_4e_49);
    let mut params = Params::zeros(shape);
    let n = shape.n_samples() as f64;
    for (l, w) in params.weights.iter_mut().enumerate() {
        let scale = match scheme {
            InitScheme::OverN => 1.0 / n,
            InitScheme::FanIn => 1.0 / (shape.dim(l) as f64).sqrt(),
        };
        for e in w.entries_mut() {
            *e = rng.next_normal() * scale;
        }
    }
    params
}

/// The outer loop: repeatedly solve the penalized subproblem inexactly,
/// update multipliers, and advance the (ρ, ε) schedule until ε falls below
/// `stop_eps`, ρ exceeds the cap (checked after the jump), or `max_outer`
/// iterations have run.
pub fn run_ialam(
    batch: &DataBatch,
    test_batch: Option<&DataBatch>,
    shape: &NetworkShape,
    hp: &HyperParams,
    cfg: &IalmConfig,
    seed: u64,
) -> Result<IalmRun> {
    cfg.validate()?;
    hp.validate(shape)?;
    let ctx = ProblemContext::new(shape.clone(), batch)?;

    let mut params = init_params(shape, seed, cfg.init);
    let aux0 = forward(&params, batch, hp, shape)?;
    let theta = compute_theta(batch, &params, &aux0, hp).theta;
    let mut aux = aux0;
    let mut xi = Multipliers::zeros(shape);
    let mut rho = cfg.rho0;
    let mut eps = cfg.eps0;
    let mut records: Vec<RunRecord> = Vec::new();
    let mut feas_history: Vec<f64> = Vec::new();
    let mut stored_init: Option<InitSnapshot> = None;
    let mut failure = None;

    for k in 1..=cfg.max_outer {
        let started = Instant::now();
        let snapshot = match init_inner(&params, stored_init.as_ref(), rho, &xi, batch, hp, shape, theta) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(format!("init at k = {k}: {e}"));
                break;
            }
        };
        stored_init = Some(snapshot.clone());

        let (state, report) = match run_inner(&ctx, &snapshot, &xi, rho, batch, hp, theta, eps, &cfg.caps) {
            Ok(ok) => ok,
            Err(e) => {
                failure = Some(format!("inner solve at k = {k}: {e}"));
                break;
            }
        };
        params = state.params;
        aux = state.aux;

        let residual = primal_residual(&params, &aux, batch);
        let feas_norm = residual.norm_sq().sqrt();
        feas_history.push(feas_norm);
        let xi_new = update_multipliers(&xi, rho, &residual);

        let (f1, f2, _) = feasibility_violations(&params, &aux, batch, hp);
        let (train_err, test_err) = match test_batch {
            Some(tb) => {
                let (tr, te) = train_test_err(&params, batch, tb, hp);
                (tr, Some(te))
            }
            None => (
                crate::metrics::sum_sq_err(&params, batch, hp.alpha) / shape.n_samples() as f64,
                None,
            ),
        };
        let o_value = crate::network::objective_penalized(&params, &aux, batch, hp);
        let kktvi = report.final_residual + 0.5 * f2;
        records.push(RunRecord {
            k,
            rho,
            eps,
            l_value: state.l_value,
            o_value,
            train_err,
            test_err,
            feasvi1: f1,
            feasvi2: f2,
            kktvi,
            inner_iters: report.iterations,
            wall_seconds: started.elapsed().as_secs_f64(),
            feas_norm,
        });

        let (rho_next, eps_next) = schedule_step(
            k,
            cfg.gamma,
            cfg.eta1,
            cfg.eta2,
            cfg.eta3,
            cfg.eta4,
            rho,
            eps,
            &feas_history,
            xi_new.norm(),
        )?;
        xi = xi_new;
        rho = rho_next;
        eps = eps_next;

        if eps < cfg.stop_eps || rho > cfg.stop_rho_factor * cfg.rho0 {
            break;
        }
    }

    Ok(IalmRun {
        params,
        aux,
        records,
        theta,
        seed,
        failure,
    })
}

/// Fixed CSV header shared by every solver's run log.
pub const CSV_HEADER: &str =
    "k,rho,eps,L,O,TrainErr,TestErr,FeasVi1,FeasVi2,KKTVi,inner_iters,wall_s,feas_norm";

/// Full-precision float for reproducible logs: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// Serializes records under the fixed header. The wall_s column stays empty:
/// timing is environment noise and the log must be byte-identical across
/// identical runs.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.k,
            fmt_float(r.rho),
            fmt_float(r.eps),
            fmt_float(r.l_value),
            fmt_float(r.o_value),
            fmt_float(r.train_err),
            fmt_opt(r.test_err),
            fmt_float(r.feasvi1),
            fmt_float(r.feasvi2),
            fmt_float(r.kktvi),
            r.inner_iters,
            "",
            fmt_float(r.feas_norm),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn tiny_problem(seed: u64) -> (NetworkShape, DataBatch, HyperParams) {
        let shape = NetworkShape::new(vec![2, 2, 1], 12).unwrap();
        let mut rng = Rng::new(seed);
        let mut x = DenseMatrix::zeros(2, 12);
        rng.fill_normal(x.entries_mut());
        let mut y = DenseMatrix::zeros(1, 12);
        rng.fill_normal(y.entries_mut());
        let hp = HyperParams::defaults_for(&shape);
        (shape, DataBatch::new(x, y).unwrap(), hp)
    }

    #[test]
    fn multiplier_update_definition() {
        let shape = NetworkShape::new(vec![1, 2], 1).unwrap();
        let xi = Multipliers::zeros(&shape);
        let mut r = Layered::zeros(&shape);
        r.sample_mut(1, 0).copy_from_slice(&[1.0, -1.0]);
        let out = update_multipliers(&xi, 2.0, &r);
        assert_eq!(out.xi.sample(1, 0), &[2.0, -2.0]);
        // zero residual leaves xi unchanged
        let z = Layered::zeros(&shape);
        let same = update_multipliers(&out, 5.0, &z);
        assert_eq!(same.xi, out.xi);
        // xi' - xi equals rho * r exactly when starting from zero
        let mut rng = Rng::new(3);
        let mut r2 = Layered::zeros(&shape);
        for x in r2.layer_mut(1) {
            *x = rng.next_normal();
        }
        let fresh = update_multipliers(&Multipliers::zeros(&shape), 1.7, &r2);
        for (a, b) in fresh.xi.layer(1).iter().zip(r2.layer(1)) {
            assert_eq!(a.to_bits(), (1.7 * b).to_bits());
        }
    }

    #[test]
    fn schedule_keeps_both_during_warmup() {
        let (rho, eps) = schedule_step(2, 2, 0.99, 5.0 / 6.0, 0.01, 2.0 / 3.0, 1.0, 0.1, &[1.0, 1.0], 7.0).unwrap();
        assert_eq!(rho, 1.0);
        assert_eq!(eps, 0.1);
    }

    #[test]
    fn schedule_shrinks_eps_on_feasibility_progress() {
        let history = [1.0, 1.0, 0.5];
        let (rho, eps) =
            schedule_step(3, 2, 0.99, 5.0 / 6.0, 0.01, 2.0 / 3.0, 1.0, 0.1, &history, 7.0).unwrap();
        assert_eq!(rho, 1.0);
        assert_eq!(eps.to_bits(), (0.99_f64.sqrt() * 0.1).to_bits());
    }

    #[test]
    fn schedule_escalates_rho_otherwise() {
        let history = [1.0, 1.0, 2.0];
        let (rho, eps) =
            schedule_step(3, 2, 0.99, 5.0 / 6.0, 0.01, 2.0 / 3.0, 1.0, 0.1, &history, 1.0).unwrap();
        // max{1 / (5/6), 1^{1.01}} = 1.2
        assert_eq!(rho.to_bits(), (1.0_f64 / (5.0 / 6.0)).to_bits());
        assert!((rho - 1.2).abs() < 1e-15);
        assert_eq!(eps.to_bits(), (2.0 / 3.0 * 0.1_f64).to_bits());
    }

    #[test]
    fn schedule_uses_multiplier_norm_when_it_dominates() {
        let history = [1.0, 1.0, 2.0];
        let (rho, _) =
            schedule_step(3, 2, 0.99, 5.0 / 6.0, 0.01, 2.0 / 3.0, 1.0, 0.1, &history, 30.0).unwrap();
        assert_eq!(rho.to_bits(), 30.0_f64.powf(1.01).to_bits());
    }

    #[test]
    fn schedule_demands_enough_history() {
        assert!(matches!(
            schedule_step(3, 2, 0.99, 5.0 / 6.0, 0.01, 2.0 / 3.0, 1.0, 0.1, &[1.0], 1.0),
            Err(CoreError::ShortHistory { .. })
        ));
    }

    #[test]
    fn run_terminates_immediately_with_huge_stop_eps() {
        let (shape, batch, hp) = tiny_problem(1);
        let mut cfg = IalmConfig::defaults_for(&shape);
        cfg.stop_eps = 1e9;
        cfg.caps.max_inner = 20;
        let run = run_ialam(&batch, None, &shape, &hp, &cfg, 0).unwrap();
        assert!(run.failure.is_none());
        assert_eq!(run.records.len(), 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let (shape, batch, hp) = tiny_problem(2);
        let mut cfg = IalmConfig::defaults_for(&shape);
        cfg.max_outer = 6;
        cfg.caps.max_inner = 15;
        let a = run_ialam(&batch, Some(&batch), &shape, &hp, &cfg, 42).unwrap();
        let b = run_ialam(&batch, Some(&batch), &shape, &hp, &cfg, 42).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.k, rb.k);
            assert_eq!(ra.rho.to_bits(), rb.rho.to_bits());
            assert_eq!(ra.eps.to_bits(), rb.eps.to_bits());
            assert_eq!(ra.l_value.to_bits(), rb.l_value.to_bits());
            assert_eq!(ra.o_value.to_bits(), rb.o_value.to_bits());
            assert_eq!(ra.feas_norm.to_bits(), rb.feas_norm.to_bits());
            assert_eq!(ra.kktvi.to_bits(), rb.kktvi.to_bits());
        }
        assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
        // different seeds diverge
        let c = run_ialam(&batch, Some(&batch), &shape, &hp, &cfg, 43).unwrap();
        assert_ne!(
            a.records[0].l_value.to_bits(),
            c.records[0].l_value.to_bits()
        );
    }

    #[test]
    fn schedule_replay_matches_logged_sequence() {
        let (shape, batch, hp) = tiny_problem(3);
        let mut cfg = IalmConfig::defaults_for(&shape);
        cfg.max_outer = 14;
        cfg.caps.max_inner = 10;
        let run = run_ialam(&batch, None, &shape, &hp, &cfg, 7).unwrap();
        assert!(run.records.len() > cfg.gamma);
        // rho nondecreasing, eps nonincreasing
        for w in run.records.windows(2) {
            assert!(w[1].rho >= w[0].rho);
            assert!(w[1].eps <= w[0].eps);
        }
        // replay the three-branch rule from the logged feasibility history
        let mut rho = cfg.rho0;
        let mut eps = cfg.eps0;
        let mut history = Vec::new();
        for (i, rec) in run.records.iter().enumerate() {
            assert_eq!(rec.rho.to_bits(), rho.to_bits(), "rho mismatch at k = {}", rec.k);
            assert_eq!(rec.eps.to_bits(), eps.to_bits(), "eps mismatch at k = {}", rec.k);
            history.push(rec.feas_norm);
            // the logged xi norm is not in the record; recompute by replaying
            // multiplier updates
            let _ = i;
            let k = rec.k;
            if k <= cfg.gamma {
                continue;
            }
            let current = *history.last().unwrap();
            let window = &history[history.len() - 1 - cfg.gamma..history.len() - 1];
            let prev_max = window.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if current <= cfg.eta1 * prev_max {
                eps *= cfg.eta1.sqrt();
            } else {
                // xi norm replay would need the residual stream; only verify the
                // eps branch and the monotone rho jump here
                eps *= cfg.eta4;
                assert!(run.records.get(k).map(|r| r.rho >= rho / cfg.eta2 - 1e-18).unwrap_or(true));
                if let Some(next) = run.records.get(k) {
                    rho = next.rho;
                }
            }
        }
    }

    #[test]
    fn multiplier_step_norm_matches_rho_times_residual_norm() {
        let (shape, batch, hp) = tiny_problem(4);
        let mut cfg = IalmConfig::defaults_for(&shape);
        cfg.max_outer = 8;
        cfg.caps.max_inner = 10;
        // replicate the run manually to track xi
        let ctx = ProblemContext::new(shape.clone(), &batch).unwrap();
        let params0 = init_params(&shape, 5);
        let aux0 = forward(&params0, &batch, &hp, &shape).unwrap();
        let theta = compute_theta(&batch, &params0, &aux0, &hp).theta;
        let mut xi = Multipliers::zeros(&shape);
        let mut params = params0;
        let rho = cfg.rho0;
        let snapshot = init_inner(&params, None, rho, &xi, &batch, &hp, &shape, theta).unwrap();
        let (state, _) =
            run_inner(&ctx, &snapshot, &xi, rho, &batch, &hp, theta, cfg.eps0, &cfg.caps).unwrap();
        params = state.params;
        let r = primal_residual(&params, &state.aux, &batch);
        let xi_new = update_multipliers(&xi, rho, &r);
        let mut dxi_sq = 0.0;
        for l in 1..=shape.layers() {
            for (a, b) in xi_new.xi.layer(l).iter().zip(xi.xi.layer(l)) {
                let d = a - b;
                dxi_sq += d * d;
            }
        }
        let lhs = dxi_sq.sqrt();
        let rhs = rho * r.norm_sq().sqrt();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs), "{lhs} vs {rhs}");
        xi = xi_new;
        let _ = xi;
    }

    #[test]
    fn feasibility_norm_decays_when_schedule_never_escalates() {
        let (shape, batch, hp) = tiny_problem(6);
        let mut cfg = IalmConfig::defaults_for(&shape);
        cfg.max_outer = 40;
        cfg.caps.max_inner = 60;
        let run = run_ialam(&batch, None, &shape, &hp, &cfg, 11).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        // find the last escalation; afterwards feasibility must shrink below
        // a modest tolerance within the logged window
        let rho_changes: Vec<usize> = run
            .records
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].rho > w[0].rho)
            .map(|(i, _)| i + 1)
            .collect();
        let tail_start = rho_changes.last().map(|&i| i + 1).unwrap_or(0);
        let tail: Vec<f64> = run.records[tail_start..].iter().map(|r| r.feas_norm).collect();
        if tail.len() > cfg.gamma + 2 {
            let early = tail[..cfg.gamma].iter().cloned().fold(f64::MIN, f64::max);
            let late = tail.last().copied().unwrap();
            assert!(late <= early + 1e-12, "feasibility did not decay: {early} -> {late}");
        }
    }

    #[test]
    fn csv_round_trips_and_has_fixed_header() {
        let rec = RunRecord {
            k: 1,
            rho: 0.1,
            eps: 0.25,
            l_value: 1.5,
            o_value: 1.25,
            train_err: 0.5,
            test_err: None,
            feasvi1: 1e-7,
            feasvi2: 2e-9,
            kktvi: 3e-4,
            inner_iters: 12,
            wall_seconds: 0.125,
            feas_norm: 1e-3,
        };
        let csv = records_to_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], "1");
        assert_eq!(fields[11], "");
        let back: f64 = fields[1].parse().unwrap();
        assert_eq!(back.to_bits(), 0.1_f64.to_bits());
        let back: f64 = fields[9].parse().unwrap();
        assert_eq!(back.to_bits(), 3e-4_f64.to_bits());
    }
}
