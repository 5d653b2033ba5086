//! SGD-family comparison solvers operating directly on the unsplit training
//! problem, sharing one hand-derived minibatch backpropagation engine for
//! the leaky-ReLU squared loss with the ℓ2,1 subgradient.

use crate::error::{CoreError, Result};
use crate::linalg::{column_norms, matvec_into, matvec_transpose_into, DenseMatrix};
use crate::metrics::{accuracy, sum_sq_err};
use crate::network::{DataBatch, HyperParams, NetworkShape, Params};
use crate::outer::{fmt_float, CSV_HEADER};
use crate::prox::prox_group_lasso_inplace;
use crate::rng::Rng;

/// Solver tags for the baseline family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgdMethod {
    Vanilla,
    Adam,
    Adamax,
    Adadelta,
    Adagrad,
    AdagradDecay,
    ProxSgd,
}

impl SgdMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SgdMethod::Vanilla => "sgd",
            SgdMethod::Adam => "adam",
            SgdMethod::Adamax => "adamax",
            SgdMethod::Adadelta => "adadelta",
            SgdMethod::Adagrad => "adagrad",
            SgdMethod::AdagradDecay => "adagraddecay",
            SgdMethod::ProxSgd => "proxsgd",
        }
    }
}

/// Baseline configuration. Step sizes follow the standard literature
/// defaults per method; the vanilla learning rate decays as 1/√epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub method: SgdMethod,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    /// Evaluate the epoch record every `record_every` epochs (the final
    /// epoch is always recorded).
    pub record_every: usize,
    pub init: crate::outer::InitScheme,
}

impl SgdConfig {
    /// Literature defaults: vanilla/proxsgd lr 1e-2 with 1/√epoch decay,
    /// Adam lr 1e-3 β (0.9, 0.999) ε 1e-8, Adamax lr 2e-3, Adadelta decay
    /// 0.95 ε 1e-6, Adagrad lr 1e-2; batch size ⌈√N⌉ and 1000 epochs.
    pub fn defaults_for(method: SgdMethod, n_samples: usize, seed: u64) -> Self {
        let batch_size = (n_samples as f64).sqrt().ceil() as usize;
        let (lr, beta1, beta2, eps, decay) = match method {
            SgdMethod::Vanilla | SgdMethod::ProxSgd => (1e-2, 0.0, 0.0, 0.0, 0.0),
            SgdMethod::Adam => (1e-3, 0.9, 0.999, 1e-8, 0.0),
            SgdMethod::Adamax => (2e-3, 0.9, 0.999, 1e-8, 0.0),
            SgdMethod::Adadelta => (0.0, 0.0, 0.0, 1e-6, 0.95),
            SgdMethod::Adagrad | SgdMethod::AdagradDecay => (1e-2, 0.0, 0.0, 1e-8, 0.0),
        };
        SgdConfig {
            method,
            batch_size: batch_size.clamp(1, n_samples),
            max_epochs: 1000,
            seed,
            lr,
            beta1,
            beta2,
            eps,
            decay,
            record_every: 1,
            init: crate::outer::InitScheme::default(),
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_samples {
            return Err(CoreError::InvalidConfig {
                field: "batch_size",
                detail: format!("must lie in [1, {n_samples}], got {}", self.batch_size),
            });
        }
        if self.max_epochs == 0 {
            return Err(CoreError::InvalidConfig {
                field: "max_epochs",
                detail: "must be >= 1".into(),
            });
        }
        if self.record_every == 0 {
            return Err(CoreError::InvalidConfig {
                field: "record_every",
                detail: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Per-layer gradients matching the parameter shapes.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_weights: Vec<DenseMatrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl GradientBundle {
    fn zeros(shape: &NetworkShape) -> Self {
        let p = Params::zeros(shape);
        GradientBundle {
            d_weights: p.weights,
            d_biases: p.biases,
        }
    }

    fn is_finite(&self) -> bool {
        self.d_weights.iter().all(DenseMatrix::is_finite)
            && self.d_biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Chain-rule gradient of (1/|B|)Σ_{n∈B}‖net(x_n) − y_n‖² with the kink
/// convention σ'(0) = α, plus the ℓ2,1 subgradient λ_w·col/‖col‖ on nonzero
/// columns (zero on zero columns). Pass `include_reg = false` for the smooth
/// loss alone.
pub fn backprop_minibatch(
    params: &Params,
    indices: &[usize],
    batch: &DataBatch,
    hp: &HyperParams,
    shape: &NetworkShape,
    include_reg: bool,
) -> GradientBundle {
    debug_assert!(!indices.is_empty());
    let layers = shape.layers();
    let mut grad = GradientBundle::zeros(shape);
    let scale = 1.0 / indices.len() as f64;

    let mut xbuf = vec![0.0; batch.x.rows()];
    let mut ybuf = vec![0.0; batch.y.rows()];
    for &n in indices {
        batch.x.col_to(n, &mut xbuf);
        batch.y.col_to(n, &mut ybuf);
        // forward pass storing pre-activations and activations
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        acts.push(xbuf.clone());
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 1..=layers {
            let w = &params.weights[l - 1];
            let mut z = vec![0.0; w.rows()];
            matvec_into(w, &acts[l - 1], &mut z);
            for (zi, bi) in z.iter_mut().zip(&params.biases[l - 1]) {
                *zi += bi;
            }
            let a = z.iter().map(|&zi| zi.max(hp.alpha * zi)).collect();
            pres.push(z);
            acts.push(a);
        }
        // backward pass
        let mut delta: Vec<f64> = acts[layers]
            .iter()
            .zip(&ybuf)
            .map(|(o, y)| 2.0 * scale * (o - y))
            .collect();
        for l in (1..=layers).rev() {
            // through the activation: sigma'(z) = 1 for z > 0, alpha otherwise
            for (d, z) in delta.iter_mut().zip(&pres[l - 1]) {
                if *z <= 0.0 {
                    *d *= hp.alpha;
                }
            }
            let w = &params.weights[l - 1];
            let gw = &mut grad.d_weights[l - 1];
            for (i, di) in delta.iter().enumerate() {
                let row = gw.row_mut(i);
                for (gij, aj) in row.iter_mut().zip(&acts[l - 1]) {
                    *gij += di * aj;
                }
            }
            for (gb, di) in grad.d_biases[l - 1].iter_mut().zip(&delta) {
                *gb += di;
            }
            if l > 1 {
                let mut next = vec![0.0; w.cols()];
                matvec_transpose_into(w, &delta, &mut next);
                delta = next;
            }
        }
    }

    if include_reg && hp.lambda_w > 0.0 {
        for (gw, w) in grad.d_weights.iter_mut().zip(&params.weights) {
            let norms = column_norms(w);
            for j in 0..w.cols() {
                if norms[j] > 0.0 {
                    for i in 0..w.rows() {
                        gw[(i, j)] += hp.lambda_w * w[(i, j)] / norms[j];
                    }
                }
            }
        }
    }
    grad
}

/// Per-epoch log row for the baseline solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Value of the training objective: mean squared loss plus λ_w‖·‖_{2,1}.
    pub objective: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub accuracy: Option<f64>,
    pub test_acc: Option<f64>,
    pub batches: usize,
    pub diverged: bool,
}

/// Output of a baseline run.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub params: Params,
    pub records: Vec<EpochRecord>,
    pub diverged: bool,
}

struct MomentState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl MomentState {
    fn new(params: &Params) -> Self {
        let mk = || {
            let mut out: Vec<Vec<f64>> = Vec::new();
            for w in &params.weights {
                out.push(vec![0.0; w.entries().len()]);
            }
            for b in &params.biases {
                out.push(vec![0.0; b.len()]);
            }
            out
        };
        MomentState {
            m: mk(),
            v: mk(),
            step: 0,
        }
    }
}

fn for_each_coord(params: &mut Params, grad: &GradientBundle, mut f: impl FnMut(usize, &mut f64, f64)) {
    let mut slot = 0usize;
    let layers = params.weights.len();
    for l in 0..layers {
        let g = &grad.d_weights[l];
        for (p, gv) in params.weights[l].entries_mut().iter_mut().zip(g.entries()) {
            f(slot, p, *gv);
            slot += 1;
        }
    }
    for l in 0..layers {
        for (p, gv) in params.biases[l].iter_mut().zip(&grad.d_biases[l]) {
            f(slot, p, *gv);
            slot += 1;
        }
    }
}

fn flat_slot_views(state: &mut MomentState) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
    (&mut state.m, &mut state.v)
}

fn flat_index(params: &Params, slot: usize) -> (usize, usize) {
    // maps a flat coordinate to (buffer, offset) in the MomentState layout
    let mut remaining = slot;
    let layers = params.weights.len();
    for l in 0..layers {
        let len = params.weights[l].entries().len();
        if remaining < len {
            return (l, remaining);
        }
        remaining -= len;
    }
    for l in 0..layers {
        let len = params.biases[l].len();
        if remaining < len {
            return (layers + l, remaining);
        }
        remaining -= len;
    }
    unreachable!("slot out of range")
}

/// Runs the selected baseline for `max_epochs` epochs of shuffled
/// minibatches. A NaN loss flags divergence, stops the run, and is recorded.
pub fn run_sgd_family(
    batch: &DataBatch,
    test_batch: Option<&DataBatch>,
    shape: &NetworkShape,
    hp: &HyperParams,
    cfg: &SgdConfig,
) -> Result<SgdRun> {
    cfg.validate(shape.n_samples())?;
    if !(0.0..1.0).contains(&hp.alpha) {
        return Err(CoreError::InvalidConfig {
            field: "alpha",
            detail: format!("must lie in [0, 1), got {}", hp.alpha),
        });
    }
    if hp.lambda_w < 0.0 {
        return Err(CoreError::InvalidConfig {
            field: "lambda_w",
            detail: "must be >= 0".into(),
        });
    }
    let n = shape.n_samples();
    let classification = shape.dim(shape.layers()) == 10;
    let mut rng = Rng::new(cfg.seed).derive(0x53_47_44);
    let mut params = crate::outer::init_params(shape, cfg.seed, cfg.init);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut state = MomentState::new(&params);
    let mut records = Vec::new();
    let mut diverged = false;
    let is_prox = cfg.method == SgdMethod::ProxSgd;

    'epochs: for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut indices);
        let lr_epoch = match cfg.method {
            SgdMethod::Vanilla | SgdMethod::ProxSgd | SgdMethod::AdagradDecay => {
                cfg.lr / (epoch as f64).sqrt()
            }
            _ => cfg.lr,
        };
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            batches += 1;
            let grad = backprop_minibatch(&params, chunk, batch, hp, shape, !is_prox);
            if !grad.is_finite() {
                diverged = true;
                break;
            }
            state.step += 1;
            match cfg.method {
                SgdMethod::Vanilla | SgdMethod::ProxSgd => {
                    for_each_coord(&mut params, &grad, |_, p, g| *p -= lr_epoch * g);
                    if is_prox {
                        let threshold = lr_epoch * hp.lambda_w;
                        for w in &mut params.weights {
                            prox_group_lasso_inplace(w, threshold);
                        }
                    }
                }
                SgdMethod::Adam => {
                    let t = state.step;
                    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                    let (m, v) = flat_slot_views(&mut state);
                    let p_ref = &params;
                    let locate = |slot: usize| flat_index(p_ref, slot);
                    let mut upd: Vec<(usize, f64)> = Vec::new();
                    {
                        let mut slot = 0usize;
                        let mut apply = |g: f64| {
                            let (buf, off) = locate(slot);
                            m[buf][off] = cfg.beta1 * m[buf][off] + (1.0 - cfg.beta1) * g;
                            v[buf][off] = cfg.beta2 * v[buf][off] + (1.0 - cfg.beta2) * g * g;
                            let mh = m[buf][off] / bc1;
                            let vh = v[buf][off] / bc2;
                            upd.push((slot, lr_epoch * mh / (vh.sqrt() + cfg.eps)));
                            slot += 1;
                        };
                        for l in 0..params.weights.len() {
                            for g in grad.d_weights[l].entries() {
                                apply(*g);
                            }
                        }
                        for l in 0..params.biases.len() {
                            for g in &grad.d_biases[l] {
                                apply(*g);
                            }
                        }
                    }
                    let mut it = upd.into_iter();
                    for_each_coord(&mut params, &grad, |_, p, _| {
                        let (_, step) = it.next().unwrap();
                        *p -= step;
                    });
                }
                SgdMethod::Adamax => {
                    let t = state.step;
                    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                    let (m, v) = flat_slot_views(&mut state);
                    let p_ref = &params;
                    let locate = |slot: usize| flat_index(p_ref, slot);
                    let mut upd: Vec<f64> = Vec::new();
                    {
                        let mut slot = 0usize;
                        let mut apply = |g: f64| {
                            let (buf, off) = locate(slot);
                            m[buf][off] = cfg.beta1 * m[buf][off] + (1.0 - cfg.beta1) * g;
                            v[buf][off] = (cfg.beta2 * v[buf][off]).max(g.abs());
                            upd.push(lr_epoch / bc1 * m[buf][off] / (v[buf][off] + cfg.eps));
                            slot += 1;
                        };
                        for l in 0..params.weights.len() {
                            for g in grad.d_weights[l].entries() {
                                apply(*g);
                            }
                        }
                        for l in 0..params.biases.len() {
                            for g in &grad.d_biases[l] {
                                apply(*g);
                            }
                        }
                    }
                    let mut it = upd.into_iter();
                    for_each_coord(&mut params, &grad, |_, p, _| {
                        *p -= it.next().unwrap();
                    });
                }
                SgdMethod::Adadelta => {
                    let (eg, ed) = flat_slot_views(&mut state);
                    let p_ref = &params;
                    let locate = |slot: usize| flat_index(p_ref, slot);
                    let mut upd: Vec<f64> = Vec::new();
                    {
                        let mut slot = 0usize;
                        let mut apply = |g: f64| {
                            let (buf, off) = locate(slot);
                            eg[buf][off] = cfg.decay * eg[buf][off] + (1.0 - cfg.decay) * g * g;
                            let dx = -((ed[buf][off] + cfg.eps).sqrt()
                                / (eg[buf][off] + cfg.eps).sqrt())
                                * g;
                            ed[buf][off] = cfg.decay * ed[buf][off] + (1.0 - cfg.decay) * dx * dx;
                            upd.push(dx);
                            slot += 1;
                        };
                        for l in 0..params.weights.len() {
                            for g in grad.d_weights[l].entries() {
                                apply(*g);
                            }
                        }
                        for l in 0..params.biases.len() {
                            for g in &grad.d_biases[l] {
                                apply(*g);
                            }
                        }
                    }
                    let mut it = upd.into_iter();
                    for_each_coord(&mut params, &grad, |_, p, _| {
                        *p += it.next().unwrap();
                    });
                }
                SgdMethod::Adagrad | SgdMethod::AdagradDecay => {
                    let (acc, _) = flat_slot_views(&mut state);
                    let p_ref = &params;
                    let locate = |slot: usize| flat_index(p_ref, slot);
                    let mut upd: Vec<f64> = Vec::new();
                    {
                        let mut slot = 0usize;
                        let mut apply = |g: f64| {
                            let (buf, off) = locate(slot);
                            acc[buf][off] += g * g;
                            upd.push(lr_epoch * g / (acc[buf][off].sqrt() + cfg.eps));
                            slot += 1;
                        };
                        for l in 0..params.weights.len() {
                            for g in grad.d_weights[l].entries() {
                                apply(*g);
                            }
                        }
                        for l in 0..params.biases.len() {
                            for g in &grad.d_biases[l] {
                                apply(*g);
                            }
                        }
                    }
                    let mut it = upd.into_iter();
                    for_each_coord(&mut params, &grad, |_, p, _| {
                        *p -= it.next().unwrap();
                    });
                }
            }
        }

        let record_now =
            epoch % cfg.record_every == 0 || epoch == cfg.max_epochs || diverged;
        if record_now {
            let train_err = sum_sq_err(&params, batch, hp.alpha) / n as f64;
            if !train_err.is_finite() {
                diverged = true;
            }
            let objective = train_err + hp.lambda_w * params.group_norm();
            let test_err = test_batch.map(|tb| sum_sq_err(&params, tb, hp.alpha) / tb.n_samples() as f64);
            let (acc, tacc) = if classification {
                (
                    Some(accuracy(&params, batch, hp.alpha)),
                    test_batch.map(|tb| accuracy(&params, tb, hp.alpha)),
                )
            } else {
                (None, None)
            };
            records.push(EpochRecord {
                epoch,
                objective,
                train_err,
                test_err,
                accuracy: acc,
                test_acc: tacc,
                batches,
                diverged,
            });
        }
        if diverged {
            break 'epochs;
        }
    }

    Ok(SgdRun {
        params,
        records,
        diverged,
    })
}

/// Proximal SGD: vanilla steps on the smooth loss, each followed by the
/// group-lasso proximal map with threshold lr·λ_w.
pub fn run_proxsgd(
    batch: &DataBatch,
    test_batch: Option<&DataBatch>,
    shape: &NetworkShape,
    hp: &HyperParams,
    cfg: &SgdConfig,
) -> Result<SgdRun> {
    let mut cfg = cfg.clone();
    cfg.method = SgdMethod::ProxSgd;
    run_sgd_family(batch, test_batch, shape, hp, &cfg)
}

/// Baseline epoch log under the shared CSV header; the Lagrangian-specific
/// columns stay empty.
pub fn epoch_records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},,,,{},{},{},,,,{},,\n",
            r.epoch,
            fmt_float(r.objective),
            fmt_float(r.train_err),
            r.test_err.map(fmt_float).unwrap_or_default(),
            r.batches,
        ));
    }
    out
}
