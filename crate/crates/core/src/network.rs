//! Network and problem definition: shapes, hyperparameters, the leaky-ReLU
//! activation, forward propagation, and the two regularized objectives.

use crate::error::{CoreError, Result};
use crate::linalg::{column_norms, matvec_into, DenseMatrix};

/// Layer dimensions plus the training-sample count.
///
/// `dims` lists the widths N₀..N_L including input and output, so the number
/// of weight layers is `dims.len() - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    dims: Vec<usize>,
    n_samples: usize,
}

impl NetworkShape {
    pub fn new(dims: Vec<usize>, n_samples: usize) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::InvalidConfig {
                field: "dims",
                detail: "need at least input and output widths (L >= 1)".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidConfig {
                field: "dims",
                detail: "all layer widths must be >= 1".into(),
            });
        }
        if n_samples == 0 {
            return Err(CoreError::InvalidConfig {
                field: "n_samples",
                detail: "need at least one training sample".into(),
            });
        }
        Ok(NetworkShape { dims, n_samples })
    }

    /// Number of weight layers L.
    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Width of layer ℓ for ℓ in 0..=L (0 is the input).
    pub fn dim(&self, layer: usize) -> usize {
        self.dims[layer]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Total weight count Σ NₗNₗ₋₁.
    pub fn weight_count(&self) -> usize {
        (1..self.dims.len()).map(|l| self.dims[l] * self.dims[l - 1]).sum()
    }

    /// Total hidden/output width Σ_{ℓ≥1} Nₗ.
    pub fn unit_count(&self) -> usize {
        self.dims[1..].iter().sum()
    }

    /// Total auxiliary coordinates m = N · Σ_{ℓ≥1} Nₗ.
    pub fn aux_count(&self) -> usize {
        self.n_samples * self.unit_count()
    }
}

/// Model hyperparameters of the penalized problem.
///
/// `alpha` may be 0 (plain ReLU); that mode is accepted as a heuristic and
/// the boundedness guarantees of the leaky case no longer apply, so
/// [`HyperParams::validate`] reports it through the returned flag.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub alpha: f64,
    pub lambda_w: f64,
    pub lambda_v: f64,
    /// Per-layer penalty weights β₁..β_L.
    pub beta: Vec<f64>,
    pub tau1: f64,
}

impl HyperParams {
    /// Experiment defaults: α=0.01, λ_w=1/N, λ_v=1/(100N), β=1/N per layer,
    /// τ₁=1/(10N).
    pub fn defaults_for(shape: &NetworkShape) -> Self {
        let n = shape.n_samples() as f64;
        HyperParams {
            alpha: 0.01,
            lambda_w: 1.0 / n,
            lambda_v: 1.0 / (100.0 * n),
            beta: vec![1.0 / n; shape.layers()],
            tau1: 1.0 / (10.0 * n),
        }
    }

    /// Checks ranges; returns `true` when alpha == 0 (ReLU heuristic mode).
    pub fn validate(&self, shape: &NetworkShape) -> Result<bool> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(CoreError::InvalidConfig {
                field: "alpha",
                detail: format!("must lie in [0, 1), got {}", self.alpha),
            });
        }
        if self.lambda_w <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "lambda_w",
                detail: "must be > 0".into(),
            });
        }
        if self.lambda_v <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "lambda_v",
                detail: "must be > 0".into(),
            });
        }
        if self.beta.len() != shape.layers() {
            return Err(CoreError::InvalidConfig {
                field: "beta",
                detail: format!("need {} per-layer weights, got {}", shape.layers(), self.beta.len()),
            });
        }
        if self.beta.iter().any(|&b| b <= 0.0) {
            return Err(CoreError::InvalidConfig {
                field: "beta",
                detail: "all per-layer weights must be > 0".into(),
            });
        }
        if self.tau1 <= 0.0 {
            return Err(CoreError::InvalidConfig {
                field: "tau1",
                detail: "must be > 0".into(),
            });
        }
        Ok(self.alpha == 0.0)
    }
}

/// Weight matrices W_ℓ (N_ℓ×N_{ℓ-1}) and bias vectors b_ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros(shape: &NetworkShape) -> Self {
        let weights = (1..=shape.layers())
            .map(|l| DenseMatrix::zeros(shape.dim(l), shape.dim(l - 1)))
            .collect();
        let biases = (1..=shape.layers()).map(|l| vec![0.0; shape.dim(l)]).collect();
        Params { weights, biases }
    }

    pub fn check_shape(&self, shape: &NetworkShape) -> Result<()> {
        if self.weights.len() != shape.layers() || self.biases.len() != shape.layers() {
            return Err(CoreError::DimensionMismatch {
                op: "Params::check_shape",
                detail: "layer count mismatch".into(),
            });
        }
        for l in 1..=shape.layers() {
            let w = &self.weights[l - 1];
            if w.rows() != shape.dim(l) || w.cols() != shape.dim(l - 1) || self.biases[l - 1].len() != shape.dim(l) {
                return Err(CoreError::DimensionMismatch {
                    op: "Params::check_shape",
                    detail: format!("layer {l}"),
                });
            }
        }
        Ok(())
    }

    /// Σ_ℓ ‖W_ℓ‖²_F + ‖b‖², handy for step-norm diagnostics.
    pub fn sq_distance(&self, other: &Params) -> (f64, f64) {
        let mut dw = 0.0;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            for (x, y) in a.entries().iter().zip(b.entries()) {
                let d = x - y;
                dw += d * d;
            }
        }
        let mut db = 0.0;
        for (a, b) in self.biases.iter().zip(&other.biases) {
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                db += d * d;
            }
        }
        (dw, db)
    }

    pub fn group_norm(&self) -> f64 {
        let mut acc = 0.0;
        for w in &self.weights {
            let norms = column_norms(w);
            for j in 0..norms.len() {
                acc += norms[j];
            }
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(DenseMatrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Per-layer, per-sample vector storage in layer-major then sample-major
/// order. Layer ℓ (1-based, 1..=L) stores sample n at
/// `data[(n * dim)..((n + 1) * dim)]`; this fixes the coordinate enumeration
/// (ℓ, n, i) shared with the scalar (v,u) solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Layered {
    dims: Vec<usize>,
    n_samples: usize,
    layers: Vec<Vec<f64>>,
}

impl Layered {
    pub fn zeros(shape: &NetworkShape) -> Self {
        let dims: Vec<usize> = (1..=shape.layers()).map(|l| shape.dim(l)).collect();
        let layers = dims.iter().map(|&d| vec![0.0; d * shape.n_samples()]).collect();
        Layered {
            dims,
            n_samples: shape.n_samples(),
            layers,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self, layer1: usize) -> usize {
        self.dims[layer1 - 1]
    }

    /// Slice of sample `n` at 1-based layer `layer1`.
    pub fn sample(&self, layer1: usize, n: usize) -> &[f64] {
        let d = self.dims[layer1 - 1];
        &self.layers[layer1 - 1][n * d..(n + 1) * d]
    }

    pub fn sample_mut(&mut self, layer1: usize, n: usize) -> &mut [f64] {
        let d = self.dims[layer1 - 1];
        &mut self.layers[layer1 - 1][n * d..(n + 1) * d]
    }

    /// Whole layer block, sample-major.
    pub fn layer(&self, layer1: usize) -> &[f64] {
        &self.layers[layer1 - 1]
    }

    pub fn layer_mut(&mut self, layer1: usize) -> &mut [f64] {
        &mut self.layers[layer1 - 1]
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for layer in &self.layers {
            for v in layer {
                acc += v * v;
            }
        }
        acc
    }

    pub fn sq_distance(&self, other: &Layered) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.iter().zip(b) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc
    }

    pub fn iter_all(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|x| x.is_finite()))
    }
}

/// Auxiliary variables v and u of the penalized model, identical layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxState {
    pub v: Layered,
    pub u: Layered,
}

impl AuxState {
    pub fn zeros(shape: &NetworkShape) -> Self {
        AuxState {
            v: Layered::zeros(shape),
            u: Layered::zeros(shape),
        }
    }

    /// Largest violation of v ≥ u and v ≥ αu (0 when feasible).
    pub fn cone_violation(&self, alpha: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 1..=self.v.layer_count() {
            for (vi, ui) in self.v.layer(l).iter().zip(self.u.layer(l)) {
                worst = worst.max(ui - vi).max(alpha * ui - vi);
            }
        }
        worst
    }

    pub fn is_cone_feasible(&self, alpha: f64, tol: f64) -> bool {
        self.cone_violation(alpha) <= tol
    }
}

/// Input matrix X (N₀×N, columns are samples) and targets Y (N_L×N).
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
}

impl DataBatch {
    pub fn new(x: DenseMatrix, y: DenseMatrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(CoreError::DimensionMismatch {
                op: "DataBatch::new",
                detail: format!("X has {} columns, Y has {}", x.cols(), y.cols()),
            });
        }
        Ok(DataBatch { x, y })
    }

    pub fn n_samples(&self) -> usize {
        self.x.cols()
    }

    /// Sample-major copy of X; hot loops index samples contiguously.
    pub fn x_samples(&self) -> Vec<f64> {
        transpose_to_samples(&self.x)
    }

    pub fn y_samples(&self) -> Vec<f64> {
        transpose_to_samples(&self.y)
    }
}

fn transpose_to_samples(m: &DenseMatrix) -> Vec<f64> {
    let (d, n) = (m.rows(), m.cols());
    let mut out = vec![0.0; d * n];
    for i in 0..d {
        let row = m.row(i);
        for (s, &val) in row.iter().enumerate() {
            out[s * d + i] = val;
        }
    }
    out
}

/// σ(z) = max{z, αz} componentwise.
pub fn leaky_relu(z: &[f64], alpha: f64) -> Vec<f64> {
    z.iter().map(|&zi| zi.max(alpha * zi)).collect()
}

pub fn leaky_relu_scalar(z: f64, alpha: f64) -> f64 {
    z.max(alpha * z)
}

/// Forward propagation: v₀=x, u_ℓ = W_ℓ v_{ℓ-1} + b_ℓ, v_ℓ = σ(u_ℓ).
///
/// The result is feasible by construction: v equals σ(u) bit-for-bit.
pub fn forward(params: &Params, batch: &DataBatch, hp: &HyperParams, shape: &NetworkShape) -> Result<AuxState> {
    params.check_shape(shape)?;
    if batch.x.rows() != shape.dim(0) || batch.n_samples() != shape.n_samples() {
        return Err(CoreError::DimensionMismatch {
            op: "forward",
            detail: "batch does not match shape".into(),
        });
    }
    let mut aux = AuxState::zeros(shape);
    let n = shape.n_samples();
    let mut prev = vec![0.0; shape.dim(0)];
    for s in 0..n {
        batch.x.col_to(s, &mut prev);
        for l in 1..=shape.layers() {
            let w = &params.weights[l - 1];
            let b = &params.biases[l - 1];
            let u = aux.u.sample_mut(l, s);
            matvec_into(w, &prev, u);
            for (ui, bi) in u.iter_mut().zip(b) {
                *ui += bi;
            }
            let u_copy = aux.u.sample(l, s).to_vec();
            let v = aux.v.sample_mut(l, s);
            for (vi, &ui) in v.iter_mut().zip(&u_copy) {
                *vi = leaky_relu_scalar(ui, hp.alpha);
            }
            prev = u_copy;
            for p in prev.iter_mut() {
                *p = leaky_relu_scalar(*p, hp.alpha);
            }
        }
    }
    Ok(aux)
}

/// Network output v_{n,L} for a single input sample, without storing aux.
pub fn predict_sample(params: &Params, x: &[f64], alpha: f64) -> Vec<f64> {
    let mut cur = x.to_vec();
    for (w, b) in params.weights.iter().zip(&params.biases) {
        let mut next = vec![0.0; w.rows()];
        matvec_into(w, &cur, &mut next);
        for (ni, bi) in next.iter_mut().zip(b) {
            *ni = leaky_relu_scalar(*ni + bi, alpha);
        }
        cur = next;
    }
    cur
}

/// Ō(w, v) = (1/N)Σ‖v_{n,L}−y_n‖² + λ_w Σ‖(W_ℓ)·,j‖ + λ_v‖v‖².
pub fn objective_obar(params: &Params, aux: &AuxState, batch: &DataBatch, hp: &HyperParams) -> f64 {
    let n = batch.n_samples();
    let last = aux.v.layer_count();
    let mut loss = 0.0;
    let mut ybuf = vec![0.0; batch.y.rows()];
    for s in 0..n {
        batch.y.col_to(s, &mut ybuf);
        let v_out = aux.v.sample(last, s);
        for (vi, yi) in v_out.iter().zip(&ybuf) {
            let d = vi - yi;
            loss += d * d;
        }
    }
    loss / n as f64 + hp.lambda_w * params.group_norm() + hp.lambda_v * aux.v.norm_sq()
}

/// O(w, v, u) = Ō(w, v) + Σ_{n,ℓ} β_ℓ eᵀ(v_{n,ℓ} − σ(u_{n,ℓ})).
pub fn objective_penalized(params: &Params, aux: &AuxState, batch: &DataBatch, hp: &HyperParams) -> f64 {
    objective_obar(params, aux, batch, hp) + penalty_term(aux, hp)
}

/// The βᵀ(v − σ(u)) part alone.
pub fn penalty_term(aux: &AuxState, hp: &HyperParams) -> f64 {
    let mut acc = 0.0;
    for l in 1..=aux.v.layer_count() {
        let beta = hp.beta[l - 1];
        let mut layer_sum = 0.0;
        for (vi, ui) in aux.v.layer(l).iter().zip(aux.u.layer(l)) {
            layer_sum += vi - leaky_relu_scalar(*ui, hp.alpha);
        }
        acc += beta * layer_sum;
    }
    acc
}
