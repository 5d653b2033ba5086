//! JSON experiment configuration: parsing, defaults, and validation with
//! field-level error messages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use alsparse_core::baselines::{SgdConfig, SgdMethod};
use alsparse_core::inner::InnerCaps;
use alsparse_core::network::{HyperParams, NetworkShape};
use alsparse_core::outer::IalmConfig;

/// Config error carrying the offending field name.
#[derive(Debug, Clone)]
pub struct ValidationError {
    pub field: String,
    pub detail: String,
}

impl std::error::Error for ValidationError {}

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.detail)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_train: usize,
        #[serde(default = "default_eps_y")]
        eps_y: f64,
        #[serde(default = "default_scale")]
        teacher_scale: f64,
    },
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        n_train: usize,
    },
}

fn default_eps_y() -> f64 {
    0.05
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub alpha: Option<f64>,
    pub lambda_w: Option<f64>,
    pub lambda_v: Option<f64>,
    /// Single value replicated per layer, or one entry per layer.
    pub beta: Option<BetaSpec>,
    pub tau1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Scalar(f64),
    PerLayer(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IalmSection {
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta3: Option<f64>,
    pub eta4: Option<f64>,
    pub eps0: Option<f64>,
    pub rho0: Option<f64>,
    pub gamma: Option<usize>,
    pub stop_eps: Option<f64>,
    pub stop_rho_factor: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub max_wb_iters: Option<usize>,
    /// "over_n" (protocol default) or "fan_in".
    pub init: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub decay: Option<f64>,
    pub record_every: Option<usize>,
    /// "over_n" (protocol default) or "fan_in".
    pub init: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Layer widths N₀..N_L of the trained network.
    pub dims: Vec<usize>,
    #[serde(default)]
    pub hyper: HyperSection,
    pub solver: String,
    #[serde(default)]
    pub ialam: IalmSection,
    #[serde(default)]
    pub sgd: SgdSection,
    pub outdir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Fully resolved run plan derived from a validated config.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub dataset: DatasetSpec,
    pub shape: NetworkShape,
    pub hp: HyperParams,
    pub solver: SolverChoice,
    pub outdir: PathBuf,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub enum SolverChoice {
    Ialam(IalmConfig),
    Sgd(SgdConfig),
}

impl SolverChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SolverChoice::Ialam(_) => "ialam",
            SolverChoice::Sgd(cfg) => cfg.method.name(),
        }
    }
}

pub fn parse_solver_tag(tag: &str) -> Option<Result<SgdMethod, ()>> {
    match tag {
        "ialam" => Some(Err(())),
        "sgd" => Some(Ok(SgdMethod::Vanilla)),
        "adam" => Some(Ok(SgdMethod::Adam)),
        "adamax" => Some(Ok(SgdMethod::Adamax)),
        "adadelta" => Some(Ok(SgdMethod::Adadelta)),
        "adagrad" => Some(Ok(SgdMethod::Adagrad)),
        "adagraddecay" => Some(Ok(SgdMethod::AdagradDecay)),
        "proxsgd" => Some(Ok(SgdMethod::ProxSgd)),
        _ => None,
    }
}

fn parse_init(tag: Option<&str>) -> Result<alsparse_core::outer::InitScheme, ValidationError> {
    use alsparse_core::outer::InitScheme;
    match tag {
        None | Some("over_n") => Ok(InitScheme::OverN),
        Some("fan_in") => Ok(InitScheme::FanIn),
        Some(other) => Err(ValidationError {
            field: "init".into(),
            detail: format!("unknown scheme `{other}` (expected over_n or fan_in)"),
        }),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ValidationError> {
    let text = std::fs::read_to_string(path).map_err(|e| ValidationError {
        field: "config".into(),
        detail: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| ValidationError {
        field: "config".into(),
        detail: e.to_string(),
    })
}

impl ExperimentConfig {
    /// Applies defaults and range checks; `theory_mode` switches the
    /// escalation exponent to its theoretical regime.
    pub fn resolve(&self, theory_mode: bool) -> Result<ResolvedConfig, ValidationError> {
        if self.dims.len() < 2 {
            return Err(ValidationError {
                field: "dims".into(),
                detail: "need at least input and output widths".into(),
            });
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(ValidationError {
                field: "dims".into(),
                detail: "layer widths must be >= 1".into(),
            });
        }
        let n_train = match &self.dataset {
            DatasetSpec::Synthetic { n_train, eps_y, .. } => {
                if *eps_y < 0.0 {
                    return Err(ValidationError {
                        field: "dataset.eps_y".into(),
                        detail: "must be >= 0".into(),
                    });
                }
                *n_train
            }
            DatasetSpec::Mnist { n_train, .. } => {
                if self.dims[0] != 784 {
                    return Err(ValidationError {
                        field: "dims".into(),
                        detail: format!("mnist input requires dims[0] = 784, got {}", self.dims[0]),
                    });
                }
                if *self.dims.last().unwrap() != 10 {
                    return Err(ValidationError {
                        field: "dims".into(),
                        detail: "mnist output requires 10 classes".into(),
                    });
                }
                *n_train
            }
        };
        if n_train == 0 {
            return Err(ValidationError {
                field: "dataset.n_train".into(),
                detail: "must be >= 1".into(),
            });
        }
        let shape = NetworkShape::new(self.dims.clone(), n_train).map_err(|e| ValidationError {
            field: "dims".into(),
            detail: e.to_string(),
        })?;

        let defaults = HyperParams::defaults_for(&shape);
        let layers = shape.layers();
        let beta = match &self.hyper.beta {
            None => defaults.beta.clone(),
            Some(BetaSpec::Scalar(b)) => vec![*b; layers],
            Some(BetaSpec::PerLayer(v)) => {
                if v.len() != layers {
                    return Err(ValidationError {
                        field: "hyper.beta".into(),
                        detail: format!("need {layers} per-layer entries, got {}", v.len()),
                    });
                }
                v.clone()
            }
        };
        let hp = HyperParams {
            alpha: self.hyper.alpha.unwrap_or(defaults.alpha),
            lambda_w: self.hyper.lambda_w.unwrap_or(defaults.lambda_w),
            lambda_v: self.hyper.lambda_v.unwrap_or(defaults.lambda_v),
            beta,
            tau1: self.hyper.tau1.unwrap_or(defaults.tau1),
        };
        hp.validate(&shape).map_err(|e| match e {
            alsparse_core::CoreError::InvalidConfig { field, detail } => ValidationError {
                field: format!("hyper.{field}"),
                detail,
            },
            other => ValidationError {
                field: "hyper".into(),
                detail: other.to_string(),
            },
        })?;

        let solver = match parse_solver_tag(&self.solver) {
            None => {
                return Err(ValidationError {
                    field: "solver".into(),
                    detail: format!(
                        "unknown tag `{}` (expected ialam|sgd|adam|adamax|adadelta|adagrad|adagraddecay|proxsgd)",
                        self.solver
                    ),
                })
            }
            Some(Err(())) => {
                let base = IalmConfig::defaults_for(&shape);
                let mut cfg = IalmConfig {
                    eta1: self.ialam.eta1.unwrap_or(base.eta1),
                    eta2: self.ialam.eta2.unwrap_or(base.eta2),
                    eta3: self.ialam.eta3.unwrap_or(base.eta3),
                    eta4: self.ialam.eta4.unwrap_or(base.eta4),
                    eps0: self.ialam.eps0.unwrap_or(base.eps0),
                    rho0: self.ialam.rho0.unwrap_or(base.rho0),
                    gamma: self.ialam.gamma.unwrap_or(base.gamma),
                    stop_eps: self.ialam.stop_eps.unwrap_or(base.stop_eps),
                    stop_rho_factor: self.ialam.stop_rho_factor.unwrap_or(base.stop_rho_factor),
                    max_outer: self.ialam.max_outer.unwrap_or(base.max_outer),
                    caps: InnerCaps {
                        max_inner: self.ialam.max_inner.unwrap_or(base.caps.max_inner),
                        max_wb_iters: self.ialam.max_wb_iters.unwrap_or(base.caps.max_wb_iters),
                    },
                    init: parse_init(self.ialam.init.as_deref())?,
                };
                if theory_mode {
                    cfg = cfg.theory_mode();
                }
                cfg.validate().map_err(|e| match e {
                    alsparse_core::CoreError::InvalidConfig { field, detail } => ValidationError {
                        field: format!("ialam.{field}"),
                        detail,
                    },
                    other => ValidationError {
                        field: "ialam".into(),
                        detail: other.to_string(),
                    },
                })?;
                SolverChoice::Ialam(cfg)
            }
            Some(Ok(method)) => {
                let base = SgdConfig::defaults_for(method, shape.n_samples(), self.seeds.first().copied().unwrap_or(0));
                let cfg = SgdConfig {
                    method,
                    batch_size: self.sgd.batch_size.unwrap_or(base.batch_size),
                    max_epochs: self.sgd.max_epochs.unwrap_or(base.max_epochs),
                    seed: base.seed,
                    lr: self.sgd.lr.unwrap_or(base.lr),
                    beta1: self.sgd.beta1.unwrap_or(base.beta1),
                    beta2: self.sgd.beta2.unwrap_or(base.beta2),
                    eps: self.sgd.eps.unwrap_or(base.eps),
                    decay: self.sgd.decay.unwrap_or(base.decay),
                    record_every: self.sgd.record_every.unwrap_or(base.record_every),
                    init: parse_init(self.sgd.init.as_deref())?,
                };
                cfg.validate(shape.n_samples()).map_err(|e| match e {
                    alsparse_core::CoreError::InvalidConfig { field, detail } => ValidationError {
                        field: format!("sgd.{field}"),
                        detail,
                    },
                    other => ValidationError {
                        field: "sgd".into(),
                        detail: other.to_string(),
                    },
                })?;
                SolverChoice::Sgd(cfg)
            }
        };

        if self.seeds.is_empty() {
            return Err(ValidationError {
                field: "seeds".into(),
                detail: "need at least one seed".into(),
            });
        }

        Ok(ResolvedConfig {
            dataset: self.dataset.clone(),
            shape,
            hp,
            solver,
            outdir: self.outdir.clone(),
            seeds: self.seeds.clone(),
        })
    }
}
