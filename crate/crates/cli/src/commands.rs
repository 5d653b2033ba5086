//! Subcommand implementations: gen-data, train, eval, sweep, profile.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use alsparse_core::baselines::{epoch_records_to_csv, run_sgd_family, SgdRun};
use alsparse_core::datasets::{gen_synthetic, load_mnist, MnistSpec, SyntheticSpec};
use alsparse_core::linalg::DenseMatrix;
use alsparse_core::metrics::{
    accuracy, column_sparsity_ratio, feasibility_violations, performance_profile, sum_sq_err,
};
use alsparse_core::network::{forward, DataBatch, HyperParams, NetworkShape, Params};
use alsparse_core::outer::{records_to_csv, run_ialam, IalmRun};

use crate::config::{DatasetSpec, ResolvedConfig, SolverChoice, ValidationError};

/// Exit statuses per failure class: config problems exit 2, solver failures
/// exit 1.
pub enum CmdError {
    Validation(String),
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 2,
            CmdError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Validation(m) | CmdError::Runtime(m) => m,
        }
    }
}

impl From<ValidationError> for CmdError {
    fn from(e: ValidationError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

type CmdResult<T> = Result<T, CmdError>;

fn io_runtime<T>(r: std::io::Result<T>, what: &str) -> CmdResult<T> {
    r.map_err(|e| CmdError::Runtime(format!("{what}: {e}")))
}

/// Sparsity tolerances recorded in every summary.
const SPARSITY_TOLERANCES: [f64; 6] = [0.0, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1];

/// Loads or generates the train/test batches for a resolved config. The
/// dataset seed is the run seed, so shared-seed comparisons across solvers
/// see identical data.
pub fn materialize_dataset(
    cfg: &ResolvedConfig,
    seed: u64,
    mnist_dir_flag: Option<&Path>,
) -> CmdResult<(DataBatch, DataBatch)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            eps_y,
            teacher_scale,
            ..
        } => {
            let spec = SyntheticSpec {
                shape: cfg.shape.clone(),
                eps_y: *eps_y,
                seed,
                teacher_scale: *teacher_scale,
            };
            let (train, test, _) =
                gen_synthetic(&spec).map_err(|e| CmdError::Runtime(e.to_string()))?;
            Ok((train, test))
        }
        DatasetSpec::Mnist { dir, n_train } => {
            let dir = mnist_dir_flag
                .map(Path::to_path_buf)
                .or_else(|| std::env::var_os("IALAM_MNIST_DIR").map(PathBuf::from))
                .or_else(|| dir.clone())
                .ok_or_else(|| {
                    CmdError::Validation(
                        "config field `dataset.dir`: no MNIST directory (set dataset.dir, --mnist-dir, or IALAM_MNIST_DIR)"
                            .into(),
                    )
                })?;
            let spec = MnistSpec::from_dir(&dir, *n_train, seed);
            load_mnist(&spec).map_err(|e| CmdError::Runtime(format!("loading MNIST: {e}")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub train_err: f64,
    pub test_err: f64,
    pub test_err_paper_n: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasvi1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasvi2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasvi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kktvi: Option<f64>,
    pub sparsity: Vec<(f64, f64)>,
}

fn evaluate(
    params: &Params,
    train: &DataBatch,
    test: &DataBatch,
    shape: &NetworkShape,
    hp: &HyperParams,
    lagrangian_bits: Option<(&alsparse_core::network::AuxState, f64)>,
) -> MetricSummary {
    let n = shape.n_samples() as f64;
    let train_err = sum_sq_err(params, train, hp.alpha) / n;
    let test_raw = sum_sq_err(params, test, hp.alpha);
    let test_err = test_raw / test.n_samples() as f64;
    let test_err_paper_n = test_raw / n;
    let classification = shape.dim(shape.layers()) == 10;
    let (acc, tacc) = if classification {
        (
            Some(accuracy(params, train, hp.alpha)),
            Some(accuracy(params, test, hp.alpha)),
        )
    } else {
        (None, None)
    };
    let (f1, f2, fv, kkt) = match lagrangian_bits {
        Some((aux, kktvi)) => {
            let (a, b, c) = feasibility_violations(params, aux, train, hp);
            (Some(a), Some(b), Some(c), Some(kktvi))
        }
        None => (None, None, None, None),
    };
    let sparsity = SPARSITY_TOLERANCES
        .iter()
        .map(|&tol| (tol, column_sparsity_ratio(params, tol)))
        .collect();
    MetricSummary {
        train_err,
        test_err,
        test_err_paper_n,
        accuracy: acc,
        test_acc: tacc,
        feasvi1: f1,
        feasvi2: f2,
        feasvi: fv,
        kktvi: kkt,
        sparsity,
    }
}

fn params_to_json(params: &Params, dims: &[usize]) -> serde_json::Value {
    json!({
        "dims": dims,
        "weights": params.weights.iter().map(|w| w.entries().to_vec()).collect::<Vec<_>>(),
        "biases": params.biases.clone(),
    })
}

pub fn params_from_json(value: &serde_json::Value) -> CmdResult<(Vec<usize>, Params)> {
    #[derive(Deserialize)]
    struct P {
        dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    }
    let p: P = serde_json::from_value(value.clone())
        .map_err(|e| CmdError::Validation(format!("config field `params`: {e}")))?;
    if p.dims.len() < 2 || p.weights.len() != p.dims.len() - 1 || p.biases.len() != p.dims.len() - 1 {
        return Err(CmdError::Validation(
            "config field `params`: inconsistent dims/weights/biases".into(),
        ));
    }
    let mut weights = Vec::new();
    for (l, flat) in p.weights.into_iter().enumerate() {
        let m = DenseMatrix::from_vec(p.dims[l + 1], p.dims[l], flat)
            .map_err(|e| CmdError::Validation(format!("config field `params.weights[{l}]`: {e}")))?;
        weights.push(m);
    }
    Ok((
        p.dims,
        Params {
            weights,
            biases: p.biases,
        },
    ))
}

/// Outcome of one seed's training run.
pub struct TrainOutcome {
    pub csv: String,
    pub summary: serde_json::Value,
    pub params_json: serde_json::Value,
    pub failed: bool,
    pub final_metrics: MetricSummary,
}

/// Runs the configured solver for one seed, producing the CSV log, the
/// summary document, and the parameter dump.
pub fn run_one_seed(
    cfg: &ResolvedConfig,
    seed: u64,
    mnist_dir: Option<&Path>,
) -> CmdResult<TrainOutcome> {
    let (train, test) = materialize_dataset(cfg, seed, mnist_dir)?;
    let started = Instant::now();
    match &cfg.solver {
        SolverChoice::Ialam(icfg) => {
            let run: IalmRun = run_ialam(&train, Some(&test), &cfg.shape, &cfg.hp, icfg, seed)
                .map_err(|e| CmdError::Runtime(format!("ialam: {e}")))?;
            let wall = started.elapsed().as_secs_f64();
            let csv = records_to_csv(&run.records);
            let kktvi = run.records.last().map(|r| r.kktvi).unwrap_or(f64::NAN);
            let metrics = evaluate(
                &run.params,
                &train,
                &test,
                &cfg.shape,
                &cfg.hp,
                Some((&run.aux, kktvi)),
            );
            let summary = json!({
                "solver": "ialam",
                "seed": seed,
                "iterations": run.records.len(),
                "inner_iterations_total": run.records.iter().map(|r| r.inner_iters).sum::<usize>(),
                "wall_seconds": wall,
                "wall_seconds_per_outer": run.records.iter().map(|r| r.wall_seconds).collect::<Vec<_>>(),
                "theta": run.theta,
                "failure": run.failure,
                "final": metrics.clone(),
            });
            Ok(TrainOutcome {
                csv,
                summary,
                params_json: params_to_json(&run.params, cfg.shape.dims()),
                failed: run.failure.is_some(),
                final_metrics: metrics,
            })
        }
        SolverChoice::Sgd(scfg) => {
            let mut scfg = scfg.clone();
            scfg.seed = seed;
            let run: SgdRun = run_sgd_family(&train, Some(&test), &cfg.shape, &cfg.hp, &scfg)
                .map_err(|e| CmdError::Runtime(format!("{}: {e}", scfg.method.name())))?;
            let wall = started.elapsed().as_secs_f64();
            let csv = epoch_records_to_csv(&run.records);
            let metrics = evaluate(&run.params, &train, &test, &cfg.shape, &cfg.hp, None);
            let summary = json!({
                "solver": scfg.method.name(),
                "seed": seed,
                "epochs": run.records.last().map(|r| r.epoch).unwrap_or(0),
                "wall_seconds": wall,
                "diverged": run.diverged,
                "final": metrics.clone(),
            });
            Ok(TrainOutcome {
                csv,
                summary,
                params_json: params_to_json(&run.params, cfg.shape.dims()),
                failed: run.diverged,
                final_metrics: metrics,
            })
        }
    }
}

/// `train`: one run for the selected seed; writes run_<seed>.csv,
/// summary.json, and params.json under the output directory.
pub fn cmd_train(
    cfg: &ResolvedConfig,
    seed_flag: Option<u64>,
    outdir_flag: Option<&Path>,
    mnist_dir: Option<&Path>,
) -> CmdResult<i32> {
    let seed = seed_flag.unwrap_or(cfg.seeds[0]);
    let outdir = outdir_flag.unwrap_or(&cfg.outdir);
    io_runtime(std::fs::create_dir_all(outdir), "creating outdir")?;
    let outcome = run_one_seed(cfg, seed, mnist_dir)?;
    io_runtime(
        std::fs::write(outdir.join(format!("run_{seed}.csv")), &outcome.csv),
        "writing csv",
    )?;
    io_runtime(
        std::fs::write(
            outdir.join("summary.json"),
            serde_json::to_string_pretty(&outcome.summary).unwrap(),
        ),
        "writing summary",
    )?;
    io_runtime(
        std::fs::write(
            outdir.join("params.json"),
            serde_json::to_string(&outcome.params_json).unwrap(),
        ),
        "writing params",
    )?;
    if outcome.failed {
        return Err(CmdError::Runtime(
            "solver reported a failure; partial logs were written".into(),
        ));
    }
    Ok(0)
}

/// `gen-data`: materializes a synthetic dataset to CSV files plus the
/// teacher parameters.
pub fn cmd_gen_data(
    cfg: &ResolvedConfig,
    seed_flag: Option<u64>,
    outdir_flag: Option<&Path>,
) -> CmdResult<i32> {
    let seed = seed_flag.unwrap_or(cfg.seeds[0]);
    let outdir = outdir_flag.unwrap_or(&cfg.outdir);
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            eps_y,
            teacher_scale,
            ..
        } => {
            let spec = SyntheticSpec {
                shape: cfg.shape.clone(),
                eps_y: *eps_y,
                seed,
                teacher_scale: *teacher_scale,
            };
            let (train, test, teacher) =
                gen_synthetic(&spec).map_err(|e| CmdError::Runtime(e.to_string()))?;
            io_runtime(std::fs::create_dir_all(outdir), "creating outdir")?;
            let write_matrix = |name: &str, m: &DenseMatrix| -> CmdResult<()> {
                let mut out = String::new();
                for i in 0..m.rows() {
                    let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
                io_runtime(std::fs::write(outdir.join(name), out), "writing matrix")
            };
            write_matrix("train_x.csv", &train.x)?;
            write_matrix("train_y.csv", &train.y)?;
            write_matrix("test_x.csv", &test.x)?;
            write_matrix("test_y.csv", &test.y)?;
            io_runtime(
                std::fs::write(
                    outdir.join("teacher.json"),
                    serde_json::to_string(&params_to_json(&teacher, cfg.shape.dims())).unwrap(),
                ),
                "writing teacher",
            )?;
            io_runtime(
                std::fs::write(
                    outdir.join("meta.json"),
                    serde_json::to_string_pretty(&json!({
                        "kind": "synthetic",
                        "dims": cfg.shape.dims(),
                        "n_train": train.n_samples(),
                        "n_test": test.n_samples(),
                        "eps_y": eps_y,
                        "seed": seed,
                    }))
                    .unwrap(),
                ),
                "writing meta",
            )?;
            Ok(0)
        }
        DatasetSpec::Mnist { .. } => Err(CmdError::Validation(
            "config field `dataset.kind`: gen-data only materializes synthetic datasets".into(),
        )),
    }
}

/// `eval`: evaluates stored parameters on the configured dataset and prints
/// the metric row as JSON.
pub fn cmd_eval(
    cfg: &ResolvedConfig,
    params_path: &Path,
    mnist_dir: Option<&Path>,
) -> CmdResult<i32> {
    let text = io_runtime(std::fs::read_to_string(params_path), "reading params")?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CmdError::Validation(format!("config field `params`: {e}")))?;
    let (dims, params) = params_from_json(&value)?;
    if dims != cfg.shape.dims() {
        return Err(CmdError::Validation(format!(
            "config field `params.dims`: {:?} does not match config dims {:?}",
            dims,
            cfg.shape.dims()
        )));
    }
    let seed = cfg.seeds[0];
    let (train, test) = materialize_dataset(cfg, seed, mnist_dir)?;
    // feasibility is reported at the feasible forward-pass point
    let aux = forward(&params, &train, &cfg.hp, &cfg.shape)
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    let metrics = evaluate(&params, &train, &test, &cfg.shape, &cfg.hp, Some((&aux, f64::NAN)));
    let mut value = serde_json::to_value(&metrics).unwrap();
    if let Some(obj) = value.as_object_mut() {
        obj.remove("kktvi"); // not defined without a solver state
    }
    println!("{}", serde_json::to_string_pretty(&value).unwrap());
    Ok(0)
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Aggregate {
        mean,
        std: var.sqrt(),
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `sweep`: runs every seed through a worker pool and aggregates the final
/// metrics as mean±std plus [min, max].
pub fn cmd_sweep(
    cfg: &ResolvedConfig,
    seeds_flag: Option<Vec<u64>>,
    jobs: Option<usize>,
    outdir_flag: Option<&Path>,
    mnist_dir: Option<&Path>,
) -> CmdResult<i32> {
    let seeds = seeds_flag.unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(CmdError::Validation(
            "config field `seeds`: need at least one seed".into(),
        ));
    }
    let outdir = outdir_flag.unwrap_or(&cfg.outdir);
    io_runtime(std::fs::create_dir_all(outdir), "creating outdir")?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CmdError::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<(u64, Result<TrainOutcome, String>)> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&seed| {
                let out = run_one_seed(cfg, seed, mnist_dir).map_err(|e| e.message().to_string());
                (seed, out)
            })
            .collect()
    });

    let mut any_failed = false;
    let mut rows: Vec<(u64, MetricSummary)> = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in &results {
        match result {
            Ok(outcome) => {
                io_runtime(
                    std::fs::write(outdir.join(format!("run_{seed}.csv")), &outcome.csv),
                    "writing csv",
                )?;
                io_runtime(
                    std::fs::write(
                        outdir.join(format!("summary_{seed}.json")),
                        serde_json::to_string_pretty(&outcome.summary).unwrap(),
                    ),
                    "writing summary",
                )?;
                if outcome.failed {
                    any_failed = true;
                    failures.push(json!({"seed": seed, "error": "solver flagged a failure"}));
                } else {
                    rows.push((*seed, outcome.final_metrics.clone()));
                }
            }
            Err(msg) => {
                any_failed = true;
                failures.push(json!({"seed": seed, "error": msg}));
            }
        }
    }

    let mut metric_table: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (_, m) in &rows {
        metric_table.entry("TrainErr").or_default().push(m.train_err);
        metric_table.entry("TestErr").or_default().push(m.test_err);
        if let Some(a) = m.accuracy {
            metric_table.entry("Accuracy").or_default().push(a);
        }
        if let Some(a) = m.test_acc {
            metric_table.entry("TestAcc").or_default().push(a);
        }
        if let Some(v) = m.feasvi1 {
            metric_table.entry("FeasVi1").or_default().push(v);
        }
        if let Some(v) = m.feasvi2 {
            metric_table.entry("FeasVi2").or_default().push(v);
        }
        if let Some(v) = m.feasvi {
            metric_table.entry("FeasVi").or_default().push(v);
        }
        if let Some(v) = m.kktvi {
            metric_table.entry("KKTVi").or_default().push(v);
        }
    }
    let aggregates: BTreeMap<&str, Aggregate> = metric_table
        .iter()
        .map(|(k, v)| (*k, aggregate(v)))
        .collect();

    let summary = json!({
        "solver": cfg.solver.name(),
        "seeds": seeds,
        "completed": rows.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        "failures": failures,
        "metrics": aggregates,
    });
    io_runtime(
        std::fs::write(
            outdir.join("sweep_summary.json"),
            serde_json::to_string_pretty(&summary).unwrap(),
        ),
        "writing sweep summary",
    )?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    if any_failed {
        return Err(CmdError::Runtime("one or more runs failed".into()));
    }
    Ok(0)
}

/// Per-solver result table for profiles: problem id -> measured values.
fn read_profile_file(path: &Path) -> CmdResult<Vec<(String, Option<f64>, Option<f64>)>> {
    let text = io_runtime(std::fs::read_to_string(path), "reading profile input")?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "problem,TrainErr,TestErr" {
        return Err(CmdError::Validation(format!(
            "config field `profile`: {} has header `{header}`, expected `problem,TrainErr,TestErr`",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CmdError::Validation(format!(
                "config field `profile`: {}:{} has {} fields",
                path.display(),
                i + 2,
                parts.len()
            )));
        }
        let parse = |s: &str| -> CmdResult<Option<f64>> {
            if s == "fail" {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| {
                    CmdError::Validation(format!(
                        "config field `profile`: bad value `{s}` in {}: {e}",
                        path.display()
                    ))
                })
            }
        };
        rows.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?));
    }
    Ok(rows)
}

/// `profile`: reads per-solver result CSVs over a shared problem list and
/// writes performance-profile breakpoints for the chosen measure.
pub fn cmd_profile(dir: &Path, measure: &str, out: Option<&Path>) -> CmdResult<i32> {
    let col = match measure {
        "TrainErr" => 0,
        "TestErr" => 1,
        other => {
            return Err(CmdError::Validation(format!(
                "config field `measure`: `{other}` (expected TrainErr or TestErr)"
            )))
        }
    };
    let mut solver_rows: BTreeMap<String, Vec<(String, Option<f64>, Option<f64>)>> = BTreeMap::new();
    let entries = io_runtime(std::fs::read_dir(dir), "reading results dir")?;
    for entry in entries {
        let entry = io_runtime(entry, "reading results dir")?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_stem().unwrap().to_string_lossy().to_string();
            solver_rows.insert(name, read_profile_file(&path)?);
        }
    }
    if solver_rows.len() < 2 {
        return Err(CmdError::Validation(format!(
            "config field `profile`: need at least two solver CSVs in {}, found {}",
            dir.display(),
            solver_rows.len()
        )));
    }
    // shared problem lists, same order
    let reference: Vec<&String> = solver_rows.values().next().unwrap().iter().map(|r| &r.0).collect();
    for (name, rows) in &solver_rows {
        let probs: Vec<&String> = rows.iter().map(|r| &r.0).collect();
        if probs != reference {
            return Err(CmdError::Validation(format!(
                "config field `profile`: solver `{name}` problem list does not match the others"
            )));
        }
    }
    let mut results: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for (name, rows) in &solver_rows {
        results.insert(
            name.clone(),
            rows.iter()
                .map(|r| if col == 0 { r.1 } else { r.2 })
                .collect(),
        );
    }
    let profiles = performance_profile(&results)
        .map_err(|e| CmdError::Validation(format!("config field `profile`: {e}")))?;

    // union grid of breakpoints
    let mut omegas: Vec<f64> = profiles
        .values()
        .flat_map(|bp| bp.iter().map(|(w, _)| *w))
        .collect();
    omegas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    omegas.dedup();
    let solvers: Vec<&String> = profiles.keys().collect();
    let mut csv = String::from("omega");
    for s in &solvers {
        csv.push(',');
        csv.push_str(s);
    }
    csv.push('\n');
    for w in &omegas {
        csv.push_str(&format!("{w:.16e}"));
        for s in &solvers {
            csv.push_str(&format!(
                ",{:.16e}",
                alsparse_core::metrics::profile_value(&profiles[*s], *w)
            ));
        }
        csv.push('\n');
    }
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(format!("profile_{measure}.csv")));
    io_runtime(std::fs::write(&out_path, csv), "writing profile")?;
    println!("wrote {}", out_path.display());
    Ok(0)
}
