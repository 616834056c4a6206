//! Subcommand implementations. Each returns the files it wrote.

use std::path::{Path, PathBuf};

use phred::bounds::{deim_reduction_bound, projection_bound_report, BoundOptions, BoundReport, DeimBoundReport};
use phred::phcore::{dissipation_margin, StructureReport, Trajectory};
use phred::reduce::project_ph;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Method, RunConfig};
use crate::io::{ensure_dir, num, write_csv, write_json, write_matrix, write_trajectory};
use crate::pipeline::{
    build_reduced, compare, median_time, simulate_reduced_model, snapshots, ErrorRow, Experiment, ReducedModel,
    ReductionSpec,
};
use crate::{CliError, StageExt};

fn opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

#[derive(Serialize)]
struct SimulationSummary {
    input: String,
    n: usize,
    steps: usize,
    dissipation_margin: f64,
    max_abs_hamiltonian: f64,
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let exp = Experiment::new(cfg)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (label, input) in exp.inputs(cfg) {
        let traj = exp.simulate_full(input)?;
        let path = out.join(format!("trajectory_{}.csv", label.split(':').next().unwrap_or("run")));
        write_trajectory(&path, &traj)?;
        files.push(path);
        let max_h = (0..traj.len()).map(|k| exp.sys.hamiltonian(&traj.state(k)).abs()).fold(0.0, f64::max);
        summary.push(SimulationSummary {
            input: label,
            n: exp.sys.n(),
            steps: traj.len() - 1,
            dissipation_margin: dissipation_margin(&traj, &exp.sys),
            max_abs_hamiltonian: max_h,
        });
    }
    let path = out.join("simulate.json");
    write_json(&path, &summary)?;
    files.push(path);
    Ok(files)
}

#[derive(Serialize)]
struct DeimSummary {
    m: usize,
    indices: Vec<usize>,
    growth: f64,
    cond: f64,
    native_split: bool,
}

#[derive(Serialize)]
struct ReduceSummary<'a> {
    spec: ReductionSpec,
    provenance: &'a str,
    structure: StructureReport,
    biorthogonality_defect: f64,
    sigma_min_before: f64,
    warnings: &'a [String],
    deim: Option<DeimSummary>,
    h2_log: Option<&'a phred::basis::IterationLog>,
    snapshot_singular_values: Option<&'a [f64]>,
}

fn reduce_training(cfg: &RunConfig, exp: &Experiment) -> Result<(Trajectory, ReducedModel), CliError> {
    let training = exp.simulate_full(&exp.training)?;
    let snaps = snapshots(exp, &training, cfg.stride)?;
    let red = build_reduced(exp, cfg, ReductionSpec::from_config(cfg), &snaps)?;
    Ok((training, red))
}

pub fn cmd_reduce(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let exp = Experiment::new(cfg)?;
    let (_, red) = reduce_training(cfg, &exp)?;
    let files = vec![out.join("basis_V.csv"), out.join("basis_W.csv"), out.join("reduce.json")];
    write_matrix(&files[0], &red.basis.v)?;
    write_matrix(&files[1], &red.basis.w)?;
    let summary = ReduceSummary {
        spec: red.spec,
        provenance: &red.system.provenance,
        structure: red.system.validate_structure(),
        biorthogonality_defect: red.basis.biorthogonality_defect(),
        sigma_min_before: red.basis.sigma_min_before,
        warnings: &red.basis.warnings,
        deim: red.deim.as_ref().map(|d| DeimSummary {
            m: d.model.m(),
            indices: d.model.indices.clone(),
            growth: d.model.growth,
            cond: d.model.cond,
            native_split: d.split.is_native(),
        }),
        h2_log: red.h2_log.as_ref(),
        snapshot_singular_values: red.snapshot_singular_values.as_deref(),
    };
    write_json(&files[2], &summary)?;
    Ok(files)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimedErrorRow {
    #[serde(flatten)]
    pub errors: ErrorRow,
    pub wall_time_full_s: f64,
    pub wall_time_reduced_s: f64,
    pub speedup: f64,
    pub dissipation_margin_reduced: f64,
}

#[derive(Serialize)]
struct EvaluateSummary<'a> {
    spec: ReductionSpec,
    provenance: &'a str,
    structure: StructureReport,
    timing_runs: usize,
    rows: &'a [TimedErrorRow],
}

pub const ERROR_COLUMNS: [&str; 11] = [
    "method",
    "r",
    "m",
    "input",
    "avg_rel_output_error",
    "avg_rel_state_error",
    "L2_output_err",
    "L2_state_err_Q",
    "wall_time_full_s",
    "wall_time_reduced_s",
    "speedup",
];

/// Errors and online timings of the configured method on every input.
pub fn evaluate(cfg: &RunConfig, exp: &Experiment) -> Result<(ReducedModel, Vec<TimedErrorRow>), CliError> {
    let (training, red) = reduce_training(cfg, exp)?;
    let mut rows = Vec::new();
    for (label, input) in exp.inputs(cfg) {
        let full = if std::ptr::eq(input, &exp.training) {
            training.clone()
        } else {
            exp.simulate_full(input)?
        };
        let reduced = simulate_reduced_model(exp, &red, input)?;
        let metrics = compare(exp, &red, &full, &reduced)?;
        let t_full = median_time(cfg.timing_runs, || exp.simulate_full(input))?;
        let t_red = median_time(cfg.timing_runs, || simulate_reduced_model(exp, &red, input))?;
        rows.push(TimedErrorRow {
            errors: ErrorRow::new(&red.spec, &label, &metrics),
            wall_time_full_s: t_full,
            wall_time_reduced_s: t_red,
            speedup: t_full / t_red,
            dissipation_margin_reduced: red.system.dissipation_margin(&reduced),
        });
    }
    Ok((red, rows))
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let exp = Experiment::new(cfg)?;
    let (red, rows) = evaluate(cfg, &exp)?;
    let header: Vec<String> = ERROR_COLUMNS.iter().map(|s| s.to_string()).collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let e = &row.errors;
            vec![
                e.method.clone(),
                e.r.to_string(),
                opt(e.m),
                e.input.clone(),
                num(e.avg_rel_output_error),
                num(e.avg_rel_state_error),
                num(e.l2_output_err),
                num(e.l2_state_err_q),
                num(row.wall_time_full_s),
                num(row.wall_time_reduced_s),
                num(row.speedup),
            ]
        })
        .collect();
    let files = vec![out.join("errors.csv"), out.join("summary.json")];
    write_csv(&files[0], &header, &table)?;
    write_json(
        &files[1],
        &EvaluateSummary {
            spec: red.spec,
            provenance: &red.system.provenance,
            structure: red.system.validate_structure(),
            timing_runs: cfg.timing_runs,
            rows: &rows,
        },
    )?;
    Ok(files)
}

#[derive(Serialize)]
pub struct BoundsOutput {
    pub spec: ReductionSpec,
    pub options: BoundOptions,
    /// Projection bound for the exact-gradient model on the method's basis.
    pub projection: BoundReport,
    pub deim: Option<DeimBoundReport>,
}

/// Both bound reports on the training trajectory.
pub fn bounds(cfg: &RunConfig, exp: &Experiment) -> Result<BoundsOutput, CliError> {
    let (training, red) = reduce_training(cfg, exp)?;
    let mut options = cfg.bounds.clone();
    options.seed = cfg.seed;
    let exact_sys = project_ph(&exp.sys, &red.basis).stage("bounds")?;
    let x0 = nalgebra::DVector::zeros(red.basis.r());
    let exact = phred::reduce::simulate_reduced(&exact_sys, &exp.training, exp.t_span, &exp.integrator, &x0)
        .stage("simulate-reduced")?;
    let projection =
        projection_bound_report(&exp.sys, &red.basis, &exp.metric, &training, &exact, &options).stage("bounds")?;
    let deim = match &red.deim {
        Some(parts) => {
            let approx = simulate_reduced_model(exp, &red, &exp.training)?;
            Some(
                deim_reduction_bound(&exp.sys, &red.basis, &parts.split, &parts.model, &exact, &approx, &options)
                    .stage("bounds")?,
            )
        }
        None => None,
    };
    Ok(BoundsOutput {
        spec: red.spec,
        options,
        projection,
        deim,
    })
}

pub fn cmd_bounds(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let exp = Experiment::new(cfg)?;
    let report = bounds(cfg, &exp)?;
    let mut files = vec![out.join("bounds.json")];
    write_json(&files[0], &report)?;
    if let Some(d) = &report.deim {
        let header: Vec<String> = ["t", "state_bound", "measured_state", "output_bound", "measured_output"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = (0..d.times.len())
            .map(|k| {
                vec![
                    num(d.times[k]),
                    num(d.state_bound[k]),
                    num(d.measured_state[k]),
                    num(d.output_bound[k]),
                    num(d.measured_output[k]),
                ]
            })
            .collect();
        let path = out.join("deim_bound_series.csv");
        write_csv(&path, &header, &rows)?;
        files.push(path);
    }
    Ok(files)
}

/// Cross product of the sweep lists, in a fixed order.
pub fn sweep_points(cfg: &RunConfig) -> Vec<ReductionSpec> {
    let sw = &cfg.sweep;
    let methods = if sw.methods.is_empty() { vec![cfg.method] } else { sw.methods.clone() };
    let rs = if sw.r.is_empty() { vec![cfg.r] } else { sw.r.clone() };
    let ms: Vec<Option<usize>> = if sw.m.is_empty() { vec![cfg.m] } else { sw.m.iter().map(|&m| Some(m)).collect() };
    let mut points = Vec::new();
    for &method in &methods {
        for &r in &rs {
            let base = ReductionSpec {
                method,
                r,
                m: None,
                r_pod: None,
                r_h2: None,
            };
            match method {
                Method::Hybrid => {
                    let splits: Vec<(usize, usize)> = if sw.splits.is_empty() {
                        cfg.r_pod.zip(cfg.r_h2).into_iter().collect()
                    } else {
                        sw.splits.clone()
                    };
                    for (a, b) in splits.into_iter().filter(|(a, b)| a + b == r) {
                        points.push(ReductionSpec {
                            r_pod: Some(a),
                            r_h2: Some(b),
                            ..base
                        });
                    }
                }
                Method::PodDeim | Method::H2epsDeim => {
                    for &m in &ms {
                        points.push(ReductionSpec { m, ..base });
                    }
                }
                Method::Pod | Method::H2eps => points.push(base),
            }
        }
    }
    points
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "method",
    "r",
    "r_pod",
    "r_h2",
    "m",
    "input",
    "status",
    "avg_rel_output_error",
    "avg_rel_state_error",
    "L2_output_err",
    "L2_state_err_Q",
];

/// Sweep table rows. Failed points keep their row with the error in `status`.
pub fn sweep_rows(cfg: &RunConfig, exp: &Experiment) -> Result<Vec<Vec<String>>, CliError> {
    let inputs = exp.inputs(cfg);
    let fulls: Vec<Trajectory> = inputs.iter().map(|(_, u)| exp.simulate_full(u)).collect::<Result<_, _>>()?;
    let snaps = snapshots(exp, &fulls[0], cfg.stride)?;
    let points = sweep_points(cfg);
    let per_point: Vec<Vec<Vec<String>>> = points
        .par_iter()
        .map(|spec| {
            let prefix = vec![
                spec.method.as_str().to_string(),
                spec.r.to_string(),
                opt(spec.r_pod),
                opt(spec.r_h2),
                opt(spec.m),
            ];
            let failed = |label: &str, e: &CliError| {
                let mut row = prefix.clone();
                row.push(label.to_string());
                row.push(format!("error: {}", e.to_string().replace([',', '\n'], ";")));
                row.extend(std::iter::repeat_n(String::new(), 4));
                row
            };
            let red = match build_reduced(exp, cfg, *spec, &snaps) {
                Ok(red) => red,
                Err(e) => {
                    log::warn!("sweep point {spec:?} failed: {e}");
                    return inputs.iter().map(|(l, _)| failed(l, &e)).collect();
                }
            };
            inputs
                .iter()
                .zip(&fulls)
                .map(|((label, input), full)| {
                    let res = simulate_reduced_model(exp, &red, input).and_then(|t| compare(exp, &red, full, &t));
                    match res {
                        Ok(m) => {
                            let mut row = prefix.clone();
                            row.push(label.clone());
                            row.push("ok".into());
                            row.extend([
                                num(m.avg_rel_output_error),
                                num(m.avg_rel_state_error),
                                num(m.l2_output_err),
                                num(m.l2_state_err_q),
                            ]);
                            row
                        }
                        Err(e) => {
                            log::warn!("sweep point {spec:?} on {label} failed: {e}");
                            failed(label, &e)
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_point.into_iter().flatten().collect())
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, threads: Option<usize>) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let exp = Experiment::new(cfg)?;
    let run = || sweep_rows(cfg, &exp);
    let rows = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    let path = out.join("sweep.csv");
    write_csv(&path, &header, &rows)?;
    Ok(vec![path])
}
