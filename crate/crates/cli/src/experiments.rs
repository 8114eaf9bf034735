//! Row evaluators for each experiment kind and the orchestrating `run_experiment`.
//!
//! Every row draws from its own substream of the master seed, keyed by the row's
//! parameters and seed rather than its position, so any subset of seeds reproduces
//! the matching rows of a larger run. Rows are evaluated in parallel and sorted
//! before writing.

use std::path::Path;
use std::sync::Arc;

use homog_core::cell_problem::{estimate_xi, lattice_oracle, CloudMode, XiEstimate, XiPlan};
use homog_core::coarse_grain::{convergence_report, ConvergenceEntry};
use homog_core::percolation::{
    assemble_grid, assemble_grid_with, find_crossings, max_disjoint_crossings, squares_per_side,
    validate_grid, AssemblyOutcome, BlockField, GridContext, GridParams, GridStrategy,
};
use homog_core::sampling::{sample_poisson, SamplingSpec};
use homog_core::{Point, PointCloud, RandomStream, ScalarField, Window};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    directions, Convergence, Experiment, ExperimentConfig, GridSuccess, LatticeOracle,
    PercolationSweep, XiSweep,
};
use crate::manifest::{sha256_hex, FailedRow, FileEntry, Manifest, MANIFEST_FILE, MANIFEST_FORMAT};
use crate::table::{self, Cell, Table};
use crate::CliError;

/// Threads to use: the request (or all cores), capped by `HOMOG_THREADS`.
pub fn thread_count(requested: Option<usize>) -> usize {
    let cap = std::env::var("HOMOG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let base =
        requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// A table plus the rows that could not be evaluated.
pub struct Produced {
    pub table: Table,
    pub failures: Vec<(usize, String)>,
}

fn xi_plan(p: &XiSweep, master: &RandomStream) -> XiPlan {
    XiPlan {
        sizes: p.sizes.clone(),
        seeds: p.seeds.to_vec(),
        directions: directions(&p.directions),
        lambda: p.lambda,
        mode: p.cloud,
        tol: p.tol,
        master: master.clone(),
    }
}

pub fn xi_sweep(p: &XiSweep, master: &RandomStream) -> Result<XiEstimate, CliError> {
    Ok(estimate_xi(&xi_plan(p, master))?)
}

pub fn xi_table(est: &XiEstimate) -> Produced {
    let mut table = Table::new(table::XI);
    let mut failures = Vec::new();
    for (k, r) in est.rows.iter().enumerate() {
        if let Some(e) = &r.error {
            failures.push((k, e.clone()));
        }
        table.push(vec![
            r.size.into(),
            r.seed.into(),
            r.xi.x.into(),
            r.xi.y.into(),
            r.m.into(),
            r.m_normalized.into(),
            r.residual.into(),
            r.iterations.into(),
        ]);
    }
    Produced { table, failures }
}

pub fn isotropy_table(est: &XiEstimate, dirs: &[Point]) -> Table {
    let mut t = Table::new(table::ISOTROPY);
    for s in &est.per_size {
        for (d, xi) in dirs.iter().enumerate() {
            t.push(vec![
                s.size.into(),
                d.into(),
                xi.x.into(),
                xi.y.into(),
                s.direction_means[d].into(),
                s.mean.into(),
                s.stddev.into(),
                s.direction_spread.into(),
                s.failed_rows.into(),
            ]);
        }
    }
    t
}

pub fn lattice_table(p: &LatticeOracle, master: &RandomStream) -> Result<Produced, CliError> {
    let dirs = directions(&p.directions);
    let plan = XiPlan {
        sizes: p.sizes.clone(),
        seeds: vec![0],
        directions: dirs.clone(),
        lambda: p.lambda,
        mode: CloudMode::Lattice {
            spacing: p.spacing,
            jitter: 0.0,
        },
        tol: p.tol,
        master: master.clone(),
    };
    let est = estimate_xi(&plan)?;
    let mut table = Table::new(table::LATTICE);
    let mut failures = Vec::new();
    for (k, r) in est.rows.iter().enumerate() {
        if let Some(e) = &r.error {
            failures.push((k, e.clone()));
        }
        let oracle = lattice_oracle(p.spacing, p.lambda, dirs[r.direction]);
        table.push(vec![
            r.size.into(),
            r.xi.x.into(),
            r.xi.y.into(),
            r.m_normalized.into(),
            oracle.into(),
            ((r.m_normalized - oracle) / oracle).into(),
            r.residual.into(),
            r.iterations.into(),
        ]);
    }
    Ok(Produced { table, failures })
}

/// `(p bits, seed)`.
type RowKey = (u64, u64);
/// All rows of one seed, or why its cloud could not be built.
type SeedRows = Result<Vec<Vec<Cell>>, String>;
/// Cells plus the error that left them empty, if any.
type RowOrError = (Vec<Cell>, Option<String>);

pub fn percolation_table(
    p: &PercolationSweep,
    master: &RandomStream,
) -> Result<Produced, CliError> {
    let seeds = p.seeds.to_vec();
    let jobs: Vec<(f64, u64)> = p
        .probabilities
        .iter()
        .flat_map(|&q| seeds.iter().map(move |&s| (q, s)))
        .collect();
    let mut rows: Vec<(RowKey, Result<Vec<Cell>, String>)> = jobs
        .par_iter()
        .map(|&(q, seed)| {
            let field =
                BlockField::bernoulli(p.nx, p.ny, q, &master.derive(q.to_bits()).derive(seed));
            let rect = field.full_rect();
            let row = find_crossings(&field, &rect, p.direction, usize::MAX)
                .and_then(|c| {
                    let max: Cell = if p.max_flow {
                        max_disjoint_crossings(&field, &rect, p.direction)?.into()
                    } else {
                        Cell::Text(String::new())
                    };
                    Ok(vec![
                        q.into(),
                        seed.into(),
                        field.good_fraction().into(),
                        c.len().into(),
                        max,
                    ])
                })
                .map_err(|e| e.to_string());
            ((q.to_bits(), seed), row)
        })
        .collect();
    rows.sort_by_key(|(k, _)| *k);
    let mut table = Table::new(table::PERCOLATION);
    let mut failures = Vec::new();
    for (k, ((q, seed), r)) in rows.into_iter().enumerate() {
        match r {
            Ok(cells) => table.push(cells),
            Err(e) => {
                failures.push((k, e));
                table.push(vec![
                    f64::from_bits(q).into(),
                    seed.into(),
                    f64::NAN.into(),
                    Cell::Text(String::new()),
                    Cell::Text(String::new()),
                ]);
            }
        }
    }
    Ok(Produced { table, failures })
}

fn poisson_square(
    side: f64,
    eps: f64,
    padding: f64,
    stream: RandomStream,
) -> Result<Arc<PointCloud>, CliError> {
    let w = Window::square(Point::ORIGIN, side)?;
    Ok(Arc::new(sample_poisson(&SamplingSpec::new(
        w,
        1.0 / (eps * eps),
        padding,
        stream,
    ))?))
}

fn grid_params(p: &GridSuccess, alpha: f64, lambda: f64) -> GridParams {
    GridParams {
        eps: p.eps,
        t: p.t,
        alpha,
        lambda,
        big_lambda: p.big_lambda,
        upsilon: p.upsilon,
        strategy: p.strategy,
    }
}

fn grid_success_rows(p: &GridSuccess, cloud: &Arc<PointCloud>, seed: u64) -> Vec<Vec<Cell>> {
    p.points
        .iter()
        .map(|pt| {
            let params = grid_params(p, pt.alpha, pt.lambda);
            let fail_row = |msg: String| -> Vec<Cell> {
                vec![
                    pt.alpha.into(),
                    pt.lambda.into(),
                    seed.into(),
                    false.into(),
                    false.into(),
                    0usize.into(),
                    Cell::Text(String::new()),
                    f64::NAN.into(),
                    f64::NAN.into(),
                    msg.into(),
                ]
            };
            let ctx = || GridContext::new(cloud, p.eps, pt.alpha, pt.lambda);
            let assembled = match p.strategy {
                GridStrategy::Blocks => assemble_grid(cloud, &params).map(|o| (o, None)),
                GridStrategy::RegularCells => {
                    ctx().and_then(|c| assemble_grid_with(&c, &params).map(|o| (o, Some(c))))
                }
            };
            let (outcome, built) = match assembled {
                Ok(v) => v,
                Err(e) => return fail_row(e.to_string()),
            };
            let report = outcome.report().clone();
            let (valid, failing) = match &outcome {
                AssemblyOutcome::Assembled { grid, .. } => {
                    let ctx = match built.map_or_else(ctx, Ok) {
                        Ok(c) => c,
                        Err(e) => return fail_row(e.to_string()),
                    };
                    let v = validate_grid(grid, &ctx);
                    (v.all_pass(), v.failing().concat())
                }
                AssemblyOutcome::Failed { .. } => (false, String::new()),
            };
            vec![
                pt.alpha.into(),
                pt.lambda.into(),
                seed.into(),
                outcome.grid().is_some().into(),
                valid.into(),
                report.m.into(),
                failing.into(),
                report.upsilon_lengths.into(),
                report.upsilon_count.into(),
                report.failures.join("; ").into(),
            ]
        })
        .collect()
}

pub fn grid_success_table(p: &GridSuccess, master: &RandomStream) -> Result<Produced, CliError> {
    let side = p.t * squares_per_side(p.t) as f64;
    let max_lambda = p.points.iter().map(|q| q.lambda).fold(0.0, f64::max);
    let seeds = p.seeds.to_vec();
    let mut rows: Vec<(u64, SeedRows)> = seeds
        .par_iter()
        .map(|&seed| {
            let stream = master.derive(p.eps.to_bits()).derive(seed);
            let rows = poisson_square(side, p.eps, p.padding * max_lambda * p.eps, stream)
                .map(|c| grid_success_rows(p, &c, seed))
                .map_err(|e| e.to_string());
            (seed, rows)
        })
        .collect();
    rows.sort_by_key(|(s, _)| *s);
    let mut table = Table::new(table::GRID_SUCCESS);
    let mut failures = Vec::new();
    for (seed, r) in rows {
        match r {
            Ok(rs) => rs.into_iter().for_each(|r| table.push(r)),
            Err(e) => {
                for pt in &p.points {
                    failures.push((table.rows.len(), e.clone()));
                    table.push(vec![
                        pt.alpha.into(),
                        pt.lambda.into(),
                        seed.into(),
                        false.into(),
                        false.into(),
                        0usize.into(),
                        Cell::Text(String::new()),
                        f64::NAN.into(),
                        f64::NAN.into(),
                        e.clone().into(),
                    ]);
                }
            }
        }
    }
    Ok(Produced { table, failures })
}

fn convergence_rows(
    p: &Convergence,
    eps: f64,
    seed: u64,
    master: &RandomStream,
) -> Vec<RowOrError> {
    let failed = |t: f64, msg: String| {
        let mut cells: Vec<Cell> = vec![seed.into(), eps.into(), t.into()];
        cells.extend((0..4).map(|_| Cell::Real(f64::NAN)));
        cells.extend([Cell::Int(0), Cell::Real(f64::NAN), Cell::Text(msg.clone())]);
        (cells, Some(msg))
    };
    let stream = master.derive(eps.to_bits()).derive(seed);
    let prepared = poisson_square(p.domain, eps, 6.0 * p.lambda * eps, stream)
        .and_then(|c| Ok((GridContext::new(&c, eps, p.alpha, p.lambda)?, c)));
    let (ctx, cloud) = match prepared {
        Ok(v) => v,
        Err(e) => return p.t.iter().map(|&t| failed(t, e.to_string())).collect(),
    };
    let reference = p.reference;
    let w = move |x: Point| reference.eval(x);
    let u = ScalarField::from_fn(&cloud, w);
    p.t.iter()
        .map(|&t| {
            let params = GridParams {
                eps,
                t,
                alpha: p.alpha,
                lambda: p.lambda,
                big_lambda: p.big_lambda,
                upsilon: p.upsilon,
                strategy: p.strategy,
            };
            let outcome = match assemble_grid_with(&ctx, &params) {
                Ok(o) => o,
                Err(e) => return failed(t, e.to_string()),
            };
            let Some(grid) = outcome.grid() else {
                return failed(
                    t,
                    format!(
                        "grid assembly failed: {}",
                        outcome.report().failures.join("; ")
                    ),
                );
            };
            let entry = ConvergenceEntry {
                eps,
                field: &u,
                grid,
                diagram: &ctx.diagram,
            };
            match convergence_report(&[entry], &w, &p.region) {
                Ok(rep) => {
                    let r = &rep.rows[0];
                    let cells = vec![
                        seed.into(),
                        eps.into(),
                        t.into(),
                        r.l2_grid.into(),
                        r.tg_vs_ut.into(),
                        r.ut_vs_u.into(),
                        r.grid_area.into(),
                        r.flagged_squares.into(),
                        r.skipped_measure.into(),
                        Cell::Text(String::new()),
                    ];
                    (cells, None)
                }
                Err(e) => failed(t, e.to_string()),
            }
        })
        .collect()
}

pub fn convergence_table(p: &Convergence, master: &RandomStream) -> Result<Produced, CliError> {
    let seeds = p.seeds.to_vec();
    let jobs: Vec<(f64, u64)> = p
        .eps
        .iter()
        .flat_map(|&e| seeds.iter().map(move |&s| (e, s)))
        .collect();
    let mut rows: Vec<((u64, u64), Vec<RowOrError>)> = jobs
        .par_iter()
        .map(|&(eps, seed)| {
            (
                (seed, eps.to_bits()),
                convergence_rows(p, eps, seed, master),
            )
        })
        .collect();
    // by seed, then eps in configured order
    let order = |bits: u64| {
        p.eps
            .iter()
            .position(|e| e.to_bits() == bits)
            .unwrap_or(usize::MAX)
    };
    rows.sort_by_key(|((seed, bits), _)| (*seed, order(*bits)));
    let mut table = Table::new(table::CONVERGENCE);
    let mut failures = Vec::new();
    for (_, rs) in rows {
        for (cells, err) in rs {
            if let Some(e) = err {
                failures.push((table.rows.len(), e));
            }
            table.push(cells);
        }
    }
    Ok(Produced { table, failures })
}

#[derive(Serialize)]
struct XiSummary<'a> {
    per_size: &'a [homog_core::cell_problem::SizeSummary],
    /// Intercept of the `1 / T` fit and its standard error.
    extrapolated: Option<(f64, Option<f64>)>,
}

struct Output {
    name: String,
    bytes: Vec<u8>,
    schema: Option<(String, usize)>,
}

fn csv_output(name: &str, table: &Table) -> Output {
    Output {
        name: name.to_string(),
        bytes: table.to_csv().into_bytes(),
        schema: Some((table.schema.id(), table.rows.len())),
    }
}

/// Evaluates the configured experiment and writes its files plus `manifest.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Manifest, CliError> {
    config.validate()?;
    let threads = thread_count(config.threads);
    let master = RandomStream::new(config.master_seed);
    let (outputs, failures) = with_pool(threads, || produce(&config.experiment, &master))??;

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for o in &outputs {
        let path = dir.join(&o.name);
        std::fs::write(&path, &o.bytes).map_err(|e| CliError::io(&path, e))?;
        files.push(FileEntry {
            path: o.name.clone(),
            sha256: sha256_hex(&o.bytes),
            bytes: o.bytes.len() as u64,
            schema: o.schema.as_ref().map(|s| s.0.clone()),
            rows: o.schema.as_ref().map(|s| s.1),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: config.experiment.kind().to_string(),
        rng: RandomStream::ALGORITHM.to_string(),
        config: config.clone(),
        threads,
        files,
        failed_rows: failures
            .into_iter()
            .map(|(file, row, error)| FailedRow { file, row, error })
            .collect(),
    };
    write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_manifest(m: &Manifest, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(m).expect("plain data");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

type Failures = Vec<(String, usize, String)>;

fn tag(file: &str, f: Vec<(usize, String)>) -> Failures {
    f.into_iter()
        .map(|(r, e)| (file.to_string(), r, e))
        .collect()
}

fn produce(exp: &Experiment, master: &RandomStream) -> Result<(Vec<Output>, Failures), CliError> {
    Ok(match exp {
        Experiment::XiSweep(p) => {
            let est = xi_sweep(p, master)?;
            let rows = xi_table(&est);
            let summary = XiSummary {
                per_size: &est.per_size,
                extrapolated: est.extrapolated,
            };
            let mut json = serde_json::to_string_pretty(&summary).expect("plain data");
            json.push('\n');
            (
                vec![
                    csv_output("xi.csv", &rows.table),
                    Output {
                        name: "summary.json".into(),
                        bytes: json.into_bytes(),
                        schema: None,
                    },
                ],
                tag("xi.csv", rows.failures),
            )
        }
        Experiment::Isotropy(p) => {
            let est = xi_sweep(p, master)?;
            let rows = xi_table(&est);
            let iso = isotropy_table(&est, &directions(&p.directions));
            (
                vec![
                    csv_output("xi.csv", &rows.table),
                    csv_output("isotropy.csv", &iso),
                ],
                tag("xi.csv", rows.failures),
            )
        }
        Experiment::LatticeOracle(p) => {
            let out = lattice_table(p, master)?;
            (
                vec![csv_output("lattice.csv", &out.table)],
                tag("lattice.csv", out.failures),
            )
        }
        Experiment::PercolationSweep(p) => {
            let out = percolation_table(p, master)?;
            (
                vec![csv_output("percolation.csv", &out.table)],
                tag("percolation.csv", out.failures),
            )
        }
        Experiment::GridSuccess(p) => {
            let out = grid_success_table(p, master)?;
            (
                vec![csv_output("grid_success.csv", &out.table)],
                tag("grid_success.csv", out.failures),
            )
        }
        Experiment::Convergence(p) => {
            let out = convergence_table(p, master)?;
            (
                vec![csv_output("convergence.csv", &out.table)],
                tag("convergence.csv", out.failures),
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_applies() {
        // only this test touches the variable in this binary
        std::env::set_var("HOMOG_THREADS", "2");
        assert_eq!(thread_count(Some(8)), 2);
        assert_eq!(thread_count(Some(1)), 1);
        std::env::set_var("HOMOG_THREADS", "junk");
        assert_eq!(thread_count(Some(3)), 3);
        std::env::remove_var("HOMOG_THREADS");
    }
}
