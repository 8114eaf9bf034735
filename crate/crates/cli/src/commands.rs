//! Single-shot subcommands. Each returns the text it would print.

use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use homog_core::cell_problem::{
    solve_cell_problem, CellProblemError, CloudMode, SolutionSummary, SolverOptions,
};
use homog_core::coarse_grain::{convergence_report, ConvergenceEntry, Reference};
use homog_core::energy::{dirichlet_energy, EnergySpec};
use homog_core::geometry::voronoi_diagram;
use homog_core::io::{fmt_real, read_cloud, read_field, write_cloud};
use homog_core::percolation::{
    assemble_grid, assemble_grid_with, validate_grid, GridContext, GridParams, GridStrategy,
    RegularGrid,
};
use homog_core::sampling::{sample_poisson, SamplingSpec};
use homog_core::{Point, PointCloud, RandomStream, ScalarField, Window};

use crate::config::{Seeds, XiSweep};
use crate::experiments::{with_pool, xi_sweep, xi_table};
use crate::manifest::Manifest;
use crate::table::{self, Cell, Table};
use crate::CliError;

pub fn window_from(v: &[f64]) -> Result<Window, CliError> {
    match v {
        [cx, cy, w, h] => Ok(Window::new(Point::new(*cx, *cy), *w, *h)?),
        _ => Err(CliError::Run(
            "a window needs four numbers: cx cy w h".into(),
        )),
    }
}

pub fn load_cloud(path: &Path) -> Result<Arc<PointCloud>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Arc::new(read_cloud(BufReader::new(f))?))
}

pub fn load_field(path: &Path, cloud: &Arc<PointCloud>) -> Result<ScalarField, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_field(BufReader::new(f), cloud)?)
}

/// Writes to `out`, or returns the text when `out` is `None`.
fn emit(text: String, out: Option<&Path>) -> Result<String, CliError> {
    match out {
        Some(p) => {
            std::fs::write(p, &text).map_err(|e| CliError::io(p, e))?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

pub fn sample(
    gamma: f64,
    window: Window,
    padding: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let cloud = sample_poisson(&SamplingSpec::new(
        window,
        gamma,
        padding,
        RandomStream::new(seed),
    ))?;
    let mut buf = Vec::new();
    write_cloud(&cloud, &mut buf)?;
    emit(String::from_utf8(buf).expect("ascii"), out)
}

pub fn energy(cloud: &Path, field: &Path, region: Window, radius: f64) -> Result<String, CliError> {
    let c = load_cloud(cloud)?;
    let u = load_field(field, &c)?;
    let e = dirichlet_energy(&u, &EnergySpec::new(radius, region))?;
    Ok(format!("{}\n", fmt_real(e)))
}

/// Solves on the square of side `size` centered in the cloud's window.
pub fn cell(cloud: &Path, size: f64, lambda: f64, xi: Point, tol: f64) -> Result<String, CliError> {
    let c = load_cloud(cloud)?;
    let region = Window::square(c.window().center, size)?;
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let (summary, converged) = match solve_cell_problem(&c, &region, lambda, xi, &opts) {
        Ok(s) => (SolutionSummary::from(&s), true),
        Err(CellProblemError::NotConverged { best, .. }) => {
            (SolutionSummary::from(best.as_ref()), false)
        }
        Err(e) => return Err(e.into()),
    };
    let v = serde_json::json!({ "converged": converged, "solution": summary });
    Ok(format!(
        "{}\n",
        serde_json::to_string_pretty(&v).expect("plain data")
    ))
}

/// Parses `e1`, `e2`, `diag` or `x:y`.
pub fn parse_direction(s: &str) -> Result<[f64; 2], CliError> {
    let d = 1.0 / 2f64.sqrt();
    match s.trim() {
        "e1" => Ok([1.0, 0.0]),
        "e2" => Ok([0.0, 1.0]),
        "diag" => Ok([d, d]),
        other => {
            let bad = || CliError::Run(format!("bad direction `{other}`; use e1, e2, diag or x:y"));
            let (x, y) = other.split_once(':').ok_or_else(bad)?;
            Ok([x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?])
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn xi(
    gamma: f64,
    lambda: f64,
    sizes: Vec<f64>,
    seeds: u64,
    dirs: Vec<[f64; 2]>,
    master_seed: u64,
    tol: f64,
    threads: usize,
) -> Result<String, CliError> {
    let p = XiSweep {
        sizes,
        seeds: Seeds::Count(seeds),
        directions: dirs,
        lambda,
        cloud: CloudMode::Poisson { gamma },
        tol,
    };
    let master = RandomStream::new(master_seed);
    let est = with_pool(threads, || xi_sweep(&p, &master))??;
    Ok(xi_table(&est).table.to_csv())
}

pub fn grid(cloud: &Path, params: GridParams) -> Result<String, CliError> {
    let c = load_cloud(cloud)?;
    let ctx = GridContext::new(&c, params.eps, params.alpha, params.lambda)?;
    let outcome = match params.strategy {
        GridStrategy::Blocks => assemble_grid(&c, &params)?,
        GridStrategy::RegularCells => assemble_grid_with(&ctx, &params)?,
    };
    let validation = outcome.grid().map(|g| validate_grid(g, &ctx));
    let v = serde_json::json!({
        "assembled": outcome.grid().is_some(),
        "grid": outcome.grid().map(RegularGrid::to_json),
        "report": outcome.report(),
        "validation": validation,
    });
    Ok(format!(
        "{}\n",
        serde_json::to_string_pretty(&v).expect("plain data")
    ))
}

/// Reads a grid written by `grid` (or a bare grid object).
pub fn load_grid(path: &Path, cloud: &PointCloud) -> Result<RegularGrid, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    let g = match v.get("grid") {
        Some(serde_json::Value::Null) => {
            return Err(CliError::Run(format!(
                "{}: grid assembly had failed",
                path.display()
            )))
        }
        Some(g) => g,
        None => &v,
    };
    Ok(RegularGrid::from_json(g, cloud)?)
}

pub fn converge(
    cloud: &Path,
    field: &Path,
    grid: &Path,
    t: f64,
    reference: Reference,
    region: Window,
) -> Result<String, CliError> {
    let c = load_cloud(cloud)?;
    let u = load_field(field, &c)?;
    let g = load_grid(grid, &c)?;
    if g.params.t != t {
        return Err(CliError::Run(format!(
            "grid was built for t = {}, not {t}",
            g.params.t
        )));
    }
    let diagram = voronoi_diagram(&c, c.window())?;
    let entry = ConvergenceEntry {
        eps: g.params.eps,
        field: &u,
        grid: &g,
        diagram: &diagram,
    };
    let rep = convergence_report(&[entry], &|p| reference.eval(p), &region)?;
    let mut out = Table::new(table::CONVERGENCE);
    for r in &rep.rows {
        out.push(vec![
            c.meta().seed.into(),
            r.eps.into(),
            r.t.into(),
            r.l2_grid.into(),
            r.tg_vs_ut.into(),
            r.ut_vs_u.into(),
            r.grid_area.into(),
            r.flagged_squares.into(),
            r.skipped_measure.into(),
            Cell::Text(String::new()),
        ]);
    }
    Ok(out.to_csv())
}

/// Verifies every manifest and summarizes it; with `concat`, also joins the CSVs
/// of schema `schema_name` across manifests after checking their versions agree.
pub fn report(manifests: &[&Path], concat: Option<(&str, &Path)>) -> Result<String, CliError> {
    let mut text = String::new();
    let mut parts: Vec<(String, std::path::PathBuf)> = Vec::new();
    for &mp in manifests {
        let m = Manifest::load(mp)?;
        let changed = m.verify(mp)?;
        if !changed.is_empty() {
            return Err(CliError::Manifest(format!(
                "{}: content hash mismatch for {}",
                mp.display(),
                changed.join(", ")
            )));
        }
        text.push_str(&format!(
            "{}: kind {} seed {} threads {} files {} failed rows {}\n",
            mp.display(),
            m.kind,
            m.config.master_seed,
            m.threads,
            m.files.len(),
            m.failed_rows.len()
        ));
        for f in &m.files {
            text.push_str(&format!(
                "  {} {} {}{}\n",
                f.path,
                &f.sha256[..16],
                f.schema.as_deref().unwrap_or("-"),
                f.rows.map(|r| format!(" rows {r}")).unwrap_or_default()
            ));
            if let (Some(id), Some((name, _))) = (&f.schema, concat) {
                if id.split('/').next() == Some(name) {
                    parts.push((id.clone(), m.file_path(mp, f)));
                }
            }
        }
    }
    if let Some((name, out)) = concat {
        let inputs: Vec<(String, &Path)> = parts
            .iter()
            .map(|(id, p)| (id.clone(), p.as_path()))
            .collect();
        if inputs.is_empty() {
            return Err(CliError::Schema(format!(
                "no `{name}` tables in the given manifests"
            )));
        }
        let joined = table::concat(&inputs)?;
        std::fs::write(out, &joined).map_err(|e| CliError::io(out, e))?;
        text.push_str(&format!(
            "wrote {} ({} tables)\n",
            out.display(),
            inputs.len()
        ));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_parse() {
        assert_eq!(parse_direction("e2").unwrap(), [0.0, 1.0]);
        assert_eq!(parse_direction("0.6:0.8").unwrap(), [0.6, 0.8]);
        assert!(parse_direction("north").is_err());
        assert!(window_from(&[0.0, 0.0, 1.0]).is_err());
    }
}
