//! The affine-clamped cell problem: assembly, preconditioned CG, size sweeps and
//! stitched recovery fields.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::energy::{dirichlet_energy_indexed, EnergyError};
use crate::geometry::{
    build_neighbor_index, convex_hull, ConvexPolygon, GeometryError, NeighborIndex,
};
use crate::model::{ModelError, Point, PointCloud, PointId, RandomStream, ScalarField, Window};
use crate::sampling::{lattice_cloud, sample_poisson, SamplingError, SamplingSpec};

#[derive(Debug, Error)]
pub enum CellProblemError {
    #[error("neighbor index radius {index} does not match lambda {lambda}")]
    IndexRadius { index: f64, lambda: f64 },
    #[error("cloud window does not contain the region enlarged by {0}")]
    InsufficientPadding(f64),
    #[error("solver tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("direction must be nonzero")]
    ZeroDirection,
    #[error("size {size} must exceed 4 lambda = {min}")]
    SizeTooSmall { size: f64, min: f64 },
    #[error("CG stopped after {iterations} iterations at relative residual {residual:e}")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<CellProblemSolution>,
    },
    #[error("sub-square {index:?}: {source}")]
    SubSquare {
        index: (i64, i64),
        #[source]
        source: Box<CellProblemError>,
    },
    #[error("delta must lie in (0, 1], got {0}")]
    BadDelta(f64),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Free(usize),
    Clamped(usize),
    /// Not within `lambda` of the region; never enters the energy.
    Outside,
}

/// Free/clamped split of the points that interact with a region.
#[derive(Debug, Clone)]
pub struct ClampPartition {
    pub region: Window,
    pub lambda: f64,
    pub layer: f64,
    pub xi: Point,
    /// Cloud indices of the unknowns.
    pub free: Vec<usize>,
    /// Cloud indices with prescribed values.
    pub clamped: Vec<usize>,
    pub clamp_values: Vec<f64>,
    role: Vec<Role>,
    /// Free components without clamped neighbors, pinned to the affine value at
    /// their hull centroid (cloud indices).
    pub detached: Vec<Vec<usize>>,
}

impl ClampPartition {
    pub fn role(&self, i: usize) -> Role {
        self.role[i]
    }

    pub fn free_len(&self) -> usize {
        self.free.len()
    }

    pub fn relevant_len(&self) -> usize {
        self.free.len() + self.clamped.len()
    }

    /// Field equal to `xi . x` except on free points, which take `w`.
    pub fn extend(&self, cloud: &Arc<PointCloud>, w: &[f64]) -> ScalarField {
        let mut values: Vec<f64> = cloud.points().iter().map(|p| self.xi.dot(*p)).collect();
        for (&i, &v) in self.clamped.iter().zip(&self.clamp_values) {
            values[i] = v;
        }
        for (&i, &v) in self.free.iter().zip(w) {
            values[i] = v;
        }
        ScalarField::new(Arc::clone(cloud), values).expect("one value per point")
    }

    /// Moves every free component of the radius graph with no clamped neighbor
    /// into the clamped set.
    fn pin_detached(&mut self, cloud: &PointCloud, index: &NeighborIndex) {
        let mut seen = vec![false; self.free.len()];
        let mut pinned: Vec<(Vec<usize>, f64)> = Vec::new();
        for start in 0..self.free.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![self.free[start]];
            let mut anchored = false;
            let mut queue = VecDeque::from([self.free[start]]);
            while let Some(i) = queue.pop_front() {
                for &j in index.neighbors(i) {
                    match self.role[j] {
                        Role::Free(k) if !seen[k] => {
                            seen[k] = true;
                            comp.push(j);
                            queue.push_back(j);
                        }
                        Role::Clamped(_) => anchored = true,
                        _ => {}
                    }
                }
            }
            if !anchored {
                comp.sort_unstable();
                let pts: Vec<Point> = comp.iter().map(|&i| cloud.point(i)).collect();
                let value = self.xi.dot(convex_hull(&pts).centroid());
                pinned.push((comp, value));
            }
        }
        if pinned.is_empty() {
            return;
        }
        for (comp, value) in &pinned {
            for &i in comp {
                self.role[i] = Role::Outside;
                self.clamped.push(i);
                self.clamp_values.push(*value);
            }
        }
        self.free
            .retain(|&i| !matches!(self.role[i], Role::Outside));
        self.reindex();
        self.detached = pinned.into_iter().map(|(c, _)| c).collect();
    }

    fn reindex(&mut self) {
        for (k, &i) in self.free.iter().enumerate() {
            self.role[i] = Role::Free(k);
        }
        for (k, &i) in self.clamped.iter().enumerate() {
            self.role[i] = Role::Clamped(k);
        }
    }
}

/// Free points lie in the region at distance `> layer` from its boundary; every
/// other point within `lambda` of the region is clamped to `xi . x`.
pub fn clamp_partition_with_layer(
    cloud: &PointCloud,
    region: &Window,
    lambda: f64,
    layer: f64,
    xi: Point,
) -> Result<ClampPartition, CellProblemError> {
    if !cloud.window().contains_enlarged(region, lambda) {
        return Err(CellProblemError::InsufficientPadding(lambda));
    }
    let mut free = Vec::new();
    let mut clamped = Vec::new();
    let mut clamp_values = Vec::new();
    let mut role = vec![Role::Outside; cloud.len()];
    for (i, &p) in cloud.points().iter().enumerate() {
        if region.contains(p) && region.dist_to_boundary(p) > layer {
            role[i] = Role::Free(free.len());
            free.push(i);
        } else if region.dist_to(p) < lambda {
            role[i] = Role::Clamped(clamped.len());
            clamped.push(i);
            clamp_values.push(xi.dot(p));
        }
    }
    Ok(ClampPartition {
        region: *region,
        lambda,
        layer,
        xi,
        free,
        clamped,
        clamp_values,
        role,
        detached: Vec::new(),
    })
}

pub fn clamp_partition(
    cloud: &PointCloud,
    region: &Window,
    lambda: f64,
    xi: Point,
) -> Result<ClampPartition, CellProblemError> {
    clamp_partition_with_layer(cloud, region, lambda, 2.0 * lambda, xi)
}

/// Symmetric sparse matrix in compressed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *out = s;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        row.binary_search(&c)
            .map_or(0.0, |k| self.vals[self.row_ptr[r] + k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.n];
        self.mul_into(x, &mut y);
        dot(x, &y)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                worst = worst.max((self.vals[k] - self.get(self.cols[k], r)).abs());
            }
        }
        worst
    }
}

/// `E(w) = w^T L w - 2 b^T w + c` over the free unknowns.
#[derive(Debug, Clone)]
pub struct QuadraticSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub constant: f64,
    pub region: Window,
    pub lambda: f64,
    pub xi: Point,
}

impl QuadraticSystem {
    pub fn energy(&self, w: &[f64]) -> f64 {
        self.matrix.quad(w) - 2.0 * dot(&self.rhs, w) + self.constant
    }
}

pub fn assemble_quadratic(
    cloud: &PointCloud,
    index: &NeighborIndex,
    partition: &ClampPartition,
) -> Result<QuadraticSystem, CellProblemError> {
    if index.radius() != partition.lambda {
        return Err(CellProblemError::IndexRadius {
            index: index.radius(),
            lambda: partition.lambda,
        });
    }
    let region = &partition.region;
    let pts = cloud.points();
    let in_region: Vec<bool> = pts.iter().map(|p| region.contains(*p)).collect();
    let n = partition.free.len();
    let mut rhs = vec![0.0; n];
    let mut constant = 0.0;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);

    for (r, &i) in partition.free.iter().enumerate() {
        let mut diag = 0.0;
        let mut row: Vec<(usize, f64)> = Vec::new();
        for &j in index.neighbors(i) {
            let w = (in_region[i] as u8 + in_region[j] as u8) as f64;
            diag += w;
            match partition.role(j) {
                Role::Free(c) => row.push((c, -w)),
                Role::Clamped(k) => rhs[r] += w * partition.clamp_values[k],
                Role::Outside => unreachable!("neighbors of free points are relevant"),
            }
        }
        row.push((r, diag));
        row.sort_unstable_by_key(|e| e.0);
        for (c, v) in row {
            cols.push(c);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }

    // constant: clamped-clamped pairs plus the squared clamp terms of free-clamped pairs
    for (k, &i) in partition.clamped.iter().enumerate() {
        let gi = partition.clamp_values[k];
        for &j in index.neighbors(i) {
            let w = (in_region[i] as u8 + in_region[j] as u8) as f64;
            match partition.role(j) {
                Role::Clamped(l) if j > i => {
                    let d = gi - partition.clamp_values[l];
                    constant += w * d * d;
                }
                Role::Free(_) => constant += w * gi * gi,
                _ => {}
            }
        }
    }

    Ok(QuadraticSystem {
        matrix: CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        },
        rhs,
        constant,
        region: *region,
        lambda: partition.lambda,
        xi: partition.xi,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// Defaults to 20 times the number of unknowns.
    pub max_iter: Option<usize>,
    /// Clamping layer width; defaults to `2 lambda`.
    pub layer: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            layer: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for `L x = b` from `x0`.
/// The reported residual is the true `|b - L x| / |b|`.
pub fn pcg(matrix: &CsrMatrix, b: &[f64], x0: Vec<f64>, tol: f64, max_iter: usize) -> CgOutcome {
    let n = matrix.n;
    let bnorm = norm(b);
    if n == 0 || bnorm == 0.0 {
        return CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let inv_diag: Vec<f64> = matrix
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = x0;
    let mut ax = vec![0.0; n];
    let mut iterations = 0;
    let true_residual = |x: &[f64], ax: &mut Vec<f64>| {
        matrix.mul_into(x, ax);
        let r: Vec<f64> = b.iter().zip(ax.iter()).map(|(bi, ai)| bi - ai).collect();
        let rel = norm(&r) / bnorm;
        (r, rel)
    };
    let (mut r, mut rel) = true_residual(&x, &mut ax);
    // restart a few times if the recursive residual drifts from the true one
    for _ in 0..4 {
        if rel <= tol || iterations >= max_iter {
            break;
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        while iterations < max_iter {
            matrix.mul_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let a = rz / pap;
            for k in 0..n {
                x[k] += a * p[k];
                r[k] -= a * ap[k];
            }
            iterations += 1;
            if norm(&r) / bnorm <= tol {
                break;
            }
            for k in 0..n {
                z[k] = r[k] * inv_diag[k];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        (r, rel) = true_residual(&x, &mut ax);
    }
    CgOutcome {
        x,
        iterations,
        residual: rel,
        converged: rel <= tol,
    }
}

#[derive(Debug, Clone)]
pub struct CellProblemSolution {
    pub xi: Point,
    pub region: Window,
    pub lambda: f64,
    /// Minimizer on the free points, `xi . x` elsewhere.
    pub field: ScalarField,
    /// Direct energy of `field` on the region.
    pub m: f64,
    /// Quadratic-form value at the returned iterate.
    pub predicted: f64,
    pub residual: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub free: usize,
    pub clamped: usize,
    pub detached: Vec<Vec<PointId>>,
}

impl CellProblemSolution {
    pub fn normalized(&self) -> f64 {
        self.m / (self.region.area() * self.xi.norm_sq())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolutionSummary {
    pub xi: Point,
    pub region: Window,
    pub lambda: f64,
    pub m: f64,
    pub m_normalized: f64,
    pub predicted: f64,
    pub residual: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub free: usize,
    pub clamped: usize,
    pub detached_components: usize,
}

impl From<&CellProblemSolution> for SolutionSummary {
    fn from(s: &CellProblemSolution) -> Self {
        Self {
            xi: s.xi,
            region: s.region,
            lambda: s.lambda,
            m: s.m,
            m_normalized: s.normalized(),
            predicted: s.predicted,
            residual: s.residual,
            iterations: s.iterations,
            wall_time_s: s.wall_time_s,
            free: s.free,
            clamped: s.clamped,
            detached_components: s.detached.len(),
        }
    }
}

/// Solves the cell problem reusing an index of radius `lambda` over `cloud`.
pub fn solve_with_index(
    cloud: &Arc<PointCloud>,
    index: &NeighborIndex,
    region: &Window,
    xi: Point,
    opts: &SolverOptions,
) -> Result<CellProblemSolution, CellProblemError> {
    let started = Instant::now();
    if !(opts.tol > 0.0) {
        return Err(CellProblemError::BadTolerance(opts.tol));
    }
    let lambda = index.radius();
    let layer = opts.layer.unwrap_or(2.0 * lambda);
    let mut partition = clamp_partition_with_layer(cloud, region, lambda, layer, xi)?;
    partition.pin_detached(cloud, index);
    let system = assemble_quadratic(cloud, index, &partition)?;
    let x0: Vec<f64> = partition
        .free
        .iter()
        .map(|&i| xi.dot(cloud.point(i)))
        .collect();
    let max_iter = opts.max_iter.unwrap_or(20 * partition.free.len().max(1));
    let cg = pcg(&system.matrix, &system.rhs, x0, opts.tol, max_iter);

    let field = partition.extend(cloud, &cg.x);
    let m = dirichlet_energy_indexed(&field, index, region)?;
    let solution = CellProblemSolution {
        xi,
        region: *region,
        lambda,
        predicted: system.energy(&cg.x),
        field,
        m,
        residual: cg.residual,
        iterations: cg.iterations,
        wall_time_s: started.elapsed().as_secs_f64(),
        free: partition.free.len(),
        clamped: partition.clamped.len(),
        detached: partition
            .detached
            .iter()
            .map(|c| c.iter().map(|&i| cloud.id(i)).collect())
            .collect(),
    };
    if cg.converged {
        Ok(solution)
    } else {
        Err(CellProblemError::NotConverged {
            iterations: cg.iterations,
            residual: cg.residual,
            best: Box::new(solution),
        })
    }
}

pub fn solve_cell_problem(
    cloud: &Arc<PointCloud>,
    region: &Window,
    lambda: f64,
    xi: Point,
    opts: &SolverOptions,
) -> Result<CellProblemSolution, CellProblemError> {
    let index = build_neighbor_index(cloud, lambda)?;
    solve_with_index(cloud, &index, region, xi, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CloudMode {
    Poisson { gamma: f64 },
    Lattice { spacing: f64, jitter: f64 },
}

/// A sweep over sizes, seeds and directions.
#[derive(Debug, Clone)]
pub struct XiPlan {
    pub sizes: Vec<f64>,
    pub seeds: Vec<u64>,
    pub directions: Vec<Point>,
    pub lambda: f64,
    pub mode: CloudMode,
    pub tol: f64,
    pub master: RandomStream,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiRow {
    #[serde(rename = "T")]
    pub size: f64,
    pub seed: u64,
    pub direction: usize,
    pub xi: Point,
    pub m: f64,
    pub m_normalized: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Energy of the affine field itself, normalized the same way.
    pub affine_normalized: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    #[serde(rename = "T")]
    pub size: f64,
    pub mean: f64,
    pub stddev: f64,
    /// Mean normalized value per direction, in plan order.
    pub direction_means: Vec<f64>,
    /// `(max - min) / mean` of the direction means.
    pub direction_spread: f64,
    pub failed_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiEstimate {
    pub rows: Vec<XiRow>,
    pub per_size: Vec<SizeSummary>,
    /// Intercept of the affine fit of the mean against `1 / T` over the three
    /// largest sizes, with its standard error when defined.
    pub extrapolated: Option<(f64, Option<f64>)>,
}

/// Realization used for size `size` and `seed`: stream `master / seed / size bits`.
pub fn xi_cloud(plan: &XiPlan, size: f64, seed: u64) -> Result<PointCloud, CellProblemError> {
    let stream = plan.master.derive(seed).derive(size.to_bits());
    let window = Window::square(Point::ORIGIN, size)?;
    Ok(match plan.mode {
        CloudMode::Poisson { gamma } => {
            sample_poisson(&SamplingSpec::new(window, gamma, plan.lambda, stream))?
        }
        CloudMode::Lattice { spacing, jitter } => {
            lattice_cloud(&window.enlarged(plan.lambda)?, spacing, jitter, &stream)?
        }
    })
}

pub fn estimate_xi(plan: &XiPlan) -> Result<XiEstimate, CellProblemError> {
    if plan.directions.iter().any(|d| d.norm_sq() == 0.0) {
        return Err(CellProblemError::ZeroDirection);
    }
    if let Some(&s) = plan.sizes.iter().find(|&&s| !(s > 4.0 * plan.lambda)) {
        return Err(CellProblemError::SizeTooSmall {
            size: s,
            min: 4.0 * plan.lambda,
        });
    }
    let jobs: Vec<(f64, u64)> = plan
        .sizes
        .iter()
        .flat_map(|&t| plan.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let mut rows: Vec<XiRow> = jobs
        .par_iter()
        .flat_map_iter(|&(size, seed)| xi_rows(plan, size, seed))
        .collect();
    rows.sort_by(|a, b| {
        a.size
            .total_cmp(&b.size)
            .then(a.seed.cmp(&b.seed))
            .then(a.direction.cmp(&b.direction))
    });
    let per_size = summarize(&rows, &plan.sizes, plan.directions.len());
    let extrapolated = fit_inverse_size(&per_size);
    Ok(XiEstimate {
        rows,
        per_size,
        extrapolated,
    })
}

fn xi_rows(plan: &XiPlan, size: f64, seed: u64) -> Vec<XiRow> {
    let failed = |direction: usize, xi: Point, msg: String| XiRow {
        size,
        seed,
        direction,
        xi,
        m: f64::NAN,
        m_normalized: f64::NAN,
        residual: f64::NAN,
        iterations: 0,
        affine_normalized: f64::NAN,
        error: Some(msg),
    };
    let prepared = xi_cloud(plan, size, seed).and_then(|c| {
        let c = Arc::new(c);
        let index = build_neighbor_index(&c, plan.lambda)?;
        Ok((c, index))
    });
    let (cloud, index) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return plan
                .directions
                .iter()
                .enumerate()
                .map(|(d, &xi)| failed(d, xi, e.to_string()))
                .collect()
        }
    };
    let region = Window::square(Point::ORIGIN, size).expect("validated size");
    let opts = SolverOptions {
        tol: plan.tol,
        ..SolverOptions::default()
    };
    plan.directions
        .iter()
        .enumerate()
        .map(|(d, &xi)| {
            let scale = size * size * xi.norm_sq();
            let affine = ScalarField::from_fn(&cloud, |p| xi.dot(p));
            let affine_normalized =
                dirichlet_energy_indexed(&affine, &index, &region).map_or(f64::NAN, |e| e / scale);
            match solve_with_index(&cloud, &index, &region, xi, &opts) {
                Ok(s) => XiRow {
                    size,
                    seed,
                    direction: d,
                    xi,
                    m: s.m,
                    m_normalized: s.m / scale,
                    residual: s.residual,
                    iterations: s.iterations,
                    affine_normalized,
                    error: None,
                },
                Err(e) => XiRow {
                    affine_normalized,
                    ..failed(d, xi, e.to_string())
                },
            }
        })
        .collect()
}

fn summarize(rows: &[XiRow], sizes: &[f64], ndirs: usize) -> Vec<SizeSummary> {
    let mut sizes = sizes.to_vec();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    sizes
        .iter()
        .map(|&size| {
            let here: Vec<&XiRow> = rows.iter().filter(|r| r.size == size).collect();
            let ok: Vec<f64> = here
                .iter()
                .filter(|r| r.error.is_none())
                .map(|r| r.m_normalized)
                .collect();
            let (mean, stddev) = mean_std(&ok);
            let direction_means: Vec<f64> = (0..ndirs)
                .map(|d| {
                    let v: Vec<f64> = here
                        .iter()
                        .filter(|r| r.direction == d && r.error.is_none())
                        .map(|r| r.m_normalized)
                        .collect();
                    mean_std(&v).0
                })
                .collect();
            let (lo, hi) = direction_means
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let dmean = direction_means.iter().sum::<f64>() / ndirs.max(1) as f64;
            SizeSummary {
                size,
                mean,
                stddev,
                direction_spread: if ndirs > 0 {
                    (hi - lo) / dmean
                } else {
                    f64::NAN
                },
                direction_means,
                failed_rows: here.len() - ok.len(),
            }
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Least-squares `y = a + b / T` over the three largest sizes.
fn fit_inverse_size(per_size: &[SizeSummary]) -> Option<(f64, Option<f64>)> {
    let pts: Vec<(f64, f64)> = per_size
        .iter()
        .rev()
        .filter(|s| s.mean.is_finite())
        .take(3)
        .map(|s| (1.0 / s.size, s.mean))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = (pts.len() > 2).then(|| {
        let rss: f64 = pts
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        let s2 = rss / (n - 2.0);
        (s2 * (1.0 / n + mx * mx / sxx)).sqrt()
    });
    Some((intercept, se))
}

/// Field built on the squares `(J + [0,1)^2) / m` meeting `region`.
#[derive(Debug, Clone)]
pub struct StitchedField {
    pub field: ScalarField,
    /// Squares contained in `region`, each solved on its inner square.
    pub interior_squares: Vec<(i64, i64)>,
    pub boundary_squares: usize,
    /// Sum of the per-square minima.
    pub solved_energy: f64,
}

/// Exact normalized energy of `xi . x` on the square lattice of the given spacing:
/// `spacing^-2 * sum over lattice vectors 0 < |z| < lambda of (xi . z)^2 / |xi|^2`.
///
/// The affine field minimizes the cell problem on a lattice, so this is the
/// large-size limit of `m_normalized` for lattice clouds.
pub fn lattice_oracle(spacing: f64, lambda: f64, xi: Point) -> f64 {
    let reach = (lambda / spacing).ceil() as i64;
    let mut sum = 0.0;
    for a in -reach..=reach {
        for b in -reach..=reach {
            let z = Point::new(a as f64 * spacing, b as f64 * spacing);
            let r = z.norm();
            if r > 0.0 && r < lambda {
                sum += xi.dot(z).powi(2);
            }
        }
    }
    sum / (spacing * spacing * xi.norm_sq())
}

/// Recovery field: `xi . x` on boundary squares and on the frames of width
/// `delta / (2m)` of interior squares, cell-problem minimizers on the inner
/// squares of side `(1 - delta) / m`. Interaction radius is `lambda * eps`.
#[allow(clippy::too_many_arguments)]
pub fn stitch_recovery_field(
    cloud: &Arc<PointCloud>,
    eps: f64,
    lambda: f64,
    region: &ConvexPolygon,
    xi: Point,
    m: usize,
    delta: f64,
    tol: f64,
) -> Result<StitchedField, CellProblemError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(CellProblemError::BadDelta(delta));
    }
    let radius = lambda * eps;
    let h = 1.0 / m as f64;
    let lo = region
        .vertices
        .iter()
        .fold(Point::new(f64::INFINITY, f64::INFINITY), |a, p| {
            Point::new(a.x.min(p.x), a.y.min(p.y))
        });
    let hi = region
        .vertices
        .iter()
        .fold(Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
            Point::new(a.x.max(p.x), a.y.max(p.y))
        });
    let (i0, i1) = ((lo.x / h).floor() as i64, (hi.x / h).ceil() as i64);
    let (j0, j1) = ((lo.y / h).floor() as i64, (hi.y / h).ceil() as i64);
    let tol_in = 1e-12 * (hi.x - lo.x).max(hi.y - lo.y);

    let mut interior = Vec::new();
    let mut boundary = 0;
    for j in j0..j1 {
        for i in i0..i1 {
            let sq = Window::from_bounds(
                i as f64 * h,
                j as f64 * h,
                (i + 1) as f64 * h,
                (j + 1) as f64 * h,
            )?;
            if sq.corners().iter().all(|&c| region.contains(c, tol_in)) {
                interior.push((i, j));
            } else if !ConvexPolygon::from_window(&sq)
                .clip_to_polygon(region)
                .is_empty()
            {
                boundary += 1;
            }
        }
    }

    let mut values: Vec<f64> = cloud.points().iter().map(|p| xi.dot(*p)).collect();
    let mut solved_energy = 0.0;
    let inner_side = (1.0 - delta) * h;
    if inner_side > 0.0 && !interior.is_empty() {
        let index = build_neighbor_index(cloud, radius)?;
        let opts = SolverOptions {
            tol,
            ..SolverOptions::default()
        };
        let solved: Vec<Result<CellProblemSolution, CellProblemError>> = interior
            .par_iter()
            .map(|&(i, j)| {
                let c = Point::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                let inner = Window::square(c, inner_side)?;
                solve_with_index(cloud, &index, &inner, xi, &opts).map_err(|e| {
                    CellProblemError::SubSquare {
                        index: (i, j),
                        source: Box::new(e),
                    }
                })
            })
            .collect();
        for s in solved {
            let s = s?;
            solved_energy += s.m;
            let inner = s.region;
            for (k, p) in cloud.points().iter().enumerate() {
                if inner.contains(*p) && inner.dist_to_boundary(*p) > 2.0 * radius {
                    values[k] = s.field.at(k);
                }
            }
        }
    }
    Ok(StitchedField {
        field: ScalarField::new(Arc::clone(cloud), values)?,
        interior_squares: interior,
        boundary_squares: boundary,
        solved_energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{dirichlet_energy, EnergySpec};
    use crate::sampling::{transform_cloud, Transform};
    use proptest::prelude::*;

    fn poisson(size: f64, pad: f64, seed: u64) -> Arc<PointCloud> {
        let w = Window::square(Point::ORIGIN, size).unwrap();
        Arc::new(sample_poisson(&SamplingSpec::new(w, 1.0, pad, RandomStream::new(seed))).unwrap())
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn lattice_oracle_counts_strict_ball() {
        assert_eq!(lattice_oracle(1.0, 1.2, Point::new(1.0, 0.0)), 2.0);
        // radius exactly 1: nearest neighbors sit on the sphere and are excluded
        assert_eq!(lattice_oracle(1.0, 1.0, Point::new(1.0, 0.0)), 0.0);
        let diag = Point::new(1.0, 1.0) * (1.0 / 2f64.sqrt());
        assert!((lattice_oracle(1.0, 1.5, Point::new(1.0, 0.0)) - 6.0).abs() < 1e-12);
        assert!((lattice_oracle(1.0, 1.5, diag) - 6.0).abs() < 1e-12);
        assert!((lattice_oracle(0.5, 0.6, Point::new(0.0, 3.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn small_region_is_fully_clamped() {
        let c = poisson(12.0, 3.0, 1);
        let q = Window::square(Point::ORIGIN, 12.0).unwrap();
        let p = clamp_partition(&c, &q, 3.0, Point::new(1.0, 0.0)).unwrap();
        assert!(p.free.is_empty());
        let expected = c.points().iter().filter(|x| q.dist_to(**x) < 3.0).count();
        assert_eq!(p.relevant_len(), expected);
    }

    #[test]
    fn center_point_is_free() {
        let w = Window::square(Point::ORIGIN, 30.0).unwrap();
        let c =
            PointCloud::from_points(vec![Point::new(0.0, 0.0), Point::new(14.0, 0.0)], w).unwrap();
        let q = Window::square(Point::ORIGIN, 20.0).unwrap();
        let p = clamp_partition(&c, &q, 3.0, Point::new(1.0, 0.0)).unwrap();
        assert_eq!(p.free, vec![0]);
        assert!(p.clamped.is_empty());
        let q = Window::square(Point::ORIGIN, 24.0).unwrap();
        let p = clamp_partition(&c, &q, 3.0, Point::new(1.0, 0.0)).unwrap();
        assert_eq!(p.clamped, vec![1]);
    }

    #[test]
    fn empty_free_set_gives_affine_energy() {
        let c = poisson(10.0, 2.0, 3);
        let q = Window::square(Point::ORIGIN, 8.0).unwrap();
        let xi = Point::new(0.3, -1.1);
        let s = solve_cell_problem(&c, &q, 2.0, xi, &SolverOptions::default()).unwrap();
        assert_eq!(s.free, 0);
        let affine = ScalarField::from_fn(&c, |p| xi.dot(p));
        let e = dirichlet_energy(&affine, &EnergySpec::new(2.0, q)).unwrap();
        assert!(rel(s.m, e) < 1e-12);
        assert!(rel(s.predicted, e) < 1e-12);
    }

    #[test]
    fn quadratic_form_matches_direct_energy() {
        for seed in 0..5 {
            let c = poisson(11.0, 1.5, seed);
            let q = Window::square(Point::ORIGIN, 11.0).unwrap();
            let idx = build_neighbor_index(&c, 1.5).unwrap();
            let p = clamp_partition_with_layer(&c, &q, 1.5, 1.5, Point::new(0.7, 0.2)).unwrap();
            assert!(!p.free.is_empty() && c.len() <= 250);
            let sys = assemble_quadratic(&c, &idx, &p).unwrap();
            assert_eq!(sys.matrix.max_asymmetry(), 0.0);
            let mut rng = RandomStream::new(seed).derive(9).rng();
            for _ in 0..20 {
                let w: Vec<f64> = (0..p.free.len())
                    .map(|_| rng.uniform_in(-3.0, 3.0))
                    .collect();
                let direct = dirichlet_energy_indexed(&p.extend(&c, &w), &idx, &q).unwrap();
                assert!(rel(sys.energy(&w), direct) < 1e-10);
                assert!(sys.matrix.quad(&w) >= -1e-12);
            }
        }
    }

    #[test]
    fn index_radius_must_match() {
        let c = poisson(10.0, 2.0, 3);
        let q = Window::square(Point::ORIGIN, 10.0).unwrap();
        let idx = build_neighbor_index(&c, 1.0).unwrap();
        let p = clamp_partition(&c, &q, 2.0, Point::new(1.0, 0.0)).unwrap();
        assert!(matches!(
            assemble_quadratic(&c, &idx, &p),
            Err(CellProblemError::IndexRadius { .. })
        ));
    }

    #[test]
    fn lattice_minimizer_is_affine() {
        let w = Window::square(Point::ORIGIN, 24.0).unwrap();
        let c = Arc::new(lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap());
        let q = Window::square(Point::ORIGIN, 20.0).unwrap();
        let s = solve_cell_problem(&c, &q, 1.2, Point::new(1.0, 0.0), &SolverOptions::default())
            .unwrap();
        assert!(s.free > 0);
        assert!((s.m - 2.0 * 400.0).abs() < 1e-8);
    }

    #[test]
    fn homogeneity_and_monotone_clamping() {
        let c = poisson(20.0, 3.0, 17);
        let q = Window::square(Point::ORIGIN, 20.0).unwrap();
        let xi = Point::new(0.6, 0.8);
        let opts = SolverOptions::default();
        let a = solve_cell_problem(&c, &q, 3.0, xi, &opts).unwrap();
        let b = solve_cell_problem(&c, &q, 3.0, xi * 2.0, &opts).unwrap();
        assert!(rel(b.m, 4.0 * a.m) < 1e-8);
        let wide = SolverOptions {
            layer: Some(7.0),
            ..opts
        };
        let w = solve_cell_problem(&c, &q, 3.0, xi, &wide).unwrap();
        assert!(w.m >= a.m * (1.0 - 1e-10));
        assert!(a.m <= a.predicted + 1e-8 * a.m);
        assert!(rel(a.m, a.predicted) < 1e-9);
    }

    #[test]
    fn rotation_and_scaling_identities() {
        let t = 20.0;
        let lambda = 3.0;
        let big = Window::square(Point::ORIGIN, t * 1.5 + 2.0 * lambda).unwrap();
        let c = Arc::new(
            sample_poisson(&SamplingSpec::new(big, 1.0, 0.0, RandomStream::new(5))).unwrap(),
        );
        let xi = Point::new(1.0, 0.0);
        let theta = std::f64::consts::PI / 6.0;
        let q = Window::square(Point::ORIGIN, t).unwrap();
        let opts = SolverOptions::default();

        let rq = Transform::Rotate(-theta).apply_window(&q).unwrap();
        let lhs = solve_cell_problem(&c, &rq, lambda, xi.rotated(-theta), &opts).unwrap();
        let rc = Arc::new(transform_cloud(&c, Transform::Rotate(theta)).unwrap());
        let rhs = solve_cell_problem(&rc, &q, lambda, xi, &opts).unwrap();
        assert!(rel(lhs.m, rhs.m) < 1e-8, "{} vs {}", lhs.m, rhs.m);

        let sc = Arc::new(transform_cloud(&c, Transform::Scale(0.5)).unwrap());
        let small = Window::square(Point::ORIGIN, t / 2.0).unwrap();
        let scaled = solve_cell_problem(&sc, &small, lambda / 2.0, xi, &opts).unwrap();
        let full = solve_cell_problem(&c, &q, lambda, xi, &opts).unwrap();
        assert!(rel(full.m, 4.0 * scaled.m) < 1e-8);
    }

    #[test]
    fn subadditive_over_halves() {
        let c = poisson(24.0, 3.0, 8);
        let xi = Point::new(1.0, 0.0);
        let opts = SolverOptions::default();
        let whole = solve_cell_problem(
            &c,
            &Window::square(Point::ORIGIN, 24.0).unwrap(),
            3.0,
            xi,
            &opts,
        )
        .unwrap();
        let l = solve_cell_problem(
            &c,
            &Window::from_bounds(-12.0, -12.0, 0.0, 12.0).unwrap(),
            3.0,
            xi,
            &opts,
        )
        .unwrap();
        let r = solve_cell_problem(
            &c,
            &Window::from_bounds(0.0, -12.0, 12.0, 12.0).unwrap(),
            3.0,
            xi,
            &opts,
        )
        .unwrap();
        assert!(whole.m <= l.m + r.m + 1e-10);
    }

    #[test]
    fn detached_components_are_pinned() {
        // an isolated pair in the middle of a large region, far from the layer
        let w = Window::square(Point::ORIGIN, 40.0).unwrap();
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(0.5, 0.0),
            Point::new(15.0, 15.0),
        ];
        let c = Arc::new(PointCloud::from_points(pts, w).unwrap());
        let q = Window::square(Point::ORIGIN, 30.0).unwrap();
        let s = solve_cell_problem(&c, &q, 1.0, Point::new(1.0, 0.0), &SolverOptions::default())
            .unwrap();
        assert_eq!(s.detached, vec![vec![PointId(0), PointId(1)]]);
        assert_eq!(s.field.at(0), 0.25);
        assert_eq!(s.field.at(1), 0.25);
        assert_eq!(s.m, 0.0);
    }

    #[test]
    fn xi_sweep_shape_and_lattice_value() {
        let plan = XiPlan {
            sizes: vec![16.0, 24.0, 32.0],
            seeds: vec![0, 1],
            directions: vec![Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
            lambda: 1.2,
            mode: CloudMode::Lattice {
                spacing: 1.0,
                jitter: 0.0,
            },
            tol: 1e-10,
            master: RandomStream::new(3),
        };
        let est = estimate_xi(&plan).unwrap();
        assert_eq!(est.rows.len(), 12);
        for r in &est.rows {
            assert!((r.m_normalized - 2.0).abs() < 1e-9);
        }
        let (xi, _) = est.extrapolated.unwrap();
        assert!((xi - 2.0).abs() < 1e-8);
        assert!(est.per_size.iter().all(|s| s.direction_spread.abs() < 1e-9));
    }

    #[test]
    fn xi_plan_validation() {
        let mut plan = XiPlan {
            sizes: vec![10.0],
            seeds: vec![0],
            directions: vec![Point::new(1.0, 0.0)],
            lambda: 3.0,
            mode: CloudMode::Poisson { gamma: 1.0 },
            tol: 1e-10,
            master: RandomStream::new(0),
        };
        assert!(matches!(
            estimate_xi(&plan),
            Err(CellProblemError::SizeTooSmall { .. })
        ));
        plan.sizes = vec![20.0];
        plan.directions = vec![Point::ORIGIN];
        assert!(matches!(
            estimate_xi(&plan),
            Err(CellProblemError::ZeroDirection)
        ));
    }

    #[test]
    fn stitched_field_properties() {
        let eps = 0.02;
        let lambda = 2.0;
        let w = Window::square(Point::ORIGIN, 1.0).unwrap();
        let stream = RandomStream::new(4);
        let c = Arc::new(
            sample_poisson(&SamplingSpec::new(
                w,
                1.0 / (eps * eps),
                lambda * eps,
                stream,
            ))
            .unwrap(),
        );
        let s = convex_hull(&[
            Point::new(-0.5, -0.5),
            Point::new(0.5, -0.5),
            Point::new(0.5, 0.5),
            Point::new(-0.5, 0.5),
        ]);
        let xi = Point::new(1.0, 0.5);
        let st = stitch_recovery_field(&c, eps, lambda, &s, xi, 2, 0.2, 1e-10).unwrap();
        assert_eq!(st.interior_squares.len(), 4);
        let affine = ScalarField::from_fn(&c, |p| xi.dot(p));
        let spec = EnergySpec::new(lambda * eps, w);
        let ev = dirichlet_energy(&st.field, &spec).unwrap();
        let ea = dirichlet_energy(&affine, &spec).unwrap();
        assert!(ev <= ea * (1.0 + 1e-9));
        let changed = (0..c.len())
            .filter(|&k| st.field.at(k) != affine.at(k))
            .count();
        assert!(changed > 0);
        // frame points keep the affine value
        for (k, p) in c.points().iter().enumerate() {
            let local = Point::new((p.x + 0.5) * 2.0, (p.y + 0.5) * 2.0);
            let frac = |v: f64| (v - v.floor() - 0.5).abs();
            if frac(local.x).max(frac(local.y)) > 0.4 {
                assert_eq!(st.field.at(k), affine.at(k));
            }
        }
        let full = stitch_recovery_field(&c, eps, lambda, &s, xi, 2, 1.0, 1e-10).unwrap();
        assert_eq!(full.field.values(), affine.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_solution_is_consistent(seed in 0u64..1000, xr in -2.0f64..2.0, yr in -2.0f64..2.0) {
            prop_assume!(xr * xr + yr * yr > 1e-3);
            let c = poisson(14.0, 2.0, seed);
            let q = Window::square(Point::ORIGIN, 14.0).unwrap();
            let s = solve_cell_problem(&c, &q, 2.0, Point::new(xr, yr), &SolverOptions::default()).unwrap();
            prop_assert!(s.residual <= 1e-10);
            prop_assert!(rel(s.m, s.predicted) < 1e-8);
            let affine = ScalarField::from_fn(&c, |p| xr * p.x + yr * p.y);
            let ea = dirichlet_energy(&affine, &EnergySpec::new(2.0, q)).unwrap();
            prop_assert!(s.m <= ea * (1.0 + 1e-10));
        }
    }
}
