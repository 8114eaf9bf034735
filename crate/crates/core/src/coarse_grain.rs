//! Coarse-graining of point fields onto mesoscale squares and the grid-restricted
//! convergence diagnostics.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::energy::{dirichlet_energy, EnergyError, EnergySpec};
use crate::geometry::{ConvexPolygon, VoronoiDiagram};
use crate::model::{Point, ScalarField, Window};
use crate::percolation::{squares_per_side, RegularGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoarseGrainError {
    #[error("side length t must be positive and finite, got {0}")]
    BadSide(f64),
    #[error("diagram has {cells} cells, the field's cloud {points} points")]
    DiagramMismatch { cells: usize, points: usize },
    #[error("grid point index {0} is not a point of the field's cloud")]
    GridMismatch(usize),
    #[error("grids disagree on t or k_t")]
    IncompatibleGrids,
    #[error("query point ({x}, {y}) lies outside the diagram's clip window")]
    OutsideClip { x: f64, y: f64 },
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

/// Exactness degree of the triangle rule used for cell integrals.
pub const QUADRATURE_DEGREE: u32 = 4;

// Six-point symmetric rule on the reference triangle, exact to degree 4.
const GAUSS_TRI: [(f64, f64, f64, f64); 6] = [
    (
        0.445_948_490_915_965,
        0.445_948_490_915_965,
        0.108_103_018_168_070,
        0.223_381_589_678_011,
    ),
    (
        0.445_948_490_915_965,
        0.108_103_018_168_070,
        0.445_948_490_915_965,
        0.223_381_589_678_011,
    ),
    (
        0.108_103_018_168_070,
        0.445_948_490_915_965,
        0.445_948_490_915_965,
        0.223_381_589_678_011,
    ),
    (
        0.091_576_213_509_771,
        0.091_576_213_509_771,
        0.816_847_572_980_459,
        0.109_951_743_655_322,
    ),
    (
        0.091_576_213_509_771,
        0.816_847_572_980_459,
        0.091_576_213_509_771,
        0.109_951_743_655_322,
    ),
    (
        0.816_847_572_980_459,
        0.091_576_213_509_771,
        0.091_576_213_509_771,
        0.109_951_743_655_322,
    ),
];

/// `∫_poly f`, triangulating from the vertex centroid.
pub fn integrate_polygon(poly: &ConvexPolygon, f: &impl Fn(Point) -> f64) -> f64 {
    let v = &poly.vertices;
    if v.len() < 3 {
        return 0.0;
    }
    let c = v.iter().fold(Point::ORIGIN, |a, &b| a + b) * (1.0 / v.len() as f64);
    let mut total = 0.0;
    for k in 0..v.len() {
        let (a, b) = (v[k], v[(k + 1) % v.len()]);
        let area = 0.5 * (a - c).cross(b - c).abs();
        let s: f64 = GAUSS_TRI
            .iter()
            .map(|&(l0, l1, l2, w)| w * f(c * l0 + a * l1 + b * l2))
            .sum();
        total += area * s;
    }
    total
}

/// A function constant on each square of the `k_t x k_t` partition of the
/// working square; `None` marks a square with no grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimpleFunction {
    pub t: f64,
    pub k_t: usize,
    /// Row-major from the bottom-left square: index `i * k_t + j` is row `i`, column `j`.
    pub coeffs: Vec<Option<f64>>,
}

impl SimpleFunction {
    pub fn new(t: f64, coeffs: Vec<Option<f64>>) -> Result<Self, CoarseGrainError> {
        if !(t.is_finite() && t > 0.0) {
            return Err(CoarseGrainError::BadSide(t));
        }
        let k_t = squares_per_side(t);
        assert_eq!(coeffs.len(), k_t * k_t, "one coefficient per square");
        Ok(Self { t, k_t, coeffs })
    }

    /// Square means of a continuum function (degree-4 quadrature).
    pub fn from_average(t: f64, f: impl Fn(Point) -> f64) -> Result<Self, CoarseGrainError> {
        let k = squares_per_side(t);
        let mut coeffs = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                let sq = square(t, k, i, j);
                coeffs.push(Some(
                    integrate_polygon(&ConvexPolygon::from_window(&sq), &f) / (t * t),
                ));
            }
        }
        Self::new(t, coeffs)
    }

    pub fn coeff(&self, i: usize, j: usize) -> Option<f64> {
        self.coeffs[i * self.k_t + j]
    }

    pub fn square(&self, i: usize, j: usize) -> Window {
        square(self.t, self.k_t, i, j)
    }

    pub fn working_square(&self) -> Window {
        Window::square(Point::ORIGIN, self.t * self.k_t as f64).expect("positive t")
    }

    /// Value at `p`; `None` outside the working square or on a flagged square.
    pub fn eval(&self, p: Point) -> Option<f64> {
        let half = 0.5 * self.t * self.k_t as f64;
        let (fj, fi) = (
            ((p.x + half) / self.t).floor(),
            ((p.y + half) / self.t).floor(),
        );
        if fi < 0.0 || fj < 0.0 || fi as usize >= self.k_t || fj as usize >= self.k_t {
            return None;
        }
        self.coeff(fi as usize, fj as usize)
    }

    pub fn flagged(&self) -> Vec<(usize, usize)> {
        (0..self.coeffs.len())
            .filter(|&k| self.coeffs[k].is_none())
            .map(|k| (k / self.k_t, k % self.k_t))
            .collect()
    }
}

fn square(t: f64, k: usize, i: usize, j: usize) -> Window {
    let lo = -0.5 * t * k as f64;
    Window::from_bounds(
        lo + j as f64 * t,
        lo + i as f64 * t,
        lo + (j + 1) as f64 * t,
        lo + (i + 1) as f64 * t,
    )
    .expect("positive t")
}

/// Per-square grid point counts and averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridAverageRecord {
    pub t: f64,
    pub k_t: usize,
    pub counts: Vec<usize>,
    pub averages: Vec<Option<f64>>,
}

impl GridAverageRecord {
    pub fn to_simple(&self) -> SimpleFunction {
        SimpleFunction {
            t: self.t,
            k_t: self.k_t,
            coeffs: self.averages.clone(),
        }
    }
}

pub fn grid_average_record(
    u: &ScalarField,
    grid: &RegularGrid,
) -> Result<GridAverageRecord, CoarseGrainError> {
    let t = grid.params.t;
    let k = grid.k_t;
    let cloud = u.cloud();
    let mut sums = vec![0.0; k * k];
    let mut counts = vec![0usize; k * k];
    let half = 0.5 * t * k as f64;
    for i in grid.point_indices() {
        if i >= cloud.len() {
            return Err(CoarseGrainError::GridMismatch(i));
        }
        let p = cloud.point(i);
        let (fj, fi) = (((p.x + half) / t).floor(), ((p.y + half) / t).floor());
        if fi >= 0.0 && fj >= 0.0 && (fi as usize) < k && (fj as usize) < k {
            let s = fi as usize * k + fj as usize;
            sums[s] += u.at(i);
            counts[s] += 1;
        }
    }
    let averages = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(GridAverageRecord {
        t,
        k_t: k,
        counts,
        averages,
    })
}

/// The coarse-grained field: the mean of `u` over the grid points in each square.
pub fn grid_average(
    u: &ScalarField,
    grid: &RegularGrid,
) -> Result<SimpleFunction, CoarseGrainError> {
    Ok(grid_average_record(u, grid)?.to_simple())
}

/// The field extended as a constant on each Voronoi cell.
#[derive(Debug, Clone, Copy)]
pub struct PcExtension<'a> {
    field: &'a ScalarField,
    diagram: &'a VoronoiDiagram,
}

pub fn pc_extension<'a>(
    u: &'a ScalarField,
    diagram: &'a VoronoiDiagram,
) -> Result<PcExtension<'a>, CoarseGrainError> {
    if diagram.len() != u.cloud().len() || diagram.generators() != u.cloud().points() {
        return Err(CoarseGrainError::DiagramMismatch {
            cells: diagram.len(),
            points: u.cloud().len(),
        });
    }
    Ok(PcExtension { field: u, diagram })
}

impl PcExtension<'_> {
    pub fn eval(&self, p: Point) -> Result<f64, CoarseGrainError> {
        self.diagram
            .locate(p)
            .map(|i| self.field.at(i))
            .ok_or(CoarseGrainError::OutsideClip { x: p.x, y: p.y })
    }

    pub fn cell_integral(&self, i: usize) -> f64 {
        self.field.at(i) * self.diagram.cell(i).area
    }

    /// `∫ |û|^2` over the union of the cells of `subset`.
    pub fn l2_norm_sq(&self, subset: &[usize]) -> f64 {
        subset
            .iter()
            .map(|&i| self.field.at(i).powi(2) * self.diagram.cell(i).area)
            .sum()
    }

    /// `∫ |û - w|^2` over the cells of `subset` clipped to `region`.
    pub fn l2_distance_sq(
        &self,
        subset: &[usize],
        w: &(impl Fn(Point) -> f64 + Sync),
        region: &Window,
    ) -> f64 {
        let clip = ConvexPolygon::from_window(region);
        let parts: Vec<f64> = subset
            .par_iter()
            .map(|&i| {
                let poly = self.diagram.cell(i).polygon.clip_to_polygon(&clip);
                let v = self.field.at(i);
                integrate_polygon(&poly, &|p| (v - w(p)).powi(2))
            })
            .collect();
        parts.iter().sum()
    }

    /// Area of the cells of `subset` inside `region`.
    pub fn covered_area(&self, subset: &[usize], region: &Window) -> f64 {
        let clip = ConvexPolygon::from_window(region);
        subset
            .iter()
            .map(|&i| self.diagram.cell(i).polygon.clip_to_polygon(&clip).area())
            .sum()
    }
}

/// `∫ |û - w|^2` over the Voronoi cells of the grid points, restricted to `region`.
pub fn grid_l2_distance(
    u: &ScalarField,
    grid: &RegularGrid,
    diagram: &VoronoiDiagram,
    w: &(impl Fn(Point) -> f64 + Sync),
    region: &Window,
) -> Result<f64, CoarseGrainError> {
    let ext = pc_extension(u, diagram)?;
    let pts = grid.point_indices();
    if let Some(&i) = pts.iter().find(|&&i| i >= u.cloud().len()) {
        return Err(CoarseGrainError::GridMismatch(i));
    }
    Ok(ext.l2_distance_sq(&pts, w, region))
}

/// An `L^2(region)` distance between simple functions, skipping flagged squares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SquareDistance {
    pub value: f64,
    pub skipped_squares: usize,
    /// Area of `region` lying in skipped squares.
    pub skipped_measure: f64,
}

/// `∫_region |a - b|^2` for two simple functions on the same partition.
pub fn simple_distance(
    a: &SimpleFunction,
    b: &SimpleFunction,
    region: &Window,
) -> Result<SquareDistance, CoarseGrainError> {
    if a.k_t != b.k_t || a.t != b.t {
        return Err(CoarseGrainError::IncompatibleGrids);
    }
    let (rlo, rhi) = region.bounding_box();
    let mut out = SquareDistance {
        value: 0.0,
        skipped_squares: 0,
        skipped_measure: 0.0,
    };
    for i in 0..a.k_t {
        for j in 0..a.k_t {
            let (lo, hi) = a.square(i, j).bounding_box();
            let overlap = (hi.x.min(rhi.x) - lo.x.max(rlo.x)).max(0.0)
                * (hi.y.min(rhi.y) - lo.y.max(rlo.y)).max(0.0);
            if overlap == 0.0 {
                continue;
            }
            match (a.coeff(i, j), b.coeff(i, j)) {
                (Some(x), Some(y)) => out.value += overlap * (x - y).powi(2),
                _ => {
                    out.skipped_squares += 1;
                    out.skipped_measure += overlap;
                }
            }
        }
    }
    Ok(out)
}

/// `∫_region |a - w|^2` for a simple function against a continuum function.
pub fn simple_to_function_distance(
    a: &SimpleFunction,
    w: &impl Fn(Point) -> f64,
    region: &Window,
) -> SquareDistance {
    let clip = ConvexPolygon::from_window(region);
    let mut out = SquareDistance {
        value: 0.0,
        skipped_squares: 0,
        skipped_measure: 0.0,
    };
    for i in 0..a.k_t {
        for j in 0..a.k_t {
            let part = ConvexPolygon::from_window(&a.square(i, j)).clip_to_polygon(&clip);
            if part.is_empty() || part.area() == 0.0 {
                continue;
            }
            match a.coeff(i, j) {
                Some(c) => out.value += integrate_polygon(&part, &|p| (c - w(p)).powi(2)),
                None => {
                    out.skipped_squares += 1;
                    out.skipped_measure += part.area();
                }
            }
        }
    }
    out
}

/// `∫_region |T^A u - T^B u|^2` for two grids on the same cloud and `t`.
pub fn grid_independence_gap(
    u: &ScalarField,
    grid_a: &RegularGrid,
    grid_b: &RegularGrid,
    region: &Window,
) -> Result<SquareDistance, CoarseGrainError> {
    if grid_a.params.t != grid_b.params.t || grid_a.k_t != grid_b.k_t {
        return Err(CoarseGrainError::IncompatibleGrids);
    }
    simple_distance(&grid_average(u, grid_a)?, &grid_average(u, grid_b)?, region)
}

/// `max |Δ|^2 / F(u; pair)` over horizontally adjacent unflagged squares whose
/// union lies in the cloud window with room for the interaction radius.
pub fn neighbor_difference_constant(
    coarse: &SimpleFunction,
    u: &ScalarField,
    radius: f64,
) -> Result<Option<f64>, CoarseGrainError> {
    let window = *u.cloud().window();
    let mut best: Option<f64> = None;
    for i in 0..coarse.k_t {
        for j in 0..coarse.k_t.saturating_sub(1) {
            let (Some(a), Some(b)) = (coarse.coeff(i, j), coarse.coeff(i, j + 1)) else {
                continue;
            };
            let (lo, _) = coarse.square(i, j).bounding_box();
            let (_, hi) = coarse.square(i, j + 1).bounding_box();
            let pair = Window::from_bounds(lo.x, lo.y, hi.x, hi.y).expect("nonempty");
            if !window.contains_enlarged(&pair, radius) {
                continue;
            }
            let f = dirichlet_energy(u, &EnergySpec::new(radius, pair))?;
            if f > 0.0 {
                let r = (a - b).powi(2) / f;
                best = Some(best.map_or(r, |x: f64| x.max(r)));
            }
        }
    }
    Ok(best)
}

/// Built-in continuum reference functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    Constant {
        value: f64,
    },
    Linear {
        xi: [f64; 2],
    },
    /// `x1^2 - x2`.
    Quadratic,
}

impl Reference {
    pub fn eval(&self, p: Point) -> f64 {
        match *self {
            Reference::Constant { value } => value,
            Reference::Linear { xi } => xi[0] * p.x + xi[1] * p.y,
            Reference::Quadratic => p.x * p.x - p.y,
        }
    }
}

/// One sampled `(eps, t)` configuration.
pub struct ConvergenceEntry<'a> {
    pub eps: f64,
    pub field: &'a ScalarField,
    pub grid: &'a RegularGrid,
    pub diagram: &'a VoronoiDiagram,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub t: f64,
    /// `∫ |û - u|^2` over the grid cells in the region.
    pub l2_grid: f64,
    /// `∫ |T^G u_eps - u^t|^2`, with `u^t` the square means of the reference.
    pub tg_vs_ut: f64,
    /// `∫ |u^t - u|^2`.
    pub ut_vs_u: f64,
    pub grid_area: f64,
    pub flagged_squares: usize,
    pub skipped_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub region: Window,
    pub quadrature_degree: u32,
    pub sampling_plan: String,
    pub rows: Vec<ConvergenceRow>,
}

/// Distance table over the sampled configurations; rows follow the input order.
pub fn convergence_report(
    entries: &[ConvergenceEntry<'_>],
    reference: &(impl Fn(Point) -> f64 + Sync),
    region: &Window,
) -> Result<ConvergenceReport, CoarseGrainError> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let t = e.grid.params.t;
        let ext = pc_extension(e.field, e.diagram)?;
        let pts = e.grid.point_indices();
        let l2_grid = ext.l2_distance_sq(&pts, reference, region);
        let grid_area = ext.covered_area(&pts, region);
        let tg = grid_average(e.field, e.grid)?;
        let ut = SimpleFunction::from_average(t, reference)?;
        let d1 = simple_distance(&tg, &ut, region)?;
        let d2 = simple_to_function_distance(&ut, reference, region);
        rows.push(ConvergenceRow {
            eps: e.eps,
            t,
            l2_grid,
            tg_vs_ut: d1.value,
            ut_vs_u: d2.value,
            grid_area,
            flagged_squares: d1.skipped_squares,
            skipped_measure: d1.skipped_measure,
        });
    }
    let plan = rows
        .iter()
        .map(|r| format!("(eps={}, t={})", r.eps, r.t))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(ConvergenceReport {
        region: *region,
        quadrature_degree: QUADRATURE_DEGREE,
        sampling_plan: if plan.is_empty() {
            "none".to_string()
        } else {
            plan
        },
        rows,
    })
}
