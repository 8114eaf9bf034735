//! Neighbor search, clipped Voronoi cells and the regular sub-cluster.
//!
//! Cells are built one generator at a time by clipping the clip window with the
//! bisector half-planes of nearby points, visited ring by ring through a cell list
//! until no unseen point can cut the current polygon.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Point, PointCloud, PointId, Window};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("cannot build a Voronoi diagram of an empty cloud")]
    EmptyCloud,
    #[error("adjacency needs at least 3 non-collinear points, got {0} usable points")]
    DegenerateDelaunay(usize),
    #[error("alpha and lambda must be positive, got alpha={alpha}, lambda={lambda}")]
    BadRegularity { alpha: f64, lambda: f64 },
    #[error("diagram has {cells} cells but the cloud has {points} points")]
    DiagramMismatch { cells: usize, points: usize },
}

/// Compressed adjacency lists; `neighbors(i)` is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut targets = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            targets.extend_from_slice(&l);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.len()).all(|i| self.neighbors(i).iter().all(|&j| self.contains(j, i)))
    }
}

/// Uniform bucket grid over the bounding box of a point set.
#[derive(Debug, Clone)]
pub struct CellList {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl CellList {
    pub fn new(points: &[Point], cell: f64) -> Self {
        let (mut lo, mut hi) = (Point::new(0.0, 0.0), Point::new(0.0, 0.0));
        if let Some(&p) = points.first() {
            lo = p;
            hi = p;
        }
        for p in points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        let (ex, ey) = (
            (hi.x - lo.x).max(f64::MIN_POSITIVE),
            (hi.y - lo.y).max(f64::MIN_POSITIVE),
        );
        // keep the bucket count proportional to the point count
        let budget = (4 * points.len() + 16) as f64;
        let mut cell = cell;
        if (ex / cell + 1.0) * (ey / cell + 1.0) > budget {
            cell = cell.max((ex * ey / budget).sqrt()).max(ex.max(ey) / budget);
        }
        let nx = (ex / cell).floor() as usize + 1;
        let ny = (ey / cell).floor() as usize + 1;
        let mut counts = vec![0usize; nx * ny + 1];
        let key = |p: Point| {
            let i = (((p.x - lo.x) / cell) as usize).min(nx - 1);
            let j = (((p.y - lo.y) / cell) as usize).min(ny - 1);
            j * nx + i
        };
        for &p in points {
            counts[key(p) + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; points.len()];
        for (idx, &p) in points.iter().enumerate() {
            let k = key(p);
            order[fill[k]] = idx;
            fill[k] += 1;
        }
        Self {
            origin: lo,
            cell,
            nx,
            ny,
            starts,
            order,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn coord(&self, v: f64, o: f64, n: usize) -> isize {
        let c = ((v - o) / self.cell).floor();
        c.clamp(-1.0, n as f64) as isize
    }

    fn bucket(&self, i: usize, j: usize) -> &[usize] {
        let k = j * self.nx + i;
        &self.order[self.starts[k]..self.starts[k + 1]]
    }

    /// Calls `f` with every index whose point lies strictly within `r` of `p`.
    pub fn for_each_within(&self, points: &[Point], p: Point, r: f64, mut f: impl FnMut(usize)) {
        let r2 = r * r;
        let i0 = self.coord(p.x - r, self.origin.x, self.nx).max(0) as usize;
        let i1 = self
            .coord(p.x + r, self.origin.x, self.nx)
            .min(self.nx as isize - 1);
        let j0 = self.coord(p.y - r, self.origin.y, self.ny).max(0) as usize;
        let j1 = self
            .coord(p.y + r, self.origin.y, self.ny)
            .min(self.ny as isize - 1);
        if i1 < 0 || j1 < 0 {
            return;
        }
        for j in j0..=j1 as usize {
            for i in i0..=i1 as usize {
                for &k in self.bucket(i, j) {
                    if points[k].dist_sq(p) < r2 {
                        f(k);
                    }
                }
            }
        }
    }

    /// Number of points strictly within `r` of `p`; runs of buckets wholly
    /// inside the ball are counted from the bucket offsets.
    pub fn count_within(&self, points: &[Point], p: Point, r: f64) -> usize {
        let r2 = r * r;
        let i0 = self.coord(p.x - r, self.origin.x, self.nx).max(0) as usize;
        let i1 = self
            .coord(p.x + r, self.origin.x, self.nx)
            .min(self.nx as isize - 1);
        let j0 = self.coord(p.y - r, self.origin.y, self.ny).max(0) as usize;
        let j1 = self
            .coord(p.y + r, self.origin.y, self.ny)
            .min(self.ny as isize - 1);
        if i1 < 0 || j1 < 0 {
            return 0;
        }
        let i1 = i1 as usize;
        let mut n = 0;
        let partial = |i: usize, j: usize| {
            self.bucket(i, j)
                .iter()
                .filter(|&&k| points[k].dist_sq(p) < r2)
                .count()
        };
        for j in j0..=j1 as usize {
            let (y0, y1) = (
                self.origin.y + j as f64 * self.cell,
                self.origin.y + (j + 1) as f64 * self.cell,
            );
            let fy = (p.y - y0).abs().max((p.y - y1).abs());
            // the last row and column also hold clamped points beyond the grid
            let slack = r2 * (1.0 - 1e-12) - fy * fy;
            let (mut ia, mut ib) = (1usize, 0usize);
            if j + 1 < self.ny && slack > 0.0 {
                let half = slack.sqrt();
                let lo = ((p.x - half - self.origin.x) / self.cell)
                    .ceil()
                    .max(i0 as f64);
                let hi = ((p.x + half - self.origin.x) / self.cell).floor() - 1.0;
                let hi = hi.min(i1 as f64).min(self.nx as f64 - 2.0);
                if hi >= lo {
                    (ia, ib) = (lo as usize, hi as usize);
                }
            }
            if ia <= ib {
                let row = j * self.nx;
                n += self.starts[row + ib + 1] - self.starts[row + ia];
                for i in (i0..ia).chain(ib + 1..=i1) {
                    n += partial(i, j);
                }
            } else {
                for i in i0..=i1 {
                    n += partial(i, j);
                }
            }
        }
        n
    }

    fn home(&self, p: Point) -> (isize, isize) {
        (
            self.coord(p.x, self.origin.x, self.nx),
            self.coord(p.y, self.origin.y, self.ny),
        )
    }

    /// Indices in the buckets at Chebyshev distance exactly `ring` from `home`.
    fn ring(&self, home: (isize, isize), ring: isize, out: &mut Vec<usize>) {
        let (ci, cj) = home;
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let visit = |i: isize, j: isize, out: &mut Vec<usize>| {
            if i >= 0 && j >= 0 && i < nx && j < ny {
                out.extend_from_slice(self.bucket(i as usize, j as usize));
            }
        };
        if ring == 0 {
            visit(ci, cj, out);
            return;
        }
        for i in (ci - ring)..=(ci + ring) {
            visit(i, cj - ring, out);
            visit(i, cj + ring, out);
        }
        for j in (cj - ring + 1)..=(cj + ring - 1) {
            visit(ci - ring, j, out);
            visit(ci + ring, j, out);
        }
    }

    fn max_ring(&self) -> isize {
        (self.nx.max(self.ny) + 1) as isize
    }

    /// Index of the nearest point; exact distance ties go to the lexicographically
    /// smallest coordinates.
    pub fn nearest(&self, points: &[Point], p: Point) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        let home = self.home(p);
        let mut best: Option<(f64, usize)> = None;
        let mut buf = Vec::new();
        for k in 0..=self.max_ring() {
            if let Some((d2, _)) = best {
                // unseen points sit at least (k - 1) cells away
                let reach = (k - 1).max(0) as f64 * self.cell;
                if reach * reach > d2 {
                    break;
                }
            }
            buf.clear();
            self.ring(home, k, &mut buf);
            for &idx in &buf {
                let d2 = points[idx].dist_sq(p);
                let better = match best {
                    None => true,
                    Some((bd, bi)) => {
                        d2 < bd
                            || (d2 == bd
                                && (points[idx].x, points[idx].y) < (points[bi].x, points[bi].y))
                    }
                };
                if better {
                    best = Some((d2, idx));
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

/// Fixed-radius neighbor lists: `j` is listed for `i` iff `0 < |x_i - x_j| < r`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    radius: f64,
    lists: Adjacency,
}

impl NeighborIndex {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Neighbor indices (positions in the cloud), ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.lists.neighbors(i)
    }

    /// Number of cloud points in the open ball `B_r(x_i)`, including `x_i`.
    pub fn ball_count(&self, i: usize) -> usize {
        self.neighbors(i).len() + 1
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.lists
    }

    pub fn neighbor_ids<'a>(
        &'a self,
        cloud: &'a PointCloud,
        i: usize,
    ) -> impl Iterator<Item = PointId> + 'a {
        self.neighbors(i).iter().map(move |&j| cloud.id(j))
    }
}

pub fn build_neighbor_index(
    cloud: &PointCloud,
    radius: f64,
) -> Result<NeighborIndex, GeometryError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(GeometryError::BadRadius(radius));
    }
    let pts = cloud.points();
    let grid = CellList::new(pts, radius);
    let lists: Vec<Vec<usize>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut l = Vec::new();
            grid.for_each_within(pts, pts[i], radius, |j| {
                if j != i {
                    l.push(j)
                }
            });
            l
        })
        .collect();
    Ok(NeighborIndex {
        radius,
        lists: Adjacency::from_lists(lists),
    })
}

/// Ball counts `#(cloud ∩ B_r(x))` including `x` itself, for every cloud point.
pub fn ball_counts(cloud: &PointCloud, radius: f64) -> Result<Vec<usize>, GeometryError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(GeometryError::BadRadius(radius));
    }
    let pts = cloud.points();
    let grid = CellList::new(pts, radius / 8.0);
    Ok(pts
        .par_iter()
        .map(|&p| grid.count_within(pts, p, radius))
        .collect())
}

/// A convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn from_window(w: &Window) -> Self {
        Self::new(w.corners().to_vec())
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    /// Area centroid (vertex mean for degenerate polygons).
    pub fn centroid(&self) -> Point {
        let v = &self.vertices;
        if v.is_empty() {
            return Point::ORIGIN;
        }
        let o = v[0];
        let mut a = 0.0;
        let mut c = Point::ORIGIN;
        for k in 1..v.len().saturating_sub(1) {
            let (p, q) = (v[k] - o, v[k + 1] - o);
            let w = 0.5 * p.cross(q);
            a += w;
            c = c + (p + q) * (w / 3.0);
        }
        if a.abs() <= f64::MIN_POSITIVE {
            let s = v.iter().fold(Point::ORIGIN, |s, &p| s + p);
            return s * (1.0 / v.len() as f64);
        }
        o + c * (1.0 / a)
    }

    pub fn diameter(&self) -> f64 {
        let v = &self.vertices;
        let mut d2: f64 = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                d2 = d2.max(v[i].dist_sq(v[j]));
            }
        }
        d2.sqrt()
    }

    /// Radius of the largest inscribed disc (Chebyshev center LP solved by
    /// enumerating triples of edge constraints).
    pub fn in_radius(&self) -> f64 {
        self.chebyshev_center().map_or(0.0, |(_, r)| r)
    }

    pub fn chebyshev_center(&self) -> Option<(Point, f64)> {
        let v = &self.vertices;
        let m = v.len();
        if m < 3 {
            return None;
        }
        // constraints n_k . c + r <= b_k
        let cons: Vec<(Point, f64)> = (0..m)
            .filter_map(|k| {
                let e = v[(k + 1) % m] - v[k];
                let len = e.norm();
                (len > 0.0).then(|| {
                    let n = Point::new(e.y / len, -e.x / len);
                    (n, n.dot(v[k]))
                })
            })
            .collect();
        let scale = self.diameter().max(f64::MIN_POSITIVE);
        let tol = 1e-10 * scale;
        let mut best: Option<(Point, f64)> = None;
        let q = cons.len();
        for a in 0..q {
            for b in a + 1..q {
                for c in b + 1..q {
                    let Some((x, r)) = solve3(cons[a], cons[b], cons[c]) else {
                        continue;
                    };
                    if r < -tol || best.is_some_and(|(_, br)| r <= br) {
                        continue;
                    }
                    if cons.iter().all(|&(n, bk)| n.dot(x) + r <= bk + tol) {
                        best = Some((x, r.max(0.0)));
                    }
                }
            }
        }
        best
    }

    /// Closed containment with an absolute tolerance.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let v = &self.vertices;
        let m = v.len();
        if m < 3 {
            return false;
        }
        (0..m).all(|k| {
            let e = v[(k + 1) % m] - v[k];
            let len = e.norm();
            len == 0.0 || e.cross(p - v[k]) / len >= -tol
        })
    }

    /// Part of the polygon with `n . q <= b`.
    pub fn clip_half_plane(&self, n: Point, b: f64) -> ConvexPolygon {
        let v = &self.vertices;
        let m = v.len();
        let mut out = Vec::with_capacity(m + 1);
        for k in 0..m {
            let (a, c) = (v[k], v[(k + 1) % m]);
            let (sa, sc) = (n.dot(a) - b, n.dot(c) - b);
            if sa <= 0.0 {
                out.push(a);
            }
            if (sa <= 0.0) != (sc <= 0.0) {
                out.push(a + (c - a) * (sa / (sa - sc)));
            }
        }
        ConvexPolygon::new(out)
    }

    pub fn clip_to_window(&self, w: &Window) -> ConvexPolygon {
        self.clip_to_polygon(&ConvexPolygon::from_window(w))
    }

    /// Intersection with another convex polygon (counter-clockwise).
    pub fn clip_to_polygon(&self, other: &ConvexPolygon) -> ConvexPolygon {
        let cs = &other.vertices;
        let mut poly = self.clone();
        for k in 0..cs.len() {
            if poly.is_empty() {
                break;
            }
            let e = cs[(k + 1) % cs.len()] - cs[k];
            let n = Point::new(e.y, -e.x);
            poly = poly.clip_half_plane(n, n.dot(cs[k]));
        }
        poly
    }
}

/// Convex hull by monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> ConvexPolygon {
    let mut p = points.to_vec();
    p.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite points"));
    p.dedup();
    if p.len() < 3 {
        return ConvexPolygon::new(p);
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if (b - a).cross(q - a) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(q);
        }
        hull.pop();
    }
    ConvexPolygon::new(hull)
}

fn shoelace(v: &[Point]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let o = v[0];
    let mut s = 0.0;
    for k in 1..v.len() - 1 {
        s += (v[k] - o).cross(v[k + 1] - o);
    }
    0.5 * s
}

fn solve3(a: (Point, f64), b: (Point, f64), c: (Point, f64)) -> Option<(Point, f64)> {
    let m = [
        [a.0.x, a.0.y, 1.0],
        [b.0.x, b.0.y, 1.0],
        [c.0.x, c.0.y, 1.0],
    ];
    let rhs = [a.1, b.1, c.1];
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut sol = [0.0; 3];
    for (col, s) in sol.iter_mut().enumerate() {
        let mut mm = m;
        for row in 0..3 {
            mm[row][col] = rhs[row];
        }
        *s = det(&mm) / d;
    }
    Some((Point::new(sol[0], sol[1]), sol[2]))
}

/// What lies on the other side of a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    /// Bisector with the generator at this cloud index.
    Neighbor(usize),
    /// Side `k` of the clip window (counter-clockwise from the local bottom).
    Boundary(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoronoiCell {
    pub polygon: ConvexPolygon,
    /// `labels[k]` describes the edge from vertex `k` to vertex `k + 1`.
    pub labels: Vec<EdgeLabel>,
    pub area: f64,
    pub in_radius: f64,
    pub diameter: f64,
    pub touches_boundary: bool,
}

impl VoronoiCell {
    pub fn touches_side(&self, side: u8) -> bool {
        self.labels.contains(&EdgeLabel::Boundary(side))
    }
}

#[derive(Debug, Clone)]
pub struct VoronoiDiagram {
    clip: Window,
    cells: Vec<VoronoiCell>,
    adjacency: Adjacency,
    locator: CellList,
    generators: Vec<Point>,
    ids: Vec<PointId>,
}

impl VoronoiDiagram {
    pub fn clip(&self) -> &Window {
        &self.clip
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[VoronoiCell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &VoronoiCell {
        &self.cells[i]
    }

    /// Pairs of generators whose cells share an edge of positive length.
    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Same as [`Self::adjacency`] but refuses inputs without a triangulation.
    pub fn delaunay(&self) -> Result<&Adjacency, GeometryError> {
        let g = &self.generators;
        let nondegenerate = g.len() >= 3 && {
            let (a, b) = (g[0], g.iter().copied().find(|&p| p != g[0]));
            b.is_some_and(|b| g.iter().any(|&p| (b - a).cross(p - a) != 0.0))
        };
        if nondegenerate {
            Ok(&self.adjacency)
        } else {
            Err(GeometryError::DegenerateDelaunay(g.len()))
        }
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency.contains(i, j)
    }

    pub fn total_area(&self) -> f64 {
        self.cells.iter().map(|c| c.area).sum()
    }

    /// Generator whose cell contains `p`: nearest generator, lexicographic tie-break.
    /// `None` outside the clip window.
    pub fn locate(&self, p: Point) -> Option<usize> {
        let tol = 1e-12 * self.clip.width.max(self.clip.height);
        if !self.clip.contains_closed(p, tol) {
            return None;
        }
        self.locator.nearest(&self.generators, p)
    }

    pub fn generators(&self) -> &[Point] {
        &self.generators
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct CellOut<'a> {
            id: PointId,
            generator: Point,
            vertices: &'a [Point],
            area: f64,
            in_radius: f64,
            diameter: f64,
            touches_boundary: bool,
            neighbors: Vec<PointId>,
        }
        let cells: Vec<CellOut> = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| CellOut {
                id: self.ids[i],
                generator: self.generators[i],
                vertices: &c.polygon.vertices,
                area: c.area,
                in_radius: c.in_radius,
                diameter: c.diameter,
                touches_boundary: c.touches_boundary,
                neighbors: self
                    .adjacency
                    .neighbors(i)
                    .iter()
                    .map(|&j| self.ids[j])
                    .collect(),
            })
            .collect();
        serde_json::json!({ "clip": self.clip, "cells": cells })
    }
}

pub fn voronoi_diagram(cloud: &PointCloud, clip: &Window) -> Result<VoronoiDiagram, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let pts = cloud.points();
    let n = pts.len();
    let (lo, hi) = clip.bounding_box();
    let spacing = ((hi.x - lo.x) * (hi.y - lo.y) / n as f64).sqrt();
    let grid = CellList::new(pts, (1.5 * spacing).max(f64::MIN_POSITIVE));
    let scale = clip.width.max(clip.height);

    let cells: Vec<VoronoiCell> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            build_cell(pts, i, clip, &grid, scale, buf)
        })
        .collect();

    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, c) in cells.iter().enumerate() {
        for l in &c.labels {
            if let EdgeLabel::Neighbor(j) = *l {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
    }
    Ok(VoronoiDiagram {
        clip: *clip,
        cells,
        adjacency: Adjacency::from_lists(lists),
        locator: grid,
        generators: pts.to_vec(),
        ids: cloud.ids().to_vec(),
    })
}

fn build_cell(
    pts: &[Point],
    i: usize,
    clip: &Window,
    grid: &CellList,
    scale: f64,
    buf: &mut Vec<usize>,
) -> VoronoiCell {
    let g = pts[i];
    // work relative to the generator for accuracy
    let mut verts: Vec<Point> = clip.corners().iter().map(|&c| c - g).collect();
    let mut labels: Vec<EdgeLabel> = (0..4).map(EdgeLabel::Boundary).collect();
    let snap = 1e-12 * scale;
    let home = grid.home(g);
    let reach = |v: &[Point]| v.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let mut rmax = reach(&verts);

    for k in 0..=grid.max_ring() {
        if verts.len() < 3 {
            break;
        }
        let unseen = (k - 1).max(0) as f64 * grid.cell_size();
        if k >= 1 && unseen >= 2.0 * rmax {
            break;
        }
        buf.clear();
        grid.ring(home, k, buf);
        buf.retain(|&j| j != i);
        buf.sort_by(|&a, &b| {
            pts[a]
                .dist_sq(g)
                .partial_cmp(&pts[b].dist_sq(g))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in buf.iter() {
            let d = pts[j] - g;
            if d.norm() >= 2.0 * rmax {
                continue;
            }
            if clip_labeled(&mut verts, &mut labels, d, 0.5 * d.norm_sq(), j, snap) {
                rmax = reach(&verts);
            }
            if verts.len() < 3 {
                break;
            }
        }
    }

    if verts.len() < 3 {
        return VoronoiCell {
            polygon: ConvexPolygon::default(),
            labels: Vec::new(),
            area: 0.0,
            in_radius: 0.0,
            diameter: 0.0,
            touches_boundary: true,
        };
    }
    let polygon = ConvexPolygon::new(verts.iter().map(|&v| v + g).collect());
    let local = ConvexPolygon::new(verts);
    VoronoiCell {
        area: local.area(),
        in_radius: local.in_radius(),
        diameter: local.diameter(),
        touches_boundary: labels.iter().any(|l| matches!(l, EdgeLabel::Boundary(_))),
        polygon,
        labels,
    }
}

/// Clips the labeled polygon by `n . q <= b`; returns whether anything changed.
fn clip_labeled(
    verts: &mut Vec<Point>,
    labels: &mut Vec<EdgeLabel>,
    n: Point,
    b: f64,
    j: usize,
    snap: f64,
) -> bool {
    let m = verts.len();
    let s: Vec<f64> = verts.iter().map(|v| n.dot(*v) - b).collect();
    if s.iter().all(|&x| x <= 0.0) {
        return false;
    }
    let mut nv = Vec::with_capacity(m + 1);
    let mut nl = Vec::with_capacity(m + 1);
    for k in 0..m {
        let k1 = (k + 1) % m;
        let (a, c) = (verts[k], verts[k1]);
        let (sa, sc) = (s[k], s[k1]);
        if sa <= 0.0 {
            nv.push(a);
            nl.push(labels[k]);
            if sc > 0.0 {
                nv.push(a + (c - a) * (sa / (sa - sc)));
                nl.push(EdgeLabel::Neighbor(j));
            }
        } else if sc <= 0.0 {
            nv.push(a + (c - a) * (sa / (sa - sc)));
            nl.push(labels[k]);
        }
    }
    // drop zero-length edges
    let mut k = 0;
    while nv.len() >= 2 && k < nv.len() {
        let k1 = (k + 1) % nv.len();
        if nv[k].dist(nv[k1]) <= snap {
            nv.remove(k1);
            let label = nl.remove(k1);
            let at = if k1 < k { k - 1 } else { k };
            nl[at] = label;
        } else {
            k += 1;
        }
    }
    *verts = nv;
    *labels = nl;
    true
}

/// Membership in the regular sub-cluster for parameters `(alpha, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularMask {
    pub alpha: f64,
    pub lambda: f64,
    mask: Vec<bool>,
}

impl RegularMask {
    pub fn from_flags(alpha: f64, lambda: f64, mask: Vec<bool>) -> Self {
        Self {
            alpha,
            lambda,
            mask,
        }
    }

    pub fn is_regular(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Points whose cell has in-radius `> alpha`, diameter `< 1/alpha`, whose
/// `lambda`-ball holds at most `lambda^2 / alpha` points, and whose cell stays
/// clear of the clip boundary.
pub fn regular_subcluster(
    cloud: &PointCloud,
    diagram: &VoronoiDiagram,
    alpha: f64,
    lambda: f64,
) -> Result<RegularMask, GeometryError> {
    regular_subcluster_scaled(cloud, diagram, 1.0, alpha, lambda)
}

/// Regularity of the cloud rescaled by `1 / scale`, evaluated in place.
pub fn regular_subcluster_scaled(
    cloud: &PointCloud,
    diagram: &VoronoiDiagram,
    scale: f64,
    alpha: f64,
    lambda: f64,
) -> Result<RegularMask, GeometryError> {
    if !(alpha > 0.0
        && lambda > 0.0
        && alpha.is_finite()
        && lambda.is_finite()
        && scale > 0.0
        && scale.is_finite())
    {
        return Err(GeometryError::BadRegularity { alpha, lambda });
    }
    if diagram.len() != cloud.len() {
        return Err(GeometryError::DiagramMismatch {
            cells: diagram.len(),
            points: cloud.len(),
        });
    }
    let counts = ball_counts(cloud, lambda * scale)?;
    Ok(regular_mask_from_counts(
        diagram, &counts, scale, alpha, lambda,
    ))
}

/// Regularity from precomputed ball counts at radius `lambda * scale`.
pub fn regular_mask_from_counts(
    diagram: &VoronoiDiagram,
    counts: &[usize],
    scale: f64,
    alpha: f64,
    lambda: f64,
) -> RegularMask {
    let bound = lambda * lambda / alpha;
    let mask = diagram
        .cells()
        .iter()
        .zip(counts)
        .map(|(c, &k)| {
            !c.touches_boundary
                && c.in_radius > alpha * scale
                && c.diameter < scale / alpha
                && (k as f64) <= bound
        })
        .collect();
    RegularMask {
        alpha,
        lambda,
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{
        lattice_cloud, sample_poisson, transform_cloud, SamplingSpec, Transform,
    };
    use crate::RandomStream;
    use proptest::prelude::*;

    fn poisson(gamma: f64, side: f64, seed: u64) -> PointCloud {
        let w = Window::square(Point::ORIGIN, side).unwrap();
        sample_poisson(&SamplingSpec::new(w, gamma, 0.0, RandomStream::new(seed))).unwrap()
    }

    fn brute(cloud: &PointCloud, r: f64) -> Vec<Vec<usize>> {
        let p = cloud.points();
        (0..p.len())
            .map(|i| {
                (0..p.len())
                    .filter(|&j| j != i && p[i].dist(p[j]) < r)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_point_has_no_neighbors() {
        let c = PointCloud::from_points(vec![Point::ORIGIN], Window::unit()).unwrap();
        let idx = build_neighbor_index(&c, 1.0).unwrap();
        assert!(idx.neighbors(0).is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let w = Window::square(Point::ORIGIN, 2.0).unwrap();
        let c =
            PointCloud::from_points(vec![Point::new(0.0, 0.0), Point::new(0.5, 0.0)], w).unwrap();
        let idx = build_neighbor_index(&c, 1.0).unwrap();
        assert_eq!(idx.neighbors(0), &[1]);
        assert_eq!(idx.neighbors(1), &[0]);
        let idx = build_neighbor_index(&c, 0.4).unwrap();
        assert!(idx.neighbors(0).is_empty() && idx.neighbors(1).is_empty());
        let idx = build_neighbor_index(&c, 0.5).unwrap();
        assert!(idx.neighbors(0).is_empty());
    }

    #[test]
    fn neighbor_index_matches_brute_force() {
        let c = poisson(500.0 / 16.0, 4.0, 11);
        let idx = build_neighbor_index(&c, 0.3).unwrap();
        for (i, l) in brute(&c, 0.3).iter().enumerate() {
            assert_eq!(idx.neighbors(i), l.as_slice());
        }
        assert!(idx.adjacency().is_symmetric());
    }

    #[test]
    fn one_point_owns_the_clip() {
        let w = Window::square(Point::ORIGIN, 3.0).unwrap();
        let c = PointCloud::from_points(vec![Point::new(0.2, -0.4)], w).unwrap();
        let d = voronoi_diagram(&c, &w).unwrap();
        assert!((d.cell(0).area - 9.0).abs() < 1e-12);
        assert!(d.cell(0).touches_boundary);
        assert!(d.delaunay().is_err());
    }

    #[test]
    fn two_points_split_by_bisector() {
        let w = Window::square(Point::ORIGIN, 2.0).unwrap();
        let c =
            PointCloud::from_points(vec![Point::new(-0.5, 0.0), Point::new(0.3, 0.0)], w).unwrap();
        let d = voronoi_diagram(&c, &w).unwrap();
        // bisector at x = -0.1
        assert!((d.cell(0).area - 0.9 * 2.0).abs() < 1e-12);
        assert!((d.cell(1).area - 1.1 * 2.0).abs() < 1e-12);
        assert!(d.are_neighbors(0, 1));
    }

    #[test]
    fn lattice_interior_cell() {
        let w = Window::square(Point::ORIGIN, 8.0).unwrap();
        let c = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        let d = voronoi_diagram(&c, &w).unwrap();
        let i = c
            .points()
            .iter()
            .position(|p| *p == Point::new(0.5, 0.5))
            .unwrap();
        let cell = d.cell(i);
        assert!((cell.area - 1.0).abs() < 1e-12);
        assert!((cell.in_radius - 0.5).abs() < 1e-10);
        assert!((cell.diameter - 2f64.sqrt()).abs() < 1e-12);
        assert!(!cell.touches_boundary);
        // four axis neighbors, diagonal contacts are single vertices
        assert_eq!(d.adjacency().neighbors(i).len(), 4);
    }

    #[test]
    fn lattice_regularity_examples() {
        let w = Window::square(Point::ORIGIN, 10.0).unwrap();
        let c = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        let d = voronoi_diagram(&c, &w).unwrap();
        let ok = regular_subcluster(&c, &d, 0.2, 1.2).unwrap();
        let bad = regular_subcluster(&c, &d, 0.4, 1.2).unwrap();
        for i in 0..c.len() {
            let interior = !d.cell(i).touches_boundary;
            assert_eq!(ok.is_regular(i), interior);
            assert!(!bad.is_regular(i));
        }
    }

    #[test]
    fn regular_mask_monotone_in_alpha() {
        let c = poisson(1.0, 30.0, 5);
        let d = voronoi_diagram(&c, c.window()).unwrap();
        let lo = regular_subcluster(&c, &d, 0.05, 3.0).unwrap();
        let hi = regular_subcluster(&c, &d, 0.15, 3.0).unwrap();
        for i in 0..c.len() {
            assert!(!hi.is_regular(i) || lo.is_regular(i));
        }
        assert!(hi.count() < lo.count());
    }

    #[test]
    fn poisson_diagram_invariants() {
        let c = poisson(1.0, 25.0, 3);
        let d = voronoi_diagram(&c, c.window()).unwrap();
        let clip_area = c.window().area();
        assert!((d.total_area() - clip_area).abs() <= 1e-9 * clip_area);
        assert!(d.adjacency().is_symmetric());
        for (i, cell) in d.cells().iter().enumerate() {
            assert!(cell.in_radius <= 0.5 * cell.diameter + 1e-12);
            assert!(cell.polygon.contains(c.point(i), 1e-9));
        }
    }

    #[test]
    fn rotation_preserves_cell_areas() {
        let c = poisson(2.0, 10.0, 8);
        let r = transform_cloud(&c, Transform::Rotate(0.9)).unwrap();
        let d0 = voronoi_diagram(&c, c.window()).unwrap();
        let d1 = voronoi_diagram(&r, r.window()).unwrap();
        for i in 0..c.len() {
            let (a, b) = (d0.cell(i).area, d1.cell(i).area);
            assert!((a - b).abs() <= 1e-9 * a.max(1e-3), "cell {i}: {a} vs {b}");
        }
    }

    #[test]
    fn locate_matches_nearest() {
        let c = poisson(3.0, 6.0, 2);
        let d = voronoi_diagram(&c, c.window()).unwrap();
        let mut rng = RandomStream::new(99).rng();
        for _ in 0..500 {
            let q = Point::new(rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0));
            let got = d.locate(q).unwrap();
            let want = (0..c.len())
                .min_by(|&a, &b| {
                    c.point(a)
                        .dist_sq(q)
                        .partial_cmp(&c.point(b).dist_sq(q))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(c.point(got).dist_sq(q), c.point(want).dist_sq(q));
            assert!(d.cell(got).polygon.contains(q, 1e-9));
        }
        assert!(d.locate(Point::new(10.0, 0.0)).is_none());
    }

    #[test]
    fn locate_breaks_ties_lexicographically() {
        let w = Window::square(Point::ORIGIN, 4.0).unwrap();
        let c =
            PointCloud::from_points(vec![Point::new(1.0, 0.0), Point::new(-1.0, 0.0)], w).unwrap();
        let d = voronoi_diagram(&c, &w).unwrap();
        assert_eq!(d.locate(Point::new(0.0, 0.7)), Some(1));
    }

    #[test]
    fn chebyshev_center_of_triangle() {
        // 3-4-5 right triangle has in-radius 1
        let t = ConvexPolygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 3.0),
        ]);
        let (c, r) = t.chebyshev_center().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(c.dist(Point::new(1.0, 1.0)) < 1e-12);
        assert!((t.area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.5, 0.5),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
            Point::new(0.5, 0.0),
        ];
        let h = convex_hull(&pts);
        assert_eq!(h.vertices.len(), 4);
        assert!((h.area() - 1.0).abs() < 1e-15);
        assert!(h.centroid().dist(Point::new(0.5, 0.5)) < 1e-15);
    }

    #[test]
    fn polygon_clip_to_window() {
        let sq = ConvexPolygon::from_window(&Window::square(Point::ORIGIN, 2.0).unwrap());
        let half = sq.clip_to_window(&Window::from_bounds(0.0, -5.0, 5.0, 5.0).unwrap());
        assert!((half.area() - 2.0).abs() < 1e-12);
        assert!(half.centroid().dist(Point::new(0.5, 0.0)) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_ball_counts_match_brute_force(seed in 0u64..10_000, r in 0.05f64..3.0) {
            let c = poisson(40.0, 4.0, seed);
            let counts = ball_counts(&c, r).unwrap();
            let b = brute(&c, r);
            for i in 0..c.len() {
                prop_assert_eq!(counts[i], b[i].len() + 1);
            }
        }

        #[test]
        fn prop_neighbor_index_is_brute_force(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..300),
            r in 0.05f64..3.0,
        ) {
            let w = Window::square(Point::ORIGIN, 10.0).unwrap();
            let mut v: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            v.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
            v.dedup();
            let c = PointCloud::from_points(v, w).unwrap();
            let idx = build_neighbor_index(&c, r).unwrap();
            for (i, l) in brute(&c, r).iter().enumerate() {
                prop_assert_eq!(idx.neighbors(i), l.as_slice());
            }
        }

        #[test]
        fn prop_voronoi_area_and_inradius(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..120),
            angle in 0.0f64..3.2,
        ) {
            let w = Window::rotated(Point::new(0.3, -0.2), 16.0, 15.0, angle).unwrap();
            let mut v: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            v.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
            v.dedup();
            let c = PointCloud::from_points(v, w).unwrap();
            let d = voronoi_diagram(&c, &w).unwrap();
            prop_assert!((d.total_area() - w.area()).abs() <= 1e-9 * w.area());
            prop_assert!(d.adjacency().is_symmetric());
            for (i, cell) in d.cells().iter().enumerate() {
                prop_assert!(cell.in_radius <= 0.5 * cell.diameter + 1e-12);
                prop_assert!(cell.polygon.contains(c.point(i), 1e-9));
            }
        }
    }
}
