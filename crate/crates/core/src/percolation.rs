//! Block percolation, disjoint crossings and regular t-grids.
//!
//! Lengths follow the cloud's own units unless a function says otherwise. Grid
//! assembly takes the cloud at scale `eps` and classifies blocks on the copy
//! rescaled by `1 / eps`.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    ball_counts, voronoi_diagram, CellList, EdgeLabel, GeometryError, VoronoiDiagram,
};
use crate::model::{ModelError, Point, PointCloud, PointId, RandomStream, Window};
use crate::sampling::{transform_cloud, SamplingError, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PercolationError {
    #[error("block multiple must be an integer >= 10, got {0}")]
    BlockMultiple(u32),
    #[error("alpha, lambda must be positive, got alpha={alpha}, lambda={lambda}")]
    BadParameters { alpha: f64, lambda: f64 },
    #[error("block rectangle {0:?} is not covered by the field")]
    RectOutsideField(BlockRect),
    #[error("block ({0}, {1}) on the path is not good")]
    BadBlock(usize, usize),
    #[error("path blocks ({0}, {1}) and ({2}, {3}) are not edge-adjacent")]
    NotAdjacent(usize, usize, usize, usize),
    #[error("polyline leaves the clip window near ({x}, {y})")]
    LeavesClip { x: f64, y: f64 },
    #[error("cell of point {id} crossed by the path is not regular")]
    IrregularCell { id: PointId },
    #[error("{which} path does not separate rectangle {rect:?}")]
    NotSeparating { which: &'static str, rect: Window },
    #[error("joined path is disconnected between points {0} and {1}")]
    Disconnected(PointId, PointId),
    #[error("cloud window does not contain the working square enlarged by {0}")]
    InsufficientPadding(f64),
    #[error("grid parameters invalid: {0}")]
    InvalidGrid(String),
    #[error("unknown point id {0} in grid file")]
    UnknownId(PointId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Per-block outcome of the three conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockStatus {
    /// Every sub-square count lies in `[1, lambda^2 / (8 alpha)]`.
    pub counts: bool,
    /// All pairs at least `2 alpha` apart.
    pub spacing: bool,
    /// All points at least `2 alpha` from the block boundary.
    pub margin: bool,
    /// Block lies inside the cloud window.
    pub covered: bool,
}

impl BlockStatus {
    pub fn good(&self) -> bool {
        self.counts && self.spacing && self.margin && self.covered
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub alpha: f64,
    pub lambda: f64,
    /// Block side is `big_lambda * lambda`.
    pub big_lambda: u32,
}

/// Good/bad labels on a rectangular lattice of square blocks; `(i, j)` is
/// column `i` from the left and row `j` from the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockField {
    pub origin: Point,
    pub side: f64,
    pub nx: usize,
    pub ny: usize,
    good: Vec<bool>,
    status: Option<Vec<BlockStatus>>,
    pub params: Option<BlockParams>,
}

impl BlockField {
    pub fn from_flags(nx: usize, ny: usize, good: Vec<bool>) -> Self {
        assert_eq!(good.len(), nx * ny, "one flag per block");
        Self {
            origin: Point::ORIGIN,
            side: 1.0,
            nx,
            ny,
            good,
            status: None,
            params: None,
        }
    }

    pub fn all(nx: usize, ny: usize, good: bool) -> Self {
        Self::from_flags(nx, ny, vec![good; nx * ny])
    }

    /// Independent Bernoulli(`p`) labels drawn in row-major order.
    pub fn bernoulli(nx: usize, ny: usize, p: f64, stream: &RandomStream) -> Self {
        let mut rng = stream.rng();
        Self::from_flags(nx, ny, (0..nx * ny).map(|_| rng.bernoulli(p)).collect())
    }

    pub fn is_good(&self, i: usize, j: usize) -> bool {
        self.good[j * self.nx + i]
    }

    pub fn status(&self, i: usize, j: usize) -> Option<BlockStatus> {
        self.status.as_ref().map(|s| s[j * self.nx + i])
    }

    pub fn good_fraction(&self) -> f64 {
        self.good.iter().filter(|&&g| g).count() as f64 / self.good.len().max(1) as f64
    }

    pub fn flags(&self) -> &[bool] {
        &self.good
    }

    pub fn block_window(&self, i: usize, j: usize) -> Window {
        let lo = self.origin + Point::new(i as f64 * self.side, j as f64 * self.side);
        Window::from_bounds(lo.x, lo.y, lo.x + self.side, lo.y + self.side).expect("positive side")
    }

    pub fn center(&self, i: usize, j: usize) -> Point {
        self.origin + Point::new((i as f64 + 0.5) * self.side, (j as f64 + 0.5) * self.side)
    }

    pub fn full_rect(&self) -> BlockRect {
        BlockRect {
            i0: 0,
            j0: 0,
            nx: self.nx,
            ny: self.ny,
        }
    }
}

/// Blocks of side `big_lambda * lambda` tiling `region` from its lower-left corner.
pub fn block_field(
    cloud: &PointCloud,
    alpha: f64,
    lambda: f64,
    big_lambda: u32,
    region: &Window,
) -> Result<BlockField, PercolationError> {
    if big_lambda < 10 {
        return Err(PercolationError::BlockMultiple(big_lambda));
    }
    if !(alpha > 0.0 && lambda > 0.0 && alpha.is_finite() && lambda.is_finite()) {
        return Err(PercolationError::BadParameters { alpha, lambda });
    }
    let side = big_lambda as f64 * lambda;
    let (lo, hi) = region.bounding_box();
    let nx = (((hi.x - lo.x) / side) - 1e-9).ceil().max(1.0) as usize;
    let ny = (((hi.y - lo.y) / side) - 1e-9).ceil().max(1.0) as usize;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    for (k, p) in cloud.points().iter().enumerate() {
        let fx = ((p.x - lo.x) / side).floor();
        let fy = ((p.y - lo.y) / side).floor();
        if fx >= 0.0 && fy >= 0.0 && (fx as usize) < nx && (fy as usize) < ny {
            members[fy as usize * nx + fx as usize].push(k);
        }
    }
    let pts = cloud.points();
    let sub_max = lambda * lambda / (8.0 * alpha);
    let bl = big_lambda as usize;
    let status: Vec<BlockStatus> = members
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let (i, j) = (b % nx, b / nx);
            let blo = lo + Point::new(i as f64 * side, j as f64 * side);
            let win =
                Window::from_bounds(blo.x, blo.y, blo.x + side, blo.y + side).expect("positive");
            let covered = cloud.window().contains_enlarged(&win, 0.0);
            let mut sub = vec![0usize; bl * bl];
            for &k in idx {
                let sx = (((pts[k].x - blo.x) / lambda) as usize).min(bl - 1);
                let sy = (((pts[k].y - blo.y) / lambda) as usize).min(bl - 1);
                sub[sy * bl + sx] += 1;
            }
            let counts = sub.iter().all(|&c| c >= 1 && (c as f64) <= sub_max);
            let margin = idx
                .iter()
                .all(|&k| win.dist_to_boundary(pts[k]) >= 2.0 * alpha);
            let spacing = min_spacing_at_least(pts, idx, 2.0 * alpha);
            BlockStatus {
                counts,
                spacing,
                margin,
                covered,
            }
        })
        .collect();
    Ok(BlockField {
        origin: lo,
        side,
        nx,
        ny,
        good: status.iter().map(BlockStatus::good).collect(),
        status: Some(status),
        params: Some(BlockParams {
            alpha,
            lambda,
            big_lambda,
        }),
    })
}

/// Whether all pairs among `idx` are at least `d` apart (sweep over sorted x).
fn min_spacing_at_least(pts: &[Point], idx: &[usize], d: f64) -> bool {
    let mut v: Vec<Point> = idx.iter().map(|&k| pts[k]).collect();
    v.sort_by(|a, b| a.x.total_cmp(&b.x));
    let d2 = d * d;
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            if v[b].x - v[a].x >= d {
                break;
            }
            if v[a].dist_sq(v[b]) < d2 {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Left side to right side.
    Horizontal,
    /// Bottom side to top side.
    Vertical,
}

/// A sub-rectangle of the block lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockRect {
    pub i0: usize,
    pub j0: usize,
    pub nx: usize,
    pub ny: usize,
}

/// Blocks `(i, j)` of a crossing, consecutive ones edge-adjacent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockPath {
    pub blocks: Vec<(usize, usize)>,
}

/// Repeated breadth-first crossings with vertex removal.
///
/// `order` lists the sources in the order they are queued; `neighbors` fills the
/// adjacency of a node in exploration order; `retire` marks nodes unavailable
/// after a path is taken.
fn greedy_paths(
    n: usize,
    sources: &[usize],
    is_target: impl Fn(usize) -> bool,
    mut neighbors: impl FnMut(usize, &mut Vec<usize>),
    mut retire: impl FnMut(&[usize], &mut [bool]),
    available: &mut [bool],
    want: usize,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut buf = Vec::new();
    while out.len() < want {
        for &k in &touched {
            seen[k] = false;
            parent[k] = usize::MAX;
        }
        touched.clear();
        let mut queue = VecDeque::new();
        for &s in sources {
            if available[s] && !seen[s] {
                seen[s] = true;
                touched.push(s);
                queue.push_back(s);
            }
        }
        let mut hit = None;
        while let Some(v) = queue.pop_front() {
            if is_target(v) {
                hit = Some(v);
                break;
            }
            buf.clear();
            neighbors(v, &mut buf);
            for &w in &buf {
                if available[w] && !seen[w] {
                    seen[w] = true;
                    parent[w] = v;
                    touched.push(w);
                    queue.push_back(w);
                }
            }
        }
        let Some(mut v) = hit else { break };
        let mut path = vec![v];
        while parent[v] != usize::MAX {
            v = parent[v];
            path.push(v);
        }
        path.reverse();
        retire(&path, available);
        out.push(path);
    }
    out
}

/// Like [`greedy_paths`] but each crossing minimizes the summed node cost, so
/// a cost growing away from one long side yields the lowest crossings first.
fn cheapest_paths(
    n: usize,
    sources: &[usize],
    is_target: impl Fn(usize) -> bool,
    cost: impl Fn(usize) -> f64,
    mut neighbors: impl FnMut(usize, &mut Vec<usize>),
    mut retire: impl FnMut(&[usize], &mut [bool]),
    available: &mut [bool],
) -> Vec<Vec<usize>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut out = Vec::new();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut buf = Vec::new();
    loop {
        for &k in &touched {
            dist[k] = f64::INFINITY;
            parent[k] = usize::MAX;
            done[k] = false;
        }
        touched.clear();
        // (cost bits, insertion order, node); costs are non-negative so bits order like values
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        for &s in sources {
            if available[s] && dist[s].is_infinite() {
                dist[s] = cost(s);
                touched.push(s);
                heap.push(Reverse((dist[s].to_bits(), seq, s)));
                seq += 1;
            }
        }
        let mut hit = None;
        while let Some(Reverse((bits, _, v))) = heap.pop() {
            if done[v] || f64::from_bits(bits) > dist[v] {
                continue;
            }
            done[v] = true;
            if is_target(v) {
                hit = Some(v);
                break;
            }
            buf.clear();
            neighbors(v, &mut buf);
            for &w in &buf {
                if !available[w] || done[w] {
                    continue;
                }
                let nd = dist[v] + cost(w);
                if nd < dist[w] {
                    if dist[w].is_infinite() {
                        touched.push(w);
                    }
                    dist[w] = nd;
                    parent[w] = v;
                    heap.push(Reverse((nd.to_bits(), seq, w)));
                    seq += 1;
                }
            }
        }
        let Some(mut v) = hit else { break };
        let mut path = vec![v];
        while parent[v] != usize::MAX {
            v = parent[v];
            path.push(v);
        }
        path.reverse();
        retire(&path, available);
        out.push(path);
    }
    out
}

fn check_rect(field: &BlockField, rect: &BlockRect) -> Result<(), PercolationError> {
    if rect.nx == 0 || rect.ny == 0 || rect.i0 + rect.nx > field.nx || rect.j0 + rect.ny > field.ny
    {
        return Err(PercolationError::RectOutsideField(*rect));
    }
    Ok(())
}

/// Vertex-disjoint good-block crossings of `rect`, at most `want`, found one
/// shortest crossing at a time with sources queued bottom-to-top (left-to-right
/// for vertical crossings).
pub fn find_crossings(
    field: &BlockField,
    rect: &BlockRect,
    direction: Direction,
    want: usize,
) -> Result<Vec<BlockPath>, PercolationError> {
    check_rect(field, rect)?;
    let (w, h) = (rect.nx, rect.ny);
    let node = |i: usize, j: usize| j * w + i;
    let mut available: Vec<bool> = (0..w * h)
        .map(|k| field.is_good(rect.i0 + k % w, rect.j0 + k / w))
        .collect();
    let sources: Vec<usize> = match direction {
        Direction::Horizontal => (0..h).map(|j| node(0, j)).collect(),
        Direction::Vertical => (0..w).map(|i| node(i, 0)).collect(),
    };
    let is_target = |k: usize| match direction {
        Direction::Horizontal => k % w == w - 1,
        Direction::Vertical => k / w == h - 1,
    };
    let neighbors = |k: usize, out: &mut Vec<usize>| {
        let (i, j) = (k % w, k / w);
        let steps: [(isize, isize); 4] = match direction {
            Direction::Horizontal => [(1, 0), (0, -1), (0, 1), (-1, 0)],
            Direction::Vertical => [(0, 1), (-1, 0), (1, 0), (0, -1)],
        };
        for (di, dj) in steps {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni >= 0 && nj >= 0 && (ni as usize) < w && (nj as usize) < h {
                out.push(node(ni as usize, nj as usize));
            }
        }
    };
    let paths = greedy_paths(
        w * h,
        &sources,
        is_target,
        neighbors,
        |p, avail| p.iter().for_each(|&k| avail[k] = false),
        &mut available,
        want,
    );
    Ok(paths
        .into_iter()
        .map(|p| BlockPath {
            blocks: p
                .iter()
                .map(|&k| (rect.i0 + k % w, rect.j0 + k / w))
                .collect(),
        })
        .collect())
}

/// Maximum number of vertex-disjoint crossings (node-split unit-capacity max-flow).
pub fn max_disjoint_crossings(
    field: &BlockField,
    rect: &BlockRect,
    direction: Direction,
) -> Result<usize, PercolationError> {
    check_rect(field, rect)?;
    let (w, h) = (rect.nx, rect.ny);
    let n = w * h;
    // node k -> in = 2k, out = 2k+1; source 2n, sink 2n+1
    let (src, sink) = (2 * n, 2 * n + 1);
    let mut graph: Vec<Vec<usize>> = vec![Vec::new(); 2 * n + 2];
    let mut to = Vec::new();
    let mut cap = Vec::new();
    let mut add = |graph: &mut Vec<Vec<usize>>, a: usize, b: usize| {
        graph[a].push(to.len());
        to.push(b);
        cap.push(1i32);
        graph[b].push(to.len());
        to.push(a);
        cap.push(0i32);
    };
    let good = |k: usize| field.is_good(rect.i0 + k % w, rect.j0 + k / w);
    for k in 0..n {
        if !good(k) {
            continue;
        }
        let (i, j) = (k % w, k / w);
        add(&mut graph, 2 * k, 2 * k + 1);
        let start = match direction {
            Direction::Horizontal => i == 0,
            Direction::Vertical => j == 0,
        };
        let end = match direction {
            Direction::Horizontal => i == w - 1,
            Direction::Vertical => j == h - 1,
        };
        if start {
            add(&mut graph, src, 2 * k);
        }
        if end {
            add(&mut graph, 2 * k + 1, sink);
        }
        for (di, dj) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni >= 0 && nj >= 0 && (ni as usize) < w && (nj as usize) < h {
                let m = nj as usize * w + ni as usize;
                if good(m) {
                    add(&mut graph, 2 * k + 1, 2 * m);
                }
            }
        }
    }
    let mut flow = 0;
    loop {
        let mut prev = vec![usize::MAX; 2 * n + 2];
        let mut queue = VecDeque::from([src]);
        let mut reached = vec![false; 2 * n + 2];
        reached[src] = true;
        while let Some(v) = queue.pop_front() {
            if v == sink {
                break;
            }
            for &e in &graph[v] {
                if cap[e] > 0 && !reached[to[e]] {
                    reached[to[e]] = true;
                    prev[to[e]] = e;
                    queue.push_back(to[e]);
                }
            }
        }
        if !reached[sink] {
            break;
        }
        let mut v = sink;
        while v != src {
            let e = prev[v];
            cap[e] -= 1;
            cap[e ^ 1] += 1;
            v = to[e ^ 1];
        }
        flow += 1;
    }
    Ok(flow)
}

/// Ordered cloud indices forming a chain of Voronoi neighbors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PointPath {
    pub indices: Vec<usize>,
    pub ids: Vec<PointId>,
}

impl PointPath {
    pub fn from_indices(cloud: &PointCloud, indices: Vec<usize>) -> Self {
        let ids = indices.iter().map(|&i| cloud.id(i)).collect();
        Self { indices, ids }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mean_coordinate(&self, cloud: &PointCloud, direction: Direction) -> f64 {
        let s: f64 = self
            .indices
            .iter()
            .map(|&i| match direction {
                Direction::Horizontal => cloud.point(i).y,
                Direction::Vertical => cloud.point(i).x,
            })
            .sum();
        s / self.indices.len().max(1) as f64
    }
}

/// Voronoi cells met by the polyline through `waypoints`, in order, with loops
/// cut so that no cell repeats.
pub fn cells_along_polyline(
    diagram: &VoronoiDiagram,
    waypoints: &[Point],
) -> Result<Vec<usize>, PercolationError> {
    let Some(&first) = waypoints.first() else {
        return Ok(Vec::new());
    };
    let mut cur = diagram.locate(first).ok_or(PercolationError::LeavesClip {
        x: first.x,
        y: first.y,
    })?;
    let mut out = vec![cur];
    for seg in waypoints.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let d = b - a;
        let mut s = 0.0;
        let mut prev = usize::MAX;
        for _ in 0..100_000 {
            let cell = diagram.cell(cur);
            let v = &cell.polygon.vertices;
            let m = v.len();
            let mut best: Option<(f64, EdgeLabel)> = None;
            for k in 0..m {
                let e = v[(k + 1) % m] - v[k];
                let nrm = Point::new(e.y, -e.x);
                let denom = nrm.dot(d);
                if denom <= 0.0 {
                    continue;
                }
                let sk = nrm.dot(v[k] - a) / denom;
                if sk < s - 1e-12 {
                    continue;
                }
                if let EdgeLabel::Neighbor(j) = cell.labels[k] {
                    if j == prev && sk <= s + 1e-12 {
                        continue;
                    }
                }
                if best.is_none_or(|(bs, _)| sk < bs) {
                    best = Some((sk, cell.labels[k]));
                }
            }
            match best {
                Some((sk, label)) if sk < 1.0 => match label {
                    EdgeLabel::Neighbor(j) => {
                        prev = cur;
                        cur = j;
                        s = sk.max(s);
                        out.push(j);
                    }
                    EdgeLabel::Boundary(_) => {
                        let p = a + d * sk;
                        return Err(PercolationError::LeavesClip { x: p.x, y: p.y });
                    }
                },
                _ => break,
            }
        }
    }
    Ok(remove_loops(out))
}

fn remove_loops(seq: Vec<usize>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(seq.len());
    let mut pos = std::collections::HashMap::new();
    for c in seq {
        if let Some(&p) = pos.get(&c) {
            for r in out.drain(p + 1..) {
                pos.remove(&r);
            }
        } else {
            pos.insert(c, out.len());
            out.push(c);
        }
    }
    out
}

/// Point path through the cells crossed by the polyline joining block centers.
///
/// `extend_to` optionally adds the two points where the crossing meets the host
/// rectangle's sides, so the first and last cells reach them.
pub fn blocks_to_point_path(
    path: &BlockPath,
    field: &BlockField,
    cloud: &PointCloud,
    diagram: &VoronoiDiagram,
    mask: &crate::geometry::RegularMask,
    extend_to: Option<(Point, Point)>,
) -> Result<PointPath, PercolationError> {
    for w in path.blocks.windows(2) {
        let ((a, b), (c, d)) = (w[0], w[1]);
        if a.abs_diff(c) + b.abs_diff(d) != 1 {
            return Err(PercolationError::NotAdjacent(a, b, c, d));
        }
    }
    if let Some(&(i, j)) = path.blocks.iter().find(|&&(i, j)| !field.is_good(i, j)) {
        return Err(PercolationError::BadBlock(i, j));
    }
    let mut waypoints: Vec<Point> = path
        .blocks
        .iter()
        .map(|&(i, j)| field.center(i, j))
        .collect();
    if let Some((start, end)) = extend_to {
        waypoints.insert(0, start);
        waypoints.push(end);
    }
    let cells = cells_along_polyline(diagram, &waypoints)?;
    if let Some(&c) = cells.iter().find(|&&c| !mask.is_regular(c)) {
        return Err(PercolationError::IrregularCell { id: cloud.id(c) });
    }
    Ok(PointPath::from_indices(cloud, cells))
}

/// Side of a rectangle, counter-clockwise from the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

pub fn side_segment(rect: &Window, side: Side) -> (Point, Point) {
    let c = rect.corners();
    match side {
        Side::Bottom => (c[0], c[1]),
        Side::Right => (c[1], c[2]),
        Side::Top => (c[2], c[3]),
        Side::Left => (c[3], c[0]),
    }
}

/// Whether the cell of generator `i` meets the given side of `rect`.
pub fn cell_touches(diagram: &VoronoiDiagram, i: usize, rect: &Window, side: Side) -> bool {
    let (a, b) = side_segment(rect, side);
    segment_meets_polygon(&diagram.cell(i).polygon.vertices, a, b)
}

fn segment_meets_polygon(v: &[Point], a: Point, b: Point) -> bool {
    let m = v.len();
    if m < 3 {
        return false;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let d = b - a;
    for k in 0..m {
        let e = v[(k + 1) % m] - v[k];
        let n = Point::new(e.y, -e.x);
        let num = n.dot(v[k] - a);
        let den = n.dot(d);
        if den == 0.0 {
            if num < 0.0 {
                return false;
            }
        } else if den > 0.0 {
            hi = hi.min(num / den);
        } else {
            lo = lo.max(num / den);
        }
        if lo > hi {
            return false;
        }
    }
    true
}

/// Points of the rectangle reachable from the `side` cells through Voronoi
/// neighbors inside `rect`, avoiding `blocked`.
fn reachable_from_side(
    diagram: &VoronoiDiagram,
    rect: &Window,
    side: Side,
    blocked: &[bool],
) -> Vec<bool> {
    let g = diagram.generators();
    let inside: Vec<bool> = g.iter().map(|p| rect.contains(*p)).collect();
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::new();
    for i in 0..g.len() {
        if inside[i] && !blocked[i] && cell_touches(diagram, i, rect, side) {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(v) = queue.pop_front() {
        for &w in diagram.adjacency().neighbors(v) {
            if inside[w] && !blocked[w] && !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

/// `x` is separated from `side` by `path` in `rect`: every chain of neighbors in
/// the rectangle from `x` to that side meets the path. Points outside the
/// rectangle qualify vacuously, points on the path trivially.
fn separated_from(
    diagram: &VoronoiDiagram,
    rect: &Window,
    path: &PointPath,
    side: Side,
    which: &'static str,
    opposite: Side,
) -> Result<Vec<bool>, PercolationError> {
    let n = diagram.len();
    let mut blocked = vec![false; n];
    for &i in &path.indices {
        blocked[i] = true;
    }
    let reach = reachable_from_side(diagram, rect, side, &blocked);
    let g = diagram.generators();
    let leak =
        (0..n).any(|i| reach[i] && rect.contains(g[i]) && cell_touches(diagram, i, rect, opposite));
    if leak {
        return Err(PercolationError::NotSeparating { which, rect: *rect });
    }
    Ok((0..n).map(|i| !reach[i]).collect())
}

/// Joins a vertical path `v1`, a horizontal path `h` and a vertical path `v2`:
/// the points of `v1` below `h` in `r`, the points of `h` right of `v1` in `r` and
/// left of `v2` in `r2`, and the points of `v2` above `h` in `r2`.
pub fn join_paths(
    diagram: &VoronoiDiagram,
    cloud: &PointCloud,
    v1: &PointPath,
    h: &PointPath,
    v2: &PointPath,
    r: &Window,
    r2: &Window,
) -> Result<PointPath, PercolationError> {
    let below_h = separated_from(diagram, r, h, Side::Top, "horizontal", Side::Bottom)?;
    let above_h = separated_from(diagram, r2, h, Side::Bottom, "horizontal", Side::Top)?;
    let right_of_v1 = separated_from(diagram, r, v1, Side::Left, "first vertical", Side::Right)?;
    let left_of_v2 = separated_from(diagram, r2, v2, Side::Right, "second vertical", Side::Left)?;

    let mut out: Vec<usize> = Vec::new();
    let mut used = std::collections::HashSet::new();
    let mut push = |i: usize, out: &mut Vec<usize>| {
        if used.insert(i) {
            out.push(i);
        }
    };
    for &i in &v1.indices {
        if below_h[i] {
            push(i, &mut out);
        }
    }
    for &i in &h.indices {
        if right_of_v1[i] && left_of_v2[i] {
            push(i, &mut out);
        }
    }
    for &i in &v2.indices {
        if above_h[i] {
            push(i, &mut out);
        }
    }
    for w in out.windows(2) {
        if !diagram.are_neighbors(w[0], w[1]) {
            return Err(PercolationError::Disconnected(
                cloud.id(w[0]),
                cloud.id(w[1]),
            ));
        }
    }
    Ok(PointPath::from_indices(cloud, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStrategy {
    /// Good-block crossings turned into Voronoi paths.
    Blocks,
    /// Crossings of the neighbor graph of regular points directly.
    RegularCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub eps: f64,
    pub t: f64,
    pub alpha: f64,
    pub lambda: f64,
    #[serde(default = "default_big_lambda")]
    pub big_lambda: u32,
    pub upsilon: f64,
    #[serde(default = "default_strategy")]
    pub strategy: GridStrategy,
}

fn default_big_lambda() -> u32 {
    12
}

fn default_strategy() -> GridStrategy {
    GridStrategy::Blocks
}

/// Number of squares of side `t` centered on `tZ^2` per side meeting `Q`.
pub fn squares_per_side(t: f64) -> usize {
    2 * ((1.0 + t) / (2.0 * t)).ceil() as usize - 1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularGrid {
    pub params: GridParams,
    pub k_t: usize,
    /// `horizontal[i]`: paths of row `i` (from the bottom), ordered bottom to top.
    pub horizontal: Vec<Vec<PointPath>>,
    /// `vertical[j]`: paths of column `j` (from the left), ordered left to right.
    pub vertical: Vec<Vec<PointPath>>,
}

impl RegularGrid {
    pub fn working_square(&self) -> Window {
        working_square(&self.params, self.k_t)
    }

    /// Square of row `i`, column `j`.
    pub fn square(&self, i: usize, j: usize) -> Window {
        let w = self.working_square();
        let (lo, _) = w.bounding_box();
        let t = self.params.t;
        Window::from_bounds(
            lo.x + j as f64 * t,
            lo.y + i as f64 * t,
            lo.x + (j + 1) as f64 * t,
            lo.y + (i + 1) as f64 * t,
        )
        .expect("positive t")
    }

    pub fn row_rect(&self, i: usize) -> Window {
        rect_of(&self.params, self.k_t, Direction::Horizontal, i)
    }

    pub fn col_rect(&self, j: usize) -> Window {
        rect_of(&self.params, self.k_t, Direction::Vertical, j)
    }

    pub fn rect(&self, dir: Direction, k: usize) -> Window {
        rect_of(&self.params, self.k_t, dir, k)
    }

    pub fn paths(&self, dir: Direction) -> &[Vec<PointPath>] {
        match dir {
            Direction::Horizontal => &self.horizontal,
            Direction::Vertical => &self.vertical,
        }
    }

    /// Common number of paths per rectangle (the largest, if they disagree).
    pub fn paths_per_rect(&self) -> usize {
        self.horizontal
            .iter()
            .chain(&self.vertical)
            .map(Vec::len)
            .max()
            .unwrap_or(0)
    }

    /// Sorted, deduplicated cloud indices of all grid points.
    pub fn point_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .horizontal
            .iter()
            .chain(&self.vertical)
            .flatten()
            .flat_map(|p| p.indices.iter().copied())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn to_json(&self) -> serde_json::Value {
        let ids = |fam: &[Vec<PointPath>]| -> Vec<Vec<Vec<u64>>> {
            fam.iter()
                .map(|r| {
                    r.iter()
                        .map(|p| p.ids.iter().map(|i| i.0).collect())
                        .collect()
                })
                .collect()
        };
        serde_json::json!({
            "params": self.params,
            "k_t": self.k_t,
            "M": self.paths_per_rect(),
            "horizontal": ids(&self.horizontal),
            "vertical": ids(&self.vertical),
        })
    }

    pub fn from_json(
        value: &serde_json::Value,
        cloud: &PointCloud,
    ) -> Result<Self, PercolationError> {
        #[derive(Deserialize)]
        struct Raw {
            params: GridParams,
            k_t: usize,
            horizontal: Vec<Vec<Vec<u64>>>,
            vertical: Vec<Vec<Vec<u64>>>,
        }
        let raw: Raw = serde_json::from_value(value.clone())
            .map_err(|e| PercolationError::InvalidGrid(e.to_string()))?;
        let conv = |fam: Vec<Vec<Vec<u64>>>| -> Result<Vec<Vec<PointPath>>, PercolationError> {
            fam.into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|p| {
                            let idx = p
                                .into_iter()
                                .map(|id| {
                                    cloud
                                        .index_of(PointId(id))
                                        .ok_or(PercolationError::UnknownId(PointId(id)))
                                })
                                .collect::<Result<Vec<_>, _>>()?;
                            Ok(PointPath::from_indices(cloud, idx))
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            params: raw.params,
            k_t: raw.k_t,
            horizontal: conv(raw.horizontal)?,
            vertical: conv(raw.vertical)?,
        })
    }
}

fn working_square(params: &GridParams, k_t: usize) -> Window {
    Window::square(Point::ORIGIN, params.t * k_t as f64).expect("positive t")
}

fn rect_of(params: &GridParams, k_t: usize, dir: Direction, k: usize) -> Window {
    let side = params.t * k_t as f64;
    let lo = -0.5 * side;
    let t = params.t;
    match dir {
        Direction::Horizontal => {
            Window::from_bounds(lo, lo + k as f64 * t, lo + side, lo + (k + 1) as f64 * t)
        }
        Direction::Vertical => {
            Window::from_bounds(lo + k as f64 * t, lo, lo + (k + 1) as f64 * t, lo + side)
        }
    }
    .expect("positive t")
}

/// Everything grid assembly and validation derive from one cloud.
#[derive(Debug, Clone)]
pub struct GridContext {
    pub cloud: Arc<PointCloud>,
    pub diagram: VoronoiDiagram,
    pub mask: crate::geometry::RegularMask,
    /// Ball counts at radius `lambda * eps`, including the center.
    pub ball_counts: Vec<usize>,
}

impl GridContext {
    pub fn new(
        cloud: &Arc<PointCloud>,
        eps: f64,
        alpha: f64,
        lambda: f64,
    ) -> Result<Self, PercolationError> {
        if !(alpha > 0.0
            && lambda > 0.0
            && eps > 0.0
            && alpha.is_finite()
            && lambda.is_finite()
            && eps.is_finite())
        {
            return Err(PercolationError::BadParameters { alpha, lambda });
        }
        let diagram = voronoi_diagram(cloud, cloud.window())?;
        let ball_counts = ball_counts(cloud, lambda * eps)?;
        let mask =
            crate::geometry::regular_mask_from_counts(&diagram, &ball_counts, eps, alpha, lambda);
        Ok(Self {
            cloud: Arc::clone(cloud),
            diagram,
            mask,
            ball_counts,
        })
    }

    /// Same cloud and diagram under other regularity parameters.
    pub fn with_regularity(
        &self,
        eps: f64,
        alpha: f64,
        lambda: f64,
    ) -> Result<Self, PercolationError> {
        if !(alpha > 0.0
            && lambda > 0.0
            && eps > 0.0
            && alpha.is_finite()
            && lambda.is_finite()
            && eps.is_finite())
        {
            return Err(PercolationError::BadParameters { alpha, lambda });
        }
        let ball_counts = ball_counts(&self.cloud, lambda * eps)?;
        let mask = crate::geometry::regular_mask_from_counts(
            &self.diagram,
            &ball_counts,
            eps,
            alpha,
            lambda,
        );
        Ok(Self {
            cloud: Arc::clone(&self.cloud),
            diagram: self.diagram.clone(),
            mask,
            ball_counts,
        })
    }
}

/// Counts and failures recorded while assembling a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssemblyReport {
    pub k_t: usize,
    /// Per rectangle: crossings found, kept after separation, kept after lengths.
    pub horizontal_counts: Vec<[usize; 3]>,
    pub vertical_counts: Vec<[usize; 3]>,
    pub m: usize,
    /// Smallest `Upsilon` that the kept per-square path lengths would satisfy.
    pub upsilon_lengths: f64,
    /// Smallest `Upsilon` that `M` would satisfy.
    pub upsilon_count: f64,
    pub good_block_fraction: Option<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum AssemblyOutcome {
    Assembled {
        grid: RegularGrid,
        report: AssemblyReport,
    },
    Failed {
        report: AssemblyReport,
    },
}

impl AssemblyOutcome {
    pub fn grid(&self) -> Option<&RegularGrid> {
        match self {
            AssemblyOutcome::Assembled { grid, .. } => Some(grid),
            AssemblyOutcome::Failed { .. } => None,
        }
    }

    pub fn report(&self) -> &AssemblyReport {
        match self {
            AssemblyOutcome::Assembled { report, .. } | AssemblyOutcome::Failed { report } => {
                report
            }
        }
    }
}

fn validate_params(p: &GridParams) -> Result<(), PercolationError> {
    let ok = [p.eps, p.t, p.alpha, p.lambda, p.upsilon]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
    if !ok {
        return Err(PercolationError::InvalidGrid(format!("{p:?}")));
    }
    if p.strategy == GridStrategy::Blocks && p.big_lambda < 10 {
        return Err(PercolationError::BlockMultiple(p.big_lambda));
    }
    Ok(())
}

pub fn assemble_grid(
    cloud: &Arc<PointCloud>,
    params: &GridParams,
) -> Result<AssemblyOutcome, PercolationError> {
    validate_params(params)?;
    if let Some(report) = blocks_cannot_fit(cloud, params)? {
        return Ok(AssemblyOutcome::Failed { report });
    }
    let ctx = GridContext::new(cloud, params.eps, params.alpha, params.lambda)?;
    assemble_grid_with(&ctx, params)
}

/// Geometric obstructions known before any point is looked at: a rectangle of
/// width `t` holding no whole block, or separation `3 lambda eps` exceeding what
/// paths in adjacent rectangles can keep.
fn blocks_cannot_fit(
    cloud: &PointCloud,
    params: &GridParams,
) -> Result<Option<AssemblyReport>, PercolationError> {
    let k_t = squares_per_side(params.t);
    let pad = 4.0 * params.lambda * params.eps;
    if !cloud
        .window()
        .contains_enlarged(&working_square(params, k_t), pad)
    {
        return Err(PercolationError::InsufficientPadding(pad));
    }
    let block = params.big_lambda as f64 * params.lambda * params.eps;
    if params.strategy != GridStrategy::Blocks || block <= params.t {
        return Ok(None);
    }
    let mut failures = vec![format!(
        "block side {block} exceeds the rectangle width t = {}; no rectangle holds a whole block",
        params.t
    )];
    let sep = 3.0 * params.lambda * params.eps;
    if sep > 2.0 * params.t {
        failures.push(format!(
            "separation 3 lambda eps = {sep} exceeds 2t = {}; paths in adjacent rectangles cannot keep it",
            2.0 * params.t
        ));
    }
    failures.push("no rectangle keeps a path (M = 0)".to_string());
    Ok(Some(AssemblyReport {
        k_t,
        horizontal_counts: vec![[0; 3]; k_t],
        vertical_counts: vec![[0; 3]; k_t],
        m: 0,
        upsilon_lengths: f64::INFINITY,
        upsilon_count: f64::INFINITY,
        good_block_fraction: None,
        failures,
    }))
}

/// Grid assembly over a precomputed context.
pub fn assemble_grid_with(
    ctx: &GridContext,
    params: &GridParams,
) -> Result<AssemblyOutcome, PercolationError> {
    validate_params(params)?;
    let cloud = &ctx.cloud;
    let k_t = squares_per_side(params.t);
    let work = working_square(params, k_t);
    let pad = 4.0 * params.lambda * params.eps;
    if !cloud.window().contains_enlarged(&work, pad) {
        return Err(PercolationError::InsufficientPadding(pad));
    }

    let mut good_fraction = None;
    let mut raw: Vec<(Direction, usize, Vec<PointPath>)> = Vec::new();
    let mut failures = Vec::new();
    match params.strategy {
        GridStrategy::Blocks => {
            let scaled = transform_cloud(cloud, Transform::Scale(1.0 / params.eps))?;
            let region = Transform::Scale(1.0 / params.eps).apply_window(&work)?;
            let mut field = block_field(
                &scaled,
                params.alpha,
                params.lambda,
                params.big_lambda,
                &region,
            )?;
            good_fraction = Some(field.good_fraction());
            // back to cloud units
            field.origin = field.origin * params.eps;
            field.side *= params.eps;
            for dir in [Direction::Horizontal, Direction::Vertical] {
                for k in 0..k_t {
                    let rect = rect_of(params, k_t, dir, k);
                    let (paths, errs) = block_crossings(ctx, &field, &rect, dir);
                    failures.extend(errs);
                    raw.push((dir, k, paths));
                }
            }
        }
        GridStrategy::RegularCells => {
            let safe = f_safe(ctx, params);
            let results: Vec<(Direction, usize, Vec<PointPath>)> =
                [Direction::Horizontal, Direction::Vertical]
                    .into_iter()
                    .flat_map(|d| (0..k_t).map(move |k| (d, k)))
                    .collect::<Vec<_>>()
                    .into_par_iter()
                    .map(|(dir, k)| {
                        let rect = rect_of(params, k_t, dir, k);
                        (dir, k, graph_crossings(ctx, params, &safe, &rect, dir))
                    })
                    .collect();
            raw = results;
        }
    }
    Ok(prune(ctx, params, k_t, raw, good_fraction, failures))
}

fn block_crossings(
    ctx: &GridContext,
    field: &BlockField,
    rect: &Window,
    dir: Direction,
) -> (Vec<PointPath>, Vec<String>) {
    let (lo, hi) = rect.bounding_box();
    let tol = 1e-9 * field.side;
    // blocks entirely inside the rectangle
    let i0 = ((lo.x - field.origin.x) / field.side - tol).ceil().max(0.0) as usize;
    let j0 = ((lo.y - field.origin.y) / field.side - tol).ceil().max(0.0) as usize;
    let i1 = (((hi.x - field.origin.x) / field.side + tol).floor() as usize).min(field.nx);
    let j1 = (((hi.y - field.origin.y) / field.side + tol).floor() as usize).min(field.ny);
    if i1 <= i0 || j1 <= j0 {
        return (
            Vec::new(),
            vec![format!(
                "{dir:?} rectangle {rect:?} holds no whole block of side {}",
                field.side
            )],
        );
    }
    let brect = BlockRect {
        i0,
        j0,
        nx: i1 - i0,
        ny: j1 - j0,
    };
    let paths = find_crossings(field, &brect, dir, usize::MAX).expect("rectangle inside field");
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for p in paths {
        let (first, last) = (p.blocks[0], *p.blocks.last().expect("nonempty"));
        let (c0, c1) = (field.center(first.0, first.1), field.center(last.0, last.1));
        let ends = match dir {
            Direction::Horizontal => (Point::new(lo.x, c0.y), Point::new(hi.x - tol, c1.y)),
            Direction::Vertical => (Point::new(c0.x, lo.y), Point::new(c1.x, hi.y - tol)),
        };
        match blocks_to_point_path(&p, field, &ctx.cloud, &ctx.diagram, &ctx.mask, Some(ends)) {
            Ok(pp) => out.push(pp),
            Err(e) => errs.push(format!("{dir:?} rectangle {rect:?}: {e}")),
        }
    }
    (out, errs)
}

/// Regular points whose `3 lambda eps` neighborhood has no crowded point.
fn f_safe(ctx: &GridContext, params: &GridParams) -> Vec<bool> {
    let pts = ctx.cloud.points();
    let bound = params.lambda * params.lambda / params.alpha;
    let crowded: Vec<Point> = ctx
        .ball_counts
        .iter()
        .zip(pts)
        .filter(|(&c, _)| c as f64 > bound)
        .map(|(_, &p)| p)
        .collect();
    let r = 3.0 * params.lambda * params.eps;
    let grid = CellList::new(&crowded, r);
    pts.iter()
        .enumerate()
        .map(|(i, &p)| ctx.mask.is_regular(i) && grid.count_within(&crowded, p, r) == 0)
        .collect()
}

fn graph_crossings(
    ctx: &GridContext,
    params: &GridParams,
    safe: &[bool],
    rect: &Window,
    dir: Direction,
) -> Vec<PointPath> {
    let pts = ctx.cloud.points();
    let le = params.lambda * params.eps;
    let margin = 1.5 * le;
    let (lo, hi) = rect.bounding_box();
    let (start_side, end_side) = match dir {
        Direction::Horizontal => (Side::Left, Side::Right),
        Direction::Vertical => (Side::Bottom, Side::Top),
    };
    // local node numbering over candidates
    let cand: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            let p = pts[i];
            let off_long = match dir {
                Direction::Horizontal => (p.y - lo.y).min(hi.y - p.y),
                Direction::Vertical => (p.x - lo.x).min(hi.x - p.x),
            };
            safe[i] && rect.contains_open(p) && off_long >= margin
        })
        .collect();
    let mut local = std::collections::HashMap::with_capacity(cand.len());
    for (k, &i) in cand.iter().enumerate() {
        local.insert(i, k);
    }
    let is_end: Vec<bool> = cand
        .iter()
        .map(|&i| cell_touches(&ctx.diagram, i, rect, end_side))
        .collect();
    let mut sources: Vec<usize> = (0..cand.len())
        .filter(|&k| cell_touches(&ctx.diagram, cand[k], rect, start_side))
        .collect();
    sources.sort_by(|&a, &b| {
        let (pa, pb) = (pts[cand[a]], pts[cand[b]]);
        let key = |p: Point| match dir {
            Direction::Horizontal => p.y,
            Direction::Vertical => p.x,
        };
        key(pa).total_cmp(&key(pb)).then(cand[a].cmp(&cand[b]))
    });
    let cand_pts: Vec<Point> = cand.iter().map(|&i| pts[i]).collect();
    let near = CellList::new(&cand_pts, 3.0 * le);
    let mut available = vec![true; cand.len()];
    let adjacency = ctx.diagram.adjacency();
    let paths = cheapest_paths(
        cand.len(),
        &sources,
        |k| is_end[k],
        |k| {
            let p = cand_pts[k];
            let h = match dir {
                Direction::Horizontal => p.y - lo.y,
                Direction::Vertical => p.x - lo.x,
            };
            1.0 + h / le
        },
        |k, out| {
            let i = cand[k];
            for &j in adjacency.neighbors(i) {
                if pts[i].dist(pts[j]) <= le {
                    if let Some(&l) = local.get(&j) {
                        out.push(l);
                    }
                }
            }
        },
        |path, avail| {
            for &k in path {
                near.for_each_within(&cand_pts, cand_pts[k], 3.0 * le, |l| avail[l] = false);
                avail[k] = false;
            }
        },
        &mut available,
    );
    paths
        .into_iter()
        .map(|p| PointPath::from_indices(&ctx.cloud, p.iter().map(|&k| cand[k]).collect()))
        .collect()
}

fn per_square_counts(
    cloud: &PointCloud,
    params: &GridParams,
    k_t: usize,
    dir: Direction,
    k: usize,
    path: &PointPath,
) -> Vec<usize> {
    let side = params.t * k_t as f64;
    let lo = -0.5 * side;
    let mut counts = vec![0usize; k_t];
    for &i in &path.indices {
        let p = cloud.point(i);
        let along = match dir {
            Direction::Horizontal => p.x,
            Direction::Vertical => p.y,
        };
        let s = ((along - lo) / params.t).floor();
        if s >= 0.0 && (s as usize) < k_t {
            counts[s as usize] += 1;
        }
    }
    let _ = k;
    counts
}

fn prune(
    ctx: &GridContext,
    params: &GridParams,
    k_t: usize,
    raw: Vec<(Direction, usize, Vec<PointPath>)>,
    good_fraction: Option<f64>,
    mut failures: Vec<String>,
) -> AssemblyOutcome {
    let cloud = &ctx.cloud;
    let sep = 3.0 * params.lambda * params.eps;
    let lo_len = params.t / (params.upsilon * params.eps);
    let hi_len = params.upsilon * params.t / params.eps;
    let mut horizontal = vec![Vec::new(); k_t];
    let mut vertical = vec![Vec::new(); k_t];
    let mut hcounts = vec![[0usize; 3]; k_t];
    let mut vcounts = vec![[0usize; 3]; k_t];

    for dir in [Direction::Horizontal, Direction::Vertical] {
        let mut kept_pts: Vec<Point> = Vec::new();
        let mut kept_grid = CellList::new(&kept_pts, sep);
        let mut fam: Vec<(usize, Vec<PointPath>)> = raw
            .iter()
            .filter(|(d, _, _)| *d == dir)
            .map(|(_, k, p)| (*k, p.clone()))
            .collect();
        fam.sort_by_key(|(k, _)| *k);
        for (k, mut paths) in fam {
            let found = paths.len();
            paths.sort_by(|a, b| {
                a.mean_coordinate(cloud, dir)
                    .total_cmp(&b.mean_coordinate(cloud, dir))
                    .then(a.ids.iter().min().cmp(&b.ids.iter().min()))
            });
            let mut separated = Vec::new();
            for p in paths {
                let clash = p
                    .indices
                    .iter()
                    .any(|&i| kept_grid.count_within(&kept_pts, cloud.point(i), sep) > 0);
                if !clash {
                    kept_pts.extend(p.indices.iter().map(|&i| cloud.point(i)));
                    kept_grid = CellList::new(&kept_pts, sep);
                    separated.push(p);
                }
            }
            let n_sep = separated.len();
            let lengthy: Vec<PointPath> = separated
                .into_iter()
                .filter(|p| {
                    per_square_counts(cloud, params, k_t, dir, k, p)
                        .iter()
                        .all(|&c| (c as f64) >= lo_len && (c as f64) <= hi_len)
                })
                .collect();
            let counts = [found, n_sep, lengthy.len()];
            match dir {
                Direction::Horizontal => {
                    hcounts[k] = counts;
                    horizontal[k] = lengthy;
                }
                Direction::Vertical => {
                    vcounts[k] = counts;
                    vertical[k] = lengthy;
                }
            }
        }
    }

    let min_found = horizontal
        .iter()
        .chain(&vertical)
        .map(Vec::len)
        .min()
        .unwrap_or(0);
    let cap = hi_len.floor() as usize;
    let m = min_found.min(cap);
    for fam in horizontal.iter_mut().chain(vertical.iter_mut()) {
        fam.truncate(m);
    }
    let mut longest: f64 = 0.0;
    let mut shortest = f64::INFINITY;
    for dir in [Direction::Horizontal, Direction::Vertical] {
        let fam = if dir == Direction::Horizontal {
            &horizontal
        } else {
            &vertical
        };
        for (k, paths) in fam.iter().enumerate() {
            for p in paths {
                for c in per_square_counts(cloud, params, k_t, dir, k, p) {
                    longest = longest.max(c as f64);
                    shortest = shortest.min(c as f64);
                }
            }
        }
    }
    let scale = params.t / params.eps;
    let upsilon_lengths = if m > 0 {
        (longest / scale).max(scale / shortest)
    } else {
        f64::INFINITY
    };
    let upsilon_count = if m > 0 {
        (m as f64 / scale).max(scale / m as f64)
    } else {
        f64::INFINITY
    };

    for (name, counts) in [("horizontal", &hcounts), ("vertical", &vcounts)] {
        for (k, c) in counts.iter().enumerate() {
            if c[2] == 0 {
                failures.push(format!(
                    "{name} rectangle {k}: {} crossings, {} after separation, none within length bounds",
                    c[0], c[1]
                ));
            }
        }
    }
    if m == 0 {
        failures.push("no rectangle keeps a path (M = 0)".to_string());
    } else if (m as f64) < lo_len {
        failures.push(format!("M = {m} is below t / (Upsilon eps) = {lo_len}"));
    }
    let report = AssemblyReport {
        k_t,
        horizontal_counts: hcounts,
        vertical_counts: vcounts,
        m,
        upsilon_lengths,
        upsilon_count,
        good_block_fraction: good_fraction,
        failures,
    };
    if m == 0 || (m as f64) < lo_len {
        return AssemblyOutcome::Failed { report };
    }
    AssemblyOutcome::Assembled {
        grid: RegularGrid {
            params: *params,
            k_t,
            horizontal,
            vertical,
        },
        report,
    }
}

/// Outcome of one grid property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub pass: bool,
    /// Human-readable witnesses of failures (capped).
    pub witnesses: Vec<String>,
}

impl PropertyCheck {
    fn new() -> Self {
        Self {
            pass: true,
            witnesses: Vec::new(),
        }
    }

    fn fail(&mut self, w: String) {
        self.pass = false;
        if self.witnesses.len() < 20 {
            self.witnesses.push(w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridValidation {
    pub a: PropertyCheck,
    pub b: PropertyCheck,
    pub c: PropertyCheck,
    pub d: PropertyCheck,
    pub e: PropertyCheck,
    pub f: PropertyCheck,
    pub g: PropertyCheck,
}

impl GridValidation {
    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.pass)
    }

    pub fn checks(&self) -> [(&'static str, &PropertyCheck); 7] {
        [
            ("a", &self.a),
            ("b", &self.b),
            ("c", &self.c),
            ("d", &self.d),
            ("e", &self.e),
            ("f", &self.f),
            ("g", &self.g),
        ]
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.checks()
            .iter()
            .filter(|(_, c)| !c.pass)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Checks each grid property independently against the cloud.
pub fn validate_grid(grid: &RegularGrid, ctx: &GridContext) -> GridValidation {
    let cloud = &ctx.cloud;
    let pts = cloud.points();
    let p = &grid.params;
    let le = p.lambda * p.eps;
    let id = |i: usize| cloud.id(i);
    let mut a = PropertyCheck::new();
    let mut b = PropertyCheck::new();
    let mut c = PropertyCheck::new();
    let mut d = PropertyCheck::new();
    let mut e = PropertyCheck::new();
    let mut f = PropertyCheck::new();
    let mut g = PropertyCheck::new();

    let lo_len = p.t / (p.upsilon * p.eps);
    let hi_len = p.upsilon * p.t / p.eps;
    let m = grid.paths_per_rect();
    if (m as f64) < lo_len || (m as f64) > hi_len {
        d.fail(format!("M = {m} outside [{lo_len}, {hi_len}]"));
    }

    for dir in [Direction::Horizontal, Direction::Vertical] {
        let (start, end) = match dir {
            Direction::Horizontal => (Side::Left, Side::Right),
            Direction::Vertical => (Side::Bottom, Side::Top),
        };
        let conn = if dir == Direction::Horizontal {
            &mut b
        } else {
            &mut c
        };
        let fam = grid.paths(dir);
        if fam.len() != grid.k_t {
            conn.fail(format!(
                "{dir:?}: {} rectangles, expected {}",
                fam.len(),
                grid.k_t
            ));
        }
        for (k, paths) in fam.iter().enumerate() {
            let rect = grid.rect(dir, k);
            if paths.len() != m {
                d.fail(format!(
                    "{dir:?} rectangle {k} holds {} paths, others {m}",
                    paths.len()
                ));
            }
            for (mi, path) in paths.iter().enumerate() {
                let tag = format!("{dir:?} rect {k} path {mi}");
                if path.is_empty() {
                    conn.fail(format!("{tag}: empty"));
                    continue;
                }
                for &i in &path.indices {
                    if !ctx.mask.is_regular(i) {
                        a.fail(format!("{tag}: point {} not regular", id(i)));
                    }
                    if !rect.contains_open(pts[i]) {
                        conn.fail(format!("{tag}: point {} outside the rectangle", id(i)));
                    }
                }
                for w in path.indices.windows(2) {
                    if !ctx.diagram.are_neighbors(w[0], w[1]) {
                        conn.fail(format!(
                            "{tag}: {} and {} are not neighbors",
                            id(w[0]),
                            id(w[1])
                        ));
                    }
                    if pts[w[0]].dist(pts[w[1]]) > le {
                        g.fail(format!(
                            "{tag}: step {} -> {} longer than lambda eps",
                            id(w[0]),
                            id(w[1])
                        ));
                    }
                }
                let (first, last) = (path.indices[0], *path.indices.last().expect("nonempty"));
                if !cell_touches(&ctx.diagram, first, &rect, start) {
                    conn.fail(format!("{tag}: first cell misses the {start:?} side"));
                }
                if !cell_touches(&ctx.diagram, last, &rect, end) {
                    conn.fail(format!("{tag}: last cell misses the {end:?} side"));
                }
                for (s, cnt) in per_square_counts(cloud, p, grid.k_t, dir, k, path)
                    .iter()
                    .enumerate()
                {
                    let cnt = *cnt as f64;
                    if cnt < lo_len || cnt > hi_len {
                        d.fail(format!(
                            "{tag}: {cnt} points in square {s}, bounds [{lo_len}, {hi_len}]"
                        ));
                    }
                }
            }
        }

        // separation between distinct paths of one orientation
        let mut owner: Vec<usize> = Vec::new();
        let mut owned_pts: Vec<Point> = Vec::new();
        let mut labels = Vec::new();
        for (k, paths) in fam.iter().enumerate() {
            for (mi, path) in paths.iter().enumerate() {
                for &i in &path.indices {
                    owner.push(labels.len());
                    owned_pts.push(pts[i]);
                }
                labels.push((k, mi));
            }
        }
        let sep = 3.0 * le;
        let list = CellList::new(&owned_pts, sep);
        let mut reported = std::collections::HashSet::new();
        for (q, &pt) in owned_pts.iter().enumerate() {
            list.for_each_within(&owned_pts, pt, sep, |r| {
                let (x, y) = (owner[q], owner[r]);
                if x < y && reported.insert((x, y)) {
                    e.fail(format!(
                        "{dir:?} paths {:?} and {:?} closer than 3 lambda eps ({:.3e})",
                        labels[x],
                        labels[y],
                        pt.dist(owned_pts[r])
                    ));
                }
            });
        }
    }

    // crowding near paths
    let all: Vec<Point> = grid.point_indices().iter().map(|&i| pts[i]).collect();
    let near = CellList::new(&all, 3.0 * le);
    let bound = p.lambda * p.lambda / p.alpha;
    for (i, &q) in pts.iter().enumerate() {
        if (ctx.ball_counts[i] as f64) > bound && near.count_within(&all, q, 3.0 * le) > 0 {
            f.fail(format!(
                "point {} near a path has ball count {}",
                id(i),
                ctx.ball_counts[i]
            ));
        }
    }

    GridValidation {
        a,
        b,
        c,
        d,
        e,
        f,
        g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RegularMask;
    use crate::sampling::{lattice_cloud, sample_poisson, SamplingSpec};
    use proptest::prelude::*;

    #[test]
    fn empty_cloud_blocks_are_bad() {
        let region = Window::square(Point::ORIGIN, 80.0).unwrap();
        let c = PointCloud::empty(region);
        let f = block_field(&c, 0.1, 4.0, 10, &region).unwrap();
        assert_eq!((f.nx, f.ny), (2, 2));
        assert!(f.flags().iter().all(|g| !g));
        assert!(!f.status(0, 0).unwrap().counts);
    }

    #[test]
    fn lattice_block_conditions() {
        let region = Window::square(Point::ORIGIN, 80.0).unwrap();
        let c = lattice_cloud(&region, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        let strict = block_field(&c, 0.2, 4.0, 10, &region).unwrap();
        let loose = block_field(&c, 0.1, 4.0, 10, &region).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                let s = strict.status(i, j).unwrap();
                assert!(s.spacing && !s.counts);
                let l = loose.status(i, j).unwrap();
                assert!(l.spacing && l.counts && l.margin);
                assert!(loose.is_good(i, j));
            }
        }
        assert!(block_field(&c, 0.1, 4.0, 9, &region).is_err());
    }

    #[test]
    fn block_field_is_reproducible() {
        let w = Window::square(Point::ORIGIN, 60.0).unwrap();
        let c = sample_poisson(&SamplingSpec::new(w, 1.0, 0.0, RandomStream::new(2))).unwrap();
        let a = block_field(&c, 0.02, 1.0, 10, &w).unwrap();
        let b = block_field(&c, 0.02, 1.0, 10, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crossings_on_trivial_fields() {
        let all = BlockField::all(7, 5, true);
        let r = all.full_rect();
        let hs = find_crossings(&all, &r, Direction::Horizontal, usize::MAX).unwrap();
        assert_eq!(hs.len(), 5);
        for (row, p) in hs.iter().enumerate() {
            assert_eq!(p.blocks, (0..7).map(|i| (i, row)).collect::<Vec<_>>());
        }
        assert_eq!(
            find_crossings(&all, &r, Direction::Vertical, usize::MAX)
                .unwrap()
                .len(),
            7
        );
        let none = BlockField::all(7, 5, false);
        assert!(find_crossings(&none, &r, Direction::Horizontal, 10)
            .unwrap()
            .is_empty());
        let mut flags = vec![false; 35];
        for i in 0..7 {
            flags[2 * 7 + i] = true;
        }
        let one = BlockField::from_flags(7, 5, flags);
        assert_eq!(
            find_crossings(&one, &r, Direction::Horizontal, 10)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            find_crossings(&all, &r, Direction::Horizontal, 2)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn max_flow_matches_menger_on_small_cases() {
        let all = BlockField::all(6, 4, true);
        assert_eq!(
            max_disjoint_crossings(&all, &all.full_rect(), Direction::Horizontal).unwrap(),
            4
        );
        assert_eq!(
            max_disjoint_crossings(&all, &all.full_rect(), Direction::Vertical).unwrap(),
            6
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_crossings_are_disjoint_and_valid(seed in 0u64..100_000, p in 0.3f64..0.95, w in 2usize..16, h in 2usize..16) {
            let f = BlockField::bernoulli(w, h, p, &RandomStream::new(seed));
            let r = f.full_rect();
            for dir in [Direction::Horizontal, Direction::Vertical] {
                let paths = find_crossings(&f, &r, dir, usize::MAX).unwrap();
                let mut used = std::collections::HashSet::new();
                for path in &paths {
                    for &(i, j) in &path.blocks {
                        prop_assert!(f.is_good(i, j));
                        prop_assert!(used.insert((i, j)));
                    }
                    for s in path.blocks.windows(2) {
                        prop_assert_eq!(s[0].0.abs_diff(s[1].0) + s[0].1.abs_diff(s[1].1), 1);
                    }
                    let (a, b) = (path.blocks[0], *path.blocks.last().unwrap());
                    match dir {
                        Direction::Horizontal => prop_assert!(a.0 == 0 && b.0 == w - 1),
                        Direction::Vertical => prop_assert!(a.1 == 0 && b.1 == h - 1),
                    }
                }
                let flow = max_disjoint_crossings(&f, &r, dir).unwrap();
                prop_assert!(paths.len() <= flow);
                prop_assert_eq!(paths.is_empty(), flow == 0);
            }
        }
    }

    fn lattice_setup(side: f64) -> (Arc<PointCloud>, VoronoiDiagram, RegularMask) {
        let w = Window::square(Point::ORIGIN, side).unwrap();
        let c = Arc::new(lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap());
        let d = voronoi_diagram(&c, &w).unwrap();
        let m = crate::geometry::regular_subcluster(&c, &d, 0.2, 1.2).unwrap();
        (c, d, m)
    }

    fn index_at(c: &PointCloud, p: Point) -> usize {
        c.points().iter().position(|q| *q == p).unwrap()
    }

    #[test]
    fn block_path_to_points_on_lattice() {
        let (c, d, m) = lattice_setup(20.0);
        let mut f = BlockField::all(4, 1, true);
        f.origin = Point::new(-8.0, -2.0);
        f.side = 4.0;
        let path = BlockPath {
            blocks: vec![(0, 0), (1, 0), (2, 0), (3, 0)],
        };
        // polyline at y = 0 runs along cell boundaries; nudge it into one row
        f.origin = Point::new(-8.25, -1.5);
        let pp = blocks_to_point_path(&path, &f, &c, &d, &m, None).unwrap();
        for w in pp.indices.windows(2) {
            assert!(d.are_neighbors(w[0], w[1]));
            assert!(c.point(w[0]).dist(c.point(w[1])) <= 1.0 + 1e-12);
        }
        assert_eq!(pp.len(), 13);
        let bad = BlockPath {
            blocks: vec![(0, 0), (2, 0)],
        };
        assert!(matches!(
            blocks_to_point_path(&bad, &f, &c, &d, &m, None),
            Err(PercolationError::NotAdjacent(..))
        ));
    }

    #[test]
    fn irregular_cells_are_reported() {
        let (c, d, _) = lattice_setup(20.0);
        let none = RegularMask::from_flags(0.2, 1.2, vec![false; c.len()]);
        let mut f = BlockField::all(2, 1, true);
        f.origin = Point::new(-4.0, -1.5);
        f.side = 4.0;
        let path = BlockPath {
            blocks: vec![(0, 0), (1, 0)],
        };
        assert!(matches!(
            blocks_to_point_path(&path, &f, &c, &d, &none, None),
            Err(PercolationError::IrregularCell { .. })
        ));
    }

    fn straight(c: &PointCloud, pts: impl Iterator<Item = Point>) -> PointPath {
        PointPath::from_indices(c, pts.map(|p| index_at(c, p)).collect())
    }

    #[test]
    fn degenerate_junction_returns_v1() {
        let (c, d, _) = lattice_setup(20.0);
        let v = straight(&c, (-8..8).map(|k| Point::new(0.5, k as f64 + 0.5)));
        let h = straight(&c, (-8..8).map(|k| Point::new(k as f64 + 0.5, 2.5)));
        let r = Window::from_bounds(-8.0, -8.0, 8.0, 8.0).unwrap();
        let j = join_paths(&d, &c, &v, &h, &v, &r, &r).unwrap();
        assert_eq!(j.indices, v.indices);
    }

    #[test]
    fn junction_turns_corner() {
        let (c, d, _) = lattice_setup(24.0);
        let v1 = straight(&c, (-10..4).map(|k| Point::new(-3.5, k as f64 + 0.5)));
        let h = straight(&c, (-6..6).map(|k| Point::new(k as f64 + 0.5, 1.5)));
        let v2 = straight(&c, (-2..10).map(|k| Point::new(3.5, k as f64 + 0.5)));
        let r = Window::from_bounds(-6.0, -2.0, 0.0, 4.0).unwrap();
        let r2 = Window::from_bounds(0.0, -2.0, 6.0, 4.0).unwrap();
        let j = join_paths(&d, &c, &v1, &h, &v2, &r, &r2).unwrap();
        assert_eq!(j.indices[0], v1.indices[0]);
        assert_eq!(j.indices.last(), v2.indices.last());
        for w in j.indices.windows(2) {
            assert!(d.are_neighbors(w[0], w[1]));
        }
        // h that stops short does not separate
        let short = straight(&c, (-6..-1).map(|k| Point::new(k as f64 + 0.5, 1.5)));
        assert!(matches!(
            join_paths(&d, &c, &v1, &short, &v2, &r, &r2),
            Err(PercolationError::NotSeparating { .. })
        ));
    }

    #[test]
    fn squares_per_side_counts() {
        assert_eq!(squares_per_side(0.25), 5);
        assert_eq!(squares_per_side(0.5), 3);
        assert_eq!(squares_per_side(0.125), 9);
        assert_eq!(squares_per_side(1.0 / 3.0), 3);
        assert_eq!(squares_per_side(2.0), 1);
    }

    fn small_grid(seed: u64) -> (GridContext, RegularGrid) {
        let eps = 0.01;
        let params = GridParams {
            eps,
            t: 0.5,
            alpha: 0.1,
            lambda: 2.0,
            big_lambda: 12,
            upsilon: 20.0,
            strategy: GridStrategy::RegularCells,
        };
        let w = Window::square(Point::ORIGIN, 1.5).unwrap();
        let spec = SamplingSpec::new(
            w,
            1.0 / (eps * eps),
            6.0 * params.lambda * eps,
            RandomStream::new(seed),
        );
        let cloud = Arc::new(sample_poisson(&spec).unwrap());
        let ctx = GridContext::new(&cloud, eps, params.alpha, params.lambda).unwrap();
        let out = assemble_grid_with(&ctx, &params).unwrap();
        let grid = out
            .grid()
            .cloned()
            .unwrap_or_else(|| panic!("{:?}", out.report()));
        (ctx, grid)
    }

    #[test]
    fn assembled_grid_validates_and_mutations_fail() {
        let (ctx, grid) = small_grid(1);
        let v = validate_grid(&grid, &ctx);
        assert!(v.all_pass(), "{v:?}");
        assert!(grid.paths_per_rect() >= 3);

        let mut fewer = grid.clone();
        fewer.horizontal[0].pop();
        assert_eq!(validate_grid(&fewer, &ctx).failing(), vec!["d"]);

        let mut swapped = grid.clone();
        let bad = (0..ctx.cloud.len())
            .find(|&i| {
                !ctx.mask.is_regular(i) && grid.row_rect(1).contains_open(ctx.cloud.point(i))
            })
            .unwrap();
        swapped.horizontal[1][0].indices[3] = bad;
        let res = validate_grid(&swapped, &ctx);
        assert!(!res.a.pass);
        assert!(res.a.witnesses[0].contains(&ctx.cloud.id(bad).to_string()));

        let json = grid.to_json();
        let back = RegularGrid::from_json(&json, &ctx.cloud).unwrap();
        assert_eq!(back.horizontal, grid.horizontal);
    }

    #[test]
    fn block_strategy_fails_when_blocks_do_not_fit() {
        let eps = 0.02;
        let params = GridParams {
            eps,
            t: 0.5,
            alpha: 0.05,
            lambda: 45.0,
            big_lambda: 12,
            upsilon: 20.0,
            strategy: GridStrategy::Blocks,
        };
        let w = Window::square(Point::ORIGIN, 1.5).unwrap();
        let spec = SamplingSpec::new(w, 1.0 / (eps * eps), 4.0 * 45.0 * eps, RandomStream::new(0));
        let cloud = Arc::new(sample_poisson(&spec).unwrap());
        let out = assemble_grid(&cloud, &params).unwrap();
        assert!(out.grid().is_none());
        assert_eq!(out.report().m, 0);
        assert!(!out.report().failures.is_empty());
    }
}
