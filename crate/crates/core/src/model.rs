//! Shared domain types: points, windows, clouds, fields and random streams.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("window must have positive finite size, got {width} x {height}")]
    DegenerateWindow { width: f64, height: f64 },
    #[error("duplicate point at ({x}, {y}) for ids {first} and {second}")]
    DuplicatePoint {
        x: f64,
        y: f64,
        first: PointId,
        second: PointId,
    },
    #[error("point {id} at ({x}, {y}) lies outside the cloud window")]
    OutsideWindow { id: PointId, x: f64, y: f64 },
    #[error("ids must be strictly ascending (id {0} is out of order)")]
    UnorderedIds(PointId),
    #[error("{points} points but {ids} ids")]
    LengthMismatch { points: usize, ids: usize },
    #[error("field has {values} values but the cloud has {points} points")]
    FieldLength { values: usize, points: usize },
    #[error("unknown point id {0}")]
    UnknownId(PointId),
    #[error("field is bound to a different cloud")]
    ForeignCloud,
}

/// A point (or vector) of the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        (self - other).norm_sq()
    }

    /// Counter-clockwise rotation by `angle` radians about the origin.
    pub fn rotated(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Stable label of a cloud point; survives every transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub u64);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An oriented rectangle `center + M(angle) * ([-w/2, w/2) x [-h/2, h/2))`.
///
/// Membership is half-open in the local frame so that windows sharing an edge
/// partition the points between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center: Point,
    pub width: f64,
    pub height: f64,
    /// Counter-clockwise orientation in radians.
    #[serde(default)]
    pub angle: f64,
}

impl Window {
    pub fn new(center: Point, width: f64, height: f64) -> Result<Self, ModelError> {
        Self::rotated(center, width, height, 0.0)
    }

    pub fn rotated(center: Point, width: f64, height: f64, angle: f64) -> Result<Self, ModelError> {
        let ok = width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0;
        if !ok || !center.is_finite() || !angle.is_finite() {
            return Err(ModelError::DegenerateWindow { width, height });
        }
        Ok(Self {
            center,
            width,
            height,
            angle,
        })
    }

    /// `Q_r(x) = x + r Q` with `Q = (-1/2, 1/2)^2`.
    pub fn square(center: Point, side: f64) -> Result<Self, ModelError> {
        Self::new(center, side, side)
    }

    /// The unit square `Q` centered at the origin.
    pub fn unit() -> Self {
        Self {
            center: Point::ORIGIN,
            width: 1.0,
            height: 1.0,
            angle: 0.0,
        }
    }

    pub fn from_bounds(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, ModelError> {
        Self::new(
            Point::new(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
            x1 - x0,
            y1 - y0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.angle == 0.0
    }

    pub fn to_local(&self, p: Point) -> Point {
        (p - self.center).rotated(-self.angle)
    }

    pub fn from_local(&self, p: Point) -> Point {
        p.rotated(self.angle) + self.center
    }

    pub fn contains(&self, p: Point) -> bool {
        let l = self.to_local(p);
        let (hw, hh) = (0.5 * self.width, 0.5 * self.height);
        -hw <= l.x && l.x < hw && -hh <= l.y && l.y < hh
    }

    pub fn contains_closed(&self, p: Point, tol: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.width + tol && l.y.abs() <= 0.5 * self.height + tol
    }

    /// Strict interior membership.
    pub fn contains_open(&self, p: Point) -> bool {
        let l = self.to_local(p);
        l.x.abs() < 0.5 * self.width && l.y.abs() < 0.5 * self.height
    }

    /// Distance from `p` to the boundary, for `p` inside the window.
    /// Negative outside (minus the distance to the window).
    pub fn dist_to_boundary(&self, p: Point) -> f64 {
        let l = self.to_local(p);
        let dx = 0.5 * self.width - l.x.abs();
        let dy = 0.5 * self.height - l.y.abs();
        if dx >= 0.0 && dy >= 0.0 {
            dx.min(dy)
        } else {
            -self.dist_to(p)
        }
    }

    /// Euclidean distance from `p` to the closed window (zero inside).
    pub fn dist_to(&self, p: Point) -> f64 {
        let l = self.to_local(p);
        let dx = (l.x.abs() - 0.5 * self.width).max(0.0);
        let dy = (l.y.abs() - 0.5 * self.height).max(0.0);
        dx.hypot(dy)
    }

    /// Corners in counter-clockwise order starting at the local lower-left.
    pub fn corners(&self) -> [Point; 4] {
        let (hw, hh) = (0.5 * self.width, 0.5 * self.height);
        [
            self.from_local(Point::new(-hw, -hh)),
            self.from_local(Point::new(hw, -hh)),
            self.from_local(Point::new(hw, hh)),
            self.from_local(Point::new(-hw, hh)),
        ]
    }

    /// Same center and orientation, each side pushed out by `margin`.
    pub fn enlarged(&self, margin: f64) -> Result<Window, ModelError> {
        Window::rotated(
            self.center,
            self.width + 2.0 * margin,
            self.height + 2.0 * margin,
            self.angle,
        )
    }

    /// Whether the `r`-enlargement `(other)_r` lies inside `self`.
    pub fn contains_enlarged(&self, other: &Window, r: f64) -> bool {
        let scale = self.width.max(self.height).max(1.0);
        let tol = 1e-9 * scale;
        other.corners().iter().all(|&c| {
            let l = self.to_local(c);
            l.x.abs() + r <= 0.5 * self.width + tol && l.y.abs() + r <= 0.5 * self.height + tol
        })
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let cs = self.corners();
        let mut lo = cs[0];
        let mut hi = cs[0];
        for c in &cs[1..] {
            lo.x = lo.x.min(c.x);
            lo.y = lo.y.min(c.y);
            hi.x = hi.x.max(c.x);
            hi.y = hi.y.max(c.y);
        }
        (lo, hi)
    }
}

/// One entry of a cloud's transform history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TransformRecord {
    Scale { factor: f64 },
    Translate { by: Point },
    Rotate { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudMeta {
    pub seed: u64,
    /// Intensity the cloud was sampled at (points per unit area before transforms).
    pub gamma: f64,
    pub transforms: Vec<TransformRecord>,
}

/// A finite simple point set with stable ids, sampled inside `window`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    ids: Vec<PointId>,
    window: Window,
    meta: CloudMeta,
}

impl PointCloud {
    pub fn new(
        points: Vec<Point>,
        ids: Vec<PointId>,
        window: Window,
        meta: CloudMeta,
    ) -> Result<Self, ModelError> {
        if points.len() != ids.len() {
            return Err(ModelError::LengthMismatch {
                points: points.len(),
                ids: ids.len(),
            });
        }
        if let Some(w) = ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(ModelError::UnorderedIds(w[1]));
        }
        let tol = 1e-9 * window.width.max(window.height).max(1.0);
        for (p, &id) in points.iter().zip(&ids) {
            if !p.is_finite() || !window.contains_closed(*p, tol) {
                return Err(ModelError::OutsideWindow { id, x: p.x, y: p.y });
            }
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            (points[a].x, points[a].y)
                .partial_cmp(&(points[b].x, points[b].y))
                .expect("finite coordinates")
        });
        for w in order.windows(2) {
            if points[w[0]] == points[w[1]] {
                let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(ModelError::DuplicatePoint {
                    x: points[a].x,
                    y: points[a].y,
                    first: ids[a],
                    second: ids[b],
                });
            }
        }
        Ok(Self {
            points,
            ids,
            window,
            meta,
        })
    }

    /// Cloud with ids `0..n` in the given order.
    pub fn from_points(points: Vec<Point>, window: Window) -> Result<Self, ModelError> {
        let ids = (0..points.len() as u64).map(PointId).collect();
        let meta = CloudMeta {
            seed: 0,
            gamma: 0.0,
            transforms: Vec::new(),
        };
        Self::new(points, ids, window, meta)
    }

    pub fn empty(window: Window) -> Self {
        Self::from_points(Vec::new(), window).expect("empty cloud is valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn point(&self, index: usize) -> Point {
        self.points[index]
    }

    pub fn id(&self, index: usize) -> PointId {
        self.ids[index]
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn meta(&self) -> &CloudMeta {
        &self.meta
    }

    /// Position of `id` in the point arrays.
    pub fn index_of(&self, id: PointId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn count_in(&self, region: &Window) -> usize {
        self.points.iter().filter(|p| region.contains(**p)).count()
    }

    /// Same ids and order, new coordinates and window, with `record` appended to the log.
    pub(crate) fn mapped(
        &self,
        window: Window,
        record: TransformRecord,
        f: impl Fn(Point) -> Point,
    ) -> Result<Self, ModelError> {
        let points = self.points.iter().map(|&p| f(p)).collect();
        let mut meta = self.meta.clone();
        meta.transforms.push(record);
        Self::new(points, self.ids.clone(), window, meta)
    }
}

/// Real values indexed by the points of one cloud.
#[derive(Debug, Clone)]
pub struct ScalarField {
    cloud: Arc<PointCloud>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(cloud: Arc<PointCloud>, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != cloud.len() {
            return Err(ModelError::FieldLength {
                values: values.len(),
                points: cloud.len(),
            });
        }
        Ok(Self { cloud, values })
    }

    pub fn from_fn(cloud: &Arc<PointCloud>, f: impl Fn(Point) -> f64) -> Self {
        let values = cloud.points().iter().map(|&p| f(p)).collect();
        Self {
            cloud: Arc::clone(cloud),
            values,
        }
    }

    pub fn constant(cloud: &Arc<PointCloud>, c: f64) -> Self {
        Self::from_fn(cloud, |_| c)
    }

    /// Build from `(id, value)` pairs; every cloud id must appear exactly once.
    pub fn from_pairs(
        cloud: &Arc<PointCloud>,
        pairs: impl IntoIterator<Item = (PointId, f64)>,
    ) -> Result<Self, ModelError> {
        let mut values = vec![f64::NAN; cloud.len()];
        let mut seen = vec![false; cloud.len()];
        for (id, v) in pairs {
            let i = cloud.index_of(id).ok_or(ModelError::UnknownId(id))?;
            if seen[i] {
                return Err(ModelError::UnknownId(id));
            }
            seen[i] = true;
            values[i] = v;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::FieldLength {
                values: seen.iter().filter(|s| **s).count(),
                points: cloud.len().max(i + 1),
            });
        }
        Ok(Self {
            cloud: Arc::clone(cloud),
            values,
        })
    }

    pub fn cloud(&self) -> &Arc<PointCloud> {
        &self.cloud
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn get(&self, id: PointId) -> Result<f64, ModelError> {
        self.cloud
            .index_of(id)
            .map(|i| self.values[i])
            .ok_or(ModelError::UnknownId(id))
    }

    /// Same values (matched by id) on another cloud with identical ids,
    /// e.g. a transformed copy of the domain cloud.
    pub fn rebind(&self, cloud: &Arc<PointCloud>) -> Result<Self, ModelError> {
        if cloud.ids() != self.cloud.ids() {
            return Err(ModelError::ForeignCloud);
        }
        Ok(Self {
            cloud: Arc::clone(cloud),
            values: self.values.clone(),
        })
    }

    pub fn is_bound_to(&self, cloud: &PointCloud) -> bool {
        std::ptr::eq(self.cloud.as_ref(), cloud) || self.cloud.ids() == cloud.ids()
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> Result<Self, ModelError> {
        if !other.is_bound_to(&self.cloud) {
            return Err(ModelError::ForeignCloud);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            cloud: Arc::clone(&self.cloud),
            values,
        })
    }
}

/// Deterministic splittable stream: a master seed plus a substream path.
///
/// The generator for a stream is ChaCha12 keyed by SHA-256 of the seed and the
/// path, so draws depend only on `(seed, path)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub path: Vec<u64>,
}

impl RandomStream {
    pub const ALGORITHM: &'static str = "chacha12-sha256path-v1";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn with_path(seed: u64, path: Vec<u64>) -> Self {
        Self { seed, path }
    }

    pub fn derive(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self {
            seed: self.seed,
            path,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(Self::ALGORITHM.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.path.len() as u64).to_le_bytes());
        for label in &self.path {
            h.update(label.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        key
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng {
            inner: ChaCha12Rng::from_seed(self.key()),
        }
    }
}

/// Generator handed out by [`RandomStream::rng`].
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha12Rng,
}

impl StreamRng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`; safe to take the logarithm of.
    pub fn uniform_pos(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand_core::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
