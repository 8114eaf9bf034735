//! Poisson and lattice point clouds, and the transforms used by invariance checks.

use thiserror::Error;

use crate::model::{
    CloudMeta, ModelError, Point, PointCloud, PointId, RandomStream, StreamRng, TransformRecord,
    Window,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("intensity must be finite and non-negative, got {0}")]
    BadIntensity(f64),
    #[error("padding must be finite and non-negative, got {0}")]
    BadPadding(f64),
    #[error("scale factor must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("lattice spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("jitter {jitter} must lie in [0, spacing/2) for spacing {spacing}")]
    BadJitter { jitter: f64, spacing: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to draw one Poisson realization.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSpec {
    pub window: Window,
    /// Points per unit area.
    pub intensity: f64,
    /// Margin added on every side of `window` before sampling.
    pub padding: f64,
    pub stream: RandomStream,
}

impl SamplingSpec {
    pub fn new(window: Window, intensity: f64, padding: f64, stream: RandomStream) -> Self {
        Self {
            window,
            intensity,
            padding,
            stream,
        }
    }

    pub fn padded_window(&self) -> Result<Window, ModelError> {
        self.window.enlarged(self.padding)
    }
}

/// Draw `N ~ Poisson(gamma * |padded window|)` and place `N` i.i.d. uniform points.
pub fn sample_poisson(spec: &SamplingSpec) -> Result<PointCloud, SamplingError> {
    if !spec.intensity.is_finite() || spec.intensity < 0.0 {
        return Err(SamplingError::BadIntensity(spec.intensity));
    }
    if !spec.padding.is_finite() || spec.padding < 0.0 {
        return Err(SamplingError::BadPadding(spec.padding));
    }
    let w = spec.window;
    Window::rotated(w.center, w.width, w.height, w.angle)?;
    let padded = spec.padded_window()?;

    let mut rng = spec.stream.rng();
    let n = poisson(&mut rng, spec.intensity * padded.area());
    let (hw, hh) = (0.5 * padded.width, 0.5 * padded.height);
    let points: Vec<Point> = (0..n)
        .map(|_| {
            let lx = rng.uniform_in(-hw, hw);
            let ly = rng.uniform_in(-hh, hh);
            padded.from_local(Point::new(lx, ly))
        })
        .collect();
    let ids = (0..n).map(PointId).collect();
    let meta = CloudMeta {
        seed: spec.stream.seed,
        gamma: spec.intensity,
        transforms: Vec::new(),
    };
    Ok(PointCloud::new(points, ids, padded, meta)?)
}

/// Poisson variate with mean `mu`.
///
/// Multiplication of uniforms below 10, transformed rejection
/// with squeeze (PTRS) above.
pub fn poisson(rng: &mut StreamRng, mu: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    if mu < 10.0 {
        let limit = (-mu).exp();
        let mut k = 0u64;
        let mut prod = rng.uniform_pos();
        while prod > limit {
            k += 1;
            prod *= rng.uniform_pos();
        }
        return k;
    }
    let smu = mu.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    let log_mu = mu.ln();
    loop {
        let u = rng.uniform() - 0.5;
        let v = rng.uniform_pos();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mu + k * log_mu - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// `ln(k!)`: exact summation for small `k`, Stirling series beyond.
pub fn ln_factorial(k: u64) -> f64 {
    if k < 16 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let n = k as f64;
    let inv = 1.0 / n;
    let inv2 = inv * inv;
    n * n.ln() - n
        + 0.5 * (2.0 * std::f64::consts::PI * n).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// Rigid motions and dilations applied to a whole cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Scale(f64),
    Translate(Point),
    /// Counter-clockwise rotation about the origin.
    Rotate(f64),
}

impl Transform {
    pub fn apply(&self, p: Point) -> Point {
        match *self {
            Transform::Scale(s) => p * s,
            Transform::Translate(v) => p + v,
            Transform::Rotate(theta) => p.rotated(theta),
        }
    }

    pub fn apply_window(&self, w: &Window) -> Result<Window, ModelError> {
        match *self {
            Transform::Scale(s) => {
                Window::rotated(w.center * s, w.width * s, w.height * s, w.angle)
            }
            Transform::Translate(v) => Window::rotated(w.center + v, w.width, w.height, w.angle),
            Transform::Rotate(theta) => {
                Window::rotated(w.center.rotated(theta), w.width, w.height, w.angle + theta)
            }
        }
    }

    fn record(&self) -> TransformRecord {
        match *self {
            Transform::Scale(factor) => TransformRecord::Scale { factor },
            Transform::Translate(by) => TransformRecord::Translate { by },
            Transform::Rotate(angle) => TransformRecord::Rotate { angle },
        }
    }
}

pub fn transform_cloud(cloud: &PointCloud, op: Transform) -> Result<PointCloud, SamplingError> {
    if let Transform::Scale(s) = op {
        if !(s.is_finite() && s > 0.0) {
            return Err(SamplingError::BadScale(s));
        }
    }
    let window = op.apply_window(cloud.window())?;
    Ok(cloud.mapped(window, op.record(), |p| op.apply(p))?)
}

/// Sites `h * (Z + 1/2)^2` inside `window`, each displaced uniformly within a disc of
/// radius `jitter`.
///
/// With positive jitter the returned cloud's window is `window` enlarged by `jitter`
/// so that displaced sites stay inside it.
pub fn lattice_cloud(
    window: &Window,
    spacing: f64,
    jitter: f64,
    stream: &RandomStream,
) -> Result<PointCloud, SamplingError> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(SamplingError::BadSpacing(spacing));
    }
    if !(jitter.is_finite() && jitter >= 0.0 && jitter < 0.5 * spacing) {
        return Err(SamplingError::BadJitter { jitter, spacing });
    }
    let (lo, hi) = window.bounding_box();
    let i0 = (lo.x / spacing - 0.5).floor() as i64;
    let i1 = (hi.x / spacing - 0.5).ceil() as i64;
    let j0 = (lo.y / spacing - 0.5).floor() as i64;
    let j1 = (hi.y / spacing - 0.5).ceil() as i64;

    let mut rng = stream.rng();
    let mut points = Vec::new();
    for j in j0..=j1 {
        for i in i0..=i1 {
            let site = Point::new((i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing);
            if !window.contains(site) {
                continue;
            }
            let offset = if jitter > 0.0 {
                disc(&mut rng) * jitter
            } else {
                Point::ORIGIN
            };
            points.push(site + offset);
        }
    }
    let cloud_window = if jitter > 0.0 {
        window.enlarged(jitter)?
    } else {
        *window
    };
    let ids = (0..points.len() as u64).map(PointId).collect();
    let meta = CloudMeta {
        seed: stream.seed,
        gamma: 1.0 / (spacing * spacing),
        transforms: Vec::new(),
    };
    Ok(PointCloud::new(points, ids, cloud_window, meta)?)
}

fn disc(rng: &mut StreamRng) -> Point {
    loop {
        let p = Point::new(rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
        if p.norm_sq() < 1.0 {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(gamma: f64, side: f64, seed: u64) -> SamplingSpec {
        SamplingSpec::new(
            Window::square(Point::ORIGIN, side).unwrap(),
            gamma,
            0.0,
            RandomStream::new(seed),
        )
    }

    #[test]
    fn zero_intensity_is_empty() {
        let c = sample_poisson(&unit_spec(0.0, 10.0, 1)).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn rejects_bad_intensity() {
        assert!(sample_poisson(&unit_spec(f64::NAN, 1.0, 1)).is_err());
        assert!(sample_poisson(&unit_spec(-1.0, 1.0, 1)).is_err());
        assert!(sample_poisson(&unit_spec(f64::INFINITY, 1.0, 1)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_poisson(&unit_spec(2.0, 10.0, 42)).unwrap();
        let b = sample_poisson(&unit_spec(2.0, 10.0, 42)).unwrap();
        assert_eq!(a, b);
        let c = sample_poisson(&unit_spec(2.0, 10.0, 43)).unwrap();
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn padding_enlarges_window() {
        let mut spec = unit_spec(1.0, 4.0, 3);
        spec.padding = 1.5;
        let c = sample_poisson(&spec).unwrap();
        assert!((c.window().width - 7.0).abs() < 1e-15);
        assert!(c
            .points()
            .iter()
            .any(|p| p.x.abs() > 2.0 || p.y.abs() > 2.0));
    }

    #[test]
    fn poisson_small_and_large_mean() {
        let s = RandomStream::new(9);
        for (mu, seeds) in [(3.5, 4000u64), (250.0, 2000)] {
            let xs: Vec<f64> = (0..seeds)
                .map(|k| poisson(&mut s.derive(k).rng(), mu) as f64)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (mu / n).sqrt();
            assert!((mean - mu).abs() < 4.0 * se, "mu={mu} mean={mean}");
            assert!((var / mu - 1.0).abs() < 0.15, "mu={mu} var={var}");
        }
    }

    #[test]
    fn ln_factorial_matches_direct_sum() {
        for k in [0u64, 1, 5, 15, 16, 17, 40, 200] {
            let direct: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
            assert!(
                (ln_factorial(k) - direct).abs() < 1e-9 * direct.max(1.0),
                "k={k}"
            );
        }
    }

    #[test]
    fn scale_by_one_is_identity() {
        let c = sample_poisson(&unit_spec(5.0, 3.0, 1)).unwrap();
        let s = transform_cloud(&c, Transform::Scale(1.0)).unwrap();
        assert_eq!(c.points(), s.points());
        assert_eq!(s.meta().transforms.len(), 1);
    }

    #[test]
    fn scale_preserves_region_counts() {
        let c = sample_poisson(&unit_spec(5.0, 6.0, 2)).unwrap();
        let eps = 0.37;
        let s = transform_cloud(&c, Transform::Scale(eps)).unwrap();
        let a = Window::new(Point::new(0.4, -0.3), 2.0, 1.5).unwrap();
        let ea = Transform::Scale(eps).apply_window(&a).unwrap();
        assert_eq!(c.count_in(&a), s.count_in(&ea));
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let c = PointCloud::empty(Window::unit());
        assert!(transform_cloud(&c, Transform::Scale(0.0)).is_err());
        assert!(transform_cloud(&c, Transform::Scale(-2.0)).is_err());
    }

    #[test]
    fn rotation_preserves_distances() {
        let c = sample_poisson(&unit_spec(3.0, 4.0, 5)).unwrap();
        let r = transform_cloud(&c, Transform::Rotate(0.7)).unwrap();
        for i in (0..c.len()).step_by(7) {
            for j in (0..c.len()).step_by(11) {
                let d0 = c.point(i).dist(c.point(j));
                let d1 = r.point(i).dist(r.point(j));
                assert!((d0 - d1).abs() <= 1e-12 * d0.max(1.0));
            }
        }
        assert_eq!(c.ids(), r.ids());
    }

    #[test]
    fn scale_round_trip() {
        let c = sample_poisson(&unit_spec(3.0, 4.0, 6)).unwrap();
        let s = transform_cloud(&c, Transform::Scale(3.7)).unwrap();
        let back = transform_cloud(&s, Transform::Scale(1.0 / 3.7)).unwrap();
        for (p, q) in c.points().iter().zip(back.points()) {
            assert!(p.dist(*q) <= 1e-12);
        }
    }

    #[test]
    fn lattice_enumeration() {
        let w = Window::square(Point::ORIGIN, 4.0).unwrap();
        let c = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        assert_eq!(c.len(), 16);
        for p in c.points() {
            assert_eq!(p.x.abs().fract(), 0.5);
            assert_eq!(p.y.abs().fract(), 0.5);
        }
    }

    #[test]
    fn lattice_nearest_neighbor_is_spacing() {
        let w = Window::square(Point::ORIGIN, 6.0).unwrap();
        let c = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        for (i, p) in c.points().iter().enumerate() {
            let nn = c
                .points()
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| p.dist(*q))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(nn, 1.0);
        }
    }

    #[test]
    fn lattice_jitter_bounded() {
        let w = Window::square(Point::ORIGIN, 8.0).unwrap();
        let exact = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        let jit = lattice_cloud(&w, 1.0, 0.1, &RandomStream::new(4)).unwrap();
        assert_eq!(exact.len(), jit.len());
        for (p, q) in exact.points().iter().zip(jit.points()) {
            assert!(p.dist(*q) <= 0.1);
        }
        assert!(lattice_cloud(&w, 1.0, 0.5, &RandomStream::new(4)).is_err());
    }
}
