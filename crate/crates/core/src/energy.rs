//! Discrete Dirichlet energy, its kernel variant and the pair-count functional.
//!
//! All sums use ordered pairs: a pair with both endpoints in the region is counted
//! twice, a pair leaving the region once.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CellList, NeighborIndex};
use crate::model::{Point, PointCloud, ScalarField, Window};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("interaction radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error(
        "cloud window does not contain the region enlarged by {radius}; sample with more padding"
    )]
    InsufficientPadding { radius: f64 },
    #[error("neighbor index has radius {index}, expected {expected}")]
    IndexRadius { index: f64, expected: f64 },
    #[error("neighbor index covers {index} points, the cloud has {cloud}")]
    IndexSize { index: usize, cloud: usize },
}

/// Interaction profile `a` evaluated at the rescaled offset `(x - y) / eps`,
/// supported in the open ball of radius `support`.
#[derive(Clone)]
pub struct Kernel {
    support: f64,
    profile: Arc<dyn Fn(Point) -> f64 + Send + Sync>,
}

impl Kernel {
    pub fn new(support: f64, profile: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            support,
            profile: Arc::new(profile),
        }
    }

    /// `c * 1_{B_support}`.
    pub fn indicator(support: f64, c: f64) -> Self {
        Self::new(support, move |z| if z.norm() < support { c } else { 0.0 })
    }

    pub fn support(&self) -> f64 {
        self.support
    }

    pub fn eval(&self, z: Point) -> f64 {
        if z.norm() >= self.support {
            0.0
        } else {
            (self.profile)(z)
        }
    }
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct EnergySpec {
    /// Interaction radius at cloud scale.
    pub radius: f64,
    pub region: Window,
    pub kernel: Option<Kernel>,
}

impl EnergySpec {
    pub fn new(radius: f64, region: Window) -> Self {
        Self {
            radius,
            region,
            kernel: None,
        }
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = Some(kernel);
        self
    }
}

fn check(cloud: &PointCloud, region: &Window, radius: f64) -> Result<(), EnergyError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(EnergyError::BadRadius(radius));
    }
    if !cloud.window().contains_enlarged(region, radius) {
        return Err(EnergyError::InsufficientPadding { radius });
    }
    Ok(())
}

/// Sums `term(i, j)` over `x_i` in `region` and `|x_i - x_j| < radius`, `j != i`.
/// Per-point partial sums are reduced in index order so the result is bit-stable.
fn pair_sum(
    cloud: &PointCloud,
    region: &Window,
    radius: f64,
    term: impl Fn(usize, usize) -> f64 + Sync,
) -> f64 {
    let pts = cloud.points();
    let grid = CellList::new(pts, radius);
    let partial: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            if !region.contains(pts[i]) {
                return 0.0;
            }
            let mut s = 0.0;
            grid.for_each_within(pts, pts[i], radius, |j| {
                if j != i {
                    s += term(i, j);
                }
            });
            s
        })
        .collect();
    partial.iter().sum()
}

pub fn dirichlet_energy(u: &ScalarField, spec: &EnergySpec) -> Result<f64, EnergyError> {
    let cloud = u.cloud();
    check(cloud, &spec.region, spec.radius)?;
    let v = u.values();
    Ok(pair_sum(cloud, &spec.region, spec.radius, |i, j| {
        let d = v[i] - v[j];
        d * d
    }))
}

/// Same sum as [`dirichlet_energy`] but over precomputed neighbor lists.
pub fn dirichlet_energy_indexed(
    u: &ScalarField,
    index: &NeighborIndex,
    region: &Window,
) -> Result<f64, EnergyError> {
    let cloud = u.cloud();
    check(cloud, region, index.radius())?;
    if index.len() != cloud.len() {
        return Err(EnergyError::IndexSize {
            index: index.len(),
            cloud: cloud.len(),
        });
    }
    let v = u.values();
    let pts = cloud.points();
    let partial: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            if !region.contains(pts[i]) {
                return 0.0;
            }
            index
                .neighbors(i)
                .iter()
                .map(|&j| (v[i] - v[j]).powi(2))
                .sum()
        })
        .collect();
    Ok(partial.iter().sum())
}

/// `sum_{x in A} sum_y a((x - y) / eps) (u(x) - u(y))^2`.
///
/// Without a kernel in `spec` this is the indicator of `B_{radius / eps}`, i.e. the
/// plain Dirichlet energy.
pub fn kernel_energy(u: &ScalarField, spec: &EnergySpec, eps: f64) -> Result<f64, EnergyError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(EnergyError::BadRadius(eps));
    }
    let Some(kernel) = &spec.kernel else {
        return dirichlet_energy(u, spec);
    };
    let radius = kernel.support() * eps;
    let cloud = u.cloud();
    check(cloud, &spec.region, radius)?;
    let (v, pts) = (u.values(), cloud.points());
    Ok(pair_sum(cloud, &spec.region, radius, |i, j| {
        let d = v[i] - v[j];
        kernel.eval((pts[i] - pts[j]) * (1.0 / eps)) * d * d
    }))
}

/// `eps^2 * sum_{x in A} #(cloud ∩ B_{lambda eps}(x))`, each ball count including `x`.
pub fn pair_count(
    cloud: &PointCloud,
    eps: f64,
    lambda: f64,
    region: &Window,
) -> Result<f64, EnergyError> {
    let radius = lambda * eps;
    check(cloud, region, radius)?;
    let inside = cloud
        .points()
        .iter()
        .filter(|p| region.contains(**p))
        .count() as f64;
    let pairs = pair_sum(cloud, region, radius, |_, _| 1.0);
    Ok(eps * eps * (inside + pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{
        lattice_cloud, sample_poisson, transform_cloud, SamplingSpec, Transform,
    };
    use crate::RandomStream;
    use proptest::prelude::*;

    fn padded_poisson(gamma: f64, side: f64, pad: f64, seed: u64) -> Arc<PointCloud> {
        let w = Window::square(Point::ORIGIN, side).unwrap();
        Arc::new(
            sample_poisson(&SamplingSpec::new(w, gamma, pad, RandomStream::new(seed))).unwrap(),
        )
    }

    fn brute(u: &ScalarField, region: &Window, r: f64) -> f64 {
        let c = u.cloud();
        let mut s = 0.0;
        for i in 0..c.len() {
            if !region.contains(c.point(i)) {
                continue;
            }
            for j in 0..c.len() {
                if j != i && c.point(i).dist(c.point(j)) < r {
                    s += (u.at(i) - u.at(j)).powi(2);
                }
            }
        }
        s
    }

    #[test]
    fn constant_field_has_zero_energy() {
        let c = padded_poisson(5.0, 4.0, 1.0, 1);
        let u = ScalarField::constant(&c, 3.5);
        let spec = EnergySpec::new(1.0, Window::square(Point::ORIGIN, 4.0).unwrap());
        assert_eq!(dirichlet_energy(&u, &spec).unwrap(), 0.0);
    }

    #[test]
    fn two_points_count_both_orders() {
        let w = Window::square(Point::ORIGIN, 10.0).unwrap();
        let c = Arc::new(
            PointCloud::from_points(vec![Point::new(0.0, 0.0), Point::new(0.5, 0.0)], w).unwrap(),
        );
        let u = ScalarField::new(c, vec![0.0, 1.0]).unwrap();
        let spec = EnergySpec::new(1.0, Window::square(Point::ORIGIN, 2.0).unwrap());
        assert_eq!(dirichlet_energy(&u, &spec).unwrap(), 2.0);
        // one endpoint outside the region: single count
        let spec = EnergySpec::new(1.0, Window::from_bounds(-1.0, -1.0, 0.25, 1.0).unwrap());
        assert_eq!(dirichlet_energy(&u, &spec).unwrap(), 1.0);
    }

    #[test]
    fn padding_is_enforced() {
        let c = padded_poisson(5.0, 4.0, 0.5, 1);
        let u = ScalarField::constant(&c, 0.0);
        let ok = EnergySpec::new(0.5, Window::square(Point::ORIGIN, 4.0).unwrap());
        assert!(dirichlet_energy(&u, &ok).is_ok());
        let bad = EnergySpec::new(0.6, Window::square(Point::ORIGIN, 4.0).unwrap());
        assert_eq!(
            dirichlet_energy(&u, &bad).unwrap_err(),
            EnergyError::InsufficientPadding { radius: 0.6 }
        );
        assert!(pair_count(&c, 0.1, 6.0, &Window::square(Point::ORIGIN, 4.0).unwrap()).is_err());
    }

    #[test]
    fn kernel_variants() {
        let c = padded_poisson(20.0, 3.0, 0.5, 4);
        let u = ScalarField::from_fn(&c, |p| p.x.sin() + p.y * p.y);
        let region = Window::square(Point::ORIGIN, 3.0).unwrap();
        let (eps, lambda) = (0.1, 4.0);
        let spec = EnergySpec::new(lambda * eps, region);
        let plain = dirichlet_energy(&u, &spec).unwrap();
        let ind = kernel_energy(
            &u,
            &spec.clone().with_kernel(Kernel::indicator(lambda, 1.0)),
            eps,
        )
        .unwrap();
        let half = kernel_energy(
            &u,
            &spec.clone().with_kernel(Kernel::indicator(lambda, 0.5)),
            eps,
        )
        .unwrap();
        let zero = kernel_energy(
            &u,
            &spec.clone().with_kernel(Kernel::new(lambda, |_| 0.0)),
            eps,
        )
        .unwrap();
        assert!((ind - plain).abs() <= 1e-12 * plain);
        assert_eq!(half, 0.5 * ind);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn lattice_pair_count() {
        let w = Window::square(Point::ORIGIN, 14.0).unwrap();
        let c = lattice_cloud(&w, 1.0, 0.0, &RandomStream::new(0)).unwrap();
        let a = Window::square(Point::ORIGIN, 10.0).unwrap();
        assert!((pair_count(&c, 1.0, 1.2, &a).unwrap() - 5.0 * 100.0).abs() < 1e-12);
        let empty = PointCloud::empty(w);
        assert_eq!(pair_count(&empty, 1.0, 1.2, &a).unwrap(), 0.0);
    }

    #[test]
    fn indexed_energy_agrees() {
        let c = padded_poisson(10.0, 4.0, 0.7, 9);
        let u = ScalarField::from_fn(&c, |p| p.x * p.y);
        let idx = crate::geometry::build_neighbor_index(&c, 0.7).unwrap();
        let region = Window::square(Point::ORIGIN, 4.0).unwrap();
        let a = dirichlet_energy(&u, &EnergySpec::new(0.7, region)).unwrap();
        let b = dirichlet_energy_indexed(&u, &idx, &region).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn zero_energy_iff_constant_on_components() {
        // two clusters further apart than the radius
        let w = Window::square(Point::ORIGIN, 20.0).unwrap();
        let pts = vec![
            Point::new(-3.0, 0.0),
            Point::new(-2.6, 0.2),
            Point::new(3.0, 0.0),
            Point::new(3.3, -0.1),
        ];
        let c = Arc::new(PointCloud::from_points(pts, w).unwrap());
        let spec = EnergySpec::new(1.0, Window::square(Point::ORIGIN, 10.0).unwrap());
        let u = ScalarField::new(Arc::clone(&c), vec![1.0, 1.0, -2.0, -2.0]).unwrap();
        assert_eq!(dirichlet_energy(&u, &spec).unwrap(), 0.0);
        let u = ScalarField::new(c, vec![1.0, 1.0, -2.0, -1.0]).unwrap();
        assert!(dirichlet_energy(&u, &spec).unwrap() > 0.0);
    }

    #[test]
    fn isometry_equivariance() {
        let c = padded_poisson(8.0, 4.0, 1.5, 12);
        let u = ScalarField::from_fn(&c, |p| (p.x - 0.3 * p.y).powi(3));
        let region = Window::square(Point::ORIGIN, 4.0).unwrap();
        let e0 = dirichlet_energy(&u, &EnergySpec::new(0.8, region)).unwrap();
        for op in [
            Transform::Rotate(0.6),
            Transform::Translate(Point::new(5.0, -2.0)),
        ] {
            let moved = Arc::new(transform_cloud(&c, op).unwrap());
            let v = u.rebind(&moved).unwrap();
            let mregion = op.apply_window(&region).unwrap();
            let e1 = dirichlet_energy(&v, &EnergySpec::new(0.8, mregion)).unwrap();
            assert!((e0 - e1).abs() <= 1e-9 * e0, "{op:?}: {e0} vs {e1}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_matches_brute_force_and_is_subadditive(
            seed in 0u64..10_000,
            r in 0.2f64..1.2,
            split in -1.5f64..1.5,
        ) {
            let c = padded_poisson(12.0, 4.0, 1.2, seed);
            let mut rng = RandomStream::new(seed).derive(1).rng();
            let vals = (0..c.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let u = ScalarField::new(Arc::clone(&c), vals).unwrap();
            let region = Window::square(Point::ORIGIN, 4.0).unwrap();
            let e = dirichlet_energy(&u, &EnergySpec::new(r, region)).unwrap();
            let b = brute(&u, &region, r);
            prop_assert!((e - b).abs() <= 1e-12 * b.max(1.0));
            prop_assert!(e >= 0.0);

            let left = Window::from_bounds(-2.0, -2.0, split, 2.0).unwrap();
            let right = Window::from_bounds(split, -2.0, 2.0, 2.0).unwrap();
            let el = dirichlet_energy(&u, &EnergySpec::new(r, left)).unwrap();
            let er = dirichlet_energy(&u, &EnergySpec::new(r, right)).unwrap();
            prop_assert!(e <= el + er + 1e-12 * e.max(1.0));
        }
    }
}
