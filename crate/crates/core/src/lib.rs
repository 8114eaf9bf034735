//! Numerical toolkit for quadratic pair energies on planar Poisson point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the shared value types ([`Window`], [`PointCloud`], [`ScalarField`])
//!   and the splittable random streams every experiment draws from.
//! * [`sampling`] generates Poisson and lattice clouds and applies rigid/scaling transforms.
//! * [`geometry`] builds fixed-radius neighbor lists, clipped Voronoi diagrams and the
//!   regular sub-cluster mask.
//! * [`energy`] evaluates the discrete Dirichlet energy, its kernel variant and pair counts.
//! * [`cell_problem`] assembles and solves the affine-clamped cell problem and estimates
//!   the homogenized constant.
//! * [`percolation`] classifies blocks, extracts disjoint crossings and assembles regular grids.
//! * [`coarse_grain`] averages fields over grids and reports grid-restricted distances.
//! * [`io`] reads and writes the text formats for clouds and fields.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell_problem;
pub mod coarse_grain;
pub mod energy;
pub mod geometry;
pub mod io;
pub mod model;
pub mod percolation;
pub mod sampling;

pub use model::{
    ModelError, Point, PointCloud, PointId, RandomStream, ScalarField, TransformRecord, Window,
};
