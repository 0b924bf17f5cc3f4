//! Point clouds and the reconstruction objectives defined on them.

mod chamfer;
pub mod io;
pub mod nn;
mod transform;

pub use chamfer::{
    chamfer_distance, chamfer_mean, chamfer_op, per_point_error, recon_log_likelihood,
    sigma_chamfer, sigma_chamfer_op, LogLikelihood,
};
pub use nn::{nearest_neighbor, KdTree, Neighbor, NnBackend};
pub use transform::{augment, normalize, rotation_matrix, AugmentParams, NormalizationRecord};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Default number of points per cloud.
pub const DEFAULT_POINTS: usize = 2048;

/// An unordered set of 3-D points. Consumers must not depend on point order.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::usage("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} of cloud")));
        }
        Ok(PointCloud { points })
    }

    /// Builds a cloud from a `[N, 3]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [_, 3] => Self::from_flat(t.data()),
            s => Err(Error::dim(format!("expected [N, 3], got {s:?}"))),
        }
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(Error::dim("flat coordinate buffer is not a multiple of 3"));
        }
        Self::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 3], self.flat()).expect("non-empty cloud")
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        (lo, hi)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// A predicted cloud together with a diagonal Gaussian around every
/// predicted point: one variance per point and coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconDistribution {
    pub mean: PointCloud,
    pub var: Vec<Point>,
}

impl ReconDistribution {
    pub fn new(mean: PointCloud, var: Vec<Point>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::dim(format!(
                "{} variances for {} predicted points",
                var.len(),
                mean.len()
            )));
        }
        if let Some(v) = var.iter().flatten().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::domain(format!(
                "variance {v} is not strictly positive"
            )));
        }
        Ok(ReconDistribution { mean, var })
    }

    /// Unit variance everywhere.
    pub fn unit(mean: PointCloud) -> Self {
        let var = vec![[1.0; 3]; mean.len()];
        ReconDistribution { mean, var }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}
