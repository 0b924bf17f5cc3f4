//! Chamfer distance, its variance-weighted counterpart and the Gaussian
//! reconstruction log-likelihood.
//!
//! The plain functions operate on single clouds and return `f64`; the `*_op`
//! functions record the same quantities on a [`Graph`] for batches of clouds
//! laid out as `[B, N, 3]` tensors and return one value per cloud.

use std::f64::consts::PI;

use super::nn::{nearest_all, Neighbor, NnBackend};
use super::{Point, PointCloud, ReconDistribution};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

fn as_points(data: &[f64]) -> &[Point] {
    let n = data.len() / 3;
    // SAFETY: [f64; 3] has the size and alignment of three consecutive f64,
    // and `n * 3 <= data.len()`.
    unsafe { std::slice::from_raw_parts(data.as_ptr() as *const Point, n) }
}

/// Matches in both directions: for every point of `x` its nearest point in
/// `y`, and vice versa.
fn matches(x: &[Point], y: &[Point]) -> Result<(Vec<Neighbor>, Vec<Neighbor>)> {
    Ok((
        nearest_all(x, y, NnBackend::Auto)?,
        nearest_all(y, x, NnBackend::Auto)?,
    ))
}

/// Sum over both clouds of the squared distance to the nearest point of the
/// other cloud.
pub fn chamfer_distance(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let (fw, bw) = matches(x.points(), y.points())?;
    Ok(fw.iter().map(|n| n.dist2).sum::<f64>() + bw.iter().map(|n| n.dist2).sum::<f64>())
}

/// Per-point averaged Chamfer distance: the mean nearest-neighbour squared
/// distance of each direction, added. Comparable across point counts.
pub fn chamfer_mean(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let (fw, bw) = matches(x.points(), y.points())?;
    Ok(fw.iter().map(|n| n.dist2).sum::<f64>() / fw.len() as f64
        + bw.iter().map(|n| n.dist2).sum::<f64>() / bw.len() as f64)
}

/// Squared distance from every point of `x` to its nearest point in `y`.
pub fn per_point_error(x: &PointCloud, y: &PointCloud) -> Result<Vec<f64>> {
    Ok(nearest_all(x.points(), y.points(), NnBackend::Auto)?
        .into_iter()
        .map(|n| n.dist2)
        .collect())
}

#[inline]
fn weighted_dist(p: &Point, q: &Point, var: &Point) -> f64 {
    let d0 = p[0] - q[0];
    let d1 = p[1] - q[1];
    let d2 = p[2] - q[2];
    d0 * d0 / var[0] + d1 * d1 / var[1] + d2 * d2 / var[2]
}

/// Correspondences of the variance-weighted Chamfer distance.
/// `to_pred[i]` is the predicted point matched to input `i`, `to_input[j]`
/// the input point matched to prediction `j`.
fn sigma_matches(
    x: &[Point],
    mean: &[Point],
    var: &[Point],
    weighted: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !weighted {
        let (fw, bw) = matches(x, mean)?;
        return Ok((
            fw.into_iter().map(|n| n.index).collect(),
            bw.into_iter().map(|n| n.index).collect(),
        ));
    }
    let argmin = |f: &dyn Fn(usize) -> f64, n: usize| {
        let mut best = (0, f(0));
        for i in 1..n {
            let d = f(i);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    };
    let to_pred = x
        .iter()
        .map(|p| argmin(&|j| weighted_dist(p, &mean[j], &var[j]), mean.len()))
        .collect();
    let to_input = mean
        .iter()
        .zip(var)
        .map(|(m, v)| argmin(&|i| weighted_dist(&x[i], m, v), x.len()))
        .collect();
    Ok((to_pred, to_input))
}

fn sigma_value(
    x: &[Point],
    mean: &[Point],
    var: &[Point],
    to_pred: &[usize],
    to_input: &[usize],
) -> f64 {
    let t1: f64 = x
        .iter()
        .zip(to_pred)
        .map(|(p, &j)| weighted_dist(p, &mean[j], &var[j]))
        .sum();
    let t2: f64 = mean
        .iter()
        .zip(var)
        .zip(to_input)
        .map(|((m, v), &i)| weighted_dist(&x[i], m, v) + v[0].ln() + v[1].ln() + v[2].ln())
        .sum();
    t1 + t2
}

fn check_var(var: &[Point]) -> Result<()> {
    match var.iter().flatten().find(|&&v| !(v > 0.0)) {
        Some(v) => Err(Error::domain(format!(
            "variance {v} is not strictly positive"
        ))),
        None => Ok(()),
    }
}

/// Variance-modelling Chamfer distance.
///
/// Every input point contributes its weighted squared distance
/// `Σ_c (p_c − p̂_c)² / σ²_c` to the matched predicted point; every predicted
/// point contributes the weighted distance to its matched input point plus
/// `Σ_c ln σ²_c`. With `weighted_matching = false` correspondences are plain
/// Euclidean nearest neighbours; with `true` they minimise the weighted
/// distance itself.
pub fn sigma_chamfer(
    x: &PointCloud,
    recon: &ReconDistribution,
    weighted_matching: bool,
) -> Result<f64> {
    check_var(&recon.var)?;
    let (tp, ti) = sigma_matches(
        x.points(),
        recon.mean.points(),
        &recon.var,
        weighted_matching,
    )?;
    Ok(sigma_value(
        x.points(),
        recon.mean.points(),
        &recon.var,
        &tp,
        &ti,
    ))
}

/// Gaussian log-likelihood of an input cloud under a predicted distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihood {
    /// Sum over input points.
    pub total: f64,
    /// Log-density of each input point under its nearest predicted point.
    pub per_point: Vec<f64>,
}

impl LogLikelihood {
    pub fn mean(&self) -> f64 {
        self.total / self.per_point.len() as f64
    }
}

/// Log-density of every input point under the diagonal Gaussian of its
/// (Euclidean) nearest predicted point.
pub fn recon_log_likelihood(x: &PointCloud, recon: &ReconDistribution) -> Result<LogLikelihood> {
    check_var(&recon.var)?;
    let ln2pi = (2.0 * PI).ln();
    let nn = nearest_all(x.points(), recon.mean.points(), NnBackend::Auto)?;
    let per_point: Vec<f64> = x
        .points()
        .iter()
        .zip(&nn)
        .map(|(p, n)| {
            let m = &recon.mean.points()[n.index];
            let v = &recon.var[n.index];
            let mut s = 0.0;
            for c in 0..3 {
                let d = p[c] - m[c];
                s += d * d / v[c] + v[c].ln() + ln2pi;
            }
            -0.5 * s
        })
        .collect();
    Ok(LogLikelihood {
        total: per_point.iter().sum(),
        per_point,
    })
}

// ---- graph operations ------------------------------------------------------

/// `(batch, points)` of a `[N, 3]` or `[B, N, 3]` tensor.
fn cloud_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, 3] => Ok((1, n)),
        [b, n, 3] => Ok((b, n)),
        ref s => Err(Error::dim(format!(
            "{what}: expected [N,3] or [B,N,3], got {s:?}"
        ))),
    }
}

struct ChamferBackward {
    /// Per cloud: (forward matches x→y, backward matches y→x).
    matches: Vec<(Vec<usize>, Vec<usize>)>,
}

impl CustomOp for ChamferBackward {
    fn name(&self) -> &'static str {
        "chamfer_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (inputs[0].data(), inputs[1].data());
        let b = self.matches.len();
        let (n, m) = (x.len() / 3 / b, y.len() / 3 / b);
        let mut gx = vec![0.0; x.len()];
        let mut gy = vec![0.0; y.len()];
        for (k, (fw, bw)) in self.matches.iter().enumerate() {
            let xs = as_points(&x[k * n * 3..(k + 1) * n * 3]);
            let ys = as_points(&y[k * m * 3..(k + 1) * m * 3]);
            let (gxk, gyk) = (&mut gx[k * n * 3..], &mut gy[k * m * 3..]);
            for (i, &j) in fw.iter().enumerate() {
                for c in 0..3 {
                    let d = 2.0 * g[k] * (xs[i][c] - ys[j][c]);
                    gxk[i * 3 + c] += d;
                    gyk[j * 3 + c] -= d;
                }
            }
            for (j, &i) in bw.iter().enumerate() {
                for c in 0..3 {
                    let d = 2.0 * g[k] * (ys[j][c] - xs[i][c]);
                    gyk[j * 3 + c] += d;
                    gxk[i * 3 + c] -= d;
                }
            }
        }
        vec![Some(gx), Some(gy)]
    }
}

/// Chamfer distance per cloud of two batches, differentiable in both.
/// Returns a `[B]` tensor (`[1]` for unbatched input).
pub fn chamfer_op(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (bx, n) = cloud_dims(g.value(x), "chamfer x")?;
    let (by, m) = cloud_dims(g.value(y), "chamfer y")?;
    if bx != by {
        return Err(Error::dim(format!(
            "chamfer: batch sizes {bx} and {by} differ"
        )));
    }
    let xd = g.value(x).data();
    let yd = g.value(y).data();
    let mut values = Vec::with_capacity(bx);
    let mut all = Vec::with_capacity(bx);
    for k in 0..bx {
        let xs = as_points(&xd[k * n * 3..(k + 1) * n * 3]);
        let ys = as_points(&yd[k * m * 3..(k + 1) * m * 3]);
        let (fw, bw) = matches(xs, ys)?;
        values.push(
            fw.iter().map(|n| n.dist2).sum::<f64>() + bw.iter().map(|n| n.dist2).sum::<f64>(),
        );
        all.push((
            fw.into_iter().map(|n| n.index).collect(),
            bw.into_iter().map(|n| n.index).collect(),
        ));
    }
    g.custom(
        &[x, y],
        Tensor::vector(values),
        Box::new(ChamferBackward { matches: all }),
    )
}

struct SigmaChamferBackward {
    matches: Vec<(Vec<usize>, Vec<usize>)>,
}

impl CustomOp for SigmaChamferBackward {
    fn name(&self) -> &'static str {
        "sigma_chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, mu, var) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let b = self.matches.len();
        let (n, m) = (x.len() / 3 / b, mu.len() / 3 / b);
        let mut gx = vec![0.0; x.len()];
        let mut gm = vec![0.0; mu.len()];
        let mut gv = vec![0.0; var.len()];
        for (k, (to_pred, to_input)) in self.matches.iter().enumerate() {
            let xo = k * n * 3;
            let mo = k * m * 3;
            let mut pair = |i: usize, j: usize| {
                for c in 0..3 {
                    let (xi, mj) = (xo + i * 3 + c, mo + j * 3 + c);
                    let d = x[xi] - mu[mj];
                    let v = var[mj];
                    gx[xi] += g[k] * 2.0 * d / v;
                    gm[mj] -= g[k] * 2.0 * d / v;
                    gv[mj] -= g[k] * d * d / (v * v);
                }
            };
            for (i, &j) in to_pred.iter().enumerate() {
                pair(i, j);
            }
            for (j, &i) in to_input.iter().enumerate() {
                pair(i, j);
            }
            for j in 0..m {
                for c in 0..3 {
                    gv[mo + j * 3 + c] += g[k] / var[mo + j * 3 + c];
                }
            }
        }
        vec![Some(gx), Some(gm), Some(gv)]
    }
}

/// Variance-weighted Chamfer distance per cloud, differentiable in the input
/// cloud, the predicted means and the predicted variances.
pub fn sigma_chamfer_op(
    g: &mut Graph,
    x: Var,
    mean: Var,
    var: Var,
    weighted_matching: bool,
) -> Result<Var> {
    let (bx, n) = cloud_dims(g.value(x), "sigma_chamfer x")?;
    let (bm, m) = cloud_dims(g.value(mean), "sigma_chamfer mean")?;
    if bx != bm || g.shape(mean) != g.shape(var) {
        return Err(Error::dim(
            "sigma_chamfer: batch or variance shape mismatch",
        ));
    }
    let (xd, md, vd) = (g.value(x).data(), g.value(mean).data(), g.value(var).data());
    check_var(as_points(vd))?;
    let mut values = Vec::with_capacity(bx);
    let mut all = Vec::with_capacity(bx);
    for k in 0..bx {
        let xs = as_points(&xd[k * n * 3..(k + 1) * n * 3]);
        let ms = as_points(&md[k * m * 3..(k + 1) * m * 3]);
        let vs = as_points(&vd[k * m * 3..(k + 1) * m * 3]);
        let (tp, ti) = sigma_matches(xs, ms, vs, weighted_matching)?;
        values.push(sigma_value(xs, ms, vs, &tp, &ti));
        all.push((tp, ti));
    }
    g.custom(
        &[x, mean, var],
        Tensor::vector(values),
        Box::new(SigmaChamferBackward { matches: all }),
    )
}
