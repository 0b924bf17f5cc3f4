use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud};
use crate::error::{Error, Result};

/// What [`normalize`] removed, for mapping results back to input units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub median: Point,
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| {
            [
                p[0] * self.scale + self.median[0],
                p[1] * self.scale + self.median[1],
                p[2] * self.scale + self.median[2],
            ]
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Centres the cloud on its per-coordinate median and scales it to unit RMS
/// distance from the origin.
///
/// Unit RMS radius stands in for equal surface area: for clouds sampled at a
/// uniform density both fix the same overall scale.
pub fn normalize(x: &PointCloud) -> Result<(PointCloud, NormalizationRecord)> {
    if x.len() < 4 {
        return Err(Error::domain(format!(
            "normalisation needs at least 4 points, got {}",
            x.len()
        )));
    }
    let mut med = [0.0; 3];
    let mut col = Vec::with_capacity(x.len());
    for (c, m) in med.iter_mut().enumerate() {
        col.clear();
        col.extend(x.points().iter().map(|p| p[c]));
        *m = median(&mut col);
    }
    let centred: Vec<Point> = x
        .points()
        .iter()
        .map(|p| [p[0] - med[0], p[1] - med[1], p[2] - med[2]])
        .collect();
    let ms = centred
        .iter()
        .map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
        .sum::<f64>()
        / x.len() as f64;
    let scale = ms.sqrt();
    if !(scale > 1e-12) {
        return Err(Error::domain("degenerate cloud: all points coincide"));
    }
    let out = PointCloud::new(
        centred
            .into_iter()
            .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
            .collect(),
    )?;
    Ok((out, NormalizationRecord { median: med, scale }))
}

/// Online augmentation: a random small rotation followed by clipped
/// Gaussian jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Standard deviation of the per-coordinate jitter (normalised units).
    pub jitter_sigma: f64,
    /// Each Euler angle is drawn uniformly from `[-max, max]` degrees.
    pub max_angle_deg: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            jitter_sigma: 0.005,
            max_angle_deg: 15.0,
        }
    }
}

/// `Rz(gamma) · Ry(beta) · Rx(alpha)`, angles in radians.
pub fn rotation_matrix(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

pub fn augment(x: &PointCloud, seed: u64, params: &AugmentParams) -> Result<PointCloud> {
    let mut rng = crate::seed::rng(seed);
    let max = params.max_angle_deg.to_radians();
    let angle = |rng: &mut crate::seed::Rng| {
        if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        }
    };
    let (a, b, g) = (angle(&mut rng), angle(&mut rng), angle(&mut rng));
    let r = rotation_matrix(a, b, g);
    let sigma = params.jitter_sigma;
    let mut out = Vec::with_capacity(x.len());
    for p in x.points() {
        let mut q = [0.0; 3];
        for i in 0..3 {
            q[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        if sigma > 0.0 {
            for v in &mut q {
                let n = rng_normal(&mut rng);
                *v += (n * sigma).clamp(-3.0 * sigma, 3.0 * sigma);
            }
        }
        out.push(q);
    }
    PointCloud::new(out)
}

fn rng_normal(rng: &mut crate::seed::Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud() -> PointCloud {
        let mut rng = crate::seed::rng(3);
        PointCloud::new(
            (0..50)
                .map(|_| {
                    [
                        rng.random_range(-2.0..3.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn max_diff(a: &PointCloud, b: &PointCloud) -> f64 {
        a.flat()
            .iter()
            .zip(b.flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn normalize_is_idempotent_and_shift_scale_invariant() {
        let x = sample_cloud();
        let (n1, rec) = normalize(&x).unwrap();
        let (n2, _) = normalize(&n1).unwrap();
        assert!(max_diff(&n1, &n2) < 1e-12);

        let shifted = x.map(|p| [p[0] + 10.0, p[1] + 10.0, p[2] + 10.0]).unwrap();
        assert!(max_diff(&normalize(&shifted).unwrap().0, &n1) < 1e-12);
        let scaled = x.map(|p| [p[0] * 5.0, p[1] * 5.0, p[2] * 5.0]).unwrap();
        assert!(max_diff(&normalize(&scaled).unwrap().0, &n1) < 1e-12);

        assert!(max_diff(&rec.invert(&n1).unwrap(), &x) < 1e-12);
    }

    #[test]
    fn normalize_rejects_degenerate_clouds() {
        let same = PointCloud::new(vec![[1.0; 3]; 5]).unwrap();
        assert!(matches!(normalize(&same), Err(Error::Domain(_))));
        let tiny = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]]).unwrap();
        assert!(normalize(&tiny).is_err());
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_matrix(0.2, -0.25, 0.1);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x = sample_cloud();
        let off = AugmentParams {
            jitter_sigma: 0.0,
            max_angle_deg: 0.0,
        };
        assert_eq!(augment(&x, 1, &off).unwrap(), x);
        let p = AugmentParams::default();
        let a = augment(&x, 9, &p).unwrap();
        let b = augment(&x, 9, &p).unwrap();
        assert_eq!(
            a.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(augment(&x, 10, &p).unwrap(), a);
    }

    #[test]
    fn augment_jitter_is_clipped() {
        let x = PointCloud::new(vec![[0.0; 3]; 2000]).unwrap();
        let p = AugmentParams {
            jitter_sigma: 0.01,
            max_angle_deg: 0.0,
        };
        let a = augment(&x, 4, &p).unwrap();
        assert!(a.flat().iter().all(|v| v.abs() <= 0.03 + 1e-15));
    }
}
