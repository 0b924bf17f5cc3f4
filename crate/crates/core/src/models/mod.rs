//! The four auto-encoder variants.
//!
//! All variants share a point-net encoder (shared per-point MLP, max pool,
//! dense head) and a dual-branch decoder: a transposed-convolution branch
//! that unfolds the latent code into a square grid of points, and a dense
//! branch that predicts the remaining points directly. The σ variants add a
//! variance layer in parallel to each branch's final mean layer; the
//! variational variants replace the latent head by a Gaussian posterior.

pub mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{Bound, Forward, Latent, Mode, Model, Param, RunningStats, Sampling};

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, chamfer_op, sigma_chamfer, sigma_chamfer_op, PointCloud, ReconDistribution,
};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ae")]
    Ae,
    #[serde(rename = "sigma-ae")]
    SigmaAe,
    #[serde(rename = "vae")]
    Vae,
    #[serde(rename = "sigma-vae")]
    SigmaVae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ae,
        Variant::SigmaAe,
        Variant::Vae,
        Variant::SigmaVae,
    ];

    pub fn has_variance_head(self) -> bool {
        matches!(self, Variant::SigmaAe | Variant::SigmaVae)
    }

    pub fn has_latent_gaussian(self) -> bool {
        matches!(self, Variant::Vae | Variant::SigmaVae)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ae => "ae",
            Variant::SigmaAe => "sigma-ae",
            Variant::Vae => "vae",
            Variant::SigmaVae => "sigma-vae",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected ae, sigma-ae, vae or sigma-vae)"
                ))
            })
    }
}

/// Network shape. The decoder's convolutional branch doubles a `1×1` grid
/// once per entry of `conv_channels` and once more for the final 3-channel
/// layer; the dense branch supplies the remaining points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_points: usize,
    /// Widths of the shared per-point MLP.
    pub point_widths: Vec<usize>,
    /// Hidden dense layers between the max pool and the latent head.
    pub head_widths: Vec<usize>,
    pub latent_dim: usize,
    /// Channels after each hidden transposed convolution.
    pub conv_channels: Vec<usize>,
    /// Hidden widths of the dense decoder branch.
    pub dense_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Added to the softplus of the variance layers.
    pub variance_eps: f64,
    /// Variance the σ heads predict at initialisation.
    pub init_variance: f64,
}

impl ModelConfig {
    /// Full-size network: 2048 points, 64-d latent, 32×32 convolutional grid.
    pub fn full(variant: Variant) -> Self {
        ModelConfig {
            variant,
            n_points: 2048,
            point_widths: vec![64, 128, 1024],
            head_widths: vec![],
            latent_dim: 64,
            conv_channels: vec![1024, 512, 256, 128],
            dense_widths: vec![256, 512],
            leaky_slope: 0.2,
            variance_eps: 1e-6,
            init_variance: 1e-2,
        }
    }

    /// 1024 points, 16×16 grid; sized for training runs on a desktop CPU.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            n_points: 1024,
            point_widths: vec![32, 64, 128],
            latent_dim: 32,
            conv_channels: vec![128, 64, 32],
            dense_widths: vec![128, 256],
            ..Self::full(variant)
        }
    }

    /// 64 points with all widths divided by eight; for gradient checks.
    pub fn reduced(variant: Variant) -> Self {
        ModelConfig {
            n_points: 64,
            point_widths: vec![8, 16, 128],
            latent_dim: 8,
            conv_channels: vec![128],
            dense_widths: vec![32, 64],
            ..Self::full(variant)
        }
    }

    pub fn conv_side(&self) -> usize {
        1 << (self.conv_channels.len() + 1)
    }

    pub fn conv_points(&self) -> usize {
        self.conv_side() * self.conv_side()
    }

    pub fn dense_points(&self) -> usize {
        self.n_points.saturating_sub(self.conv_points())
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .point_widths
            .iter()
            .chain(&self.head_widths)
            .chain(&self.conv_channels)
            .chain(&self.dense_widths);
        if self.point_widths.is_empty()
            || self.latent_dim == 0
            || widths.into_iter().any(|&w| w == 0)
        {
            return Err(Error::config("all layer widths must be positive"));
        }
        if self.conv_points() > self.n_points {
            return Err(Error::config(format!(
                "convolutional branch produces {} points, more than n_points = {}",
                self.conv_points(),
                self.n_points
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0, 1)"));
        }
        if !(self.variance_eps >= 0.0) || !(self.init_variance > self.variance_eps) {
            return Err(Error::config("need 0 <= variance_eps < init_variance"));
        }
        Ok(())
    }
}

/// A deterministic latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// Diagonal Gaussian posterior over the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Encoder output of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoding {
    Code(LatentCode),
    Gaussian(LatentGaussian),
}

impl Encoding {
    /// The point estimate: `z` itself or the posterior mean.
    pub fn point_estimate(&self) -> LatentCode {
        match self {
            Encoding::Code(c) => c.clone(),
            Encoding::Gaussian(g) => LatentCode { z: g.mu.clone() },
        }
    }
}

/// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)` drawn from `seed`.
pub fn reparameterize(g: &LatentGaussian, seed: u64) -> LatentCode {
    let mut rng = crate::seed::rng(seed);
    let z =
        g.mu.iter()
            .zip(g.std())
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                if s == 0.0 {
                    *m
                } else {
                    m + s * e
                }
            })
            .collect();
    LatentCode { z }
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − ln σ² − 1)`.
pub fn kl_divergence(g: &LatentGaussian) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// KL term of a batch, averaged over the batch: `mu`, `log_var` are `[B, d]`.
pub fn kl_divergence_op(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let batch = g.shape(mu)[0] as f64;
    let m2 = g.square(mu);
    let ev = g.exp(log_var)?;
    let a = g.add(m2, ev)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5 / batch))
}

/// Scalar objective of a single cloud.
///
/// AE: Chamfer distance; σ-AE: variance-weighted Chamfer; the variational
/// variants add `beta · KL`.
pub fn loss(
    variant: Variant,
    x: &PointCloud,
    recon: &ReconDistribution,
    latent: Option<&LatentGaussian>,
    beta: f64,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::usage(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    if latent.is_some() != variant.has_latent_gaussian() {
        return Err(Error::usage(format!(
            "variant {variant} {} a latent Gaussian",
            if variant.has_latent_gaussian() {
                "needs"
            } else {
                "takes no"
            }
        )));
    }
    let rec = if variant.has_variance_head() {
        sigma_chamfer(x, recon, false)?
    } else {
        chamfer_distance(x, &recon.mean)?
    };
    Ok(rec + latent.map_or(0.0, |g| beta * kl_divergence(g)))
}

/// Graph nodes of a batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Reconstruction term averaged over the batch.
    pub recon: Var,
    /// KL term averaged over the batch.
    pub kl: Option<Var>,
}

/// Batch objective: mean reconstruction loss plus `beta` times the mean KL.
pub fn loss_op(
    g: &mut Graph,
    variant: Variant,
    x: Var,
    out: &Forward,
    beta: f64,
    weighted_matching: bool,
) -> Result<LossTerms> {
    if !(beta >= 0.0) {
        return Err(Error::usage(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let per_cloud = match (variant.has_variance_head(), out.var) {
        (true, Some(var)) => sigma_chamfer_op(g, x, out.mean, var, weighted_matching)?,
        (false, None) => chamfer_op(g, x, out.mean)?,
        _ => {
            return Err(Error::usage(format!(
                "forward output does not match variant {variant}"
            )))
        }
    };
    let recon = g.mean(per_cloud);
    let kl = match (variant.has_latent_gaussian(), &out.latent) {
        (true, Latent::Gaussian { mu, log_var, .. }) => Some(kl_divergence_op(g, *mu, *log_var)?),
        (false, Latent::Code(_)) => None,
        _ => {
            return Err(Error::usage(format!(
                "forward latent does not match variant {variant}"
            )))
        }
    };
    let total = match kl {
        Some(kl) => {
            let w = g.scale(kl, beta);
            g.add(recon, w)?
        }
        None => recon,
    };
    Ok(LossTerms { total, recon, kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_and_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(Variant::SigmaVae.has_variance_head() && Variant::SigmaVae.has_latent_gaussian());
        assert!(!Variant::Ae.has_variance_head() && !Variant::Ae.has_latent_gaussian());
        assert!("sigma_vae".parse::<Variant>().is_err());
    }

    #[test]
    fn presets_split_points() {
        for cfg in [
            ModelConfig::full(Variant::Ae),
            ModelConfig::desk(Variant::Ae),
            ModelConfig::reduced(Variant::Ae),
        ] {
            cfg.validate().unwrap();
            assert_eq!(cfg.conv_points() + cfg.dense_points(), cfg.n_points);
        }
        let full = ModelConfig::full(Variant::Ae);
        assert_eq!((full.conv_points(), full.dense_points()), (1024, 1024));
        let mut bad = full.clone();
        bad.n_points = 512;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let g = |mu: f64, var: f64| LatentGaussian {
            mu: vec![mu],
            log_var: vec![var.ln()],
        };
        assert_eq!(kl_divergence(&g(0.0, 1.0)), 0.0);
        assert!((kl_divergence(&g(1.0, 1.0)) - 0.5).abs() < 1e-15);
        assert!((kl_divergence(&g(0.0, 2.0)) - 0.153_426_409_720_027_3).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_degenerate_and_deterministic() {
        let g = LatentGaussian {
            mu: vec![0.3, -1.0],
            log_var: vec![f64::NEG_INFINITY; 2],
        };
        assert_eq!(reparameterize(&g, 5).z, g.mu);
        let g = LatentGaussian {
            mu: vec![0.3, -1.0],
            log_var: vec![0.1, -0.4],
        };
        assert_eq!(reparameterize(&g, 5), reparameterize(&g, 5));
        assert_ne!(reparameterize(&g, 5), reparameterize(&g, 6));
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let g = LatentGaussian {
            mu: vec![0.5, -2.0, 0.0],
            log_var: vec![0.0, (0.25f64).ln(), (4.0f64).ln()],
        };
        let n = 100_000;
        let mut sum = [0.0; 3];
        for s in 0..n {
            let z = reparameterize(&g, crate::seed::derive_indexed(1, "mc", s));
            sum.iter_mut().zip(&z.z).for_each(|(a, b)| *a += b);
        }
        for ((s, m), sd) in sum.iter().zip(&g.mu).zip(g.std()) {
            let est = s / n as f64;
            assert!(
                (est - m).abs() < 3.0 * sd / (n as f64).sqrt(),
                "{est} vs {m}"
            );
        }
    }

    #[test]
    fn loss_reductions() {
        let x = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let r = ReconDistribution::unit(
            PointCloud::new(vec![[0.1, 0.0, 0.0], [0.9, 0.2, 0.0]]).unwrap(),
        );
        let g = LatentGaussian {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        let ae = loss(Variant::Ae, &x, &r, None, 0.0).unwrap();
        assert_eq!(loss(Variant::Vae, &x, &r, Some(&g), 0.0).unwrap(), ae);
        assert_eq!(
            loss(Variant::SigmaVae, &x, &r, Some(&g), 0.0).unwrap(),
            chamfer_distance(&x, &r.mean).unwrap()
        );
        let sv = loss(Variant::SigmaVae, &x, &r, Some(&g), 0.1).unwrap();
        assert!((sv - (sigma_chamfer(&x, &r, false).unwrap() + 0.1 * 0.5)).abs() < 1e-15);
        assert!(loss(Variant::Ae, &x, &r, Some(&g), 0.0).is_err());
        assert!(loss(Variant::Vae, &x, &r, None, 0.0).is_err());
        assert!(loss(Variant::Vae, &x, &r, Some(&g), -1.0).is_err());
    }
}
