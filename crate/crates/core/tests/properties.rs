//! Property tests for the invariants of the numerical building blocks.

use pcae::anomaly::{fit_threshold, metrics, roc_auc, Direction, Label};
use pcae::geometry::nn::nearest_all;
use pcae::geometry::{
    chamfer_distance, normalize, sigma_chamfer, KdTree, NnBackend, Point, PointCloud,
    ReconDistribution,
};
use pcae::models::{kl_divergence, LatentGaussian};
use pcae::tensor::{Graph, Tensor};
use pcae::training::{adam_step, beta_schedule, AdamState};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 1..max).prop_map(|p| PointCloud::new(p).unwrap())
}

/// Clouds with enough spread to normalise.
fn spread_cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 8..40).prop_filter_map("degenerate", |p| {
        let c = PointCloud::new(p).ok()?;
        normalize(&c).ok().map(|_| c)
    })
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    // coarse scores so that ties occur
    prop::collection::vec((0i32..12, any::<bool>()), 2..40)
        .prop_filter("needs both classes", |v| {
            v.iter().any(|x| x.1) && v.iter().any(|x| !x.1)
        })
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, f)| {
                    (
                        f64::from(s) * 0.25,
                        if f { Label::Fractured } else { Label::Healthy },
                    )
                })
                .unzip()
        })
}

/// Brute-force Chamfer distance, written independently of the library.
fn chamfer_oracle(x: &[Point], y: &[Point]) -> f64 {
    let d2 = |a: &Point, b: &Point| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let one = |a: &[Point], b: &[Point]| -> f64 {
        a.iter()
            .map(|p| b.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    one(x, y) + one(y, x)
}

/// Pairwise Mann–Whitney statistic with ties counted as one half.
fn mann_whitney(scores: &[f64], labels: &[Label]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_positive())
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| !l.is_positive())
        .map(|(s, _)| *s)
        .collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn permuted(c: &PointCloud, seed: u64) -> PointCloud {
    use rand::seq::SliceRandom;
    let mut p = c.points().to_vec();
    p.shuffle(&mut pcae::seed::rng(seed));
    PointCloud::new(p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chamfer_is_symmetric_non_negative_and_matches_brute_force(x in cloud(30), y in cloud(30)) {
        let d = chamfer_distance(&x, &y).unwrap();
        prop_assert_eq!(d, chamfer_distance(&y, &x).unwrap());
        prop_assert!(d >= 0.0);
        let oracle = chamfer_oracle(x.points(), y.points());
        prop_assert!((d - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn chamfer_ignores_point_order(x in cloud(30), y in cloud(30), seed in any::<u64>()) {
        let d = chamfer_distance(&x, &y).unwrap();
        let d2 = chamfer_distance(&permuted(&x, seed), &permuted(&y, seed ^ 1)).unwrap();
        prop_assert!((d - d2).abs() <= 1e-12 * d.max(1.0));
        prop_assert_eq!(chamfer_distance(&x, &permuted(&x, seed)).unwrap(), 0.0);
    }

    #[test]
    fn unit_variance_sigma_chamfer_is_chamfer(x in cloud(30), y in cloud(30), weighted in any::<bool>()) {
        let recon = ReconDistribution::unit(y.clone());
        let s = sigma_chamfer(&x, &recon, weighted).unwrap();
        let c = chamfer_distance(&x, &y).unwrap();
        prop_assert!((s - c).abs() <= 1e-12 * c.max(1.0), "{} vs {}", s, c);
    }

    #[test]
    fn kd_tree_and_brute_force_agree(target in cloud(80), queries in prop::collection::vec(point(), 1..30)) {
        let kd = nearest_all(&queries, target.points(), NnBackend::KdTree).unwrap();
        let brute = nearest_all(&queries, target.points(), NnBackend::BruteForce).unwrap();
        prop_assert_eq!(&kd, &brute);
        let tree = KdTree::build(target.points()).unwrap();
        for (q, b) in queries.iter().zip(&brute) {
            prop_assert_eq!(tree.nearest(q), *b);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_similarity_invariant(
        x in spread_cloud(),
        shift in point(),
        scale in 0.1..10.0f64,
    ) {
        let (n1, _) = normalize(&x).unwrap();
        let (n2, _) = normalize(&n1).unwrap();
        let moved = x.map(|p| [p[0] * scale + shift[0], p[1] * scale + shift[1], p[2] * scale + shift[2]]).unwrap();
        let (n3, record) = normalize(&moved).unwrap();
        for ((a, b), c) in n1.points().iter().zip(n2.points()).zip(n3.points()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-9);
                prop_assert!((a[k] - c[k]).abs() < 1e-9);
            }
        }
        let back = record.invert(&n3).unwrap();
        for (a, b) in back.points().iter().zip(moved.points()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-9 * scale.max(1.0) * 10.0);
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mu in prop::collection::vec(-3.0..3.0f64, 1..8),
        lv_seed in prop::collection::vec(-3.0..3.0f64, 8),
    ) {
        let g = LatentGaussian { log_var: lv_seed[..mu.len()].to_vec(), mu };
        let kl = kl_divergence(&g);
        prop_assert!(kl >= 0.0);
        let prior = LatentGaussian { mu: vec![0.0; g.mu.len()], log_var: vec![0.0; g.mu.len()] };
        prop_assert_eq!(kl_divergence(&prior), 0.0);
        if g.mu.iter().chain(&g.log_var).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn auc_equals_mann_whitney((scores, labels) in labelled_scores()) {
        let auc = roc_auc(&scores, &labels, Direction::HigherIsAnomalous).unwrap();
        prop_assert_eq!(auc, mann_whitney(&scores, &labels));
    }

    #[test]
    fn auc_is_rank_based_and_flips((scores, labels) in labelled_scores()) {
        let auc = roc_auc(&scores, &labels, Direction::HigherIsAnomalous).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
        prop_assert_eq!(auc, roc_auc(&warped, &labels, Direction::HigherIsAnomalous).unwrap());
        let flipped = roc_auc(&scores, &labels, Direction::LowerIsAnomalous).unwrap();
        prop_assert!((auc + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fitted_threshold_is_f1_optimal_and_reproducible(
        (scores, labels) in labelled_scores(),
        lower in any::<bool>(),
    ) {
        let direction = if lower { Direction::LowerIsAnomalous } else { Direction::HigherIsAnomalous };
        let fit = fit_threshold(&scores, &labels, direction).unwrap();
        let again = metrics(&scores, &labels, fit.threshold, direction).unwrap();
        prop_assert_eq!(again.f1, fit.metrics.f1);
        // oracle: every way of flagging the k most anomalous distinct scores
        let orient = |s: f64| if lower { -s } else { s };
        let mut cuts: Vec<f64> = scores.iter().map(|&s| orient(s)).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut best: f64 = 0.0;
        for &c in &cuts {
            let flagged: Vec<bool> = scores.iter().map(|&s| orient(s) >= c).collect();
            let tp = flagged.iter().zip(&labels).filter(|(f, l)| **f && l.is_positive()).count() as f64;
            let fp = flagged.iter().zip(&labels).filter(|(f, l)| **f && !l.is_positive()).count() as f64;
            let pos = labels.iter().filter(|l| l.is_positive()).count() as f64;
            if tp > 0.0 {
                best = best.max(2.0 * tp / (tp + fp + pos));
            }
        }
        prop_assert!((fit.metrics.f1 - best).abs() < 1e-12, "{} vs {}", fit.metrics.f1, best);
    }

    #[test]
    fn beta_ramp_is_monotone_and_bounded(epochs in 1usize..200, beta_max in 0.0..2.0f64, frac in 0.0..=1.0f64) {
        let mut prev = 0.0;
        for e in 0..epochs {
            let b = beta_schedule(e, epochs, beta_max, frac);
            prop_assert!(b >= prev && b <= beta_max);
            prev = b;
        }
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(values in prop::collection::vec(-5.0..5.0f64, 1..10), steps in 1usize..50) {
        let mut p = values.clone();
        let zero = vec![0.0; p.len()];
        let mut state = AdamState::new([p.len()]);
        for _ in 0..steps {
            adam_step(&mut [&mut p[..]], &[&zero[..]], &mut state, 5e-4).unwrap();
        }
        prop_assert_eq!(p, values);
    }

    #[test]
    fn max_pool_ignores_row_order(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, seq::SliceRandom};
        let mut rng = pcae::seed::rng(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f64> = order.iter().flat_map(|&r| data[r * cols..(r + 1) * cols].to_vec()).collect();
        let pool = |d: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([1, rows, cols], d).unwrap());
            let y = g.max_pool_points(x).unwrap();
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(pool(data), pool(shuffled));
    }

    #[test]
    fn softplus_eps_stays_above_eps(x in prop::num::f64::NORMAL | prop::num::f64::ZERO, eps in 1e-9..1e-3f64) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![x.clamp(-1e300, 1e300)]));
        let y = g.softplus_eps(v, eps).unwrap();
        let out = g.value(y).data()[0];
        prop_assert!(out.is_finite() || x > 700.0);
        prop_assert!(out > eps, "softplus_eps({}) = {}", x, out);
    }
}

#[test]
fn softplus_eps_does_not_overflow_up_to_700() {
    let xs: Vec<f64> = (-700..=700).map(f64::from).collect();
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(xs.clone()));
    let y = g.softplus_eps(v, 1e-6).unwrap();
    for (x, out) in xs.iter().zip(g.value(y).data()) {
        assert!(out.is_finite() && *out > 1e-6, "softplus_eps({x}) = {out}");
    }
}
