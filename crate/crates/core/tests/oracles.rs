//! Library routines checked against slow, independent reference computations.

use pcae::anomaly::{roc_auc, Direction, Label};
use pcae::geometry::nn::nearest_all;
use pcae::geometry::{NnBackend, Point};
use pcae::models::{kl_divergence, LatentGaussian};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_points(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale)))
        .collect()
}

#[test]
fn kd_tree_agrees_with_a_linear_scan() {
    let mut rng = pcae::seed::rng(17);
    for (n, scale) in [(1, 1.0), (7, 1.0), (2000, 1.0), (5000, 1e-3)] {
        let target = random_points(&mut rng, n, scale);
        let queries = random_points(&mut rng, 1000, 1.5 * scale);
        let tree = nearest_all(&queries, &target, NnBackend::KdTree).unwrap();
        for (q, got) in queries.iter().zip(tree) {
            let best = target
                .iter()
                .map(|p| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got.dist2, best);
        }
    }
}

#[test]
fn kd_tree_handles_duplicate_and_lattice_points() {
    // many equidistant candidates stress the pruning rule
    let lattice: Vec<Point> = (0..512)
        .map(|i| [(i % 8) as f64, ((i / 8) % 8) as f64, (i / 64) as f64])
        .chain(std::iter::repeat_n([3.0, 3.0, 3.0], 20))
        .collect();
    let queries: Vec<Point> = (0..300)
        .map(|i| {
            [
                (i % 15) as f64 * 0.5,
                (i % 7) as f64 * 0.5 + 0.5,
                (i % 11) as f64 * 0.5,
            ]
        })
        .collect();
    let tree = nearest_all(&queries, &lattice, NnBackend::KdTree).unwrap();
    let brute = nearest_all(&queries, &lattice, NnBackend::BruteForce).unwrap();
    for (a, b) in tree.iter().zip(&brute) {
        assert_eq!(a.dist2, b.dist2);
    }
}

#[test]
fn kl_matches_a_monte_carlo_estimate() {
    let mut rng = pcae::seed::rng(3);
    let g = LatentGaussian {
        mu: vec![0.5, -1.0, 0.2, 1.5],
        log_var: vec![-0.5, 0.3, 0.0, -1.2],
    };
    // KL(q‖p) = E_q[ln q(z) − ln p(z)], per dimension since both are diagonal
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        for (m, lv) in g.mu.iter().zip(&g.log_var) {
            let s = (0.5 * lv).exp();
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + s * e;
            let log_q = -0.5 * e * e - s.ln();
            let log_p = -0.5 * z * z;
            total += log_q - log_p;
        }
    }
    let estimate = total / n as f64;
    let exact = kl_divergence(&g);
    assert!((estimate - exact).abs() < 0.01, "mc {estimate} vs {exact}");
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn mann_whitney(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (sp, lp) in scores.iter().zip(labels) {
        for (sn, ln) in scores.iter().zip(labels) {
            if lp.is_positive() && !ln.is_positive() {
                pairs += 1.0;
                wins += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_equals_the_mann_whitney_statistic() {
    let mut rng = pcae::seed::rng(50);
    for set in 0..50 {
        let n = rng.random_range(4..200);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.random_bool(0.4) {
                    Label::Fractured
                } else {
                    Label::Healthy
                }
            })
            .collect();
        labels[0] = Label::Fractured;
        labels[1] = Label::Healthy;
        // coarse scores in half the sets, so ties are common there
        let scores: Vec<f64> = labels
            .iter()
            .map(|l| {
                let shift = if l.is_positive() { 0.7 } else { 0.0 };
                let s: f64 = rng.random::<f64>() + shift;
                if set % 2 == 0 {
                    (s * 4.0).round()
                } else {
                    s
                }
            })
            .collect();
        let auc = roc_auc(&scores, &labels, Direction::HigherIsAnomalous).unwrap();
        assert!(
            (auc - mann_whitney(&scores, &labels)).abs() < 1e-12,
            "set {set}"
        );
    }
}
