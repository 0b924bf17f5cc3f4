//! Architecture, checkpoint and loss-level behaviour of the four variants.

use std::collections::BTreeMap;

use pcae::geometry::{chamfer_distance, normalize, PointCloud, ReconDistribution};
use pcae::models::checkpoint::{from_bytes, parse, to_bytes};
use pcae::models::{loss, LatentGaussian, Mode, Model, ModelConfig, Sampling, Variant};
use pcae::synthdata::{make_vertebra, ShapeParams};
use pcae::tensor::Graph;
use pcae::training::evaluate;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn vertebra(n: usize, seed: u64) -> PointCloud {
    let p = ShapeParams {
        n_points: n,
        ..ShapeParams::default()
    };
    normalize(&make_vertebra(&p, 0.0, seed).unwrap().cloud)
        .unwrap()
        .0
}

fn eval_model(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(config, seed).unwrap();
    m.set_mode(Mode::Eval);
    m
}

/// Every array a checkpoint of `config` must hold, with its shape, derived
/// from the layer widths alone.
fn expected_arrays(c: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    let dense =
        |out: &mut BTreeMap<String, Vec<usize>>, name: String, i: usize, o: usize, bn: bool| {
            out.insert(format!("{name}.weight"), vec![i, o]);
            out.insert(format!("{name}.bias"), vec![o]);
            if bn {
                for s in ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
                    out.insert(format!("{name}.{s}"), vec![o]);
                }
            }
        };
    let mut width = 3;
    for (i, &w) in c.point_widths.iter().chain(&c.head_widths).enumerate() {
        let kind = if i < c.point_widths.len() {
            "point"
        } else {
            "head"
        };
        let idx = if kind == "point" {
            i
        } else {
            i - c.point_widths.len()
        };
        dense(&mut out, format!("encoder.{kind}.{idx}"), width, w, true);
        width = w;
    }
    if c.variant.has_latent_gaussian() {
        dense(&mut out, "encoder.mu".into(), width, c.latent_dim, false);
        dense(
            &mut out,
            "encoder.log_var".into(),
            width,
            c.latent_dim,
            false,
        );
    } else {
        dense(&mut out, "encoder.z".into(), width, c.latent_dim, false);
    }
    let mut ch = c.latent_dim;
    for (i, &o) in c.conv_channels.iter().enumerate() {
        out.insert(format!("decoder.conv.{i}.weight"), vec![2, 2, ch, o]);
        out.insert(format!("decoder.conv.{i}.bias"), vec![o]);
        for s in ["bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"] {
            out.insert(format!("decoder.conv.{i}.{s}"), vec![o]);
        }
        ch = o;
    }
    let heads: &[&str] = if c.variant.has_variance_head() {
        &["mean", "var"]
    } else {
        &["mean"]
    };
    for h in heads {
        out.insert(format!("decoder.conv.{h}.weight"), vec![2, 2, ch, 3]);
        out.insert(format!("decoder.conv.{h}.bias"), vec![3]);
    }
    let mut width = c.latent_dim;
    for (i, &w) in c.dense_widths.iter().enumerate() {
        dense(&mut out, format!("decoder.dense.{i}"), width, w, true);
        width = w;
    }
    let side = 1usize << (c.conv_channels.len() + 1);
    let rest = c.n_points - side * side;
    for h in heads {
        dense(
            &mut out,
            format!("decoder.dense.{h}"),
            width,
            3 * rest,
            false,
        );
    }
    out
}

#[test]
fn checkpoint_lists_every_layer_exactly_once() {
    for config in [
        ModelConfig::full(Variant::SigmaVae),
        ModelConfig::full(Variant::Ae),
        ModelConfig::desk(Variant::Vae),
        ModelConfig::reduced(Variant::SigmaAe),
    ] {
        let m = Model::new(config.clone(), 1).unwrap();
        let (stored_config, arrays) = parse(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(stored_config, config);
        let mut seen = BTreeMap::new();
        for a in arrays {
            assert!(
                seen.insert(a.name.clone(), a.shape).is_none(),
                "{} stored twice",
                a.name
            );
        }
        assert_eq!(seen, expected_arrays(&config), "{}", config.variant);
    }
}

#[test]
fn decoder_emits_exactly_n_points() {
    for variant in Variant::ALL {
        for config in [
            ModelConfig::full(variant),
            ModelConfig::desk(variant),
            ModelConfig::reduced(variant),
        ] {
            assert_eq!(
                config.conv_points() + config.dense_points(),
                config.n_points
            );
            let m = eval_model(config.clone(), 3);
            let r = m.reconstruct(&vertebra(config.n_points, 1)).unwrap();
            assert_eq!(r.mean.len(), config.n_points);
            assert_eq!(r.var.len(), config.n_points);
        }
    }
}

#[test]
fn variance_heads_stay_above_their_floor() {
    let config = ModelConfig::reduced(Variant::SigmaAe);
    let mut m = eval_model(config.clone(), 4);
    // drive the variance pre-activations far negative
    for p in m.params_mut() {
        if p.name.ends_with("var.bias") {
            p.value.data_mut().iter_mut().for_each(|b| *b = -1e4);
        }
    }
    let r = m.reconstruct(&vertebra(config.n_points, 2)).unwrap();
    assert!(r
        .var
        .iter()
        .flatten()
        .all(|&v| v > config.variance_eps && v > 1e-6));
}

#[test]
fn checkpoints_reproduce_outputs_bitwise() {
    let config = ModelConfig::reduced(Variant::SigmaVae);
    let m = eval_model(config.clone(), 8);
    let x = vertebra(config.n_points, 5);
    let restored = from_bytes(&to_bytes(&m).unwrap()).unwrap();
    let (a, b) = (
        m.reconstruct(&x).unwrap(),
        restored.reconstruct(&x).unwrap(),
    );
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.var, b.var);
}

#[test]
fn vae_loss_at_zero_beta_is_the_ae_loss() {
    let x = vertebra(64, 1);
    let y = vertebra(64, 2);
    let g = LatentGaussian {
        mu: vec![0.7, -1.2, 0.1],
        log_var: vec![0.3, -0.4, 1.1],
    };
    let recon = ReconDistribution::unit(y.clone());
    let ae = loss(Variant::Ae, &x, &recon, None, 0.0).unwrap();
    let vae = loss(Variant::Vae, &x, &recon, Some(&g), 0.0).unwrap();
    assert_eq!(ae, vae);
    assert_eq!(ae, chamfer_distance(&x, &y).unwrap());
    assert!(loss(Variant::Vae, &x, &recon, Some(&g), 0.5).unwrap() > ae);
}

#[test]
fn backward_is_deterministic() {
    let config = ModelConfig::reduced(Variant::SigmaVae);
    let m = Model::new(config.clone(), 6).unwrap();
    let batch: Vec<PointCloud> = (0..3).map(|i| vertebra(config.n_points, i)).collect();
    let grads = || {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let flat: Vec<f64> = batch.iter().flat_map(PointCloud::flat).collect();
        let x = g.constant(pcae::tensor::Tensor::new([3, config.n_points, 3], flat).unwrap());
        let out = m.forward(&mut g, &bound, x, Sampling::Draw(11)).unwrap();
        let terms = pcae::models::loss_op(&mut g, config.variant, x, &out, 0.1, false).unwrap();
        g.backward(terms.total).unwrap();
        bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).unwrap().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}

#[test]
fn evaluation_ignores_order_and_batching() {
    let config = ModelConfig::reduced(Variant::SigmaAe);
    let m = eval_model(config.clone(), 2);
    let clouds: Vec<PointCloud> = (0..20)
        .map(|i| vertebra(config.n_points, 100 + i))
        .collect();
    let all = evaluate(&m, &clouds).unwrap();
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut pcae::seed::rng(1));
    let shuffled: Vec<PointCloud> = order.iter().map(|&i| clouds[i].clone()).collect();
    let again = evaluate(&m, &shuffled).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(all.per_cloud[i], again.per_cloud[k]);
        let single = evaluate(&m, std::slice::from_ref(&clouds[i])).unwrap();
        assert_eq!(all.per_cloud[i], single.per_cloud[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_is_exactly_permutation_invariant(seed in any::<u64>(), variant_idx in 0usize..4) {
        let config = ModelConfig::reduced(Variant::ALL[variant_idx]);
        let m = eval_model(config.clone(), seed);
        let mut rng = pcae::seed::rng(seed);
        let points: Vec<[f64; 3]> = (0..config.n_points)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let z = m.encode(&PointCloud::new(points.clone()).unwrap()).unwrap();
        let mut shuffled = points;
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(z, m.encode(&PointCloud::new(shuffled).unwrap()).unwrap());
    }
}
