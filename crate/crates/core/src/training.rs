//! Adam, KL annealing and the training loop.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    augment, chamfer_mean, normalize, recon_log_likelihood, AugmentParams, PointCloud,
};
use crate::models::{loss_op, Mode, Model, ModelConfig, Sampling};
use crate::seed;
use crate::tensor::Graph;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    /// Zero moments for parameters of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = lengths.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.params().iter().map(|p| p.value.len()))
    }
}

/// One bias-corrected Adam update of every parameter array.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::dim(format!(
                "adam_step: parameter {i} has {} entries, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// KL weight for `epoch` (0-based): a linear ramp from 0 that reaches
/// `beta_max` after `anneal_fraction · epochs` epochs.
pub fn beta_schedule(epoch: usize, epochs: usize, beta_max: f64, anneal_fraction: f64) -> f64 {
    let end = anneal_fraction * epochs as f64;
    if end <= 0.0 {
        return beta_max;
    }
    beta_max * (epoch as f64 / end).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta_max: f64,
    pub anneal_fraction: f64,
    pub seed: u64,
    /// `None` disables online augmentation.
    pub augment: Option<AugmentParams>,
    /// Stop after this many epochs without improvement of the smoothed
    /// validation loss; 0 disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Width of the moving average applied to the validation loss.
    pub smoothing: usize,
    /// Use variance-weighted nearest-neighbour matching in the σ loss.
    pub weighted_matching: bool,
    /// Normalise with the (fixed) running statistics instead of batch
    /// statistics. Allows batches of a single cloud.
    pub freeze_batch_norm: bool,
    /// Return the weights from the epoch with the lowest validation loss
    /// rather than the last epoch.
    pub restore_best: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 100,
            beta_max: 0.1,
            anneal_fraction: 0.5,
            seed: 0,
            augment: Some(AugmentParams::default()),
            patience: 20,
            min_delta: 1e-5,
            smoothing: 10,
            weighted_matching: false,
            freeze_batch_norm: false,
            restore_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::config("anneal_fraction must lie in [0, 1]"));
        }
        if !(self.beta_max >= 0.0) {
            return Err(Error::config("beta_max must be non-negative"));
        }
        if self.batch_size < 2 && !self.freeze_batch_norm {
            return Err(Error::config(
                "batch_size must be at least 2 unless batch norm is frozen",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean reconstruction term over the epoch's clouds.
    pub recon: f64,
    /// Mean KL term (0 for deterministic variants).
    pub kl: f64,
    pub beta: f64,
    pub seconds: f64,
    /// Validation reconstruction loss, when a validation set was given.
    #[serde(skip)]
    pub val_recon: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch after which early stopping fired.
    pub stopped_early: Option<usize>,
    /// Epoch whose weights were returned, when they are not the last.
    pub restored_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,kl,beta,seconds\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch, r.recon, r.kl, r.beta, r.seconds
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Splits `order` into batches of `size`; a trailing batch of one cloud is
/// folded into its predecessor because batch norm cannot train on it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if size > 1 && out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Mean reconstruction objective of `clouds` with the model in eval mode.
pub fn validation_loss(
    model: &Model,
    clouds: &[PointCloud],
    weighted_matching: bool,
) -> Result<f64> {
    if model.mode() != Mode::Eval {
        return Err(Error::usage("validation needs the model in eval mode"));
    }
    let mut total = 0.0;
    for chunk in clouds.chunks(16) {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let x = g.constant(Model::batch_tensor(chunk)?);
        let out = model.forward(&mut g, &p, x, Sampling::Mean)?;
        let terms = loss_op(&mut g, model.variant(), x, &out, 0.0, weighted_matching)?;
        total += g.value(terms.recon).item()? * chunk.len() as f64;
    }
    Ok(total / clouds.len() as f64)
}

/// Runs the training loop on `train_set`; `val_set` drives early stopping.
///
/// `on_epoch` sees the model after every epoch and may write checkpoints.
/// Returning `ControlFlow::Break` ends training after that epoch; an error
/// aborts it.
pub fn train_with(
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<ControlFlow<()>>,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let n = config.model.n_points;
    if let Some(c) = train_set.iter().chain(val_set).find(|c| c.len() != n) {
        return Err(Error::dim(format!(
            "cloud has {} points, model expects {n}",
            c.len()
        )));
    }
    if train_set.len() < 2 && !config.freeze_batch_norm {
        return Err(Error::config(
            "batch norm needs at least two training clouds",
        ));
    }
    let train_mode = if config.freeze_batch_norm {
        Mode::Eval
    } else {
        Mode::Train
    };
    let mut model = Model::new(config.model.clone(), seed::derive(config.seed, "init"))?;
    model.set_mode(train_mode);
    let mut adam = AdamState::for_model(&model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut snapshot: Option<(usize, f64, Model)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let beta = beta_schedule(
            epoch,
            config.epochs,
            config.beta_max,
            config.anneal_fraction,
        );
        let epoch_seed = seed::derive_indexed(config.seed, "epoch", epoch as u64);
        order.shuffle(&mut seed::stream(epoch_seed, "shuffle"));
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);

        for (bi, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let clouds: Vec<PointCloud> = match &config.augment {
                None => batch.iter().map(|&i| train_set[i].clone()).collect(),
                Some(params) => batch
                    .iter()
                    .map(|&i| {
                        let s = seed::derive_indexed(
                            seed::derive(epoch_seed, "augment"),
                            "cloud",
                            i as u64,
                        );
                        Ok(normalize(&augment(&train_set[i], s, params)?)?.0)
                    })
                    .collect::<Result<_>>()?,
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(Model::batch_tensor(&clouds)?);
            let sampling = Sampling::Draw(seed::derive_indexed(
                seed::derive(epoch_seed, "sample"),
                "batch",
                bi as u64,
            ));
            let out = model.forward(&mut g, &bound, x, sampling)?;
            let terms = loss_op(
                &mut g,
                model.variant(),
                x,
                &out,
                beta,
                config.weighted_matching,
            )?;
            let recon = g.value(terms.recon).item()?;
            let kl = match terms.kl {
                Some(k) => g.value(k).item()?,
                None => 0.0,
            };
            let total = g.value(terms.total).item()?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {bi}: recon = {recon}, kl = {kl}, beta = {beta}"
                )));
            }
            g.backward(terms.total)?;
            let grads: Vec<&[f64]> = bound
                .vars()
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .ok_or_else(|| Error::usage("parameter received no gradient"))
                })
                .collect::<Result<_>>()?;
            let mut params: Vec<&mut [f64]> = model
                .params_mut()
                .iter_mut()
                .map(|p| p.value.data_mut())
                .collect();
            adam_step(&mut params, &grads, &mut adam, config.learning_rate)?;
            if train_mode == Mode::Train {
                model.absorb_batch_stats(&g.batch_stats())?;
            }
            recon_sum += recon * clouds.len() as f64;
            kl_sum += kl * clouds.len() as f64;
        }

        let val_recon = if val_set.is_empty() {
            None
        } else {
            model.set_mode(Mode::Eval);
            let v = validation_loss(&model, val_set, config.weighted_matching);
            model.set_mode(train_mode);
            Some(v?)
        };
        let record = EpochRecord {
            epoch,
            recon: recon_sum / train_set.len() as f64,
            kl: kl_sum / train_set.len() as f64,
            beta,
            seconds: started.elapsed().as_secs_f64(),
            val_recon,
        };
        log::info!(
            "epoch {epoch}: recon {:.6} kl {:.4} beta {:.3} val {:?} ({:.1}s)",
            record.recon,
            record.kl,
            beta,
            val_recon,
            record.seconds
        );
        let flow = on_epoch(&record, &model)?;
        log.records.push(record);
        if let (Some(v), true) = (val_recon, config.restore_best) {
            if snapshot.as_ref().is_none_or(|(_, b, _)| v < *b) {
                snapshot = Some((epoch, v, model.clone()));
            }
        }
        if flow.is_break() {
            break;
        }

        if let (Some(v), true) = (val_recon, config.patience > 0) {
            val_history.push(v);
            let w = config.smoothing.max(1).min(val_history.len());
            let smoothed = val_history[val_history.len() - w..].iter().sum::<f64>() / w as f64;
            if smoothed < best - config.min_delta {
                best = smoothed;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    log.stopped_early = Some(epoch);
                    break;
                }
            }
        }
    }
    if let Some((epoch, _, best)) = snapshot {
        if epoch + 1 != log.records.len() {
            model = best;
            log.restored_epoch = Some(epoch);
        }
    }
    model.set_mode(Mode::Eval);
    Ok((model, log))
}

/// [`train_with`] without an epoch callback. Returns the model in eval mode.
pub fn train(
    train_set: &[PointCloud],
    val_set: &[PointCloud],
    config: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    train_with(train_set, val_set, config, |_, _| {
        Ok(ControlFlow::Continue(()))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CloudEval {
    /// Per-point-mean Chamfer distance.
    pub recon_error: f64,
    /// Per-point-mean reconstruction log-likelihood (σ variants).
    pub log_likelihood: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub per_cloud: Vec<CloudEval>,
    pub recon_mean: f64,
    pub recon_std: f64,
    pub log_likelihood_mean: Option<f64>,
    pub log_likelihood_std: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-cloud reconstruction error and log-likelihood with their mean and
/// population standard deviation.
pub fn evaluate(model: &Model, clouds: &[PointCloud]) -> Result<EvalSummary> {
    if model.mode() != Mode::Eval {
        return Err(Error::usage("evaluate needs the model in eval mode"));
    }
    if clouds.is_empty() {
        return Err(Error::usage("nothing to evaluate"));
    }
    let sigma = model.variant().has_variance_head();
    let mut per_cloud = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(16) {
        for (x, r) in chunk.iter().zip(model.reconstruct_batch(chunk)?) {
            per_cloud.push(CloudEval {
                recon_error: chamfer_mean(x, &r.mean)?,
                log_likelihood: if sigma {
                    Some(recon_log_likelihood(x, &r)?.mean())
                } else {
                    None
                },
            });
        }
    }
    let (recon_mean, recon_std) =
        mean_std(&per_cloud.iter().map(|c| c.recon_error).collect::<Vec<_>>());
    let (log_likelihood_mean, log_likelihood_std) = if sigma {
        let (m, s) = mean_std(
            &per_cloud
                .iter()
                .filter_map(|c| c.log_likelihood)
                .collect::<Vec<_>>(),
        );
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(EvalSummary {
        per_cloud,
        recon_mean,
        recon_std,
        log_likelihood_mean,
        log_likelihood_std,
    })
}
