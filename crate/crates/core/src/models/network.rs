use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Encoding, LatentCode, LatentGaussian, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ReconDistribution};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Tensor, Var};

/// Momentum of the running batch-norm statistics.
const RUNNING_MOMENTUM: f64 = 0.9;

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses the statistics of the current batch.
    Train,
    /// Batch norm uses the running statistics.
    Eval,
}

/// How the variational variants pick `z` during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// `z = μ`.
    Mean,
    /// `z = μ + σ ⊙ ε` with `ε` drawn from the given seed.
    Draw(u64),
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    slot: usize,
}

/// Linear (or transposed-convolution) layer followed by batch norm and a
/// leaky ReLU.
#[derive(Clone, Copy, Debug)]
struct Hidden {
    lin: Linear,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    point: Vec<Hidden>,
    head: Vec<Hidden>,
    /// `z` for the deterministic variants, `μ` for the variational ones.
    latent: Linear,
    log_var: Option<Linear>,
    conv: Vec<Hidden>,
    conv_mean: Linear,
    conv_var: Option<Linear>,
    dense: Vec<Hidden>,
    dense_mean: Option<Linear>,
    dense_var: Option<Linear>,
}

/// Graph leaves of every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Latent {
    Code(Var),
    Gaussian { mu: Var, log_var: Var, z: Var },
}

impl Latent {
    pub fn z(&self) -> Var {
        match *self {
            Latent::Code(z) | Latent::Gaussian { z, .. } => z,
        }
    }
}

/// Graph nodes produced by a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub latent: Latent,
    /// Predicted point means, `[B, N, 3]`.
    pub mean: Var,
    /// Predicted per-coordinate variances, `[B, N, 3]`; σ variants only.
    pub var: Option<Var>,
}

/// Parameters, running statistics and layer layout of one network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    running: Vec<RunningStats>,
    layout: Layout,
    mode: Mode,
}

struct Builder<'a> {
    params: Vec<Param>,
    running: Vec<RunningStats>,
    rng: &'a mut crate::seed::Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn linear(
        &mut self,
        name: &str,
        w_shape: Vec<usize>,
        out: usize,
        bound: f64,
        bias: f64,
    ) -> Linear {
        let w = self.uniform(w_shape, bound);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::full(vec![out], bias));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(vec![width], 1.0));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(vec![width]));
        self.running.push(RunningStats {
            name: format!("{name}.bn"),
            mean: vec![0.0; width],
            var: vec![1.0; width],
        });
        Norm {
            gamma,
            beta,
            slot: self.running.len() - 1,
        }
    }

    fn hidden(
        &mut self,
        name: &str,
        w_shape: Vec<usize>,
        fan_in: usize,
        out: usize,
        slope: f64,
    ) -> Hidden {
        // He-uniform bound for a leaky ReLU
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let lin = self.linear(name, w_shape, out, bound, 0.0);
        let norm = self.norm(name, out);
        Hidden { lin, norm }
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Inverse of `softplus(x) + eps`.
fn softplus_inv(v: f64, eps: f64) -> f64 {
    let y = v - eps;
    y + (-(-y).exp_m1()).ln()
}

impl Model {
    /// A freshly initialised network in training mode.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seed::rng(seed);
        let mut b = Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let slope = config.leaky_slope;
        let sigma = config.variant.has_variance_head();
        let var_bias = softplus_inv(config.init_variance, config.variance_eps);

        let mut width = 3;
        let mut point = Vec::new();
        for (i, &w) in config.point_widths.iter().enumerate() {
            point.push(b.hidden(
                &format!("encoder.point.{i}"),
                vec![width, w],
                width,
                w,
                slope,
            ));
            width = w;
        }
        let mut head = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(b.hidden(
                &format!("encoder.head.{i}"),
                vec![width, w],
                width,
                w,
                slope,
            ));
            width = w;
        }
        let d = config.latent_dim;
        let (latent, log_var) = if config.variant.has_latent_gaussian() {
            let mu = b.linear("encoder.mu", vec![width, d], d, glorot(width, d), 0.0);
            let lv = b.linear(
                "encoder.log_var",
                vec![width, d],
                d,
                0.1 * glorot(width, d),
                0.0,
            );
            (mu, Some(lv))
        } else {
            (
                b.linear("encoder.z", vec![width, d], d, glorot(width, d), 0.0),
                None,
            )
        };

        let mut cin = d;
        let mut conv = Vec::new();
        for (i, &c) in config.conv_channels.iter().enumerate() {
            conv.push(b.hidden(
                &format!("decoder.conv.{i}"),
                vec![2, 2, cin, c],
                cin,
                c,
                slope,
            ));
            cin = c;
        }
        let bound = glorot(cin, 3);
        let conv_mean = b.linear("decoder.conv.mean", vec![2, 2, cin, 3], 3, bound, 0.0);
        let conv_var = sigma.then(|| {
            b.linear(
                "decoder.conv.var",
                vec![2, 2, cin, 3],
                3,
                0.01 * bound,
                var_bias,
            )
        });

        let mut dense = Vec::new();
        let (mut dense_mean, mut dense_var) = (None, None);
        let pd = config.dense_points();
        if pd > 0 {
            let mut width = d;
            for (i, &w) in config.dense_widths.iter().enumerate() {
                dense.push(b.hidden(
                    &format!("decoder.dense.{i}"),
                    vec![width, w],
                    width,
                    w,
                    slope,
                ));
                width = w;
            }
            let bound = glorot(width, 3 * pd);
            dense_mean = Some(b.linear(
                "decoder.dense.mean",
                vec![width, 3 * pd],
                3 * pd,
                bound,
                0.0,
            ));
            dense_var = sigma.then(|| {
                b.linear(
                    "decoder.dense.var",
                    vec![width, 3 * pd],
                    3 * pd,
                    0.01 * bound,
                    var_bias,
                )
            });
        }

        let Builder {
            params, running, ..
        } = b;
        Ok(Model {
            config,
            params,
            running,
            layout: Layout {
                point,
                head,
                latent,
                log_var,
                conv,
                conv_mean,
                conv_var,
                dense,
                dense_mean,
                dense_var,
            },
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g` as a leaf; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Uses existing graph nodes as the parameters, one per entry of
    /// [`Model::params`] with matching shapes.
    pub fn bind_vars(&self, g: &Graph, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if let Some((p, _)) = self
            .params
            .iter()
            .zip(&vars)
            .find(|(p, &v)| g.shape(v) != p.value.shape())
        {
            return Err(Error::dim(format!("shape mismatch binding {}", p.name)));
        }
        Ok(Bound { vars })
    }

    /// Folds the batch statistics recorded in a training-mode graph into the
    /// running statistics (unbiased variance, momentum 0.9).
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        for s in stats {
            let r = self.running.get_mut(s.slot).ok_or_else(|| {
                Error::usage(format!("batch statistics for unknown slot {}", s.slot))
            })?;
            if r.mean.len() != s.mean.len() {
                return Err(Error::dim(format!(
                    "batch statistics width mismatch for {}",
                    r.name
                )));
            }
            let unbias = s.count as f64 / (s.count as f64 - 1.0);
            for c in 0..r.mean.len() {
                r.mean[c] = RUNNING_MOMENTUM * r.mean[c] + (1.0 - RUNNING_MOMENTUM) * s.mean[c];
                r.var[c] =
                    RUNNING_MOMENTUM * r.var[c] + (1.0 - RUNNING_MOMENTUM) * s.var[c] * unbias;
            }
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.get(l.w))?;
        g.add_bias(h, p.get(l.b))
    }

    fn norm_act(&self, g: &mut Graph, p: &Bound, n: Norm, x: Var) -> Result<Var> {
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train { slot: n.slot },
            Mode::Eval => {
                let r = &self.running[n.slot];
                BatchNormMode::Eval {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }
            }
        };
        let h = g.batch_norm(x, p.get(n.gamma), p.get(n.beta), mode)?;
        Ok(g.leaky_relu(h, self.config.leaky_slope))
    }

    /// Encodes a `[B, N, 3]` batch.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        sampling: Sampling,
    ) -> Result<Latent> {
        let (batch, n) = match *g.shape(x) {
            [b, n, 3] if b > 0 && n > 0 => (b, n),
            ref s => return Err(Error::dim(format!("encoder expects [B, N, 3], got {s:?}"))),
        };
        let mut h = g.reshape(x, vec![batch * n, 3])?;
        for layer in &self.layout.point {
            let l = self.linear(g, p, layer.lin, h)?;
            h = self.norm_act(g, p, layer.norm, l)?;
        }
        let width = g.shape(h)[1];
        let h = g.reshape(h, vec![batch, n, width])?;
        let mut h = g.max_pool_points(h)?;
        for layer in &self.layout.head {
            let l = self.linear(g, p, layer.lin, h)?;
            h = self.norm_act(g, p, layer.norm, l)?;
        }
        let first = self.linear(g, p, self.layout.latent, h)?;
        let Some(lv) = self.layout.log_var else {
            return Ok(Latent::Code(first));
        };
        let log_var = self.linear(g, p, lv, h)?;
        let z = match sampling {
            Sampling::Mean => first,
            Sampling::Draw(seed) => {
                let mut rng = crate::seed::rng(seed);
                let shape = g.shape(first).to_vec();
                let n = shape.iter().product();
                let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let eps = g.constant(Tensor::new(shape, eps)?);
                let half = g.scale(log_var, 0.5);
                let std = g.exp(half)?;
                let noise = g.mul(std, eps)?;
                g.add(first, noise)?
            }
        };
        Ok(Latent::Gaussian {
            mu: first,
            log_var,
            z,
        })
    }

    /// Decodes a `[B, d]` batch of codes into `[B, N, 3]` means and, for the
    /// σ variants, variances.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Option<Var>)> {
        let batch = match *g.shape(z) {
            [b, d] if b > 0 && d == self.config.latent_dim => b,
            ref s => {
                return Err(Error::dim(format!(
                    "decoder expects [B, {}], got {s:?}",
                    self.config.latent_dim
                )))
            }
        };
        let eps = self.config.variance_eps;
        let d = self.config.latent_dim;

        let mut c = g.reshape(z, vec![batch, 1, 1, d])?;
        let mut side = 1;
        for layer in &self.layout.conv {
            let up = g.transposed_conv2d(c, p.get(layer.lin.w), p.get(layer.lin.b))?;
            side *= 2;
            let ch = g.shape(up)[3];
            let flat = g.reshape(up, vec![batch * side * side, ch])?;
            let act = self.norm_act(g, p, layer.norm, flat)?;
            c = g.reshape(act, vec![batch, side, side, ch])?;
        }
        let grid = 4 * side * side;
        let cm = self.layout.conv_mean;
        let mean_c = g.transposed_conv2d(c, p.get(cm.w), p.get(cm.b))?;
        let mut means = vec![g.reshape(mean_c, vec![batch, grid, 3])?];
        let mut vars = Vec::new();
        if let Some(cv) = self.layout.conv_var {
            let raw = g.transposed_conv2d(c, p.get(cv.w), p.get(cv.b))?;
            let v = g.softplus_eps(raw, eps)?;
            vars.push(g.reshape(v, vec![batch, grid, 3])?);
        }

        if let Some(dm) = self.layout.dense_mean {
            let pd = self.config.dense_points();
            let mut h = z;
            for layer in &self.layout.dense {
                let l = self.linear(g, p, layer.lin, h)?;
                h = self.norm_act(g, p, layer.norm, l)?;
            }
            let m = self.linear(g, p, dm, h)?;
            means.push(g.reshape(m, vec![batch, pd, 3])?);
            if let Some(dv) = self.layout.dense_var {
                let raw = self.linear(g, p, dv, h)?;
                let v = g.softplus_eps(raw, eps)?;
                vars.push(g.reshape(v, vec![batch, pd, 3])?);
            }
        }

        let mean = if means.len() == 1 {
            means[0]
        } else {
            g.concat(&means, 1)?
        };
        let var = match vars.len() {
            0 => None,
            1 => Some(vars[0]),
            _ => Some(g.concat(&vars, 1)?),
        };
        Ok((mean, var))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, sampling: Sampling) -> Result<Forward> {
        let latent = self.encode_graph(g, p, x, sampling)?;
        let (mean, var) = self.decode_graph(g, p, latent.z())?;
        Ok(Forward { latent, mean, var })
    }

    fn require_eval(&self, what: &str) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(Error::usage(format!("{what} needs the model in eval mode")));
        }
        Ok(())
    }

    pub(crate) fn batch_tensor(clouds: &[PointCloud]) -> Result<Tensor> {
        let n = clouds
            .first()
            .ok_or_else(|| Error::usage("empty batch"))?
            .len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(Error::dim("all clouds of a batch must have the same size"));
        }
        let data = clouds.iter().flat_map(|c| c.flat()).collect();
        Tensor::new(vec![clouds.len(), n, 3], data)
    }

    /// Encodes a single cloud with the running batch-norm statistics.
    pub fn encode(&self, x: &PointCloud) -> Result<Encoding> {
        self.require_eval("encode")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(Self::batch_tensor(std::slice::from_ref(x))?);
        Ok(match self.encode_graph(&mut g, &p, xv, Sampling::Mean)? {
            Latent::Code(z) => Encoding::Code(LatentCode {
                z: g.value(z).data().to_vec(),
            }),
            Latent::Gaussian { mu, log_var, .. } => Encoding::Gaussian(LatentGaussian {
                mu: g.value(mu).data().to_vec(),
                log_var: g.value(log_var).data().to_vec(),
            }),
        })
    }

    pub fn decode(&self, z: &LatentCode) -> Result<ReconDistribution> {
        self.require_eval("decode")?;
        if z.z.len() != self.config.latent_dim {
            return Err(Error::dim(format!(
                "latent code has {} entries, expected {}",
                z.z.len(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(Tensor::new(vec![1, z.z.len()], z.z.clone())?);
        let (mean, var) = self.decode_graph(&mut g, &p, zv)?;
        Ok(self.unpack(&g, mean, var, 1).pop().expect("one cloud"))
    }

    fn unpack(
        &self,
        g: &Graph,
        mean: Var,
        var: Option<Var>,
        batch: usize,
    ) -> Vec<ReconDistribution> {
        let n = self.config.n_points;
        let m = g.value(mean).data();
        let v = var.map(|v| g.value(v).data());
        (0..batch)
            .map(|b| {
                let slice = &m[b * n * 3..(b + 1) * n * 3];
                let mean = PointCloud::from_flat(slice).expect("decoder output is finite");
                match v {
                    None => ReconDistribution::unit(mean),
                    Some(v) => {
                        let var = v[b * n * 3..(b + 1) * n * 3]
                            .chunks_exact(3)
                            .map(|c| [c[0], c[1], c[2]])
                            .collect();
                        ReconDistribution::new(mean, var).expect("softplus variances are positive")
                    }
                }
            })
            .collect()
    }

    /// Encodes to the point estimate of `z` (the posterior mean for the
    /// variational variants) and decodes it.
    pub fn reconstruct(&self, x: &PointCloud) -> Result<ReconDistribution> {
        Ok(self
            .reconstruct_batch(std::slice::from_ref(x))?
            .pop()
            .expect("one cloud"))
    }

    /// [`Model::reconstruct`] for several equally sized clouds at once.
    pub fn reconstruct_batch(&self, xs: &[PointCloud]) -> Result<Vec<ReconDistribution>> {
        self.require_eval("reconstruct")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(Self::batch_tensor(xs)?);
        let out = self.forward(&mut g, &p, xv, Sampling::Mean)?;
        Ok(self.unpack(&g, out.mean, out.var, xs.len()))
    }

    /// Decodes a code drawn from the standard normal prior.
    pub fn generate(&self, seed: u64) -> Result<ReconDistribution> {
        if !self.variant().has_latent_gaussian() {
            return Err(Error::usage(format!(
                "variant {} has no latent prior to sample from",
                self.variant()
            )));
        }
        let mut rng = crate::seed::rng(seed);
        let z = (0..self.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.decode(&LatentCode { z })
    }
}
