//! Dense networks with batch normalization, hand-written backpropagation,
//! Adam and soft target blending.
//!
//! Layout: optional normalization of the raw input, then dense layers. Each
//! hidden layer is `affine -> (batch norm) -> activation`; the output layer
//! is `affine -> output activation`. A side input (the critic's action) can
//! be concatenated to the input of one dense layer and is never normalized.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FINAL_LAYER_INIT: f64 = 3e-3;
pub const CHECKPOINT_FORMAT: &str = "carfollow-mlp/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, y: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => y.clone(),
            Activation::Relu => y.mapv(|v| v.max(0.0)),
            Activation::Tanh => y.mapv(f64::tanh),
        }
    }

    /// `d out / d y` given the pre-activation and the output.
    fn derivative(self, y: &Array2<f64>, out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => Array2::ones(y.raw_dim()),
            Activation::Relu => y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => out.mapv(|o| 1.0 - o * o),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left alone.
    Probe,
    /// Running statistics only.
    Infer,
}

impl Mode {
    fn batch_stats(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Width of the side input, 0 for none.
    pub side_input: usize,
    /// Index of the dense layer whose input gets the side input appended.
    pub side_at: usize,
    pub input_norm: bool,
    pub hidden_norm: Vec<bool>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub norm_eps: f64,
    /// Weight of the old running statistic in each update.
    pub norm_momentum: f64,
}

impl MlpSpec {
    /// Policy network: normalized input and hidden layers, `tanh` output.
    pub fn actor(obs: usize, width: usize) -> Self {
        Self {
            input: obs,
            hidden: vec![width, width],
            output: 1,
            side_input: 0,
            side_at: 0,
            input_norm: true,
            hidden_norm: vec![true, true],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            norm_eps: 1e-6,
            norm_momentum: 0.99,
        }
    }

    /// Q network: the state pathway is normalized up to the first hidden
    /// layer, the action joins at the second dense layer, linear output.
    pub fn critic(obs: usize, width: usize) -> Self {
        Self {
            input: obs,
            hidden: vec![width, width],
            output: 1,
            side_input: 1,
            side_at: 1,
            input_norm: true,
            hidden_norm: vec![true, false],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            norm_eps: 1e-6,
            norm_momentum: 0.99,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        if self.hidden_norm.len() != self.hidden.len() {
            return Err(Error::Shape("one normalization flag per hidden layer".into()));
        }
        if self.side_input > 0 && self.side_at > self.hidden.len() {
            return Err(Error::Shape("side input targets a missing layer".into()));
        }
        if !(self.norm_eps > 0.0 && (0.0..1.0).contains(&self.norm_momentum)) {
            return Err(Error::InvalidConfig("bad normalization constants".into()));
        }
        Ok(())
    }

    fn dense_dims(&self) -> Vec<(usize, usize)> {
        let n = self.hidden.len() + 1;
        (0..n)
            .map(|l| {
                let mut fan_in = if l == 0 { self.input } else { self.hidden[l - 1] };
                if self.side_input > 0 && l == self.side_at {
                    fan_in += self.side_input;
                }
                let out = if l < self.hidden.len() { self.hidden[l] } else { self.output };
                (fan_in, out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
struct NormCache {
    zhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Array2<f64>,
    norm: Option<NormCache>,
    y: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch_stats: bool,
    input_norm: Option<NormCache>,
    layers: Vec<LayerCache>,
}

/// Parameter gradients in [`Mlp::params`] order, plus gradients with
/// respect to the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub input: Array2<f64>,
    pub side: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    input_norm: Option<BatchNorm>,
    layers: Vec<Dense>,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.input_norm == other.input_norm && self.layers == other.layers
    }
}

fn norm_forward(
    bn: &BatchNorm,
    z: &Array2<f64>,
    batch_stats: bool,
    eps: f64,
) -> (Array2<f64>, NormCache, Option<(Array1<f64>, Array1<f64>)>) {
    let (mean, var) = if batch_stats {
        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
        let var = (z - &mean).mapv(|d| d * d).mean_axis(Axis(0)).expect("non-empty batch");
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let zhat = (z - &mean) * &inv_std;
    let y = &zhat * &bn.gamma + &bn.beta;
    let stats = batch_stats.then_some((mean, var));
    (y, NormCache { zhat, inv_std }, stats)
}

/// Returns `(dz, dgamma, dbeta)`.
fn norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gamma: &Array1<f64>,
    batch_stats: bool,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (dy * &cache.zhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dzhat = dy * gamma;
    let dz = if batch_stats {
        let n = dy.nrows() as f64;
        let sum_dzhat = dzhat.sum_axis(Axis(0));
        let sum_dzhat_zhat = (&dzhat * &cache.zhat).sum_axis(Axis(0));
        let centered = &dzhat * n - &sum_dzhat - &(&cache.zhat * &sum_dzhat_zhat);
        centered * &(&cache.inv_std / n)
    } else {
        dzhat * &cache.inv_std
    };
    (dz, dgamma, dbeta)
}

fn blend_running(bn: &mut BatchNorm, mean: &Array1<f64>, var: &Array1<f64>, n: usize, momentum: f64) {
    let unbiased = n as f64 / (n as f64 - 1.0);
    bn.running_mean.zip_mut_with(mean, |r, &m| *r = momentum * *r + (1.0 - momentum) * m);
    bn.running_var
        .zip_mut_with(var, |r, &v| *r = momentum * *r + (1.0 - momentum) * v * unbiased);
}

impl Mlp {
    /// Hidden layers uniform in `+-1/sqrt(fan_in)`, output layer uniform in
    /// `+-3e-3`; determined entirely by `seed`.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.dense_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, out))| {
                let bound = if l == last {
                    FINAL_LAYER_INIT
                } else {
                    1.0 / (fan_in as f64).sqrt()
                };
                let weight = Array2::from_shape_fn((fan_in, out), |_| rng.random_range(-bound..=bound));
                let bias = Array1::from_shape_fn(out, |_| rng.random_range(-bound..=bound));
                let norm = (l < last && spec.hidden_norm[l]).then(|| BatchNorm::new(out));
                Dense { weight, bias, norm }
            })
            .collect();
        Ok(Self {
            input_norm: spec.input_norm.then(|| BatchNorm::new(spec.input)),
            spec,
            layers,
            cache: None,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_norm(&self) -> Option<&BatchNorm> {
        self.input_norm.as_ref()
    }

    fn check_inputs(&self, input: &ArrayView2<f64>, side: Option<&ArrayView2<f64>>, mode: Mode) -> Result<()> {
        if input.ncols() != self.spec.input {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                input.ncols(),
                self.spec.input
            )));
        }
        match (side, self.spec.side_input) {
            (None, 0) => {}
            (Some(s), w) if w > 0 && s.ncols() == w && s.nrows() == input.nrows() => {}
            _ => {
                return Err(Error::Shape(format!(
                    "side input must be {} columns by {} rows",
                    self.spec.side_input,
                    input.nrows()
                )))
            }
        }
        if input.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if mode.batch_stats() && input.nrows() < 2 {
            return Err(Error::Statistics(input.nrows()));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: ArrayView2<f64>,
        side: Option<ArrayView2<f64>>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ForwardCache, Vec<(Array1<f64>, Array1<f64>)>)> {
        self.check_inputs(&input, side.as_ref(), mode)?;
        let batch = mode.batch_stats();
        let eps = self.spec.norm_eps;
        let mut stats = Vec::new();
        let mut h = input.to_owned();
        let input_cache = match &self.input_norm {
            Some(bn) => {
                let (y, c, st) = norm_forward(bn, &h, batch, eps);
                stats.extend(st);
                h = y;
                Some(c)
            }
            None => None,
        };
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = match side {
                Some(s) if l == self.spec.side_at => concatenate![Axis(1), h, s],
                _ => h,
            };
            let z = x.dot(&layer.weight) + &layer.bias;
            let (y, norm) = match &layer.norm {
                Some(bn) => {
                    let (y, c, st) = norm_forward(bn, &z, batch, eps);
                    stats.extend(st);
                    (y, Some(c))
                }
                None => (z, None),
            };
            let act = if l == last {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            let out = act.apply(&y);
            h = out.clone();
            caches.push(LayerCache { x, norm, y, out });
        }
        Ok((
            h,
            ForwardCache {
                batch_stats: batch,
                input_norm: input_cache,
                layers: caches,
            },
            stats,
        ))
    }

    /// Forward pass that caches intermediates for [`Mlp::backward`].
    pub fn forward(&mut self, input: ArrayView2<f64>, side: Option<ArrayView2<f64>>, mode: Mode) -> Result<Array2<f64>> {
        let (out, cache, stats) = self.run(input, side, mode)?;
        if mode == Mode::Train {
            let n = input.nrows();
            let m = self.spec.norm_momentum;
            let mut stats = stats.iter();
            let norms = self
                .input_norm
                .iter_mut()
                .chain(self.layers.iter_mut().filter_map(|l| l.norm.as_mut()));
            for bn in norms {
                let (mean, var) = stats.next().expect("one statistic per norm layer");
                blend_running(bn, mean, var, n, m);
            }
        }
        self.cache = Some(cache);
        Ok(out)
    }

    /// Inference with running statistics; no caching, no mutation.
    pub fn infer(&self, input: ArrayView2<f64>, side: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        Ok(self.run(input, side, Mode::Infer)?.0)
    }

    /// Backpropagates `upstream = dL/d(output)` through the cached forward
    /// pass. The cache is kept, so several upstream gradients may be pushed
    /// through one forward pass.
    pub fn backward(&self, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let last_out = &cache.layers.last().expect("at least one layer").out;
        if upstream.dim() != last_out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                last_out.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut layer_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut side_grad = None;
        let mut dh = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            let act = if l == last {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            let dy = dh * act.derivative(&c.y, &c.out);
            let (dz, norm_grads) = match (&layer.norm, &c.norm) {
                (Some(bn), Some(nc)) => {
                    let (dz, dg, db) = norm_backward(&dy, nc, &bn.gamma, cache.batch_stats);
                    (dz, Some((dg, db)))
                }
                _ => (dy, None),
            };
            let dw = c.x.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let dx = dz.dot(&layer.weight.t());
            let mut g = vec![dw.iter().copied().collect(), db.to_vec()];
            if let Some((dg, dbeta)) = norm_grads {
                g.push(dg.to_vec());
                g.push(dbeta.to_vec());
            }
            layer_grads[l] = g;
            dh = if self.spec.side_input > 0 && l == self.spec.side_at {
                let split = dx.ncols() - self.spec.side_input;
                side_grad = Some(dx.slice(s![.., split..]).to_owned());
                dx.slice(s![.., ..split]).to_owned()
            } else {
                dx
            };
        }
        let mut params = Vec::new();
        let input_grad = match (&self.input_norm, &cache.input_norm) {
            (Some(bn), Some(nc)) => {
                let (dz, dg, db) = norm_backward(&dh, nc, &bn.gamma, cache.batch_stats);
                params.push(dg.to_vec());
                params.push(db.to_vec());
                dz
            }
            _ => dh,
        };
        params.extend(layer_grads.into_iter().flatten());
        Ok(Gradients {
            params,
            input: input_grad,
            side: side_grad,
        })
    }

    /// Trainable tensors in canonical order: input norm scale/shift, then
    /// per dense layer weight, bias and (if normalized) scale/shift.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        if let Some(bn) = &self.input_norm {
            v.push(bn.gamma.as_slice().expect("standard layout"));
            v.push(bn.beta.as_slice().expect("standard layout"));
        }
        for layer in &self.layers {
            v.push(layer.weight.as_slice().expect("standard layout"));
            v.push(layer.bias.as_slice().expect("standard layout"));
            if let Some(bn) = &layer.norm {
                v.push(bn.gamma.as_slice().expect("standard layout"));
                v.push(bn.beta.as_slice().expect("standard layout"));
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        if let Some(BatchNorm { gamma, beta, .. }) = &mut self.input_norm {
            v.push(gamma.as_slice_mut().expect("standard layout"));
            v.push(beta.as_slice_mut().expect("standard layout"));
        }
        for Dense { weight, bias, norm } in &mut self.layers {
            v.push(weight.as_slice_mut().expect("standard layout"));
            v.push(bias.as_slice_mut().expect("standard layout"));
            if let Some(BatchNorm { gamma, beta, .. }) = norm {
                v.push(gamma.as_slice_mut().expect("standard layout"));
                v.push(beta.as_slice_mut().expect("standard layout"));
            }
        }
        v
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let norms = self
            .input_norm
            .iter_mut()
            .chain(self.layers.iter_mut().filter_map(|l| l.norm.as_mut()));
        let mut v: Vec<&mut [f64]> = Vec::new();
        for BatchNorm {
            running_mean,
            running_var,
            ..
        } in norms
        {
            v.push(running_mean.as_slice_mut().expect("standard layout"));
            v.push(running_var.as_slice_mut().expect("standard layout"));
        }
        v
    }

    fn running_stats(&self) -> Vec<&[f64]> {
        self.input_norm
            .iter()
            .chain(self.layers.iter().filter_map(|l| l.norm.as_ref()))
            .flat_map(|bn| {
                [
                    bn.running_mean.as_slice().expect("standard layout"),
                    bn.running_var.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Largest absolute parameter or running-statistic difference.
    pub fn max_abs_diff(&self, other: &Mlp) -> Result<f64> {
        if self.spec != other.spec {
            return Err(Error::Shape("architectures differ".into()));
        }
        let a = self.params().into_iter().chain(self.running_stats());
        let b = other.params().into_iter().chain(other.running_stats());
        Ok(a.zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let ck = NetworkCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            network: self.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: NetworkCheckpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                line: 0,
                message: format!("unknown checkpoint format {:?}", ck.format),
            });
        }
        ck.network.spec.validate()?;
        Ok((ck.network, ck.config_hash))
    }
}

/// Self-describing network file: architecture, every parameter and running
/// statistic, and the hash of the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub config_hash: String,
    pub network: Mlp,
}

/// `target <- (1 - blend) * target + blend * source`, for parameters and
/// running statistics alike.
pub fn soft_update(target: &mut Mlp, source: &Mlp, blend: f64) -> Result<()> {
    if target.spec != source.spec {
        return Err(Error::Shape("soft update between different architectures".into()));
    }
    if !(blend > 0.0 && blend <= 1.0) {
        return Err(Error::InvalidConfig(format!("blend must be in (0, 1], got {blend}")));
    }
    let keep = 1.0 - blend;
    let mix = |d: &mut [f64], s: &[f64]| {
        for (t, &v) in d.iter_mut().zip(s) {
            *t = keep * *t + blend * v;
        }
    };
    for (d, s) in target.params_mut().into_iter().zip(source.params()) {
        mix(d, s);
    }
    for (d, s) in target.running_stats_mut().into_iter().zip(source.running_stats()) {
        mix(d, s);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, net: &Mlp) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected adaptive-moment descent step. Refuses (leaving both
    /// the network and the moments untouched) when a gradient is not finite.
    pub fn update(&mut self, net: &mut Mlp, grads: &[Vec<f64>]) -> Result<()> {
        let mut params = net.params_mut();
        if grads.len() != params.len() || grads.iter().zip(&params).any(|(g, p)| g.len() != p.len()) {
            return Err(Error::Shape("gradients do not match the parameters".into()));
        }
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient tensor {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
