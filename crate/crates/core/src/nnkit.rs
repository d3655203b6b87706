//! A small dense-network kit: forward and backward passes over mini-batches,
//! SGD and Adam, dropout and L2 regularization. Everything runs in f64.
//!
//! Batches are flat row-major buffers of `n × width`. The loss convention is
//! `data_loss + (l2 / 2) * Σ w²` over weights (biases excluded), so the
//! backward pass adds `l2 * w` to every weight gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }

    fn relu_family(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub use_bias: bool,
    /// Applied to the outputs of hidden layers in train mode only.
    pub dropout: f64,
    pub l2: f64,
    pub init_seed: u64,
}

impl NetSpec {
    /// `hidden` activation everywhere except a linear output layer.
    pub fn mlp(input_dim: usize, layer_sizes: &[usize], hidden: Activation) -> Self {
        let mut activations = vec![hidden; layer_sizes.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Linear;
        }
        NetSpec {
            input_dim,
            layer_sizes: layer_sizes.to_vec(),
            activations,
            use_bias: true,
            dropout: 0.0,
            l2: 0.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() {
            return Err(Error::arg("network needs at least one layer"));
        }
        if self.input_dim == 0 || self.layer_sizes.contains(&0) {
            return Err(Error::arg("layer sizes must be positive"));
        }
        if self.activations.len() != self.layer_sizes.len() {
            return Err(Error::arg(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.layer_sizes.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::arg(format!("l2 {} must be >= 0", self.l2)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        let mut n_in = self.input_dim;
        let mut total = 0;
        for &n_out in &self.layer_sizes {
            total += n_in * n_out + if self.use_bias { n_out } else { 0 };
            n_in = n_out;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
    /// Row-major `n_out × n_in`.
    pub w: Vec<f64>,
    /// Empty when the network has no biases.
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub spec: NetSpec,
    pub layers: Vec<Layer>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    batch: usize,
    /// Input to each layer (after dropout of the previous layer).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer, if applied.
    masks: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Gradient w.r.t. the batch input, row-major `n × input_dim`.
    pub input: Vec<f64>,
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl Net {
    /// He-uniform init for relu-family layers, Xavier-uniform otherwise;
    /// biases start at zero.
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_sizes.len());
        let mut n_in = spec.input_dim;
        for (l, (&n_out, &activation)) in spec.layer_sizes.iter().zip(&spec.activations).enumerate() {
            let limit = if activation.relu_family() {
                (6.0 / n_in as f64).sqrt()
            } else {
                (6.0 / (n_in + n_out) as f64).sqrt()
            };
            let mut r = rng::stream(spec.init_seed, l as u64);
            let w = (0..n_in * n_out).map(|_| r.random_range(-limit..=limit)).collect();
            let b = if spec.use_bias { vec![0.0; n_out] } else { Vec::new() };
            layers.push(Layer {
                n_in,
                n_out,
                activation,
                w,
                b,
            });
            n_in = n_out;
        }
        Ok(Net { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// `(l2 / 2) * Σ w²` over all weights.
    pub fn l2_penalty(&self) -> f64 {
        if self.spec.l2 == 0.0 {
            return 0.0;
        }
        0.5 * self.spec.l2 * self.layers.iter().flat_map(|l| &l.w).map(|w| w * w).sum::<f64>()
    }

    /// Forward pass over a flat batch. Dropout applies only when `rng` is
    /// given (train mode).
    pub fn forward_batch(&self, x: &[f64], mut rng: Option<&mut DetRng>) -> Result<(Vec<f64>, Cache)> {
        let d = self.input_dim();
        if x.is_empty() || x.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let n = x.len() / d;
        let last = self.layers.len() - 1;
        let mut cache = Cache {
            batch: n,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; n * l.n_out];
            for s in 0..n {
                let xs = &cur[s * l.n_in..(s + 1) * l.n_in];
                let zs = &mut z[s * l.n_out..(s + 1) * l.n_out];
                for (o, zo) in zs.iter_mut().enumerate() {
                    let row = &l.w[o * l.n_in..(o + 1) * l.n_in];
                    let mut acc = if l.b.is_empty() { 0.0 } else { l.b[o] };
                    for (wi, xi) in row.iter().zip(xs) {
                        acc += wi * xi;
                    }
                    *zo = acc;
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            let mut out = a.clone();
            let mask = match rng.as_deref_mut() {
                Some(r) if li < last && self.spec.dropout > 0.0 => {
                    let keep = 1.0 - self.spec.dropout;
                    let m: Vec<f64> = (0..out.len())
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    out.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(std::mem::replace(&mut cur, out));
            cache.pre.push(z);
            cache.post.push(a);
            cache.masks.push(mask);
        }
        Ok((cur, cache))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64], train: bool, rng: &mut DetRng) -> Result<(Vec<f64>, Cache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        self.forward_batch(x, train.then_some(rng))
    }

    /// Eval-mode output for one sample.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.forward_batch(x, None)?.0)
    }

    /// Eval-mode outputs for many samples, one row each.
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k = self.output_dim();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(256) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            if flat.len() != chunk.len() * self.input_dim() {
                return Err(Error::arg("row width differs from network input"));
            }
            let (y, _) = self.forward_batch(&flat, None)?;
            out.extend(y.chunks(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Gradients of `Σ_batch loss + l2 penalty` given `dL/d(output)` for
    /// each row of the batch.
    pub fn backward(&self, cache: &Cache, out_grad: &[f64]) -> Result<Grads> {
        let n = cache.batch;
        if cache.inputs.len() != self.layers.len() || out_grad.len() != n * self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: n * self.output_dim(),
                got: out_grad.len(),
            });
        }
        let mut gw: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut gb: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut delta = out_grad.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if let Some(m) = &cache.masks[li] {
                delta.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            for ((d, &z), &a) in delta.iter_mut().zip(&cache.pre[li]).zip(&cache.post[li]) {
                *d *= l.activation.deriv(z, a);
            }
            let x = &cache.inputs[li];
            let mut dw: Vec<f64> = l.w.iter().map(|w| self.spec.l2 * w).collect();
            let mut db = vec![0.0; l.b.len()];
            let mut dx = vec![0.0; n * l.n_in];
            for s in 0..n {
                let xs = &x[s * l.n_in..(s + 1) * l.n_in];
                let ds = &delta[s * l.n_out..(s + 1) * l.n_out];
                let dxs = &mut dx[s * l.n_in..(s + 1) * l.n_in];
                for (o, &g) in ds.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = o * l.n_in..(o + 1) * l.n_in;
                    for ((dwi, xi), (wi, dxi)) in dw[row.clone()].iter_mut().zip(xs).zip(l.w[row].iter().zip(dxs.iter_mut())) {
                        *dwi += g * xi;
                        *dxi += g * wi;
                    }
                }
                if !db.is_empty() {
                    db.iter_mut().zip(ds).for_each(|(b, g)| *b += g);
                }
            }
            gw.push(dw);
            gb.push(db);
            delta = dx;
        }
        gw.reverse();
        gb.reverse();
        Ok(Grads {
            w: gw,
            b: gb,
            input: delta,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Optimizer {
            kind,
            lr,
            t: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    pub fn step(&mut self, net: &mut Net, grads: &Grads) {
        self.t += 1;
        let mut k = 0;
        let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for (l, (gw, gb)) in net.layers.iter_mut().zip(grads.w.iter().zip(&grads.b)) {
            for (p, g) in l.w.iter_mut().chain(l.b.iter_mut()).zip(gw.iter().chain(gb)) {
                match self.kind {
                    OptimizerKind::Sgd => *p -= self.lr * g,
                    OptimizerKind::Adam => {
                        self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
                        self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
                        *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub shuffle_seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            shuffle_seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// What a training hook sees after each optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct Progress<'a> {
    pub epoch: usize,
    /// Number of optimizer steps taken so far, starting at 1.
    pub step: usize,
    pub batch_loss: f64,
    pub net: &'a Net,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss (data + L2 penalty) over each epoch's batches.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Mini-batch training. `objective` receives the batch input and network
/// output (flat, row-major) and returns the mean data loss over the batch
/// together with `dL/d(output)`.
pub fn train<F, H>(net: &mut Net, data: &[Vec<f64>], mut objective: F, spec: &TrainSpec, mut hook: H) -> Result<TrainReport>
where
    F: FnMut(&[f64], &[f64], usize) -> Result<(f64, Vec<f64>)>,
    H: FnMut(Progress<'_>) -> Control,
{
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::data("training data is empty"));
    }
    let d = net.input_dim();
    if let Some(bad) = data.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut opt = Optimizer::new(spec.optimizer, spec.learning_rate, net.param_count());
    let mut order_rng = rng::stream(spec.shuffle_seed, 0);
    let mut drop_rng = rng::stream(spec.shuffle_seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        loss_trace: Vec::with_capacity(spec.epochs),
        steps: 0,
        stopped_early: false,
    };
    let mut batch = Vec::with_capacity(spec.batch_size * d);
    for epoch in 0..spec.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(spec.batch_size) {
            batch.clear();
            chunk.iter().for_each(|&i| batch.extend_from_slice(&data[i]));
            let (out, cache) = net.forward_batch(&batch, Some(&mut drop_rng))?;
            let (loss, grad) = objective(&batch, &out, chunk.len())?;
            let loss = loss + net.l2_penalty();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss} at epoch {epoch}, step {}",
                    report.steps + 1
                )));
            }
            let grads = net.backward(&cache, &grad)?;
            opt.step(net, &grads);
            report.steps += 1;
            total += loss;
            n_batches += 1;
            let p = Progress {
                epoch,
                step: report.steps,
                batch_loss: loss,
                net,
            };
            if hook(p) == Control::Stop {
                report.stopped_early = true;
                report.loss_trace.push(total / n_batches as f64);
                return Ok(report);
            }
        }
        report.loss_trace.push(total / n_batches as f64);
    }
    Ok(report)
}

/// Mean squared error over all elements and its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = p - t;
            loss += e * e;
            2.0 * e / n
        })
        .collect();
    (loss / n, grad)
}
