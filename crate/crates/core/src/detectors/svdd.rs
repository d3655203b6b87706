//! Deep SVDD: a bias-free network mapping normals close to a fixed center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{self, Activation, Control, Net, NetSpec, Progress, TrainSpec};

pub const CENTER_MIN_NORM: f64 = 1e-3;
pub const MAX_INIT_ATTEMPTS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepSvddParams {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub l2: f64,
    pub train: TrainSpec,
    pub seed: u64,
}

impl Default for DeepSvddParams {
    fn default() -> Self {
        DeepSvddParams {
            layers: vec![128, 64, 16],
            activation: Activation::LeakyRelu,
            dropout: 0.0,
            l2: 1e-4,
            train: TrainSpec::default(),
            seed: 0,
        }
    }
}

impl DeepSvddParams {
    pub fn net_spec(&self, input_dim: usize, attempt: u64) -> NetSpec {
        let mut spec = NetSpec::mlp(input_dim, &self.layers, self.activation);
        spec.use_bias = false;
        spec.dropout = self.dropout;
        spec.l2 = self.l2;
        spec.init_seed = self.seed.wrapping_add(attempt);
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepSvdd {
    pub net: Net,
    pub center: Vec<f64>,
    pub steps: usize,
}

fn mean_output(net: &Net, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let out = net.predict_rows(x)?;
    let mut c = vec![0.0; net.output_dim()];
    for o in &out {
        c.iter_mut().zip(o).for_each(|(a, v)| *a += v);
    }
    c.iter_mut().for_each(|v| *v /= x.len() as f64);
    Ok(c)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl DeepSvdd {
    /// Initializes the network (re-seeding up to five times if the initial
    /// center collapses towards the origin), freezes the center and trains.
    pub fn fit(x: &[Vec<f64>], params: &DeepSvddParams) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::data("deep SVDD needs training data"))?;
        for attempt in 0..MAX_INIT_ATTEMPTS {
            let net = Net::new(params.net_spec(d, attempt))?;
            let center = mean_output(&net, x)?;
            if norm(&center) > CENTER_MIN_NORM {
                return Self::train_with_center(net, center, x, &params.train);
            }
            log::warn!("deep SVDD center collapsed on init attempt {}", attempt + 1);
        }
        Err(Error::Collapse(format!(
            "deep SVDD center norm stayed below {CENTER_MIN_NORM} after {MAX_INIT_ATTEMPTS} initializations"
        )))
    }

    /// Uses a caller-supplied network; it must be bias-free.
    pub fn with_network(net: Net, x: &[Vec<f64>], train: &TrainSpec) -> Result<Self> {
        if net.spec.use_bias {
            return Err(Error::arg("deep SVDD networks must not use bias terms"));
        }
        if x.is_empty() {
            return Err(Error::data("deep SVDD needs training data"));
        }
        let center = mean_output(&net, x)?;
        if norm(&center) <= CENTER_MIN_NORM {
            return Err(Error::Collapse("deep SVDD center collapsed at initialization".into()));
        }
        Self::train_with_center(net, center, x, train)
    }

    fn train_with_center(mut net: Net, center: Vec<f64>, x: &[Vec<f64>], train: &TrainSpec) -> Result<Self> {
        let k = center.len();
        let c = center.clone();
        let objective = |_: &[f64], out: &[f64], n: usize| {
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(out.len());
            for o in out.chunks(k) {
                for (v, m) in o.iter().zip(&c) {
                    loss += (v - m) * (v - m);
                    grad.push(2.0 * (v - m) / n as f64);
                }
            }
            Ok((loss / n as f64, grad))
        };
        let report = nnkit::train(&mut net, x, objective, train, |_: Progress<'_>| Control::Continue)?;
        Ok(DeepSvdd {
            net,
            center,
            steps: report.steps,
        })
    }

    /// `‖φ(x) − c‖²`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let o = self.net.predict(x)?;
        Ok(o.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn score_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .net
            .predict_rows(rows)?
            .iter()
            .map(|o| o.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect())
    }
}
