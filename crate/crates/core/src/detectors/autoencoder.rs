//! Dense autoencoder scored by reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{self, Activation, Control, Net, NetSpec, Progress, TrainSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderParams {
    pub encoder: Vec<usize>,
    pub latent: usize,
    /// Hidden decoder sizes; empty means the mirror of `encoder`.
    pub decoder: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub l2: f64,
    pub train: TrainSpec,
    pub seed: u64,
}

impl Default for AutoencoderParams {
    fn default() -> Self {
        AutoencoderParams {
            encoder: vec![128, 64],
            latent: 16,
            decoder: Vec::new(),
            activation: Activation::Relu,
            dropout: 0.0,
            l2: 0.0,
            train: TrainSpec::default(),
            seed: 0,
        }
    }
}

impl AutoencoderParams {
    /// One network: encoder hidden layers, a linear latent layer, decoder
    /// hidden layers and a linear output of width `input_dim`.
    pub fn net_spec(&self, input_dim: usize) -> NetSpec {
        let decoder: Vec<usize> = if self.decoder.is_empty() {
            self.encoder.iter().rev().copied().collect()
        } else {
            self.decoder.clone()
        };
        let mut sizes = self.encoder.clone();
        sizes.push(self.latent);
        sizes.extend(&decoder);
        sizes.push(input_dim);
        let mut activations = vec![self.activation; sizes.len()];
        activations[self.encoder.len()] = Activation::Linear;
        *activations.last_mut().expect("non-empty") = Activation::Linear;
        NetSpec {
            input_dim,
            layer_sizes: sizes,
            activations,
            use_bias: true,
            dropout: self.dropout,
            l2: self.l2,
            init_seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub net: Net,
    pub latent: usize,
    pub steps: usize,
}

/// `‖x − x̂‖² / D`.
pub fn reconstruction_error(x: &[f64], xhat: &[f64]) -> f64 {
    x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

impl Autoencoder {
    pub fn fit(x: &[Vec<f64>], params: &AutoencoderParams) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::data("autoencoder needs training data"))?;
        let mut net = Net::new(params.net_spec(d))?;
        let objective = |inp: &[f64], out: &[f64], _n: usize| Ok(nnkit::mse(out, inp));
        let report = nnkit::train(&mut net, x, objective, &params.train, |_: Progress<'_>| Control::Continue)?;
        Ok(Autoencoder {
            net,
            latent: params.latent,
            steps: report.steps,
        })
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(x)
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(reconstruction_error(x, &self.reconstruct(x)?))
    }

    pub fn score_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self
            .net
            .predict_rows(rows)?
            .iter()
            .zip(rows)
            .map(|(xhat, x)| reconstruction_error(x, xhat))
            .collect())
    }
}
