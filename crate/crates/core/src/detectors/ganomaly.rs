//! Dense GANomaly: encoder, decoder and second encoder trained against a
//! discriminator. The anomaly score is the distance between the latent code
//! of the input and the latent code of its reconstruction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nnkit::{Activation, Net, NetSpec, Optimizer, OptimizerKind, TrainSpec};
use crate::rng;
use crate::tune::{validation_error, EarlyStopMonitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentDistance {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanomalyParams {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub w_adv: f64,
    pub w_con: f64,
    pub w_enc: f64,
    pub train: TrainSpec,
    pub tolerance: f64,
    pub patience: usize,
    /// Optimizer steps between validation evaluations.
    pub eval_every: usize,
    pub distance: LatentDistance,
    /// Discriminator loss below this for `collapse_evals` consecutive
    /// evaluations aborts training.
    pub collapse_loss: f64,
    pub collapse_evals: usize,
    pub seed: u64,
}

impl Default for GanomalyParams {
    fn default() -> Self {
        GanomalyParams {
            latent: 50,
            hidden: vec![128],
            disc_hidden: vec![128, 64],
            w_adv: 1.0,
            w_con: 50.0,
            w_enc: 1.0,
            train: TrainSpec {
                epochs: 15,
                batch_size: 64,
                learning_rate: 2e-4,
                optimizer: OptimizerKind::Adam,
                shuffle_seed: 0,
            },
            tolerance: 1e-3,
            patience: 3,
            eval_every: 100,
            distance: LatentDistance::L2,
            collapse_loss: 1e-6,
            collapse_evals: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ganomaly {
    pub enc1: Net,
    pub dec: Net,
    pub enc2: Net,
    pub disc_feat: Net,
    pub disc_head: Net,
    pub distance: LatentDistance,
    pub steps: usize,
    pub stopped_early: bool,
    /// Validation reconstruction error at every evaluation.
    pub val_trace: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("GANomaly {what} loss became {v} at step {step}")))
    }
}

impl GanomalyParams {
    fn nets(&self, d: usize) -> Result<[Net; 5]> {
        let seed = |k: u64| rng::derive_seed(self.seed, k);
        let mut enc_sizes = self.hidden.clone();
        enc_sizes.push(self.latent);
        let mut dec_sizes: Vec<usize> = self.hidden.iter().rev().copied().collect();
        dec_sizes.push(d);
        let mut e1 = NetSpec::mlp(d, &enc_sizes, Activation::LeakyRelu);
        e1.init_seed = seed(1);
        let mut dec = NetSpec::mlp(self.latent, &dec_sizes, Activation::Relu);
        dec.init_seed = seed(2);
        let mut e2 = e1.clone();
        e2.init_seed = seed(3);
        if self.disc_hidden.is_empty() {
            return Err(Error::arg("discriminator needs at least one hidden layer"));
        }
        let feat = NetSpec {
            input_dim: d,
            layer_sizes: self.disc_hidden.clone(),
            activations: vec![Activation::LeakyRelu; self.disc_hidden.len()],
            use_bias: true,
            dropout: 0.0,
            l2: 0.0,
            init_seed: seed(4),
        };
        let mut head = NetSpec::mlp(*self.disc_hidden.last().expect("non-empty"), &[1], Activation::Linear);
        head.init_seed = seed(5);
        Ok([Net::new(e1)?, Net::new(dec)?, Net::new(e2)?, Net::new(feat)?, Net::new(head)?])
    }
}

impl Ganomaly {
    /// Alternating generator and discriminator updates; with a validation
    /// set, stops early once the validation reconstruction error settles.
    pub fn fit(x: &[Vec<f64>], val: Option<&[Vec<f64>]>, params: &GanomalyParams) -> Result<Self> {
        params.train.validate()?;
        if params.latent == 0 {
            return Err(Error::arg("latent dimension must be positive"));
        }
        let d = x.first().map(Vec::len).ok_or_else(|| Error::data("GANomaly needs training data"))?;
        for row in x.iter().chain(val.unwrap_or_default()) {
            check_dim(d, row.len())?;
        }
        let [enc1, dec, enc2, disc_feat, disc_head] = params.nets(d)?;
        let mut m = Ganomaly {
            enc1,
            dec,
            enc2,
            disc_feat,
            disc_head,
            distance: params.distance,
            steps: 0,
            stopped_early: false,
            val_trace: Vec::new(),
        };
        let lr = params.train.learning_rate;
        let kind = params.train.optimizer;
        let mut opts: Vec<Optimizer> = [&m.enc1, &m.dec, &m.enc2, &m.disc_feat, &m.disc_head]
            .iter()
            .map(|n| Optimizer::new(kind, lr, n.param_count()))
            .collect();
        let mut monitor = EarlyStopMonitor::new(params.tolerance, params.patience)?;
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut order_rng = rng::stream(params.train.shuffle_seed, 0);
        let mut window_disc = 0.0;
        let mut window_len = 0usize;
        let mut collapsed_evals = 0usize;
        let mut batch = Vec::new();
        'epochs: for _ in 0..params.train.epochs {
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(params.train.batch_size) {
                batch.clear();
                chunk.iter().for_each(|&i| batch.extend_from_slice(&x[i]));
                let d_loss = m.step(&batch, chunk.len(), params, &mut opts)?;
                m.steps += 1;
                window_disc += d_loss;
                window_len += 1;
                if params.eval_every > 0 && m.steps % params.eval_every == 0 {
                    let mean_d = window_disc / window_len as f64;
                    (window_disc, window_len) = (0.0, 0);
                    collapsed_evals = if mean_d < params.collapse_loss { collapsed_evals + 1 } else { 0 };
                    if collapsed_evals >= params.collapse_evals {
                        return Err(Error::Collapse(format!(
                            "adversarial collapse: discriminator loss {mean_d:e} below {:e} for {} evaluations (step {})",
                            params.collapse_loss, params.collapse_evals, m.steps
                        )));
                    }
                    if let Some(v) = val {
                        let r = validation_error(v, |rows| m.reconstruct_rows(rows))?;
                        m.val_trace.push(r);
                        if monitor.push(r) {
                            m.stopped_early = true;
                            break 'epochs;
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    /// One generator update followed by one discriminator update; returns
    /// the discriminator loss.
    fn step(&mut self, x: &[f64], n: usize, p: &GanomalyParams, opts: &mut [Optimizer]) -> Result<f64> {
        let nf = n as f64;
        let (z, c1) = self.enc1.forward_batch(x, None)?;
        let (xh, cd) = self.dec.forward_batch(&z, None)?;
        let (zh, c2) = self.enc2.forward_batch(&xh, None)?;
        let (fr, _) = self.disc_feat.forward_batch(x, None)?;
        let (ff, cf) = self.disc_feat.forward_batch(&xh, None)?;

        let (nl, nx, nfe) = (z.len() as f64, x.len() as f64, fr.len() as f64);
        let adv: f64 = ff.iter().zip(&fr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nfe;
        let con: f64 = xh.iter().zip(x).map(|(a, b)| (a - b).abs()).sum::<f64>() / nx;
        let enc: f64 = zh.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nl;
        check_finite(p.w_adv * adv + p.w_con * con + p.w_enc * enc, "generator", self.steps + 1)?;

        let g_ff: Vec<f64> = ff.iter().zip(&fr).map(|(a, b)| p.w_adv * 2.0 * (a - b) / nfe).collect();
        let g_xh_adv = self.disc_feat.backward(&cf, &g_ff)?.input;
        let g_zh: Vec<f64> = zh.iter().zip(&z).map(|(a, b)| p.w_enc * 2.0 * (a - b) / nl).collect();
        let g2 = self.enc2.backward(&c2, &g_zh)?;
        let g_xh: Vec<f64> = xh
            .iter()
            .zip(x)
            .zip(g_xh_adv.iter().zip(&g2.input))
            .map(|((a, b), (ga, ge))| ga + ge + p.w_con * (a - b).signum() * f64::from(u8::from(a != b)) / nx)
            .collect();
        let gd = self.dec.backward(&cd, &g_xh)?;
        let g_z: Vec<f64> = gd.input.iter().zip(&g_zh).map(|(a, b)| a - b).collect();
        let g1 = self.enc1.backward(&c1, &g_z)?;
        opts[0].step(&mut self.enc1, &g1);
        opts[1].step(&mut self.dec, &gd);
        opts[2].step(&mut self.enc2, &g2);

        // discriminator: real rows first, then the reconstructions
        let mut both = Vec::with_capacity(2 * x.len());
        both.extend_from_slice(x);
        both.extend_from_slice(&xh);
        let (feat, cfeat) = self.disc_feat.forward_batch(&both, None)?;
        let (logit, chead) = self.disc_head.forward_batch(&feat, None)?;
        let mut loss = 0.0;
        let g_logit: Vec<f64> = logit
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let real = i < n;
                loss += if real { softplus(-l) } else { softplus(l) };
                0.5 * (sigmoid(l) - f64::from(u8::from(real))) / nf
            })
            .collect();
        let loss = 0.5 * loss / nf;
        check_finite(loss, "discriminator", self.steps + 1)?;
        let gh = self.disc_head.backward(&chead, &g_logit)?;
        let gf = self.disc_feat.backward(&cfeat, &gh.input)?;
        opts[3].step(&mut self.disc_feat, &gf);
        opts[4].step(&mut self.disc_head, &gh);
        Ok(loss)
    }

    pub fn reconstruct_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.dec.predict_rows(&self.enc1.predict_rows(rows)?)
    }

    /// Unscaled latent distances `‖z − ẑ‖`.
    pub fn raw_scores(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let z = self.enc1.predict_rows(rows)?;
        let zh = self.enc2.predict_rows(&self.dec.predict_rows(&z)?)?;
        Ok(z.iter()
            .zip(&zh)
            .map(|(a, b)| match self.distance {
                LatentDistance::L2 => a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum(),
                LatentDistance::L1 => a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum(),
            })
            .collect())
    }

    /// Latent distances min-max rescaled to `[0, 1]` over `rows`.
    pub fn score_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(min_max(self.raw_scores(rows)?))
    }
}

/// Rescales to `[0, 1]`; a constant batch maps to all zeros.
pub fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter_mut().for_each(|s| *s = (*s - lo) / (hi - lo));
    } else {
        v.iter_mut().for_each(|s| *s = 0.0);
    }
    v
}
