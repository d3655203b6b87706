//! Label-free model selection: the expected anomaly gap (EAG) of training
//! scores, grid search over detector configurations, and the validation
//! monitor used for GANomaly early stopping.

use std::cmp::Ordering;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, EmbeddingDataset};
use crate::detectors::{
    fit_detector, score_dataset, AutoencoderParams, DeepSvddParams, DetectorConfig, DetectorKind, GanomalyParams,
    IForestParams, TrainedDetector,
};
use crate::error::{Error, Result};
use crate::nnkit::TrainSpec;

pub const EAG_FORMULA: &str = "tail-gap/v1: tail = {s >= pct_linear(s, lo)}, bulk = rest; \
                               (mean(tail) - mean(bulk)) / max(std_pop(bulk), eps); 0 if all scores equal";
pub const MIN_EAG_SCORES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EagConfig {
    pub tail_lo_percentile: f64,
    pub epsilon: f64,
}

impl Default for EagConfig {
    fn default() -> Self {
        EagConfig {
            tail_lo_percentile: 90.0,
            epsilon: 1e-12,
        }
    }
}

/// Normalized gap between the upper tail of the training scores and their
/// bulk. The tail is located by rank, which is what `s >= percentile`
/// selects, so any strictly increasing transform picks the same records.
pub fn eag(scores: &[f64], cfg: &EagConfig) -> Result<f64> {
    if !(cfg.tail_lo_percentile > 0.0 && cfg.tail_lo_percentile < 100.0) {
        return Err(Error::arg(format!("tail percentile {} outside (0, 100)", cfg.tail_lo_percentile)));
    }
    if scores.len() < MIN_EAG_SCORES {
        return Err(Error::arg(format!(
            "EAG needs at least {MIN_EAG_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad} in EAG input")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if s[0] == s[n - 1] {
        return Ok(0.0);
    }
    let h = cfg.tail_lo_percentile / 100.0 * (n - 1) as f64;
    let f = h.floor() as usize;
    let mut k = if h - f as f64 == 0.0 { f } else { f + 1 };
    while k > 0 && s[k - 1] == s[k] {
        k -= 1;
    }
    let (bulk, tail) = s.split_at(k);
    if bulk.is_empty() {
        return Ok(0.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mt) = (mean(bulk), mean(tail));
    let sd = (bulk.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / bulk.len() as f64).sqrt();
    Ok((mt - mb) / sd.max(cfg.epsilon))
}

/// Stops once `|R(k-1) - R(k)| < tolerance` held for `patience`
/// consecutive evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopMonitor {
    pub tolerance: f64,
    pub patience: usize,
    pub history: Vec<f64>,
    streak: usize,
}

impl EarlyStopMonitor {
    pub fn new(tolerance: f64, patience: usize) -> Result<Self> {
        if !(tolerance > 0.0) || patience == 0 {
            return Err(Error::arg(format!(
                "early stopping needs tolerance > 0 and patience >= 1, got {tolerance} and {patience}"
            )));
        }
        Ok(EarlyStopMonitor {
            tolerance,
            patience,
            history: Vec::new(),
            streak: 0,
        })
    }

    /// Records one evaluation; `true` means stop now.
    pub fn push(&mut self, r: f64) -> bool {
        if let Some(&prev) = self.history.last() {
            self.streak = if (prev - r).abs() < self.tolerance { self.streak + 1 } else { 0 };
        }
        self.history.push(r);
        self.streak >= self.patience
    }

    pub fn evaluations(&self) -> usize {
        self.history.len()
    }
}

/// Mean over `val` of `‖x − x̂‖₁ / D`.
pub fn validation_error(
    val: &[Vec<f64>],
    reconstruct: impl FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    let rec = reconstruct(val)?;
    let total: f64 = val
        .iter()
        .zip(&rec)
        .map(|(x, xh)| x.iter().zip(xh).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
        .sum();
    Ok(total / val.len() as f64)
}

fn product<A: Clone, B: Clone>(a: &[A], b: &[B]) -> Vec<(A, B)> {
    a.iter().flat_map(|x| b.iter().map(move |y| (x.clone(), y.clone()))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IForestGrid {
    pub n_estimators: Vec<usize>,
    pub max_samples: Vec<usize>,
    pub max_features_fraction: Vec<f64>,
    pub bootstrap: Vec<bool>,
}

impl Default for IForestGrid {
    fn default() -> Self {
        IForestGrid {
            n_estimators: vec![100, 200, 400],
            max_samples: vec![256, 512],
            max_features_fraction: vec![1.0, 0.8, 0.6],
            bootstrap: vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepSvddGrid {
    pub layers: Vec<Vec<usize>>,
    pub epochs: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
    pub base: DeepSvddParams,
}

impl Default for DeepSvddGrid {
    fn default() -> Self {
        DeepSvddGrid {
            layers: vec![vec![128, 64, 16], vec![256, 128, 32]],
            epochs: vec![50, 100],
            batch_size: vec![128, 256],
            l2: vec![1e-4, 1e-3],
            dropout: vec![0.0, 0.2],
            base: DeepSvddParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderGrid {
    pub latent: Vec<usize>,
    /// Encoder hidden sizes; the decoder mirrors them.
    pub encoder: Vec<Vec<usize>>,
    pub dropout: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
    pub base: AutoencoderParams,
}

impl Default for AutoencoderGrid {
    fn default() -> Self {
        AutoencoderGrid {
            latent: vec![8, 16, 32],
            encoder: vec![vec![128, 64], vec![256, 128]],
            dropout: vec![0.0, 0.1],
            learning_rate: vec![1e-3, 5e-4],
            epochs: vec![50, 100],
            base: AutoencoderParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanomalyGrid {
    pub latent: Vec<usize>,
    pub tolerance: Vec<f64>,
    pub patience: Vec<usize>,
    pub base: GanomalyParams,
}

impl Default for GanomalyGrid {
    fn default() -> Self {
        GanomalyGrid {
            latent: vec![30, 40, 50, 60],
            tolerance: vec![1e-3, 5e-4, 1e-4],
            patience: vec![3, 5],
            base: GanomalyParams::default(),
        }
    }
}

/// Search spaces for all four detectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub iforest: IForestGrid,
    pub deep_svdd: DeepSvddGrid,
    pub autoencoder: AutoencoderGrid,
    pub ganomaly: GanomalyGrid,
    /// Fraction of the training normals held out for GANomaly validation.
    pub val_fraction: f64,
}

impl GridSpec {
    /// Default grids with 10% of training normals held out for GANomaly.
    pub fn standard() -> Self {
        GridSpec {
            val_fraction: 0.1,
            ..Default::default()
        }
    }

    /// Cartesian product in a fixed nesting order, each point once.
    pub fn configs(&self, kind: DetectorKind) -> Vec<DetectorConfig> {
        match kind {
            DetectorKind::Iforest => {
                let g = &self.iforest;
                product(&product(&g.n_estimators, &g.max_samples), &product(&g.max_features_fraction, &g.bootstrap))
                    .into_iter()
                    .map(|((n, m), (f, b))| {
                        DetectorConfig::Iforest(IForestParams {
                            n_estimators: n,
                            max_samples: m,
                            max_features_fraction: f,
                            bootstrap: b,
                            seed: 0,
                        })
                    })
                    .collect()
            }
            DetectorKind::DeepSvdd => {
                let g = &self.deep_svdd;
                product(&product(&g.layers, &g.epochs), &product(&product(&g.batch_size, &g.l2), &g.dropout))
                    .into_iter()
                    .map(|((layers, epochs), ((batch_size, l2), dropout))| {
                        DetectorConfig::DeepSvdd(DeepSvddParams {
                            layers,
                            l2,
                            dropout,
                            train: TrainSpec {
                                epochs,
                                batch_size,
                                ..g.base.train.clone()
                            },
                            ..g.base.clone()
                        })
                    })
                    .collect()
            }
            DetectorKind::Autoencoder => {
                let g = &self.autoencoder;
                product(&product(&g.latent, &g.encoder), &product(&product(&g.dropout, &g.learning_rate), &g.epochs))
                    .into_iter()
                    .map(|((latent, encoder), ((dropout, learning_rate), epochs))| {
                        DetectorConfig::Autoencoder(AutoencoderParams {
                            latent,
                            encoder,
                            decoder: Vec::new(),
                            dropout,
                            train: TrainSpec {
                                epochs,
                                learning_rate,
                                ..g.base.train.clone()
                            },
                            ..g.base.clone()
                        })
                    })
                    .collect()
            }
            DetectorKind::Ganomaly => {
                let g = &self.ganomaly;
                product(&g.latent, &product(&g.tolerance, &g.patience))
                    .into_iter()
                    .map(|(latent, (tolerance, patience))| {
                        DetectorConfig::Ganomaly(GanomalyParams {
                            latent,
                            tolerance,
                            patience,
                            ..g.base.clone()
                        })
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub config: DetectorConfig,
    /// `None` for trials whose training collapsed.
    pub eag: Option<f64>,
    /// Deterministic training effort, standing in for train time.
    pub work: u64,
    pub collapsed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best_index: usize,
    pub best: DetectorConfig,
    pub trials: Vec<TrialResult>,
}

/// Best-first ordering: higher EAG, then less work, then config text.
fn rank(a: &TrialResult, b: &TrialResult) -> Ordering {
    let (ea, eb) = (a.eag.unwrap_or(f64::NEG_INFINITY), b.eag.unwrap_or(f64::NEG_INFINITY));
    eb.total_cmp(&ea)
        .then(a.work.cmp(&b.work))
        .then_with(|| a.config.canonical().cmp(&b.config.canonical()))
}

/// Trains one detector for a configuration and records its training EAG.
pub fn run_trial(
    index: usize,
    cfg: &DetectorConfig,
    train: &EmbeddingDataset,
    val: Option<&EmbeddingDataset>,
    eag_cfg: &EagConfig,
) -> Result<(TrialResult, Option<TrainedDetector>)> {
    match fit_detector(cfg, train, val) {
        Ok(model) => {
            let scores = score_dataset(&model, train)?;
            let e = eag(&scores, eag_cfg)?;
            Ok((
                TrialResult {
                    index,
                    config: cfg.clone(),
                    eag: Some(e),
                    work: model.work(),
                    collapsed: false,
                    error: None,
                },
                Some(model),
            ))
        }
        Err(err @ (Error::Collapse(_) | Error::NonFinite(_))) => {
            warn!("trial {index} collapsed: {err}");
            Ok((
                TrialResult {
                    index,
                    config: cfg.clone(),
                    eag: None,
                    work: 0,
                    collapsed: true,
                    error: Some(err.to_string()),
                },
                None,
            ))
        }
        Err(e) => Err(e),
    }
}

/// Trains every configuration on `train`, scores `train`, and picks the
/// highest EAG. Collapsed trials are recorded but never selected.
pub fn grid_search(
    kind: DetectorKind,
    grid: &GridSpec,
    train: &EmbeddingDataset,
    seed: u64,
    eag_cfg: &EagConfig,
) -> Result<GridOutcome> {
    let configs: Vec<DetectorConfig> = grid.configs(kind).into_iter().map(|c| c.with_seed(seed)).collect();
    if configs.is_empty() {
        return Err(Error::arg(format!("empty grid for {kind}")));
    }
    let (fit_set, val) = if kind == DetectorKind::Ganomaly && grid.val_fraction > 0.0 {
        let (a, b) = split(train, 1.0 - grid.val_fraction, false, seed)?;
        (a, Some(b))
    } else {
        (train.clone(), None)
    };
    info!("tune {kind}: {} configurations on {} records", configs.len(), fit_set.len());
    let trials: Vec<TrialResult> = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_trial(i, c, &fit_set, val.as_ref(), eag_cfg).map(|(t, _)| t))
        .collect::<Result<_>>()?;
    let best = trials
        .iter()
        .filter(|t| !t.collapsed)
        .min_by(|a, b| rank(a, b))
        .ok_or_else(|| Error::Collapse(format!("all {} {kind} trials collapsed", trials.len())))?;
    Ok(GridOutcome {
        best_index: best.index,
        best: best.config.clone(),
        trials,
    })
}
