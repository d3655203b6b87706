//! Unsupervised anomaly detectors. Every detector trains on normal records
//! only and scores so that higher means more anomalous.

pub mod autoencoder;
pub mod ganomaly;
pub mod iforest;
pub mod model_file;
pub mod svdd;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use autoencoder::{Autoencoder, AutoencoderParams};
pub use ganomaly::{Ganomaly, GanomalyParams, LatentDistance};
pub use iforest::{anomaly_score, c_factor, IForest, IForestParams};
pub use model_file::{load_model, save_model};
pub use svdd::{DeepSvdd, DeepSvddParams};

use crate::data::{EmbeddingDataset, Label, Record};
use crate::embed::Normalizer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Iforest,
    DeepSvdd,
    Autoencoder,
    Ganomaly,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Iforest,
        DetectorKind::DeepSvdd,
        DetectorKind::Autoencoder,
        DetectorKind::Ganomaly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Iforest => "iforest",
            DetectorKind::DeepSvdd => "deep_svdd",
            DetectorKind::Autoencoder => "autoencoder",
            DetectorKind::Ganomaly => "ganomaly",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown detector {s:?}")))
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DetectorConfig {
    Iforest(IForestParams),
    DeepSvdd(DeepSvddParams),
    Autoencoder(AutoencoderParams),
    Ganomaly(GanomalyParams),
}

impl DetectorConfig {
    pub fn default_for(kind: DetectorKind) -> Self {
        match kind {
            DetectorKind::Iforest => DetectorConfig::Iforest(IForestParams::default()),
            DetectorKind::DeepSvdd => DetectorConfig::DeepSvdd(DeepSvddParams::default()),
            DetectorKind::Autoencoder => DetectorConfig::Autoencoder(AutoencoderParams::default()),
            DetectorKind::Ganomaly => DetectorConfig::Ganomaly(GanomalyParams::default()),
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            DetectorConfig::Iforest(_) => DetectorKind::Iforest,
            DetectorConfig::DeepSvdd(_) => DetectorKind::DeepSvdd,
            DetectorConfig::Autoencoder(_) => DetectorKind::Autoencoder,
            DetectorConfig::Ganomaly(_) => DetectorKind::Ganomaly,
        }
    }

    /// Sets every seed (initialization and shuffling) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            DetectorConfig::Iforest(p) => p.seed = seed,
            DetectorConfig::DeepSvdd(p) => {
                p.seed = seed;
                p.train.shuffle_seed = seed;
            }
            DetectorConfig::Autoencoder(p) => {
                p.seed = seed;
                p.train.shuffle_seed = seed;
            }
            DetectorConfig::Ganomaly(p) => {
                p.seed = seed;
                p.train.shuffle_seed = seed;
            }
        }
        self
    }

    /// Neural detectors see standardized inputs.
    pub fn normalizes(&self) -> bool {
        !matches!(self, DetectorConfig::Iforest(_))
    }

    /// Canonical JSON text, used for lexicographic tie-breaks.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("configs serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DetectorModel {
    Iforest(IForest),
    DeepSvdd(DeepSvdd),
    Autoencoder(Autoencoder),
    Ganomaly(Ganomaly),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedDetector {
    pub config: DetectorConfig,
    pub normalizer: Option<Normalizer>,
    pub model: DetectorModel,
}

impl TrainedDetector {
    pub fn kind(&self) -> DetectorKind {
        self.config.kind()
    }

    pub fn input_dim(&self) -> usize {
        match &self.model {
            DetectorModel::Iforest(m) => m.n_features,
            DetectorModel::DeepSvdd(m) => m.net.input_dim(),
            DetectorModel::Autoencoder(m) => m.net.input_dim(),
            DetectorModel::Ganomaly(m) => m.enc1.input_dim(),
        }
    }

    /// Deterministic measure of training effort: tree nodes for the
    /// isolation forest, optimizer steps times parameters for networks.
    pub fn work(&self) -> u64 {
        let nets = |steps: usize, params: usize| (steps as u64).saturating_mul(params as u64);
        match &self.model {
            DetectorModel::Iforest(m) => m.n_nodes() as u64,
            DetectorModel::DeepSvdd(m) => nets(m.steps, m.net.param_count()),
            DetectorModel::Autoencoder(m) => nets(m.steps, m.net.param_count()),
            DetectorModel::Ganomaly(m) => nets(
                m.steps,
                [&m.enc1, &m.dec, &m.enc2, &m.disc_feat, &m.disc_head]
                    .iter()
                    .map(|n| n.param_count())
                    .sum(),
            ),
        }
    }

    /// Scores in row order. GANomaly scores are min-max rescaled over `rows`.
    pub fn score_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let normalized;
        let rows = match &self.normalizer {
            Some(n) => {
                normalized = n.apply_rows(rows)?;
                &normalized[..]
            }
            None => rows,
        };
        match &self.model {
            DetectorModel::Iforest(m) => rows.par_iter().map(|r| m.score(r)).collect(),
            DetectorModel::DeepSvdd(m) => par_chunks(rows, |c| m.score_rows(c)),
            DetectorModel::Autoencoder(m) => par_chunks(rows, |c| m.score_rows(c)),
            DetectorModel::Ganomaly(m) => Ok(ganomaly::min_max(par_chunks(rows, |c| m.raw_scores(c))?)),
        }
    }
}

fn par_chunks(rows: &[Vec<f64>], f: impl Fn(&[Vec<f64>]) -> Result<Vec<f64>> + Sync + Send) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = rows.par_chunks(512).map(f).collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn check_normals(ds: &EmbeddingDataset, what: &str) -> Result<()> {
    match ds.iter().find(|r| r.label() == Some(Label::Abnormal)) {
        Some(r) => Err(Error::data(format!(
            "{what} contains abnormal record {}; detectors train on normals only",
            r.id()
        ))),
        None => Ok(()),
    }
}

/// Fits a detector on normal records. `val` is used by GANomaly's early
/// stopping and ignored otherwise.
pub fn fit_detector(cfg: &DetectorConfig, train: &EmbeddingDataset, val: Option<&EmbeddingDataset>) -> Result<TrainedDetector> {
    check_normals(train, "training set")?;
    if let Some(v) = val {
        check_normals(v, "validation set")?;
    }
    fit_rows(cfg, &train.matrix(), val.map(EmbeddingDataset::matrix).as_deref())
}

/// Fits on raw rows without label checks.
pub fn fit_rows(cfg: &DetectorConfig, x: &[Vec<f64>], val: Option<&[Vec<f64>]>) -> Result<TrainedDetector> {
    if x.is_empty() {
        return Err(Error::data("no training rows"));
    }
    let normalizer = if cfg.normalizes() { Some(Normalizer::fit(x)?) } else { None };
    let (xn, vn) = match &normalizer {
        Some(n) => (n.apply_rows(x)?, val.map(|v| n.apply_rows(v)).transpose()?),
        None => (x.to_vec(), val.map(<[Vec<f64>]>::to_vec)),
    };
    let model = match cfg {
        DetectorConfig::Iforest(p) => DetectorModel::Iforest(IForest::fit(&xn, p)?),
        DetectorConfig::DeepSvdd(p) => DetectorModel::DeepSvdd(DeepSvdd::fit(&xn, p)?),
        DetectorConfig::Autoencoder(p) => DetectorModel::Autoencoder(Autoencoder::fit(&xn, p)?),
        DetectorConfig::Ganomaly(p) => DetectorModel::Ganomaly(Ganomaly::fit(&xn, vn.as_deref(), p)?),
    };
    Ok(TrainedDetector {
        config: cfg.clone(),
        normalizer,
        model,
    })
}

/// Per-record scores in dataset order.
pub fn score_dataset(model: &TrainedDetector, ds: &EmbeddingDataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    model.score_rows(&ds.matrix())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
}

pub fn write_scores(ids: &[&str], scores: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: scores.len(),
        });
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (id, &score) in ids.iter().zip(scores) {
        let line = serde_json::to_string(&ScoreRecord { id: (*id).to_string(), score })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, EmbeddingRecord, EmbeddingSource, Role};
    use crate::evalkit::roc_auc;
    use crate::nnkit::TrainSpec;

    fn ds(n: usize, abnormal_every: usize) -> EmbeddingDataset {
        let recs = (0..n)
            .map(|i| EmbeddingRecord {
                id: format!("r{i}"),
                machine: "M2".into(),
                label: Some(if abnormal_every > 0 && i % abnormal_every == 0 { Label::Abnormal } else { Label::Normal }),
                e: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), (i % 7) as f64],
                source: EmbeddingSource::Spectral,
            })
            .collect();
        Dataset::new(recs, Role::Train).unwrap()
    }

    fn quick(kind: DetectorKind) -> DetectorConfig {
        let t = TrainSpec {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        match kind {
            DetectorKind::Iforest => DetectorConfig::Iforest(IForestParams {
                n_estimators: 20,
                ..Default::default()
            }),
            DetectorKind::DeepSvdd => DetectorConfig::DeepSvdd(DeepSvddParams {
                layers: vec![8, 4],
                train: t,
                ..Default::default()
            }),
            DetectorKind::Autoencoder => DetectorConfig::Autoencoder(AutoencoderParams {
                encoder: vec![8],
                latent: 2,
                train: t,
                ..Default::default()
            }),
            DetectorKind::Ganomaly => DetectorConfig::Ganomaly(GanomalyParams {
                latent: 2,
                hidden: vec![8],
                disc_hidden: vec![8],
                train: t,
                ..Default::default()
            }),
        }
    }

    #[test]
    fn abnormal_training_records_rejected() {
        for kind in DetectorKind::ALL {
            assert!(matches!(fit_detector(&quick(kind), &ds(30, 5), None), Err(Error::Data(_))));
        }
    }

    #[test]
    fn every_kind_scores_deterministically() {
        let train = ds(60, 0);
        for kind in DetectorKind::ALL {
            let cfg = quick(kind).with_seed(3);
            let a = fit_detector(&cfg, &train, Some(&train)).unwrap();
            let b = fit_detector(&cfg, &train, Some(&train)).unwrap();
            let sa = score_dataset(&a, &train).unwrap();
            assert_eq!(sa.len(), 60);
            assert_eq!(sa, score_dataset(&b, &train).unwrap());
            assert!(a.work() > 0);
            assert!(score_dataset(&a, &train.filter(|_| false)).unwrap().is_empty());
            assert!(a.score_rows(&[vec![0.0; 4]]).is_err());
        }
    }

    #[test]
    fn monotone_transform_keeps_auc() {
        let train = ds(60, 0);
        let m = fit_detector(&quick(DetectorKind::Iforest), &train, None).unwrap();
        let test = ds(40, 4);
        let s = score_dataset(&m, &test).unwrap();
        let labels: Vec<bool> = test.iter().map(|r| r.label == Some(Label::Abnormal)).collect();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 1.0).collect();
        assert_eq!(roc_auc(&s, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
    }

    #[test]
    fn scores_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.ndjson");
        let scores = [0.1, 1.0 / 3.0, 7e-300];
        write_scores(&["a", "b", "c"], &scores, &p).unwrap();
        let back = load_scores(&p).unwrap();
        assert_eq!(back.iter().map(|r| r.score).collect::<Vec<_>>(), scores);
        assert_eq!(back[1].id, "b");
    }

    #[test]
    fn kind_names_parse() {
        for k in DetectorKind::ALL {
            assert_eq!(k.name().parse::<DetectorKind>().unwrap(), k);
            assert_eq!(DetectorConfig::default_for(k).kind(), k);
        }
        assert!("svm".parse::<DetectorKind>().is_err());
    }
}
