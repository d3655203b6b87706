//! Embedding acquisition and feature scaling.
//!
//! Foundation-model embeddings arrive as files (see [`crate::data`]). For
//! desk-scale work without the external model, [`SpectralFeaturizer`] maps a
//! signal record to a fixed-length vector of per-channel summary statistics
//! and FFT magnitudes.

use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingDataset, EmbeddingRecord, EmbeddingSource, SignalDataset, SignalRecord};
use crate::error::{check_dim, Error, Result};

/// Number of summary statistics per channel.
pub const STATS_PER_CHANNEL: usize = 8;

/// Spectral/statistical featurizer producing vectors of length `d`.
///
/// Per channel the block is `[mean, std, min, max, rms, skewness, slope,
/// lag-1 autocorrelation]` followed by the magnitudes `|X_k| / n_t` of the
/// first `d / c - 8` real-FFT bins (zero beyond the Nyquist bin). Channel
/// blocks are concatenated and the tail is zero-padded to `d`.
pub struct SpectralFeaturizer {
    d: usize,
    plans: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl SpectralFeaturizer {
    pub fn new(d: usize) -> Self {
        SpectralFeaturizer { d, plans: HashMap::new() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn plan(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        self.plans
            .entry(n)
            .or_insert_with(|| FftPlanner::new().plan_fft_forward(n))
            .clone()
    }

    pub fn featurize(&mut self, x: &SignalRecord) -> Result<EmbeddingRecord> {
        let c = x.channels();
        let n_t = x.steps();
        if c == 0 || self.d < STATS_PER_CHANNEL * c {
            return Err(Error::arg(format!(
                "embedding length {} too small for {c} channels (need >= {})",
                self.d,
                STATS_PER_CHANNEL * c
            )));
        }
        if n_t < 8 {
            return Err(Error::arg(format!("spectral features need >= 8 time steps, got {n_t}")));
        }
        let bins = self.d / c - STATS_PER_CHANNEL;
        let fft = self.plan(n_t);
        let mut e = Vec::with_capacity(self.d);
        let mut buf: Vec<Complex<f64>> = Vec::with_capacity(n_t);
        for ch in &x.values {
            e.extend_from_slice(&channel_stats(ch));
            buf.clear();
            buf.extend(ch.iter().map(|&v| Complex::new(v, 0.0)));
            fft.process(&mut buf);
            let nyquist = n_t / 2 + 1;
            for k in 0..bins {
                e.push(if k < nyquist { buf[k].norm() / n_t as f64 } else { 0.0 });
            }
        }
        e.resize(self.d, 0.0);
        Ok(EmbeddingRecord {
            id: x.id.clone(),
            machine: x.machine.clone(),
            label: x.label,
            e,
            source: EmbeddingSource::Spectral,
        })
    }

    pub fn featurize_dataset(&mut self, ds: &SignalDataset) -> Result<EmbeddingDataset> {
        let records = ds.iter().map(|r| self.featurize(r)).collect::<Result<Vec<_>>>()?;
        Dataset::new(records, ds.role())
    }
}

/// One-shot convenience wrapper around [`SpectralFeaturizer`].
pub fn featurize_spectral(x: &SignalRecord, d: usize) -> Result<EmbeddingRecord> {
    SpectralFeaturizer::new(d).featurize(x)
}

/// Flattened raw samples (channel-major), for the raw-signal regime.
pub fn flatten_record(x: &SignalRecord) -> EmbeddingRecord {
    EmbeddingRecord {
        id: x.id.clone(),
        machine: x.machine.clone(),
        label: x.label,
        e: x.flatten(),
        source: EmbeddingSource::Raw,
    }
}

pub fn flatten_dataset(ds: &SignalDataset) -> Result<EmbeddingDataset> {
    Dataset::new(ds.iter().map(flatten_record).collect(), ds.role())
}

fn channel_stats(x: &[f64]) -> [f64; STATS_PER_CHANNEL] {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let skew = if std > 0.0 {
        x.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n
    } else {
        0.0
    };
    // least-squares slope against the step index
    let t_mean = (n - 1.0) / 2.0;
    let sxx: f64 = (0..x.len()).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let sxy: f64 = x.iter().enumerate().map(|(t, v)| (t as f64 - t_mean) * (v - mean)).sum();
    let slope = sxy / sxx;
    let ac1 = if var > 0.0 {
        x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (var * n)
    } else {
        0.0
    };
    [mean, std, min, max, rms, skew, slope, ac1]
}

/// Per-dimension standardization fitted on training normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

pub const NORMALIZER_EPSILON: f64 = 1e-8;

/// Order-independent sum: values are sorted before accumulation so the
/// result does not depend on dataset order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::arg("cannot fit a normalizer on no data"))?;
        let d = first.len();
        for r in rows {
            check_dim(d, r.len())?;
        }
        let n = rows.len() as f64;
        let mut col = vec![0.0; rows.len()];
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for j in 0..d {
            col.iter_mut().zip(rows).for_each(|(c, r)| *c = r[j]);
            let m = sorted_sum(&mut col) / n;
            col.iter_mut().zip(rows).for_each(|(c, r)| *c = (r[j] - m).powi(2));
            let v = sorted_sum(&mut col) / n;
            mean.push(m);
            std.push(v.sqrt());
        }
        Ok(Normalizer {
            mean,
            std,
            epsilon: NORMALIZER_EPSILON,
        })
    }

    pub fn fit_dataset(train: &EmbeddingDataset) -> Result<Self> {
        Normalizer::fit(&train.matrix())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, e: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), e.len())?;
        Ok(e.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / (s + self.epsilon))
            .collect())
    }

    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn normalize(&self, e: &EmbeddingRecord) -> Result<EmbeddingRecord> {
        Ok(EmbeddingRecord {
            e: self.apply(&e.e)?,
            ..e.clone()
        })
    }

    pub fn normalize_dataset(&self, ds: &EmbeddingDataset) -> Result<EmbeddingDataset> {
        ds.map_vectors(|r| self.apply(&r.e))
    }
}

/// Fits a normalizer on `train`.
pub fn fit_normalizer(train: &EmbeddingDataset) -> Result<Normalizer> {
    Normalizer::fit_dataset(train)
}

pub fn normalize(e: &EmbeddingRecord, n: &Normalizer) -> Result<EmbeddingRecord> {
    n.normalize(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use crate::rng;
    use rand::Rng;
    use std::f64::consts::PI;

    fn record(values: Vec<Vec<f64>>) -> SignalRecord {
        SignalRecord {
            id: "r".into(),
            machine: "M2".into(),
            label: None,
            values,
        }
    }

    #[test]
    fn zero_signal_gives_zero_vector() {
        let e = featurize_spectral(&record(vec![vec![0.0; 64]; 2]), 128).unwrap();
        assert_eq!(e.e, vec![0.0; 128]);
    }

    #[test]
    fn output_length_is_exact() {
        let x = record(vec![(0..256).map(|t| (t as f64 * 0.1).sin()).collect(); 2]);
        assert_eq!(featurize_spectral(&x, 1024).unwrap().e.len(), 1024);
        // 3 channels do not divide 1024: blocks of 341, padded with one zero
        let y = record(vec![(0..64).map(f64::from).collect(); 3]);
        let e = featurize_spectral(&y, 1024).unwrap().e;
        assert_eq!(e.len(), 1024);
        assert_eq!(e[1023], 0.0);
    }

    #[test]
    fn sinusoid_bin_dominates_spectrum() {
        let n_t = 128;
        let k = 9;
        let x = record(vec![(0..n_t)
            .map(|t| 0.7 * (2.0 * PI * k as f64 * t as f64 / n_t as f64).sin() + 0.2)
            .collect()]);
        let e = featurize_spectral(&x, 8 + 60).unwrap().e;
        let spectral = &e[STATS_PER_CHANNEL..];
        // oracle: direct DFT magnitude at every bin
        for (bin, &got) in spectral.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.values[0].iter().enumerate() {
                let a = -2.0 * PI * (bin * t) as f64 / n_t as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            assert!((got - (re * re + im * im).sqrt() / n_t as f64).abs() < 1e-9);
        }
        let argmax = (1..spectral.len()).max_by(|&a, &b| spectral[a].total_cmp(&spectral[b])).unwrap();
        assert_eq!(argmax, k);
    }

    #[test]
    fn stats_block_values() {
        let x = record(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]);
        let e = featurize_spectral(&x, 16).unwrap().e;
        assert_eq!(e[0], 4.5);
        assert!((e[1] - 5.25f64.sqrt()).abs() < 1e-12);
        assert_eq!((e[2], e[3]), (1.0, 8.0));
        assert!((e[4] - (204.0f64 / 8.0).sqrt()).abs() < 1e-12);
        assert!(e[5].abs() < 1e-12);
        assert!((e[6] - 1.0).abs() < 1e-12);
        assert!(e[7] > 0.5);
    }

    #[test]
    fn rejects_undersized_embedding() {
        let x = record(vec![vec![0.0; 16]; 4]);
        assert!(matches!(featurize_spectral(&x, 31), Err(Error::Argument(_))));
        let short = record(vec![vec![0.0; 4]]);
        assert!(featurize_spectral(&short, 64).is_err());
    }

    #[test]
    fn featurizer_is_pure() {
        let mut r = rng::stream(1, 1);
        let x = record((0..2).map(|_| (0..100).map(|_| r.random::<f64>()).collect()).collect());
        let a = featurize_spectral(&x, 256).unwrap();
        let b = SpectralFeaturizer::new(256).featurize(&x).unwrap();
        assert_eq!(a.e.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.e.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn normalizer_hand_values() {
        let n = Normalizer::fit(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(n.mean, vec![1.0, 1.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_record_has_zero_std_and_finite_output() {
        let n = Normalizer::fit(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(n.std, vec![0.0, 0.0]);
        assert_eq!(n.apply(&[3.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        assert!(n.apply(&[1e6, -1e6]).unwrap().iter().all(|v| v.is_finite()));
        assert!(Normalizer::fit(&[]).is_err());
        assert!(matches!(n.apply(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn normalized_training_set_is_standardized() {
        let mut r = rng::stream(2, 0);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![r.random::<f64>() * 5.0 - 1.0, 7.0, r.random::<f64>() * 1e-3])
            .collect();
        let n = Normalizer::fit(&rows).unwrap();
        let z = n.apply_rows(&rows).unwrap();
        let refit = Normalizer::fit(&z).unwrap();
        for j in 0..3 {
            assert!(refit.mean[j].abs() < 1e-9, "mean {}", refit.mean[j]);
        }
        assert!((refit.std[0] - 1.0).abs() < 1e-6);
        assert!((refit.std[2] - 1.0).abs() < 1e-4);
        assert_eq!(refit.std[1], 0.0);
    }

    #[test]
    fn normalizer_ignores_record_order() {
        let mut r = rng::stream(3, 0);
        let rows: Vec<Vec<f64>> = (0..97).map(|_| (0..4).map(|_| r.random::<f64>() * 1e3).collect()).collect();
        let mut rev = rows.clone();
        rev.reverse();
        rev.rotate_left(13);
        assert_eq!(Normalizer::fit(&rows).unwrap(), Normalizer::fit(&rev).unwrap());
    }

    #[test]
    fn dataset_helpers_keep_order() {
        let ds = Dataset::new(
            vec![record(vec![vec![1.0; 16]]), {
                let mut r = record(vec![vec![2.0; 16]]);
                r.id = "s".into();
                r
            }],
            Role::Test,
        )
        .unwrap();
        let emb = SpectralFeaturizer::new(32).featurize_dataset(&ds).unwrap();
        assert_eq!(emb.ids(), vec!["r", "s"]);
        assert_eq!(emb.role(), Role::Test);
        let flat = flatten_dataset(&ds).unwrap();
        assert_eq!(flat.dim(), Some(16));
    }
}
