//! Deterministic synthetic multi-machine benchmark.
//!
//! Each machine produces cycles `gain * base(t) + offset + nuisance + noise`
//! on every channel, where the nuisance is a sinusoid with a random phase
//! per record. Abnormal cycles add the machine's anomaly mechanism. A second
//! generator plants condition and machine effects directly in embedding
//! space, with the ground-truth dimensions returned alongside.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingDataset, EmbeddingRecord, EmbeddingSource, Label, Role, SignalDataset, SignalRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SpikeTrain,
    Drift,
    HarmonicShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseWaveform {
    Trapezoid,
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    /// Cycles per record.
    pub freq: f64,
    pub amp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub id: String,
    pub gain: f64,
    pub offset: f64,
    pub nuisance_harmonic: Harmonic,
    pub noise_std: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub anomaly_kind: AnomalyKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyParams {
    pub spike_count: usize,
    pub spike_amp: f64,
    /// Total rise of the drift ramp over one cycle; the ramp is centred so
    /// the cycle mean is unchanged.
    pub drift_amp: f64,
    /// The nuisance frequency is multiplied by a factor drawn uniformly
    /// from this range.
    pub harmonic_factor: (f64, f64),
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            spike_count: 24,
            spike_amp: 0.3,
            drift_amp: 0.2,
            harmonic_factor: (8.0, 9.8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub machines: Vec<MachineProfile>,
    pub c: usize,
    pub n_t: usize,
    pub base: BaseWaveform,
    /// Base waveform cycles per record.
    pub base_cycles: f64,
    /// Trapezoid ramp length as a fraction of one base period.
    pub trapezoid_rise: f64,
    pub anomaly: AnomalyParams,
    pub distinct_anomalies: bool,
    /// Per-record relative standard deviation of the gain.
    pub gain_jitter: f64,
    /// Per-record standard deviation of the offset.
    pub offset_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::benchmark(1.0, 0)
    }
}

fn machine(id: &str, gain: f64, offset: f64, nuisance: (f64, f64), n: (usize, usize), kind: AnomalyKind) -> MachineProfile {
    MachineProfile {
        id: id.into(),
        gain,
        offset,
        nuisance_harmonic: Harmonic {
            freq: nuisance.0,
            amp: nuisance.1,
        },
        noise_std: 0.02,
        n_normal: n.0,
        n_abnormal: n.1,
        anomaly_kind: kind,
    }
}

impl SynthConfig {
    /// Three machines: target `M1` (900 + 100 records) and sources `M2`,
    /// `M3` (1000 + 100 each), all multiplied by `scale`. Each machine has
    /// its own anomaly mechanism; the target's is absent from the sources.
    ///
    /// The base is an odd sine at 2.459 cycles, which has no least-squares
    /// trend but leaks gain-proportional energy across the low and middle
    /// spectrum. Drift shows in the trend and lowest bins, spikes in the
    /// clean upper band, and the target's shifted nuisance lands there too.
    pub fn benchmark(scale: f64, seed: u64) -> Self {
        let n = |v: f64| ((v * scale).round() as usize).max(1);
        SynthConfig {
            machines: vec![
                machine("M1", 2.2, 1.2, (50.5, 0.5), (n(900.0), n(100.0)), AnomalyKind::HarmonicShift),
                machine("M2", 1.0, 0.0, (40.5, 0.3), (n(1000.0), n(100.0)), AnomalyKind::SpikeTrain),
                machine("M3", 1.3, 0.4, (60.5, 0.4), (n(1000.0), n(100.0)), AnomalyKind::Drift),
            ],
            c: 2,
            n_t: 1024,
            base: BaseWaveform::Sine,
            base_cycles: 2.459,
            trapezoid_rise: 0.1,
            anomaly: AnomalyParams::default(),
            distinct_anomalies: true,
            gain_jitter: 0.15,
            offset_jitter: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.machines.is_empty() {
            return Err(Error::arg("synthetic config has no machines"));
        }
        if self.c == 0 || self.n_t < 2 {
            return Err(Error::arg(format!("need c >= 1 and n_t >= 2, got c={} n_t={}", self.c, self.n_t)));
        }
        if !(self.gain_jitter >= 0.0 && self.offset_jitter >= 0.0) {
            return Err(Error::arg("jitter must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.trapezoid_rise) {
            return Err(Error::arg("trapezoid_rise must lie in [0, 0.5]"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.machines {
            if !ids.insert(&m.id) {
                return Err(Error::arg(format!("duplicate machine id {}", m.id)));
            }
            let finite = [m.gain, m.offset, m.noise_std, m.nuisance_harmonic.freq, m.nuisance_harmonic.amp];
            if finite.iter().any(|v| !v.is_finite()) || m.noise_std < 0.0 {
                return Err(Error::arg(format!("machine {} has invalid parameters", m.id)));
            }
        }
        if self.distinct_anomalies {
            let kinds: std::collections::BTreeSet<_> = self.machines.iter().map(|m| m.anomaly_kind).collect();
            if kinds.len() != self.machines.len() {
                return Err(Error::arg("distinct_anomalies is set but machines share an anomaly kind"));
            }
        }
        let (lo, hi) = self.anomaly.harmonic_factor;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::arg("harmonic_factor range must be positive and ordered"));
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            condition_dims: Vec::new(),
            machine_dims: Vec::new(),
            anomaly_kinds: self.machines.iter().map(|m| (m.id.clone(), m.anomaly_kind)).collect(),
        }
    }
}

/// Unit-amplitude base waveform at phase `u` in cycles.
fn base_value(kind: BaseWaveform, u: f64, rise: f64) -> f64 {
    match kind {
        BaseWaveform::Sine => (2.0 * PI * u).sin(),
        BaseWaveform::Trapezoid => {
            // +1 plateau, ramp down, -1 plateau, ramp up; half-wave symmetric
            let p = u.rem_euclid(1.0);
            let h = 0.5 - rise;
            if rise == 0.0 {
                return if p < 0.5 { 1.0 } else { -1.0 };
            }
            if p < h {
                1.0
            } else if p < 0.5 {
                1.0 - 2.0 * (p - h) / rise
            } else if p < 0.5 + h {
                -1.0
            } else {
                -1.0 + 2.0 * (p - 0.5 - h) / rise
            }
        }
    }
}

/// Phase in cycles, zero at the middle of the record so a sine base is odd
/// about the midpoint. Successive channels are half a cycle apart.
fn base_phase(cfg: &SynthConfig, ch: usize, t: usize) -> f64 {
    let mid = (cfg.n_t - 1) as f64 / 2.0;
    cfg.base_cycles * (t as f64 - mid) / cfg.n_t as f64 + 0.5 * ch as f64
}

fn gen_record(cfg: &SynthConfig, m: &MachineProfile, id: String, abnormal: bool) -> SignalRecord {
    let mut r = rng::stream_for(cfg.seed, &id);
    let n = cfg.n_t as f64;
    let noise = Normal::new(0.0, m.noise_std.max(0.0)).expect("finite std");
    let gain = m.gain * (1.0 + cfg.gain_jitter * r.sample::<f64, _>(StandardNormal));
    let offset = m.offset + cfg.offset_jitter * r.sample::<f64, _>(StandardNormal);
    let mut freq = m.nuisance_harmonic.freq;
    if abnormal && m.anomaly_kind == AnomalyKind::HarmonicShift {
        let (lo, hi) = cfg.anomaly.harmonic_factor;
        freq *= if hi > lo { r.random_range(lo..hi) } else { lo };
    }
    let values = (0..cfg.c)
        .map(|ch| {
            let phase = r.random_range(0.0..2.0 * PI);
            let mut v: Vec<f64> = (0..cfg.n_t)
                .map(|t| {
                    let u = base_phase(cfg, ch, t);
                    gain * base_value(cfg.base, u, cfg.trapezoid_rise)
                        + offset
                        + m.nuisance_harmonic.amp * (2.0 * PI * freq * t as f64 / n + phase).sin()
                        + noise.sample(&mut r)
                })
                .collect();
            if abnormal {
                match m.anomaly_kind {
                    AnomalyKind::SpikeTrain => {
                        for _ in 0..cfg.anomaly.spike_count {
                            let t = r.random_range(0..cfg.n_t);
                            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
                            v[t] += sign * cfg.anomaly.spike_amp;
                        }
                    }
                    AnomalyKind::Drift => {
                        let denom = (cfg.n_t - 1) as f64;
                        v.iter_mut()
                            .enumerate()
                            .for_each(|(t, x)| *x += cfg.anomaly.drift_amp * (t as f64 / denom - 0.5));
                    }
                    AnomalyKind::HarmonicShift => {}
                }
            }
            v
        })
        .collect();
    SignalRecord {
        id,
        machine: m.id.clone(),
        label: Some(if abnormal { Label::Abnormal } else { Label::Normal }),
        values,
    }
}

/// One dataset per machine in config order: normals first, then abnormals.
pub fn gen_signals(cfg: &SynthConfig) -> Result<Vec<SignalDataset>> {
    cfg.validate()?;
    cfg.machines
        .iter()
        .map(|m| {
            let specs: Vec<(String, bool)> = (0..m.n_normal)
                .map(|i| (format!("{}-n{i:05}", m.id), false))
                .chain((0..m.n_abnormal).map(|i| (format!("{}-a{i:05}", m.id), true)))
                .collect();
            let records = specs.into_par_iter().map(|(id, ab)| gen_record(cfg, m, id, ab)).collect();
            Dataset::new(records, Role::Train)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub condition_dims: Vec<usize>,
    pub machine_dims: Vec<usize>,
    pub anomaly_kinds: BTreeMap<String, AnomalyKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedEmbeddingConfig {
    pub d: usize,
    pub condition_dims: Vec<usize>,
    pub machine_dims: Vec<usize>,
    /// Shift added to condition dims of abnormal records.
    pub condition_effect: f64,
    /// Per-machine shift of the machine dims, one entry per machine.
    pub machine_means: Vec<f64>,
    pub n_records: usize,
    pub abnormal_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedEmbeddingConfig {
    fn default() -> Self {
        PlantedEmbeddingConfig {
            d: 1024,
            condition_dims: (0..12).map(|i| 40 + 80 * i).collect(),
            machine_dims: (0..12).map(|i| 80 + 80 * i).collect(),
            condition_effect: 3.0,
            machine_means: vec![0.0, 3.0, 6.0],
            n_records: 2000,
            abnormal_fraction: 0.5,
            seed: 0,
        }
    }
}

impl PlantedEmbeddingConfig {
    /// Identical condition and machine dims, for gate-failure tests.
    pub fn confounded(seed: u64) -> Self {
        let base = PlantedEmbeddingConfig::default();
        PlantedEmbeddingConfig {
            machine_dims: base.condition_dims.clone(),
            seed,
            ..base
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_records == 0 || self.machine_means.is_empty() {
            return Err(Error::arg("planted embeddings need d, n_records and machines"));
        }
        if let Some(bad) = self.condition_dims.iter().chain(&self.machine_dims).find(|&&i| i >= self.d) {
            return Err(Error::arg(format!("planted dim {bad} outside [0, {})", self.d)));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::arg("abnormal_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn machine_name(i: usize) -> String {
    format!("M{}", i + 1)
}

/// Background dims are i.i.d. standard normal; condition dims shift by the
/// effect for abnormal records; machine dims shift by the machine's mean.
/// Records cycle through machines; labels are assigned so that exactly
/// `round(abnormal_fraction * n)` records are abnormal, spread evenly.
pub fn gen_planted_embeddings(cfg: &PlantedEmbeddingConfig) -> Result<(EmbeddingDataset, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_records;
    let k = cfg.machine_means.len();
    let n_ab = (cfg.abnormal_fraction * n as f64).round() as usize;
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, i as u64);
            let m = i % k;
            // within each machine, every other record is abnormal until n_ab is used
            let abnormal = (i * n_ab) / n != ((i + 1) * n_ab) / n;
            let mut e: Vec<f64> = (0..cfg.d).map(|_| StandardNormal.sample(&mut r)).collect();
            if abnormal {
                cfg.condition_dims.iter().for_each(|&j| e[j] += cfg.condition_effect);
            }
            cfg.machine_dims.iter().for_each(|&j| e[j] += cfg.machine_means[m]);
            EmbeddingRecord {
                id: format!("p{i:06}"),
                machine: machine_name(m),
                label: Some(if abnormal { Label::Abnormal } else { Label::Normal }),
                e,
                source: EmbeddingSource::External,
            }
        })
        .collect();
    let truth = GroundTruth {
        condition_dims: cfg.condition_dims.clone(),
        machine_dims: cfg.machine_dims.clone(),
        anomaly_kinds: BTreeMap::new(),
    };
    Ok((Dataset::new(records, Role::Train)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn single(m: MachineProfile) -> SynthConfig {
        SynthConfig {
            machines: vec![m],
            distinct_anomalies: false,
            gain_jitter: 0.0,
            offset_jitter: 0.0,
            ..SynthConfig::benchmark(0.01, 3)
        }
    }

    #[test]
    fn clean_machine_reproduces_base() {
        let mut m = machine("M1", 1.0, 0.0, (3.0, 0.0), (2, 0), AnomalyKind::Drift);
        m.noise_std = 0.0;
        for base in [BaseWaveform::Sine, BaseWaveform::Trapezoid] {
            let cfg = SynthConfig {
                base,
                c: 1,
                ..single(m.clone())
            };
            let ds = &gen_signals(&cfg).unwrap()[0];
            for r in ds.iter() {
                for (t, v) in r.values[0].iter().enumerate() {
                    let u = base_phase(&cfg, 0, t);
                    assert_eq!(*v, base_value(base, u, cfg.trapezoid_rise));
                }
            }
        }
    }

    #[test]
    fn benchmark_base_has_no_trend() {
        let mut cfg = SynthConfig::benchmark(0.001, 0);
        cfg.gain_jitter = 0.0;
        for m in &mut cfg.machines {
            m.noise_std = 0.0;
            m.nuisance_harmonic.amp = 0.0;
        }
        let ds = gen_signals(&cfg).unwrap();
        let r = &ds[1].records()[0];
        let e = crate::embed::featurize_spectral(r, 1024).unwrap();
        // slope entries of both channel blocks
        assert!(e.e[6].abs() < 1e-5 && e.e[518].abs() < 1e-5, "{} {}", e.e[6], e.e[518]);
        // leakage keeps the upper-middle spectrum gain dependent
        assert!(e.e[8 + 200] > 1e-4);
    }

    #[test]
    fn trapezoid_shape() {
        assert_eq!(base_value(BaseWaveform::Trapezoid, 0.1, 0.1), 1.0);
        assert_eq!(base_value(BaseWaveform::Trapezoid, 0.5, 0.1), -1.0);
        assert!((base_value(BaseWaveform::Trapezoid, 0.45, 0.1) - 0.0).abs() < 1e-12);
        assert!((base_value(BaseWaveform::Trapezoid, 0.95, 0.1) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn offset_difference_shows_in_means() {
        let a = machine("A", 1.0, 0.0, (3.0, 0.3), (300, 0), AnomalyKind::Drift);
        let b = MachineProfile {
            id: "B".into(),
            offset: 0.7,
            ..a.clone()
        };
        let cfg = SynthConfig {
            machines: vec![a, b],
            distinct_anomalies: false,
            offset_jitter: 0.0,
            ..SynthConfig::benchmark(1.0, 1)
        };
        let ds = gen_signals(&cfg).unwrap();
        let mean = |d: &SignalDataset| d.iter().flat_map(|r| r.flatten()).sum::<f64>() / (d.len() * 2 * 1024) as f64;
        assert!((mean(&ds[1]) - mean(&ds[0]) - 0.7).abs() < 0.01);
    }

    #[test]
    fn benchmark_counts_and_determinism() {
        let cfg = SynthConfig::benchmark(1.0, 9);
        let ds = gen_signals(&cfg).unwrap();
        let sizes: Vec<(usize, usize)> = ds
            .iter()
            .map(|d| {
                let ab = d.iter().filter(|r| r.label == Some(Label::Abnormal)).count();
                (d.len() - ab, ab)
            })
            .collect();
        assert_eq!(sizes, vec![(900, 100), (1000, 100), (1000, 100)]);
        assert_eq!(ds[0].shape(), Some((2, 1024)));
        let small = SynthConfig::benchmark(0.02, 9);
        assert_eq!(gen_signals(&small).unwrap(), gen_signals(&small).unwrap());
        let kinds = cfg.ground_truth().anomaly_kinds;
        assert_ne!(kinds["M1"], kinds["M2"]);
        assert_ne!(kinds["M1"], kinds["M3"]);
    }

    #[test]
    fn distinct_flag_is_enforced() {
        let mut cfg = SynthConfig::benchmark(0.01, 0);
        cfg.machines[0].anomaly_kind = AnomalyKind::SpikeTrain;
        assert!(gen_signals(&cfg).is_err());
        cfg.distinct_anomalies = false;
        assert!(gen_signals(&cfg).is_ok());
    }

    #[test]
    fn planted_embedding_layout() {
        let (ds, truth) = gen_planted_embeddings(&PlantedEmbeddingConfig::default()).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.dim(), Some(1024));
        assert_eq!(ds.iter().filter(|r| r.label == Some(Label::Abnormal)).count(), 1000);
        assert_eq!(truth.condition_dims.len(), 12);
        assert!(truth.condition_dims.iter().all(|d| !truth.machine_dims.contains(d)));
        let mut machines: Vec<&str> = ds.iter().map(|r| r.machine()).collect();
        machines.sort();
        machines.dedup();
        assert_eq!(machines, ["M1", "M2", "M3"]);
        // each machine gets both labels
        for m in ["M1", "M2", "M3"] {
            let ab = ds.iter().filter(|r| r.machine == m && r.label == Some(Label::Abnormal)).count();
            assert!(ab > 300 && ab < 370, "{m}: {ab}");
        }
        let bad = PlantedEmbeddingConfig {
            condition_dims: vec![2000],
            ..Default::default()
        };
        assert!(gen_planted_embeddings(&bad).is_err());
    }
}
