//! Dual-forest disentangling of embedding dimensions.
//!
//! One forest learns the machine condition (normal vs. abnormal), another
//! learns which source machine produced an embedding. The top `n_i`
//! dimensions by importance of each form `F_cd` and `F_ma`. When the two
//! sets barely overlap (ratio below the gate threshold), `F_cd` is accepted
//! as the domain-invariant mask. A failed gate is a reportable outcome, not
//! an error: downstream stages refuse masks from failed reports.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, EmbeddingDataset, FeatureMask, Label, Record};
use crate::error::{Error, Result};
use crate::forest::{evaluate_f1, fit_forest, F1Task, ForestParams};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.10;
pub const DEFAULT_NI_GRID: [usize; 6] = [25, 50, 75, 100, 150, 200];

/// Indices of the `n` largest importances (ties to the lower index),
/// returned ascending.
pub fn top_n(importances: &[f64], n: usize) -> Result<FeatureMask> {
    let d = importances.len();
    if n == 0 || n > d {
        return Err(Error::arg(format!("top_n needs 1 <= n <= {d}, got {n}")));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    FeatureMask::from_unsorted(d, idx[..n].to_vec())
}

/// `|a ∩ b| / n_i` for two masks of equal size `n_i`.
pub fn overlap_ratio(a: &FeatureMask, b: &FeatureMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "overlap needs equal-size sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.intersection(b).len() as f64 / a.len() as f64)
}

/// Overlap ratio at every grid point. The curve need not be monotone in
/// `n`, so every point is evaluated.
pub fn overlap_curve(imp_cd: &[f64], imp_ma: &[f64], grid: &[usize]) -> Result<Vec<(usize, f64)>> {
    if imp_cd.len() != imp_ma.len() {
        return Err(Error::DimensionMismatch {
            expected: imp_cd.len(),
            got: imp_ma.len(),
        });
    }
    if grid.is_empty() {
        return Err(Error::arg("n_i grid is empty"));
    }
    grid.iter()
        .map(|&n| Ok((n, overlap_ratio(&top_n(imp_cd, n)?, &top_n(imp_ma, n)?)?)))
        .collect()
}

/// Largest grid size whose overlap ratio stays strictly below `threshold`.
pub fn select_ni(imp_cd: &[f64], imp_ma: &[f64], threshold: f64, grid: &[usize]) -> Result<usize> {
    let curve = overlap_curve(imp_cd, imp_ma, grid)?;
    curve
        .iter()
        .filter(|(_, r)| *r < threshold)
        .map(|(n, _)| *n)
        .max()
        .ok_or(Error::GateFailure { curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NiChoice {
    Auto { grid: Vec<usize> },
    Fixed(usize),
}

impl Default for NiChoice {
    fn default() -> Self {
        NiChoice::Auto {
            grid: DEFAULT_NI_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisentangleConfig {
    /// Forest settings shared by both tasks; `seed` is replaced per refit.
    pub forest: ForestParams,
    /// One refit of each forest per seed; importances are averaged.
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub ni: NiChoice,
    pub train_fraction: f64,
    /// Seed for the balanced sample and the stratified split.
    pub sample_seed: u64,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        DisentangleConfig {
            forest: ForestParams::default(),
            seeds: (0..10).collect(),
            threshold: DEFAULT_THRESHOLD,
            ni: NiChoice::default(),
            train_fraction: 0.8,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub n_i: usize,
    pub f_cd: FeatureMask,
    pub f_ma: FeatureMask,
    pub overlap: Vec<usize>,
    pub overlap_ratio: f64,
    pub threshold: f64,
    pub passed: bool,
    pub rfc_condition_f1: f64,
    pub rfc_machine_f1: f64,
    pub seeds: Vec<u64>,
    pub machines: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    /// `(n_i, overlap_ratio)` for every evaluated size.
    pub ratio_curve: Vec<(usize, f64)>,
    pub importance_condition: Vec<f64>,
    pub importance_machine: Vec<f64>,
}

impl DisentangleReport {
    /// The domain-invariant mask, available only when the gate passed.
    pub fn mask(&self) -> Option<&FeatureMask> {
        self.passed.then_some(&self.f_cd)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// All records of the minority condition plus an equally sized random
/// draw from the majority, in original order.
pub fn balanced_sample(source: &EmbeddingDataset, seed: u64) -> Result<EmbeddingDataset> {
    let mut normal: Vec<usize> = Vec::new();
    let mut abnormal: Vec<usize> = Vec::new();
    for (i, r) in source.iter().enumerate() {
        match r.label {
            Some(Label::Normal) => normal.push(i),
            Some(Label::Abnormal) => abnormal.push(i),
            None => return Err(Error::data(format!("record {} has no condition label", r.id))),
        }
    }
    let k = normal.len().min(abnormal.len());
    if k == 0 {
        return Err(Error::data("disentangling needs both normal and abnormal records"));
    }
    let mut r = rng::stream(seed, 0xBA1A);
    normal.shuffle(&mut r);
    abnormal.shuffle(&mut r);
    let mut keep: Vec<usize> = normal[..k].iter().chain(&abnormal[..k]).copied().collect();
    keep.sort_unstable();
    let records = keep.into_iter().map(|i| source.records()[i].clone()).collect();
    Dataset::new(records, source.role())
}

struct Task {
    x_train: Vec<Vec<f64>>,
    y_train: Vec<usize>,
    x_test: Vec<Vec<f64>>,
    y_test: Vec<usize>,
    f1: F1Task,
}

fn condition_class(r: &impl Record) -> usize {
    usize::from(r.label().is_some_and(Label::is_abnormal))
}

fn fit_task(task: &Task, cfg: &DisentangleConfig) -> Result<(Vec<f64>, f64)> {
    let d = task.x_train[0].len();
    let mut importance = vec![0.0; d];
    let mut f1 = 0.0;
    for &seed in &cfg.seeds {
        let params = ForestParams {
            seed,
            ..cfg.forest.clone()
        };
        let model = fit_forest(&task.x_train, &task.y_train, &params)?;
        importance.iter_mut().zip(&model.importances).for_each(|(a, v)| *a += v);
        f1 += evaluate_f1(&model, &task.x_test, &task.y_test, task.f1)?;
    }
    let n = cfg.seeds.len() as f64;
    importance.iter_mut().for_each(|v| *v /= n);
    Ok((importance, f1 / n))
}

/// Trains both forests on a balanced split of the source embeddings and
/// applies the overlap gate.
pub fn run_disentangler(source: &EmbeddingDataset, cfg: &DisentangleConfig) -> Result<DisentangleReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::arg("disentangler needs at least one forest seed"));
    }
    let machines: Vec<String> = source
        .domain_set()
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if machines.len() < 2 {
        return Err(Error::data(format!(
            "machine-identity task needs >= 2 source machines, got {machines:?}"
        )));
    }
    let d = source.dim().ok_or_else(|| Error::arg("empty source dataset"))?;
    let machine_class: BTreeMap<&str, usize> = machines.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();

    let balanced = balanced_sample(source, cfg.sample_seed)?;
    let (train, test) = split(&balanced, cfg.train_fraction, true, cfg.sample_seed)?;
    if test.is_empty() {
        return Err(Error::data("balanced test split is empty"));
    }
    info!(
        "disentangle: {} balanced records -> {} train / {} test, {} machines",
        balanced.len(),
        train.len(),
        test.len(),
        machines.len()
    );

    let rows = |ds: &EmbeddingDataset| ds.matrix();
    let machine_of = |ds: &EmbeddingDataset| -> Vec<usize> { ds.iter().map(|r| machine_class[r.machine.as_str()]).collect() };
    let condition = Task {
        x_train: rows(&train),
        y_train: train.iter().map(condition_class).collect(),
        x_test: rows(&test),
        y_test: test.iter().map(condition_class).collect(),
        f1: F1Task::Binary { positive: 1 },
    };
    let machine = Task {
        x_train: condition.x_train.clone(),
        y_train: machine_of(&train),
        x_test: condition.x_test.clone(),
        y_test: machine_of(&test),
        f1: F1Task::MacroOvr {
            n_classes: machines.len(),
        },
    };

    let (cd, ma) = rayon::join(|| fit_task(&condition, cfg), || fit_task(&machine, cfg));
    let ((imp_cd, f1_cd), (imp_ma, f1_ma)) = (cd?, ma?);

    let grid: Vec<usize> = match &cfg.ni {
        NiChoice::Auto { grid } => grid.clone(),
        NiChoice::Fixed(n) => vec![*n],
    };
    if grid.iter().any(|&n| n == 0 || n > d) {
        return Err(Error::arg(format!("n_i grid {grid:?} must lie in [1, {d}]")));
    }
    let curve = overlap_curve(&imp_cd, &imp_ma, &grid)?;
    let n_i = match select_ni(&imp_cd, &imp_ma, cfg.threshold, &grid) {
        Ok(n) => n,
        // report the least-confounded size; ties go to the larger set
        Err(Error::GateFailure { curve }) => curve
            .iter()
            .fold(curve[0], |best, &p| if p.1 < best.1 || (p.1 == best.1 && p.0 > best.0) { p } else { best })
            .0,
        Err(e) => return Err(e),
    };

    let f_cd = top_n(&imp_cd, n_i)?;
    let f_ma = top_n(&imp_ma, n_i)?;
    let overlap = f_cd.intersection(&f_ma);
    let overlap_ratio = overlap.len() as f64 / n_i as f64;
    let passed = overlap_ratio < cfg.threshold;
    info!("disentangle: n_i={n_i} overlap={}/{n_i} passed={passed}", overlap.len());

    Ok(DisentangleReport {
        n_i,
        f_cd,
        f_ma,
        overlap,
        overlap_ratio,
        threshold: cfg.threshold,
        passed,
        rfc_condition_f1: f1_cd,
        rfc_machine_f1: f1_ma,
        seeds: cfg.seeds.clone(),
        machines,
        train_size: train.len(),
        test_size: test.len(),
        ratio_curve: curve,
        importance_condition: imp_cd,
        importance_machine: imp_ma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmbeddingRecord, EmbeddingSource, Role};
    use std::collections::HashSet;

    /// Independent top-n: rank every index by counting how many others beat it.
    fn oracle_top(imp: &[f64], n: usize) -> HashSet<usize> {
        (0..imp.len())
            .filter(|&i| {
                let better = (0..imp.len())
                    .filter(|&j| imp[j] > imp[i] || (imp[j] == imp[i] && j < i))
                    .count();
                better < n
            })
            .collect()
    }

    fn oracle_ratio(a: &[f64], b: &[f64], n: usize) -> f64 {
        oracle_top(a, n).intersection(&oracle_top(b, n)).count() as f64 / n as f64
    }

    #[test]
    fn top_n_examples() {
        assert_eq!(top_n(&[0.1, 0.5, 0.4], 2).unwrap().indices(), &[1, 2]);
        assert_eq!(top_n(&[0.1, 0.5, 0.4], 3).unwrap().indices(), &[0, 1, 2]);
        assert_eq!(top_n(&[0.2; 6], 3).unwrap().indices(), &[0, 1, 2]);
        assert!(top_n(&[0.2; 3], 0).is_err());
        assert!(top_n(&[0.2; 3], 4).is_err());
    }

    #[test]
    fn overlap_examples() {
        let m = |v: Vec<usize>| FeatureMask::new(1024, v).unwrap();
        let a = m((0..100).collect());
        let b = m((91..191).collect());
        assert_eq!(overlap_ratio(&a, &b).unwrap(), 0.09);
        assert!(overlap_ratio(&a, &b).unwrap() < DEFAULT_THRESHOLD);
        assert_eq!(overlap_ratio(&a, &m((200..300).collect())).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&a, &b).unwrap(), overlap_ratio(&b, &a).unwrap());
        assert!(overlap_ratio(&a, &m(vec![1])).is_err());
    }

    fn planted_pair() -> (Vec<f64>, Vec<f64>) {
        let d = 200;
        let mut cd = vec![0.0; d];
        let mut ma = vec![0.0; d];
        for i in 0..10 {
            cd[i] = 1.0 - i as f64 * 0.01;
            ma[100 + i] = 1.0 - i as f64 * 0.01;
        }
        // colliding tails
        for i in 150..160 {
            cd[i] = 0.5 - (i - 150) as f64 * 0.001;
            ma[i] = 0.5 - (i - 150) as f64 * 0.002;
        }
        for (i, v) in cd.iter_mut().enumerate().skip(160) {
            *v = 1e-4 / i as f64;
        }
        (cd, ma)
    }

    #[test]
    fn select_ni_on_planted_pair_matches_exhaustive_check() {
        let (cd, ma) = planted_pair();
        let grid = [5, 10, 20];
        let expected = grid
            .iter()
            .copied()
            .filter(|&n| oracle_ratio(&cd, &ma, n) < 0.10)
            .max()
            .unwrap();
        assert_eq!(expected, 10);
        assert_eq!(select_ni(&cd, &ma, 0.10, &grid).unwrap(), expected);
        for (n, r) in overlap_curve(&cd, &ma, &grid).unwrap() {
            assert_eq!(r, oracle_ratio(&cd, &ma, n));
        }
    }

    #[test]
    fn identical_importances_fail_the_gate() {
        let (cd, _) = planted_pair();
        match select_ni(&cd, &cd, 0.10, &[5, 10, 20]) {
            Err(Error::GateFailure { curve }) => {
                assert_eq!(curve.len(), 3);
                assert!(curve.iter().all(|(_, r)| *r == 1.0));
            }
            other => panic!("expected gate failure, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_curve_is_fully_scanned() {
        // one shared dimension ranked 10th in both lists
        let d = 100;
        let mut cd = vec![0.0; d];
        let mut ma = vec![0.0; d];
        for i in 0..9 {
            cd[i] = 1.0 - 0.01 * i as f64;
            ma[20 + i] = 1.0 - 0.01 * i as f64;
        }
        cd[50] = 0.5;
        ma[50] = 0.5;
        for i in 0..10 {
            cd[60 + i] = 0.1 - 0.001 * i as f64;
            ma[80 + i] = 0.1 - 0.001 * i as f64;
        }
        let curve = overlap_curve(&cd, &ma, &[5, 10, 20]).unwrap();
        assert_eq!(curve, vec![(5, 0.0), (10, 0.1), (20, 0.05)]);
        assert_eq!(select_ni(&cd, &ma, 0.10, &[5, 10, 20]).unwrap(), 20);
    }

    fn rec(id: usize, machine: &str, label: Label, e: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            id: format!("r{id}"),
            machine: machine.into(),
            label: Some(label),
            e,
            source: EmbeddingSource::External,
        }
    }

    #[test]
    fn single_machine_input_is_rejected() {
        let recs = (0..20)
            .map(|i| rec(i, "M2", if i % 2 == 0 { Label::Normal } else { Label::Abnormal }, vec![i as f64, 0.0]))
            .collect();
        let ds = Dataset::new(recs, Role::Train).unwrap();
        assert!(matches!(run_disentangler(&ds, &DisentangleConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn balanced_construction_sizes() {
        // 2,000 abnormal and 8,000 normal records -> 2,000 + 2,000 -> 3,200 / 800
        let recs: Vec<EmbeddingRecord> = (0..10_000)
            .map(|i| rec(i, if i % 2 == 0 { "M2" } else { "M3" }, if i < 2000 { Label::Abnormal } else { Label::Normal }, vec![0.0]))
            .collect();
        let ds = Dataset::new(recs, Role::Train).unwrap();
        let bal = balanced_sample(&ds, 4).unwrap();
        assert_eq!(bal.len(), 4000);
        let (tr, te) = split(&bal, 0.8, true, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (3200, 800));
    }

    #[test]
    fn small_end_to_end_run() {
        // dim 0 carries the condition, dim 1 the machine, dims 2.. noise
        let mut r = rng::stream(5, 5);
        use rand::Rng;
        let recs: Vec<EmbeddingRecord> = (0..240)
            .map(|i| {
                let m = i % 3;
                let ab = i % 4 == 0;
                let mut e: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
                e[0] += if ab { 3.0 } else { 0.0 };
                e[1] += 3.0 * m as f64;
                rec(i, ["M1", "M2", "M3"][m], if ab { Label::Abnormal } else { Label::Normal }, e)
            })
            .collect();
        let ds = Dataset::new(recs, Role::Train).unwrap();
        let cfg = DisentangleConfig {
            forest: ForestParams { n_trees: 30, ..Default::default() },
            seeds: vec![1, 2],
            ni: NiChoice::Fixed(1),
            ..Default::default()
        };
        let rep = run_disentangler(&ds, &cfg).unwrap();
        assert_eq!(rep.f_cd.indices(), &[0]);
        assert_eq!(rep.f_ma.indices(), &[1]);
        assert!(rep.passed);
        assert_eq!(rep.mask().unwrap(), &rep.f_cd);
        assert!(rep.rfc_condition_f1 > 0.95 && rep.rfc_machine_f1 > 0.95);
        assert_eq!(run_disentangler(&ds, &cfg).unwrap(), rep);
    }
}
