//! Random-forest classifier with Gini splits and mean-decrease-in-impurity
//! feature importances.
//!
//! Trees are grown independently from per-tree random streams derived from
//! `(seed, tree index)`, so a fitted forest is bit-identical regardless of
//! how many threads grow it.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::evalkit::Counts;
use crate::rng::{self, DetRng};

/// Gini impurity `1 - sum p_k^2`.
pub fn gini(class_counts: &[usize]) -> Result<f64> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::arg("gini impurity of an empty node"));
    }
    Ok(gini_u32(class_counts.iter().map(|&c| c as u32), total))
}

fn gini_u32(counts: impl Iterator<Item = u32>, total: usize) -> f64 {
    let t = total as f64;
    1.0 - counts.map(|c| (f64::from(c) / t).powi(2)).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Fraction(f64),
}

impl MaxFeatures {
    pub fn count(self, d: usize) -> usize {
        let k = match self {
            MaxFeatures::Sqrt => (d as f64).sqrt().floor() as usize,
            MaxFeatures::All => d,
            MaxFeatures::Fraction(f) => (f * d as f64).floor() as usize,
        };
        k.clamp(1, d.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::arg("forest needs at least one tree"));
        }
        if let MaxFeatures::Fraction(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::arg(format!("max_features fraction must lie in (0, 1], got {f}")));
            }
        }
        if self.min_samples_leaf == 0 || self.min_samples_split < 2 {
            return Err(Error::arg("min_samples_leaf >= 1 and min_samples_split >= 2 required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf(&self, x: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { counts } => return counts,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub n_features: usize,
    /// Mean decrease in impurity per feature, normalized to sum to one
    /// (all zeros when no split reduced impurity).
    pub importances: Vec<f64>,
}

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl SplitCandidate {
    /// Strictly better only, so ties go to the candidate drawn first in the
    /// random feature order rather than to the lowest index.
    fn beats(&self, other: &SplitCandidate) -> bool {
        self.decrease > other.decrease
    }
}

struct TreeGrower<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    params: &'a ForestParams,
    k_features: usize,
    feature_order: Vec<usize>,
    pairs: Vec<(f64, usize)>,
    rng: DetRng,
}

impl TreeGrower<'_> {
    fn class_counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Draws features in random order until `k_features` non-constant ones
    /// have been evaluated (or all features were seen).
    fn best_split(&mut self, idx: &[usize], parent: &[u32], impurity: f64) -> Option<SplitCandidate> {
        let d = self.cols.len();
        let n = idx.len();
        let min_leaf = self.params.min_samples_leaf;
        let mut best: Option<SplitCandidate> = None;
        let mut evaluated = 0;
        let mut left = vec![0u32; self.n_classes];

        for pos in 0..d {
            if evaluated == self.k_features {
                break;
            }
            let j = self.rng.random_range(pos..d);
            self.feature_order.swap(pos, j);
            let f = self.feature_order[pos];
            let col = &self.cols[f];

            self.pairs.clear();
            self.pairs.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.pairs[0].0 == self.pairs[n - 1].0 {
                continue;
            }
            evaluated += 1;

            left.iter_mut().for_each(|c| *c = 0);
            for s in 0..n - 1 {
                left[self.pairs[s].1] += 1;
                let (v, next) = (self.pairs[s].0, self.pairs[s + 1].0);
                if v == next {
                    continue;
                }
                let n_left = s + 1;
                let n_right = n - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let g_left = gini_u32(left.iter().copied(), n_left);
                let g_right = gini_u32(parent.iter().zip(&left).map(|(p, l)| p - l), n_right);
                let weighted = (n_left as f64 * g_left + n_right as f64 * g_right) / n as f64;
                let mut threshold = v + (next - v) / 2.0;
                if threshold >= next {
                    threshold = v;
                }
                let cand = SplitCandidate {
                    feature: f,
                    threshold,
                    decrease: impurity - weighted,
                };
                if best.as_ref().is_none_or(|b| cand.beats(b)) {
                    best = Some(cand);
                }
            }
        }
        best
    }

    fn grow(mut self) -> (DecisionTree, Vec<f64>) {
        let n_rows = self.y.len();
        let root: Vec<usize> = if self.params.bootstrap {
            (0..n_rows).map(|_| self.rng.random_range(0..n_rows)).collect()
        } else {
            (0..n_rows).collect()
        };
        let n_root = root.len() as f64;
        let mut importances = vec![0.0; self.cols.len()];
        let mut nodes: Vec<Node> = vec![Node::Leaf { counts: vec![] }];
        let mut stack = vec![(0usize, root, 0usize)];

        while let Some((node, idx, depth)) = stack.pop() {
            let counts = self.class_counts(&idx);
            let impurity = gini_u32(counts.iter().copied(), idx.len());
            let can_split = impurity > 0.0
                && self.params.max_depth.is_none_or(|m| depth < m)
                && idx.len() >= self.params.min_samples_split
                && idx.len() >= 2 * self.params.min_samples_leaf;
            let split = if can_split {
                self.best_split(&idx, &counts, impurity)
            } else {
                None
            };
            let Some(split) = split else {
                nodes[node] = Node::Leaf { counts };
                continue;
            };

            importances[split.feature] += idx.len() as f64 / n_root * split.decrease;
            let col = &self.cols[split.feature];
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= split.threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf { counts: vec![] });
            nodes.push(Node::Leaf { counts: vec![] });
            nodes[node] = Node::Split {
                feature: split.feature,
                threshold: split.threshold,
                left,
                right: left + 1,
            };
            stack.push((left + 1, r, depth + 1));
            stack.push((left, l, depth + 1));
        }
        (DecisionTree { nodes }, importances)
    }
}

fn validate_xy(x: &[Vec<f64>], y: &[usize]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::arg("forest needs at least two samples"));
    }
    check_dim(x.len(), y.len())?;
    let d = x[0].len();
    if d == 0 {
        return Err(Error::arg("forest needs at least one feature"));
    }
    for row in x {
        check_dim(d, row.len())?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("feature matrix contains a non-finite value"));
        }
    }
    Ok(d)
}

/// Fits a forest on rows `x` with class indices `y`.
pub fn fit_forest(x: &[Vec<f64>], y: &[usize], params: &ForestParams) -> Result<ForestModel> {
    params.validate()?;
    let d = validate_xy(x, y)?;
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; n_classes];
    y.iter().for_each(|&c| present[c] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::arg("forest needs at least two classes (importance undefined)"));
    }

    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.iter().map(|row| row[j]).collect()).collect();
    let k_features = params.max_features.count(d);

    let grown: Vec<(DecisionTree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            TreeGrower {
                cols: &cols,
                y,
                n_classes,
                params,
                k_features,
                feature_order: (0..d).collect(),
                pairs: Vec::with_capacity(x.len()),
                rng: rng::stream(params.seed, t as u64),
            }
            .grow()
        })
        .collect();

    let mut importances = vec![0.0; d];
    let mut trees = Vec::with_capacity(grown.len());
    for (tree, imp) in grown {
        for (acc, v) in importances.iter_mut().zip(&imp) {
            *acc += v;
        }
        trees.push(tree);
    }
    let n_trees = trees.len() as f64;
    importances.iter_mut().for_each(|v| *v /= n_trees);
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }

    Ok(ForestModel {
        trees,
        n_classes,
        n_features: d,
        importances,
    })
}

impl ForestModel {
    /// Mean of the per-tree leaf class frequencies.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n_features, x.len())?;
        let mut probs = vec![0.0; self.n_classes];
        for tree in &self.trees {
            let counts = tree.leaf(x);
            let total: u32 = counts.iter().sum();
            for (p, &c) in probs.iter_mut().zip(counts) {
                *p += f64::from(c) / f64::from(total);
            }
        }
        let n = self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Ok(probs)
    }

    /// Majority vote over trees (ties go to the lower class index), plus
    /// the averaged class probabilities.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = self.predict_proba(x)?;
        let mut votes = vec![0usize; self.n_classes];
        for tree in &self.trees {
            votes[argmax_u32(tree.leaf(x))] += 1;
        }
        let class = votes
            .iter()
            .enumerate()
            .fold(0, |best, (c, &v)| if v > votes[best] { c } else { best });
        Ok((class, probs))
    }

    pub fn predict_many(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        x.iter().map(|row| self.predict(row).map(|p| p.0)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

fn argmax_u32(v: &[u32]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > v[best] { i } else { best })
}

/// How F1 is computed for a classification task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Task {
    /// Binary F1 for one positive class (the condition task uses abnormal = 1).
    Binary { positive: usize },
    /// Unweighted mean of one-vs-rest F1 over all classes.
    MacroOvr { n_classes: usize },
}

pub fn f1_from_predictions(pred: &[usize], truth: &[usize], task: F1Task) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::arg("F1 of an empty test set"));
    }
    check_dim(truth.len(), pred.len())?;
    let ovr = |positive: usize| {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == positive, t == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c.rates().2
    };
    Ok(match task {
        F1Task::Binary { positive } => ovr(positive),
        F1Task::MacroOvr { n_classes } => (0..n_classes).map(ovr).sum::<f64>() / n_classes as f64,
    })
}

pub fn evaluate_f1(model: &ForestModel, x: &[Vec<f64>], y: &[usize], task: F1Task) -> Result<f64> {
    let pred = model.predict_many(x)?;
    f1_from_predictions(&pred, y, task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 99);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[10, 0]).unwrap(), 0.0);
        assert_eq!(gini(&[5, 5]).unwrap(), 0.5);
        assert_eq!(gini(&[3, 1]).unwrap(), 0.375);
        assert!(gini(&[0, 0]).is_err());
    }

    #[test]
    fn max_features_counts() {
        assert_eq!(MaxFeatures::Sqrt.count(1024), 32);
        assert_eq!(MaxFeatures::All.count(7), 7);
        assert_eq!(MaxFeatures::Fraction(0.01).count(10), 1);
    }

    #[test]
    fn separable_feature_dominates_importance() {
        let x = noise(200, 11, 1);
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        // every split considers every feature, so the informative one is never crowded out
        let p = ForestParams {
            seed: 3,
            max_features: MaxFeatures::All,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, &p).unwrap();
        assert!(m.importances[0] > 0.9, "importance {:?}", m.importances);
        assert!((m.importances.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.importances.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = noise(10, 3, 2);
        assert!(fit_forest(&x, &[1; 10], &ForestParams::default()).is_err());
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let x = noise(20, 3, 4);
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let m = fit_forest(&x, &y, &ForestParams { n_trees: 3, ..Default::default() }).unwrap();
        assert!(matches!(m.predict(&[0.0; 4]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn depth_one_tree_on_separable_data() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        let p = ForestParams {
            n_trees: 1,
            bootstrap: false,
            max_depth: Some(1),
            ..Default::default()
        };
        let m = fit_forest(&x, &y, &p).unwrap();
        assert_eq!(m.trees[0].depth(), 1);
        let (c, probs) = m.predict(&[1.0]).unwrap();
        assert_eq!(c, 0);
        assert_eq!(probs, vec![1.0, 0.0]);
    }

    #[test]
    fn unlimited_tree_fits_consistent_data_exactly() {
        // XOR-like labels: no single axis split helps at the root.
        let x = noise(300, 4, 5);
        let y: Vec<usize> = x.iter().map(|r| usize::from((r[0] > 0.0) ^ (r[1] > 0.0))).collect();
        let p = ForestParams {
            n_trees: 1,
            bootstrap: false,
            max_features: MaxFeatures::All,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, &p).unwrap();
        assert_eq!(m.predict_many(&x).unwrap(), y);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let x = noise(120, 6, 6);
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[2] + 0.3 * r[4] > 0.1)).collect();
        let p = ForestParams { n_trees: 20, seed: 9, ..Default::default() };
        let a = fit_forest(&x, &y, &p).unwrap();
        let b = fit_forest(&x, &y, &p).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| fit_forest(&x, &y, &p).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn importances_invariant_under_monotone_transform() {
        let x = noise(150, 5, 7);
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[1] - r[3] > 0.2)).collect();
        let cubed: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * v * v).collect()).collect();
        let p = ForestParams { n_trees: 25, seed: 1, ..Default::default() };
        let a = fit_forest(&x, &y, &p).unwrap();
        let b = fit_forest(&cubed, &y, &p).unwrap();
        assert_eq!(a.importances, b.importances);
    }

    #[test]
    fn held_out_f1_on_linearly_separable_set() {
        let x = noise(1000, 4, 8);
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let (xtr, xte) = x.split_at(800);
        let (ytr, yte) = y.split_at(800);
        let m = fit_forest(xtr, ytr, &ForestParams { seed: 2, ..Default::default() }).unwrap();
        let f1 = evaluate_f1(&m, xte, yte, F1Task::Binary { positive: 1 }).unwrap();
        assert!(f1 > 0.99, "f1 = {f1}");
    }

    #[test]
    fn all_trees_agreeing_gives_unit_probability() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 0.0]).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let m = fit_forest(&x, &y, &ForestParams { n_trees: 15, ..Default::default() }).unwrap();
        let (c, p) = m.predict(&[39.0, 0.0]).unwrap();
        assert_eq!(c, 1);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn f1_conventions() {
        let truth: Vec<usize> = (0..1000).map(|i| usize::from(i < 100)).collect();
        let all_pos = vec![1; 1000];
        let f = f1_from_predictions(&all_pos, &truth, F1Task::Binary { positive: 1 }).unwrap();
        assert!((f - 0.181_818_181_818).abs() < 1e-9);
        assert_eq!(f1_from_predictions(&truth, &truth, F1Task::Binary { positive: 1 }).unwrap(), 1.0);
        let m = [0, 1, 2, 2];
        assert_eq!(f1_from_predictions(&m, &m, F1Task::MacroOvr { n_classes: 3 }).unwrap(), 1.0);
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = noise(30, 3, 10);
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let m = fit_forest(&x, &y, &ForestParams { n_trees: 4, ..Default::default() }).unwrap();
        let p = dir.path().join("f.json");
        m.save(&p).unwrap();
        assert_eq!(ForestModel::load(&p).unwrap(), m);
    }
}
