//! Isolation forest.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;

pub const EULER_GAMMA: f64 = 0.5772156649;

/// Harmonic-number approximation `ln m + γ`.
pub fn harmonic(m: f64) -> f64 {
    m.ln() + EULER_GAMMA
}

/// Average path length of an unsuccessful search in a binary search tree
/// of `n` points: `2 H(n-1) - 2 (n-1) / n`, and `0` for `n <= 1`.
pub fn c_factor(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * harmonic(n - 1.0) - 2.0 * (n - 1.0) / n
}

/// `2^(-E[h] / c(ψ))`.
pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    (-mean_path / c_factor(psi)).exp2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IForestParams {
    pub n_estimators: usize,
    /// ψ, the per-tree subsample size.
    pub max_samples: usize,
    pub max_features_fraction: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for IForestParams {
    fn default() -> Self {
        IForestParams {
            n_estimators: 100,
            max_samples: 256,
            max_features_fraction: 1.0,
            bootstrap: false,
            seed: 0,
        }
    }
}

impl IForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_samples < 2 {
            return Err(Error::arg(format!("max_samples {} must be >= 2", self.max_samples)));
        }
        if self.n_estimators == 0 {
            return Err(Error::arg("n_estimators must be positive"));
        }
        if !(self.max_features_fraction > 0.0 && self.max_features_fraction <= 1.0) {
            return Err(Error::arg(format!(
                "max_features_fraction {} outside (0, 1]",
                self.max_features_fraction
            )));
        }
        Ok(())
    }
}

/// Flat tree: node `i` splits on `feature[i]` unless it is a leaf, in
/// which case `size[i]` holds the number of training points that reached it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ITree {
    pub feature: Vec<usize>,
    pub threshold: Vec<f64>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub size: Vec<usize>,
}

const LEAF: usize = usize::MAX;

impl ITree {
    fn push_leaf(&mut self, size: usize) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.size.push(size);
        self.feature.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    /// `h(x)`: edges traversed plus `c(size)` at the reached leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        let mut depth = 0.0;
        while self.feature[i] != LEAF {
            i = if x[self.feature[i]] < self.threshold[i] { self.left[i] } else { self.right[i] };
            depth += 1.0;
        }
        depth + c_factor(self.size[i])
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    features: Vec<usize>,
    limit: usize,
    tree: ITree,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, r: &mut rng::DetRng) -> usize {
        if depth >= self.limit || idx.len() <= 1 {
            return self.tree.push_leaf(idx.len());
        }
        let x = self.x;
        let range = |f: usize| {
            idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(x[i][f]), hi.max(x[i][f])))
        };
        let mut live: Vec<(usize, f64, f64)> = self
            .features
            .iter()
            .map(|&f| {
                let (lo, hi) = range(f);
                (f, lo, hi)
            })
            .filter(|&(_, lo, hi)| hi > lo)
            .collect();
        if live.is_empty() {
            return self.tree.push_leaf(idx.len());
        }
        let (f, lo, hi) = live.swap_remove(r.random_range(0..live.len()));
        let mut t = r.random_range(lo..hi);
        if t <= lo {
            t = hi;
        }
        let mut k = 0;
        for j in 0..idx.len() {
            if x[idx[j]][f] < t {
                idx.swap(j, k);
                k += 1;
            }
        }
        let node = self.tree.feature.len();
        self.tree.push_leaf(0);
        self.tree.feature[node] = f;
        self.tree.threshold[node] = t;
        let (l, rr) = idx.split_at_mut(k);
        let left = self.grow(l, depth + 1, r);
        let right = self.grow(rr, depth + 1, r);
        self.tree.left[node] = left;
        self.tree.right[node] = right;
        node
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IForest {
    pub params: IForestParams,
    /// Effective subsample size, `min(max_samples, N)`.
    pub psi: usize,
    pub n_features: usize,
    pub trees: Vec<ITree>,
}

impl IForest {
    pub fn fit(x: &[Vec<f64>], params: &IForestParams) -> Result<Self> {
        params.validate()?;
        let n = x.len();
        if n < 2 {
            return Err(Error::data(format!("isolation forest needs >= 2 samples, got {n}")));
        }
        let d = x[0].len();
        for row in x {
            check_dim(d, row.len())?;
        }
        let psi = params.max_samples.min(n);
        let limit = (psi as f64).log2().ceil() as usize;
        let k = ((params.max_features_fraction * d as f64).floor() as usize).clamp(1, d);
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|t| {
                let mut r = rng::stream(params.seed, t as u64);
                let mut features: Vec<usize> = if k == d {
                    (0..d).collect()
                } else {
                    sample(&mut r, d, k).into_vec()
                };
                features.sort_unstable();
                let mut idx: Vec<usize> = if params.bootstrap {
                    (0..psi).map(|_| r.random_range(0..n)).collect()
                } else {
                    sample(&mut r, n, psi).into_vec()
                };
                let mut b = Builder {
                    x,
                    features,
                    limit,
                    tree: ITree {
                        feature: Vec::new(),
                        threshold: Vec::new(),
                        left: Vec::new(),
                        right: Vec::new(),
                        size: Vec::new(),
                    },
                };
                b.grow(&mut idx, 0, &mut r);
                b.tree
            })
            .collect();
        Ok(IForest {
            params: params.clone(),
            psi,
            n_features: d,
            trees,
        })
    }

    /// `E[h(x)]` over the trees.
    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n_features, x.len())?;
        Ok(self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(anomaly_score(self.mean_path_length(x)?, self.psi))
    }

    pub fn n_nodes(&self) -> usize {
        self.trees.iter().map(ITree::n_nodes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn c_factor_values() {
        assert!((c_factor(2) - 0.15443).abs() < 1e-5);
        assert_eq!(c_factor(2), 2.0 * EULER_GAMMA - 1.0);
        assert_eq!(c_factor(1), 0.0);
        assert_eq!(c_factor(0), 0.0);
        let c256 = 2.0 * (255f64.ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0;
        assert_eq!(c_factor(256), c256);
    }

    #[test]
    fn half_score_at_average_depth() {
        for psi in [2, 16, 256, 512] {
            assert_eq!(anomaly_score(c_factor(psi), psi), 0.5);
        }
        assert!(anomaly_score(1.0, 256) > anomaly_score(5.0, 256));
    }

    fn blob(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 99);
        (0..n).map(|_| (0..2).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
    }

    #[test]
    fn far_outlier_beats_every_inlier() {
        for seed in 0..10 {
            let mut x = blob(seed, 500);
            x.push(vec![10.0, 0.0]);
            let m = IForest::fit(&x, &IForestParams { seed, ..Default::default() }).unwrap();
            let out = m.score(&x[500]).unwrap();
            assert!(x[..500].iter().all(|p| m.score(p).unwrap() < out), "seed {seed}");
        }
    }

    #[test]
    fn duplicated_point_isolates_no_faster_than_random() {
        // a point repeated psi times cannot be split apart, so it sits deep
        let mut x = vec![vec![0.5, 0.5]; 64];
        x.extend(blob(3, 64).into_iter().map(|p| vec![p[0] + 0.5, p[1] + 0.5]));
        let m = IForest::fit(&x, &IForestParams { max_samples: 64, ..Default::default() }).unwrap();
        let dup = m.mean_path_length(&[0.5, 0.5]).unwrap();
        let others: f64 = x[64..].iter().map(|p| m.mean_path_length(p).unwrap()).sum::<f64>() / 64.0;
        assert!(dup >= others);
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let x = blob(1, 300);
        let p = IForestParams {
            max_features_fraction: 0.5,
            bootstrap: true,
            seed: 4,
            ..Default::default()
        };
        let a = IForest::fit(&x, &p).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| IForest::fit(&x, &p).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = blob(0, 10);
        assert!(IForest::fit(&x, &IForestParams { max_samples: 1, ..Default::default() }).is_err());
        assert!(IForest::fit(&x[..1], &IForestParams::default()).is_err());
        let m = IForest::fit(&x, &IForestParams::default()).unwrap();
        assert_eq!(m.psi, 10);
        assert!(m.score(&[1.0]).is_err());
        let s = m.score(&[0.0, 0.0]).unwrap();
        assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn constant_data_yields_single_leaves() {
        let x = vec![vec![2.0, 2.0]; 20];
        let m = IForest::fit(&x, &IForestParams { n_estimators: 5, ..Default::default() }).unwrap();
        assert!(m.trees.iter().all(|t| t.n_nodes() == 1));
        assert_eq!(m.mean_path_length(&[2.0, 2.0]).unwrap(), c_factor(20));
    }
}
