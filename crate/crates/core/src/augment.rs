//! Training-set augmentation over normal signal records: time-shifting and
//! cross-machine mix-up.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Record, SignalDataset, SignalRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub shift_steps: usize,
    pub shift_count: usize,
    pub shift_source_machine: String,
    pub mixup_count: usize,
    /// `(m1, m2)`: `x1` is drawn from `m1`, `x2` from `m2`.
    pub mixup_pairs: (String, String),
    pub lambda_ranges: [(f64, f64); 2],
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            shift_steps: 5,
            shift_count: 0,
            shift_source_machine: "M2".into(),
            mixup_count: 0,
            mixup_pairs: ("M2".into(), "M3".into()),
            lambda_ranges: [(0.1, 0.3), (0.7, 0.9)],
            seed: 0,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.shift_steps == 0 {
            return Err(Error::arg("shift_steps must be >= 1"));
        }
        for &(lo, hi) in &self.lambda_ranges {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::arg(format!("lambda range [{lo}, {hi}] must lie within [0, 1]")));
            }
        }
        Ok(())
    }

    /// The mix-up coefficients in generation order: an inclusive linear grid
    /// over range 1 with `ceil(count/2)` points, then range 2 with the rest.
    pub fn lambdas(&self) -> Vec<f64> {
        let n1 = self.mixup_count.div_ceil(2);
        let n2 = self.mixup_count / 2;
        let mut out = linspace(self.lambda_ranges[0], n1);
        out.extend(linspace(self.lambda_ranges[1], n2));
        out
    }
}

fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Shifts every channel forward by `k` steps, holding the first value.
pub fn time_shift(x: &SignalRecord, k: usize) -> Result<SignalRecord> {
    let n_t = x.steps();
    if k == 0 || k >= n_t {
        return Err(Error::arg(format!("shift k={k} must satisfy 1 <= k < n_t={n_t}")));
    }
    let values = x
        .values
        .iter()
        .map(|ch| (0..n_t).map(|t| if t < k { ch[0] } else { ch[t - k] }).collect())
        .collect();
    Ok(SignalRecord {
        id: format!("{}:shift{k}", x.id),
        machine: x.machine.clone(),
        label: x.label,
        values,
    })
}

/// `lambda * x1 + (1 - lambda) * x2`, elementwise.
pub fn mixup(x1: &SignalRecord, x2: &SignalRecord, lambda: f64) -> Result<SignalRecord> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    if x1.channels() != x2.channels() || x1.steps() != x2.steps() {
        return Err(Error::Shape {
            line: None,
            msg: format!(
                "mix-up of {}x{} with {}x{}",
                x1.channels(),
                x1.steps(),
                x2.channels(),
                x2.steps()
            ),
        });
    }
    for x in [x1, x2] {
        if x.label != Some(Label::Normal) {
            return Err(Error::data(format!("mix-up parent {} is not labeled normal", x.id)));
        }
    }
    let values = x1
        .values
        .iter()
        .zip(&x2.values)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect())
        .collect();
    Ok(SignalRecord {
        id: format!("mix({},{},{lambda})", x1.id, x2.id),
        machine: format!("mix({},{},{lambda})", x1.machine, x2.machine),
        label: Some(Label::Normal),
        values,
    })
}

/// Draws `count` indices from `0..n`: whole random permutations first, so
/// no index repeats until the pool is exhausted.
fn draw(n: usize, count: usize, r: &mut rng::DetRng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(r);
        out.extend(perm.into_iter().take(count - out.len()));
    }
    out
}

/// Originals, then `shift_count` shifted copies from the shift machine,
/// then `mixup_count` mixed pairs.
pub fn build_augmented_set(normals: &SignalDataset, plan: &AugmentPlan) -> Result<SignalDataset> {
    plan.validate()?;
    let allowed = [&plan.shift_source_machine, &plan.mixup_pairs.0, &plan.mixup_pairs.1];
    for r in normals.iter() {
        if r.label != Some(Label::Normal) {
            return Err(Error::data(format!("augmentation input {} is not labeled normal", r.id)));
        }
        if !allowed.contains(&&r.machine) {
            return Err(Error::data(format!("record {} comes from machine {} outside the plan", r.id, r.machine)));
        }
    }
    let pool = |m: &str| -> Vec<&SignalRecord> { normals.iter().filter(|r| r.machine() == m).collect() };
    let mut out: Vec<SignalRecord> = normals.records().to_vec();
    out.reserve(plan.shift_count + plan.mixup_count);

    if plan.shift_count > 0 {
        let src = pool(&plan.shift_source_machine);
        if src.is_empty() {
            return Err(Error::data(format!("no normals from shift machine {}", plan.shift_source_machine)));
        }
        let mut r = rng::stream(plan.seed, 1);
        for (j, i) in draw(src.len(), plan.shift_count, &mut r).into_iter().enumerate() {
            let mut s = time_shift(src[i], plan.shift_steps)?;
            s.id = format!("{}:aug{j}", s.id);
            out.push(s);
        }
    }

    if plan.mixup_count > 0 {
        let (p1, p2) = (pool(&plan.mixup_pairs.0), pool(&plan.mixup_pairs.1));
        if p1.is_empty() || p2.is_empty() {
            return Err(Error::data(format!(
                "mix-up needs normals from both {} and {}",
                plan.mixup_pairs.0, plan.mixup_pairs.1
            )));
        }
        let mut r = rng::stream(plan.seed, 2);
        for (j, lambda) in plan.lambdas().into_iter().enumerate() {
            let a = p1[r.random_range(0..p1.len())];
            let b = p2[r.random_range(0..p2.len())];
            let mut m = mixup(a, b, lambda)?;
            m.id = format!("{}:aug{j}", m.id);
            out.push(m);
        }
    }
    Dataset::new(out, normals.role())
}
