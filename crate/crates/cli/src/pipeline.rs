//! End-to-end runs: generate, featurize, disentangle, (tune,) train, score
//! and evaluate every detector in every regime, for several seeds.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use driftmask::augment::build_augmented_set;
use driftmask::data::{
    apply_mask_dataset, load_embeddings, load_signals, split, write_embeddings, write_signals, Dataset,
    EmbeddingDataset, FeatureMask, Label, Record, Role, SignalDataset,
};
use driftmask::detectors::{fit_detector, score_dataset, write_scores, DetectorConfig, DetectorKind, TrainedDetector};
use driftmask::disentangle::{run_disentangler, DisentangleConfig, DisentangleReport};
use driftmask::embed::{flatten_dataset, SpectralFeaturizer};
use driftmask::evalkit::{evaluate, MeanStd, MetricsReport};
use driftmask::rng::derive_seed;
use driftmask::synthgen::{gen_signals, SynthConfig};
use driftmask::tune::{eag, grid_search, MIN_EAG_SCORES};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Method, Regime, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{inputs, Manifest, Outputs};

/// Signals for one seed: generated from the synth section, or loaded.
pub fn load_or_generate(cfg: &RunConfig, seed: u64) -> CliResult<SignalDataset> {
    if let Some(p) = &cfg.data.signals {
        return Ok(load_signals(p)?);
    }
    let synth = scaled(&cfg.synth, cfg.data.scale, seed);
    let parts = gen_signals(&synth)?;
    let records = parts.into_iter().flat_map(Dataset::into_records).collect();
    Ok(Dataset::new(records, Role::Train)?)
}

/// `synth` with record counts multiplied by `scale` (at least one each).
pub fn scaled(synth: &SynthConfig, scale: f64, seed: u64) -> SynthConfig {
    let mut s = SynthConfig { seed, ..synth.clone() };
    for m in &mut s.machines {
        m.n_normal = ((m.n_normal as f64) * scale).round().max(1.0) as usize;
        m.n_abnormal = ((m.n_abnormal as f64) * scale).round().max(1.0) as usize;
    }
    s
}

/// Spectral embeddings computed in parallel, in input order.
pub fn featurize_spectral_par(ds: &SignalDataset, d: usize) -> CliResult<EmbeddingDataset> {
    let records = ds
        .records()
        .par_iter()
        .map_init(|| SpectralFeaturizer::new(d), |f, r| f.featurize(r))
        .collect::<driftmask::Result<Vec<_>>>()?;
    Ok(Dataset::new(records, ds.role())?)
}

/// Embeds signals with the configured method. External embeddings are
/// looked up by record id.
pub struct Embedder {
    d: usize,
    external: Option<HashMap<String, driftmask::data::EmbeddingRecord>>,
}

impl Embedder {
    pub fn new(cfg: &RunConfig) -> CliResult<Self> {
        let external = match (cfg.featurize.method, &cfg.featurize.embeddings) {
            (Method::External, Some(p)) => {
                let ds = load_embeddings(p)?;
                Some(ds.into_records().into_iter().map(|r| (r.id.clone(), r)).collect())
            }
            (Method::External, None) => {
                return Err(CliError::Usage("external featurization needs featurize.embeddings".into()))
            }
            (Method::Spectral, _) => None,
        };
        Ok(Embedder { d: cfg.featurize.d, external })
    }

    pub fn embed(&self, ds: &SignalDataset) -> CliResult<EmbeddingDataset> {
        match &self.external {
            None => featurize_spectral_par(ds, self.d),
            Some(map) => {
                let records = ds
                    .iter()
                    .map(|r| {
                        map.get(&r.id).cloned().ok_or_else(|| {
                            CliError::Core(driftmask::Error::Data(format!("no external embedding for record {}", r.id)))
                        })
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                Ok(Dataset::new(records, ds.role())?)
            }
        }
    }
}

/// Sources and target by machine id.
pub fn partition(cfg: &RunConfig, ds: &SignalDataset) -> CliResult<(SignalDataset, SignalDataset)> {
    let target = &cfg.data.target_machine;
    let is_source = |m: &str| {
        if cfg.data.source_machines.is_empty() {
            m != target
        } else {
            cfg.data.source_machines.iter().any(|s| s == m)
        }
    };
    let src = ds.filter(|r| is_source(r.machine()));
    let tgt = ds.filter(|r| r.machine() == target).with_role(Role::Test);
    if src.is_empty() || tgt.is_empty() {
        return Err(CliError::Core(driftmask::Error::Data(format!(
            "need source and target records; got {} source and {} from target {target}",
            src.len(),
            tgt.len()
        ))));
    }
    Ok((src, tgt))
}

pub fn disentangle_config(cfg: &DisentangleConfig, seed: u64) -> DisentangleConfig {
    DisentangleConfig {
        seeds: cfg.seeds.iter().map(|&s| derive_seed(seed, s)).collect(),
        sample_seed: derive_seed(seed, cfg.sample_seed),
        ..cfg.clone()
    }
}

pub fn abnormal_flags<R: Record>(ds: &Dataset<R>) -> CliResult<Vec<bool>> {
    ds.iter()
        .map(|r| {
            r.label().map(Label::is_abnormal).ok_or_else(|| {
                CliError::Core(driftmask::Error::Data(format!("evaluation record {} has no label", r.id())))
            })
        })
        .collect()
}

/// Fits `config`, holding out a validation share for GANomaly.
pub fn fit_final(config: &DetectorConfig, train: &EmbeddingDataset, val_fraction: f64, seed: u64) -> driftmask::Result<TrainedDetector> {
    if config.kind() == DetectorKind::Ganomaly && val_fraction > 0.0 {
        let (fit, val) = split(train, 1.0 - val_fraction, false, seed)?;
        fit_detector(config, &fit, Some(&val))
    } else {
        fit_detector(config, train, None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Done { auc_roc: f64, auprc: f64 },
    Skipped { reason: String },
    Collapsed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub regime: Regime,
    pub detector: DetectorKind,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: Regime,
    pub detector: DetectorKind,
    pub runs: usize,
    pub auc_roc: MeanStd,
    pub auprc: MeanStd,
    pub skipped: usize,
    pub collapsed: usize,
}

/// Regime-by-detector summary over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<Cell>,
}

impl Comparison {
    pub fn build(cfg: &RunConfig, seeds: Vec<u64>, cells: Vec<Cell>) -> Self {
        let mut rows = Vec::new();
        for &regime in &cfg.regimes {
            for det in &cfg.detectors {
                let kind = det.kind();
                let mine: Vec<&Cell> = cells.iter().filter(|c| c.regime == regime && c.detector == kind).collect();
                let done: Vec<(f64, f64)> = mine
                    .iter()
                    .filter_map(|c| match c.status {
                        CellStatus::Done { auc_roc, auprc } => Some((auc_roc, auprc)),
                        _ => None,
                    })
                    .collect();
                let count = |f: fn(&CellStatus) -> bool| mine.iter().filter(|c| f(&c.status)).count();
                rows.push(ComparisonRow {
                    regime,
                    detector: kind,
                    runs: done.len(),
                    auc_roc: MeanStd::of(&done.iter().map(|v| v.0).collect::<Vec<_>>()),
                    auprc: MeanStd::of(&done.iter().map(|v| v.1).collect::<Vec<_>>()),
                    skipped: count(|s| matches!(s, CellStatus::Skipped { .. })),
                    collapsed: count(|s| matches!(s, CellStatus::Collapsed { .. })),
                });
            }
        }
        Comparison { seeds, rows, cells }
    }

    pub fn row(&self, regime: Regime, detector: DetectorKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.regime == regime && r.detector == detector)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("regime,detector,runs,auc_mean,auc_std,auprc_mean,auprc_std,skipped,collapsed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.regime.name(),
                r.detector,
                r.runs,
                r.auc_roc.mean,
                r.auc_roc.std,
                r.auprc.mean,
                r.auprc.std,
                r.skipped,
                r.collapsed
            );
        }
        s
    }

    /// Regimes as rows, detectors as columns, `mean±std` AUC cells.
    pub fn table(&self) -> String {
        let mut dets: Vec<DetectorKind> = Vec::new();
        let mut regs: Vec<Regime> = Vec::new();
        for r in &self.rows {
            if !dets.contains(&r.detector) {
                dets.push(r.detector);
            }
            if !regs.contains(&r.regime) {
                regs.push(r.regime);
            }
        }
        let mut s = format!("{:<18}", "AUC-ROC");
        for d in &dets {
            let _ = write!(s, "{:>16}", d.name());
        }
        s.push('\n');
        for g in regs {
            let _ = write!(s, "{:<18}", g.name());
            for &d in &dets {
                let cell = match self.row(g, d) {
                    Some(r) if r.runs > 0 => format!("{:.3}±{:.3}", r.auc_roc.mean, r.auc_roc.std),
                    _ => "n/a".into(),
                };
                let _ = write!(s, "{cell:>16}");
            }
            s.push('\n');
        }
        s
    }
}

pub struct PipelineOutcome {
    pub comparison: Comparison,
    pub manifest: Manifest,
    pub gate_failures: usize,
    pub collapses: usize,
}

pub struct PipelineOptions {
    pub seeds: usize,
    /// Also write signals and embeddings of every seed.
    pub keep_intermediates: bool,
}

struct SeedRun<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    dir: String,
    keep: bool,
}

impl SeedRun<'_> {
    fn run(&self, out: &mut Outputs, embedder: &Embedder) -> CliResult<(Vec<Cell>, DisentangleReport)> {
        let (cfg, seed) = (self.cfg, self.seed);
        info!("seed {seed}: preparing data");
        let signals = load_or_generate(cfg, seed)?;
        let (src_sig, tgt_sig) = partition(cfg, &signals)?;
        let src_emb = embedder.embed(&src_sig)?;
        let tgt_emb = embedder.embed(&tgt_sig)?;
        if self.keep {
            write_signals(&signals, out.path(format!("{}/signals.ndjson", self.dir))?)?;
            write_embeddings(&src_emb, out.path(format!("{}/source_embeddings.ndjson", self.dir))?)?;
            write_embeddings(&tgt_emb, out.path(format!("{}/target_embeddings.ndjson", self.dir))?)?;
        }

        info!("seed {seed}: disentangling {} source records", src_emb.len());
        let report = run_disentangler(&src_emb, &disentangle_config(&cfg.disentangle, seed))?;
        out.write_json(format!("{}/disentangle/report.json", self.dir), &report)?;
        let mask: Option<FeatureMask> = report.mask().cloned();
        if let Some(m) = &mask {
            m.save(out.path(format!("{}/disentangle/mask.json", self.dir))?)?;
        } else {
            warn!(
                "seed {seed}: overlap gate failed (ratio {:.3} at n_i={}); domain-invariant regime skipped",
                report.overlap_ratio, report.n_i
            );
        }

        let normals = src_sig.filter(|r| r.label == Some(Label::Normal));
        let train_sig = match &cfg.augment {
            Some(plan) => {
                let plan = driftmask::augment::AugmentPlan {
                    seed: derive_seed(seed, plan.seed),
                    ..plan.clone()
                };
                build_augmented_set(&normals, &plan)?
            }
            None => normals,
        };
        let train_emb = embedder.embed(&train_sig)?;

        let mut cells = Vec::new();
        for &regime in &cfg.regimes {
            let data = match regime {
                Regime::Raw => Some((flatten_dataset(&train_sig)?, flatten_dataset(&tgt_sig)?)),
                Regime::Embedding => Some((train_emb.clone(), tgt_emb.clone())),
                Regime::DomainInvariant => match &mask {
                    Some(m) => Some((apply_mask_dataset(&train_emb, m)?, apply_mask_dataset(&tgt_emb, m)?)),
                    None => None,
                },
            };
            for det in &cfg.detectors {
                let status = match &data {
                    None => CellStatus::Skipped {
                        reason: "overlap gate failed".into(),
                    },
                    Some((train, test)) => self.cell(out, regime, det, train, test)?,
                };
                cells.push(Cell {
                    seed,
                    regime,
                    detector: det.kind(),
                    status,
                });
            }
        }
        Ok((cells, report))
    }

    fn cell(
        &self,
        out: &mut Outputs,
        regime: Regime,
        det: &DetectorConfig,
        train: &EmbeddingDataset,
        test: &EmbeddingDataset,
    ) -> CliResult<CellStatus> {
        let (cfg, seed) = (self.cfg, self.seed);
        let kind = det.kind();
        let dir = format!("{}/{}/{}", self.dir, regime.name(), kind);
        info!("seed {seed}: {} / {kind} on {} training records", regime.name(), train.len());
        let config = if cfg.tune.enabled {
            let outcome = match grid_search(kind, &cfg.tune.grid, train, seed, &cfg.tune.eag) {
                Ok(o) => o,
                Err(driftmask::Error::Collapse(msg)) => return Ok(CellStatus::Collapsed { reason: msg }),
                Err(e) => return Err(e.into()),
            };
            let mut lines = String::new();
            for t in &outcome.trials {
                lines.push_str(&serde_json::to_string(t)?);
                lines.push('\n');
            }
            out.write(format!("{dir}/trials.ndjson"), lines)?;
            outcome.best
        } else {
            det.clone().with_seed(seed)
        };
        out.write_json(format!("{dir}/config.json"), &config)?;
        let model = match fit_final(&config, train, cfg.tune.grid.val_fraction, seed) {
            Ok(m) => m,
            Err(e @ (driftmask::Error::Collapse(_) | driftmask::Error::NonFinite(_))) => {
                warn!("seed {seed}: {} / {kind} collapsed: {e}", regime.name());
                return Ok(CellStatus::Collapsed { reason: e.to_string() });
            }
            Err(e) => return Err(e.into()),
        };
        let train_scores = score_dataset(&model, train)?;
        let test_scores = score_dataset(&model, test)?;
        let labels = abnormal_flags(test)?;
        let provenance: BTreeMap<String, serde_json::Value> = [
            ("seed".to_string(), json!(seed)),
            ("regime".to_string(), json!(regime)),
            ("detector".to_string(), json!(kind)),
            ("config".to_string(), serde_json::to_value(&config)?),
        ]
        .into_iter()
        .collect();
        let mut report: MetricsReport = evaluate(&train_scores, &test_scores, &labels, cfg.eval.sweep, provenance)?;
        if train_scores.len() >= MIN_EAG_SCORES {
            report.eag = Some(eag(&train_scores, &cfg.tune.eag)?);
        }
        write_scores(&test.ids(), &test_scores, out.path(format!("{dir}/scores.ndjson"))?)?;
        out.write_json(format!("{dir}/metrics.json"), &report)?;
        Ok(CellStatus::Done {
            auc_roc: report.auc_roc,
            auprc: report.auprc,
        })
    }
}

pub fn run_pipeline(cfg: &RunConfig, config_path: Option<&Path>, opts: &PipelineOptions, out_dir: &Path) -> CliResult<PipelineOutcome> {
    cfg.validate()?;
    if opts.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let mut out = Outputs::new(out_dir)?;
    let embedder = Embedder::new(cfg)?;
    let seeds: Vec<u64> = (0..opts.seeds as u64).map(|i| cfg.seed + i).collect();
    let mut cells = Vec::new();
    let mut gate_failures = 0;
    let mut gates = Vec::new();
    for &seed in &seeds {
        let run = SeedRun {
            cfg,
            seed,
            dir: format!("seed_{seed}"),
            keep: opts.keep_intermediates,
        };
        let (c, report) = run.run(&mut out, &embedder)?;
        if !report.passed {
            gate_failures += 1;
        }
        gates.push(json!({"seed": seed, "passed": report.passed, "n_i": report.n_i, "overlap_ratio": report.overlap_ratio}));
        cells.extend(c);
    }
    let collapses = cells.iter().filter(|c| matches!(c.status, CellStatus::Collapsed { .. })).count();
    let comparison = Comparison::build(cfg, seeds, cells);
    out.write_json("comparison.json", &json!({"gates": gates, "comparison": &comparison}))?;
    out.write("comparison.csv", comparison.csv())?;
    out.write("comparison.txt", comparison.table())?;

    let mut input_paths: Vec<&Path> = Vec::new();
    input_paths.extend(config_path);
    input_paths.extend(cfg.data.signals.as_deref());
    input_paths.extend(cfg.featurize.embeddings.as_deref());
    let manifest = out.finish("pipeline", cfg.seed, serde_json::to_value(cfg)?, inputs(&input_paths)?)?;
    Ok(PipelineOutcome {
        comparison,
        manifest,
        gate_failures,
        collapses,
    })
}
