//! Subcommands. Each one writes its outputs plus `<stage>.manifest.json`
//! into the output directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use driftmask::data::{
    apply_mask_dataset, load_embeddings, load_embeddings_binary, load_signals, write_embeddings,
    write_embeddings_binary, write_signals, EmbeddingDataset, FeatureMask, Label,
};
use driftmask::detectors::{load_model, load_scores, save_model, score_dataset, write_scores, DetectorConfig, DetectorKind};
use driftmask::disentangle::{run_disentangler, NiChoice};
use driftmask::embed::flatten_dataset;
use driftmask::evalkit::{evaluate, formula_tags, sweep_csv, MetricsReport, SweepSpec};
use driftmask::synthgen::{gen_planted_embeddings, gen_signals, PlantedEmbeddingConfig};
use driftmask::tune::{eag, grid_search, GridSpec, MIN_EAG_SCORES};
use log::info;
use serde::Deserialize;
use serde_json::json;

use crate::config::{Method, Regime, RunConfig};
use crate::error::{CliError, CliResult, EXIT_COLLAPSE, EXIT_GATE, EXIT_OK};
use crate::manifest::{inputs, Outputs};
use crate::pipeline::{featurize_spectral_par, scaled, fit_final, run_pipeline, PipelineOptions};

#[derive(Debug, Parser)]
#[command(name = "driftmask", version, about = "Cross-machine anomaly detection with domain-invariant features")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub regime: Option<Regime>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Planted {
    Default,
    Confounded,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic signals, or planted embeddings with `--planted`.
    Synth {
        /// Multiplier on the per-machine record counts.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, value_enum)]
        planted: Option<Planted>,
    },
    /// Turn signals into embeddings.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        d: Option<usize>,
        /// Also write the packed binary format.
        #[arg(long)]
        binary: bool,
    },
    /// Select domain-invariant features from labeled source embeddings.
    Disentangle {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// `auto` or a fixed top-n size.
        #[arg(long)]
        ni: Option<String>,
        /// Restrict to these machines (comma separated).
        #[arg(long, value_delimiter = ',')]
        machines: Vec<String>,
    },
    /// Grid search by expected anomaly gap on training normals.
    Tune {
        #[arg(long)]
        detector: DetectorKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Grid spec JSON; defaults to the config's grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "eag")]
        metric: String,
    },
    /// Fit a detector on normal training records.
    Train {
        #[arg(long)]
        detector: DetectorKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Detector config JSON, e.g. the `best.json` written by `tune`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Score records with a trained model. Labels are ignored.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Compute metrics from scores and labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Any signal or embedding file carrying `id` and `label`.
        #[arg(long)]
        labels: PathBuf,
        /// Training scores, for the threshold sweep and EAG.
        #[arg(long)]
        train_scores: Option<PathBuf>,
    },
    /// Run every stage for every regime and detector over several seeds.
    Pipeline {
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Also write per-seed signals and embeddings.
        #[arg(long)]
        keep_intermediates: bool,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be >= 1");
            return 1;
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(r) = cli.regime {
            cfg.regime = r;
        }
        let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok(Ctx {
            cfg,
            config_path: cli.config.clone(),
            out,
        })
    }

    fn outputs(&self) -> CliResult<Outputs> {
        Outputs::new(&self.out)
    }

    fn inputs(&self, files: &[&Path]) -> CliResult<Vec<crate::manifest::FileHash>> {
        let mut all: Vec<&Path> = self.config_path.iter().map(PathBuf::as_path).collect();
        all.extend_from_slice(files);
        inputs(&all)
    }

    fn config_json(&self, extra: serde_json::Value) -> CliResult<serde_json::Value> {
        Ok(json!({"run": serde_json::to_value(&self.cfg)?, "command": extra}))
    }
}

fn execute(cli: &Cli) -> CliResult<i32> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Synth { scale, planted } => synth(&ctx, *scale, *planted),
        Command::Featurize { input, method, d, binary } => featurize(&ctx, input, *method, *d, *binary),
        Command::Disentangle {
            input,
            threshold,
            ni,
            machines,
        } => disentangle(&ctx, input, *threshold, ni.as_deref(), machines),
        Command::Tune {
            detector,
            input,
            mask,
            grid,
            metric,
        } => tune(&ctx, *detector, input, mask.as_deref(), grid.as_deref(), metric),
        Command::Train {
            detector,
            input,
            mask,
            params,
        } => train(&ctx, *detector, input, mask.as_deref(), params.as_deref()),
        Command::Score { model, input, mask } => score(&ctx, model, input, mask.as_deref()),
        Command::Eval {
            scores,
            labels,
            train_scores,
        } => eval(&ctx, scores, labels, train_scores.as_deref()),
        Command::Pipeline {
            seeds,
            keep_intermediates,
        } => pipeline(&ctx, *seeds, *keep_intermediates),
    }
}

fn synth(ctx: &Ctx, scale: Option<f64>, planted: Option<Planted>) -> CliResult<i32> {
    let mut out = ctx.outputs()?;
    let seed = ctx.cfg.seed;
    let extra = match planted {
        Some(kind) => {
            let pcfg = match kind {
                Planted::Default => PlantedEmbeddingConfig { seed, ..Default::default() },
                Planted::Confounded => PlantedEmbeddingConfig::confounded(seed),
            };
            let (ds, truth) = gen_planted_embeddings(&pcfg)?;
            write_embeddings(&ds, out.path("embeddings.ndjson")?)?;
            out.write_json("ground_truth.json", &truth)?;
            info!("wrote {} planted embeddings", ds.len());
            serde_json::to_value(&pcfg)?
        }
        None => {
            let s = scale.unwrap_or(ctx.cfg.data.scale);
            if !(s > 0.0) {
                return Err(CliError::Usage(format!("--scale must be positive, got {s}")));
            }
            let scfg = scaled(&ctx.cfg.synth, s, seed);
            let parts = gen_signals(&scfg)?;
            let records = parts.into_iter().flat_map(|d| d.into_records()).collect();
            let ds = driftmask::data::Dataset::new(records, driftmask::data::Role::Train)?;
            write_signals(&ds, out.path("signals.ndjson")?)?;
            out.write_json("ground_truth.json", &scfg.ground_truth())?;
            info!("wrote {} signal records", ds.len());
            serde_json::to_value(&scfg)?
        }
    };
    out.finish("synth", seed, ctx.config_json(extra)?, ctx.inputs(&[])?)?;
    Ok(EXIT_OK)
}

fn featurize(ctx: &Ctx, input: &Path, method: Option<Method>, d: Option<usize>, binary: bool) -> CliResult<i32> {
    let method = method.unwrap_or(ctx.cfg.featurize.method);
    let d = d.unwrap_or(ctx.cfg.featurize.d);
    let signals = load_signals(input)?;
    let emb = match method {
        Method::Spectral => featurize_spectral_par(&signals, d)?,
        Method::External => {
            let path = ctx
                .cfg
                .featurize
                .embeddings
                .as_ref()
                .ok_or_else(|| CliError::Usage("external method needs featurize.embeddings in the config".into()))?;
            let mut by_id: HashMap<String, _> =
                load_embeddings(path)?.into_records().into_iter().map(|r| (r.id.clone(), r)).collect();
            let records = signals
                .iter()
                .map(|r| {
                    by_id
                        .remove(&r.id)
                        .ok_or_else(|| CliError::Core(driftmask::Error::Data(format!("no external embedding for {}", r.id))))
                })
                .collect::<CliResult<Vec<_>>>()?;
            driftmask::data::Dataset::new(records, signals.role())?
        }
    };
    let mut out = ctx.outputs()?;
    write_embeddings(&emb, out.path("embeddings.ndjson")?)?;
    if binary {
        let bin = out.path("embeddings.bin")?;
        let ids = out.path("embeddings.ids.ndjson")?;
        write_embeddings_binary(&emb, bin, ids)?;
    }
    let mut files: Vec<&Path> = vec![input];
    if method == Method::External {
        files.extend(ctx.cfg.featurize.embeddings.as_deref());
    }
    out.finish(
        "featurize",
        ctx.cfg.seed,
        ctx.config_json(json!({"method": method, "d": d, "binary": binary}))?,
        ctx.inputs(&files)?,
    )?;
    Ok(EXIT_OK)
}

/// Embeddings from NDJSON, or the packed format when the path ends in
/// `.bin` (ids are read from the sibling `<stem>.ids.ndjson`).
pub fn load_any_embeddings(path: &Path) -> CliResult<EmbeddingDataset> {
    if path.extension().is_some_and(|e| e == "bin") {
        let ids = path.with_extension("ids.ndjson");
        Ok(load_embeddings_binary(path, ids)?)
    } else {
        Ok(load_embeddings(path)?)
    }
}

/// Features for `regime`: flattened signals for raw, embeddings otherwise,
/// masked for the domain-invariant regime.
fn load_features(regime: Regime, input: &Path, mask: Option<&Path>) -> CliResult<EmbeddingDataset> {
    match regime {
        Regime::Raw => Ok(flatten_dataset(&load_signals(input)?)?),
        Regime::Embedding => load_any_embeddings(input),
        Regime::DomainInvariant => {
            let mask = mask.ok_or_else(|| {
                CliError::Usage("the domain-invariant regime needs --mask from a passed disentangle run".into())
            })?;
            let m = FeatureMask::load(mask)?;
            Ok(apply_mask_dataset(&load_any_embeddings(input)?, &m)?)
        }
    }
}

fn feature_inputs<'a>(input: &'a Path, mask: Option<&'a Path>, regime: Regime) -> Vec<&'a Path> {
    let mut v = vec![input];
    if regime == Regime::DomainInvariant {
        v.extend(mask);
    }
    v
}

fn disentangle(ctx: &Ctx, input: &Path, threshold: Option<f64>, ni: Option<&str>, machines: &[String]) -> CliResult<i32> {
    let mut dcfg = crate::pipeline::disentangle_config(&ctx.cfg.disentangle, ctx.cfg.seed);
    if let Some(t) = threshold {
        dcfg.threshold = t;
    }
    match ni {
        None | Some("auto") => {}
        Some(s) => {
            let n = s
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("--ni must be `auto` or a positive integer, got {s:?}")))?;
            dcfg.ni = NiChoice::Fixed(n);
        }
    }
    let mut ds = load_any_embeddings(input)?;
    if !machines.is_empty() {
        ds = ds.filter(|r| machines.contains(&r.machine));
    }
    let report = run_disentangler(&ds, &dcfg)?;
    let mut out = ctx.outputs()?;
    report.save(out.path("report.json")?)?;
    if let Some(m) = report.mask() {
        m.save(out.path("mask.json")?)?;
    }
    out.finish(
        "disentangle",
        ctx.cfg.seed,
        ctx.config_json(serde_json::to_value(&dcfg)?)?,
        ctx.inputs(&[input])?,
    )?;
    if report.passed {
        info!("gate passed: n_i={} overlap {:.3}", report.n_i, report.overlap_ratio);
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "overlap gate failed: ratio {:.3} at n_i={} exceeds {}; no mask written",
            report.overlap_ratio, report.n_i, report.threshold
        );
        Ok(EXIT_GATE)
    }
}

fn normals(ds: &EmbeddingDataset) -> EmbeddingDataset {
    ds.filter(|r| r.label != Some(Label::Abnormal))
}

fn tune(ctx: &Ctx, kind: DetectorKind, input: &Path, mask: Option<&Path>, grid_path: Option<&Path>, metric: &str) -> CliResult<i32> {
    if metric != "eag" {
        return Err(CliError::Usage(format!("unsupported tuning metric {metric:?}; only `eag` is available")));
    }
    let grid: GridSpec = match grid_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("grid {}: {e}", p.display())))?
        }
        None => ctx.cfg.tune.grid.clone(),
    };
    let regime = ctx.cfg.regime;
    let train = normals(&load_features(regime, input, mask)?);
    let outcome = grid_search(kind, &grid, &train, ctx.cfg.seed, &ctx.cfg.tune.eag)?;
    let mut out = ctx.outputs()?;
    let mut lines = String::new();
    for t in &outcome.trials {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    out.write("trials.ndjson", lines)?;
    out.write_json("best.json", &outcome.best)?;
    let mut files = feature_inputs(input, mask, regime);
    files.extend(grid_path);
    out.finish(
        "tune",
        ctx.cfg.seed,
        ctx.config_json(json!({"detector": kind, "regime": regime, "grid": grid, "metric": metric}))?,
        ctx.inputs(&files)?,
    )?;
    Ok(EXIT_OK)
}

fn train(ctx: &Ctx, kind: DetectorKind, input: &Path, mask: Option<&Path>, params: Option<&Path>) -> CliResult<i32> {
    let config = match params {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let c: DetectorConfig =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("params {}: {e}", p.display())))?;
            if c.kind() != kind {
                return Err(CliError::Usage(format!("params are for {}, not {kind}", c.kind())));
            }
            c
        }
        None => ctx.cfg.detector(kind).with_seed(ctx.cfg.seed),
    };
    let regime = ctx.cfg.regime;
    let train = normals(&load_features(regime, input, mask)?);
    let model = match fit_final(&config, &train, ctx.cfg.tune.grid.val_fraction, ctx.cfg.seed) {
        Ok(m) => m,
        Err(e @ (driftmask::Error::Collapse(_) | driftmask::Error::NonFinite(_))) => {
            return Err(CliError::Collapse(format!("training collapsed: {e}")))
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = ctx.outputs()?;
    save_model(&model, out.path("model.dmm")?)?;
    let mut files = feature_inputs(input, mask, regime);
    files.extend(params);
    out.finish(
        "train",
        ctx.cfg.seed,
        ctx.config_json(json!({"detector": config, "regime": regime}))?,
        ctx.inputs(&files)?,
    )?;
    Ok(EXIT_OK)
}

fn score(ctx: &Ctx, model: &Path, input: &Path, mask: Option<&Path>) -> CliResult<i32> {
    let regime = ctx.cfg.regime;
    let m = load_model(model)?;
    let ds = load_features(regime, input, mask)?;
    let scores = score_dataset(&m, &ds)?;
    let mut out = ctx.outputs()?;
    write_scores(&ds.ids(), &scores, out.path("scores.ndjson")?)?;
    let mut files = vec![model];
    files.extend(feature_inputs(input, mask, regime));
    out.finish("score", ctx.cfg.seed, ctx.config_json(json!({"regime": regime}))?, ctx.inputs(&files)?)?;
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct LabelLine {
    id: String,
    label: Option<Label>,
}

fn read_labels(path: &Path) -> CliResult<HashMap<String, Option<Label>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: LabelLine = serde_json::from_str(line).map_err(|e| driftmask::Error::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        map.insert(l.id, l.label);
    }
    Ok(map)
}

fn eval(ctx: &Ctx, scores: &Path, labels: &Path, train_scores: Option<&Path>) -> CliResult<i32> {
    let recs = load_scores(scores)?;
    let by_id = read_labels(labels)?;
    let mut flags = Vec::with_capacity(recs.len());
    for r in &recs {
        let label = by_id
            .get(&r.id)
            .copied()
            .flatten()
            .ok_or_else(|| driftmask::Error::Data(format!("no label for scored record {}", r.id)))?;
        flags.push(label.is_abnormal());
    }
    let test: Vec<f64> = recs.iter().map(|r| r.score).collect();
    let provenance = [
        ("seed".to_string(), json!(ctx.cfg.seed)),
        ("scores".to_string(), json!(scores)),
    ]
    .into_iter()
    .collect();
    let mut out = ctx.outputs()?;
    let report: MetricsReport = match train_scores {
        Some(p) => {
            let train: Vec<f64> = load_scores(p)?.into_iter().map(|r| r.score).collect();
            let mut rep = evaluate(&train, &test, &flags, ctx.cfg.eval.sweep, provenance)?;
            if train.len() >= MIN_EAG_SCORES {
                rep.eag = Some(eag(&train, &ctx.cfg.tune.eag)?);
            }
            rep
        }
        None => MetricsReport {
            auc_roc: driftmask::evalkit::roc_auc(&test, &flags)?,
            auprc: driftmask::evalkit::auprc(&test, &flags)?,
            sweep: Vec::new(),
            eag: None,
            provenance,
            formulas: formula_tags(),
        },
    };
    out.write_json("metrics.json", &report)?;
    if !report.sweep.is_empty() {
        out.write("sweep.csv", sweep_csv(&report.sweep))?;
    }
    println!("auc_roc {:.6}  auprc {:.6}", report.auc_roc, report.auprc);
    let mut files = vec![scores, labels];
    files.extend(train_scores);
    let sweep: SweepSpec = ctx.cfg.eval.sweep;
    out.finish("eval", ctx.cfg.seed, ctx.config_json(json!({"sweep": sweep}))?, ctx.inputs(&files)?)?;
    Ok(EXIT_OK)
}

fn pipeline(ctx: &Ctx, seeds: usize, keep: bool) -> CliResult<i32> {
    let opts = PipelineOptions {
        seeds,
        keep_intermediates: keep,
    };
    let outcome = run_pipeline(&ctx.cfg, ctx.config_path.as_deref(), &opts, &ctx.out)?;
    print!("{}", outcome.comparison.table());
    if outcome.gate_failures > 0 {
        eprintln!(
            "overlap gate failed for {} of {seeds} seeds; domain-invariant cells were skipped",
            outcome.gate_failures
        );
        Ok(EXIT_GATE)
    } else if outcome.collapses > 0 {
        eprintln!("{} detector runs collapsed", outcome.collapses);
        Ok(EXIT_COLLAPSE)
    } else {
        Ok(EXIT_OK)
    }
}
