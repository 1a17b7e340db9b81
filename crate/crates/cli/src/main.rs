//! `canet` command-line driver.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use canet::autodiff::fault;
use canet::data::{
    kfold_split, load_manifest, read_manifest_rows, read_pnm, synth_generate, write_manifest, GradingSample,
    LabelMap, Normalization,
};
use canet::gradcheck::{standard_suite, SuiteConfig};
use canet::metrics::MetricsReport;
use canet::model::{load_checkpoint, save_checkpoint, Manifest, Model};
use canet::rng::RngState;
use canet::train::{center_crop, evaluate, predict, resize_bilinear, train, Prepared, RunDir, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

/// Error that maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Gradient check failures map to the numerical exit code.
#[derive(Debug)]
struct NumericalFailure(String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

#[derive(Parser)]
#[command(name = "canet", version, about = "Cross-disease attention network: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration. Defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `train.epochs=5` or `lambda=[0,0.5,1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one network (or a λ sweep, or k folds) and keep the best checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for checkpoints, histories and results.
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a manifest, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV manifest of the evaluation images.
        #[arg(long)]
        data: PathBuf,
        /// Grade mapping applied to the disease-A column; defaults to the
        /// one the checkpoint was trained with.
        #[arg(long, value_enum)]
        label_map: Option<LabelMapArg>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class scores and grades for individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render a synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and of a tiny full network.
    Gradcheck {
        /// Break a backward rule on purpose to confirm the check notices.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
        /// Coordinates sampled per parameter tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Parameter counts per module for a configuration.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMapArg {
    Identity,
    BinaryDr,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Negate the gate gradient of the residual gated fusion.
    FuseGate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if e.downcast_ref::<NumericalFailure>().is_some() {
        return 4;
    }
    match e.downcast_ref::<canet::Error>() {
        Some(canet::Error::Usage(_) | canet::Error::Config(_) | canet::Error::Parameter(_) | canet::Error::Json(_)) => 2,
        Some(canet::Error::NonFinite { .. } | canet::Error::Diverged { .. }) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, out } => cmd_train(&cfg, &out),
        Cmd::Eval {
            checkpoint,
            data,
            label_map,
            out,
        } => cmd_eval(&checkpoint, &data, label_map, out.as_deref()),
        Cmd::Predict { checkpoint, images } => cmd_predict(&checkpoint, &images),
        Cmd::Synth { cfg, count, out } => cmd_synth(&cfg, count, &out),
        Cmd::Gradcheck {
            inject_fault,
            max_coords,
            json,
        } => cmd_gradcheck(inject_fault, max_coords, json),
        Cmd::ParamCount { cfg } => cmd_param_count(&cfg),
    }
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(a.config.as_deref(), &a.sets)
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<GradingSample>> {
    let (ka, kb) = (cfg.model.num_classes_a, cfg.model.num_classes_b);
    let mut samples = match &cfg.data.manifest {
        Some(path) => load_manifest(path, ka, kb, cfg.data.label_map)?,
        None => {
            let mut s = synth_generate(&cfg.synth, cfg.data.synth_count)?;
            for x in &mut s {
                x.grade_a = cfg.data.label_map.apply(x.grade_a);
            }
            s
        }
    };
    for s in &mut samples {
        if s.grade_a >= ka || s.grade_b >= kb {
            bail!(UsageError(format!(
                "sample {} has grades ({}, {}) but the model has {ka} and {kb} classes",
                s.id, s.grade_a, s.grade_b
            )));
        }
    }
    Ok(samples)
}

/// Seeded shuffle into train / validation / test index lists.
fn holdout(n: usize, val: f64, test: f64, seed: u64) -> Result<[Vec<usize>; 3]> {
    if !(0.0..1.0).contains(&val) || !(0.0..1.0).contains(&test) || val + test >= 1.0 {
        bail!(UsageError(format!("val_fraction {val} and test_fraction {test} leave no training data")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngState::new(seed).split(0xDA7A).shuffle(&mut idx);
    let nt = (n as f64 * test).round() as usize;
    let nv = (n as f64 * val).round() as usize;
    let test_idx = idx[..nt].to_vec();
    let val_idx = idx[nt..nt + nv].to_vec();
    let train_idx = idx[nt + nv..].to_vec();
    Ok([train_idx, val_idx, test_idx])
}

fn pick(samples: &[GradingSample], idx: &[usize]) -> Vec<GradingSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

struct ResultRow {
    lambda: f64,
    fold: String,
    report: MetricsReport,
}

fn results_csv(rows: &[ResultRow], mean: Option<&str>) -> String {
    let mut s = format!("lambda,fold,{}\n", MetricsReport::CSV_HEADER);
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.lambda, r.fold, r.report.csv_row()));
    }
    if let Some(m) = mean {
        s.push_str(m);
    }
    s
}

/// Column means of the metric rows for one λ; empty cells are skipped.
fn mean_row(lambda: f64, rows: &[&ResultRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.report.csv_row().split(',').map(str::to_string).collect())
        .collect();
    let cols = cells.first().map_or(0, Vec::len);
    let mut out = vec![lambda.to_string(), "mean".to_string()];
    for c in 0..cols {
        let vals: Vec<f64> = cells.iter().filter_map(|r| r[c].parse().ok()).collect();
        out.push(if vals.is_empty() {
            String::new()
        } else {
            format!("{:.6}", vals.iter().sum::<f64>() / vals.len() as f64)
        });
    }
    out.join(",") + "\n"
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg.network()?;
    let model = Model::new(spec.clone())?;
    cfg.train.validate()?;
    let lambdas = cfg.lambdas();
    if lambdas.is_empty() {
        bail!(UsageError("lambda list is empty".into()));
    }
    for &l in &lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            bail!(UsageError(format!("lambda {l} must be finite and >= 0")));
        }
    }
    let samples = load_samples(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;

    // Each entry: (name, train indices, validation indices, test indices).
    let splits: Vec<(String, Vec<usize>, Vec<usize>, Vec<usize>)> = match cfg.data.kfold {
        Some(k) => {
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let labels: Vec<(usize, usize)> = samples.iter().map(|s| (s.grade_a, s.grade_b)).collect();
            kfold_split(&ids, &labels, k, cfg.train.seed)?
                .into_iter()
                .enumerate()
                .map(|(i, f)| (format!("{i}"), f.train, Vec::new(), f.test))
                .collect()
        }
        None => {
            let [tr, va, te] = holdout(samples.len(), cfg.data.val_fraction, cfg.data.test_fraction, cfg.train.seed)?;
            vec![("holdout".to_string(), tr, va, te)]
        }
    };

    let nested = lambdas.len() > 1 || cfg.data.kfold.is_some();
    let mut rows = Vec::new();
    let mut means = String::new();
    for &lambda in &lambdas {
        let start = rows.len();
        for (fold, tr, va, te) in &splits {
            let mut dir = out.to_path_buf();
            if lambdas.len() > 1 {
                dir = dir.join(format!("lambda_{lambda}"));
            }
            if cfg.data.kfold.is_some() {
                dir = dir.join(format!("fold_{fold}"));
            }
            let train_s = pick(&samples, tr);
            let norm = Normalization::compute(&train_s)?;
            let resize = cfg.train.resize_to;
            let train_p = Prepared::new(&train_s, &norm, resize)?;
            let val_p = (!va.is_empty())
                .then(|| Prepared::new(&pick(&samples, va), &norm, resize))
                .transpose()?;
            let test_p = (!te.is_empty())
                .then(|| Prepared::new(&pick(&samples, te), &norm, resize))
                .transpose()?;

            let mut tc: TrainConfig = cfg.train.clone();
            tc.lambda = lambda;
            let mut run_cfg = cfg.clone();
            run_cfg.train = tc.clone();
            run_cfg.lambda = None;
            let mut manifest = Manifest::new(spec.clone(), tc.resize_to, tc.crop_to);
            manifest.normalization = Some(norm.clone());
            manifest.config = Some(serde_json::to_value(&run_cfg)?);
            let run = RunDir {
                dir: dir.clone(),
                manifest,
            };
            let init = model.init(&mut RngState::new(tc.seed).split(0x1417))?;
            eprintln!(
                "training {} (lambda {lambda}, split {fold}): {} train / {} val / {} test",
                spec.variant.label(),
                train_p.len(),
                val_p.as_ref().map_or(0, Prepared::len),
                test_p.as_ref().map_or(0, Prepared::len)
            );
            let outcome = train(&model, init, &train_p, val_p.as_ref(), &tc, Some(&run))?;
            let (report, _) = match &test_p {
                Some(t) => evaluate(&model, &outcome.best, t, tc.crop_to, 64)?,
                None => evaluate(&model, &outcome.best, val_p.as_ref().unwrap_or(&train_p), tc.crop_to, 64)?,
            };
            std::fs::write(dir.join("metrics.json"), report.to_json() + "\n")?;
            let last_manifest = {
                let mut m = run.manifest.clone();
                m.epoch = outcome.history.last().map_or(0, |h| h.epoch);
                m.step = outcome.steps;
                m.rng = Some(outcome.rng);
                m
            };
            save_checkpoint(&dir.join("last"), &last_manifest, &outcome.last)?;
            let row = ResultRow {
                lambda,
                fold: fold.clone(),
                report,
            };
            println!("{}", results_csv(std::slice::from_ref(&row), None).lines().nth(1).unwrap_or(""));
            rows.push(row);
        }
        if cfg.data.kfold.is_some() {
            let refs: Vec<&ResultRow> = rows[start..].iter().collect();
            let m = mean_row(lambda, &refs);
            print!("{m}");
            means.push_str(&m);
        }
    }
    let text = results_csv(&rows, (!means.is_empty()).then_some(means.as_str()));
    std::fs::write(out.join("results.csv"), &text)?;
    if nested {
        eprintln!("wrote {}", out.join("results.csv").display());
    }
    Ok(())
}

fn checkpoint_label_map(manifest: &Manifest) -> LabelMap {
    manifest
        .config
        .as_ref()
        .and_then(|c| c.get("data")?.get("label_map").cloned())
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default()
}

fn cmd_eval(checkpoint: &Path, data: &Path, label_map: Option<LabelMapArg>, out: Option<&Path>) -> Result<()> {
    let (model, manifest, params) = load_checkpoint::<f32>(checkpoint)?;
    let map = match label_map {
        Some(LabelMapArg::Identity) => LabelMap::Identity,
        Some(LabelMapArg::BinaryDr) => LabelMap::BinaryDr,
        None => checkpoint_label_map(&manifest),
    };
    let (ka, kb) = (model.spec().model.num_classes_a, model.spec().model.num_classes_b);
    for (i, row) in read_manifest_rows(data)?.iter().enumerate() {
        let a = map.apply(row.grade_a);
        if a >= ka || row.grade_b >= kb {
            return Err(canet::Error::Config(format!(
                "{} row {}: grades ({a}, {}) do not fit the checkpoint's {ka} and {kb} classes",
                data.display(),
                i + 2,
                row.grade_b
            ))
            .into());
        }
    }
    let samples = load_manifest(data, ka, kb, map)?;
    let norm = manifest.normalization.clone().unwrap_or_else(Normalization::identity);
    let prepared = Prepared::new(&samples, &norm, manifest.resize_to)?;
    let (report, _) = evaluate(&model, &params, &prepared, manifest.input_size, 64)?;
    let json = report.to_json();
    println!("{json}");
    if let Some(p) = out {
        std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, images: &[PathBuf]) -> Result<()> {
    let (model, manifest, params) = load_checkpoint::<f32>(checkpoint)?;
    let norm = manifest.normalization.clone().unwrap_or_else(Normalization::identity);
    for path in images {
        let img = read_pnm(path)?.to_tensor::<f32>();
        let img = resize_bilinear(&img, manifest.resize_to, manifest.resize_to)?;
        let img = center_crop(&norm.apply(&img), manifest.input_size)?;
        let pred = predict(&model, &params, &[img], 1)?;
        println!("{}", path.display());
        for (name, head) in [("a", &pred.a), ("b", &pred.b)] {
            let Some((grades, scores)) = head else { continue };
            let s: Vec<String> = scores.iter().map(|v| format!("{v:.6}")).collect();
            println!("  {name} scores: {}", s.join(" "));
            println!("  {name} grade: {}", grades[0]);
        }
    }
    Ok(())
}

fn cmd_synth(args: &ConfigArgs, count: usize, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let samples = synth_generate(&cfg.synth, count)?;
    let path = write_manifest(out, &samples)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_gradcheck(fault_arg: Option<FaultArg>, max_coords: Option<usize>, json: bool) -> Result<()> {
    let mut sc = SuiteConfig::default();
    if let Some(m) = max_coords {
        if m == 0 {
            bail!(UsageError("--max-coords must be positive".into()));
        }
        sc.ops.max_coords = m;
        sc.network.max_coords = m;
    }
    if let Some(FaultArg::FuseGate) = fault_arg {
        fault::set(fault::Fault::FlipFuseGateGrad);
    }
    let reports = standard_suite(sc)?;
    fault::set(fault::Fault::None);
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        for r in &reports {
            println!(
                "{} {:<24} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_err,
                r.tol,
                r.checked(),
                r.skipped()
            );
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        eprintln!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(anyhow!(NumericalFailure(format!("gradient check failed for: {}", failed.join(", ")))))
    }
}

fn cmd_param_count(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let model = Model::new(cfg.network()?)?;
    let c = model.param_count();
    let v = serde_json::json!({
        "variant": model.variant().label(),
        "backbone": c.backbone,
        "specific": c.specific,
        "project": c.project,
        "dependent": c.dependent,
        "heads": c.heads,
        "attention": c.attention(),
        "total": c.total(),
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}
