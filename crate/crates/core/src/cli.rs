//! Command-line front end. Owns every on-disk format: JSON run configs and
//! their echoes, JSON-lines metrics, result and theorem-report JSON, and the
//! report CSV/JSON summary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::augment::NoiseKind;
use crate::data::{self, apply_normalization, normalize_minmax, Dataset};
use crate::error::{ensure, Error, Result};
use crate::math::{set_threads, Matrix, RngState};
use crate::model::{load_checkpoint, save_checkpoint, MlpSpec};
use crate::theory::{self, EmpiricalWorld, FunctionClass, NoiseModel, TheoremReport, Tolerance};
use crate::train::{
    linear_eval, no_pretrain_eval, pretrain_with, supervised_train, MetricsRecord, Positives, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "dacl", about = "Mixup-noise contrastive learning on tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Contrastive pretraining; writes checkpoints, metrics and a config echo.
    Pretrain(RunArgs),
    /// Linear evaluation of a frozen encoder, or of a fresh one without
    /// `--encoder`.
    LinearEval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Method name recorded in the result file.
        #[arg(long)]
        method: Option<String>,
    },
    /// End-to-end supervised training of encoder and classifier.
    Supervised(RunArgs),
    /// Run one theory check and write its report.
    Verify {
        #[arg(long, value_enum)]
        theorem: TheoremArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = NoiseArg::Mixup)]
        noise: NoiseArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate result and theorem files into a CSV table and JSON summary.
    Report {
        #[arg(long = "results", num_args = 0..)]
        results: Vec<PathBuf>,
        #[arg(long = "theorems", num_args = 0..)]
        theorems: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum GenKind {
    /// Centered Gaussian data of a given rank.
    Lowrank {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two labelled Gaussian blobs plus optional pure-noise columns.
    Blobs {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        noise_dims: usize,
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TheoremArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "4")]
    Four,
    Grad,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum NoiseArg {
    Mixup,
    Gaussian,
}

/// Where a run's data comes from and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the train/test permutation.
    #[serde(default)]
    pub split_seed: u64,
    /// Min-max scale with statistics from the training split.
    #[serde(default = "default_true")]
    pub minmax: bool,
}

fn default_label_column() -> String {
    "label".into()
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

/// A run config file: data source plus training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub method: String,
    pub accuracy: f64,
    pub seed: u64,
    pub epochs: usize,
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code: 0 success, 1 contract or domain failure, 2 I/O failure
/// or bad usage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    match std::env::var("DACL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Contract(format!("DACL_THREADS must be a positive integer, got {v:?}")))?;
            ensure!(n >= 1, "DACL_THREADS must be a positive integer, got {n}");
            set_threads(n);
        }
        Err(_) => set_threads(1),
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { kind } => gen_data(kind),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::LinearEval { run, encoder, method } => cmd_linear_eval(&run, encoder.as_deref(), method),
        Command::Supervised(args) => cmd_supervised(&args),
        Command::Verify {
            theorem,
            seed,
            noise,
            out,
        } => {
            let report = verify(theorem, seed, noise)?;
            write_json(&out, &report)
        }
        Command::Report {
            results,
            theorems,
            out_dir,
        } => report(&results, &theorems, &out_dir).map(|_| ()),
    }
}

fn gen_data(kind: GenKind) -> Result<()> {
    match kind {
        GenKind::Lowrank {
            n,
            d,
            r,
            scale,
            seed,
            out,
        } => {
            let ds = data::gen_lowrank_gaussian(n, d, r, scale, &mut RngState::new(seed))?;
            data::write_csv(&ds, out)
        }
        GenKind::Blobs {
            n,
            d,
            separation,
            noise_dims,
            noise_scale,
            seed,
            out,
        } => {
            let mut rng = RngState::new(seed);
            let mut ds = data::gen_two_class_blobs(n, d, separation, &mut rng)?;
            if noise_dims > 0 {
                ds = data::append_noise_features(&ds, noise_dims, noise_scale, &mut rng)?;
            }
            data::write_csv(&ds, out)
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and validates a run config.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = parse_json(path)?;
    cfg.train.validate()?;
    ensure!(
        cfg.data.test_fraction > 0.0 && cfg.data.test_fraction < 1.0,
        "test_fraction must lie strictly between 0 and 1, got {}",
        cfg.data.test_fraction
    );
    Ok(cfg)
}

/// Loads the CSV, splits it and scales both halves with training statistics.
pub fn prepare_data(src: &DataSource) -> Result<(Dataset, Dataset)> {
    let ds = data::load_csv(&src.path, Some(&src.label_column))?;
    let (train, mut test) = data::split(&ds, src.test_fraction, &mut RngState::new(src.split_seed))?;
    if !src.minmax {
        return Ok((train, test));
    }
    let train = normalize_minmax(&train)?;
    let norm = train.norm.clone().expect("normalized dataset records its statistics");
    test.features = apply_normalization(&test.features, &norm);
    test.norm = Some(norm);
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// JSON-lines metrics writer, flushed whenever a new epoch starts and on
/// finish.
struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_epoch: Option<(String, usize)>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
            last_epoch: None,
        })
    }

    fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let key = (r.phase.clone(), r.epoch);
        if self.last_epoch.as_ref().is_some_and(|k| *k != key) {
            self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        self.last_epoch = Some(key);
        let line = serde_json::to_string(r).expect("metrics record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)
}

fn cmd_pretrain(args: &RunArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let (train, _) = prepare_data(&cfg.data)?;
    create_dir(&args.out_dir)?;
    echo_config(&args.out_dir, &cfg)?;
    let mut metrics = MetricsWriter::create(args.out_dir.join("metrics.jsonl"))?;
    let (encoder, head) = pretrain_with(&cfg.train, &train, Positives::Noise, &mut |r| metrics.write(r))?;
    metrics.finish()?;
    save_checkpoint(&encoder, args.out_dir.join("encoder.ckpt"))?;
    save_checkpoint(&head, args.out_dir.join("head.ckpt"))
}

/// Default method label for a pretrained encoder.
pub fn method_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::Linear => "dacl",
        NoiseKind::Geometric => "geometric_mixup",
        NoiseKind::Binary => "binary_mixup",
        NoiseKind::Gaussian => "gaussian_noise",
        NoiseKind::DaclPlus => "dacl_plus",
    }
}

fn cmd_linear_eval(args: &RunArgs, encoder: Option<&Path>, method: Option<String>) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let (train, test) = prepare_data(&cfg.data)?;
    let (outcome, default_method) = match encoder {
        Some(path) => {
            let enc = load_checkpoint(path)?;
            ensure!(
                enc.spec.input_dim() == train.dim(),
                "encoder {} expects {} features, data has {}",
                path.display(),
                enc.spec.input_dim(),
                train.dim()
            );
            let out = linear_eval(&enc, &train, &test, &cfg.train.eval, cfg.train.seed)?;
            (out, method_name(cfg.train.noise.kind))
        }
        None => (no_pretrain_eval(&cfg.train, &train, &test)?, "no_pretraining"),
    };
    finish_eval_run(args, &cfg, outcome, method.unwrap_or_else(|| default_method.into()))
}

fn cmd_supervised(args: &RunArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let (train, test) = prepare_data(&cfg.data)?;
    let outcome = supervised_train(&cfg.train, &train, &test)?;
    finish_eval_run(args, &cfg, outcome, "supervised".into())
}

fn finish_eval_run(args: &RunArgs, cfg: &RunConfig, outcome: crate::train::EvalOutcome, method: String) -> Result<()> {
    create_dir(&args.out_dir)?;
    echo_config(&args.out_dir, cfg)?;
    let mut metrics = MetricsWriter::create(args.out_dir.join("metrics.jsonl"))?;
    for r in &outcome.metrics {
        metrics.write(r)?;
    }
    metrics.finish()?;
    let epochs = if method == "supervised" {
        cfg.train.epochs
    } else {
        cfg.train.eval.epochs
    };
    write_json(
        &args.out_dir.join("result.json"),
        &RunResult {
            method,
            accuracy: outcome.accuracy,
            seed: cfg.train.seed,
            epochs,
        },
    )
}

/// Runs one theory check with inputs derived from `seed`.
fn verify(theorem: TheoremArg, seed: u64, noise: NoiseArg) -> Result<TheoremReport> {
    let mut rng = RngState::substream(seed, 7);
    match theorem {
        TheoremArg::One => {
            let m = if rng.below(2) == 0 { 4 } else { 6 };
            let pool = 2 + rng.below(2);
            let world = EmpiricalWorld::random(seed, m, pool, vec![0.05, 0.1], 3, 6)?;
            let model = match noise {
                NoiseArg::Mixup => NoiseModel::Mixup,
                NoiseArg::Gaussian => NoiseModel::GaussianDiscretized,
            };
            theory::verify_theorem1(&world, model)
        }
        TheoremArg::Two => {
            let alphas = [0.04, 0.02, 0.01, 0.005];
            let (w, x, y) = theorem2_instance(&mut rng, 6);
            match noise {
                NoiseArg::Mixup => {
                    let pool = centered_normal(8, 6, &mut rng)?;
                    theory::verify_theorem2_mixup(&w, &x, y, &pool, &alphas)
                }
                NoiseArg::Gaussian => theory::verify_theorem2_gaussian(&w, &x, y, 1.0, &alphas, 1_000_000, &mut rng),
            }
        }
        TheoremArg::Four => rademacher_report(seed),
        TheoremArg::Grad => {
            let enc = MlpSpec::encoder(vec![6, 8, 8, 8])?;
            let head = MlpSpec::head(vec![8, 8, 8, 4])?;
            let check = theory::grad_check_harness(&enc, Some(&head), seed, 1e-5, 8)?;
            let bound = 1e-6;
            Ok(TheoremReport {
                theorem: "grad".into(),
                inputs_digest: format!("seed {seed}"),
                lhs: Some(check.max_rel_error),
                rhs: None,
                residuals: Vec::new(),
                slope: None,
                tolerance: Tolerance::Relative { bound },
                passed: check.max_rel_error < bound,
                notes: vec![format!("{} entries checked, worst at {}", check.checked, check.worst)],
            })
        }
    }
}

/// A random linear model and a correctly classified point.
pub fn theorem2_instance(rng: &mut RngState, d: usize) -> (Vec<f64>, Vec<f64>, u8) {
    let w: Vec<f64> = (0..d).map(|_| rng.standard_normal() / (d as f64).sqrt()).collect();
    let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let f: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
    (w, x, u8::from(f >= 0.0))
}

/// Standard-normal rows with the sample mean removed.
pub fn centered_normal(rows: usize, cols: usize, rng: &mut RngState) -> Result<Matrix> {
    let mut m = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect())?;
    let mean = m.col_means();
    for r in 0..rows {
        for (v, c) in m.row_mut(r).iter_mut().zip(&mean) {
            *v -= c;
        }
    }
    Ok(m)
}

fn rademacher_report(seed: u64) -> Result<TheoremReport> {
    let x = data::gen_lowrank_gaussian(256, 32, 3, 1.0, &mut RngState::substream(seed, 8))?.features;
    let trials = 2000;
    let l2 = theory::empirical_rademacher(&x, FunctionClass::L2, 1.0, trials, &mut RngState::substream(seed, 9))?;
    let mix = theory::empirical_rademacher(&x, FunctionClass::Mixup, 1.0, trials, &mut RngState::substream(seed, 9))?;
    let cx = x.as_slice().iter().map(|v| v * v).fold(0.0, f64::max);
    let bounds = theory::bound_compare(&x, 1.0, cx)?;
    Ok(TheoremReport {
        theorem: "4".into(),
        inputs_digest: format!("lowrank n=256 d=32 r=3 seed {seed}"),
        lhs: Some(mix.mean),
        rhs: Some(l2.mean),
        residuals: Vec::new(),
        slope: None,
        tolerance: Tolerance::Relative { bound: 0.5 },
        passed: mix.mean < 0.5 * l2.mean,
        notes: vec![format!(
            "mixup-class estimate {:.6} vs l2-class estimate {:.6}; rank {}, bound ratio {:.6}",
            mix.mean,
            l2.mean,
            bounds.rank,
            bounds.ratio()
        )],
    })
}

/// Per-method summary in the report JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub median_accuracy: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRollup {
    pub all_passed: bool,
    pub reports: Vec<TheoremReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub methods: BTreeMap<String, MethodSummary>,
    pub theorems: TheoremRollup,
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Builds `results.csv` and `summary.json` under `out_dir`.
pub fn report(results: &[PathBuf], theorems: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    ensure!(!results.is_empty() || !theorems.is_empty(), "no inputs");
    let runs: Vec<RunResult> = results.iter().map(|p| parse_json(p)).collect::<Result<_>>()?;
    let reports: Vec<TheoremReport> = theorems.iter().map(|p| parse_json(p)).collect::<Result<_>>()?;

    let mut grouped: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in &runs {
        grouped.entry(r.method.clone()).or_default().push(r);
    }
    let methods = grouped
        .into_iter()
        .map(|(m, rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let summary = MethodSummary {
                median_accuracy: median(&acc),
                runs: rs.len(),
                seeds: rs.iter().map(|r| r.seed).collect(),
            };
            (m, summary)
        })
        .collect();
    let summary = ReportSummary {
        methods,
        theorems: TheoremRollup {
            all_passed: reports.iter().all(|r| r.passed),
            reports,
        },
    };

    create_dir(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::CsvFormat {
        path: csv_path.clone(),
        message: e.to_string(),
    };
    w.write_record(["method", "accuracy", "seed", "epochs"]).map_err(csv_err)?;
    for r in &runs {
        w.write_record([
            r.method.clone(),
            r.accuracy.to_string(),
            r.seed.to_string(),
            r.epochs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
