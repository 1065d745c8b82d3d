//! The `tcs` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O error (unreadable
//! image or path), 3 model backend error, 4 invalid feature registry, 5 invalid
//! dataset. Machine-readable JSON goes to stdout, diagnostics to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierHandle};
use crate::error::Error;
use crate::eval::{file_loader, run_evaluation, EvalConfig, EvalOptions, GroundTruthSet, MetricsReport};
use crate::explainer::{explain, export_explanation, ExplainerConfig};
use crate::features::SpecRegistry;
use crate::imaging::Image;
use crate::pipeline::score_image;
use crate::synth::{self, SceneConfig};
use crate::tcs::TcsConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_REGISTRY: i32 = 4;
pub const EXIT_DATASET: i32 = 5;

/// Effective configuration: file values overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    /// `bright-blob[:label]`, `quadrant` or `subprocess:<command>`.
    pub classifier: String,
    /// Probability of relabelling each prediction (synthetic noise); 0 disables.
    pub flip_probability: f64,
    /// Feature registry JSON; the builtin face/hand/legs markers when absent.
    pub registry: Option<PathBuf>,
    pub explainer: ExplainerConfig,
    pub tcs: TcsConfig,
    pub eval: EvalOptions,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classifier: "bright-blob:person".into(),
            flip_probability: 0.0,
            registry: None,
            explainer: ExplainerConfig::default(),
            tcs: TcsConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl CliConfig {
    /// Reads a `.toml` or `.json` config file.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn explainer(&self) -> ExplainerConfig {
        let mut e = self.explainer.clone();
        e.mutation.seed = self.seed;
        e
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            explainer: self.explainer(),
            tcs: self.tcs.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tcs", version, about = "Trustworthiness scoring for black-box image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// Config file (TOML, or JSON with a .json extension).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier descriptor, e.g. `bright-blob:person`, `quadrant`, `subprocess:<cmd>`.
    #[arg(long)]
    pub classifier: Option<String>,
    /// Feature registry JSON file.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Minimum feature coverage percentage.
    #[arg(long)]
    pub r_lim: Option<f64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Explain each prediction on an image; writes mask PNGs and JSON sidecars.
    Explain {
        image: PathBuf,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the TCS breakdown of every prediction on an image.
    Score {
        image: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate TCS against ground truth over a dataset and sweep thresholds.
    #[command(alias = "sweep")]
    Evaluate {
        dataset: PathBuf,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
        /// Comma-separated thresholds, e.g. `0,10,20`.
        #[arg(long, value_delimiter = ',')]
        tau_grid: Option<Vec<f64>>,
        /// Also score with the first 1, 2, … registered specifications.
        #[arg(long)]
        incremental_features: bool,
        #[arg(long)]
        iou_min: Option<f64>,
        #[arg(long)]
        min_box_area: Option<i64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic marker-scene dataset with its registry.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `perfect` or `under-represented`.
        #[arg(long, default_value = "perfect")]
        preset: String,
    },
    /// Print the default configuration as TOML.
    Config,
}

/// An error paired with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_backend() => EXIT_BACKEND,
        Error::Io { .. } | Error::Codec(_) | Error::InvalidImage(_) => EXIT_IO,
        Error::InvalidRegistry(_) | Error::DuplicateId(_) | Error::UnknownSpec(_) => EXIT_REGISTRY,
        Error::InvalidDataset(_) | Error::EvaluationAborted { .. } => EXIT_DATASET,
        _ => EXIT_USAGE,
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

fn with_code(code: i32) -> impl FnOnce(Error) -> Failure {
    move |error| Failure {
        code: if error.is_backend() { EXIT_BACKEND } else { code },
        error,
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn resolve(common: &CommonArgs) -> CliResult<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::from(e),
            other => with_code(EXIT_USAGE)(other),
        })?,
        None => CliConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = &common.classifier {
        cfg.classifier = c.clone();
    }
    if let Some(r) = &common.registry {
        cfg.registry = Some(r.clone());
    }
    if let Some(r) = common.r_lim {
        cfg.tcs.r_lim = r;
    }
    if common.jobs.is_some() {
        cfg.eval.jobs = common.jobs;
    }
    Ok(cfg)
}

fn classifier(cfg: &CliConfig) -> CliResult<ClassifierHandle> {
    let h = ClassifierHandle::from_descriptor(&cfg.classifier)?;
    Ok(if cfg.flip_probability > 0.0 {
        h.with_noise(cfg.flip_probability, cfg.seed)
    } else {
        h
    })
}

fn registry(cfg: &CliConfig) -> CliResult<SpecRegistry> {
    match &cfg.registry {
        Some(p) => SpecRegistry::load(p).map_err(with_code(EXIT_REGISTRY)),
        None => Ok(synth::marker_registry()),
    }
}

fn open_image(path: &Path) -> CliResult<Image> {
    Image::open(path).map_err(with_code(EXIT_IO))
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e).into())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn cmd_explain(image: &Path, out_dir: &Path, cfg: &CliConfig, out: &mut dyn Write) -> CliResult<()> {
    let img = open_image(image)?;
    let h = classifier(cfg)?;
    let explainer = cfg.explainer();
    let preds = h.classify(&img)?;
    create_dir(out_dir)?;
    let mut entries = Vec::new();
    for (k, y) in preds.iter().enumerate() {
        let e = explain(&h, &img, y, &explainer)?;
        let mask = out_dir.join(format!("{}.mask-{k}.png", img.id()));
        let sidecar = out_dir.join(format!("{}.explanation-{k}.json", img.id()));
        export_explanation(&mask, &sidecar, img.id(), y, &e, cfg)?;
        entries.push(serde_json::json!({
            "label": y.label,
            "confidence": y.confidence,
            "mask": mask,
            "sidecar": sidecar,
            "pixels_used": e.pixels_used,
            "converged": e.converged,
            "achieved_confidence": e.achieved_confidence,
            "mutant_evaluations": e.mutant_evaluations,
        }));
    }
    print_json(
        out,
        &serde_json::json!({
            "image_id": img.id(),
            "seed": cfg.seed,
            "config": cfg,
            "explanations": entries,
        }),
    )
}

fn cmd_score(image: &Path, cfg: &CliConfig, out: &mut dyn Write) -> CliResult<()> {
    let img = open_image(image)?;
    let reg = registry(cfg)?;
    let h = classifier(cfg)?;
    let score = score_image(&h, &reg, &img, None, &cfg.explainer(), &cfg.tcs)?;
    print_json(
        out,
        &serde_json::json!({
            "image_id": score.image_id,
            "seed": cfg.seed,
            "config": cfg,
            "detector_failures": score.detector_failures,
            "predictions": score.reports(),
        }),
    )
}

fn csv_preamble(cfg: &CliConfig, report: &MetricsReport, specs: &[String]) -> Vec<String> {
    vec![
        format!("dataset: {}", report.dataset),
        format!("seed: {}", cfg.seed),
        format!("specs: {}", specs.join(",")),
        format!("config: {}", serde_json::to_string(cfg).expect("config serializes")),
    ]
}

fn cmd_evaluate(dataset_path: &Path, out_dir: &Path, cfg: &CliConfig, out: &mut dyn Write) -> CliResult<()> {
    let dataset = GroundTruthSet::load(dataset_path)?;
    let reg = registry(cfg)?;
    let h = classifier(cfg)?;
    let root = dataset_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let report = run_evaluation(&dataset, file_loader(root), &h, &reg, &cfg.eval_config(), cfg.seed)?;

    create_dir(out_dir)?;
    let json_path = out_dir.join("report.json");
    let mut full = serde_json::to_value(&report).map_err(Error::from)?;
    full["cli_config"] = serde_json::to_value(cfg).map_err(Error::from)?;
    write_file(&json_path, &(serde_json::to_string_pretty(&full).map_err(Error::from)? + "\n"))?;

    let mut csvs = Vec::new();
    let last = report.sections.len() - 1;
    for (i, section) in report.sections.iter().enumerate() {
        let name = if i == last {
            "report.csv".to_owned()
        } else {
            format!("report.specs-{}.csv", section.specs.len())
        };
        let path = out_dir.join(name);
        write_file(&path, &section.to_csv(&csv_preamble(cfg, &report, &section.specs)))?;
        csvs.push(path);
    }
    print_json(
        out,
        &serde_json::json!({
            "dataset": report.dataset,
            "seed": cfg.seed,
            "images_evaluated": report.images_evaluated,
            "images_failed": report.images_failed,
            "report": json_path,
            "csv": csvs,
            "sections": report.sections,
        }),
    )
}

fn cmd_synth(out_dir: &Path, count: usize, seed: u64, preset: &str, out: &mut dyn Write) -> CliResult<()> {
    let cfg = match preset {
        "perfect" => SceneConfig::perfect_monitor(count, seed),
        "under-represented" => SceneConfig::under_represented(count, seed),
        other => return Err(Error::InvalidConfig(format!("unknown preset `{other}`")).into()),
    };
    let corpus = synth::generate(&cfg)?;
    corpus.write(out_dir)?;
    print_json(
        out,
        &serde_json::json!({
            "dataset": out_dir.join("dataset.json"),
            "registry": out_dir.join("specs.json"),
            "images": corpus.images.len(),
            "annotations": corpus.dataset.annotations.len(),
            "scene": cfg,
        }),
    )
}

/// Runs one parsed invocation, writing its JSON output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Explain { image, out: dir, common } => cmd_explain(&image, &dir, &resolve(&common)?, out),
        Command::Score { image, common } => cmd_score(&image, &resolve(&common)?, out),
        Command::Evaluate {
            dataset,
            out: dir,
            tau_grid,
            incremental_features,
            iou_min,
            min_box_area,
            common,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(grid) = tau_grid {
                cfg.eval.tau_grid = grid;
            }
            if incremental_features {
                cfg.eval.incremental_features = true;
            }
            if let Some(v) = iou_min {
                cfg.eval.iou_min = v;
            }
            if let Some(v) = min_box_area {
                cfg.eval.min_box_area = v;
            }
            cmd_evaluate(&dataset, &dir, &cfg, out)
        }
        Command::Synth {
            out: dir,
            count,
            seed,
            preset,
        } => cmd_synth(&dir, count, seed, &preset, out),
        Command::Config => {
            write!(out, "{}", CliConfig::default().to_toml()).map_err(|e| Error::io("<stdout>", e).into())
        }
    }
}

/// Entry point of the `tcs` binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
