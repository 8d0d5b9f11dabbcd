//! Command-line grammar and its resolution into an [`Invocation`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepcut_core::objectives::NcutSign;
use deepcut_core::pipeline::{self, BoxMode, Composition, LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{Invocation, SynthSpec};

pub const SEED_ENV: &str = "DEEPCUT_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "deepcut",
    version,
    about = "Unsupervised segmentation by test-time graph-neural-network clustering of patch features"
)]
pub struct Cli {
    /// Write the run manifest to this path (default: <out-dir>/manifest.json, else stderr).
    #[arg(long, global = true)]
    pub manifest_out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cluster the patches of each image into a label mask.
    Segment(SegmentArgs),
    /// Foreground/background split followed by part clustering of the foreground.
    TwoStage(TwoStageArgs),
    /// Bounding box of the main object in each image.
    Localize(LocalizeArgs),
    /// Part segmentation over an ordered image list with one persistent model.
    Parts(PartsArgs),
    /// Correlation clustering of items without a fixed cluster count.
    Cluster(ClusterArgs),
    /// Write a planted synthetic feature field.
    Synth(SynthArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Validate DCUT feature files.
    ExtractCheck(ExtractCheckArgs),
    /// Re-run a manifest and verify that inputs and outputs are byte-identical.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Default)]
pub struct InputArgs {
    /// DCUT feature file, "-" for stdin (repeatable).
    #[arg(long)]
    pub features: Vec<PathBuf>,
    /// Text file with one DCUT path per line; relative paths resolve against its directory.
    #[arg(long, conflicts_with = "features")]
    pub features_list: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// Directory for masks, per-image JSON and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for per-image jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ncut,
    Cc,
}

impl From<LossArg> for LossKind {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Ncut => LossKind::NCut,
            LossArg::Cc => LossKind::Cc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NcutSignArg {
    Default,
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BoxArg {
    Largest,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompositionArg {
    TwoStage,
    Direct,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Cluster count for the N-cut loss.
    #[arg(long)]
    pub k: Option<usize>,
    /// Assignment width for the correlation-clustering loss.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Cluster-count sensitivity, at least 1; "inf" removes the shift.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Optimizer steps per image.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// GCN width (the MLP hidden layer is half of it).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Overridden by the DEEPCUT_SEED environment variable when set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub ncut_sign: Option<NcutSignArg>,
    /// L2-normalize patch features before building the graph.
    #[arg(long)]
    pub normalize_features: bool,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Segment the foreground again into --k-fg parts.
    #[arg(long)]
    pub two_stage: bool,
    #[arg(long)]
    pub k_fg: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TwoStageArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = pipeline::DEFAULT_K_FG)]
    pub k_fg: usize,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long = "box", value_enum, default_value = "largest")]
    pub box_mode: BoxArg,
}

#[derive(Args, Debug)]
pub struct PartsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value = "two-stage")]
    pub composition: CompositionArg,
    /// Foreground parts per image (two-stage composition).
    #[arg(long, default_value_t = pipeline::DEFAULT_K_FG)]
    pub k_fg: usize,
    /// Steps of the per-image foreground split (two-stage composition).
    #[arg(long, default_value_t = pipeline::DEFAULT_EPOCHS)]
    pub stage1_epochs: usize,
    /// Start every image from fresh weights.
    #[arg(long)]
    pub reset_weights: bool,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Rectangular regions, one per cluster.
    Blocks,
    /// One off-center rectangular object on background.
    Object,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "blocks")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 16)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_w: usize,
    /// Number of planted regions (blocks).
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Standard deviation of the Gaussian feature noise.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// DCUT destination (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth patch labels as JSON.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
    /// Ground truth upsampled to pixels as PGM.
    #[arg(long)]
    pub truth_pgm: Option<PathBuf>,
    /// Ground-truth pixel box as a JSON line (object fields only).
    #[arg(long)]
    pub truth_boxes: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Box JSON lines matched by id.
    Corloc,
    /// Binary PGM masks matched by position.
    Miou,
    /// JSON files with a "labels" array.
    Clustering,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractCheckArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Fail unless every file has this embedding width.
    #[arg(long)]
    pub expect_embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// What a parsed command line asks for.
#[derive(Debug)]
pub enum Request {
    Run(Invocation),
    Replay(PathBuf),
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    Ok(seed_override()?.or(flag).unwrap_or(0))
}

/// Builds a validated [`TrainConfig`] from the flags and command defaults.
pub fn resolve_train(
    args: &TrainArgs,
    default_loss: LossKind,
    default_epochs: usize,
) -> Result<TrainConfig, CliError> {
    let loss = args.loss.map_or(default_loss, LossKind::from);
    if loss == LossKind::Cc && args.k.is_some() {
        if args.k_max.is_none() {
            return Err(usage(
                "--k sets the N-cut cluster count; with --loss cc use --k-max",
            ));
        }
        log::warn!("--k is ignored with --loss cc");
    }
    let mut cfg = TrainConfig {
        loss,
        epochs: default_epochs,
        seed: resolve_seed(args.seed)?,
        ..TrainConfig::default()
    };
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(k_max) = args.k_max {
        cfg.k_max = k_max;
    }
    if let Some(alpha) = args.alpha {
        cfg.affinity.alpha = alpha;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(hidden) = args.hidden {
        cfg.hidden = hidden;
    }
    if let Some(lr) = args.lr {
        cfg.adam.lr = lr;
    }
    if let Some(sign) = args.ncut_sign {
        cfg.ncut_sign = match sign {
            NcutSignArg::Default => NcutSign::Default,
            NcutSignArg::Literal => NcutSign::Literal,
        };
    }
    cfg.affinity.normalize_features = args.normalize_features;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn read_list(list: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(list).map_err(|source| CliError::Io {
        path: list.display().to_string(),
        source,
    })?;
    let base = list.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

fn resolve_inputs(args: &InputArgs) -> Result<Vec<PathBuf>, CliError> {
    let inputs = match &args.features_list {
        Some(list) => read_list(list)?,
        None if args.features.is_empty() => vec![PathBuf::from("-")],
        None => args.features.clone(),
    };
    if inputs.is_empty() {
        return Err(usage("no feature files given"));
    }
    if inputs.iter().filter(|p| p.as_os_str() == "-").count() > 1 {
        return Err(usage("stdin can be read only once"));
    }
    Ok(inputs)
}

fn check_jobs(jobs: usize) -> Result<usize, CliError> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(jobs)
}

fn check_k_fg(k_fg: usize) -> Result<usize, CliError> {
    if k_fg < 2 {
        return Err(usage(format!("--k-fg must be at least 2, got {k_fg}")));
    }
    Ok(k_fg)
}

/// Applies defaults and cross-flag rules; every failure here is a usage error
/// except unreadable list files.
pub fn resolve(command: Command) -> Result<Request, CliError> {
    let inv = match command {
        Command::Segment(a) => {
            let k_fg = match (a.two_stage, a.k_fg) {
                (true, k) => Some(check_k_fg(k.unwrap_or(pipeline::DEFAULT_K_FG))?),
                (false, Some(_)) => return Err(usage("--k-fg requires --two-stage")),
                (false, None) => None,
            };
            let config = resolve_train(&a.train, LossKind::NCut, pipeline::DEFAULT_EPOCHS)?;
            if k_fg.is_some() && config.loss != LossKind::NCut {
                return Err(usage("--two-stage uses the N-cut loss"));
            }
            Invocation::Segment {
                inputs: resolve_inputs(&a.input)?,
                config,
                two_stage: k_fg,
                out_dir: a.output.out_dir,
                jobs: check_jobs(a.output.jobs)?,
            }
        }
        Command::TwoStage(a) => {
            let config = resolve_train(&a.train, LossKind::NCut, pipeline::DEFAULT_EPOCHS)?;
            if config.loss != LossKind::NCut {
                return Err(usage("two-stage segmentation uses the N-cut loss"));
            }
            Invocation::Segment {
                inputs: resolve_inputs(&a.input)?,
                config,
                two_stage: Some(check_k_fg(a.k_fg)?),
                out_dir: a.output.out_dir,
                jobs: check_jobs(a.output.jobs)?,
            }
        }
        Command::Localize(a) => {
            if a.train.loss != Some(LossArg::Cc) && a.train.k.is_some_and(|k| k != 2) {
                return Err(usage("localization splits each image into exactly 2 clusters"));
            }
            Invocation::Localize {
                inputs: resolve_inputs(&a.input)?,
                config: resolve_train(&a.train, LossKind::NCut, pipeline::DEFAULT_EPOCHS)?,
                box_mode: match a.box_mode {
                    BoxArg::Largest => BoxMode::Largest,
                    BoxArg::All => BoxMode::All,
                },
                out_dir: a.output.out_dir,
                jobs: check_jobs(a.output.jobs)?,
            }
        }
        Command::Parts(a) => {
            let mut config = resolve_train(&a.train, LossKind::NCut, pipeline::PART_EPOCHS)?;
            config.reset_weights = a.reset_weights;
            let composition = match a.composition {
                CompositionArg::Direct => Composition::Direct,
                CompositionArg::TwoStage => {
                    if config.loss != LossKind::NCut {
                        return Err(usage("two-stage composition uses the N-cut loss"));
                    }
                    if a.stage1_epochs == 0 {
                        return Err(usage("--stage1-epochs must be at least 1"));
                    }
                    Composition::TwoStage {
                        k_fg: check_k_fg(a.k_fg)?,
                        stage1_epochs: a.stage1_epochs,
                    }
                }
            };
            if a.output.jobs > 1 {
                log::warn!("parts runs images in order; --jobs is ignored");
            }
            Invocation::Parts {
                inputs: resolve_inputs(&a.input)?,
                config,
                composition,
                out_dir: a.output.out_dir,
            }
        }
        Command::Cluster(a) => {
            if a.train.loss == Some(LossArg::Ncut) {
                return Err(usage("cluster uses the correlation-clustering loss; --loss ncut is not supported"));
            }
            Invocation::Cluster {
                inputs: resolve_inputs(&a.input)?,
                config: resolve_train(&a.train, LossKind::Cc, pipeline::DEFAULT_EPOCHS)?,
                out_dir: a.out_dir,
            }
        }
        Command::Synth(a) => {
            if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
                return Err(usage(format!("--sigma must be finite and non-negative, got {}", a.sigma)));
            }
            if a.kind == SynthKind::Blocks && a.truth_boxes.is_some() {
                return Err(usage("--truth-boxes needs --kind object"));
            }
            Invocation::Synth {
                spec: SynthSpec {
                    kind: a.kind,
                    grid_h: a.grid_h,
                    grid_w: a.grid_w,
                    k: a.k,
                    sigma: a.sigma,
                    seed: resolve_seed(a.seed)?,
                    out: a.out,
                    truth_out: a.truth_out,
                    truth_pgm: a.truth_pgm,
                    truth_boxes: a.truth_boxes,
                },
            }
        }
        Command::Eval(a) => {
            if a.metric != Metric::Corloc && a.pred.len() != a.truth.len() {
                return Err(usage(format!(
                    "{} prediction files but {} truth files",
                    a.pred.len(),
                    a.truth.len()
                )));
            }
            Invocation::Eval {
                metric: a.metric,
                pred: a.pred,
                truth: a.truth,
            }
        }
        Command::ExtractCheck(a) => Invocation::ExtractCheck {
            inputs: resolve_inputs(&a.input)?,
            expect_embed_dim: a.expect_embed_dim,
        },
        Command::Replay(a) => return Ok(Request::Replay(a.manifest)),
    };
    Ok(Request::Run(inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(argv: &[&str]) -> Result<Request, CliError> {
        let cli = Cli::try_parse_from(std::iter::once("deepcut").chain(argv.iter().copied()))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        resolve(cli.command)
    }

    fn config_of(req: Request) -> TrainConfig {
        match req {
            Request::Run(Invocation::Segment { config, .. })
            | Request::Run(Invocation::Localize { config, .. })
            | Request::Run(Invocation::Parts { config, .. })
            | Request::Run(Invocation::Cluster { config, .. }) => config,
            other => panic!("no train config in {other:?}"),
        }
    }

    #[test]
    fn segment_defaults() {
        let cfg = config_of(parse(&["segment", "--features", "x.dcut", "--loss", "ncut", "--k", "2"]).unwrap());
        assert_eq!(cfg.loss, LossKind::NCut);
        assert_eq!((cfg.k, cfg.epochs, cfg.hidden, cfg.k_max), (2, 10, 64, 10));
        assert_eq!(cfg.affinity.alpha, 3.0);
        assert_eq!(cfg.adam.lr, 1e-3);
    }

    #[test]
    fn cluster_alpha_and_loss() {
        let cfg = config_of(parse(&["cluster", "--features", "x", "--loss", "cc", "--alpha", "3"]).unwrap());
        assert_eq!(cfg.loss, LossKind::Cc);
        assert_eq!(cfg.affinity.alpha, 3.0);
        let cfg = config_of(parse(&["cluster", "--features", "x", "--alpha", "inf"]).unwrap());
        assert!(cfg.affinity.alpha.is_infinite());
        assert!(matches!(
            parse(&["cluster", "--features", "x", "--loss", "ncut"]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn usage_errors() {
        for argv in [
            &["segment", "--alpha", "0.5"][..],
            &["segment", "--alpha", "NaN"],
            &["segment", "--loss", "cc", "--k", "3"],
            &["segment", "--k", "1"],
            &["segment", "--epochs", "0"],
            &["segment", "--jobs", "0"],
            &["segment", "--k-fg", "3"],
            &["segment", "--bogus"],
            &["localize", "--k", "3"],
            &["two-stage", "--k-fg", "1"],
        ] {
            let err = parse(argv).expect_err(&format!("{argv:?} should fail"));
            assert_eq!(err.exit_code(), 2, "{argv:?}: {err}");
        }
    }

    #[test]
    fn cc_with_k_max_accepts_k() {
        let cfg = config_of(parse(&["segment", "--loss", "cc", "--k", "3", "--k-max", "6"]).unwrap());
        assert_eq!(cfg.k_out(), 6);
    }

    #[test]
    fn parts_defaults_to_long_schedule() {
        let req = parse(&["parts", "--features", "a", "--features", "b"]).unwrap();
        match req {
            Request::Run(Invocation::Parts {
                config, composition, inputs, ..
            }) => {
                assert_eq!(config.epochs, 100);
                assert!(!config.reset_weights);
                assert_eq!(
                    composition,
                    Composition::TwoStage {
                        k_fg: 4,
                        stage1_epochs: 10
                    }
                );
                assert_eq!(inputs.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stdin_is_default_input() {
        match parse(&["segment"]).unwrap() {
            Request::Run(Invocation::Segment { inputs, .. }) => assert_eq!(inputs, vec![PathBuf::from("-")]),
            other => panic!("{other:?}"),
        }
        assert!(parse(&["segment", "--features", "-", "--features", "-"]).is_err());
    }
}
