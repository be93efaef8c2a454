//! Command-line front end. Settings come from a flat `section.key = value`
//! file (path from `--config` or `DVPNET_CONFIG`), then `--set` overrides,
//! then subcommand flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use crate::codec::{Codec, ScaleMask};
use crate::eval::{
    ablate_s, ablate_scales, ablation_csv, bench_latency, center_baseline, coverage_curve,
    default_thresholds, evaluate, records_csv, save_overlay, AblationBudget, EvalError,
    REPORT_THRESHOLDS,
};
use crate::geometry::Point2;
use crate::image::RgbImage;
use crate::loss::{grad_check_loss, LossWeights};
use crate::model::{load_checkpoint, DvpNet, ModelConfig};
use crate::nn::gradcheck::{op_suite, GRAD_TOLERANCE};
use crate::nn::LineErrMode;
use crate::synth::{build_dataset, AnnotatedScene, SceneConfig};
use crate::trainer::{load_dataset_with_workers, TrainConfig, Trainer};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DVPNET_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Optional λ_l; `None` means `2.5 / S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub lambda_coord: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
    pub lambda_l: Option<f64>,
    pub line_mode: LineErrMode,
}

impl Default for LossSettings {
    fn default() -> Self {
        let w = LossWeights::for_slices(2);
        Self {
            lambda_coord: w.lambda_coord,
            lambda_conf_pos: w.lambda_conf_pos,
            lambda_conf_neg: w.lambda_conf_neg,
            lambda_l: None,
            line_mode: w.line_mode,
        }
    }
}

impl LossSettings {
    pub fn weights(&self, slices: usize) -> LossWeights {
        let mut w = LossWeights::for_slices(slices);
        w.lambda_coord = self.lambda_coord;
        w.lambda_conf_pos = self.lambda_conf_pos;
        w.lambda_conf_neg = self.lambda_conf_neg;
        w.line_mode = self.line_mode;
        if let Some(l) = self.lambda_l {
            w.lambda_l = l;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub warmup: usize,
    pub reps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            warmup: 20,
            reps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub count: usize,
    pub split_ratio: f64,
    pub workers: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            count: 2200,
            split_ratio: 0.8,
            workers: 1,
        }
    }
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSettings,
    pub eval: EvalSettings,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            model: ModelConfig::desk(128, 0.25, 7),
            train: TrainConfig::default(),
            loss: LossSettings::default(),
            eval: EvalSettings::default(),
            data: DataSettings::default(),
        }
    }
}

/// `(key, description)` for every config key, in help order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("scene.image_size", "side of generated images, px"),
    ("scene.vp_margin", "vp inset from the border, fraction of the side"),
    ("scene.min_line_angle_sep", "minimum angle between main lines, degrees"),
    ("scene.distractors_min", "fewest distractor segments"),
    ("scene.distractors_max", "most distractor segments"),
    ("scene.noise_sigma", "pixel noise standard deviation"),
    ("scene.seed", "generator seed"),
    ("model.input_size", "network input side, px, multiple of 32, at least 96"),
    ("model.width", "channel width multiplier"),
    ("model.S", "points per predicted line"),
    ("model.fusion", "fuse coarser head features into finer heads"),
    ("model.init_seed", "weight initialization seed"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "scenes per step"),
    ("train.lr_backbone", "backbone learning rate"),
    ("train.lr_head", "head learning rate"),
    ("train.lr_decay_factor", "learning rate divisor per decay"),
    ("train.lr_decay_every", "epochs between decays"),
    ("train.momentum", "SGD momentum"),
    ("train.seed", "shuffle and augmentation seed"),
    ("train.augmentation", "random flips and rotations"),
    ("train.flip_prob", "horizontal flip probability"),
    ("train.max_rot_deg", "largest rotation, degrees"),
    ("train.checkpoint_every", "epochs between checkpoints, 0 = final only"),
    ("loss.lambda_coord", "vp coordinate weight"),
    ("loss.lambda_conf_pos", "confidence weight of positive cells"),
    ("loss.lambda_conf_neg", "confidence weight of negative cells"),
    ("loss.lambda_l", "line weight, auto = 2.5/S"),
    ("loss.line_mode", "per-point line error: euclidean, squared or l1"),
    ("eval.warmup", "benchmark warmup passes"),
    ("eval.reps", "benchmark timed passes"),
    ("data.count", "scenes generated by synth"),
    ("data.split_ratio", "training fraction of generated scenes"),
    ("data.workers", "threads used to load images"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let (s, m, t, l, e, d) = (&self.scene, &self.model, &self.train, &self.loss, &self.eval, &self.data);
        Some(match key {
            "scene.image_size" => s.image_size.to_string(),
            "scene.vp_margin" => s.vp_margin.to_string(),
            "scene.min_line_angle_sep" => s.min_line_angle_sep.to_string(),
            "scene.distractors_min" => s.distractors.0.to_string(),
            "scene.distractors_max" => s.distractors.1.to_string(),
            "scene.noise_sigma" => s.noise_sigma.to_string(),
            "scene.seed" => s.seed.to_string(),
            "model.input_size" => m.input_size.to_string(),
            "model.width" => m.width_multiplier.to_string(),
            "model.S" => m.slices.to_string(),
            "model.fusion" => m.fusion.to_string(),
            "model.init_seed" => m.init_seed.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr_backbone" => t.lr_backbone.to_string(),
            "train.lr_head" => t.lr_head.to_string(),
            "train.lr_decay_factor" => t.lr_decay_factor.to_string(),
            "train.lr_decay_every" => t.lr_decay_every.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.augmentation" => t.augmentation.to_string(),
            "train.flip_prob" => t.flip_prob.to_string(),
            "train.max_rot_deg" => t.max_rot_deg.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "loss.lambda_coord" => l.lambda_coord.to_string(),
            "loss.lambda_conf_pos" => l.lambda_conf_pos.to_string(),
            "loss.lambda_conf_neg" => l.lambda_conf_neg.to_string(),
            "loss.lambda_l" => l.lambda_l.map_or("auto".into(), |v| v.to_string()),
            "loss.line_mode" => l.line_mode.to_string(),
            "eval.warmup" => e.warmup.to_string(),
            "eval.reps" => e.reps.to_string(),
            "data.count" => d.count.to_string(),
            "data.split_ratio" => d.split_ratio.to_string(),
            "data.workers" => d.workers.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value;
        match key {
            "scene.image_size" => self.scene.image_size = parse(key, v)?,
            "scene.vp_margin" => self.scene.vp_margin = parse(key, v)?,
            "scene.min_line_angle_sep" => self.scene.min_line_angle_sep = parse(key, v)?,
            "scene.distractors_min" => self.scene.distractors.0 = parse(key, v)?,
            "scene.distractors_max" => self.scene.distractors.1 = parse(key, v)?,
            "scene.noise_sigma" => self.scene.noise_sigma = parse(key, v)?,
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "model.input_size" => self.model.input_size = parse(key, v)?,
            "model.width" => self.model.width_multiplier = parse(key, v)?,
            "model.S" => self.model.slices = parse(key, v)?,
            "model.fusion" => self.model.fusion = parse(key, v)?,
            "model.init_seed" => self.model.init_seed = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr_backbone" => self.train.lr_backbone = parse(key, v)?,
            "train.lr_head" => self.train.lr_head = parse(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse(key, v)?,
            "train.lr_decay_every" => self.train.lr_decay_every = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.augmentation" => self.train.augmentation = parse(key, v)?,
            "train.flip_prob" => self.train.flip_prob = parse(key, v)?,
            "train.max_rot_deg" => self.train.max_rot_deg = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "loss.lambda_coord" => self.loss.lambda_coord = parse(key, v)?,
            "loss.lambda_conf_pos" => self.loss.lambda_conf_pos = parse(key, v)?,
            "loss.lambda_conf_neg" => self.loss.lambda_conf_neg = parse(key, v)?,
            "loss.lambda_l" => {
                self.loss.lambda_l = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "loss.line_mode" => self.loss.line_mode = parse(key, v)?,
            "eval.warmup" => self.eval.warmup = parse(key, v)?,
            "eval.reps" => self.eval.reps = parse(key, v)?,
            "data.count" => self.data.count = parse(key, v)?,
            "data.split_ratio" => self.data.split_ratio = parse(key, v)?,
            "data.workers" => self.data.workers = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                CliError::Usage(m) => CliError::Usage(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in CONFIG_KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("listed key")).unwrap();
        }
        out
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.weights(self.model.slices)
    }
}

/// Help text listing every key with its default.
pub fn config_help() -> String {
    let d = RunConfig::default();
    let mut out = format!(
        "Config keys (file lines `key = value`, or --set key=value; default file from ${CONFIG_ENV}):\n"
    );
    for (k, desc) in CONFIG_KEYS {
        writeln!(out, "  {k:<26} {:<10} {desc}", d.get(k).expect("listed key")).unwrap();
    }
    out.push_str("\nExit codes: 0 success, 1 usage error, 2 runtime error.");
    out
}

#[derive(Debug, Parser)]
#[command(name = "dvpnet", version, about = "Dominant vanishing point detection: data, training, evaluation")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Detect the vanishing point in one image.
    Infer(InferArgs),
    /// Time single-image inference.
    Bench(BenchArgs),
    /// Finite-difference verification of every op and the full loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per slice count.
    #[command(name = "ablate-s")]
    AblateS(AblateSArgs),
    /// Train and evaluate one model per scale subset.
    #[command(name = "ablate-scales")]
    AblateScales(AblateScalesArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes; overrides data.count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Overrides scene.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory holding `train.jsonl` and `test.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides data.workers.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Write `records.csv` and `coverage.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PNG input; resized to the model input, results reported in its pixels.
    #[arg(long)]
    pub image: PathBuf,
    /// Overlay path; defaults to `<image>_overlay.png`.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly built model from the config otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides eval.warmup.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Overrides eval.reps.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random draws per op.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct AblateSArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated slice counts.
    #[arg(long = "values", value_delimiter = ',', default_values_t = vec![3, 7, 11])]
    pub s: Vec<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output path; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateScalesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Semicolon-separated subsets of {1,2,3}, 1 = coarsest grid.
    #[arg(long, default_value = "1;1,2;1,2,3")]
    pub subsets: String,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output path; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_subsets(text: &str) -> Result<Vec<Vec<usize>>, CliError> {
    text.split(';')
        .map(|part| {
            part.split(',')
                .map(|v| parse::<usize>("--subsets", v.trim()))
                .collect()
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(path) = path {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        config.apply_text(&text, &path.display().to_string())?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn load_split(data: &DataArgs, split: &str, workers: usize) -> Result<Vec<AnnotatedScene>, CliError> {
    load_dataset_with_workers(&data.data.join(format!("{split}.jsonl")), workers).map_err(CliError::runtime)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn coverage_table(rows: &[(&str, &[f64])]) -> Result<String, EvalError> {
    let mut out = String::from("model");
    for t in REPORT_THRESHOLDS {
        write!(out, ",cov_ce_le_{t}").unwrap();
    }
    out.push('\n');
    for (name, ces) in rows {
        out.push_str(name);
        for c in coverage_curve(ces, &REPORT_THRESHOLDS)?.coverage {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    let mut say = |s: &str| -> Result<(), CliError> { out.write_all(s.as_bytes()).map_err(CliError::runtime) };
    match cli.command {
        Command::Synth(a) => {
            if let Some(seed) = a.seed {
                config.scene.seed = seed;
            }
            let count = a.count.unwrap_or(config.data.count);
            let m = build_dataset(&config.scene, count, config.data.split_ratio, &a.out)
                .map_err(CliError::runtime)?;
            say(&format!(
                "wrote {} train and {} test scenes to {}\n",
                m.train_count,
                m.test_count,
                m.root.display()
            ))?;
        }
        Command::Train(a) => {
            if let Some(seed) = a.seed {
                config.train.seed = seed;
            }
            let workers = a.data.workers.unwrap_or(config.data.workers);
            let train = load_split(&a.data, "train", workers)?;
            let trainer = match &a.resume {
                Some(p) => Trainer::<f32>::resume(p, config.train.clone()),
                None => {
                    let net = DvpNet::build(&config.model).map_err(CliError::runtime)?;
                    Trainer::new(net, config.train.clone())
                }
            }
            .map_err(CliError::runtime)?;
            let slices = trainer.net().config().slices;
            let mut trainer = trainer.with_weights(config.loss.weights(slices)).with_output(&a.out);
            write_file(&a.out.join("config.txt"), &config.to_text())?;
            trainer.run(&train).map_err(CliError::runtime)?;
            let last = trainer.log().last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            say(&format!(
                "trained {} epochs, final step loss {last}; checkpoint {}\n",
                trainer.epoch(),
                a.out.join("final.ckpt").display()
            ))?;
        }
        Command::Eval(a) => {
            let (net, _) = load_checkpoint::<f32>(&a.model).map_err(CliError::runtime)?;
            let workers = a.data.workers.unwrap_or(config.data.workers);
            let test = load_split(&a.data, "test", workers)?;
            let codec = Codec::for_model(net.config());
            let records = evaluate(&net, &codec, &test).map_err(CliError::runtime)?;
            let ces: Vec<f64> = records.iter().map(|r| r.ce).collect();
            let base = center_baseline(&test).map_err(CliError::runtime)?;
            let table = coverage_table(&[("model", &ces), ("center", &base)]).map_err(CliError::runtime)?;
            say(&table)?;
            if let Some(dir) = &a.out {
                write_file(&dir.join("records.csv"), &records_csv(&records))?;
                let curve = coverage_curve(&ces, &default_thresholds()).map_err(CliError::runtime)?;
                write_file(&dir.join("coverage.csv"), &curve.to_csv())?;
                write_file(&dir.join("summary.csv"), &table)?;
            }
        }
        Command::Infer(a) => {
            let (net, _) = load_checkpoint::<f32>(&a.model).map_err(CliError::runtime)?;
            let image = RgbImage::load_png(&a.image).map_err(CliError::runtime)?;
            let size = net.config().input_size;
            let input = image.resized(size, size);
            let preds = net
                .predict(&crate::trainer::batch_tensor([&input], size))
                .map_err(CliError::runtime)?;
            let codec = Codec::for_model(net.config());
            let mut det = codec.decode(&preds, 0).map_err(CliError::runtime)?;
            let (sx, sy) = (
                image.width() as f64 / size as f64,
                image.height() as f64 / size as f64,
            );
            let rescale = |p: Point2| Point2::new(p.x * sx, p.y * sy);
            det.vp = rescale(det.vp);
            let map = |pl: &crate::geometry::Polyline| {
                crate::geometry::Polyline::new(pl.points().iter().map(|&p| rescale(p)).collect())
                    .expect("nonempty polyline")
            };
            det.left = map(&det.left);
            det.right = map(&det.right);
            let overlay = a.overlay.clone().unwrap_or_else(|| {
                let stem = a.image.file_stem().unwrap_or_default().to_string_lossy();
                a.image.with_file_name(format!("{stem}_overlay.png"))
            });
            save_overlay(&overlay, &image, &det, None).map_err(CliError::runtime)?;
            say(&format!("{} {} {}\n", det.vp.x, det.vp.y, det.confidence))?;
        }
        Command::Bench(a) => {
            let net = match &a.model {
                Some(p) => load_checkpoint::<f32>(p).map_err(CliError::runtime)?.0,
                None => DvpNet::<f32>::build(&config.model).map_err(CliError::runtime)?,
            };
            let report = bench_latency(
                &net,
                a.warmup.unwrap_or(config.eval.warmup),
                a.reps.unwrap_or(config.eval.reps),
            )
            .map_err(CliError::runtime)?;
            say(&report.to_csv())?;
        }
        Command::Gradcheck(a) => {
            let mut worst: f64 = 0.0;
            let mut table = String::from("check,seed,max_rel_err,pass\n");
            for c in op_suite(a.seeds).map_err(CliError::runtime)? {
                worst = worst.max(c.max_rel_err);
                writeln!(table, "{},{},{:e},{}", c.name, c.seed, c.max_rel_err, c.max_rel_err <= GRAD_TOLERANCE).unwrap();
            }
            let e = grad_check_loss(&ModelConfig::micro(), 0).map_err(CliError::runtime)?;
            worst = worst.max(e);
            writeln!(table, "total_loss,0,{e:e},{}", e <= GRAD_TOLERANCE).unwrap();
            say(&table)?;
            if !(worst <= GRAD_TOLERANCE) {
                return Err(CliError::Runtime(format!(
                    "gradient check failed: max relative error {worst:e} above {GRAD_TOLERANCE:e}"
                )));
            }
        }
        Command::AblateS(a) => {
            if let Some(seed) = a.seed {
                config.train.seed = seed;
            }
            let workers = a.data.workers.unwrap_or(config.data.workers);
            let (train, test) = (load_split(&a.data, "train", workers)?, load_split(&a.data, "test", workers)?);
            let budget = AblationBudget {
                train: &train,
                test: &test,
                train_config: config.train.clone(),
            };
            let rows = ablate_s(&config.model, &a.s, &budget).map_err(CliError::runtime)?;
            let csv = ablation_csv(&rows);
            say(&csv)?;
            if let Some(p) = &a.out {
                write_file(p, &csv)?;
            }
        }
        Command::AblateScales(a) => {
            if let Some(seed) = a.seed {
                config.train.seed = seed;
            }
            let subsets = parse_subsets(&a.subsets)?;
            for s in &subsets {
                ScaleMask::from_scales(s).map_err(|e| CliError::Usage(format!("--subsets: {e}")))?;
            }
            let workers = a.data.workers.unwrap_or(config.data.workers);
            let (train, test) = (load_split(&a.data, "train", workers)?, load_split(&a.data, "test", workers)?);
            let budget = AblationBudget {
                train: &train,
                test: &test,
                train_config: config.train.clone(),
            };
            let rows = ablate_scales(&config.model, &subsets, &budget).map_err(CliError::runtime)?;
            let csv = ablation_csv(&rows);
            say(&csv)?;
            if let Some(p) = &a.out {
                write_file(p, &csv)?;
            }
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, and return the exit code.
/// Normal output goes to `out`, diagnostics to stderr.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn std::io::Write) -> i32 {
    let args: Vec<String> = args.into_iter().collect();
    let mut command = Cli::command().after_long_help(config_help());
    let matches = match command.clone().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return EXIT_OK;
            }
            let _ = e.print();
            let sub = args
                .iter()
                .skip(1)
                .find_map(|a| command.find_subcommand_mut(a).map(|c| c.render_help()));
            if let Some(help) = sub {
                eprintln!("\n{help}");
            }
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nSee `dvpnet --help` for config keys.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
