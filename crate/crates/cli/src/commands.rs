use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use tesr_core::backbones::{ModelKind, ModelSpec, SrModel};
use tesr_core::datapipe::{synth_generate_one, Dataset, SplitRatios, SynthConfig};
use tesr_core::metrics::{evaluate, EvalConfig, ModelPredictor};
use tesr_core::sits::{read_sample, Split, Timestamp, DEFAULT_SLACK_DAYS};
use tesr_core::trainer::{Checkpoint, CsvSink, TrainConfig, Trainer};

use crate::config::resolve;
use crate::output::{write_gray_png, write_json, write_npy, write_png, OutDir};
use crate::report::{ablation_table, mae_boxplot_svg, metrics_table, EvalBundle};
use crate::UsageError;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset with block splits.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split, stratified by time gap.
    Eval(EvalArgs),
    /// Super-resolve one series at a chosen date.
    SuperResolve(SuperResolveArgs),
    /// Plot and tabulate evaluation reports.
    Report(ReportArgs),
    /// Print model specifications and parameter counts.
    Describe(DescribeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.base_channels=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Model kind; shorthand for `--set model.kind=...`.
    #[arg(long)]
    kind: Option<ModelKind>,
    /// Continue from a checkpoint; its config is the base for overrides.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Keep the N frames closest to the reference date; repeatable.
    #[arg(long = "series-length", value_name = "N")]
    series_lengths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the perceptual distance proxy.
    #[arg(long)]
    no_perceptual: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SuperResolveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample directory holding `lr.npy` and `meta.json`.
    #[arg(long)]
    series: PathBuf,
    /// Target date (YYYY-MM-DD or epoch day); the series' own date if unset.
    #[arg(long)]
    at_date: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// `report.json` files written by `eval`.
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    /// Describe one kind; all kinds when omitted.
    #[arg(long)]
    kind: Option<ModelKind>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SuperResolve(a) => super_resolve(a),
        Command::Report(a) => report(a),
        Command::Describe(a) => describe(a),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub split: SplitRatios,
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg: DatasetConfig = resolve(&DatasetConfig::default(), args.config.config.as_deref(), &args.config.overrides)?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    let out = OutDir::create(&args.out)?;
    out.write_resolved(&cfg)?;
    let samples = (0..cfg.synth.samples)
        .map(|i| synth_generate_one(&cfg.synth, i).map(|s| s.sample))
        .collect::<tesr_core::Result<Vec<_>>>()?;
    let dataset = Dataset::write(&args.out, &samples, &cfg.split, cfg.synth.seed)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}: {} samples", dataset.manifest.records_in(split).count());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let resumed = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };
    let mut base = resumed.as_ref().map_or_else(TrainConfig::default, |c| c.config.clone());
    if let Some(kind) = args.kind {
        base.model = ModelSpec { kind, ..base.model };
    }
    let mut cfg: TrainConfig = resolve(&base, args.config.config.as_deref(), &args.config.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dataset = Dataset::open(&args.data)?;
    let mut trainer = match resumed {
        Some(mut ckpt) => {
            if ckpt.config.model != cfg.model || ckpt.config.seed != cfg.seed {
                return Err(UsageError("a resumed run cannot change the model or seed".into()).into());
            }
            ckpt.config = cfg.clone();
            Trainer::resume(ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let normalize = cfg.normalize && dataset.norm.is_some();
    if let (true, Some(norm)) = (normalize, &dataset.norm) {
        trainer.set_norm(norm.clone());
    }
    let train_set = dataset.load_prepared(Split::Train, normalize)?;
    let val_set = dataset.load_prepared(Split::Val, normalize)?;
    let out = OutDir::create(&args.out)?;
    out.write_resolved(&cfg)?;
    let log_path = out.reports().join("train_log.csv");
    let log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut sink = CsvSink::new(std::io::BufWriter::new(log));
    let result = trainer.run_until(cfg.steps, &train_set, &val_set, &mut sink);
    drop(sink);
    match result {
        Ok(()) => {
            let path = out.checkpoints().join("final.ckpt");
            trainer.checkpoint().save(&path)?;
            println!("trained {} for {} steps -> {}", cfg.model.kind, trainer.step(), path.display());
            Ok(())
        }
        Err(e) => {
            let path = out.checkpoints().join("last_finite.ckpt");
            trainer.checkpoint().save(&path)?;
            eprintln!("saved last finite state (step {}) to {}", trainer.step(), path.display());
            Err(e.into())
        }
    }
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let dataset = Dataset::open(&args.data)?;
    let raw = dataset.load(args.split.into())?;
    let samples = match &ckpt.norm {
        Some(norm) => raw.iter().map(|s| norm.apply(s)).collect::<tesr_core::Result<Vec<_>>>()?,
        None => raw,
    };
    let lengths = if args.series_lengths.is_empty() {
        vec![ckpt.config.series_length]
    } else {
        args.series_lengths.clone()
    };
    if lengths.contains(&0) {
        return Err(UsageError("series length must be at least 1".into()).into());
    }
    let cfg = EvalConfig {
        perceptual: !args.no_perceptual,
        ..EvalConfig::default()
    };
    let out = OutDir::create(&args.out)?;
    out.write_resolved(&args)?;
    let runs = lengths
        .iter()
        .map(|&n| {
            let predictor = ModelPredictor {
                model: &model,
                series_length: Some(n),
                seed: args.seed,
            };
            evaluate(&predictor, &samples, &cfg, Some(n))
        })
        .collect::<tesr_core::Result<Vec<_>>>()?;
    for r in &runs {
        if let Some(m) = r.mean {
            println!(
                "{} N={}: MAE {:.3} sMAE {:.3} PSNR {:.2} SSIM {:.4}",
                r.model,
                r.series_length.unwrap_or(0),
                m.mae,
                m.shift_mae,
                m.psnr,
                m.ssim
            );
        }
    }
    let bundle = EvalBundle { runs };
    write_json(&out.reports().join("report.json"), &bundle)?;
    fs::write(out.reports().join("metrics.csv"), metrics_table(&bundle.runs))?;
    Ok(())
}

fn super_resolve(args: SuperResolveArgs) -> anyhow::Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if !args.series.join("meta.json").is_file() {
        return Err(UsageError(format!("{} is not a sample directory", args.series.display())).into());
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let series = read_sample(&args.series)?.lr_series;
    let range = series.value_range();
    let t_ref = match &args.at_date {
        Some(text) => Timestamp::parse(text)?,
        None => series.t_ref(),
    };
    if !series.admits_reference(t_ref, DEFAULT_SLACK_DAYS) {
        let (lo, hi) = series.span();
        return Err(UsageError(format!(
            "date {t_ref:?} lies outside the series span {lo:?}..{hi:?} widened by {DEFAULT_SLACK_DAYS} days"
        ))
        .into());
    }
    if model.spec().kind.is_sisr() && series.len() > 1 {
        return Err(UsageError(format!(
            "{} is single-image; the series has {} frames",
            model.spec().kind,
            series.len()
        ))
        .into());
    }
    let mut series = series.with_t_ref(t_ref);
    if let Some(norm) = &ckpt.norm {
        series = norm.apply_series(&series)?;
    }
    let (sr, maps) = if model.spec().kind.is_diffusion() {
        (model.super_resolve_seeded(&series, args.seed)?, None)
    } else {
        model.super_resolve_with_attention(&series)?
    };
    let sr = match &ckpt.norm {
        Some(norm) => norm.denormalize_hr(&sr, range)?,
        None => sr,
    };
    let out = OutDir::create(&args.out)?;
    out.write_resolved(&args)?;
    write_npy(&out.reports().join("sr.npy"), sr.data())?;
    write_png(&out.figures().join("sr.png"), &sr)?;
    if let Some(maps) = maps {
        let arr = Array4::from_shape_vec((maps.heads, maps.frames, maps.height, maps.width), maps.weights.clone())?;
        write_npy(&out.reports().join("attention.npy"), &arr)?;
        for h in 0..maps.heads {
            for t in 0..maps.frames {
                let plane: Array2<f32> = arr.slice(ndarray::s![h, t, .., ..]).to_owned();
                write_gray_png(&out.figures().join(format!("attention_h{h}_t{t}.png")), &plane, 1.0)?;
            }
        }
    }
    println!("super-resolved at day {} -> {}", t_ref.epoch_day(), out.root.display());
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let mut runs = Vec::new();
    for path in &args.reports {
        require_file(path, "report")?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let bundle: EvalBundle = serde_json::from_str(&text)
            .map_err(|e| tesr_core::Error::Parse(format!("{}: {e}", path.display())))?;
        runs.extend(bundle.runs);
    }
    let out = OutDir::create(&args.out)?;
    out.write_resolved(&args)?;
    fs::write(out.figures().join("mae_by_gap.svg"), mae_boxplot_svg(&runs))?;
    fs::write(out.reports().join("metrics_table.csv"), metrics_table(&runs))?;
    if let Some(table) = ablation_table(&runs) {
        fs::write(out.reports().join("series_length_ablation.csv"), table)?;
    }
    println!("wrote {} run(s) to {}", runs.len(), out.root.display());
    Ok(())
}

#[derive(Serialize)]
struct Description {
    kind: ModelKind,
    parameters: usize,
    spec: ModelSpec,
}

fn describe(args: DescribeArgs) -> anyhow::Result<()> {
    let kinds = match args.kind {
        Some(k) => vec![k],
        None => ModelKind::ALL.to_vec(),
    };
    let mut out = Vec::new();
    for kind in kinds {
        let base = ModelSpec::new(kind);
        let mut spec: ModelSpec = resolve(&base, args.config.config.as_deref(), &args.config.overrides)?;
        spec.kind = kind;
        spec.validate()?;
        let model = SrModel::new(spec.clone(), 0)?;
        out.push(Description {
            kind,
            parameters: model.parameter_count(),
            spec,
        });
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
