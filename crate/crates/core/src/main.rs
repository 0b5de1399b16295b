use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hicmae::decoder::parse_skip_map;
use hicmae::encoders::{FusionFlow, ModelSize};
use hicmae::error::{Error, Result};
use hicmae::finetune::{Modalities, Task};
use hicmae::harness::checkpoint::stored_width;
use hicmae::harness::config::{config_args, parse_config_file};
use hicmae::harness::data::read_audio;
use hicmae::harness::train::checkpoint_config;
use hicmae::harness::{
    evaluate, extract_features, finetune, pretrain, synth_dataset, Checkpoint, Dataset, FinetuneOptions, Manifest,
    Precision, SynthConfig, TrainConfig,
};
use hicmae::model::{param_count, ModelConfig, PretrainModel, PretrainSample};
use hicmae::numerics::{grad_check_params, Coords, Graph, ParamStore, Real};

#[derive(Parser)]
#[command(name = "hicmae", version, about = "Masked audio-visual pre-training and fine-tuning", args_override_self = true)]
struct Cli {
    /// Flat key=value file; every key mirrors a flag, flags given on the
    /// command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked pre-training on a manifest.
    Pretrain(PretrainCmd),
    /// Supervised fine-tuning, optionally from a pre-training checkpoint.
    Finetune(FinetuneCmd),
    /// Two-clip evaluation of a fine-tuned checkpoint.
    Eval(EvalCmd),
    /// Pooled features per clip as CSV.
    ExtractFeatures(ExtractCmd),
    /// Writes a synthetic paired audio-visual dataset.
    SynthData(SynthCmd),
    /// Finite-difference check of the full pre-training loss gradient.
    GradCheck(GradCheckCmd),
    /// Trainable parameters of a fine-tuning model.
    ParamCount(ParamCountCmd),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Also write each clip's spectrogram to DIR/<id>.hspc.
    #[arg(long, value_name = "DIR")]
    dump_spectrogram: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_parser = parse_size)]
    model_size: Option<ModelSize>,
    #[arg(long, value_parser = parse_flow)]
    fusion_flow: Option<FusionFlow>,
    /// Comma-separated encoder:decoder layer pairs, e.g. 4:2,7:3,10:4.
    #[arg(long)]
    skip_map: Option<String>,
    #[arg(long, value_name = "BOOL")]
    hsp: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    hcmcl: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    hff: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    mask_ratio_audio: Option<f64>,
    #[arg(long)]
    mask_ratio_video: Option<f64>,
    #[arg(long, value_name = "BOOL")]
    norm_targets: Option<bool>,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) -> Result<()> {
        if let Some(f) = self.fusion_flow {
            m.flow = f;
        }
        if let Some(s) = &self.skip_map {
            m.decoder.skips = parse_skip_map(s)?;
        }
        set(&mut m.hsp, self.hsp);
        set(&mut m.hcmcl, self.hcmcl);
        set(&mut m.hff, self.hff);
        set(&mut m.lambda, self.lambda);
        set(&mut m.temperature, self.temperature);
        set(&mut m.mask_ratio_audio, self.mask_ratio_audio);
        set(&mut m.mask_ratio_video, self.mask_ratio_video);
        set(&mut m.norm_targets, self.norm_targets);
        m.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_failures: Option<usize>,
    #[arg(long)]
    frame_stride: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn train_config(base: fn(ModelSize) -> TrainConfig, model: &ModelArgs, train: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = base(model.model_size.unwrap_or(ModelSize::Micro));
    model.apply(&mut cfg.model)?;
    set(&mut cfg.seed, train.seed);
    set(&mut cfg.batch_size, train.batch_size);
    set(&mut cfg.base_lr, train.lr);
    set(&mut cfg.warmup_epochs, train.warmup_epochs);
    set(&mut cfg.epochs, train.epochs);
    set(&mut cfg.optim.beta1, train.beta1);
    set(&mut cfg.optim.beta2, train.beta2);
    set(&mut cfg.optim.weight_decay, train.weight_decay);
    cfg.max_steps = train.max_steps.or(cfg.max_steps);
    set(&mut cfg.checkpoint_every, train.checkpoint_every);
    set(&mut cfg.max_failures, train.max_failures);
    set(&mut cfg.frame_stride, train.frame_stride);
    set(&mut cfg.precision, train.precision);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a pre-training checkpoint of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Classify,
    Regress,
}

#[derive(Args)]
struct FinetuneCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    /// Pre-training checkpoint providing the shared parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "classify")]
    task: TaskKind,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    num_dims: Option<usize>,
    #[arg(long, default_value = "av", value_parser = parse_modalities)]
    modalities: Modalities,
    #[arg(long, value_name = "BOOL", default_value_t = false)]
    freeze_backbone: bool,
    #[arg(long, default_value = "train")]
    train_split: String,
    /// Split evaluated after training; "none" skips evaluation.
    #[arg(long, default_value = "test")]
    eval_split: String,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split to evaluate; "all" uses every row.
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-clip predictions CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Every N-th round of classes goes to the test split; 0 disables.
    #[arg(long, default_value_t = 4)]
    test_every: usize,
}

#[derive(Args)]
struct GradCheckCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 8)]
    per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ParamCountCmd {
    #[arg(long, value_parser = parse_size, default_value = "base")]
    model_size: ModelSize,
    #[arg(long, default_value = "av", value_parser = parse_modalities)]
    modalities: Modalities,
    #[arg(long, default_value_t = 11)]
    num_classes: usize,
}

fn parse_size(s: &str) -> std::result::Result<ModelSize, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_flow(s: &str) -> std::result::Result<FusionFlow, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_modalities(s: &str) -> std::result::Result<Modalities, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn split_arg(s: &str) -> Option<&str> {
    (s != "all").then_some(s)
}

fn load_dataset(args: &DataArgs, cfg: &TrainConfig) -> Result<Dataset> {
    let manifest = Manifest::load(&args.manifest)?;
    let data = Dataset::new(manifest, &cfg.model, cfg.frame_stride, cfg.video_mean, cfg.video_std);
    if let Some(dir) = &args.dump_spectrogram {
        fs::create_dir_all(dir)?;
        for row in &data.manifest.rows {
            let spec = read_audio(&data.manifest.resolve(&row.audio), data.frontend())?;
            let mut file = fs::File::create(dir.join(format!("{}.hspc", row.id)))?;
            spec.write_dump(&mut file)?;
        }
        log::info!("wrote {} spectrograms to {}", data.len(), dir.display());
    }
    Ok(data)
}

fn run_pretrain(cmd: &PretrainCmd) -> Result<()> {
    let cfg = train_config(TrainConfig::pretrain, &cmd.model, &cmd.train)?;
    let data = load_dataset(&cmd.data, &cfg)?;
    let outcome = match cfg.precision {
        Precision::F32 => pretrain::<f32>(&cfg, &data, &cmd.out, cmd.resume.as_deref())?,
        Precision::F64 => pretrain::<f64>(&cfg, &data, &cmd.out, cmd.resume.as_deref())?,
    };
    if let (Some(a), Some(b)) = (outcome.history.first(), outcome.history.last()) {
        println!("steps {}..={}: total loss {:.6} -> {:.6}", a.step, b.step, a.loss.total, b.loss.total);
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn run_finetune(cmd: &FinetuneCmd) -> Result<()> {
    let cfg = train_config(TrainConfig::finetune, &cmd.model, &cmd.train)?;
    let task = match cmd.task {
        TaskKind::Classify => Task::Classify(cmd.num_classes.ok_or_else(|| Error::Config("--num-classes is required for classification".into()))?),
        TaskKind::Regress => Task::Regress(cmd.num_dims.ok_or_else(|| Error::Config("--num-dims is required for regression".into()))?),
    };
    let data = load_dataset(&cmd.data, &cfg)?;
    let mut opts = FinetuneOptions::new(task, cmd.modalities);
    opts.init = cmd.init.clone();
    opts.freeze_backbone = cmd.freeze_backbone;
    opts.train_split = cmd.train_split.clone();
    opts.eval_split = (cmd.eval_split != "none").then(|| cmd.eval_split.clone());
    let outcome = match cfg.precision {
        Precision::F32 => finetune::<f32>(&cfg, &data, &opts, &cmd.out)?,
        Precision::F64 => finetune::<f64>(&cfg, &data, &opts, &cmd.out)?,
    };
    print_report("train", &outcome.train_report);
    if let Some(r) = &outcome.eval_report {
        print_report("eval", r);
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn print_report(name: &str, r: &hicmae::harness::MetricReport) {
    let items: Vec<String> = r.entries().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{name}: {}", items.join(" "));
}

fn eval_with<T: Real>(cmd: &EvalCmd) -> Result<()> {
    let ck = Checkpoint::<T>::load(&cmd.checkpoint)?;
    let data = load_dataset(&cmd.data, &checkpoint_config(&ck)?)?;
    let outcome = evaluate(&ck, &data, split_arg(&cmd.split))?;
    print_report(&cmd.split, &outcome.report);
    if let Some(path) = &cmd.out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["id", "scores"]).map_err(|e| Error::Format(e.to_string()))?;
        for (id, p) in outcome.ids.iter().zip(&outcome.predictions) {
            let scores: Vec<String> = p.scores.iter().map(f64::to_string).collect();
            w.write_record([id.as_str(), &scores.join(";")]).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn extract_with<T: Real>(cmd: &ExtractCmd) -> Result<()> {
    let ck = Checkpoint::<T>::load(&cmd.checkpoint)?;
    let data = load_dataset(&cmd.data, &checkpoint_config(&ck)?)?;
    let feats = extract_features(&ck, &data, split_arg(&cmd.split))?;
    let mut out = fs::File::create(&cmd.out)?;
    if let Some((_, f)) = feats.first() {
        let cols: Vec<String> = (0..f.len()).map(|j| format!("f{j}")).collect();
        writeln!(out, "id,{}", cols.join(","))?;
    }
    for (id, f) in &feats {
        let vals: Vec<String> = f.iter().map(f64::to_string).collect();
        writeln!(out, "{id},{}", vals.join(","))?;
    }
    println!("{} feature rows written to {}", feats.len(), cmd.out.display());
    Ok(())
}

fn by_width(path: &Path, f32_run: impl FnOnce() -> Result<()>, f64_run: impl FnOnce() -> Result<()>) -> Result<()> {
    match stored_width(path)? {
        4 => f32_run(),
        _ => f64_run(),
    }
}

fn run_synth(cmd: &SynthCmd) -> Result<()> {
    let cfg = SynthConfig {
        frames: cmd.frames,
        height: cmd.height,
        width: cmd.width,
        test_every: cmd.test_every,
        ..SynthConfig::new(cmd.clips, cmd.classes, cmd.seed)
    };
    let m = synth_dataset(&cmd.out, &cfg)?;
    println!("{} clips written, manifest {}", m.rows.len(), cmd.out.join("manifest.csv").display());
    Ok(())
}

fn run_grad_check(cmd: &GradCheckCmd) -> Result<()> {
    use rand::{Rng, SeedableRng};

    let mut cfg = ModelConfig::new(cmd.model.model_size.unwrap_or(ModelSize::Micro));
    cmd.model.apply(&mut cfg)?;
    let mut store = ParamStore::<f64>::new();
    let model = PretrainModel::declare(&mut store, &cfg)?;
    store.initialize(cmd.seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cmd.seed);
    let mut batch = Vec::new();
    for i in 0..cmd.batch_size.max(1) as u64 {
        let mut spec = hicmae::audio::Spectrogram::zeros(cfg.audio_frames, cfg.audio_bins);
        spec.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut clip = hicmae::tokenizer::VideoClip::zeros(cfg.video_frames, cfg.video_height, cfg.video_width)?;
        clip.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        batch.push(PretrainSample::new(&spec, &clip, &cfg, 2 * i, 2 * i + 1)?);
    }
    let started = std::time::Instant::now();
    let report = grad_check_params(
        &mut store,
        |s| {
            let g = Graph::new(s);
            let l = model.loss(&g, &batch)?;
            Ok((g.scalar(l.total), g.backward_params(l.total)?))
        },
        |s| {
            let g = Graph::new(s);
            Ok(g.terms(model.loss(&g, &batch)?.total))
        },
        cmd.step,
        Coords::Sample { per_tensor: cmd.per_tensor, seed: cmd.seed },
    )?;
    println!(
        "checked {} coordinates in {:.1?}: max relative error {:.3e}",
        report.checked,
        started.elapsed(),
        report.max_rel_error
    );
    if let Some((t, i, a, n)) = report.worst {
        println!("worst: {}[{i}] analytic {a:.6e} numeric {n:.6e}", store.name(store.id_at(t)));
    }
    if report.max_rel_error >= cmd.threshold {
        return Err(Error::Numeric(format!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error, cmd.threshold)));
    }
    Ok(())
}

fn run_param_count(cmd: &ParamCountCmd) -> Result<()> {
    let n = param_count(cmd.model_size, cmd.modalities, Task::Classify(cmd.num_classes))?;
    println!("{} {}: {n} parameters ({:.2} M)", cmd.model_size, cmd.modalities, n as f64 / 1e6);
    Ok(())
}

/// Splices `--config FILE` entries in right after the subcommand so that
/// explicit flags, which come later, override them.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = argv.get(i + 1).cloned();
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    let extra = config_args(&parse_config_file(&text)?);
    let sub = argv.iter().skip(1).position(|a| !a.starts_with('-')).map_or(argv.len(), |p| p + 2);
    argv.splice(sub..sub, extra);
    Ok(argv)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(c) => run_pretrain(c),
        Command::Finetune(c) => run_finetune(c),
        Command::Eval(c) => by_width(&c.checkpoint, || eval_with::<f32>(c), || eval_with::<f64>(c)),
        Command::ExtractFeatures(c) => by_width(&c.checkpoint, || extract_with::<f32>(c), || extract_with::<f64>(c)),
        Command::SynthData(c) => run_synth(c),
        Command::GradCheck(c) => run_grad_check(c),
        Command::ParamCount(c) => run_param_count(c),
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
