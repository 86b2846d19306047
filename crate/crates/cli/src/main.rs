mod runlog;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cmaclip::data::{keyword, model_inputs, synth_generate, ImageSource};
use cmaclip::encoders::{patchify, ImagePatchGrid};
use cmaclip::eval::{evaluate, run_ablation, AblationSetup};
use cmaclip::heatmap::{attention_map, write_attention_map};
use cmaclip::optim::{AdamConfig, AdamState, GroupName};
use cmaclip::pretrain::{pretrain_contrastive, zero_shot_predict, PretrainConfig};
use cmaclip::records::write_atomic;
use cmaclip::training::{
    load_checkpoint, run_full_schedule, save_checkpoint, write_json, EpochRecord, LabeledInputs, RngState,
};
use cmaclip::{Checkpoint, Dataset, ExamplePair, FusionModel, ModelConfig, Stage, SynthConfig};

use runlog::RunLog;
use settings::{load_dataset, parse_list, ConfigArgs, SplitArgs, TrainSettings};

const MODEL_FILE: &str = "model.cfg";

#[derive(Parser, Debug)]
#[command(name = "cmaclip", version, about = "Image-text fusion classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Contrastive pre-training of the two encoders.
    Pretrain(PretrainArgs),
    /// Run the three-stage schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and compare all three fusion variants over several seeds.
    Ablate(AblateArgs),
    /// Export a token-to-patch attention map.
    Visualize(VisualizeArgs),
    /// Classify images by similarity to text prompts.
    Zeroshot(ZeroshotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// mrwpa-like, mrwpa-like-clean-text, aligned or two-task.
    #[arg(long, default_value = "mrwpa-like")]
    preset: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's image noise rate.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    settings: ConfigArgs,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose encoder weights initialise the model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    settings: TrainSettings,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Architecture file; defaults to `model.cfg` beside the checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    precision: f64,
    /// train, validation, test or all.
    #[arg(long = "on", default_value = "test")]
    on: String,
    #[command(flatten)]
    split: SplitArgs,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long, default_value_t = 0.9)]
    precision: f64,
    /// Comma-separated tasks with weak text signal; defaults to all tasks.
    #[arg(long)]
    low_relevance: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: TrainSettings,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Example id in the manifest.
    #[arg(long)]
    id: String,
    #[arg(long)]
    token: String,
    /// Fusion layer; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    /// Single head; defaults to the mean over heads.
    #[arg(long)]
    head: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ZeroshotArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Task to score; defaults to the first.
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated prompt per class; defaults to the synthetic keywords.
    #[arg(long)]
    prompts: Option<String>,
    /// train, validation, test or all.
    #[arg(long = "on", default_value = "test")]
    on: String,
    #[command(flatten)]
    split: SplitArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Visualize(a) => visualize(a),
        Command::Zeroshot(a) => zeroshot(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save_model(dir: &Path, name: &str, ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint(ckpt, &path)?;
    write_atomic(&dir.join(MODEL_FILE), cfg.canonical_text().as_bytes())?;
    Ok(path)
}

fn load_model(args: &ModelArgs) -> Result<FusionModel> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let cfg_path = match &args.model {
        Some(p) => p.clone(),
        None => args
            .ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(MODEL_FILE),
    };
    let text = std::fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = ModelConfig::parse_text(&text).with_context(|| format!("parsing {}", cfg_path.display()))?;
    let mut model = FusionModel::new(cfg, 0)?;
    ckpt.restore(&mut model)
        .with_context(|| format!("restoring {}", args.ckpt.display()))?;
    Ok(model)
}

fn pick<'a>(on: &str, data: &'a Dataset, split: &'a cmaclip::data::DatasetSplit) -> Result<&'a [ExamplePair]> {
    Ok(match on {
        "train" => &split.train,
        "validation" => &split.validation,
        "test" => &split.test,
        "all" => &data.pairs,
        other => bail!("unknown split `{other}` (train, validation, test or all)"),
    })
}

fn log_epoch(log: &mut RunLog, stage: Stage, r: &EpochRecord, tasks: &[String]) {
    let stage = stage.as_str();
    log.record(stage, r.epoch, "train_loss", r.train_loss);
    log.record(stage, r.epoch, "val_loss", r.val_loss);
    for (t, acc) in tasks.iter().zip(&r.val_accuracy) {
        log.record(stage, r.epoch, &format!("val_accuracy/{t}"), *acc);
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::preset(&a.preset, a.n, a.seed)?;
    if let Some(eta) = a.noise {
        cfg.image_noise_rate = eta;
    }
    let pairs = synth_generate(&cfg)?;
    create_dir(&a.out)?;
    Dataset {
        tasks: cfg.task_specs(),
        pairs,
    }
    .save(&a.out)?;
    println!("wrote {} pairs to {}", a.n, a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let (_, mut mc) = a.settings.resolve()?;
    let data = load_dataset(&a.data, mc.encoder.d_joint)?;
    mc.tasks = data.tasks.clone();
    let split = a.split.split(&data)?;
    let inputs = model_inputs(&split.train, &mc.encoder)?;
    let mut model = FusionModel::new(mc.clone(), a.seed)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        temperature: a.temperature,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let mut log = RunLog::create(&a.out)?;
    let losses = pretrain_contrastive(&mut model, &inputs, &cfg)?;
    for (i, l) in losses.iter().enumerate() {
        log.record("pretrain", i + 1, "contrastive_loss", *l);
    }
    log.flush()?;
    let opt = AdamState::new(model.store.groups(), AdamConfig::default());
    let ckpt = Checkpoint::capture(
        &model,
        Stage::WarmUp,
        0,
        (f64::NAN, f64::NAN),
        &opt,
        RngState {
            seed: a.seed,
            next_epoch: 0,
        },
    );
    let path = save_model(&a.out, "pretrained.cmac", &ckpt, &mc)?;
    println!(
        "contrastive loss {:.4} -> {:.4}; wrote {}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (tc, mut mc) = a.settings.resolve()?;
    let data = load_dataset(&a.data, mc.encoder.d_joint)?;
    mc.tasks = data.tasks.clone();
    let split = a.split.split(&data)?;
    let train = LabeledInputs::from_pairs(&split.train, &mc.tasks, &mc.encoder)?;
    let val = LabeledInputs::from_pairs(&split.validation, &mc.tasks, &mc.encoder)?;
    let mut model = FusionModel::new(mc.clone(), tc.seed)?;
    if let Some(init) = &a.init {
        let ck = load_checkpoint(init)?;
        ck.restore_groups(&mut model, &[GroupName::ClipImage, GroupName::ClipText])
            .with_context(|| format!("loading encoders from {}", init.display()))?;
    }
    create_dir(&a.out)?;
    let mut log = RunLog::create(&a.out)?;
    let names: Vec<String> = mc.tasks.iter().map(|t| t.name.clone()).collect();
    let mut hook = |s: Stage, r: &EpochRecord| log_epoch(&mut log, s, r, &names);
    let (best, report) = run_full_schedule(&mut model, &train, &val, &tc, Some(&mut hook))?;
    log.flush()?;
    let path = save_model(&a.out, "best.cmac", &best, &mc)?;
    write_json(&a.out.join("train_report.json"), &report)?;
    println!(
        "best {} epoch {} val accuracy {:.4}; wrote {}",
        best.stage,
        best.epoch,
        best.val_accuracy,
        path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data, model.config.encoder.d_joint)?;
    let split = a.split.split(&data)?;
    let pairs = pick(&a.on, &data, &split)?;
    let inputs = LabeledInputs::from_pairs(pairs, model.tasks(), &model.config.encoder)?;
    let report = evaluate(&model, &inputs, a.precision)?;
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            println!(
                "mean accuracy {:.4}, mean macro recall@{} {:.4}; wrote {}",
                report.mean_accuracy,
                a.precision,
                report.mean_macro_recall,
                path.display()
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (tc, mut mc) = a.settings.resolve()?;
    let data = load_dataset(&a.data, mc.encoder.d_joint)?;
    mc.tasks = data.tasks.clone();
    let split = a.split.split(&data)?;
    let low_relevance = match &a.low_relevance {
        Some(s) => s.split(',').map(|t| t.trim().to_string()).collect(),
        None => mc.tasks.iter().map(|t| t.name.clone()).collect(),
    };
    let setup = AblationSetup {
        split: &split,
        tasks: mc.tasks.clone(),
        model: mc,
        train: tc,
        seeds: parse_list(&a.seeds)?,
        precision: a.precision,
        low_relevance,
    };
    create_dir(&a.out)?;
    let mut log = RunLog::create(&a.out)?;
    let mut hook = |v: cmaclip::FusionVariant, seed: u64, _: &cmaclip::TrainReport, r: &cmaclip::EvalReport| {
        let stage = format!("ablation/{v}/seed{seed}");
        log.record(&stage, 0, "mean_macro_recall", r.mean_macro_recall);
        log.record(&stage, 0, "mean_accuracy", r.mean_accuracy);
        eprintln!("{v} seed {seed}: macro recall {:.4}", r.mean_macro_recall);
    };
    let report = run_ablation(&setup, Some(&mut hook))?;
    log.flush()?;
    let path = a.out.join("ablation_report.json");
    write_json(&path, &report)?;
    for v in &report.variants {
        println!("{:<12} macro recall {:.4}", v.variant, v.mean_macro_recall);
    }
    println!(
        "ordering {}; low-relevance gap {:.4}; wrote {}",
        if report.ordering_holds { "holds" } else { "violated" },
        report.low_relevance_gap,
        path.display()
    );
    Ok(())
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data, model.config.encoder.d_joint)?;
    let pair = data
        .pairs
        .iter()
        .find(|p| p.id == a.id)
        .ok_or_else(|| anyhow!("no example with id `{}`", a.id))?;
    let map = attention_map(&model, pair, &a.token, a.layer, a.head)?;
    create_dir(&a.out)?;
    let (csv, pgm) = write_attention_map(&map, &a.out.join(format!("{}_{}", a.id, a.token)))?;
    println!("wrote {} and {}", csv.display(), pgm.display());
    Ok(())
}

fn zeroshot(a: ZeroshotArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data, model.config.encoder.d_joint)?;
    let (k, task) = match &a.task {
        Some(name) => data
            .tasks
            .iter()
            .enumerate()
            .find(|(_, t)| &t.name == name)
            .ok_or_else(|| anyhow!("unknown task `{name}`"))?,
        None => (0, &data.tasks[0]),
    };
    let prompts: Vec<String> = match &a.prompts {
        Some(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
        None => (0..task.n_classes).map(|c| keyword(k, c)).collect(),
    };
    if prompts.len() != task.n_classes {
        bail!("{} prompts for {} classes", prompts.len(), task.n_classes);
    }
    let split = a.split.split(&data)?;
    let pairs = pick(&a.on, &data, &split)?;
    let mut grids: Vec<ImagePatchGrid> = Vec::new();
    let mut labels = Vec::new();
    for p in pairs {
        if let (ImageSource::Raw(img), Some(&c)) = (&p.image, p.labels.get(&task.name)) {
            grids.push(patchify(img, model.config.encoder.patch_size)?);
            labels.push(c);
        }
    }
    if grids.is_empty() {
        bail!("no raw images labelled for `{}`", task.name);
    }
    let refs: Vec<&ImagePatchGrid> = grids.iter().collect();
    let prompt_refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let preds = zero_shot_predict(&model, &refs, &prompt_refs)?;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let out = json!({
        "task": task.name,
        "n_examples": labels.len(),
        "accuracy": correct as f64 / labels.len() as f64,
        "chance": 1.0 / task.n_classes as f64,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
