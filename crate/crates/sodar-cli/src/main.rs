//! Experiment harness CLI: dataset generation, training, evaluation,
//! ablations, mask-voting studies and the analytic FLOP table. Every command
//! writes CSV reports plus a `manifest.txt` recording the command line, the
//! config snapshot, the seed, content hashes of the inputs and the output
//! paths. Exit codes: 0 success, 2 usage error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sodar_core::aggregation::AggArchitecture;
use sodar_core::config::KvConfig;
use sodar_core::experiment::{
    ablation_specs, outcomes_csv, run_training, voting_csv, voting_study, AblationAxis, Benchmark,
    RunSpec,
};
use sodar_core::flops::{flops_csv, flops_mask_head};
use sodar_core::infer::{evaluate_model, infer_scenes, search_voting};
use sodar_core::loss::{ClsLoss, LossConfig};
use sodar_core::model::{parse_grids, ModelConfig, ToyModel};
use sodar_core::postprocess::{write_detections, PostprocessConfig};
use sodar_core::scene::{generate_scenes, load_scenes, save_scenes};
use sodar_core::train::{train, TrainConfig};
use sodar_core::voting::VoteScheme;

#[derive(Parser)]
#[command(name = "sodar", about = "Grid-cell instance segmentation experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Generate(GenerateArgs),
    /// Train a model on a scene dataset.
    Train(TrainArgs),
    /// Evaluate a trained model on a scene dataset.
    Eval(EvalArgs),
    /// Run a matched pair/sweep along one ablation axis.
    Ablate(AblateArgs),
    /// Grid-search a mask-voting scheme on a trained model.
    Vote(VoteArgs),
    /// Emit the analytic mask-head FLOP table.
    BenchFlops(BenchFlopsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    count: u32,
    /// Square image size in pixels (divisible by 4).
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    max_objects: u32,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene dataset directory (from `generate`).
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value config file; missing keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional validation dataset for per-epoch AP.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint directory (from `train`).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = ["agg", "neighbors", "context", "layers", "kernel", "two-stage", "deform", "grid"])]
    axis: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene dataset; generated from the config's seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VoteArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["average", "score", "iou", "all"])]
    scheme: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchFlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Vote(a) => cmd_vote(a),
        Command::BenchFlops(a) => cmd_bench_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// Snapshot of everything a run needs for its manifest.
struct Manifest {
    command: String,
    seed: u64,
    config: KvConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    started: Instant,
}

impl Manifest {
    fn new(command: &str, seed: u64, config: KvConfig) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut kv = KvConfig::new();
        kv.set("command", &self.command);
        kv.set("seed", self.seed);
        kv.set("input_hash", hash_inputs(&self.inputs)?);
        kv.set("outputs", self.outputs.join(","));
        kv.set("wall_ms", self.started.elapsed().as_millis());
        for key in self.config.keys() {
            kv.set(&format!("config_{key}"), self.config.raw(key).unwrap_or(""));
        }
        std::fs::write(dir.join("manifest.txt"), kv.to_text())?;
        Ok(())
    }
}

/// SHA-256 over the sorted contents of every input file (or every file of an
/// input directory).
fn hash_inputs(inputs: &[PathBuf]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut files: Vec<PathBuf> = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in std::fs::read_dir(input)? {
                let p = entry?.path();
                if p.is_file() {
                    files.push(p);
                }
            }
        } else if input.is_file() {
            files.push(input.clone());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        hasher.update(f.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update(std::fs::read(f)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            );
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.size % 4 != 0 {
        bail!("--size must be divisible by 4, got {}", a.size);
    }
    prepare_out(&a.out, a.force)?;
    let mut cfg = KvConfig::new();
    cfg.set("count", a.count);
    cfg.set("size", a.size);
    cfg.set("max_objects", a.max_objects);
    let mut manifest = Manifest::new("generate", a.seed, cfg);
    let scenes = generate_scenes(
        a.seed,
        a.count as usize,
        a.size as usize,
        a.size as usize,
        a.max_objects as usize,
    )?;
    save_scenes(&scenes, &a.out)?;
    manifest.output("scene_*.gtf");
    manifest.output("scene_*.rle");
    manifest.write(&a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

/// Splits a flat config into model, training and post-processing settings.
fn parse_run_config(kv: &KvConfig) -> Result<(ModelConfig, TrainConfig, PostprocessConfig)> {
    let model = ModelConfig::from_kv(kv)?;
    let dt = TrainConfig::default();
    let cls = match kv.raw("cls_loss").unwrap_or("focal") {
        "focal" => ClsLoss::Focal {
            gamma: kv.get_or("focal_gamma", 2.0)?,
            alpha: kv.get_or("focal_alpha", 0.25)?,
        },
        "bce" => ClsLoss::Bce,
        other => bail!("unknown cls_loss {other:?}"),
    };
    let steps = kv.get_or("steps", dt.steps)?;
    let train = TrainConfig {
        seed: kv.get_or("seed", dt.seed)?,
        steps,
        batch: kv.get_or("batch", dt.batch)?,
        lr: kv.get_or("lr", dt.lr)?,
        lr_decay_step: match kv.raw("lr_decay_step") {
            Some("none") | Some("") => None,
            Some(v) => Some(v.parse().context("lr_decay_step")?),
            None => Some(steps * 5 / 6),
        },
        lr_decay_factor: kv.get_or("lr_decay_factor", dt.lr_decay_factor)?,
        loss: LossConfig {
            mask_weight: kv.get_or("mask_weight", 3.0)?,
            cls,
            dice_eps: kv.get_or("dice_eps", 1e-6)?,
            two_stage: kv.get_bool_or("two_stage", false)?,
        },
    };
    let dp = PostprocessConfig::default();
    let post = PostprocessConfig {
        score_threshold: kv.get_or("score_threshold", dp.score_threshold)?,
        mask_threshold: kv.get_or("mask_threshold", dp.mask_threshold)?,
        nms_iou: kv.get_or("nms_iou", dp.nms_iou)?,
        max_detections: kv.get_or("max_detections", dp.max_detections)?,
    };
    Ok((model, train, post))
}

/// Full config snapshot with defaults filled in, for the manifest.
fn snapshot(model: &ModelConfig, train: &TrainConfig, post: &PostprocessConfig) -> KvConfig {
    let mut kv = model.to_kv();
    kv.set("seed", train.seed);
    kv.set("steps", train.steps);
    kv.set("batch", train.batch);
    kv.set("lr", train.lr);
    kv.set(
        "lr_decay_step",
        train
            .lr_decay_step
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    kv.set("lr_decay_factor", train.lr_decay_factor);
    kv.set("mask_weight", train.loss.mask_weight);
    match train.loss.cls {
        ClsLoss::Focal { gamma, alpha } => {
            kv.set("cls_loss", "focal");
            kv.set("focal_gamma", gamma);
            kv.set("focal_alpha", alpha);
        }
        ClsLoss::Bce => kv.set("cls_loss", "bce"),
    }
    kv.set("dice_eps", train.loss.dice_eps);
    kv.set("two_stage", train.loss.two_stage);
    kv.set("score_threshold", post.score_threshold);
    kv.set("mask_threshold", post.mask_threshold);
    kv.set("nms_iou", post.nms_iou);
    kv.set("max_detections", post.max_detections);
    kv
}

fn load_config_file(path: &Option<PathBuf>) -> Result<KvConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            Ok(KvConfig::parse(&text)?)
        }
        None => Ok(KvConfig::new()),
    }
}

fn scenes_must_match(model: &ModelConfig, scenes: &[sodar_core::scene::Scene]) -> Result<()> {
    for s in scenes {
        if s.height() != model.img_h || s.width() != model.img_w {
            bail!(
                "dataset scene size {}x{} does not match the model's {}x{}",
                s.height(),
                s.width(),
                model.img_h,
                model.img_w
            );
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let kv = load_config_file(&a.config)?;
    let (mut model_cfg, train_cfg, post) = parse_run_config(&kv)?;
    let scenes = load_scenes(&a.data)
        .with_context(|| format!("cannot load dataset from {}", a.data.display()))?;
    if let Some(first) = scenes.first() {
        model_cfg.img_h = first.height();
        model_cfg.img_w = first.width();
    }
    scenes_must_match(&model_cfg, &scenes)?;
    prepare_out(&a.out, true)?;

    let mut manifest = Manifest::new("train", train_cfg.seed, snapshot(&model_cfg, &train_cfg, &post));
    manifest.input(&a.data);
    if let Some(c) = &a.config {
        manifest.input(c);
    }

    let val_scenes = match &a.val_data {
        Some(dir) => {
            manifest.input(dir);
            Some(load_scenes(dir)?)
        }
        None => None,
    };

    let mut model = ToyModel::new(model_cfg, train_cfg.seed)?;
    let log = match &val_scenes {
        Some(val) => {
            let post = post;
            train(
                &mut model,
                &scenes,
                &train_cfg,
                Some(|m: &ToyModel| evaluate_model(m, val, &post).map(|r| r.ap)),
            )?
        }
        None => train(
            &mut model,
            &scenes,
            &train_cfg,
            None::<fn(&ToyModel) -> sodar_core::Result<f64>>,
        )?,
    };

    std::fs::write(a.out.join("loss_curve.csv"), log.steps_csv())?;
    std::fs::write(a.out.join("epochs.csv"), log.epochs_csv())?;
    model.save(&a.out.join("model"))?;
    manifest.output("loss_curve.csv");
    manifest.output("epochs.csv");
    manifest.output("model/");
    manifest.write(&a.out)?;
    println!(
        "trained {} steps; final loss {:.4}",
        log.steps.len(),
        log.steps.last().map(|e| e.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = ToyModel::load(&a.model)
        .with_context(|| format!("cannot load model from {}", a.model.display()))?;
    let scenes = load_scenes(&a.data)?;
    scenes_must_match(&model.cfg, &scenes)?;
    prepare_out(&a.out, true)?;
    let post = PostprocessConfig::default();
    let mut manifest = Manifest::new("eval", 0, snapshot(&model.cfg, &TrainConfig::default(), &post));
    manifest.input(&a.model);
    manifest.input(&a.data);

    let infs = infer_scenes(&model, &scenes, &post)?;
    let report = sodar_core::infer::eval_inferences(&infs, &scenes);
    std::fs::write(a.out.join("report.csv"), report.to_csv())?;
    let det_dir = a.out.join("detections");
    std::fs::create_dir_all(&det_dir)?;
    for (i, inf) in infs.iter().enumerate() {
        let mut buf = Vec::new();
        write_detections(&mut buf, &inf.kept)?;
        std::fs::write(det_dir.join(format!("scene_{i:05}.txt")), buf)?;
    }
    manifest.output("report.csv");
    manifest.output("detections/");
    manifest.write(&a.out)?;
    println!("ap={:.4} ap50={:.4} ap75={:.4}", report.ap, report.ap50, report.ap75);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let axis = AblationAxis::parse(&a.axis)?;
    let kv = load_config_file(&a.config)?;
    let (mut model_cfg, train_cfg, post) = parse_run_config(&kv)?;

    // self-provision a benchmark when no dataset was given
    let data_seed: u64 = kv.get_or("data_seed", 7u64)?;
    let (train_scenes, val_scenes) = match &a.data {
        Some(dir) => {
            let all = load_scenes(dir)?;
            let n_val = (all.len() / 5).max(1);
            let mut train = all;
            let val = train.split_off(train.len() - n_val);
            (train, val)
        }
        None => {
            let n_train: usize = kv.get_or("data_train", 120usize)?;
            let n_val: usize = kv.get_or("data_val", 40usize)?;
            let img = model_cfg.img_h;
            let mut all = generate_scenes(data_seed, n_train + n_val, img, img, 4)?;
            let val = all.split_off(n_train);
            (all, val)
        }
    };
    if let Some(first) = train_scenes.first() {
        model_cfg.img_h = first.height();
        model_cfg.img_w = first.width();
    }
    scenes_must_match(&model_cfg, &train_scenes)?;
    prepare_out(&a.out, true)?;

    let mut manifest = Manifest::new(
        &format!("ablate --axis {}", a.axis),
        train_cfg.seed,
        snapshot(&model_cfg, &train_cfg, &post),
    );
    if let Some(d) = &a.data {
        manifest.input(d);
    }
    if let Some(c) = &a.config {
        manifest.input(c);
    }

    let bench = Benchmark {
        train: train_scenes,
        val: val_scenes,
    };
    let specs = ablation_specs(axis, &model_cfg, &train_cfg);
    let mut outcomes = Vec::new();
    for spec in &specs {
        let out = run_training(spec, &bench, &post)?;
        println!("{}: ap={:.4} ap50={:.4}", out.name, out.report.ap, out.report.ap50);
        outcomes.push(out);
    }
    std::fs::write(a.out.join("comparison.csv"), outcomes_csv(&outcomes))?;
    manifest.output("comparison.csv");
    manifest.write(&a.out)?;
    Ok(())
}

fn cmd_vote(a: VoteArgs) -> Result<()> {
    let model = ToyModel::load(&a.model)?;
    let scenes = load_scenes(&a.data)?;
    scenes_must_match(&model.cfg, &scenes)?;
    prepare_out(&a.out, true)?;
    let post = PostprocessConfig::default();
    let mut manifest = Manifest::new(
        &format!("vote --scheme {}", a.scheme),
        0,
        snapshot(&model.cfg, &TrainConfig::default(), &post),
    );
    manifest.input(&a.model);
    manifest.input(&a.data);

    if a.scheme == "all" {
        let study = voting_study(&model, &scenes, &post)?;
        std::fs::write(a.out.join("votes.csv"), voting_csv(&study))?;
        for (scheme, s) in &study.searches {
            println!(
                "{}: best tau={} ap={:.4} (no voting: {:.4})",
                scheme.name(),
                s.config.tau,
                s.best_ap,
                study.baseline_ap
            );
        }
    } else {
        let scheme = VoteScheme::parse(&a.scheme)?;
        let infs = infer_scenes(&model, &scenes, &post)?;
        let base = sodar_core::infer::eval_inferences(&infs, &scenes).ap;
        let search = search_voting(&infs, &scenes, scheme, post.mask_threshold)?;
        let mut csv = String::from("scheme,tau,ap\n");
        csv.push_str(&format!("none,,{base}\n"));
        for (tau, ap) in &search.table {
            csv.push_str(&format!("{},{},{}\n", scheme.name(), tau, ap));
        }
        std::fs::write(a.out.join("votes.csv"), csv)?;
        println!(
            "{}: best tau={} ap={:.4} (no voting: {:.4})",
            scheme.name(),
            search.config.tau,
            search.best_ap,
            base
        );
    }
    manifest.output("votes.csv");
    manifest.write(&a.out)?;
    Ok(())
}

fn cmd_bench_flops(a: BenchFlopsArgs) -> Result<()> {
    let kv = load_config_file(&a.config)?;
    let model_cfg = ModelConfig::from_kv(&kv)?;
    let grids = match kv.raw("grids") {
        Some(text) => parse_grids(text)?,
        None => model_cfg.grids.clone(),
    };
    prepare_out(&a.out, true)?;
    let arch = model_cfg.arch();
    let levels = flops_mask_head(
        &grids,
        &arch,
        model_cfg.mask_h(),
        model_cfg.mask_w(),
        model_cfg.scheme,
        16,
    );
    let mut manifest = Manifest::new("bench-flops", 0, model_cfg.to_kv());
    if let Some(c) = &a.config {
        manifest.input(c);
    }
    std::fs::write(a.out.join("flops.csv"), flops_csv(&levels))?;
    manifest.output("flops.csv");
    manifest.write(&a.out)?;
    let arch_d = AggArchitecture::new(arch.in_channels, arch.hidden, arch.layers, arch.kernel)
        .map(|a| a.d_dim())
        .unwrap_or(0);
    println!(
        "wrote {} levels (aggregation D={arch_d}) to {}",
        levels.len(),
        a.out.join("flops.csv").display()
    );
    Ok(())
}
