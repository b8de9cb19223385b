//! `owcod`: generate tasks, pretrain the base, train memory pools, evaluate,
//! run ablations, rank reports and score COCO-format files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use owcod_core::bench::{
    compute_ap, generate_synthetic_task, leaderboard, load_coco_format, rank_reports, to_csv, BenchError,
    CocoDataset, ContinualTask, EvalReport,
};
use owcod_core::detector::{Detector, ImageSample};
use owcod_core::experiment::{
    continual_train, evaluate, load_base, pretrain_base, run_ablation, save_base, write_artifact,
    AblationKind, EvalMode, ExperimentConfig, ExperimentError, FileDigest, RunManifest, TrainingMode,
};
use owcod_core::memory::{load_pool, save_pool, MemoryError, MemoryPool};

#[derive(Parser)]
#[command(name = "owcod", version, about = "Continual open-vocabulary detection with memory retrieval")]
struct Cli {
    /// JSON experiment configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact of the command.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Retrieval threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Training images per class of every continual subset.
    #[arg(long, global = true)]
    shots: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task as PPM images and COCO annotation files.
    GenTask,
    /// Pretrain and freeze the base detector.
    Pretrain,
    /// Train one memory triplet per continual step.
    Train {
        /// Base checkpoint; pretrained and saved under the out dir when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// `decoupled` or `joint`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a pool and write reports and prediction files.
    Eval {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// `threshold`, `oracle`, `zero-shot`, `no-retrieval-last-triplet` or `all`.
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Run an ablation: components, layers, joint, oracle or shots.
    Ablate {
        kind: String,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Rank evaluation reports against each other.
    Rank {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// AP of a COCO results file against a COCO annotation file.
    Score {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    started: Instant,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8], outputs: &mut Vec<FileDigest>) -> Result<PathBuf> {
        let p = self.path(name);
        write_artifact(&p, bytes)?;
        outputs.push(FileDigest::of(&p)?);
        Ok(p)
    }

    fn write_json(&self, name: &str, v: &impl serde::Serialize, outputs: &mut Vec<FileDigest>) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.write(name, &bytes, outputs)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, &self.config);
        if let Some(rev) = source_revision() {
            m.source = format!("{} ({rev})", m.source);
        }
        m
    }

    fn finish(&self, mut m: RunManifest) -> Result<()> {
        m.wall_clock_secs = self.started.elapsed().as_secs_f64();
        m.write(&self.path(&format!("manifest-{}.json", m.command)))?;
        Ok(())
    }

    fn task(&self) -> Result<ContinualTask> {
        Ok(generate_synthetic_task(&self.config.task_params())?)
    }
}

fn source_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn log(line: String) {
    eprintln!("{line}");
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.tau {
        config.retrieval.threshold = t;
    }
    if let Some(s) = cli.shots {
        config.task.shots = s;
    }
    if let Some(o) = &cli.out_dir {
        config.out_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn to_ppm(im: &ImageSample) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", im.width, im.height).into_bytes();
    for y in 0..im.height {
        for x in 0..im.width {
            for c in 0..3 {
                out.push((im.pixel(y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn gen_task(ctx: &Ctx) -> Result<()> {
    let task = ctx.task()?;
    let mut m = ctx.manifest("gen-task");
    let mut splits: Vec<(String, &[ImageSample], Vec<String>)> = vec![
        ("pretrain-train".into(), &task.pretrain().train, task.pretrain().label_set.clone()),
        (
            "pretrain-eval".into(),
            task.eval_images(owcod_core::bench::EvalSplit::Pretrain),
            task.pretrain().label_set.clone(),
        ),
    ];
    for s in task.subsets() {
        splits.push((format!("S{}-train", s.step), &s.train, s.label_set.clone()));
        splits.push((
            format!("S{}-eval", s.step),
            task.eval_images(owcod_core::bench::EvalSplit::Subset(s.step)),
            s.label_set.clone(),
        ));
    }
    splits.push((
        "unseen-eval".into(),
        task.eval_images(owcod_core::bench::EvalSplit::Unseen),
        task.unseen().label_set.clone(),
    ));
    for (name, images, labels) in splits {
        let ds = CocoDataset::from_samples(images, &labels, &format!("{name}/"))?;
        for (im, meta) in images.iter().zip(&ds.images) {
            write_artifact(&ctx.path(&format!("task/{}", meta.file_name)), &to_ppm(im))?;
        }
        ctx.write_json(&format!("task/{name}.json"), &ds.to_json()?, &mut m.outputs)?;
        log(format!("{name}: {} images", images.len()));
    }
    ctx.finish(m)
}

fn base_path(ctx: &Ctx, base: &Option<PathBuf>) -> PathBuf {
    base.clone().unwrap_or_else(|| ctx.path("base.owbc"))
}

fn pretrain(ctx: &Ctx, task: &ContinualTask, m: &mut RunManifest) -> Result<Detector> {
    let (det, report) = pretrain_base(&ctx.config, task, &mut log)?;
    let p = ctx.path("base.owbc");
    save_base(&det, &p)?;
    m.outputs.push(FileDigest::of(&p)?);
    ctx.write_json("pretrain.json", &report, &mut m.outputs)?;
    Ok(det)
}

/// Load the base, pretraining it first when the default location is empty.
fn obtain_base(ctx: &Ctx, task: &ContinualTask, base: &Option<PathBuf>, m: &mut RunManifest) -> Result<Detector> {
    let p = base_path(ctx, base);
    if base.is_none() && !p.exists() {
        log(format!("no base at {}; pretraining", p.display()));
        return pretrain(ctx, task, m);
    }
    let det = load_base(&p)?;
    m.inputs.push(FileDigest::of(&p)?);
    Ok(det)
}

fn train(ctx: &mut Ctx, base: &Option<PathBuf>, mode: &Option<String>) -> Result<()> {
    if let Some(mode) = mode {
        ctx.config.mode = match mode.as_str() {
            "decoupled" => TrainingMode::Decoupled,
            "joint" => TrainingMode::Joint,
            other => return Err(ExperimentError::Config(format!("unknown training mode `{other}`")).into()),
        };
    }
    let task = ctx.task()?;
    let mut m = ctx.manifest("train");
    let det = obtain_base(ctx, &task, base, &mut m)?;
    let run = continual_train(&ctx.config, &task, &det, &mut log, &mut |_| Ok(()))?;
    let p = ctx.path("pool.owmp");
    save_pool(&run.pool, &p)?;
    m.outputs.push(FileDigest::of(&p)?);
    m.triplet_digests = run.steps.iter().map(|s| s.triplet_digest.clone()).collect();
    m.training = run.steps;
    ctx.finish(m)
}

fn parse_modes(mode: &str) -> Result<Vec<EvalMode>> {
    if mode == "all" {
        return Ok(EvalMode::ALL.to_vec());
    }
    Ok(vec![mode.parse::<EvalMode>()?])
}

fn eval(ctx: &Ctx, base: &Option<PathBuf>, pool: &Option<PathBuf>, mode: &str) -> Result<()> {
    let modes = parse_modes(mode)?;
    let task = ctx.task()?;
    let mut m = ctx.manifest("eval");
    let bp = base_path(ctx, base);
    let det = load_base(&bp)?;
    m.inputs.push(FileDigest::of(&bp)?);
    let needs_pool = modes.iter().any(|&md| md != EvalMode::ZeroShot);
    let pool = if needs_pool {
        let pp = pool.clone().unwrap_or_else(|| ctx.path("pool.owmp"));
        let p = load_pool(&pp)?;
        m.inputs.push(FileDigest::of(&pp)?);
        m.triplet_digests = p.triplets().iter().map(|t| t.digest()).collect();
        p
    } else {
        MemoryPool::new(det.config().clone())
    };
    let mut reports = Vec::new();
    for md in modes {
        let ev = evaluate(&pool, &det, &task, md, &ctx.config.retrieval, md.as_str())?;
        for s in &ev.splits {
            // Retrieved memories may predict classes outside the split; they get
            // categories without annotations so AP is unaffected.
            let mut labels = s.label_set.clone();
            for p in &s.predictions {
                if !labels.contains(&p.class_name) {
                    labels.push(p.class_name.clone());
                }
            }
            let ds = CocoDataset::from_samples(&s.images, &labels, &format!("{}/", s.split))?;
            ctx.write_json(&format!("gt/{}.json", s.split), &ds.to_json()?, &mut m.outputs)?;
            ctx.write_json(
                &format!("predictions/{md}/{}.json", s.split),
                &ds.results_json(&s.predictions)?,
                &mut m.outputs,
            )?;
            log(format!("{md} {}: fallback rate {:.3}", s.split, s.fallback_rate));
        }
        ctx.write_json(&format!("report-{md}.json"), &ev.report, &mut m.outputs)?;
        reports.push(ev.report);
    }
    if reports.iter().all(|r| r.ap_unseen.is_some()) {
        rank_reports(&mut reports)?;
    }
    ctx.write("reports.csv", to_csv(&reports).as_bytes(), &mut m.outputs)?;
    let board = leaderboard(&reports);
    ctx.write("leaderboard.txt", board.as_bytes(), &mut m.outputs)?;
    print!("{board}");
    ctx.finish(m)
}

fn ablate(ctx: &Ctx, kind: &str, base: &Option<PathBuf>) -> Result<()> {
    let kind: AblationKind = kind.parse()?;
    let task = ctx.task()?;
    let mut m = ctx.manifest(&format!("ablate-{kind}"));
    let det = obtain_base(ctx, &task, base, &mut m)?;
    let bundle = run_ablation(kind, &ctx.config, &task, &det, &mut log)?;
    ctx.write_json(&format!("ablation-{kind}.json"), &bundle, &mut m.outputs)?;
    ctx.write(&format!("ablation-{kind}.csv"), bundle.csv.as_bytes(), &mut m.outputs)?;
    ctx.write(&format!("ablation-{kind}.txt"), bundle.leaderboard.as_bytes(), &mut m.outputs)?;
    print!("{}", bundle.leaderboard);
    ctx.finish(m)
}

fn rank(ctx: &Ctx, paths: &[PathBuf]) -> Result<()> {
    let mut m = ctx.manifest("rank");
    let mut reports = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Data(format!("{}: {e}", p.display())))?;
        m.inputs.push(FileDigest::of(p)?);
        reports.push(r);
    }
    rank_reports(&mut reports)?;
    ctx.write("ranks.csv", to_csv(&reports).as_bytes(), &mut m.outputs)?;
    let board = leaderboard(&reports);
    ctx.write("ranks.txt", board.as_bytes(), &mut m.outputs)?;
    print!("{board}");
    ctx.finish(m)
}

fn score(gt: &Path, pred: &Path) -> Result<()> {
    let (ds, preds) = load_coco_format(gt, Some(pred))?;
    let preds = preds.unwrap_or_default();
    let result = compute_ap(&preds, &ds.annotations, &ds.class_names())
        .ok_or_else(|| BenchError::Input("no category has ground truth".into()))?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Score { gt, pred } = &cli.command {
        return score(gt, pred);
    }
    let config = load_config(&cli)?;
    let mut ctx = Ctx {
        out: config.out_dir.clone(),
        config,
        started: Instant::now(),
    };
    match &cli.command {
        Command::GenTask => gen_task(&ctx),
        Command::Pretrain => {
            let task = ctx.task()?;
            let mut m = ctx.manifest("pretrain");
            pretrain(&ctx, &task, &mut m)?;
            ctx.finish(m)
        }
        Command::Train { base, mode } => train(&mut ctx, base, mode),
        Command::Eval { base, pool, mode } => eval(&ctx, base, pool, mode),
        Command::Ablate { kind, base } => ablate(&ctx, kind, base),
        Command::Rank { reports } => rank(&ctx, reports),
        Command::Score { .. } => unreachable!("handled above"),
    }
}

/// 2 for configuration errors, 3 for data or format errors, 4 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<ExperimentError>() {
        return e.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<BenchError>() {
        return if matches!(e, BenchError::Config(_)) { 2 } else { 3 };
    }
    if let Some(e) = err.downcast_ref::<MemoryError>() {
        return ExperimentError::Memory(e.clone()).exit_code() as u8;
    }
    3
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
