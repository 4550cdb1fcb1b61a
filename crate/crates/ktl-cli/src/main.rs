//! `ktl` — corpus generation, staged self-training, evaluation, ablation
//! sweeps, and inference, with reproducible run directories.

mod ablate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ktl::error::Error;
use ktl::synth::{Corpus, CorpusSpec};
use ktl::training::rundir::{
    eval_pipeline, train_pipeline, KeypointInit, PipelineConfig, RunDir, StageSelect,
};
use ktl::training::stage2::infer;

#[derive(Parser)]
#[command(name = "ktl", about = "Unsupervised landmark discovery by self-training correspondence", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deformable-object corpus.
    Generate(GenerateArgs),
    /// Train stage 1 (self-training) and/or stage 2 (K-channel detector).
    Train(TrainArgs),
    /// Evaluate a trained run (forward/backward NME, CED, per-landmark CSV).
    Eval(EvalArgs),
    /// Run an ablation sweep over isolated run directories.
    Ablate(ablate::AblateArgs),
    /// Predict K landmarks for corpus samples with a stage-2 checkpoint.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a full CorpusSpec (flags below override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    template_pool: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    deform_strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    landmarks: Option<usize>,
    /// Disable mirrored samples (for pipelines without flip augmentation).
    #[arg(long)]
    no_flips: bool,
    /// Overwrite an existing corpus directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by `generate`.
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory (defaults to $KTL_RUN_DIR).
    #[arg(long, env = "KTL_RUN_DIR")]
    run_dir: PathBuf,
    /// JSON file with a full PipelineConfig (flags below override it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    warmup_iters: Option<usize>,
    #[arg(long)]
    recluster_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    flip_augmentation: Option<bool>,
    /// Initial keypoints per image (noise-mixture initialization).
    #[arg(long)]
    n_points: Option<usize>,
    /// Fraction of real landmarks in the mixture.
    #[arg(long)]
    real_ratio: Option<f64>,
    /// Jitter applied to real points, in output-grid pixels.
    #[arg(long)]
    jitter_px: Option<f64>,
    /// Read initial keypoints from an interchange file instead.
    #[arg(long)]
    keypoint_file: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, env = "KTL_RUN_DIR")]
    run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "2")]
    stage: StageArg,
    /// Evaluate ground truth against itself (sanity baseline).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, env = "KTL_RUN_DIR")]
    run_dir: PathBuf,
    /// Sample id to run on; omit for the whole corpus.
    #[arg(long)]
    sample: Option<usize>,
    /// Average each channel with its mirrored, symmetry-permuted twin.
    #[arg(long)]
    test_flip: bool,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => ablate::cmd_ablate(args),
        Command::Infer(args) => cmd_infer(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    if args.out.join("corpus.json").exists() && !args.force {
        return Err(Error::Config(format!(
            "corpus {} already exists (use --force to regenerate)",
            args.out.display()
        )));
    }
    let mut spec: CorpusSpec = read_json_config(&args.config)?;
    if let Some(v) = args.n_images {
        spec.n_images = v;
    }
    if let Some(v) = args.template_pool {
        spec.template_pool = v;
    }
    if let Some(v) = args.image_size {
        spec.image_size = v;
    }
    if let Some(v) = args.deform_strength {
        spec.deform_strength = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.landmarks {
        spec.landmarks_per_template = v;
    }
    if args.no_flips {
        spec.allow_flips = false;
    }
    let corpus = spec.generate()?;
    corpus.save(&args.out)?;
    println!(
        "generated {} images ({} templates, {}x{}, strength {}) into {}",
        corpus.samples.len(),
        corpus.templates.len(),
        spec.image_size,
        spec.image_size,
        spec.deform_strength,
        args.out.display()
    );
    Ok(())
}

fn resolve_pipeline_config(args: &TrainArgs) -> Result<PipelineConfig, Error> {
    let mut cfg: PipelineConfig = read_json_config(&args.config)?;
    cfg = cfg.with_defaults();
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.rounds {
        cfg.train.total_rounds = v;
    }
    if let Some(v) = args.k {
        cfg.train.k = v;
    }
    if let Some(v) = args.m {
        cfg.train.m = v;
    }
    if let Some(v) = args.warmup_iters {
        cfg.train.warmup_iters = v;
    }
    if let Some(v) = args.recluster_every {
        cfg.train.recluster_every = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.flip_augmentation {
        cfg.train.flip_augmentation = v;
    }
    if let Some(path) = &args.keypoint_file {
        cfg.keypoints = KeypointInit::File { path: path.clone() };
    } else if args.n_points.is_some() || args.real_ratio.is_some() || args.jitter_px.is_some() {
        let (mut n, mut r, mut j) = match cfg.keypoints {
            KeypointInit::Mixture { n_points, real_ratio, jitter_px } => {
                (n_points, real_ratio, jitter_px)
            }
            _ => (15, 1.0, 3.0),
        };
        if let Some(v) = args.n_points {
            n = v;
        }
        if let Some(v) = args.real_ratio {
            r = v;
        }
        if let Some(v) = args.jitter_px {
            j = v;
        }
        cfg.keypoints = KeypointInit::Mixture { n_points: n, real_ratio: r, jitter_px: j };
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let corpus = Corpus::load(&args.corpus)?;
    let cfg = resolve_pipeline_config(&args)?;
    let stage = match args.stage {
        StageArg::One => StageSelect::One,
        StageArg::Two => StageSelect::Two,
        StageArg::All => StageSelect::All,
    };
    let run = if args.resume {
        RunDir::open(&args.run_dir)?
    } else {
        RunDir::create(&args.run_dir, args.force)?
    };
    let (state, stage2) = train_pipeline(&corpus, &cfg, &run, stage, args.resume)?;
    println!(
        "trained {} rounds (K={}, M={}); final points/image {:.2}{}",
        state.round,
        cfg.train.k,
        cfg.train.m,
        state.labels.points_per_image(),
        if stage2.is_some() { "; stage-2 detector ready" } else { "" }
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let corpus = Corpus::load(&args.corpus)?;
    let run = RunDir::open(&args.run_dir)?;
    let stage = match args.stage {
        StageArg::One => 1,
        StageArg::Two | StageArg::All => 2,
    };
    let report = eval_pipeline(&corpus, &run, stage, args.oracle)?;
    println!(
        "forward NME {:.4}%  backward NME {:.4}%  points/image {:.2}",
        report.forward_nme, report.backward_nme, report.points_per_image
    );
    println!(
        "wrote {}, {}, {}",
        run.report_path().display(),
        run.ced_path().display(),
        run.per_landmark_path().display()
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    let corpus = Corpus::load(&args.corpus)?;
    let run = RunDir::open(&args.run_dir)?;
    let path = run.stage2_checkpoint_path();
    if !path.exists() {
        return Err(Error::Config(
            "no stage-2 checkpoint; run `ktl train --stage all` first".into(),
        ));
    }
    let ckpt = ktl::model::load_checkpoint(&path)?;
    let symmetry = run.read_symmetry()?;
    let ids: Vec<usize> = match args.sample {
        Some(id) => vec![id],
        None => (0..corpus.samples.len()).collect(),
    };
    for id in ids {
        let sample = corpus
            .samples
            .get(id)
            .ok_or_else(|| Error::Config(format!("sample {id} not in corpus")))?;
        let landmarks = infer(&ckpt.params, &sample.raster, args.test_flip, &symmetry)?;
        let points: Vec<serde_json::Value> = landmarks
            .iter()
            .map(|(p, c)| serde_json::json!({"x": p.x, "y": p.y, "confidence": c}))
            .collect();
        println!(
            "{}",
            serde_json::json!({"sample_id": id, "landmarks": points})
        );
    }
    Ok(())
}
