//! Ablation sweeps: noise-mixture ratio, cluster count M, and the
//! negative-pair/correspondence strategy grid. Each cell trains in an
//! isolated run directory; results aggregate into one CSV and one SVG.

use std::path::PathBuf;

use clap::{Args, ValueEnum};

use ktl::error::Error;
use ktl::eval::plot::line_plot;
use ktl::synth::Corpus;
use ktl::training::rundir::{
    eval_pipeline, train_pipeline, KeypointInit, PipelineConfig, RunDir, StageSelect,
};
use ktl::training::{CorrespondenceMode, NegativeStrategy};

#[derive(Clone, Copy, ValueEnum)]
pub enum Sweep {
    /// Real/random mixture ratio (six cells, 0.0 to 1.0).
    Noise,
    /// Cluster count M in {K, 2K, 3K}.
    Clusters,
    /// Negative-pair strategy × correspondence source (four cells).
    Strategy,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Parent directory for the per-cell run directories and the summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    sweep: Sweep,
    /// Base PipelineConfig JSON applied to every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parallel cells (each in its own isolated run directory).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    force: bool,
}

struct Cell {
    name: String,
    x: f64,
    cfg: PipelineConfig,
}

fn cells_for(sweep: Sweep, base: &PipelineConfig) -> Vec<Cell> {
    match sweep {
        Sweep::Noise => [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&ratio| {
                let mut cfg = base.clone();
                let (n, j) = match cfg.keypoints {
                    KeypointInit::Mixture { n_points, jitter_px, .. } => (n_points, jitter_px),
                    _ => (15, 3.0),
                };
                cfg.keypoints = KeypointInit::Mixture {
                    n_points: n,
                    real_ratio: ratio,
                    jitter_px: j,
                };
                Cell {
                    name: format!("ratio_{ratio:.1}"),
                    x: ratio,
                    cfg,
                }
            })
            .collect(),
        Sweep::Clusters => {
            let k = base.train.k;
            [k, 2 * k, 3 * k]
                .iter()
                .map(|&m| {
                    let mut cfg = base.clone();
                    cfg.train.m = m;
                    Cell {
                        name: format!("m_{m}"),
                        x: m as f64,
                        cfg,
                    }
                })
                .collect()
        }
        Sweep::Strategy => {
            let grid = [
                ("diffcluster_clustering", NegativeStrategy::DifferentCluster, CorrespondenceMode::Clustering),
                ("sameimage_equivariance", NegativeStrategy::SameImage, CorrespondenceMode::Equivariance),
                ("diffcluster_equivariance", NegativeStrategy::DifferentCluster, CorrespondenceMode::Equivariance),
                ("sameimage_clustering", NegativeStrategy::SameImage, CorrespondenceMode::Clustering),
            ];
            grid.iter()
                .enumerate()
                .map(|(i, (name, neg, corr))| {
                    let mut cfg = base.clone();
                    cfg.train.negative_strategy = *neg;
                    cfg.train.correspondence_mode = *corr;
                    Cell {
                        name: name.to_string(),
                        x: (i + 1) as f64,
                        cfg,
                    }
                })
                .collect()
        }
    }
}

pub fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let corpus = Corpus::load(&args.corpus)?;
    let base: PipelineConfig = match &args.config {
        None => PipelineConfig::default().with_defaults(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let cfg: PipelineConfig =
                serde_json::from_str(&text).map_err(|e| Error::json(p.display().to_string(), e))?;
            cfg.with_defaults()
        }
    };
    let cells = cells_for(args.sweep, &base);
    if args.out.join("sweep.csv").exists() && !args.force {
        return Err(Error::Config(format!(
            "sweep output {} already exists (use --force)",
            args.out.display()
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for c in &cells {
        let dir = args.out.join(&c.name);
        if dir.join("config.json").exists() && !args.force {
            return Err(Error::Config(format!(
                "cell run directory {} already exists (use --force)",
                dir.display()
            )));
        }
    }

    let jobs = args.jobs.max(1);
    let mut results: Vec<(String, f64, f64, f64)> = Vec::new();
    for chunk in cells.chunks(jobs) {
        let chunk_results: Vec<Result<(String, f64, f64, f64), Error>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|cell| {
                    let corpus = &corpus;
                    let out = args.out.clone();
                    let force = args.force;
                    s.spawn(move || -> Result<(String, f64, f64, f64), Error> {
                        let dir = out.join(&cell.name);
                        let run = RunDir::create(&dir, force)?;
                        train_pipeline(corpus, &cell.cfg, &run, StageSelect::One, false)?;
                        let report = eval_pipeline(corpus, &run, 1, false)?;
                        Ok((cell.name.clone(), cell.x, report.forward_nme, report.backward_nme))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cell thread")).collect()
        });
        for r in chunk_results {
            results.push(r?);
        }
    }

    let mut csv = String::from("cell,x,forward_nme,backward_nme\n");
    for (name, x, fwd, bwd) in &results {
        csv.push_str(&format!("{name},{x},{fwd},{bwd}\n"));
    }
    let csv_path = args.out.join("sweep.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let series = vec![
        (
            "forward NME".to_string(),
            results.iter().map(|r| (r.1, r.2)).collect::<Vec<_>>(),
        ),
        (
            "backward NME".to_string(),
            results.iter().map(|r| (r.1, r.3)).collect::<Vec<_>>(),
        ),
    ];
    let x_label = match args.sweep {
        Sweep::Noise => "real ratio",
        Sweep::Clusters => "clusters M",
        Sweep::Strategy => "strategy cell",
    };
    let svg = line_plot(&series, x_label, "NME (%)")?;
    let svg_path = args.out.join("sweep.svg");
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    println!("{} cells -> {}", results.len(), csv_path.display());
    for (name, _, fwd, bwd) in &results {
        println!("  {name}: forward {fwd:.4}%  backward {bwd:.4}%");
    }
    Ok(())
}
