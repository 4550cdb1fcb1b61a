//! Run directory layout and the persistent training pipeline.
//!
//! Layout: `config.json` (fully resolved configuration, written before any
//! work), `checkpoints/round_{t}.ktl` plus `checkpoints/stage2.ktl`,
//! `labels/round_{t}.jsonl` (and `_flip` twins), `metrics.csv`
//! (round,l_d,l_f,points_per_image), `timings.csv` (wall-clock seconds kept
//! out of metrics.csv so reruns stay byte-identical), `symmetry.json`.
//!
//! In-memory parameters are rounded through f32 at every checkpoint write so
//! the persisted state equals the live state exactly; a resumed run is then
//! bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::correspondence::{read_labels, write_labels, SymmetryMap};
use crate::error::{Error, Result};
use crate::keypoints::{init_mixture, read_keypoint_file, KeypointSet};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::rng::derive_seed;
use crate::synth::Corpus;

use super::evaluate::{split_corpus, EvalSettings};
use super::stage1::{stage1_round, warmup, TrainContext};
use super::stage2::run_stage2;
use super::{RoundMetrics, Stage2Outcome, TrainConfig, TrainingState};

/// How the initial keypoints are produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KeypointInit {
    /// Noise-mixture initialization from hidden ground truth.
    Mixture {
        n_points: usize,
        real_ratio: f64,
        jitter_px: f64,
    },
    /// External detector output in the keypoint interchange format.
    File { path: PathBuf },
}

impl Default for KeypointInit {
    fn default() -> Self {
        KeypointInit::Mixture {
            n_points: 15,
            real_ratio: 1.0,
            jitter_px: 3.0,
        }
    }
}

/// Fully resolved pipeline configuration, serialized into the run directory
/// before any work starts.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub keypoints: KeypointInit,
    pub eval: EvalSettings,
    pub train_fraction: f64,
}

impl PipelineConfig {
    pub fn with_defaults(mut self) -> Self {
        if self.train_fraction <= 0.0 || self.train_fraction >= 1.0 {
            self.train_fraction = 0.75;
        }
        self
    }
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory; refuses to reuse an existing one
    /// unless `force` is set.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() && root.join("config.json").exists() && !force {
            return Err(Error::Config(format!(
                "run directory {} already exists (use --force to overwrite)",
                root.display()
            )));
        }
        std::fs::create_dir_all(root.join("checkpoints"))
            .and_then(|_| std::fs::create_dir_all(root.join("labels")))
            .map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("config.json").exists() {
            return Err(Error::Config(format!(
                "{} is not a run directory (missing config.json)",
                root.display()
            )));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint_path(&self, round: usize) -> PathBuf {
        self.root.join(format!("checkpoints/round_{round}.ktl"))
    }

    pub fn stage2_checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoints/stage2.ktl")
    }

    pub fn labels_path(&self, round: usize) -> PathBuf {
        self.root.join(format!("labels/round_{round}.jsonl"))
    }

    pub fn flip_labels_path(&self, round: usize) -> PathBuf {
        self.root.join(format!("labels/round_{round}_flip.jsonl"))
    }

    pub fn stage2_labels_path(&self) -> PathBuf {
        self.root.join("labels/stage2.jsonl")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.root.join("timings.csv")
    }

    pub fn symmetry_path(&self) -> PathBuf {
        self.root.join("symmetry.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn ced_path(&self) -> PathBuf {
        self.root.join("ced.svg")
    }

    pub fn per_landmark_path(&self) -> PathBuf {
        self.root.join("per_landmark.csv")
    }

    pub fn write_config(&self, cfg: &PipelineConfig) -> Result<()> {
        let path = self.config_path();
        let json = serde_json::to_string_pretty(cfg)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_config(&self) -> Result<PipelineConfig> {
        let path = self.config_path();
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn write_metrics(&self, metrics: &[RoundMetrics]) -> Result<()> {
        let mut out = String::from("round,l_d,l_f,points_per_image\n");
        for m in metrics {
            out.push_str(&format!("{},{},{},{}\n", m.round, m.l_d, m.l_f, m.points_per_image));
        }
        let path = self.metrics_path();
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_metrics(&self) -> Result<Vec<RoundMetrics>> {
        let path = self.metrics_path();
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!("bad metrics row: {line}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad metrics number: {s}")))
            };
            rows.push(RoundMetrics {
                round: parts[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad round: {}", parts[0])))?,
                l_d: parse(parts[1])?,
                l_f: parse(parts[2])?,
                points_per_image: parse(parts[3])?,
            });
        }
        Ok(rows)
    }

    fn append_timing(&self, label: &str, seconds: f64) -> Result<()> {
        let path = self.timings_path();
        let mut text = if path.exists() {
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?
        } else {
            String::from("phase,wall_seconds\n")
        };
        text.push_str(&format!("{label},{seconds:.3}\n"));
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Largest round with both a checkpoint and a labels file.
    pub fn latest_round(&self) -> Option<usize> {
        let mut best = None;
        if let Ok(entries) = std::fs::read_dir(self.root.join("checkpoints")) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().to_string();
                if let Some(num) = name
                    .strip_prefix("round_")
                    .and_then(|s| s.strip_suffix(".ktl"))
                    .and_then(|s| s.parse::<usize>().ok())
                {
                    if self.labels_path(num).exists() {
                        best = Some(best.map_or(num, |b: usize| b.max(num)));
                    }
                }
            }
        }
        best
    }

    pub fn write_symmetry(&self, map: &SymmetryMap) -> Result<()> {
        let path = self.symmetry_path();
        let json = serde_json::to_string_pretty(map)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_symmetry(&self) -> Result<SymmetryMap> {
        let path = self.symmetry_path();
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Builds the initial keypoint sets for the training split.
pub fn initial_keypoints(
    corpus: &Corpus,
    train_ids: &[usize],
    init: &KeypointInit,
    cfg: &TrainConfig,
) -> Result<BTreeMap<usize, KeypointSet>> {
    let dims = TrainContext::new(corpus, train_ids.to_vec()).dims(cfg);
    match init {
        KeypointInit::Mixture {
            n_points,
            real_ratio,
            jitter_px,
        } => {
            let mut out = BTreeMap::new();
            for &id in train_ids {
                let set = init_mixture(
                    &corpus.samples[id],
                    dims.output_w,
                    dims.output_h,
                    dims.stride(),
                    *n_points,
                    *real_ratio,
                    *jitter_px,
                    derive_seed(cfg.seed, "init_kp", 0),
                )?;
                out.insert(id, set);
            }
            Ok(out)
        }
        KeypointInit::File { path } => {
            let sets = read_keypoint_file(path, dims.output_w, dims.output_h)?;
            Ok(sets
                .into_iter()
                .filter(|s| train_ids.contains(&s.sample_id))
                .map(|s| (s.sample_id, s))
                .collect())
        }
    }
}

fn persist_round(run: &RunDir, state: &mut TrainingState) -> Result<()> {
    // Round parameters through checkpoint precision first so that the live
    // state and the saved state agree exactly.
    state.params.quantize_f32();
    state.opt_state.quantize_f32();
    save_checkpoint(
        &run.checkpoint_path(state.round),
        &Checkpoint {
            params: state.params.clone(),
            opt_state: Some(state.opt_state.clone()),
            round: state.round as u32,
        },
    )?;
    write_labels(&run.labels_path(state.round), &state.labels)?;
    if let Some(flip) = &state.flip_labels {
        write_labels(&run.flip_labels_path(state.round), flip)?;
    }
    run.write_metrics(&state.metrics)?;
    Ok(())
}

fn resume_state(run: &RunDir, cfg: &TrainConfig) -> Result<Option<TrainingState>> {
    let round = match run.latest_round() {
        Some(r) => r,
        None => return Ok(None),
    };
    let ckpt = load_checkpoint(&run.checkpoint_path(round))?;
    if ckpt.round as usize != round {
        return Err(Error::Checkpoint(format!(
            "checkpoint for round {round} carries round counter {}",
            ckpt.round
        )));
    }
    let labels = read_labels(&run.labels_path(round), cfg.m)?;
    let flip_labels = if run.flip_labels_path(round).exists() {
        Some(read_labels(&run.flip_labels_path(round), cfg.m)?)
    } else {
        None
    };
    let mut metrics = run.read_metrics()?;
    metrics.retain(|m| m.round <= round);
    let opt_state = ckpt.opt_state.ok_or_else(|| {
        Error::Checkpoint(format!("round {round} checkpoint lacks optimizer state"))
    })?;
    Ok(Some(TrainingState {
        params: ckpt.params,
        opt_state,
        round,
        labels,
        flip_labels,
        metrics,
    }))
}

/// Which pipeline stages to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    One,
    Two,
    All,
}

/// Runs (or resumes) training into a run directory. Returns the final
/// Stage-1 state and, when Stage 2 ran, its outcome.
pub fn train_pipeline(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    run: &RunDir,
    stage: StageSelect,
    resume: bool,
) -> Result<(TrainingState, Option<Stage2Outcome>)> {
    cfg.train.validate()?;
    run.write_config(cfg)?;
    let (train_ids, _test_ids) = split_corpus(corpus, cfg.train_fraction);
    let ctx = TrainContext::new(corpus, train_ids.clone());

    let mut state = match (resume, resume_state(run, &cfg.train)?) {
        (true, Some(s)) => s,
        _ => {
            let t0 = Instant::now();
            let initial = initial_keypoints(corpus, &train_ids, &cfg.keypoints, &cfg.train)?;
            let mut s = warmup(&ctx, &initial, &cfg.train)?;
            persist_round(run, &mut s)?;
            run.append_timing("warmup", t0.elapsed().as_secs_f64())?;
            s
        }
    };

    if stage == StageSelect::One || stage == StageSelect::All {
        while state.round < cfg.train.total_rounds {
            let t0 = Instant::now();
            stage1_round(&mut state, &ctx, &cfg.train)?;
            persist_round(run, &mut state)?;
            run.append_timing(&format!("round_{}", state.round), t0.elapsed().as_secs_f64())?;
        }
    }

    let mut stage2 = None;
    if stage == StageSelect::Two || stage == StageSelect::All {
        if state.round < cfg.train.total_rounds {
            return Err(Error::Config(format!(
                "stage 2 requires completed stage 1 ({} of {} rounds done)",
                state.round, cfg.train.total_rounds
            )));
        }
        let t0 = Instant::now();
        let mut outcome = run_stage2(&state, &ctx, &cfg.train)?;
        outcome.params.quantize_f32();
        save_checkpoint(
            &run.stage2_checkpoint_path(),
            &Checkpoint {
                params: outcome.params.clone(),
                opt_state: None,
                round: state.round as u32,
            },
        )?;
        write_labels(&run.stage2_labels_path(), &outcome.final_labels)?;
        run.write_symmetry(&outcome.symmetry)?;
        run.append_timing("stage2", t0.elapsed().as_secs_f64())?;
        stage2 = Some(outcome);
    }
    Ok((state, stage2))
}

/// Evaluates a trained run and writes report.json, ced.svg, and
/// per_landmark.csv into the run directory.
pub fn eval_pipeline(
    corpus: &Corpus,
    run: &RunDir,
    stage: u8,
    oracle: bool,
) -> Result<crate::eval::EvalReport> {
    use crate::eval::plot::{plot_ced, CedCurve};
    use crate::eval::write_per_landmark_csv;
    use crate::model::load_checkpoint;
    use super::evaluate::{oracle_report, stage1_report, stage2_report};

    let cfg = run.read_config()?;
    let (train_ids, test_ids) = split_corpus(corpus, cfg.train_fraction);
    let report = if oracle {
        oracle_report(corpus, &train_ids, &test_ids, &cfg.eval)?
    } else {
        match stage {
            1 => {
                let round = run.latest_round().ok_or_else(|| {
                    Error::Config("no stage-1 checkpoint in run directory".into())
                })?;
                let ckpt = load_checkpoint(&run.checkpoint_path(round))?;
                stage1_report(&ckpt.params, corpus, &train_ids, &test_ids, &cfg.train, &cfg.eval)?
            }
            2 => {
                let path = run.stage2_checkpoint_path();
                if !path.exists() {
                    return Err(Error::Config(
                        "no stage-2 checkpoint in run directory (train --stage all first)".into(),
                    ));
                }
                let ckpt = load_checkpoint(&path)?;
                let symmetry = run.read_symmetry()?;
                stage2_report(
                    &ckpt.params,
                    corpus,
                    &train_ids,
                    &test_ids,
                    &symmetry,
                    &cfg.eval,
                )?
            }
            other => {
                return Err(Error::Config(format!("unknown eval stage {other}")));
            }
        }
    };
    report.save(&run.report_path())?;
    let svg = plot_ced(&[CedCurve {
        label: if oracle {
            "oracle".to_string()
        } else {
            format!("stage {stage}")
        },
        points: report.ced.clone(),
    }])?;
    std::fs::write(run.ced_path(), svg)
        .map_err(|e| Error::io(run.ced_path().display().to_string(), e))?;
    write_per_landmark_csv(&run.per_landmark_path(), &report)?;
    Ok(report)
}
