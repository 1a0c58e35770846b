//! `mtuc`: dataset generation, training, static evaluation, closed-loop
//! simulation and reporting.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtuc_core::data::{Dataset, Split};
use mtuc_core::model::{build_model, train, Model, TrainReport};
use mtuc_core::perception::{GroundTruthPerceptor, NetworkPerceptor, NoiseSpec, Perceptor};
use mtuc_core::sim::{
    emit_report, episode_file, eval_static, read_metrics, read_records, run_episode, write_metrics, EpisodeLog,
    MetricReport, Termination, METRICS_FILE,
};
use rayon::prelude::*;

use config::{geometry, EpisodeSpec, PerceptorKind, RunConfig};

const CONFIG_FILE: &str = "config.toml";
const MODEL_STEM: &str = "model";
/// Exit status when an episode left its lane or lost it.
const LANE_FAILURE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mtuc", version, about = "Multi-task UNet lane keeping: data, training, evaluation, simulation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the timestamped run directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Run configuration (TOML). Defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Exit 0 even when an episode ends in a lane departure.
    #[arg(long, global = true)]
    allow_failures: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic dataset operations.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train the configured stages on the train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from this model directory instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Segmentation, heading and class measures on a dataset split.
    EvalStatic {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding model.json and model.ckpt.
        #[arg(long)]
        model: PathBuf,
    },
    /// Closed-loop episodes; writes episode logs, metrics and plots.
    Simulate {
        /// Model directory; required for the network perceptor.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the configured perceptor.
        #[arg(long, value_parser = parse_perceptor)]
        perceptor: Option<PerceptorKind>,
        /// Replaces the configured episodes; TRACK:KMH, repeatable.
        #[arg(long = "episode", value_parser = parse_episode)]
        episodes: Vec<EpisodeSpec>,
    },
    /// Rebuild metrics and plots from a simulate run directory.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetAction {
    /// Render and label a dataset.
    Gen {
        /// Number of frames; overrides the config.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn parse_perceptor(s: &str) -> std::result::Result<PerceptorKind, String> {
    match s {
        "ground_truth" | "gt" => Ok(PerceptorKind::GroundTruth),
        "network" | "nn" => Ok(PerceptorKind::Network),
        _ => Err(format!("unknown perceptor {s:?} (ground_truth or network)")),
    }
}

fn parse_episode(s: &str) -> std::result::Result<EpisodeSpec, String> {
    let (track, kmh) = s.rsplit_once(':').ok_or_else(|| format!("expected TRACK:KMH, got {s:?}"))?;
    let v: f64 = kmh.parse().map_err(|_| format!("bad speed in {s:?}"))?;
    Ok(EpisodeSpec {
        track: track.to_string(),
        v_ref_kmh: v,
        label: None,
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Dataset { .. } => "dataset-gen",
        Command::Train { .. } => "train",
        Command::EvalStatic { .. } => "eval-static",
        Command::Simulate { .. } => "simulate",
        Command::Report { .. } => "report",
    }
}

/// `<out>/<UTC timestamp>_<command>`, with a numeric suffix if taken.
fn create_run_dir(out: &Path, name: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 1.. {
        let dir = if i == 1 {
            out.join(format!("{stamp}_{name}"))
        } else {
            out.join(format!("{stamp}_{name}_{i}"))
        };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(mut cli: Cli) -> Result<ExitCode> {
    let base = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.resolve(cli.common.seed)?;
    match &mut cli.command {
        Command::Dataset {
            action: DatasetAction::Gen { n: Some(n) },
        } => cfg.dataset.n = *n,
        Command::Simulate { perceptor, episodes, .. } => {
            if let Some(p) = perceptor {
                cfg.simulate.perceptor = *p;
            }
            if !episodes.is_empty() {
                cfg.simulate.episodes = std::mem::take(episodes);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let dir = create_run_dir(&cli.common.out, command_name(&cli.command))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()?).with_context(|| format!("writing {}", cfg_path.display()))?;
    eprintln!("run directory {}", dir.display());

    let failures = match &cli.command {
        Command::Dataset { .. } => dataset_gen(&cfg, &dir).map(|_| 0)?,
        Command::Train { dataset, init } => train_cmd(&cfg, dataset, init.as_deref(), &dir).map(|_| 0)?,
        Command::EvalStatic { dataset, model } => eval_cmd(&cfg, dataset, model, &dir).map(|_| 0)?,
        Command::Simulate { model, .. } => simulate_cmd(&cfg, model.as_deref(), &dir)?,
        Command::Report { from } => report_cmd(from, &dir)?,
    };
    println!("{}", dir.display());
    if failures > 0 && !cli.common.allow_failures {
        eprintln!("{failures} episode(s) left or lost the lane");
        return Ok(ExitCode::from(LANE_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn dataset_gen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ds = Dataset::generate(&cfg.dataset)?;
    let manifest = ds.write(&dir.join("dataset"))?;
    let train = ds.indices(Split::Train).len();
    eprintln!(
        "{} frames ({train} train, {} test), heading scale {:.6}; manifest {}",
        ds.len(),
        ds.len() - train,
        ds.manifest.theta_norm,
        manifest.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dataset: &Path, init: Option<&Path>, dir: &Path) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let mut model = match init {
        Some(p) => Model::load(p, MODEL_STEM)?,
        None => build_model(&cfg.model, cfg.seed)?,
    };
    let [c, h, w] = model.config.input_shape;
    if [c, h, w] != [3, ds.manifest.height, ds.manifest.width] {
        bail!(
            "model input {:?} does not match {}x{} dataset frames",
            model.config.input_shape,
            ds.manifest.height,
            ds.manifest.width
        );
    }
    let frames: Vec<_> = ds.indices(Split::Train).into_iter().map(|i| ds.frames[i].clone()).collect();
    let mut all = TrainReport {
        records: Vec::new(),
        steps: 0,
        degenerate_batches: 0,
        reached_target_at: None,
    };
    for stage in &cfg.train.stages {
        eprintln!("stage {} for {} epochs on {} frames", stage.stage, stage.epochs, frames.len());
        let rep = train(&mut model, &frames, ds.manifest.theta_norm, stage)?;
        if let Some(last) = rep.records.last() {
            eprintln!("  {} steps, final total loss {:.6}", rep.steps, last.total);
        }
        if rep.degenerate_batches > 0 {
            eprintln!("  warning: {} batches had no lane or no background pixels", rep.degenerate_batches);
        }
        all.steps += rep.steps;
        all.degenerate_batches += rep.degenerate_batches;
        all.records.extend(rep.records);
    }
    all.write_csv(&dir.join("train.csv"))?;
    model.save(&dir.join("model"), MODEL_STEM)?;
    let cx = model.complexity()?;
    eprintln!("params {} MACs {} fps {:.1}", cx.params, cx.macs, cx.fps);
    let path = dir.join("complexity.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cx)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, dataset: &Path, model_dir: &Path, dir: &Path) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let model = Model::load(model_dir, MODEL_STEM)?;
    let m = eval_static(&model, &ds, cfg.eval.split, cfg.eval.threshold)?;
    let label = format!("static_{}", serde_json::to_value(cfg.eval.split)?.as_str().unwrap_or("split"));
    write_metrics(&dir.join(METRICS_FILE), &[m.report(&label)])?;
    eprintln!(
        "{} frames: seg accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}; heading MAE {:.5} rad; C1 {:.3} C2 {:.3}",
        m.frames, m.seg.accuracy, m.seg.precision, m.seg.recall, m.seg.f1, m.heading_mae, m.c1_accuracy, m.c2_accuracy
    );
    Ok(())
}

fn make_perceptor(cfg: &RunConfig, model: Option<&Model>, index: usize) -> Result<Box<dyn Perceptor>> {
    Ok(match cfg.simulate.perceptor {
        PerceptorKind::GroundTruth => Box::new(GroundTruthPerceptor::new(NoiseSpec {
            seed: cfg.simulate.noise.seed.wrapping_add(index as u64),
            ..cfg.simulate.noise
        })?),
        PerceptorKind::Network => {
            let m = model.context("the network perceptor needs --model")?;
            Box::new(NetworkPerceptor::new(m.clone(), cfg.simulate.path))
        }
    })
}

/// Runs all episodes and writes the report; returns the failure count.
fn simulate_cmd(cfg: &RunConfig, model_dir: Option<&Path>, dir: &Path) -> Result<usize> {
    let model = match (cfg.simulate.perceptor, model_dir) {
        (PerceptorKind::Network, Some(p)) => Some(Model::load(p, MODEL_STEM)?),
        (PerceptorKind::Network, None) => bail!("the network perceptor needs --model"),
        _ => None,
    };
    let mut episode = cfg.simulate.episode.clone();
    if let Some(m) = &model {
        let [_, h, w] = m.config.input_shape;
        (episode.frame_height, episode.frame_width) = (h, w);
    }
    let here = std::env::current_dir()?;
    let geoms = cfg
        .simulate
        .episodes
        .iter()
        .map(|e| geometry(&e.track, &here, cfg.simulate.sample_spacing))
        .collect::<Result<Vec<_>>>()?;
    let logs = cfg
        .simulate
        .episodes
        .par_iter()
        .zip(&geoms)
        .enumerate()
        .map(|(i, (spec, geom))| -> Result<EpisodeLog> {
            let mut p = make_perceptor(cfg, model.as_ref(), i)?;
            let ep = config::with_speed(&episode, spec);
            Ok(run_episode(geom, p.as_mut(), &ep, &spec.label())?)
        })
        .collect::<Result<Vec<_>>>()?;
    finish_report(&logs, &geoms, dir)
}

fn finish_report(logs: &[EpisodeLog], geoms: &[mtuc_core::track::TrackGeometry], dir: &Path) -> Result<usize> {
    let metrics: Vec<MetricReport> = logs.iter().map(MetricReport::from_episode).collect();
    let pairs: Vec<_> = logs.iter().zip(geoms).collect();
    emit_report(&pairs, &metrics, dir)?;
    for m in &metrics {
        eprintln!(
            "{}: {} after {} steps, {:.1} m; theta dMAE {} rad, dMA delta {} m",
            m.label,
            m.termination.map_or("-".into(), |t| t.to_string()),
            m.steps,
            m.distance.unwrap_or(0.0),
            fmt_opt(m.theta_dmae),
            fmt_opt(m.dma_delta)
        );
    }
    Ok(logs.iter().filter(|l| l.termination == Termination::LaneDeparture || l.termination == Termination::LaneLost).count())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.5}"))
}

fn report_cmd(from: &Path, dir: &Path) -> Result<usize> {
    let cfg = RunConfig::load(&from.join(CONFIG_FILE))?;
    let old = read_metrics(&from.join(METRICS_FILE))?;
    let here = std::env::current_dir()?;
    let mut logs = Vec::new();
    let mut geoms = Vec::new();
    for spec in &cfg.simulate.episodes {
        let label = spec.label();
        let row = old
            .iter()
            .find(|r| r.label == label)
            .with_context(|| format!("{} has no metrics row for {label}", from.display()))?;
        let records = read_records(&from.join(episode_file(&label)))?;
        logs.push(EpisodeLog {
            label,
            track: row.track.clone(),
            dt: cfg.simulate.episode.dt,
            records,
            termination: row.termination.unwrap_or(Termination::MaxSteps),
            distance: row.distance.unwrap_or(0.0),
            model_forwards: 0,
        });
        geoms.push(geometry(&spec.track, &here, cfg.simulate.sample_spacing)?);
    }
    std::fs::copy(from.join(CONFIG_FILE), dir.join(CONFIG_FILE)).context("copying run config")?;
    finish_report(&logs, &geoms, dir)
}
