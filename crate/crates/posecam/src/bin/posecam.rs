//! Command-line interface: trajectory evaluation and alignment, frame
//! sampling, synthetic-scene generation, desk-scale training, scene-cut
//! detection, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/computation error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use posecam::io::{
    fmt9, parse_tum, read_covis_csv, resolve_seed, write_checkpoint, write_feature_blob,
    write_metrics_csv, write_tum, RunConfig,
};
use posecam::loss::LossWeights;
use posecam::metrics::{ate, eval_frame_protocol, rpe, umeyama_sim3, EvalProtocol, RotAggregate};
use posecam::net::{NetConfig, TinyNet, TrainSample};
use posecam::pipeline::{clip_gate, detect_cuts, CutConfig, Frame, FrameSeq};
use posecam::sampling::{
    covis_walk_sample, dynamic_temporal_sample, jitter_indices, uniform_indices, DynSampleParams,
};
use posecam::schedule::LossMask;
use posecam::synth::{gen_scene, TrajectoryKind};
use posecam::train::run_training;
use posecam::{PoseCamError, Result};

#[derive(Parser)]
#[command(name = "posecam", version, about = "Pose-grounded video toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Strided,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Uniform,
    Jitter,
    Dynamic,
    Covis,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Line,
    Arc,
    RandomWalk,
}

impl From<KindArg> for TrajectoryKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Line => TrajectoryKind::Line,
            KindArg::Arc => TrajectoryKind::Arc,
            KindArg::RandomWalk => TrajectoryKind::RandomWalk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a predicted trajectory against ground truth (ATE + RPE).
    EvalTraj {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frame offset for relative-pose error.
        #[arg(long, default_value_t = 1)]
        delta: usize,
        #[arg(long, value_enum, default_value = "all")]
        protocol: ProtocolArg,
        /// Aggregate RPE rotation with the mean instead of RMSE.
        #[arg(long)]
        mean_rot: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the least-squares Sim(3) aligning pred onto gt as JSON.
    Align {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Emit frame indices from one of the sampling strategies.
    Sample {
        #[arg(long, value_enum)]
        mode: SampleMode,
        /// Total frames available (not needed for covis mode).
        #[arg(long)]
        frames: Option<usize>,
        /// Number of frames to select.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.005)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Covisibility CSV matrix (covis mode).
        #[arg(long)]
        covis: Option<PathBuf>,
        /// Covisibility threshold tau (covis mode).
        #[arg(long, default_value_t = 0.3)]
        tau: f64,
        /// Dynamic-mode parameters, JSON (defaults to the ScanNet set).
        #[arg(long)]
        dyn_params: Option<String>,
    },
    /// Train the toy model on synthetic scenes; writes metrics CSV.
    TrainSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save the final model checkpoint here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Detect scene cuts in a directory of frames and gate the clip.
    SceneCut {
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long, default_value_t = 45.0)]
        content_th: f64,
        #[arg(long, default_value_t = 0.65)]
        bhatt_th: f64,
        #[arg(long, default_value_t = 3.0)]
        min_s: f64,
    },
    /// Generate synthetic scenes (TUM + feature blob + JSON metadata each).
    GenSynth {
        #[arg(long)]
        n_scenes: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        tokens_per_frame: usize,
        #[arg(long, default_value_t = 64)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 0.01)]
        noise_sigma: f64,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 40)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    // clap handles usage errors itself with exit code 1 via error kind
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_traj(path: &PathBuf) -> Result<posecam::geom::Trajectory> {
    parse_tum(&std::fs::read_to_string(path)?)
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::EvalTraj {
            pred,
            gt,
            delta,
            protocol,
            mean_rot,
            out,
        } => {
            let pred_t = load_traj(&pred)?;
            let gt_t = load_traj(&gt)?;
            let proto = match protocol {
                ProtocolArg::Strided => EvalProtocol::Strided,
                ProtocolArg::All => EvalProtocol::AllFrames,
            };
            let indices = eval_frame_protocol(gt_t.len(), proto);
            let pred_t = pred_t.subsample(&indices)?;
            let gt_t = gt_t.subsample(&indices)?;
            let agg = if mean_rot { RotAggregate::Mean } else { RotAggregate::Rmse };
            let ate_v = ate(&pred_t, &gt_t)?;
            let (rpe_t, rpe_r) = rpe(&pred_t, &gt_t, delta, agg)?;
            let csv = format!(
                "ate,rpe_trans,rpe_rot\n{},{},{}\n",
                fmt9(ate_v),
                fmt9(rpe_t),
                fmt9(rpe_r)
            );
            emit(out.as_ref(), &csv)
        }
        Command::Align { pred, gt } => {
            let p = load_traj(&pred)?.translations();
            let g = load_traj(&gt)?.translations();
            let t = umeyama_sim3(&p, &g)?;
            let json = serde_json::json!({
                "scale": t.scale,
                "rotation": (0..3).map(|r| (0..3).map(|c| t.rotation[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "translation": [t.translation.x, t.translation.y, t.translation.z],
            });
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            Ok(())
        }
        Command::Sample {
            mode,
            frames,
            n,
            alpha,
            seed,
            covis,
            tau,
            dyn_params,
        } => {
            let seed = resolve_seed(seed, 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let need_frames = || {
                frames.ok_or_else(|| PoseCamError::InvalidInput("--frames is required".into()))
            };
            let indices = match mode {
                SampleMode::Uniform => uniform_indices(need_frames()?, n)?,
                SampleMode::Jitter => {
                    let total = need_frames()?;
                    let base = uniform_indices(total, n)?;
                    jitter_indices(&base, total, alpha, &mut rng)?
                }
                SampleMode::Dynamic => {
                    let params = match dyn_params {
                        Some(text) => serde_json::from_str::<DynSampleParams>(&text)
                            .map_err(|e| PoseCamError::Config(e.to_string()))?,
                        None => DynSampleParams::scannet(),
                    };
                    dynamic_temporal_sample(need_frames()?, n, &params, &mut rng)?
                }
                SampleMode::Covis => {
                    let path = covis.ok_or_else(|| {
                        PoseCamError::InvalidInput("--covis is required for covis mode".into())
                    })?;
                    let graph = read_covis_csv(&std::fs::read_to_string(&path)?)?;
                    covis_walk_sample(&graph, n, tau, &mut rng)?
                }
            };
            println!(
                "{}",
                indices
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            Ok(())
        }
        Command::TrainSynth {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let mut cfg = RunConfig::from_json(&std::fs::read_to_string(&config)?)?;
            cfg.train.seed = resolve_seed(seed, cfg.train.seed)?;
            let outcome = run_training(&cfg.net, &cfg.optim, &cfg.loss, &cfg.train)?;
            let csv = write_metrics_csv(&outcome.metrics);
            emit(out.as_ref(), &csv)?;
            if let Some(path) = checkpoint {
                let mut f = std::fs::File::create(path)?;
                write_checkpoint(&mut f, &outcome.net)?;
            }
            Ok(())
        }
        Command::SceneCut {
            frames_dir,
            fps,
            content_th,
            bhatt_th,
            min_s,
        } => {
            let cfg = CutConfig {
                content_threshold: content_th,
                bhattacharyya_threshold: bhatt_th,
                min_duration_s: min_s,
            };
            let seq = load_frames_dir(&frames_dir, fps)?;
            let cuts = detect_cuts(&seq, &cfg)?;
            let gate = clip_gate(&seq, &cuts, &cfg)?;
            let json = serde_json::json!({
                "cuts": cuts,
                "gate": gate,
            });
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            Ok(())
        }
        Command::GenSynth {
            n_scenes,
            frames,
            kind,
            seed,
            out,
            tokens_per_frame,
            hidden_dim,
            noise_sigma,
        } => {
            let seed = resolve_seed(seed, 0)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..n_scenes {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let scene = gen_scene(
                    kind.into(),
                    frames,
                    1.0,
                    tokens_per_frame,
                    hidden_dim,
                    seed,
                    noise_sigma,
                    true,
                    &mut rng,
                )?;
                let stem = format!("scene_{i:04}");
                std::fs::write(out.join(format!("{stem}.txt")), write_tum(&scene.trajectory))?;
                let mut f = std::fs::File::create(out.join(format!("{stem}.feat")))?;
                write_feature_blob(
                    &mut f,
                    frames * tokens_per_frame,
                    hidden_dim,
                    &scene.frame_features,
                )?;
                let meta = serde_json::json!({
                    "kind": TrajectoryKind::from(kind),
                    "n_frames": frames,
                    "tokens_per_frame": tokens_per_frame,
                    "hidden_dim": hidden_dim,
                    "noise_sigma": noise_sigma,
                    "metric": scene.metric,
                    "qa_label": scene.qa_label,
                });
                std::fs::write(
                    out.join(format!("{stem}.json")),
                    serde_json::to_string_pretty(&meta).expect("json"),
                )?;
            }
            println!("wrote {n_scenes} scenes to {}", out.display());
            Ok(())
        }
        Command::GradCheck { seed, probes, tol } => {
            let seed = resolve_seed(seed, 0)?;
            let err = run_grad_check(seed, probes)?;
            println!("{}", serde_json::json!({ "max_rel_err": err, "tol": tol }));
            if err > tol {
                return Err(PoseCamError::Numerical(format!(
                    "gradient check failed: max relative error {err:.3e} > {tol:.3e}"
                )));
            }
            Ok(())
        }
    }
}

/// Builds a small model and one joint-supervision sample, then compares
/// analytic gradients to central finite differences with s* pinned.
fn run_grad_check(seed: u64, probes: usize) -> Result<f64> {
    let net_cfg = NetConfig {
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 2,
        visual_tokens_per_frame: 2,
        vocab_size: 8,
        head_layers: 2,
        mlp_mult: 2,
        pose_tokens_at_inference: true,
    };
    let net = TinyNet::new(net_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let scene = gen_scene(
        TrajectoryKind::RandomWalk,
        4,
        1.0,
        net_cfg.visual_tokens_per_frame,
        net_cfg.hidden_dim,
        seed,
        0.01,
        false,
        &mut rng,
    )?;
    let idx: Vec<usize> = (0..4).collect();
    let sample = TrainSample {
        features: scene.gather_features(&idx)?,
        n_frames: 4,
        gt: scene.gt_encodings(&idx)?,
        metric: scene.metric,
        answer: Some(scene.qa_label.token_id()),
        mask: LossMask { ntp_weight: 1, pose_weight: 1 },
    };
    net.grad_check(&sample, &LossWeights::default(), probes, &mut rng)
}

/// Reads every PNG/PPM in the directory in filename order.
fn load_frames_dir(dir: &PathBuf, fps: f64) -> Result<FrameSeq> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("ppm") | Some("pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PoseCamError::InvalidInput(format!(
            "no PNG/PPM frames in {}",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| PoseCamError::Format(format!("{}: {e}", p.display())))?
            .to_rgb8();
        frames.push(Frame::new(
            img.width() as usize,
            img.height() as usize,
            img.into_raw(),
        )?);
    }
    FrameSeq::new(frames, fps)
}
