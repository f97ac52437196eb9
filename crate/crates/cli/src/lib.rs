//! The `pgnd` command line: data generation, training, evaluation,
//! planning, skinning and plotting.

pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pgnd::dataset::{load_trajectory, Trajectory};
use pgnd::dynamics::DynamicsModel;
use pgnd::planner::{run_task, MpcOptions, MppiConfig, Task, WorldModel};
use pgnd::skinning::{skin_sequence, KernelSet, DEFAULT_K};
use pgnd::synth::{self, load_cameras, GenOptions, Interaction, SceneKind};
use pgnd::train::{self, TrainOptions, ViewProtocol};
use pgnd::{Backbone, Error, Result, RunConfig};

use plot::EvalReport;

#[derive(Debug, Parser)]
#[command(name = "pgnd", version, about = "Particle-grid neural dynamics for deformable objects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a seeded interaction clip and write it as a trajectory file.
    Gen {
        /// Object to simulate: rope or cloth.
        #[arg(long, default_value = "rope")]
        kind: SceneKind,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
        /// Frame interval in seconds.
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON list of camera poses and intrinsics (default: a 4-camera ring).
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Record only what the first n cameras see.
        #[arg(long)]
        views: Option<usize>,
        /// Gripper interaction: grasp or push.
        #[arg(long, default_value = "grasp")]
        interaction: Interaction,
        /// Depth noise standard deviation (m) for partial views.
        #[arg(long, default_value_t = 0.0)]
        depth_noise: f64,
        /// Write this many clips (seeds seed, seed+1, ...) into the --out directory.
        #[arg(long)]
        clips: Option<usize>,
        /// Output trajectory file, or directory with --clips.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dynamics model on a directory of trajectory files.
    Train {
        /// Directory of .jsonl trajectory files.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration JSON (missing keys take defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Observation protocol: full or random (1-4 views per sample).
        #[arg(long, default_value = "full")]
        views: ViewProtocol,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the backbone: grid or particle.
        #[arg(long)]
        mode: Option<Backbone>,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path (best validation model).
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained model on held-out clips and report MDE, CD and EMD.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory of .jsonl trajectory files.
        #[arg(long)]
        data: PathBuf,
        /// Backbone used for rollout: grid or particle (default: the checkpoint's).
        #[arg(long)]
        mode: Option<Backbone>,
        /// Restrict the initial state to what n cameras see (default: all particles).
        #[arg(long)]
        views: Option<usize>,
        /// JSON report path; a CSV twin is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Closed-loop MPC with a trained model on a rope task.
    Plan {
        #[arg(long)]
        model: PathBuf,
        /// Task: lift, straighten or relocate.
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of MPC steps.
        #[arg(long, default_value_t = 15)]
        steps: usize,
        /// MPPI samples per iteration.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// MPPI iterations per MPC step.
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// JSON result path; a CSV error curve is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Move kernel sets along particle tracks with linear blend skinning.
    Skin {
        /// Kernel JSON: {centers, quats, extra}.
        #[arg(long)]
        kernels: PathBuf,
        /// Trajectory file with the particle tracks.
        #[arg(long)]
        tracks: PathBuf,
        /// Output directory, one kernel file per frame.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an evaluation report as an SVG bar chart plus CSV.
    Plot {
        /// Report JSON from `eval` (or an array of them).
        #[arg(long)]
        report: PathBuf,
        /// SVG output path; a CSV twin is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PGND_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Validation(format!("PGND_THREADS must be a positive integer, got '{raw}'")))?;
    #[cfg(feature = "parallel")]
    {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_twin(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Every `.jsonl` file of `dir`, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<Trajectory>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Validation(format!("cannot read data directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .jsonl trajectory files in {}", dir.display())));
    }
    paths.iter().map(|p| load_trajectory(p)).collect()
}

fn load_model(path: &Path, mode: Option<Backbone>) -> Result<DynamicsModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let ck = train::read_model(file)?;
    let mut config = ck.config;
    if let Some(m) = mode {
        config.backbone = m;
    }
    DynamicsModel::new(ck.params, config)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { kind, duration, dt, seed, cameras, views, interaction, depth_noise, clips, out } => {
            let cameras = cameras.as_deref().map(load_cameras).transpose()?;
            let views = match (views, &cameras) {
                (None, Some(c)) => Some(c.len()),
                (v, _) => v,
            };
            let opts = GenOptions { kind, duration, dt, seed, interaction, views, cameras, depth_noise };
            match clips {
                None => {
                    let traj = synth::generate(&opts)?;
                    traj.save(&out)?;
                    println!("wrote {} frames to {}", traj.n_frames(), out.display());
                }
                Some(n) => {
                    for i in 0..n {
                        let s = seed.wrapping_add(i as u64);
                        let traj = synth::generate(&GenOptions { seed: s, ..opts.clone() })?;
                        traj.save(&out.join(format!("clip_{i:04}.jsonl")))?;
                    }
                    println!("wrote {n} clips to {}", out.display());
                }
            }
        }
        Command::Train { data, config, views, steps, mode, seed, out } => {
            let mut cfg = match config {
                Some(p) => RunConfig::from_json(&read_input(&p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = steps {
                cfg.train_steps = s;
                cfg.eval_every = cfg.eval_every.min(s.max(1));
            }
            if let Some(m) = mode {
                cfg.backbone = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let trajs = train::prepare(&load_dir(&data)?, &cfg)?;
            let state = train::train(&trajs, &cfg, &TrainOptions { views, checkpoint: Some(out.clone()), ..Default::default() })?;
            for p in &state.history {
                println!("step {:>6}  train_loss {:.6e}  val_mde {:.6}", p.step, p.train_loss, p.val_mde);
            }
            println!("best validation MDE {:.6}; checkpoint at {}", state.best_val_mde / cfg.scale_s, out.display());
        }
        Command::Eval { model, data, mode, views, report, .. } => {
            let m = load_model(&model, mode)?;
            if let Some(v) = views {
                if v == 0 || v > 4 {
                    return Err(Error::Validation(format!("views must be between 1 and 4, got {v}")));
                }
            }
            let clips = train::prepare(&load_dir(&data)?, &m.config)?;
            let metrics = train::evaluate(&m, &clips, views, m.config.scale_s, m.config.exec)?;
            let method = match m.config.backbone {
                Backbone::Grid => "grid",
                Backbone::Particle => "particle",
            };
            let r = EvalReport { method: method.into(), views, metrics };
            write_output(&report, r.to_json().as_bytes())?;
            write_output(&csv_twin(&report), r.metrics.to_csv().as_bytes())?;
            println!("{method}: MDE {:.6} ± {:.6} m over {} clips", r.metrics.mde.mean, r.metrics.mde.std, r.metrics.mde.per_clip.len());
        }
        Command::Plan { model, task, seed, steps, samples, iterations, out } => {
            let m = load_model(&model, None)?;
            let opts = MpcOptions {
                steps,
                mppi: MppiConfig { samples, iterations, exec: m.config.exec, ..Default::default() },
                ..Default::default()
            };
            let r = run_task(&WorldModel { model: &m }, task, seed, &opts)?;
            write_output(&out, r.to_json().as_bytes())?;
            write_output(&csv_twin(&out), r.error_csv().as_bytes())?;
            let first = r.error_curve.first().copied().unwrap_or(0.0);
            let last = r.error_curve.last().copied().unwrap_or(0.0);
            println!("chamfer {first:.5} -> {last:.5} m after {steps} steps");
        }
        Command::Skin { kernels, tracks, out } => {
            let k = KernelSet::from_json(&read_input(&kernels)?)?;
            let traj = load_trajectory(&tracks)?;
            let traj = if traj.persistent_n().is_some() { traj } else { synth::persistent_trajectory(&traj, train::TRACK_VOXEL, train::TRACK_K)? };
            let frames: Vec<_> = traj.frames.into_iter().map(|f| f.points).collect();
            let (sets, degenerate) = skin_sequence(&k, &frames, DEFAULT_K, pgnd::par::Exec::Parallel)?;
            if degenerate > 0 {
                eprintln!("warning: {degenerate} degenerate neighbourhoods used the identity rotation");
            }
            std::fs::create_dir_all(&out)?;
            for (i, s) in sets.iter().enumerate() {
                write_output(&out.join(format!("frame_{i:04}.json")), s.to_json().as_bytes())?;
            }
            println!("wrote {} kernel frames to {}", sets.len(), out.display());
        }
        Command::Plot { report, out } => {
            let reports = plot::parse_reports(&read_input(&report)?)?;
            write_output(&out, plot::render_svg(&reports).as_bytes())?;
            write_output(&csv_twin(&out), plot::render_csv(&reports).as_bytes())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
