//! Rollout loss, optimisation loop, checkpoints and clip evaluation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{centroid, make_windows, Frame, Trajectory, TrajectoryWindow};
use crate::dynamics::{DynamicsModel, RolloutModel};
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::metrics::{chamfer, emd, mde, MetricReport};
use crate::synth::{default_rig, mask_partial_view, persistent_trajectory};
use crate::tensor::{clip_grad_norm, read_checkpoint, write_checkpoint, AdamState, Tape, Tensor, Var};
use crate::types::{Action, ArmCommand, ParticleState, RunConfig, Vec3};

/// Rollout length used for evaluation clips.
pub const EVAL_STEPS: usize = 30;
/// Voxel size and neighbour count when partial-view files are tracked.
pub const TRACK_VOXEL: f64 = 0.02;
pub const TRACK_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewProtocol {
    Full,
    Random,
}

impl std::str::FromStr for ViewProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ViewProtocol::Full),
            "random" => Ok(ViewProtocol::Random),
            _ => Err(Error::Validation(format!("unknown view protocol '{s}' (expected full or random)"))),
        }
    }
}

/// Scale gripper positions, linear velocities and opening widths by `s`.
pub fn scale_action(action: &Action, s: f64) -> Action {
    let scale_arm = |a: &ArmCommand| {
        let mut a = a.clone();
        a.pose.translation.vector *= s;
        a.linear *= s;
        a.gripper_open *= s;
        a
    };
    Action { arms: action.arms.iter().map(scale_arm).collect() }
}

/// Multiply positions, gripper positions and linear velocities by `s`.
pub fn scale_trajectory(traj: &Trajectory, s: f64) -> Result<Trajectory> {
    if !(s > 0.0) {
        return Err(Error::Parameter(format!("scale factor {s} must be positive")));
    }
    if s == 1.0 {
        return Ok(traj.clone());
    }
    Ok(Trajectory {
        dt: traj.dt,
        frames: traj
            .frames
            .iter()
            .map(|f| Frame {
                time: f.time,
                points: f.points.iter().map(|p| p * s).collect(),
                velocities: f.velocities.as_ref().map(|v| v.iter().map(|x| x * s).collect()),
                action: scale_action(&f.action, s),
            })
            .collect(),
    })
}

/// Tracked, scaled trajectories ready for windowing.
pub fn prepare(trajs: &[Trajectory], cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    trajs
        .iter()
        .map(|t| {
            if (t.dt - cfg.dt).abs() > 1e-9 {
                return Err(Error::Validation(format!("trajectory dt {} differs from configured dt {}", t.dt, cfg.dt)));
            }
            scale_trajectory(&persistent_trajectory(t, TRACK_VOXEL, TRACK_K)?, cfg.scale_s)
        })
        .collect()
}

/// Initial state, actions and targets of a window, optionally restricted
/// to a subset of particles.
fn window_parts(w: &TrajectoryWindow, subset: Option<&[usize]>) -> (ParticleState, Vec<Vec<Vec3>>) {
    let state = w.initial_state();
    let targets = w.targets().to_vec();
    match subset {
        None => (state, targets),
        Some(idx) => (state.subset(idx), targets.iter().map(|t| idx.iter().map(|&i| t[i]).collect()).collect()),
    }
}

fn rollout_loss(tape: &mut Tape, xs: &[Var], targets: &[Vec<Vec3>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (x, target) in xs.iter().zip(targets) {
        let n = target.len();
        let t = tape.constant(n, 3, target.iter().flat_map(|p| p.iter().copied()).collect())?;
        let d = tape.sub(*x, t)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let step = tape.scale(s, 1.0 / n as f64);
        total = Some(match total {
            None => step,
            Some(acc) => tape.add(acc, step)?,
        });
    }
    total.ok_or_else(|| Error::Contract("window has no rollout steps".into()))
}

/// Sum over the K rollout steps of the mean squared particle error.
pub fn loss_rollout(model: &DynamicsModel, window: &TrajectoryWindow) -> Result<f64> {
    Ok(loss_and_grad(model, window, None)?.0)
}

/// Loss and its gradient with respect to the flattened parameters.
pub fn loss_and_grad(model: &DynamicsModel, window: &TrajectoryWindow, subset: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    let (state, targets) = window_parts(window, subset);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let xs = model.rollout_on_tape(&mut tape, &bound, &state, window.rollout_actions())?;
    let loss = rollout_loss(&mut tape, &xs, &targets)?;
    let grads = tape.backward(loss)?;
    let mut params = model.params.clone();
    params.zero_grad();
    params.accumulate(&bound, &grads);
    Ok((tape.scalar(loss), params.flat_grad()))
}

/// Particles of the window's initial frame seen by the first `views`
/// cameras of a rig aimed at the object.
pub fn visible_subset(points: &[Vec3], views: usize) -> Vec<usize> {
    let rig = default_rig(centroid(points));
    let v = views.clamp(1, rig.len());
    let vis = mask_partial_view(points, &rig[..v]);
    if vis.is_empty() {
        (0..points.len()).collect()
    } else {
        vis
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_mde: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub adam: AdamState,
    pub config: RunConfig,
    pub step: usize,
    pub best_val_mde: f64,
    pub history: Vec<EvalPoint>,
}

impl TrainState {
    pub fn best_model(&self) -> Result<DynamicsModel> {
        DynamicsModel::new(self.best_params.clone(), self.config.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub views: ViewProtocol,
    /// Written on every validation improvement.
    pub checkpoint: Option<PathBuf>,
    pub val_fraction: f64,
    /// Cap on validation windows per evaluation.
    pub max_val_windows: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { views: ViewProtocol::Full, checkpoint: None, val_fraction: 0.1, max_val_windows: 64 }
    }
}

/// Split trajectories 90/10 by index; a single trajectory serves both.
pub fn split_train_val(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    ((0..n - val).collect(), (n - val..n).collect())
}

fn validation_mde(model: &DynamicsModel, windows: &[TrajectoryWindow]) -> Result<f64> {
    let per = model.config.exec.map(windows, |w| -> Result<f64> {
        let preds = model.predict(&w.initial_state(), w.rollout_actions())?;
        let mut acc = 0.0;
        for (p, t) in preds.iter().zip(w.targets()) {
            acc += mde(p, t)?;
        }
        Ok(acc / preds.len() as f64)
    });
    let vals = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Train from scratch on `trajs` (already prepared) with `config`.
pub fn train(trajs: &[Trajectory], config: &RunConfig, opts: &TrainOptions) -> Result<TrainState> {
    config.validate()?;
    let (train_idx, val_idx) = split_train_val(trajs.len(), opts.val_fraction);
    let collect = |idx: &[usize]| -> Result<Vec<TrajectoryWindow>> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend(make_windows(&trajs[i], config.history_h, config.horizon_k)?);
        }
        Ok(out)
    };
    let windows = collect(&train_idx)?;
    if windows.is_empty() {
        return Err(Error::Validation("the training data yields no windows; trajectories are too short".into()));
    }
    let all_val = collect(&val_idx)?;
    let stride = all_val.len().div_ceil(opts.max_val_windows.max(1)).max(1);
    let val: Vec<TrajectoryWindow> = all_val.into_iter().step_by(stride).collect();

    let mut model = DynamicsModel::init(config.clone(), config.seed)?;
    let mut adam = AdamState::new(model.params.tensors(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut state = TrainState {
        best_params: model.params.clone(),
        params: model.params.clone(),
        adam: adam.clone(),
        config: config.clone(),
        step: 0,
        best_val_mde: f64::INFINITY,
        history: Vec::new(),
    };
    let mut running = 0.0;
    let mut running_count = 0usize;

    for step in 1..=config.train_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let w = &windows[order[cursor]];
            cursor += 1;
            let subset = match opts.views {
                ViewProtocol::Full => None,
                ViewProtocol::Random => {
                    let v = rng.random_range(1..=4);
                    Some(visible_subset(&w.tracks[w.history], v))
                }
            };
            batch.push((w, subset));
        }
        let results = config.exec.map(&batch, |(w, subset)| loss_and_grad(&model, w, subset.as_deref()));
        let mut loss = 0.0;
        let mut grad = vec![0.0; model.params.num_params()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, message: format!("training loss became {loss}") });
        }
        apply_grad(&mut model.params, &grad);
        let mut tensors = model.params.tensors_mut();
        clip_grad_norm(&mut tensors, config.max_grad_norm);
        adam.step(&mut tensors)?;
        running += loss;
        running_count += 1;

        if step % config.eval_every == 0 || step == config.train_steps {
            let v = if val.is_empty() { running / running_count as f64 } else { validation_mde(&model, &val)? };
            state.history.push(EvalPoint { step, train_loss: running / running_count as f64, val_mde: v });
            running = 0.0;
            running_count = 0;
            if v < state.best_val_mde {
                state.best_val_mde = v;
                state.best_params = model.params.clone();
                if let Some(path) = &opts.checkpoint {
                    save_checkpoint(path, &Checkpoint { params: model.params.clone(), config: config.clone(), adam: Some(adam.clone()), step })?;
                }
            }
        }
    }
    state.params = model.params;
    state.adam = adam;
    state.step = config.train_steps;
    if state.best_val_mde.is_infinite() {
        state.best_params = state.params.clone();
    }
    Ok(state)
}

fn apply_grad(params: &mut ModelParams, flat: &[f64]) {
    let mut off = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.grad = Some(flat[off..off + n].to_vec());
        off += n;
    }
}

/// Model weights plus the configuration (and optimiser state) that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: RunConfig,
    pub adam: Option<AdamState>,
    pub step: usize,
}

const CONFIG_KEY: &str = "meta/config_json";
const STEP_KEY: &str = "meta/step";

pub fn write_model<W: Write>(w: W, ck: &Checkpoint) -> Result<()> {
    let json = ck.config.to_json();
    let cfg = Tensor::new(vec![json.len()], json.bytes().map(f64::from).collect())?;
    let step = Tensor::new(vec![1], vec![ck.step as f64])?;
    let mut owned: Vec<(String, Tensor)> = vec![(CONFIG_KEY.into(), cfg), (STEP_KEY.into(), step)];
    if let Some(adam) = &ck.adam {
        owned.push(("adam/step".into(), Tensor::new(vec![1], vec![adam.step as f64])?));
        for (name, (m, v)) in ck.params.names().iter().zip(adam.m.iter().zip(&adam.v)) {
            owned.push((format!("adam/m/{name}"), Tensor::new(vec![m.len()], m.clone())?));
            owned.push((format!("adam/v/{name}"), Tensor::new(vec![v.len()], v.clone())?));
        }
    }
    let mut list: Vec<(String, &Tensor)> = ck.params.names().into_iter().zip(ck.params.tensors()).collect();
    list.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
    write_checkpoint(w, &list)
}

pub fn read_model<R: Read>(r: R) -> Result<Checkpoint> {
    let tensors = read_checkpoint(r)?;
    let get = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t);
    let cfg = get(CONFIG_KEY).ok_or_else(|| Error::Validation("checkpoint carries no configuration".into()))?;
    let bytes: Vec<u8> = cfg.data.iter().map(|&b| b as u8).collect();
    let text = String::from_utf8(bytes).map_err(|_| Error::Validation("checkpoint configuration is not UTF-8".into()))?;
    let config = RunConfig::from_json(&text)?;
    let mut params = ModelParams::zeros(&config);
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let src = get(name).ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor {name}")))?;
        if src.shape != t.shape {
            return Err(Error::Shape { op: "checkpoint", left: src.shape.clone(), right: t.shape.clone() });
        }
        t.data = src.data.clone();
    }
    let step = get(STEP_KEY).map_or(0, |t| t.data[0] as usize);
    let adam = match get("adam/step") {
        None => None,
        Some(s) => {
            let mut a = AdamState::new(params.tensors(), config.learning_rate);
            a.step = s.data[0] as u64;
            for (i, name) in names.iter().enumerate() {
                let m = get(&format!("adam/m/{name}")).ok_or_else(|| Error::Validation(format!("missing Adam moment for {name}")))?;
                let v = get(&format!("adam/v/{name}")).ok_or_else(|| Error::Validation(format!("missing Adam moment for {name}")))?;
                a.m[i] = m.data.clone();
                a.v[i] = v.data.clone();
            }
            Some(a)
        }
    };
    Ok(Checkpoint { params, config, adam, step })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_model(&mut buf, ck)?;
    // write-then-rename keeps the previous checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_model(std::fs::File::open(path)?)
}

/// Per-clip errors averaged over the rollout steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipErrors {
    pub mde: f64,
    pub chamfer: f64,
    pub emd: f64,
}

/// Roll out from frame `h` of a prepared clip for up to 30 steps and average
/// each metric over the steps. `views` restricts the initial state to what
/// that many cameras see.
pub fn evaluate_clip<M: RolloutModel>(model: &M, clip: &Trajectory, views: Option<usize>) -> Result<ClipErrors> {
    let h = model.history();
    let frames = clip.n_frames();
    if frames < h + 2 {
        return Err(Error::Validation(format!("clip has {frames} frames; at least {} are needed", h + 2)));
    }
    let steps = (frames - h - 1).min(EVAL_STEPS);
    let windows = make_windows(clip, h, steps)?;
    let w = &windows[0];
    let subset = views.map(|v| visible_subset(&w.tracks[h], v));
    let (state, targets) = window_parts(w, subset.as_deref());
    let preds = model.predict(&state, w.rollout_actions())?;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(&targets) {
        a += mde(p, t)?;
        b += chamfer(p, t)?;
        c += emd(p, t)?;
    }
    let k = preds.len() as f64;
    Ok(ClipErrors { mde: a / k, chamfer: b / k, emd: c / k })
}

/// Metrics over prepared clips, reported in the data's original units
/// (divided by the configured scale).
pub fn evaluate<M: RolloutModel>(model: &M, clips: &[Trajectory], views: Option<usize>, scale: f64, exec: crate::par::Exec) -> Result<MetricReport> {
    let errs = exec.map(clips, |c| evaluate_clip(model, c, views)).into_iter().collect::<Result<Vec<_>>>()?;
    let un = |f: fn(&ClipErrors) -> f64| errs.iter().map(|e| f(e) / scale).collect::<Vec<_>>();
    Ok(MetricReport::from_clips(un(|e| e.mde), un(|e| e.chamfer), un(|e| e.emd)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StaticModel;

    fn moving_clip(frames: usize, n: usize, step: Vec3) -> Trajectory {
        Trajectory {
            dt: 0.1,
            frames: (0..frames)
                .map(|f| Frame {
                    time: f as f64 * 0.1,
                    points: (0..n).map(|i| Vec3::new(0.1 + 0.01 * i as f64, 0.2, 0.3) + step * f as f64).collect(),
                    velocities: None,
                    action: Action::single(ArmCommand::grasp_at(Vec3::new(3.0, 3.0, 3.0), Vec3::zeros())),
                })
                .collect(),
        }
    }

    #[test]
    fn worked_loss_example() {
        let cfg = RunConfig { feature_dim: 4, encoder_hidden: 4, field_hidden: vec![4], ..Default::default() };
        let model = DynamicsModel::new(ModelParams::zeros(&cfg), cfg).unwrap();
        // static start: history is zero, so the zero model predicts no motion
        let mut clip = moving_clip(8, 1, Vec3::zeros());
        for (f, frame) in clip.frames.iter_mut().enumerate().skip(2) {
            frame.points[0].x += 0.01 * (f - 2) as f64;
        }
        let w = &make_windows(&clip, 2, 5).unwrap()[0];
        let loss = loss_rollout(&model, w).unwrap();
        assert!((loss - 5.5e-3).abs() < 1e-15, "{loss}");
        let still = &make_windows(&moving_clip(8, 3, Vec3::zeros()), 2, 5).unwrap()[0];
        assert_eq!(loss_rollout(&model, still).unwrap(), 0.0);
    }

    #[test]
    fn frozen_model_mde_is_mean_displacement() {
        let clip = moving_clip(40, 4, Vec3::new(0.01, 0.0, 0.0));
        let e = evaluate_clip(&StaticModel { history: 2, dt: 0.1 }, &clip, None).unwrap();
        let expect = (1..=30).map(|i| 0.01 * i as f64).sum::<f64>() / 30.0;
        assert!((e.mde - expect).abs() < 1e-12);
        assert!(e.emd <= e.mde + 1e-12);
    }

    #[test]
    fn scaling_round_trip() {
        let clip = moving_clip(5, 3, Vec3::new(0.01, 0.0, 0.0));
        let s = scale_trajectory(&clip, 2.0).unwrap();
        assert!((s.frames[1].points[0] - clip.frames[1].points[0] * 2.0).norm() < 1e-15);
        assert!(scale_trajectory(&clip, 0.0).is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_train_val(10, 0.1), ((0..9).collect(), vec![9]));
        assert_eq!(split_train_val(1, 0.1), (vec![0], vec![0]));
        assert_eq!(split_train_val(3, 0.1).1.len(), 1);
    }
}
