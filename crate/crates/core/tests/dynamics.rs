use pgnd::dynamics::DynamicsModel;
use pgnd::encoder::ModelParams;
use pgnd::tensor::Tape;
use pgnd::{Action, ActionType, ArmCommand, Backbone, ParticleState, RunConfig, Vec3};
use proptest::prelude::*;

fn tiny(mode: Backbone) -> RunConfig {
    RunConfig {
        feature_dim: 8,
        encoder_hidden: 8,
        field_hidden: vec![16],
        grid_l: 30,
        radius_r: 0.05,
        grasp_radius_a: 0.025,
        backbone: mode,
        ..Default::default()
    }
}

fn scene() -> ParticleState {
    let pos = vec![
        Vec3::new(0.30, 0.20, 0.012),
        Vec3::new(0.33, 0.22, 0.03),
        Vec3::new(0.36, 0.19, 0.02),
        Vec3::new(0.32, 0.23, 0.05),
    ];
    let hist = (0..3)
        .map(|k| pos.iter().map(|p| Vec3::new(0.3 * p.y, 0.02 * k as f64, -0.4 * p.x)).collect())
        .collect();
    ParticleState::new(pos, hist, 0.0).unwrap()
}

fn actions(k: usize) -> Vec<Action> {
    (0..k)
        .map(|i| {
            let mut grasp = ArmCommand::grasp_at(Vec3::new(0.30, 0.20, 0.012 + 0.005 * i as f64), Vec3::new(0.0, 0.01, 0.05));
            grasp.angular = Vec3::new(0.0, 0.0, 0.5);
            let mut push = ArmCommand::grasp_at(Vec3::new(0.40, 0.21, 0.05), Vec3::new(-0.05, 0.0, 0.0));
            push.action_type = ActionType::Nonprehensile;
            push.gripper_open = 0.01;
            Action::new(vec![grasp, push]).unwrap()
        })
        .collect()
}

fn loss_and_grad(model: &DynamicsModel, state: &ParticleState, acts: &[Action]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let xs = model.rollout_on_tape(&mut tape, &bound, state, acts).unwrap();
    let mut terms = Vec::new();
    for (k, x) in xs.iter().enumerate() {
        let w: Vec<f64> = (0..state.n() * 3).map(|i| ((i * 7 + k * 3) % 5) as f64 - 2.0).collect();
        let w = tape.constant(state.n(), 3, w).unwrap();
        let wx = tape.mul(*x, w).unwrap();
        let sq = tape.square(wx);
        terms.push(tape.sum(sq));
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = tape.add(loss, *t).unwrap();
    }
    let grads = tape.backward(loss).unwrap();
    let mut params = model.params.clone();
    params.zero_grad();
    params.accumulate(&bound, &grads);
    (tape.scalar(loss), params.flat_grad())
}

fn gradient_check(mode: Backbone, k: usize) {
    let cfg = tiny(mode);
    let model = DynamicsModel::init(cfg.clone(), 11).unwrap();
    let state = scene();
    let acts = actions(k);
    let (_, analytic) = loss_and_grad(&model, &state, &acts);
    let flat = model.params.flat();
    let h = 1e-5;
    let eval = |i: usize, d: f64| {
        let mut p = flat.clone();
        p[i] += d;
        let mut params = model.params.clone();
        params.set_flat(&p);
        let m = DynamicsModel::new(params, cfg.clone()).unwrap();
        loss_and_grad(&m, &state, &acts).0
    };
    let idx: Vec<usize> = (0..flat.len()).step_by(5).collect();
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| (8.0 * (eval(i, h) - eval(i, -h)) - (eval(i, 2.0 * h) - eval(i, -2.0 * h))) / (12.0 * h))
        .collect();
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let diff: f64 = picked.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = picked.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    assert!(scale > 0.0);
    let rel = diff / scale;
    assert!(rel < 1e-4, "{mode:?} K={k}: relative gradient error {rel}");
}

#[test]
fn rollout_gradient_matches_finite_differences() {
    for k in [1, 3, 5] {
        gradient_check(Backbone::Grid, k);
    }
    gradient_check(Backbone::Particle, 5);
}

#[test]
fn single_step_rollout_equals_step() {
    let model = DynamicsModel::init(tiny(Backbone::Grid), 2).unwrap();
    let s = scene();
    let a = actions(1);
    assert_eq!(model.rollout(&s, &a).unwrap()[0], model.step(&s, &a[0]).unwrap());
}

#[test]
fn grasped_particle_tracks_gripper() {
    let cfg = tiny(Backbone::Grid);
    let model = DynamicsModel::new(ModelParams::zeros(&cfg), cfg).unwrap();
    let v = Vec3::new(0.0, 0.0, 0.1);
    let start = Vec3::new(0.31, 0.2, 0.25);
    let mut s = ParticleState::at_rest(vec![start], 2, 0.0);
    let steps = 10;
    for t in 0..steps {
        let eef = start + v * (0.1 * t as f64);
        s = model.step(&s, &Action::single(ArmCommand::grasp_at(eef, v))).unwrap();
    }
    let expected = steps as f64 * 0.1 * v.norm();
    let moved = (s.positions[0] - start).norm();
    assert!((moved - expected).abs() <= 0.1 * expected, "moved {moved}, expected {expected}");
}

#[test]
fn zero_model_rollout_keeps_state() {
    let cfg = tiny(Backbone::Grid);
    let model = DynamicsModel::new(ModelParams::zeros(&cfg), cfg).unwrap();
    let s = ParticleState::at_rest(scene().positions.iter().map(|p| p + Vec3::new(0.0, 0.0, 0.2)).collect(), 2, 0.0);
    let far = Action::single(ArmCommand::grasp_at(Vec3::new(5.0, 5.0, 5.0), Vec3::zeros()));
    let out = model.rollout(&s, &[far.clone(), far]).unwrap();
    assert_eq!(out[1].positions, s.positions);
    assert!((out[1].time - 0.2).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn prediction_is_translation_invariant(
        dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -3.0f64..3.0, particle in any::<bool>()
    ) {
        let mode = if particle { Backbone::Particle } else { Backbone::Grid };
        let delta = Vec3::new(dx, dy, dz);
        let cfg = tiny(mode);
        let model = DynamicsModel::init(cfg.clone(), 5).unwrap();
        let s = scene();
        let a = &actions(1)[0];
        let base = model.predict_velocity(&s, a).unwrap();
        let shifted_cfg = RunConfig { ground_height: cfg.ground_height.map(|g| g + dz), ..cfg };
        let shifted = DynamicsModel::new(model.params.clone(), shifted_cfg).unwrap();
        let moved = shifted.predict_velocity(&s.translated(&delta), &a.translated(&delta)).unwrap();
        for (u, v) in base.iter().zip(&moved) {
            prop_assert!((u - v).amax() < 1e-12, "{u:?} vs {v:?}");
        }
    }
}
