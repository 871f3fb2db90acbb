use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdistill::diffcore::Tape;
use tdistill::geom::Pose2;
use tdistill::models::*;
use tdistill::scenegen::{generate_scene, GenConfig, Scene};
use tdistill::Error;

fn scene(i: u64) -> Scene {
    generate_scene(&GenConfig::default(), i).unwrap()
}

fn teacher() -> ModelParams {
    init_params(&ModelConfig::Teacher(TeacherConfig::default()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn student() -> ModelParams {
    init_params(&ModelConfig::Student(StudentConfig::default()), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

fn tiny_teacher() -> ModelConfig {
    ModelConfig::Teacher(TeacherConfig {
        hidden: 4,
        signal_hidden: 2,
        modes: 2,
        horizon: 3,
        ..TeacherConfig::default()
    })
}

fn tiny_student() -> ModelConfig {
    ModelConfig::Student(StudentConfig {
        grid_h: 8,
        grid_w: 8,
        pillar_embed: 4,
        conv_channels: vec![3],
        patch: 3,
        hidden: 5,
        modes: 2,
        horizon: 3,
        ..StudentConfig::default()
    })
}

fn empty_scene() -> Scene {
    Scene {
        schema_version: 1,
        scene_id: "empty".into(),
        history_len: 10,
        future_len: 16,
        roadgraph: vec![],
        signals: vec![],
        agents: vec![],
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = ModelConfig::Student(StudentConfig::default());
    let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.flat(), c.flat());
}

#[test]
fn parameter_counts_match_shape_algebra() {
    // Teacher with hidden 4, signal hidden 2, K = 2, T = 3 (output width 32):
    // LSTM(7→4) = 7·16 + 4·16 + 16 + 4 + 4 = 200, twice, plus a 4-wide
    // empty embedding; road MLP 8·4+4, 4·4+4, 4·4+4 and an empty embedding;
    // signal LSTM(6→2) = 6·8 + 2·8 + 8 + 2 + 2 = 76; decoder 14·8+8 and
    // 8·32+32.
    let t = init_params(&tiny_teacher(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(t.num_values(), 200 + 200 + 4 + 36 + 20 + 20 + 4 + 76 + 120 + 288);
    // Student: pillar 17·4+4, conv 9·4·3+3, decoder 9·3·5+5 and 5·32+32.
    let s = init_params(&tiny_student(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.num_values(), 72 + 111 + 140 + 192);
    let mut names: Vec<&str> = t.buffers.iter().map(|b| b.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), t.buffers.len());
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let t = init_params(&tiny_teacher(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = &t.get("history.b").unwrap().values;
    assert_eq!(&b[0..4], &[0.0; 4]);
    assert_eq!(&b[4..8], &[1.0; 4]);
    assert_eq!(&b[8..16], &[0.0; 8]);
}

#[test]
fn mismatched_buffers_are_incompatible() {
    let t = init_params(&tiny_teacher(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(ModelParams::from_buffers(tiny_student(), t.buffers.clone()), Err(Error::Incompatible(_))));
    let mut bufs = t.buffers.clone();
    bufs[0].values[0] = f32::NAN;
    assert!(matches!(ModelParams::from_buffers(tiny_teacher(), bufs), Err(Error::Corrupt(_))));
}

#[test]
fn teacher_output_shape() {
    let s = scene(0);
    let id = s.target_ids()[0];
    let g = teacher_forward(&s, id, &teacher()).unwrap();
    assert_eq!(g.num_modes(), 6);
    assert_eq!(g.horizon(), 16);
    assert_eq!(g.flat_means().len(), 6 * 16 * 2);
    assert_eq!(g.flat_covs().len(), 6 * 16 * 3);
    assert_eq!(g.logits().len(), 6);
    assert_eq!(g.anchor(), s.agent(id).unwrap().current_pose().unwrap());
}

#[test]
fn teacher_runs_without_neighbors() {
    let mut s = scene(1);
    let id = s.target_ids()[0];
    s.agents.retain(|a| a.id == id);
    let g = teacher_forward(&s, id, &teacher()).unwrap();
    assert!(g.flat_means().iter().chain(g.flat_covs().iter()).all(|v| v.is_finite()));
    let mut bare = s.clone();
    bare.roadgraph.clear();
    bare.signals.clear();
    assert!(teacher_forward(&bare, id, &teacher()).is_ok());
}

#[test]
fn teacher_rejects_unknown_and_empty_agents() {
    let mut s = scene(2);
    let p = teacher();
    assert!(matches!(teacher_forward(&s, 999, &p), Err(Error::UnknownAgent(999))));
    let id = s.agents[0].id;
    s.agents[0].history.iter_mut().for_each(|h| h.valid = false);
    assert!(matches!(teacher_forward(&s, id, &p), Err(Error::EmptyHistory(_))));
}

#[test]
fn batched_teacher_matches_single_calls() {
    let s = scene(3);
    let p = teacher();
    let ids = s.target_ids();
    let batch = p.predict(&s, &ids).unwrap();
    for (g, &id) in batch.iter().zip(&ids) {
        let one = teacher_forward(&s, id, &p).unwrap();
        for (a, b) in g.flat_means().iter().zip(one.flat_means()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn teacher_is_se2_equivariant() {
    let p = teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 3];
    for trial in 0..100 {
        let s = scene(trial % 10);
        let ids = s.target_ids();
        let base = p.predict(&s, &ids).unwrap();
        let g = Pose2::new(
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .unwrap();
        let moved = p.predict(&s.transformed(&g), &ids).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            let d = |x: Vec<f64>, y: Vec<f64>| x.iter().zip(&y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            worst[0] = worst[0].max(d(a.flat_means(), b.flat_means()));
            worst[1] = worst[1].max(d(a.flat_covs(), b.flat_covs()));
            worst[2] = worst[2].max(d(a.weights(), b.weights()));
        }
    }
    assert!(worst[0] <= 1e-5 && worst[1] <= 1e-5 && worst[2] <= 1e-6, "{worst:?}");
}

#[test]
fn empty_scene_gives_background_grid() {
    let p = student();
    let g = student_forward_scene(&empty_scene(), &p).unwrap();
    assert_eq!(g.shape(), [16, 64, 64]);
    assert!(g.values.iter().all(|v| v.is_finite()));
    let first = g.cell(10, 10).to_vec();
    assert_eq!(g.cell(30, 40), first.as_slice());
}

#[test]
fn grid_shifts_with_a_one_cell_translation() {
    let p = student();
    let s = scene(4);
    let a = student_forward_scene(&s, &p).unwrap();
    let b = student_forward_scene(&s.transformed(&Pose2::new(1.0, 0.0, 0.0).unwrap()), &p).unwrap();
    let mut worst = 0.0f64;
    for i in 2..62 {
        for j in 2..61 {
            for ch in 0..a.channels {
                worst = worst.max((a.at(ch, i, j) - b.at(ch, i, j + 1)).abs());
            }
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn grid_ignores_target_flags() {
    let p = student();
    let s = scene(5);
    let mut one = s.clone();
    let mut all = s.clone();
    for (i, a) in one.agents.iter_mut().enumerate() {
        a.is_prediction_target = i == 0;
    }
    all.agents.iter_mut().for_each(|a| a.is_prediction_target = true);
    assert_eq!(student_forward_scene(&one, &p).unwrap(), student_forward_scene(&all, &p).unwrap());
}

#[test]
fn scene_is_encoded_once_for_many_agents() {
    let p = student();
    let s = scene(6);
    let ids = s.target_ids();
    assert!(ids.len() >= 2);
    let before = scene_encode_count();
    let grid = student_forward_scene(&s, &p).unwrap();
    let a = student_decode_agent(&grid, &s, ids[0], &p).unwrap();
    let b = student_decode_agent(&grid, &s, ids[1], &p).unwrap();
    assert_eq!(scene_encode_count(), before + 1);
    assert_eq!(a.num_modes(), 6);
    assert_eq!(b.horizon(), 16);
    p.predict(&s, &ids).unwrap();
    assert_eq!(scene_encode_count(), before + 2);
}

#[test]
fn student_decode_is_deterministic_and_matches_predict() {
    let p = student();
    let s = scene(7);
    let id = s.target_ids()[0];
    let grid = student_forward_scene(&s, &p).unwrap();
    let a = student_decode_agent(&grid, &s, id, &p).unwrap();
    let b = student_decode_agent(&grid, &s, id, &p).unwrap();
    assert_eq!(a, b);
    let c = p.predict(&s, &[id]).unwrap().remove(0);
    for (x, y) in a.flat_means().iter().zip(c.flat_means()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn agent_outside_grid_is_an_error() {
    let p = student();
    let mut s = scene(8);
    let id = s.agents[0].id;
    for h in &mut s.agents[0].history {
        h.x += 1000.0;
    }
    let grid = student_forward_scene(&s, &p).unwrap();
    assert!(matches!(student_decode_agent(&grid, &s, id, &p), Err(Error::OutOfExtent { agent, .. }) if agent == id));
}

#[test]
fn student_rotation_error_is_reported() {
    let (t, st) = (teacher(), student());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut te, mut se) = (0.0f64, 0.0f64);
    for i in 0..10 {
        let s = scene(i);
        let g = Pose2::new(0.0, 0.0, rng.random_range(-3.0..3.0)).unwrap();
        let moved = s.transformed(&g);
        let ids = s.target_ids();
        for (p, err) in [(&t, &mut te), (&st, &mut se)] {
            let a = p.predict(&s, &ids).unwrap();
            let b = p.predict(&moved, &ids).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.flat_means().iter().zip(y.flat_means()) {
                    *err = err.max((u - v).abs());
                }
            }
        }
    }
    println!("max agent-frame mean change under rotation: teacher {te:.3e} m, student {se:.3e} m");
    assert!(te <= 1e-5);
}

fn model_gradient_check(cfg: ModelConfig, seed: u64) {
    let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let s = scene(seed);
    let ids = s.target_ids();
    let loss = |p: &ModelParams| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let pv = p.to_tape(&mut tape, true).unwrap();
        let out = p.forward_vars(&mut tape, &pv, &s, &ids).unwrap();
        let mut terms = Vec::new();
        for g in &out {
            for v in [g.means, g.covs, g.logits] {
                let sq = tape.square(v).unwrap();
                terms.push(tape.sum_all(sq).unwrap());
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        let g = pv
            .vars()
            .iter()
            .zip(&p.buffers)
            .flat_map(|(&v, b)| grads.get_or_zero(v, b.values.len()))
            .collect();
        (tape.scalar_value(total), g)
    };
    let (_, analytic) = loss(&params);
    let base = params.flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let h = 1e-3f32;
    for _ in 0..40 {
        let i = rng.random_range(0..base.len());
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        params.set_flat(&probe).unwrap();
        let fp = loss(&params).0;
        probe[i] = base[i] - h;
        params.set_flat(&probe).unwrap();
        let fm = loss(&params).0;
        let step = (base[i] + h) as f64 - (base[i] - h) as f64;
        let numeric = (fp - fm) / step;
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-3);
        assert!(err < 2e-2, "param {i}: analytic {} numeric {numeric}", analytic[i]);
    }
    params.set_flat(&base).unwrap();
}

#[test]
fn teacher_gradients_match_finite_differences() {
    model_gradient_check(tiny_teacher(), 11);
}

#[test]
fn student_gradients_match_finite_differences() {
    let cfg = match tiny_student() {
        ModelConfig::Student(c) => ModelConfig::Student(StudentConfig {
            grid_h: 64,
            grid_w: 64,
            ..c
        }),
        c => c,
    };
    model_gradient_check(cfg, 12);
}

#[test]
fn teacher_flops_grow_quadratically() {
    let cfg = ModelConfig::Teacher(TeacherConfig {
        max_neighbors: usize::MAX,
        ..TeacherConfig::default()
    });
    let (a, b) = (count_flops(ModelKind::Teacher, 512, 4, &cfg), count_flops(ModelKind::Teacher, 1024, 4, &cfg));
    let r = b as f64 / a as f64;
    assert!((r - 4.0).abs() < 0.05, "{r}");
}

#[test]
fn student_flops_grow_by_the_decode_term() {
    let c = StudentConfig::default();
    let cfg = ModelConfig::Student(c.clone());
    for n in [1usize, 8, 64] {
        let a = count_flops(ModelKind::Student, n, 16, &cfg);
        let b = count_flops(ModelKind::Student, 2 * n, 16, &cfg);
        assert_eq!(b - a, n as u64 * student_per_agent_flops(&c));
    }
    let backbone = count_flops(ModelKind::Student, 0, 0, &cfg);
    assert!(backbone > 0);
    assert_eq!(backbone, 64 * 64 * 9 * (32 * 16 + 16 * 16));
}
