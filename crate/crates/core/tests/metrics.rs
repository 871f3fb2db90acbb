use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdistill::geom::Pose2;
use tdistill::gmm::{ModeTrajectory, Trajectory, TrajectoryGMM};
use tdistill::metrics::*;
use tdistill::scenegen::{generate_scene, GenConfig};

fn gmm(means: Vec<Vec<[f64; 2]>>, logits: Vec<f64>) -> TrajectoryGMM {
    TrajectoryGMM::new(
        means.into_iter().map(ModeTrajectory::with_unit_cov).collect(),
        logits,
        Pose2::new(0.0, 0.0, 0.0).unwrap(),
    )
    .unwrap()
}

fn straight(t: usize, dx: f64, dy: f64) -> Vec<[f64; 2]> {
    (1..=t).map(|i| [i as f64 + dx, dy]).collect()
}

struct Instance {
    pred: TrajectoryGMM,
    gt: Trajectory,
    k: usize,
}

fn random_instance(rng: &mut ChaCha8Rng, modes: usize, t: usize) -> Instance {
    let base: Vec<[f64; 2]> = {
        let turn = rng.random_range(-0.3..0.3);
        let speed = rng.random_range(0.0..2.0);
        let (mut h, mut p) = (0.0f64, [0.0, 0.0]);
        (0..t)
            .map(|_| {
                h += turn;
                p = [p[0] + speed * h.cos(), p[1] + speed * h.sin()];
                p
            })
            .collect()
    };
    let noise = rng.random_range(0.1..4.0);
    let means = (0..modes)
        .map(|_| {
            base.iter()
                .map(|p| [p[0] + rng.random_range(-noise..noise), p[1] + rng.random_range(-noise..noise)])
                .collect()
        })
        .collect();
    // Coarse logits so that ties occur.
    let logits = (0..modes).map(|_| rng.random_range(-4..4) as f64 * 0.5).collect();
    let mut valid: Vec<bool> = (0..t).map(|_| rng.random_bool(0.85)).collect();
    let last = rng.random_range(0..t);
    valid[last] = true;
    Instance {
        pred: gmm(means, logits),
        gt: Trajectory::new(base, valid).unwrap(),
        k: rng.random_range(1..=modes),
    }
}

// Independent oracle: selection by repeated arg-max over raw weights.
fn oracle_top_k(w: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; w.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..w.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| w[i] > w[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        out.push(best.unwrap());
    }
    out
}

fn oracle_weights(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn oracle_errors(m: &[[f64; 2]], gt: &Trajectory) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0.0;
    let mut last = 0.0;
    for t in 0..gt.states.len() {
        if gt.valid[t] {
            let e = ((m[t][0] - gt.states[t][0]).powi(2) + (m[t][1] - gt.states[t][1]).powi(2)).sqrt();
            sum += e;
            n += 1.0;
            last = e;
        }
    }
    (sum / n, last)
}

struct Oracle {
    min_ade: f64,
    min_fde: f64,
    w_ade: f64,
    brier: f64,
}

fn oracle(inst: &Instance) -> Oracle {
    let w = oracle_weights(inst.pred.logits());
    let top = oracle_top_k(&w, inst.k);
    let errs: Vec<(f64, f64)> = (0..w.len()).map(|i| oracle_errors(&inst.pred.mode(i).means, &inst.gt)).collect();
    let min_ade = top.iter().map(|&i| errs[i].0).fold(f64::INFINITY, f64::min);
    let min_fde = top.iter().map(|&i| errs[i].1).fold(f64::INFINITY, f64::min);
    let star = *top.iter().find(|&&i| errs[i].1 == min_fde).unwrap();
    Oracle {
        min_ade,
        min_fde,
        w_ade: (0..w.len()).map(|i| w[i] * errs[i].0).sum(),
        brier: min_fde + (1.0 - w[star]).powi(2),
    }
}

// Exhaustive PR curve: for every prefix of the confidence ranking, count
// distinct agents hit inside that prefix from scratch.
fn oracle_ap(entries: &[(f64, usize, bool)], agents: usize) -> f64 {
    let mut ranked: Vec<(f64, usize, usize, bool)> = entries.iter().enumerate().map(|(i, e)| (e.0, e.1, i, e.2)).collect();
    let n = ranked.len();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (ranked[j], ranked[j + 1]);
            let swap = b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2));
            if swap {
                ranked.swap(j, j + 1);
            }
        }
    }
    let mut points = vec![(0.0, 1.0)];
    for len in 1..=n {
        let prefix = &ranked[..len];
        let mut hit_agents: Vec<usize> = Vec::new();
        let mut tp = 0;
        for e in prefix {
            if e.3 && !hit_agents.contains(&e.1) {
                hit_agents.push(e.1);
                tp += 1;
            }
        }
        points.push((tp as f64 / agents as f64, tp as f64 / len as f64));
    }
    points.windows(2).map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0).sum()
}

#[test]
fn top_k_examples() {
    let g = gmm(vec![straight(2, 0.0, 0.0); 3], vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]);
    assert_eq!(top_k_indices(&g, 2).unwrap(), vec![0, 1]);
    let g = gmm(vec![straight(2, 0.0, 0.0); 3], vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]);
    assert_eq!(top_k_indices(&g, 3).unwrap(), vec![1, 2, 0]);
    let pairs = top_k(&g, 3).unwrap();
    assert!((pairs.iter().map(|p| p.0).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(top_k(&g, 4).is_err());
    assert!(top_k(&g, 0).is_err());
}

#[test]
fn displacement_examples() {
    let gt = Trajectory::fully_valid(straight(16, 0.0, 0.0));
    let exact = gmm(vec![straight(16, 0.0, 0.0), straight(16, 3.0, 0.0)], vec![0.0, 0.0]);
    assert_eq!(min_ade(&exact, &gt, 2).unwrap(), 0.0);
    assert_eq!(min_fde(&exact, &gt, 2).unwrap(), 0.0);
    let off = gmm(vec![straight(16, 1.0, 0.0)], vec![0.0]);
    assert!((min_ade(&off, &gt, 1).unwrap() - 1.0).abs() < 1e-12);
    assert!((min_fde(&off, &gt, 1).unwrap() - 1.0).abs() < 1e-12);
    let mut none = gt.clone();
    none.valid = vec![false; 16];
    assert!(min_ade(&off, &none, 1).is_err());
}

#[test]
fn miss_rate_examples() {
    let gt = Trajectory::fully_valid(straight(4, 0.0, 0.0));
    let hit = gmm(vec![straight(4, 0.0, 0.0)], vec![0.0]);
    assert_eq!(miss_rate(&[hit.clone(), hit.clone()], &[gt.clone(), gt.clone()], 1, 2.0).unwrap(), 0.0);
    let far = gmm(vec![straight(4, 2.5, 0.0)], vec![0.0]);
    assert_eq!(miss_rate(&[far], &[gt.clone()], 1, 2.0).unwrap(), 1.0);
    // Ten agents with final errors 0.5, 1.0, ..., 5.0: four at or below 2 m.
    let preds: Vec<_> = (1..=10).map(|i| gmm(vec![straight(4, 0.0, 0.5 * i as f64)], vec![0.0])).collect();
    let gts = vec![gt; 10];
    assert!((miss_rate(&preds, &gts, 1, 2.0).unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn weighted_and_brier_examples() {
    let gt = Trajectory::fully_valid(straight(4, 0.0, 0.0));
    let g = gmm(vec![straight(4, 0.0, 0.0), straight(4, 0.0, 1.0)], vec![0.0, 0.0]);
    assert!((w_ade(&g, &gt).unwrap() - 0.5).abs() < 1e-12);
    let one_hot = gmm(vec![straight(4, 0.0, 0.0), straight(4, 0.0, 1.0)], vec![-800.0, 0.0]);
    assert!((w_ade(&one_hot, &gt).unwrap() - 1.0).abs() < 1e-12);
    let sure = gmm(vec![straight(4, 0.0, 1.0), straight(4, 0.0, 9.0)], vec![0.0, -800.0]);
    assert!((brier_min_fde(&sure, &gt, 2).unwrap() - 1.0).abs() < 1e-12);
    let half = gmm(vec![straight(4, 0.0, 1.0), straight(4, 0.0, 9.0)], vec![0.0, 0.0]);
    assert!((brier_min_fde(&half, &gt, 2).unwrap() - 1.25).abs() < 1e-12);
}

#[test]
fn maneuver_buckets() {
    let left: Vec<[f64; 2]> = (1..=8).map(|i| [i as f64, if i > 4 { (i - 4) as f64 * 2.0 } else { 0.0 }]).collect();
    assert_eq!(classify_maneuver(&Trajectory::fully_valid(left.clone())), Maneuver::Left);
    let right: Vec<[f64; 2]> = left.iter().map(|p| [p[0], -p[1]]).collect();
    assert_eq!(classify_maneuver(&Trajectory::fully_valid(right)), Maneuver::Right);
    assert_eq!(classify_maneuver(&Trajectory::fully_valid(straight(8, 0.0, 0.0))), Maneuver::Straight);
    let slow: Vec<[f64; 2]> = (1..=8).map(|i| [i as f64 * 0.2, 0.0]).collect();
    assert_eq!(classify_maneuver(&Trajectory::fully_valid(slow)), Maneuver::Stationary);
}

#[test]
fn map_examples() {
    let gt = Trajectory::fully_valid(straight(4, 0.0, 0.0));
    let preds: Vec<_> = (0..4)
        .map(|i| gmm(vec![straight(4, 0.0, 0.0), straight(4, 0.0, 5.0)], vec![1.0 + i as f64, 0.0]))
        .collect();
    let gts = vec![gt.clone(); 4];
    assert!((mean_ap(&preds, &gts, 1, 2.0).unwrap().0 - 1.0).abs() < 1e-12);
    assert!((mean_ap(&preds, &gts, 2, 2.0).unwrap().0 - 1.0).abs() < 1e-12);
    let misses: Vec<_> = (0..4).map(|_| gmm(vec![straight(4, 0.0, 5.0)], vec![0.0])).collect();
    assert_eq!(mean_ap(&misses, &gts, 1, 2.0).unwrap().0, 0.0);
}

#[test]
fn map_three_agent_hand_case() {
    let gt = Trajectory::fully_valid(straight(4, 0.0, 0.0));
    let l = |w: &[f64]| w.iter().map(|x| x.ln()).collect::<Vec<_>>();
    let preds = vec![
        gmm(vec![straight(4, 0.0, 0.0), straight(4, 0.0, 0.5)], l(&[0.6, 0.4])),
        gmm(vec![straight(4, 0.0, 3.0), straight(4, 0.0, 1.0)], l(&[0.7, 0.3])),
        gmm(vec![straight(4, 0.0, 9.0), straight(4, 0.0, 9.0)], l(&[0.55, 0.45])),
    ];
    // Order: a1 0.7 miss, a0 0.6 hit, a2 0.55 miss, a2 0.45 miss, a0 0.4 dup,
    // a1 0.3 hit. Points (r, p): (0,1) (0,0) (1/3,1/2) (1/3,1/3) (1/3,1/4)
    // (1/3,1/5) (2/3,2/6).
    let want = (1.0 / 3.0) * (0.0 + 0.5) / 2.0 + (1.0 / 3.0) * (0.2 + 1.0 / 3.0) / 2.0;
    let (map, buckets) = mean_ap(&preds, &vec![gt; 3], 2, 2.0).unwrap();
    assert_eq!(buckets.len(), 1);
    assert!((map - want).abs() < 1e-12, "{map} {want}");
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let modes = rng.random_range(1..=6);
        let inst = random_instance(&mut rng, modes, 16);
        let o = oracle(&inst);
        let got = [
            min_ade(&inst.pred, &inst.gt, inst.k).unwrap(),
            min_fde(&inst.pred, &inst.gt, inst.k).unwrap(),
            w_ade(&inst.pred, &inst.gt).unwrap(),
            brier_min_fde(&inst.pred, &inst.gt, inst.k).unwrap(),
        ];
        for (g, w) in got.iter().zip([o.min_ade, o.min_fde, o.w_ade, o.brier]) {
            worst = worst.max((g - w).abs());
        }
        let w = oracle_weights(inst.pred.logits());
        assert_eq!(top_k_indices(&inst.pred, inst.k).unwrap(), oracle_top_k(&w, inst.k));
    }
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn miss_rate_and_map_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=6);
        let threshold = rng.random_range(0.5..4.0);
        let insts: Vec<Instance> = (0..n).map(|_| random_instance(&mut rng, 6, 8)).collect();
        let preds: Vec<_> = insts.iter().map(|i| i.pred.clone()).collect();
        let gts: Vec<_> = insts.iter().map(|i| i.gt.clone()).collect();
        let mut misses = 0;
        for i in &insts {
            let o = oracle(&Instance {
                pred: i.pred.clone(),
                gt: i.gt.clone(),
                k,
            });
            if o.min_fde > threshold {
                misses += 1;
            }
        }
        let mr = miss_rate(&preds, &gts, k, threshold).unwrap();
        assert!((mr - misses as f64 / n as f64).abs() <= 1e-9);

        let mut aps = Vec::new();
        for m in Maneuver::ALL {
            let members: Vec<usize> = (0..n).filter(|&a| classify_maneuver(&gts[a]) == m).collect();
            if members.is_empty() {
                continue;
            }
            let mut entries = Vec::new();
            for &a in &members {
                // Same weight values as the implementation so exact ties rank alike.
                let w = preds[a].weights();
                for i in oracle_top_k(&w, k) {
                    let hit = oracle_errors(&preds[a].mode(i).means, &gts[a]).1 <= threshold;
                    entries.push((w[i], a, hit));
                }
            }
            aps.push(oracle_ap(&entries, members.len()));
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        let (got, _) = mean_ap(&preds, &gts, k, threshold).unwrap();
        assert!((got - want).abs() <= 1e-6, "{got} {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn report_and_csv() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let insts: Vec<Instance> = (0..20).map(|_| random_instance(&mut rng, 6, 16)).collect();
    let preds: Vec<_> = insts.iter().map(|i| i.pred.clone()).collect();
    let gts: Vec<_> = insts.iter().map(|i| i.gt.clone()).collect();
    let meta = RunMeta {
        run_id: "r1".into(),
        dataset: "d".into(),
        model: "student".into(),
        method: "set".into(),
        seed: 1,
    };
    let r = evaluate(&preds, &gts, 6, 2.0, meta).unwrap();
    assert_eq!(r.n_agents, 20);
    assert!((0.0..=1.0).contains(&r.miss_rate));
    for v in [r.min_ade, r.min_fde, r.w_ade, r.brier_min_fde, r.map] {
        assert!(v.is_finite() && v >= 0.0);
    }
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &[r.clone()]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,dataset,model,method,k,minADE,minFDE,MR,wADE,brier_minFDE,mAP,n_agents"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "r1");
    assert_eq!(row[5], format!("{:.6}", r.min_ade));
    assert_eq!(row[5].split('.').nth(1).unwrap().len(), 6);
    assert_eq!(row[11], "20");
}

#[test]
fn metrics_are_unchanged_by_moving_the_scene() {
    let cfg = GenConfig::default();
    let s = generate_scene(&cfg, 3).unwrap();
    let g = Pose2::new(40.0, -7.0, 2.1).unwrap();
    let moved = s.transformed(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut preds = Vec::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for id in s.target_ids() {
        let inst = random_instance(&mut rng, 6, 16);
        preds.push(inst.pred);
        a.push(s.future_in_agent_frame(id).unwrap());
        b.push(moved.future_in_agent_frame(id).unwrap());
    }
    let ra = evaluate(&preds, &a, 6, 2.0, RunMeta::default()).unwrap();
    let rb = evaluate(&preds, &b, 6, 2.0, RunMeta::default()).unwrap();
    for (x, y) in [
        (ra.min_ade, rb.min_ade),
        (ra.min_fde, rb.min_fde),
        (ra.w_ade, rb.w_ade),
        (ra.brier_min_fde, rb.brier_min_fde),
        (ra.miss_rate, rb.miss_rate),
        (ra.map, rb.map),
    ] {
        assert!((x - y).abs() < 1e-9);
    }
}

fn isometry(m: &[[f64; 2]], g: &Pose2) -> Vec<[f64; 2]> {
    m.iter().map(|&p| g.apply(p)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_ade_is_non_increasing_in_k(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 16);
        let v: Vec<f64> = (1..=6).map(|k| min_ade(&inst.pred, &inst.gt, k).unwrap()).collect();
        prop_assert!(v.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(v[5] <= w_ade(&inst.pred, &inst.gt).unwrap() + 1e-12);
    }

    #[test]
    fn brier_bounds(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 16);
        let f = min_fde(&inst.pred, &inst.gt, inst.k).unwrap();
        let b = brier_min_fde(&inst.pred, &inst.gt, inst.k).unwrap();
        prop_assert!(f >= 0.0 && b >= f && b - f <= 1.0);
    }

    #[test]
    fn miss_rate_ignores_agent_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let insts: Vec<Instance> = (0..8).map(|_| random_instance(&mut rng, 6, 8)).collect();
        let mut order: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let p: Vec<_> = insts.iter().map(|i| i.pred.clone()).collect();
        let g: Vec<_> = insts.iter().map(|i| i.gt.clone()).collect();
        let pp: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
        let gg: Vec<_> = order.iter().map(|&i| g[i].clone()).collect();
        prop_assert_eq!(miss_rate(&p, &g, 3, 2.0).unwrap(), miss_rate(&pp, &gg, 3, 2.0).unwrap());
    }

    #[test]
    fn displacement_metrics_are_isometry_invariant(seed in 0u64..10_000, x in -100.0..100.0f64, y in -100.0..100.0f64, h in -3.1..3.1f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 6, 16);
        let g = Pose2::new(x, y, h).unwrap();
        let moved = gmm(
            inst.pred.modes().iter().map(|m| isometry(&m.means, &g)).collect(),
            inst.pred.logits().to_vec(),
        );
        let gt = Trajectory::new(isometry(&inst.gt.states, &g), inst.gt.valid.clone()).unwrap();
        let k = inst.k;
        prop_assert!((min_ade(&inst.pred, &inst.gt, k).unwrap() - min_ade(&moved, &gt, k).unwrap()).abs() < 1e-9);
        prop_assert!((min_fde(&inst.pred, &inst.gt, k).unwrap() - min_fde(&moved, &gt, k).unwrap()).abs() < 1e-9);
        prop_assert!((w_ade(&inst.pred, &inst.gt).unwrap() - w_ade(&moved, &gt).unwrap()).abs() < 1e-9);
        prop_assert!((brier_min_fde(&inst.pred, &inst.gt, k).unwrap() - brier_min_fde(&moved, &gt, k).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn logit_shift_changes_nothing(seed in 0u64..10_000, shift in -20.0..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let insts: Vec<Instance> = (0..6).map(|_| random_instance(&mut rng, 6, 16)).collect();
        let p: Vec<_> = insts.iter().map(|i| i.pred.clone()).collect();
        let q: Vec<_> = insts
            .iter()
            .map(|i| gmm(i.pred.modes().iter().map(|m| m.means.clone()).collect(), i.pred.logits().iter().map(|l| l + shift).collect()))
            .collect();
        let g: Vec<_> = insts.iter().map(|i| i.gt.clone()).collect();
        let a = evaluate(&p, &g, 3, 2.0, RunMeta::default()).unwrap();
        let b = evaluate(&q, &g, 3, 2.0, RunMeta::default()).unwrap();
        for (x, y) in [(a.min_ade, b.min_ade), (a.min_fde, b.min_fde), (a.w_ade, b.w_ade), (a.brier_min_fde, b.brier_min_fde), (a.miss_rate, b.miss_rate), (a.map, b.map)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
