use cotune_core::seeding;
use cotune_core::temporal::{generate_long_video, generate_unmerged_video, merge_clips, merge_objective};
use cotune_core::{
    ClipPlan, ClipWeighting, Conditioning, DenoiserConfig, DenoiserModel, FramePosition, FrameShape, LatentFrame,
    NoiseSchedule, SigmaPolicy, Video,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient descent on the clip-agreement objective, started from zero.
fn descend(clips: &[Video], plan: &ClipPlan) -> Vec<Vec<f64>> {
    let shape = clips[0].shape();
    let ch = shape.channels;
    let mut v = vec![vec![0.0; shape.len()]; plan.frames()];
    let max_w2 = plan
        .weights()
        .iter()
        .flatten()
        .flatten()
        .map(|w| w * w)
        .fold(0.0, f64::max);
    let step = 1.0 / (2.0 * plan.count() as f64 * max_w2);
    for _ in 0..200_000 {
        let mut grad = vec![vec![0.0; shape.len()]; plan.frames()];
        for (i, clip) in clips.iter().enumerate() {
            for (p, frame) in clip.frames().iter().enumerate() {
                let j = plan.start(i) + p;
                for (e, target) in frame.values().iter().enumerate() {
                    let w = plan.weights()[i][p][e / ch];
                    grad[j][e] += 2.0 * w * w * (v[j][e] - target);
                }
            }
        }
        let mut largest = 0.0f64;
        for (vj, gj) in v.iter_mut().zip(&grad) {
            for (x, g) in vj.iter_mut().zip(gj) {
                *x -= step * g;
                largest = largest.max((step * g).abs());
            }
        }
        if largest < 1e-15 {
            break;
        }
    }
    v
}

#[test]
fn merge_matches_gradient_descent_with_unequal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let shape = FrameShape::new(2, 2, 2);
    for _ in 0..5 {
        let weights = (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| (0..4).map(|_| if rng.random_bool(0.5) { 1.0 } else { 3.0 }).collect())
                    .collect()
            })
            .collect();
        let plan = ClipPlan::with_weights(2, 4, 3, weights).unwrap();
        let clips: Vec<Video> = (0..3).map(|_| Video::gaussian(4, shape, &mut rng).unwrap()).collect();
        let merged = merge_clips(&clips, &plan).unwrap();
        let reference = descend(&clips, &plan);
        for (f, want) in merged.frames().iter().zip(&reference) {
            for (a, b) in f.values().iter().zip(want) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn merged_video_is_a_local_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let plan = ClipPlan::new(8, 2, 4, (2, 3), &ClipWeighting::Ramp).unwrap();
    let shape = FrameShape::new(2, 3, 1);
    let clips: Vec<Video> = (0..plan.count())
        .map(|_| Video::gaussian(4, shape, &mut rng).unwrap())
        .collect();
    let merged = merge_clips(&clips, &plan).unwrap();
    let best = merge_objective(&merged, &clips, &plan).unwrap();
    for _ in 0..100 {
        let scale = 10f64.powf(rng.random_range(-6.0..0.0));
        let nudged = Video::new(
            merged
                .frames()
                .iter()
                .map(|f| f.lin_comb(1.0, &LatentFrame::gaussian(shape, &mut rng), scale).unwrap())
                .collect(),
        )
        .unwrap();
        assert!(merge_objective(&nudged, &clips, &plan).unwrap() >= best);
    }
}

fn small_model() -> (DenoiserModel, NoiseSchedule) {
    let cfg = DenoiserConfig {
        frame: FrameShape::new(2, 2, 1),
        hidden: 6,
        time_dim: 4,
        pos_dim: 2,
        h_dim: 2,
        c_dim: 2,
        steps: 10,
    };
    (
        DenoiserModel::init(cfg, 31).unwrap(),
        NoiseSchedule::scaled_linear(10, 8.5e-4, 1.2e-2).unwrap(),
    )
}

#[test]
fn long_video_matches_a_scripted_loop() {
    let (model, sched) = small_model();
    let plan = ClipPlan::new(6, 2, 4, (2, 2), &ClipWeighting::Uniform).unwrap();
    let conds = vec![
        Conditioning::new(vec![0.2, -0.4], vec![0.1, 0.1]),
        Conditioning::new(vec![-0.5, 0.3], vec![0.1, 0.1]),
    ];
    let seed = 77;
    let got = generate_long_video(&model, &sched, &plan, &conds, seed, SigmaPolicy::Deterministic).unwrap();

    let shape = FrameShape::new(2, 2, 1);
    let mut rng = seeding::stream(seed, "video", 0);
    let mut v: Vec<Vec<f64>> = (0..6)
        .map(|_| LatentFrame::gaussian(shape, &mut rng).into_values())
        .collect();
    for t in (1..=10).rev() {
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let mut sum = vec![vec![0.0; 4]; 6];
        let mut count = [0.0; 6];
        for (i, cond) in conds.iter().enumerate() {
            for p in 0..4 {
                let j = 2 * i + p;
                let x = LatentFrame::from_vec(shape, v[j].clone()).unwrap();
                let eps = model
                    .predict_noise_at(&x, t, cond, Some(FramePosition { index: p, len: 4 }))
                    .unwrap();
                for e in 0..4 {
                    let x0 = (v[j][e] - (1.0 - ab).sqrt() * eps.values()[e]) / ab.sqrt();
                    sum[j][e] += ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps.values()[e];
                }
                count[j] += 1.0;
            }
        }
        for j in 0..6 {
            for e in 0..4 {
                v[j][e] = sum[j][e] / count[j];
            }
        }
    }
    for (f, want) in got.frames().iter().zip(&v) {
        for (a, b) in f.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn unmerged_baseline_steps_each_frame_with_its_owner_clip() {
    let (model, sched) = small_model();
    let plan = ClipPlan::new(6, 2, 4, (2, 2), &ClipWeighting::Uniform).unwrap();
    let conds = vec![
        Conditioning::new(vec![0.2, -0.4], vec![0.0, 0.0]),
        Conditioning::new(vec![0.9, 0.3], vec![0.0, 0.0]),
    ];
    let got = generate_unmerged_video(&model, &sched, &plan, &conds, 5, SigmaPolicy::Deterministic).unwrap();
    let mut rng = seeding::stream(5, "video", 0);
    let start: Vec<LatentFrame> = (0..6)
        .map(|_| LatentFrame::gaussian(model.config().frame, &mut rng))
        .collect();
    // frames 0,1 belong to clip 0; frames 2..5 to clip 1
    let owners = [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (1, 3)];
    for (j, &(i, p)) in owners.iter().enumerate() {
        let mut x = start[j].clone();
        for t in (1..=10).rev() {
            let eps = model
                .predict_noise_at(&x, t, &conds[i], Some(FramePosition { index: p, len: 4 }))
                .unwrap();
            x = sched.ddim_step(&x, t, &eps, 0.0, None).unwrap();
        }
        assert_eq!(got.frames()[j], x, "frame {j}");
    }
}
