use cotune_core::{FrameShape, LatentFrame, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn composed_single_steps_match_the_jump_distribution() {
    let s = NoiseSchedule::scaled_linear(1000, 8.5e-4, 1.2e-2).unwrap();
    let shape = FrameShape::new(1, 1, 1);
    let x0 = LatentFrame::filled(shape, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let n = 100_000;
    for k in [1usize, 5, 20] {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let mut x = x0.clone();
            for t in 1..=k {
                x = s.forward_step(&x, t, &LatentFrame::gaussian(shape, &mut rng)).unwrap();
            }
            let v = x.values()[0];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = (sum2 - n as f64 * mean * mean) / (n - 1) as f64;
        let ab = s.alpha_bar(k);
        let want_mean = ab.sqrt() * 0.5;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "k={k}: mean {mean} vs {want_mean}"
        );
        assert!((var - want_var).abs() < 3.0 * se_var, "k={k}: var {var} vs {want_var}");
    }
}
