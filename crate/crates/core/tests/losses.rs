use eyetrack::blazegaze::gradcheck::{random_batch, tiny_arch};
use eyetrack::blazegaze::train::{batch_loss, TrainSample};
use eyetrack::blazegaze::{consistency_loss, gaze_loss, reconstruction_loss, BlazeGazeModel, LossWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mse_oracle(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    let flat: Vec<f64> = pred.iter().zip(truth).flat_map(|(p, t)| [p[0] - t[0], p[1] - t[1]]).collect();
    flat.iter().map(|d| d * d).sum::<f64>() / flat.len() as f64
}

fn consistency_oracle(z: &[Vec<f64>], g: &[[f64; 2]], w: &[f64], eps: f64) -> f64 {
    let b = z.len();
    let gd = |i: usize, j: usize| ((g[i][0] - g[j][0]).powi(2) + (g[i][1] - g[j][1]).powi(2)).sqrt();
    let mut max = 0.0f64;
    for i in 0..b {
        for j in 0..b {
            max = max.max(gd(i, j));
        }
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let zd = z[i].iter().zip(&z[j]).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            total += w[i] * w[j] * (zd - gd(i, j) / (max + eps)).powi(2);
        }
    }
    total / (b * b) as f64
}

fn random_gaze(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect()
}

#[test]
fn reconstruction_examples_and_oracle() {
    let ones = vec![1.0; 12];
    assert_eq!(reconstruction_loss(&ones, &ones).unwrap(), 0.0);
    assert_eq!(reconstruction_loss(&vec![0.0; 12], &ones).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..300).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..300).map(|_| rng.random()).collect();
    let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 300.0;
    assert!((reconstruction_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    assert!(reconstruction_loss(&a, &b[..10]).is_err());
}

#[test]
fn unit_weight_gaze_loss_is_twice_the_componentwise_mse() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..40);
        let (p, t) = (random_gaze(n, &mut rng), random_gaze(n, &mut rng));
        let loss = gaze_loss(&p, &t, &vec![1.0; n]).unwrap();
        assert!((loss - 2.0 * mse_oracle(&p, &t)).abs() < 1e-12, "seed {seed}");
    }
    assert!((gaze_loss(&[[0.1, 0.0]], &[[0.0, 0.0]], &[2.0]).unwrap() - 0.02).abs() < 1e-15);
    assert!(gaze_loss(&[[f64::NAN, 0.0]], &[[0.0, 0.0]], &[1.0]).is_err());
}

#[test]
fn consistency_vanishes_on_isometric_batches() {
    let g = vec![[0.1, 0.2]; 4];
    let z = vec![vec![0.3, -0.1, 0.7]; 4];
    assert_eq!(consistency_loss(&z, &g, &[1.0, 2.0, 0.5, 3.0], 1e-8).unwrap(), 0.0);

    // With two samples δ₁₂ = d / (d + eps); placing the embeddings exactly
    // that far apart is an isometry.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let g = random_gaze(2, &mut rng);
        let d = ((g[0][0] - g[1][0]).powi(2) + (g[0][1] - g[1][1]).powi(2)).sqrt();
        let delta = d / (d + 1e-8);
        let z = vec![vec![0.0, 0.0], vec![0.0, delta]];
        let w = [rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)];
        assert_eq!(consistency_loss(&z, &g, &w, 1e-8).unwrap(), 0.0);
    }
    assert!(consistency_loss(&[vec![0.0]], &[[0.0, 0.0]], &[1.0], 1e-8).is_err());
}

#[test]
fn consistency_matches_double_loop_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(2..12);
        let z: Vec<Vec<f64>> = (0..b).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let g = random_gaze(b, &mut rng);
        let w: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..3.0)).collect();
        let got = consistency_loss(&z, &g, &w, 1e-8).unwrap();
        assert!((got - consistency_oracle(&z, &g, &w, 1e-8)).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = BlazeGazeModel::new(tiny_arch(), seed).unwrap();
        let data = random_batch(&model.arch, 5, &mut rng);
        let batch: Vec<&TrainSample> = data.iter().collect();
        let weights = LossWeights { beta_r: rng.random_range(0.0..2.0), beta_g: 1.3, beta_c: rng.random_range(0.0..2.0) };
        let t = batch_loss(&model, &batch, &weights, 1e-8).unwrap();

        let zs: Vec<Vec<f64>> = data.iter().map(|s| model.embed(&s.patch).unwrap()).collect();
        let rec = data.iter().zip(&zs).map(|(s, z)| reconstruction_loss(&s.patch, &model.reconstruct(z).unwrap()).unwrap()).sum::<f64>() / 5.0;
        let preds: Vec<[f64; 2]> = data.iter().zip(&zs).map(|(s, z)| model.gaze_from_embedding(z, &s.pose).unwrap()).collect();
        let truth: Vec<[f64; 2]> = data.iter().map(|s| s.gaze).collect();
        let w: Vec<f64> = data.iter().map(|s| s.weight).collect();
        let gaze = gaze_loss(&preds, &truth, &w).unwrap();
        let cons = consistency_oracle(&zs, &truth, &w, 1e-8);
        let sum = weights.beta_r * rec + weights.beta_g * gaze + weights.beta_c * cons;
        assert!((t.total - sum).abs() < 1e-12, "seed {seed}: {} vs {sum}", t.total);
        assert!((t.total - (weights.beta_r * t.reconstruction + weights.beta_g * t.gaze + weights.beta_c * t.consistency)).abs() < 1e-12);
    }
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<[f64; 2]>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|b| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), b),
            prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5).prop_map(|(x, y)| [x, y]), b),
            prop::collection::vec(0.1f64..3.0, b),
        )
    })
}

proptest! {
    #[test]
    fn consistency_invariant_to_relabeling((z, g, w) in batch_strategy(), rot in 0usize..8) {
        let b = z.len();
        let perm: Vec<usize> = (0..b).map(|i| (i * 3 + rot) % b).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == b });
        let base = consistency_loss(&z, &g, &w, 1e-8).unwrap();
        let zp: Vec<_> = perm.iter().map(|&i| z[i].clone()).collect();
        let gp: Vec<_> = perm.iter().map(|&i| g[i]).collect();
        let wp: Vec<_> = perm.iter().map(|&i| w[i]).collect();
        let moved = consistency_loss(&zp, &gp, &wp, 1e-8).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn gaze_loss_is_homogeneous_in_weights((_, g, w) in batch_strategy(), s in 0.01f64..10.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_gaze(g.len(), &mut rng);
        let scaled: Vec<f64> = w.iter().map(|v| v * s).collect();
        let a = gaze_loss(&p, &g, &w).unwrap();
        let b = gaze_loss(&p, &g, &scaled).unwrap();
        prop_assert!((b - s * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
