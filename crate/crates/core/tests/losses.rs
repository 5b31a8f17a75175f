use guided_inpaint_core::critic::{
    combined_generator_loss, discriminator_loss, generator_adv_loss, LAMBDA_ADV, PROB_EPS,
};
use guided_inpaint_core::domain::AffineTransform;
use guided_inpaint_core::locnet::{localization_loss, mean_corner_error, LOCALIZATION_POINTS};
use guided_inpaint_core::percept::{
    perceptual_loss, update_lambdas, IdentityFeatures, LambdaNormalizer, PerceptConfig, PerceptNet,
};
use guided_inpaint_core::config::ModelConfig;
use guided_inpaint_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = core::f64::consts::LN_2;

fn loc(pred: [f64; 6], gt: [f64; 6]) -> f64 {
    localization_loss(&[AffineTransform::new(pred)], &[AffineTransform::new(gt)], &LOCALIZATION_POINTS).unwrap()
}

#[test]
fn translation_offset_costs_its_squared_length() {
    let id = AffineTransform::IDENTITY.theta;
    assert_eq!(loc([1.0, 0.0, 0.3, 0.0, 1.0, 0.4], id), 0.3 * 0.3 + 0.4 * 0.4);
    assert!((loc([1.0, 0.0, 0.3, 0.0, 1.0, 0.4], id) - 0.25).abs() < 1e-15);
    assert_eq!(loc(id, id), 0.0);
    let shifted = AffineTransform::new([1.0, 0.0, 0.3, 0.0, 1.0, 0.4]);
    let corner = mean_corner_error(&[shifted], &[AffineTransform::IDENTITY]).unwrap();
    assert!((corner - 0.5).abs() < 1e-12);
}

#[test]
fn loss_ignores_point_order_and_averages_the_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = |rng: &mut ChaCha8Rng| AffineTransform::new(core::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let (a, b, c, d) = (t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng));
    let mut reversed = LOCALIZATION_POINTS;
    reversed.reverse();
    let fwd = localization_loss(&[a], &[b], &LOCALIZATION_POINTS).unwrap();
    assert!((fwd - localization_loss(&[a], &[b], &reversed).unwrap()).abs() < 1e-14);
    let pair = localization_loss(&[a, c], &[b, d], &LOCALIZATION_POINTS).unwrap();
    let second = localization_loss(&[c], &[d], &LOCALIZATION_POINTS).unwrap();
    assert!((pair - (fwd + second) / 2.0).abs() < 1e-14);
    assert!(localization_loss(&[a], &[], &LOCALIZATION_POINTS).is_err());
}

/// Cholesky of a symmetric matrix; `None` if it is not positive definite.
fn cholesky(m: &[[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let mut l = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let s: f64 = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

#[test]
fn loss_hessian_in_the_prediction_is_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let gt: [f64; 6] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let p: [f64; 6] = core::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let h = 1e-3;
        let f = |di: Option<(usize, f64)>, dj: Option<(usize, f64)>| {
            let mut q = p;
            for (k, v) in di.into_iter().chain(dj) {
                q[k] += v;
            }
            loc(q, gt)
        };
        let mut hess = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                hess[i][j] = (f(Some((i, h)), Some((j, h))) - f(Some((i, h)), Some((j, -h))) - f(Some((i, -h)), Some((j, h)))
                    + f(Some((i, -h)), Some((j, -h))))
                    / (4.0 * h * h);
            }
        }
        for (i, row) in hess.iter_mut().enumerate() {
            row[i] += 1e-6;
        }
        assert!(cholesky(&hess).is_some(), "{hess:?}");
    }
}

#[test]
fn adversarial_losses_at_even_odds() {
    assert!((generator_adv_loss(&[0.5]).unwrap() - LN2).abs() <= 1e-9);
    assert!((discriminator_loss(&[0.5], &[0.5]).unwrap() - 2.0 * LN2).abs() <= 1e-9);
    assert!((generator_adv_loss(&[0.5, 0.5, 0.5]).unwrap() - LN2).abs() <= 1e-9);
    assert!(generator_adv_loss(&[]).is_err());
}

#[test]
fn adversarial_losses_are_monotone() {
    let ps: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    for w in ps.windows(2) {
        // The generator prefers a fooled critic.
        assert!(generator_adv_loss(&[w[1]]).unwrap() < generator_adv_loss(&[w[0]]).unwrap());
        // The critic prefers high scores on real and low on fake images.
        assert!(discriminator_loss(&[w[1]], &[0.3]).unwrap() < discriminator_loss(&[w[0]], &[0.3]).unwrap());
        assert!(discriminator_loss(&[0.7], &[w[1]]).unwrap() > discriminator_loss(&[0.7], &[w[0]]).unwrap());
    }
}

#[test]
fn clamped_losses_stay_finite_on_any_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=1.0)).collect();
    ps.extend([0.0, 1.0, PROB_EPS, 1.0 - PROB_EPS]);
    let bound = -PROB_EPS.ln();
    for &p in &ps {
        let g = generator_adv_loss(&[p]).unwrap();
        let d = discriminator_loss(&[p], &[p]).unwrap();
        assert!(g.is_finite() && g >= 0.0 && g <= bound + 1e-9);
        assert!(d.is_finite() && d >= 0.0 && d <= 2.0 * bound + 1e-9);
    }
    assert!((generator_adv_loss(&[0.0]).unwrap() - bound).abs() < 1e-9);
}

#[test]
fn combined_loss_weights_the_adversarial_term() {
    assert_eq!(LAMBDA_ADV, 2.0);
    assert!((combined_generator_loss(0.3, 0.1, LAMBDA_ADV) - 0.5).abs() < 1e-15);
    assert_eq!(combined_generator_loss(0.37, 12.0, 0.0), 0.37);
    let (p, a) = (1.25, LN2);
    assert_eq!(combined_generator_loss(p, a, LAMBDA_ADV), p + 2.0 * a);
}

#[test]
fn renormalized_weights_equalize_layer_contributions() {
    let means = [0.1, 0.4];
    let l = update_lambdas(&means, 1e-8);
    assert!((l[0] - 10.0).abs() < 1e-5 && (l[1] - 2.5).abs() < 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let means: Vec<f64> = (0..5).map(|_| 10f64.powf(rng.random_range(-4.0..3.0))).collect();
        let l = update_lambdas(&means, 1e-8);
        let contrib: Vec<f64> = means.iter().zip(&l).map(|(m, w)| m * w).collect();
        let (lo, hi) = contrib.iter().fold((f64::MAX, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
        // Each contribution is m / (m + eps), so the spread is bounded by eps / min m.
        let min_mean = means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi / lo <= 1.0 + 1e-8 / min_mean * (1.0 + 1e-9), "{contrib:?}");
        assert!(hi / lo <= 1.01);
    }
    // A dead layer gets a large but finite weight.
    let dead = update_lambdas(&[0.0, 0.2], 1e-8);
    assert!(dead[0].is_finite() && dead[0] > 1e7);
}

#[test]
fn normalizer_updates_once_per_window() {
    let cfg = PerceptConfig { lambdas: vec![1.0, 1.0, 1.0], window: 4, epsilon: 1e-8 };
    let mut n = LambdaNormalizer::new(&cfg).unwrap();
    let rows = [[0.1, 1.0, 4.0], [0.3, 3.0, 4.0], [0.2, 2.0, 4.0], [0.2, 2.0, 4.0]];
    for r in &rows[..3] {
        assert!(n.record(r).unwrap().is_none());
        assert_eq!(n.lambdas, vec![1.0; 3]);
    }
    let up = n.record(&rows[3]).unwrap().unwrap();
    for (m, want) in up.layer_means.iter().zip([0.2, 2.0, 4.0]) {
        assert!((m - want).abs() < 1e-12);
    }
    assert_eq!(up.lambdas, n.lambdas);
    assert_eq!(n.pending(), 0);
    assert!(n.record(&[1.0]).is_err());
    assert!(LambdaNormalizer::new(&PerceptConfig { window: 0, ..cfg.clone() }).is_err());
}

#[test]
fn perceptual_loss_basic_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = PerceptNet::<f64>::new(&ModelConfig::new(32, 0.125).unwrap(), &mut rng).unwrap();
    let cfg = PerceptConfig::default();
    let a = Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
    assert_eq!(perceptual_loss(&a, &a, &net, &cfg).unwrap(), 0.0);
    let (ab, ba) = (perceptual_loss(&a, &b, &net, &cfg).unwrap(), perceptual_loss(&b, &a, &net, &cfg).unwrap());
    assert!(ab > 0.0 && (ab - ba).abs() <= 1e-12 * ab);

    let zero = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
    let half = Tensor::from_vec(&[1, 3, 4, 4], vec![0.5; 48]).unwrap();
    assert_eq!(perceptual_loss(&zero, &half, &IdentityFeatures, &PerceptConfig::new(1)).unwrap(), 0.25);
    assert!(perceptual_loss(&zero, &a, &IdentityFeatures, &PerceptConfig::new(1)).is_err());
    assert!(perceptual_loss(&a, &b, &net, &PerceptConfig::new(3)).is_err());
}

proptest! {
    #[test]
    fn loss_is_zero_only_at_the_target(p in prop::array::uniform6(-2.0f64..2.0), q in prop::array::uniform6(-2.0f64..2.0)) {
        let l = loc(p, q);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(loc(q, q), 0.0);
        // Eight points in general position pin down an affine map.
        let gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-6 {
            prop_assert!(l > 0.0);
        }
        prop_assert!((l - loc(q, p)).abs() <= 1e-12 * l.max(1.0));
    }
}
