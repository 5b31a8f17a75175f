mod common;

use common::oracles::{lcm_candidates, naive_metrics, planted_lcm, random_hole};
use guided_inpaint_core::datagen::{example_rng, make_example, DatagenConfig};
use guided_inpaint_core::domain::{cut_paste, normalize, BoxRegion, HoleSpec, ImageTensor, TrainingExample};
use guided_inpaint_core::eval::{
    evaluate_method, inpaint, lab_to_rgb, local_context_matching, psnr_from_l2, restoration_metrics,
    restoration_metrics_in, rgb_to_lab, MetricRegion, Method, Models, PasteFiller,
};
use guided_inpaint_core::locnet::align_guidance;
use guided_inpaint_core::scenes::random_scene;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(h, w, (0..3 * h * w).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

#[test]
fn constant_offset_gives_the_textbook_values() {
    let gt = ImageTensor::filled(16, 16, [-0.6, 0.1, 0.4]).unwrap();
    // 0.2 in [-1, 1] storage is 0.1 in [0, 1] units.
    let pred = ImageTensor::new(16, 16, gt.data().iter().map(|v| v + 0.2).collect()).unwrap();
    let hole = HoleSpec::rect(BoxRegion::new(3, 5, 11, 12), 16, 16).unwrap();
    let m = restoration_metrics(&pred, &gt, &hole).unwrap();
    assert!((m.l1 - 0.10).abs() <= 1e-12 && (m.l2 - 0.01).abs() <= 1e-12 && (m.psnr - 20.0).abs() <= 1e-9, "{m:?}");
    let same = restoration_metrics(&gt, &gt, &hole).unwrap();
    assert_eq!((same.l1, same.l2), (0.0, 0.0));
    assert_eq!(same.psnr, f64::INFINITY);
}

#[test]
fn metrics_match_the_loop_oracle_and_psnr_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(8..24), rng.random_range(8..24));
        let (pred, gt) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let Ok(hole) = HoleSpec::from_mask(h, w, &mask) else { continue };
        let m = restoration_metrics(&pred, &gt, &hole).unwrap();
        let (l1, l2) = naive_metrics(&pred, &gt, &hole);
        assert!((m.l1 - l1).abs() <= 1e-10 && (m.l2 - l2).abs() <= 1e-10);
        assert!((m.psnr - (-10.0 * l2.log10())).abs() <= 1e-10);
        let whole = restoration_metrics_in(&pred, &gt, &hole, MetricRegion::Whole).unwrap();
        let all = HoleSpec::from_mask(h, w, &vec![1; h * w]).unwrap();
        let (a1, a2) = naive_metrics(&pred, &gt, &all);
        assert!((whole.l1 - a1).abs() <= 1e-10 && (whole.l2 - a2).abs() <= 1e-10);
    }
    assert_eq!(psnr_from_l2(0.0), f64::INFINITY);
    assert!((psnr_from_l2(1e-3) - 30.0).abs() < 1e-12);
}

#[test]
fn mismatched_sizes_and_empty_holes_are_rejected() {
    let a = ImageTensor::filled(8, 8, [0.0; 3]).unwrap();
    let b = ImageTensor::filled(8, 9, [0.0; 3]).unwrap();
    let hole = HoleSpec::rect(BoxRegion::new(1, 1, 4, 4), 8, 8).unwrap();
    assert!(restoration_metrics(&a, &b, &hole).is_err());
    assert!(HoleSpec::from_mask(8, 8, &[0; 64]).map_or(true, |h| restoration_metrics(&a, &a, &h).is_err()));
}

#[test]
fn lab_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let rgb: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let back = lab_to_rgb(rgb_to_lab(rgb));
        for k in 0..3 {
            assert!((rgb[k] - back[k]).abs() <= 1e-3, "{rgb:?} -> {back:?}");
        }
    }
    let white = rgb_to_lab([1.0; 3]);
    assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
    assert!(rgb_to_lab([0.0; 3])[0].abs() < 1e-9);
}

#[test]
fn planted_context_match_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let scales = [0.75, 1.0, 1.25];
    for k in 0..50 {
        let s = scales[k % 3];
        let hole = random_hole(&mut rng, 48, 6, 12);
        // Keep the dilated hole inside the frame so placements exist at every scale.
        let hole = BoxRegion::new(hole.x0.clamp(8, 28), hole.y0.clamp(8, 28), 0, 0);
        let hole = BoxRegion::new(hole.x0, hole.y0, hole.x0 + 8 + k % 5, hole.y0 + 7 + k % 4);
        let p = planted_lcm(1000 + k as u64, 48, hole, 4, s);
        let m = local_context_matching(&p.incomplete, &p.guidance, &p.hole, 4, &scales).unwrap();
        assert_eq!((m.scale, m.dx, m.dy), (s, p.dx, p.dy), "instance {k}");
        if s == 1.0 {
            assert_eq!(m.score, 0.0);
            // The aligned guidance reproduces the context ring exactly.
            let aligned = align_guidance(&p.guidance, &m.transform, 48, 48);
            let outer = p.hole.bbox().dilate_clipped(4, 48, 48);
            for y in outer.y0..outer.y1 {
                for x in outer.x0..outer.x1 {
                    if !p.hole.contains(x, y) {
                        for c in 0..3 {
                            assert!((aligned.at(c, y, x) - p.incomplete.at(c, y, x)).abs() <= 1e-9);
                        }
                    }
                }
            }
        } else {
            // Off-lattice rings carry the RGB of an interpolated Lab value, so
            // the planted score is zero only up to the Lab round trip.
            assert!(m.score <= 1e-6, "score {}", m.score);
        }
    }
}

#[test]
fn context_match_agrees_with_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scales = [0.75, 1.0, 1.25];
    for _ in 0..40 {
        let guidance = random_image(&mut rng, 16, 16);
        let incomplete = random_image(&mut rng, 16, 16);
        let hole = HoleSpec::rect(random_hole(&mut rng, 16, 4, 6), 16, 16).unwrap();
        let m = local_context_matching(&incomplete, &guidance, &hole, 3, &scales).unwrap();
        let best = lcm_candidates(&incomplete, &guidance, &hole, 3, &scales)[0];
        assert_eq!((m.scale, m.dx, m.dy), (best.scale, best.dx, best.dy));
        assert!((m.score - best.score).abs() <= 1e-9 * best.score.max(1.0));
    }
}

#[test]
fn constant_images_prefer_zero_translation() {
    let img = ImageTensor::filled(24, 24, [0.2, -0.3, 0.5]).unwrap();
    let hole = HoleSpec::rect(BoxRegion::new(9, 8, 15, 14), 24, 24).unwrap();
    let m = local_context_matching(&img, &img, &hole, 3, &[0.75, 1.0, 1.25]).unwrap();
    assert_eq!((m.dx, m.dy, m.scale, m.score), (0, 0, 1.0, 0.0));
}

#[test]
fn context_match_rejects_impossible_searches() {
    let small = ImageTensor::filled(8, 8, [0.0; 3]).unwrap();
    let img = ImageTensor::filled(24, 24, [0.0; 3]).unwrap();
    let hole = HoleSpec::rect(BoxRegion::new(4, 4, 20, 20), 24, 24).unwrap();
    assert!(local_context_matching(&img, &small, &hole, 2, &[1.0]).is_err());
    assert!(local_context_matching(&img, &img, &hole, 2, &[]).is_err());
    assert!(local_context_matching(&img, &img, &hole, 2, &[-1.0]).is_err());
}

fn examples(n: u64) -> Vec<(String, TrainingExample)> {
    let cfg = DatagenConfig::with_resolution(32);
    (0..n)
        .map(|i| {
            let o = normalize(&random_scene(i, 32, 32));
            let t = normalize(&random_scene(i + 100, 32, 32));
            (format!("ex{i}"), make_example(&o, &t, &mut example_rng(4, i), &cfg).unwrap().0)
        })
        .collect()
}

#[test]
fn paste_after_ground_truth_alignment_is_cut_paste() {
    let exs = examples(6);
    let paste = PasteFiller;
    let models = Models::<f64> { filler: Some(&paste), ..Models::default() };
    let a = evaluate_method(&exs, Method::GtAlignOurs, &models, "h").unwrap();
    let b = evaluate_method(&exs, Method::CutPaste, &models, "h").unwrap();
    assert_eq!(a.examples, b.examples);
    assert_eq!(a.examples.len(), 6);
    for ((id, ex), row) in exs.iter().zip(&a.examples) {
        assert_eq!(&row.id, id);
        let out = cut_paste(&ex.incomplete, &ex.guidance, &ex.hole, &ex.gt_transform).unwrap();
        assert_eq!(out, inpaint(&ex.incomplete, &ex.guidance, &ex.hole, &ex.gt_transform, &paste).unwrap());
        assert_eq!(row.metrics, restoration_metrics(&out, &ex.ground_truth, &ex.hole).unwrap());
    }
    let mean_l1 = a.examples.iter().map(|r| r.metrics.l1).sum::<f64>() / 6.0;
    let mean_l2 = a.examples.iter().map(|r| r.metrics.l2).sum::<f64>() / 6.0;
    assert!((a.mean.l1 - mean_l1).abs() <= 1e-12 && (a.mean.l2 - mean_l2).abs() <= 1e-12);
    assert_eq!((a.method, b.method, a.config_hash.as_str()), (Method::GtAlignOurs, Method::CutPaste, "h"));
}

#[test]
fn methods_report_missing_networks() {
    let exs = examples(1);
    let models = Models::<f64>::default();
    assert!(evaluate_method(&exs, Method::Ours, &models, "").is_err());
    assert!(evaluate_method(&exs, Method::LcmOurs, &models, "").is_err());
    assert!(evaluate_method(&exs, Method::CutPaste, &models, "").is_ok());
    assert!(evaluate_method(&[], Method::CutPaste, &models, "").is_err());
    for m in Method::ALL {
        assert_eq!(Method::parse(m.label()).unwrap(), m);
    }
    assert!(Method::parse("best").is_err());
}

proptest! {
    #[test]
    fn small_metrics_match_the_oracle(seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        let bytes: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
        prop_assume!(bytes.iter().any(|&b| b == 1));
        let hole = HoleSpec::from_mask(8, 8, &bytes).unwrap();
        let m = restoration_metrics(&pred, &gt, &hole).unwrap();
        let (l1, l2) = naive_metrics(&pred, &gt, &hole);
        prop_assert!((m.l1 - l1).abs() <= 1e-10 && (m.l2 - l2).abs() <= 1e-10);
        prop_assert!(m.l2 <= m.l1 + 1e-15 && m.l1 * m.l1 <= m.l2 + 1e-12);
    }
}
