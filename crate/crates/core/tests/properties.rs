use ndarray::{Array2, Array3};
use neuralign::alignment::contrastive_loss;
use neuralign::metrics::{
    feature_distance, pearson, pixcorr, rank_generations, ssim, two_way_identification, Image,
};
use neuralign::params::seeded_rng;
use neuralign::zeroshot::{rank_by_cosine, topk_accuracy, window_grid, AblationMode, Task};
use proptest::prelude::*;
use rand::Rng;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn non_constant(v: &[f64]) -> bool {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() > 1e-6
}

fn features(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed, 0);
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

fn noise_image(seed: u64, side: usize) -> Image {
    let mut rng = seeded_rng(seed, 1);
    Image::new(Array3::from_shape_simple_fn((side, side, 3), || rng.random::<f64>())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_is_affine_invariant(a in vec_strategy(12), b in vec_strategy(12), s in 0.1f64..10.0, t in -3.0f64..3.0) {
        prop_assume!(non_constant(&a) && non_constant(&b));
        let r = pearson(&a, &b).unwrap();
        let moved: Vec<f64> = a.iter().map(|x| s * x + t).collect();
        prop_assert!((pearson(&moved, &b).unwrap() - r).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((pearson(&b, &a).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn pixcorr_ignores_brightness_and_contrast(seed in 0u64..1000, s in 0.2f64..1.0, t in 0.0f64..0.5) {
        prop_assume!(s + t <= 1.0);
        let a = noise_image(seed, 12);
        let b = noise_image(seed + 1, 12);
        let dimmed = Image::new(a.data.mapv(|v| s * v + t)).unwrap();
        let r = pixcorr(&a, &b).unwrap();
        prop_assert!((pixcorr(&dimmed, &b).unwrap() - r).abs() < 1e-9);
    }

    #[test]
    fn feature_distance_is_bounded_and_zero_on_identity(seed in 0u64..1000, n in 2usize..8) {
        let g = features(seed, n, 10);
        let r = features(seed + 7, n, 10);
        let d = feature_distance(&g, &r).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!(feature_distance(&g, &g).unwrap().abs() < 1e-12);
        let shifted: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| 3.0 * x - 1.0).collect()).collect();
        prop_assert!((feature_distance(&shifted, &r).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn two_way_lies_in_unit_interval(seed in 0u64..1000, n in 2usize..10) {
        let g = features(seed, n, 8);
        let r = features(seed + 3, n, 8);
        let acc = two_way_identification(&g, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        // Every comparison is one of n·(n−1).
        let comparisons = (n * (n - 1)) as f64;
        prop_assert!(((acc * comparisons).round() - acc * comparisons).abs() < 1e-9);
        prop_assert_eq!(two_way_identification(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
        let a = noise_image(seed, 16);
        let b = noise_image(seed + 1, 16);
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn candidate_ranking_follows_candidate_order(seed in 0u64..1000, n in 2usize..8) {
        let cands = features(seed, n, 12);
        let reference = features(seed + 1, 1, 12).pop().unwrap();
        let order = rank_generations(&cands, &reference, n).unwrap();
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        // Reversing the candidates relabels the ranking.
        let rev: Vec<Vec<f64>> = cands.iter().rev().cloned().collect();
        let rev_order = rank_generations(&rev, &reference, n).unwrap();
        let mapped: Vec<usize> = rev_order.iter().map(|&i| n - 1 - i).collect();
        prop_assert_eq!(mapped, order);
    }

    #[test]
    fn contrastive_loss_is_scale_and_permutation_invariant(seed in 0u64..1000, b in 1usize..6, scale in 0.1f64..10.0) {
        let mut rng = seeded_rng(seed, 2);
        let a = Array2::from_shape_simple_fn((b, 5), || rng.random::<f64>() - 0.5);
        let t = Array2::from_shape_simple_fn((b, 5), || rng.random::<f64>() - 0.5);
        let l = contrastive_loss(a.view(), t.view(), 0.2).unwrap();
        prop_assert!(l >= 0.0);
        let scaled = &a * scale;
        prop_assert!((contrastive_loss(scaled.view(), t.view(), 0.2).unwrap() - l).abs() < 1e-9);
        let perm: Vec<usize> = (0..b).rev().collect();
        let pa = a.select(ndarray::Axis(0), &perm);
        let pt = t.select(ndarray::Axis(0), &perm);
        prop_assert!((contrastive_loss(pa.view(), pt.view(), 0.2).unwrap() - l).abs() < 1e-9);
    }

    #[test]
    fn retrieval_rank_ignores_template_order(seed in 0u64..1000, m in 2usize..12) {
        let mut rng = seeded_rng(seed, 3);
        let q = Array2::from_shape_simple_fn((4, 6), || rng.random::<f64>() - 0.5);
        let t = Array2::from_shape_simple_fn((m, 6), || rng.random::<f64>() - 0.5);
        let ids: Vec<i64> = (0..m as i64).collect();
        let truth: Vec<i64> = (0..4).map(|_| rng.random_range(0..m as i64)).collect();
        let qids = [0, 1, 2, 3];
        let a = topk_accuracy(&rank_by_cosine(q.view(), &qids, t.view(), &ids).unwrap(), &truth, Task::Retrieval).unwrap();
        let perm: Vec<usize> = (0..m).rev().collect();
        let tp = t.select(ndarray::Axis(0), &perm);
        let idp: Vec<i64> = perm.iter().map(|&i| ids[i]).collect();
        let b = topk_accuracy(&rank_by_cosine(q.view(), &qids, tp.view(), &idp).unwrap(), &truth, Task::Retrieval).unwrap();
        prop_assert_eq!(&a.ranks, &b.ranks);
        prop_assert!(a.top5 >= a.top1);
    }

    #[test]
    fn expanding_windows_end_on_the_full_range(end in 50.0f64..1000.0, step in 10.0f64..200.0) {
        let w = window_grid(AblationMode::Expanding, 0.0, end, step, 100.0).unwrap();
        prop_assert_eq!(*w.last().unwrap(), [0.0, end]);
        prop_assert!(w.windows(2).all(|p| p[0][1] < p[1][1]));
        let s = window_grid(AblationMode::Sliding, 0.0, end, step, 100.0).unwrap();
        prop_assert!(s.iter().all(|[a, b]| (b - a - 100.0).abs() < 1e-9));
    }
}

#[test]
fn ssim_of_independent_noise_is_near_zero() {
    for seed in 0..4 {
        let a = noise_image(100 + seed, 64);
        let b = noise_image(200 + seed, 64);
        let v = ssim(&a, &b).unwrap();
        assert!(v.abs() < 0.1, "SSIM {v}");
    }
}
