//! Oracle checks for the evaluation metrics: the linear-time Hausdorff
//! distance against an all-pairs scan, calibration error against a
//! synthetic perfectly calibrated stream, and temperature fitting against
//! streams with known ground-truth temperature.

mod common;

use calseg::autodiff::Graph;
use calseg::formats::Mask;
use calseg::losses::dice_loss;
use calseg::metrics::{ace, brier, calibration_report, dsc, ece, hd95, temperature_scale, DEFAULT_BINS};

use common::{hd95_brute, TestRng};

/// Random mask: a couple of solid spheres plus salt noise, never empty.
fn random_mask(rng: &mut TestRng, dims: [usize; 3], spacing: [f64; 3]) -> Mask {
    let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
    for _ in 0..1 + rng.index(2) {
        let c = [rng.range(1.0, dims[0] as f64 - 1.0), rng.range(1.0, dims[1] as f64 - 1.0), rng.range(1.0, dims[2] as f64 - 1.0)];
        let r = rng.range(1.0, 2.8);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        data[x + dims[0] * (y + dims[1] * z)] = 1;
                    }
                }
            }
        }
    }
    for _ in 0..rng.index(6) {
        let i = rng.index(data.len());
        data[i] = 1;
    }
    // Guarantee foreground even if the spheres landed degenerate.
    let i = rng.index(data.len());
    data[i] = 1;
    Mask::new(dims, spacing, data).unwrap()
}

#[test]
fn hd95_matches_the_all_pairs_oracle() {
    let spacings = [[1.0, 1.0, 1.0], [0.7, 1.3, 2.0], [2.5, 1.0, 1.0]];
    let mut rng = TestRng::new(31);
    for case in 0..50 {
        let spacing = spacings[case % spacings.len()];
        let pred = random_mask(&mut rng, [8, 8, 8], spacing);
        let truth = random_mask(&mut rng, [8, 8, 8], spacing);
        let fast = hd95(&pred, &truth).unwrap().expect("masks are nonempty");
        let brute = hd95_brute(&pred, &truth).expect("masks are nonempty");
        assert!((fast - brute).abs() < 1e-9, "case {case}: {fast} vs oracle {brute}");
    }
}

#[test]
fn hd95_is_symmetric_in_its_arguments() {
    let mut rng = TestRng::new(32);
    for _ in 0..10 {
        let a = random_mask(&mut rng, [8, 8, 8], [1.0, 0.8, 1.4]);
        let b = random_mask(&mut rng, [8, 8, 8], [1.0, 0.8, 1.4]);
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }
}

#[test]
fn ece_is_small_on_a_perfectly_calibrated_stream() {
    let mut rng = TestRng::new(33);
    let n = 100_000;
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.range(0.5, 1.0);
        conf.push(c);
        correct.push(u8::from(rng.uniform() < c));
    }
    let (e, _) = ece(&conf, &correct, DEFAULT_BINS).unwrap();
    assert!(e < 0.01, "calibrated stream scored ece {e}");
}

#[test]
fn ece_is_large_on_an_overconfident_stream() {
    // Confidence 0.95 but only 60% correct: gap 0.35.
    let conf = vec![0.95; 1000];
    let correct: Vec<u8> = (0..1000).map(|i| u8::from(i % 5 < 3)).collect();
    let (e, _) = ece(&conf, &correct, DEFAULT_BINS).unwrap();
    assert!((e - 0.35).abs() < 1e-12, "got {e}");
}

#[test]
fn brier_matches_a_direct_loop() {
    let mut rng = TestRng::new(34);
    for _ in 0..20 {
        let n = 1 + rng.index(400);
        let probs = rng.vec(n, 0.0, 1.0);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();
        let mut direct = 0.0;
        for i in 0..n {
            let d = probs[i] - f64::from(labels[i]);
            direct += d * d;
        }
        direct /= n as f64;
        let b = brier(&probs, &labels).unwrap();
        assert!((b - direct).abs() < 1e-15);
    }
}

#[test]
fn ace_recomputes_from_its_own_bins() {
    let mut rng = TestRng::new(35);
    for _ in 0..10 {
        let n = 50 + rng.index(2000);
        let conf = rng.vec(n, 0.5, 1.0);
        let correct: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.8)).collect();
        let (a, bins) = ace(&conf, &correct, DEFAULT_BINS).unwrap();
        let recomputed: f64 =
            bins.iter().map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs()).sum();
        assert!((a - recomputed).abs() < 1e-12);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
        // Equal-mass: sizes differ by at most one.
        let sizes: Vec<usize> = bins.iter().map(|b| b.count).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn calibration_metrics_are_permutation_invariant() {
    let mut rng = TestRng::new(36);
    let n = 500;
    let probs = rng.vec(n, 0.0, 1.0);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();
    // Reverse is a permutation; metrics may differ only by accumulation
    // order, which the tolerance covers.
    let rev_probs: Vec<f64> = probs.iter().rev().copied().collect();
    let rev_labels: Vec<u8> = labels.iter().rev().copied().collect();
    let a = calibration_report(&probs, &labels, DEFAULT_BINS).unwrap();
    let b = calibration_report(&rev_probs, &rev_labels, DEFAULT_BINS).unwrap();
    assert!((a.ece - b.ece).abs() < 1e-12);
    assert!((a.ace - b.ace).abs() < 1e-12);
    assert!((a.brier - b.brier).abs() < 1e-12);
}

#[test]
fn temperature_near_one_is_recovered_on_a_calibrated_stream() {
    let mut rng = TestRng::new(37);
    let n = 10_000;
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = rng.range(0.02, 0.98);
        logits.push((p / (1.0 - p)).ln());
        labels.push(u8::from(rng.uniform() < p));
    }
    let fit = temperature_scale(&logits, &labels, DEFAULT_BINS).unwrap();
    assert!((fit.temperature - 1.0).abs() < 0.05, "recovered T = {}", fit.temperature);

    // Scaling the same logits by 3 makes them overconfident; the fit must
    // recover a temperature near 3 to undo it.
    let hot: Vec<f64> = logits.iter().map(|s| s * 3.0).collect();
    let fit3 = temperature_scale(&hot, &labels, DEFAULT_BINS).unwrap();
    assert!((fit3.temperature - 3.0).abs() < 0.3, "recovered T = {}", fit3.temperature);
    assert!(fit3.nll_calibrated <= fit3.nll_uncalibrated);
    assert!(fit3.ece_calibrated < 0.02, "post-scaling ece {}", fit3.ece_calibrated);
}

#[test]
fn temperature_scaling_never_moves_the_thresholded_mask() {
    let mut rng = TestRng::new(38);
    let n = 4 * 4 * 4;
    let logits: Vec<f64> = (0..n).map(|_| rng.range(-4.0, 4.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();
    let fit = temperature_scale(&logits, &labels, DEFAULT_BINS).unwrap();

    let to_mask = |s: &[f64], t: f64| -> Mask {
        let data: Vec<u8> = s.iter().map(|&v| u8::from(v / t >= 0.0)).collect();
        Mask::new([4, 4, 4], [1.0, 1.0, 1.0], data).unwrap()
    };
    let before = to_mask(&logits, 1.0);
    let after = to_mask(&logits, fit.temperature);
    assert_eq!(before, after);
    assert_eq!(dsc(&before, &after).unwrap(), 1.0);
}

#[test]
fn hard_dice_score_agrees_with_soft_dice_loss_on_binary_inputs() {
    // The smoothing constant inflates the soft score by at most
    // eps * (|P|+|T|-2I) / (|P|+|T|)^2, so the 1e-9 agreement holds for
    // masks of realistic size and overlap, not for near-empty ones.
    let mut rng = TestRng::new(39);
    let dims = [16usize, 16, 16];
    let n = 16 * 16 * 16;
    for _ in 0..10 {
        let mut sphere = |rng: &mut TestRng| -> Mask {
            let c = [rng.range(7.0, 8.5), rng.range(7.0, 8.5), rng.range(7.0, 8.5)];
            let r = rng.range(5.0, 6.5);
            let mut data = vec![0u8; n];
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                        data[x + dims[0] * (y + dims[1] * z)] = u8::from(d2 <= r * r);
                    }
                }
            }
            Mask::new(dims, [1.0, 1.0, 1.0], data).unwrap()
        };
        let pred = sphere(&mut rng);
        let truth = sphere(&mut rng);
        let score = dsc(&pred, &truth).unwrap();

        let mut g = Graph::new();
        let p = g.leaf(pred.data.iter().map(|&v| f64::from(v)).collect(), vec![n]).unwrap();
        let t = g.leaf(truth.data.iter().map(|&v| f64::from(v)).collect(), vec![n]).unwrap();
        let loss = dice_loss(&mut g, &p, &t).unwrap().item().unwrap();
        assert!(score >= 1.0 - loss - 1e-9, "hard {score} vs soft {}", 1.0 - loss);
    }
}
