use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollnet::eval::{auc, frame_accuracy, instrument_f1, per_second_aggregate, per_second_max, Counts};
use rollnet::rolls::{InstrumentRoll, PitchRoll};

mod common;
use common::auc_all_pairs;

fn bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f32> {
    (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()
}

#[test]
fn accuracy_matches_cell_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let p = rng.gen_range(0.0..0.5);
        let pred = PitchRoll::new(bits(&mut rng, 88 * 50, p), 88, 50, 31.25).unwrap();
        let truth = PitchRoll::new(bits(&mut rng, 88 * 50, p), 88, 50, 31.25).unwrap();
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for f in 0..88 {
            for t in 0..50 {
                match (pred.get(f, t) == 1.0, truth.get(f, t) == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        let want = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        assert!((frame_accuracy(&pred, &truth).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn instrument_f1_matches_precision_recall_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let (m, t) = (rng.gen_range(1..6), rng.gen_range(1..40));
        let pred = InstrumentRoll::new(bits(&mut rng, m * t, 0.4), m, t, 31.25, "v").unwrap();
        let truth = InstrumentRoll::new(bits(&mut rng, m * t, 0.4), m, t, 31.25, "v").unwrap();
        let got = instrument_f1(&pred, &truth).unwrap();
        let mut active = Vec::new();
        for i in 0..m {
            let (mut tp, mut np, mut nt) = (0.0, 0.0, 0.0);
            for k in 0..t {
                let (a, b) = (pred.get(i, k) > 0.5, truth.get(i, k) > 0.5);
                tp += (a && b) as u8 as f64;
                np += a as u8 as f64;
                nt += b as u8 as f64;
            }
            let want = if np == 0.0 && nt == 0.0 {
                1.0
            } else if tp == 0.0 {
                0.0
            } else {
                let (pr, rc) = (tp / np, tp / nt);
                2.0 * pr * rc / (pr + rc)
            };
            assert!((got.per_instrument[i] - want).abs() < 1e-12);
            if nt > 0.0 {
                active.push(want);
            }
        }
        let want_macro = (!active.is_empty()).then(|| active.iter().sum::<f64>() / active.len() as f64);
        match (got.macro_f1, want_macro) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn auc_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..200 {
        let n = rng.gen_range(2..80);
        // coarse scores in some cases so ties occur
        let scores: Vec<f64> = (0..n).map(|_| if case % 2 == 0 { rng.gen_range(0..5) as f64 / 4.0 } else { rng.gen::<f64>() }).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        match (auc(&scores, &labels), auc_all_pairs(&scores, &labels)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn per_second_scores_match_frame_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..200 {
        let t = rng.gen_range(1..200);
        let frames: Vec<f32> = (0..t).map(|_| rng.gen()).collect();
        let got = per_second_max(&frames, 31.25);
        let mut want: Vec<f32> = Vec::new();
        for (k, &v) in frames.iter().enumerate() {
            // second s starts at frame floor(s * 31.25)
            let mut s = 0;
            while ((s + 1) as f64 * 31.25).floor() as usize <= k {
                s += 1;
            }
            if want.len() <= s {
                want.resize(s + 1, 0.0);
            }
            want[s] = want[s].max(v);
        }
        assert_eq!(got, want);
    }
    let ramp: Vec<f32> = (0..63).map(|k| k as f32).collect();
    assert_eq!(per_second_max(&ramp, 31.25), vec![30.0, 61.0, 62.0]);
    let roll = InstrumentRoll::new(vec![0.7; 2 * 63], 2, 63, 31.25, "v").unwrap();
    assert_eq!(per_second_aggregate(&roll), vec![vec![0.7; 3]; 2]);
}

proptest! {
    #[test]
    fn auc_ignores_order_and_monotone_rescaling(
        items in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
        shift in -3.0f64..3.0,
    ) {
        let scores: Vec<f64> = items.iter().map(|x| x.0).collect();
        let labels: Vec<bool> = items.iter().map(|x| x.1).collect();
        let base = auc(&scores, &labels);
        let mut rev_s = scores.clone();
        let mut rev_l = labels.clone();
        rev_s.reverse();
        rev_l.reverse();
        prop_assert_eq!(base, auc(&rev_s, &rev_l));
        let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0 + shift).exp()).collect();
        prop_assert_eq!(base, auc(&warped, &labels));
        if let Some(a) = base {
            prop_assert!((0.0..=1.0).contains(&a));
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_determined_by_f1(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let c = Counts { tp, fp, fn_ };
        let f1 = c.f1();
        prop_assert!(c.accuracy() <= f1 + 1e-15);
        prop_assert!((c.accuracy() - f1 / (2.0 - f1)).abs() < 1e-12);
    }

    #[test]
    fn pooled_counts_split_over_halves(cells in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200), cut in 0usize..200) {
        let pred: Vec<f32> = cells.iter().map(|c| c.0 as u8 as f32).collect();
        let truth: Vec<f32> = cells.iter().map(|c| c.1 as u8 as f32).collect();
        let k = cut.min(cells.len());
        let mut halves = Counts::from_cells(&pred[..k], &truth[..k]);
        halves.add(Counts::from_cells(&pred[k..], &truth[k..]));
        prop_assert_eq!(halves, Counts::from_cells(&pred, &truth));
    }
}
