use std::io::Write;

use fpage_core::backbone::FeatureBundle;
use fpage_core::eval::{evaluate, read_predictions, write_predictions, PredictionRecord, DEFAULT_THRESHOLDS};
use fpage_core::fpa::FpaConfig;
use fpage_core::loss::{loss, LossConfig};
use fpage_core::model::AgeModel;
use fpage_core::nn::{FeatureMap, Parameters};
use fpage_core::{decode_expectation, encode_label, AgeDistribution, Error, LabelCodecConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn encoded_labels_are_distributions(k in 2usize..160, sigma in 0.3f64..8.0, frac in 0.0f64..1.0) {
        let cfg = LabelCodecConfig::new(k, sigma).unwrap();
        let y = (frac * (k - 1) as f64).round() as i64;
        let d = encode_label(y, &cfg).unwrap();
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(d.probs().iter().all(|p| *p >= 0.0 && p.is_finite()));
        prop_assert_eq!(d.argmax() as i64, y);
    }

    #[test]
    fn out_of_range_ages_are_rejected(age in prop_oneof![-100i64..0, 101i64..300]) {
        let rejected = matches!(
            encode_label(age, &LabelCodecConfig::default()),
            Err(Error::AgeOutOfRange { .. })
        );
        prop_assert!(rejected);
    }

    #[test]
    fn tta_average_is_order_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random = || {
            let raw: Vec<f64> = (0..17).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            AgeDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap()
        };
        let (a, b) = (random(), random());
        prop_assert_eq!(a.average(&b).unwrap(), b.average(&a).unwrap());
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LabelCodecConfig::new(30, 2.0).unwrap();
        let raw: Vec<f64> = (0..30).map(|_| rng.random_range(1e-3..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p = AgeDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap();
        let y = rng.random_range(0..30);
        let v = loss(&p, &encode_label(y, &cfg).unwrap(), y, &LossConfig { lambda }).unwrap();
        prop_assert!(v.total >= 0.0 && v.kl >= -1e-12 && v.l1 >= 0.0);
    }

    #[test]
    fn mae_is_permutation_invariant(errs in prop::collection::vec(0.0f64..40.0, 1..60), seed in any::<u64>()) {
        let records: Vec<PredictionRecord> = errs
            .iter()
            .enumerate()
            .map(|(i, e)| PredictionRecord::new(format!("{i}"), 30, 30.0 + e))
            .collect();
        let mut shuffled = records.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = evaluate(&records, &DEFAULT_THRESHOLDS).unwrap();
        let b = evaluate(&shuffled, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-9);
        prop_assert_eq!(a.cs, b.cs);
    }
}

#[test]
fn zero_probability_where_target_has_mass_is_rejected() {
    let p = AgeDistribution::one_hot(5, 0);
    let q = AgeDistribution::one_hot(5, 3);
    assert!(matches!(loss(&p, &q, 3, &LossConfig::default()), Err(Error::InfiniteKl { index: 3 })));
}

#[test]
fn boundary_label_loss_is_truncation_shift() {
    let q = encode_label(0, &LabelCodecConfig::default()).unwrap();
    let v = loss(&q, &q, 0, &LossConfig::default()).unwrap();
    assert_eq!(v.kl, 0.0);
    assert!((v.l1 - 1.3023201410697372).abs() < 1e-9);
}

#[test]
fn decode_rejects_unnormalized_vectors() {
    assert!(matches!(decode_expectation(&[0.2, 0.2]), Err(Error::NotNormalized { .. })));
    assert!(matches!(decode_expectation(&[]), Err(Error::Empty(_))));
}

#[test]
fn head_outputs_are_valid_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = AgeModel::init(FpaConfig::new(3, 9), 4, 21, 2, 1).unwrap();
    for slot in model.slots_mut() {
        for v in slot.values.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut map = |c: usize, scale: f64| {
            FeatureMap::new(h, w, Array2::from_shape_fn((h * w, c), |_| rng.random_range(-scale..scale))).unwrap()
        };
        let low = map(2, 3.0);
        let high = map(9, 3.0);
        let mut masks = map(3, 1.0);
        masks.data.mapv_inplace(f64::exp);
        for mut row in masks.data.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let pass = model.forward(&FeatureBundle { low, high, masks }).unwrap();
        let p = pass.dist.probs();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn predictions_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<PredictionRecord> = (0..1000)
        .map(|i| {
            let pred = rng.random_range(-5.0..120.0) * std::f64::consts::PI / 3.0;
            PredictionRecord::new(format!("img/{i}.png"), rng.random_range(0..101), pred)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    write_predictions(&path, &records).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.image_path, b.image_path);
        assert_eq!(a.true_age, b.true_age);
        assert_eq!(a.pred_age.to_bits(), b.pred_age.to_bits());
        assert_eq!(a.abs_err.to_bits(), b.abs_err.to_bits());
    }
}

#[test]
fn malformed_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for i in 0..6 {
        writeln!(f, "{}", serde_json::to_string(&PredictionRecord::new(format!("{i}"), 20, 21.0)).unwrap()).unwrap();
    }
    writeln!(f, r#"{{"image_path":"x","true_age":3,"pred_age":4.0}}"#).unwrap();
    drop(f);
    match read_predictions(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_prediction_file_reads_empty_and_fails_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let records = read_predictions(&path).unwrap();
    assert!(records.is_empty());
    assert!(matches!(evaluate(&records, &DEFAULT_THRESHOLDS), Err(Error::Empty(_))));
}

#[test]
fn inconsistent_abs_err_is_rejected() {
    let mut r = PredictionRecord::new("a", 10, 12.0);
    r.abs_err = 1.0;
    assert!(evaluate(&[r], &[5]).is_err());
}
