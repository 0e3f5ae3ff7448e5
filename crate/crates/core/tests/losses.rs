mod common;

use cellseg::data::Sample;
use cellseg::data::TaskBatch;
use cellseg::losses::*;
use cellseg::models::{build_network, Architecture, LatentActivation, NetworkSpec, PredictionMap};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

/// Scalar reference for the weighted BCE with literal pixel sums.
fn bce_oracle(preds: &[Vec<f64>], masks: &[Vec<u8>]) -> f64 {
    let mut total = 0.0;
    for (p, m) in preds.iter().zip(masks) {
        let fg = m.iter().filter(|&&v| v == 1).count();
        let w = if fg == 0 { 1000.0 } else { (m.len() - fg) as f64 / fg as f64 };
        for (&pi, &yi) in p.iter().zip(m) {
            let q = pi.clamp(1e-7, 1.0 - 1e-7);
            let y = yi as f64;
            total += w * y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
    }
    -total / preds.len() as f64
}

fn entropy_oracle(preds: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for p in preds {
        for &pi in p {
            let q = pi.clamp(1e-7, 1.0 - 1e-7);
            total -= q * q.ln();
        }
    }
    total / preds.len() as f64
}

fn distillation_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        }
    }
    total / (a.len() * b.len()) as f64
}

fn to_map(v: &[f64], h: usize, w: usize) -> PredictionMap {
    PredictionMap(Array2::from_shape_vec((h, w), v.to_vec()).unwrap())
}

#[test]
fn hand_computed_values() {
    // 2×2 mask with one foreground pixel, p = 0.5 everywhere: w = 3,
    // loss = -(3·ln 0.5 + 3·ln 0.5) = 6 ln 2.
    let mask = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 0]).unwrap();
    let p = PredictionMap(Array2::from_elem((2, 2), 0.5));
    let bce = weighted_bce(std::slice::from_ref(&p), &[&mask], &mask_weights(&[&mask], 1000.0)).unwrap();
    assert!((bce - 4.1589).abs() < 1e-4);
    assert!((entropy_regularizer(&[p]).unwrap() - 1.3863).abs() < 1e-4);
    let z = LatentActivation(Array3::zeros((1, 1, 2)));
    let o = LatentActivation(Array3::ones((1, 1, 2)));
    assert_eq!(distillation(std::slice::from_ref(&z), std::slice::from_ref(&o)).unwrap(), 2.0);
    assert_eq!(distillation(&[z.clone(), o.clone()], &[z, o]).unwrap(), 1.0);
}

#[test]
fn random_instances_match_scalar_references() {
    let mut r = cellseg::rng::stream(77);
    for _ in 0..100 {
        let n = r.random_range(1..4);
        let preds: Vec<Vec<f64>> = (0..n).map(|_| (0..64).map(|_| r.random::<f64>()).collect()).collect();
        let masks: Vec<Vec<u8>> = (0..n).map(|_| (0..64).map(|_| r.random_bool(0.3) as u8).collect()).collect();
        let pm: Vec<PredictionMap> = preds.iter().map(|p| to_map(p, 8, 8)).collect();
        let mm: Vec<Array2<u8>> = masks.iter().map(|m| Array2::from_shape_vec((8, 8), m.clone()).unwrap()).collect();
        let mr: Vec<&Array2<u8>> = mm.iter().collect();
        let bce = weighted_bce(&pm, &mr, &mask_weights(&mr, 1000.0)).unwrap();
        assert!(common::rel_err(bce, bce_oracle(&preds, &masks)) <= 1e-6);
        assert!(common::rel_err(entropy_regularizer(&pm).unwrap(), entropy_oracle(&preds)) <= 1e-6);
        let lat = |v: &Vec<f64>| LatentActivation(Array3::from_shape_vec((1, 8, 8), v.clone()).unwrap());
        let la: Vec<_> = preds.iter().map(lat).collect();
        let lb: Vec<_> = preds.iter().rev().map(|v| lat(&v.iter().map(|x| x * 2.0 - 0.3).collect())).collect();
        let b_raw: Vec<Vec<f64>> = preds.iter().rev().map(|v| v.iter().map(|x| x * 2.0 - 0.3).collect()).collect();
        assert!(common::rel_err(distillation(&la, &lb).unwrap(), distillation_oracle(&preds, &b_raw)) <= 1e-6);
    }
}

#[test]
fn empty_mask_uses_the_weight_cap() {
    let mask = Array2::<u8>::zeros((2, 2));
    assert_eq!(mask_weights(&[&mask], 1000.0), vec![1000.0]);
    assert_eq!(mask_weights(&[&mask], 5.0), vec![5.0]);
}

#[test]
fn clamped_predictions_stay_finite() {
    let mask = Array2::from_shape_vec((1, 2), vec![1u8, 0]).unwrap();
    let p = PredictionMap(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
    let (v, g) = weighted_bce_with_grad(std::slice::from_ref(&p), &[&mask], &[1.0], PixelReduction::Sum).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert!(g[0].iter().all(|x| *x == 0.0));
    let (e, _) = entropy_with_grad(&[p], EntropyForm::Binary, PixelReduction::Mean).unwrap();
    assert!(e.is_finite() && e >= 0.0);
}

#[test]
fn mismatched_inputs_are_argument_errors() {
    let p = PredictionMap(Array2::zeros((2, 2)));
    let m = Array2::<u8>::zeros((2, 3));
    assert!(weighted_bce(std::slice::from_ref(&p), &[&m], &[1.0]).is_err());
    assert!(weighted_bce(std::slice::from_ref(&p), &[], &[]).is_err());
    assert!(entropy_regularizer(&[]).is_err());
    let a = LatentActivation(Array3::zeros((1, 2, 2)));
    let b = LatentActivation(Array3::zeros((2, 2, 2)));
    assert!(distillation(std::slice::from_ref(&a), &[b]).is_err());
    assert!(distillation(&[a], &[]).is_err());
}

#[test]
fn mean_reduction_divides_by_pixel_count() {
    let mask = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 0]).unwrap();
    let p = PredictionMap(Array2::from_elem((2, 2), 0.3));
    let (sum, _) = weighted_bce_with_grad(std::slice::from_ref(&p), &[&mask], &[3.0], PixelReduction::Sum).unwrap();
    let (mean, _) = weighted_bce_with_grad(&[p], &[&mask], &[3.0], PixelReduction::Mean).unwrap();
    assert!(common::rel_err(sum / 4.0, mean) < 1e-14);
}

#[test]
fn zero_weights_leave_only_the_supervised_term() {
    let d = common::blobs("d", 16, 6, 1);
    let (net, theta) = build_network(&NetworkSpec::new(Architecture::Fcrn, 4, 2), 0).unwrap();
    let batch = |ix: &[usize], labeled| TaskBatch {
        domain_id: "d",
        samples: ix.iter().map(|&i| &d.samples[i]).collect::<Vec<&Sample>>(),
        labeled,
    };
    let (m, n, p) = (batch(&[0, 1], true), batch(&[2, 3], false), batch(&[4, 5], false));
    let full = composite_loss(&net, &theta, &m, &n, &p, LossWeights::FULL, &LossOptions::default()).unwrap();
    let bce = composite_loss(&net, &theta, &m, &n, &p, LossWeights::BCE_ONLY, &LossOptions::default()).unwrap();
    assert_eq!(bce.total, bce.bce);
    assert_eq!(full.bce, bce.bce);
    assert!(common::rel_err(full.total, full.bce + 0.01 * full.er + 0.01 * full.dist) < 1e-14);
    let unlabeled = batch(&[0, 1], false);
    assert!(composite_loss(&net, &theta, &unlabeled, &n, &p, LossWeights::FULL, &LossOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bce_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 16), m in prop::collection::vec(0u8..=1, 16)) {
        let mask = Array2::from_shape_vec((4, 4), m).unwrap();
        let w = mask_weights(&[&mask], 1000.0);
        prop_assert!(weighted_bce(&[to_map(&p, 4, 4)], &[&mask], &w).unwrap() >= 0.0);
    }

    #[test]
    fn entropy_is_bounded_per_pixel(p in prop::collection::vec(0.0f64..=1.0, 16)) {
        let e = entropy_regularizer(&[to_map(&p, 4, 4)]).unwrap();
        // -p ln p peaks at 1/e.
        prop_assert!((0.0..=16.0 / std::f64::consts::E + 1e-12).contains(&e));
    }

    #[test]
    fn distillation_is_symmetric_and_zero_on_itself(a in prop::collection::vec(-3.0f64..3.0, 8), b in prop::collection::vec(-3.0f64..3.0, 8)) {
        let la = LatentActivation(Array3::from_shape_vec((2, 2, 2), a).unwrap());
        let lb = LatentActivation(Array3::from_shape_vec((2, 2, 2), b).unwrap());
        let (sa, sb) = (std::slice::from_ref(&la), std::slice::from_ref(&lb));
        let ab = distillation(sa, sb).unwrap();
        prop_assert!(common::rel_err(ab, distillation(sb, sa).unwrap()) < 1e-14);
        prop_assert_eq!(distillation(sa, sa).unwrap(), 0.0);
    }

    #[test]
    fn analytic_prediction_gradients_match_differences(p in prop::collection::vec(0.05f64..0.95, 4), m in prop::collection::vec(0u8..=1, 4)) {
        let mask = Array2::from_shape_vec((2, 2), m).unwrap();
        let w = mask_weights(&[&mask], 1000.0);
        let (_, g) = weighted_bce_with_grad(&[to_map(&p, 2, 2)], &[&mask], &w, PixelReduction::Sum).unwrap();
        let (_, ge) = entropy_with_grad(&[to_map(&p, 2, 2)], EntropyForm::ForegroundOnly, PixelReduction::Sum).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (weighted_bce(&[to_map(&up, 2, 2)], &[&mask], &w).unwrap() - weighted_bce(&[to_map(&dn, 2, 2)], &[&mask], &w).unwrap()) / (2.0 * h);
            prop_assert!(common::rel_err(fd, g[0].as_slice().unwrap()[i]) < 1e-5);
            let fe = (entropy_regularizer(&[to_map(&up, 2, 2)]).unwrap() - entropy_regularizer(&[to_map(&dn, 2, 2)]).unwrap()) / (2.0 * h);
            prop_assert!((fe - ge[0].as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }
}
