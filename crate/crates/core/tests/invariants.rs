use occflow::inference::{ensemble, rotate180_prediction};
use occflow::losses::warp;
use occflow::metrics::{pr_auc, pr_auc_exhaustive, soft_iou};
use occflow::model::Prediction;
use occflow::raster::GridSpec;
use occflow::scenario::{generate_scenario, scenario_from_json, scenario_to_json, GeneratorConfig};
use occflow::training::running_average;
use occflow::Tensor;
use proptest::prelude::*;

const N: usize = 8;

fn grid() -> GridSpec {
    GridSpec::centered(N as f64, 1.0).unwrap()
}

fn prediction(t: usize) -> impl Strategy<Value = Prediction> {
    let c = N * N;
    (
        prop::collection::vec(0f32..1.0, t * c),
        prop::collection::vec(0f32..1.0, t * c),
        prop::collection::vec(-4f32..4.0, 2 * t * c),
    )
        .prop_map(|(observed, occluded, flow)| Prediction { grid: grid(), observed, occluded, flow })
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0f64..1.0, n), prop::collection::vec(prop::bool::weighted(0.3), n)))
        .prop_map(|(p, y)| (p, y.into_iter().map(f64::from).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotating_twice_is_the_identity(p in prediction(2)) {
        prop_assert_eq!(rotate180_prediction(&rotate180_prediction(&p)), p);
    }

    #[test]
    fn ensemble_stays_inside_the_member_envelope(a in prediction(1), b in prediction(1), w in 0f64..1.0) {
        let e = ensemble(&[a.clone(), b.clone()], &[w, 1.0 - w]).unwrap();
        let inside = |x: &[f32], y: &[f32], z: &[f32]| x.iter().zip(y).zip(z).all(|((x, y), z)| *z >= x.min(*y) - 1e-5 && *z <= x.max(*y) + 1e-5);
        prop_assert!(inside(&a.observed, &b.observed, &e.observed));
        prop_assert!(inside(&a.occluded, &b.occluded, &e.occluded));
        prop_assert!(inside(&a.flow, &b.flow, &e.flow));
    }

    #[test]
    fn soft_iou_is_symmetric_and_bounded(x in prop::collection::vec(0f64..1.0, 2 * N * N), y in prop::collection::vec(0f64..1.0, 2 * N * N)) {
        let a = soft_iou(&x, &y, 2).unwrap();
        prop_assert!((a - soft_iou(&y, &x, 2).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        // only a binary map is fully overlapped by itself
        let m: Vec<f64> = x.iter().map(|&v| f64::from(v > 0.5)).collect();
        if m.iter().take(N * N).any(|&v| v > 0.0) && m.iter().skip(N * N).any(|&v| v > 0.0) {
            prop_assert!((soft_iou(&m, &m, 2).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert!(soft_iou(&x, &x, 2).unwrap() <= 1.0);
    }

    #[test]
    fn pr_auc_is_a_probability((p, y) in scores_and_labels()) {
        for a in [pr_auc(&p, &y, 100).unwrap(), pr_auc_exhaustive(&p, &y).unwrap()] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn perfect_scores_give_full_area((_, y) in scores_and_labels()) {
        prop_assume!(y.iter().any(|&v| v == 1.0));
        prop_assert!((pr_auc(&y, &y, 100).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warp_is_bounded_by_its_input(occ in prop::collection::vec(0f64..1.0, N * N), flow in prop::collection::vec(-10f64..10.0, 2 * N * N)) {
        let out = warp(&Tensor::new(occ, &[1, N, N]), &Tensor::new(flow, &[1, 2, N, N])).unwrap().to_vec();
        prop_assert!(out.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn running_average_is_the_mean(xs in prop::collection::vec(prop::collection::vec(-5f32..5.0, 4), 1..6)) {
        let mut avg = xs[0].clone();
        for (n, x) in xs.iter().enumerate().skip(1) {
            avg = running_average(&avg, x, n);
        }
        for (i, a) in avg.iter().enumerate() {
            let mean = xs.iter().map(|x| x[i]).sum::<f32>() / xs.len() as f32;
            prop_assert!((a - mean).abs() < 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scenarios_survive_a_json_round_trip(seed in any::<u64>()) {
        let s = generate_scenario(seed, &GeneratorConfig::default()).unwrap();
        prop_assert_eq!(scenario_from_json(&scenario_to_json(&s).unwrap()).unwrap(), s);
    }
}
