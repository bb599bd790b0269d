use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uamflow::autodiff::ParamStore;
use uamflow::cnf::{coupling_forward, invert_permutation, swap_halves, FlowStack};
use uamflow::controller::{
    distance_after, los_probability, speed_after, LaneGeometry, RateSet, SeparationStandard, MAX_ACCELERATION,
    MAX_DECELERATION, V_MAX,
};
use uamflow::geo::{EnuPoint, LocalFrame};
use uamflow::predictor::{normalized_weights, PredictionSet};
use uamflow::synthetic::GIMPO;

fn flow(dim: usize, cond: usize, layers: usize, clamp: f64, seed: u64) -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = FlowStack::init(&mut store, dim, cond, layers, 16, Some(clamp), &mut rng);
    // larger weights than the default init so the scales actually move
    for t in store.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v *= 8.0);
    }
    (store, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_round_trip(
        dim in 1usize..9,
        cond in 1usize..5,
        seed in 0u64..1000,
        z in prop::collection::vec(-3.0f64..3.0, 8),
        h in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let (store, f) = flow(dim, cond, 3, 3.0, seed);
        let (x, ld_fwd) = f.forward(&store, &z[..dim], &h[..cond]).unwrap();
        let (back, ld_inv) = f.inverse(&store, &x, &h[..cond]).unwrap();
        for (a, b) in back.iter().zip(&z[..dim]) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((ld_fwd - ld_inv).abs() <= 1e-9 * ld_fwd.abs().max(1.0));
    }

    #[test]
    fn coupling_logdet_is_bounded_by_clamp(
        dim in 2usize..9,
        clamp in 0.1f64..4.0,
        seed in 0u64..1000,
        x in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let (store, f) = flow(dim, 2, 1, clamp, seed);
        let layer = &f.layers[0];
        prop_assert!(layer.split >= 1 && layer.split < dim);
        let (_, ld) = coupling_forward(&store, layer, &x[..dim], &[0.5, -0.5]).unwrap();
        prop_assert!(ld.abs() <= clamp * (dim - layer.split) as f64 + 1e-12);
    }

    #[test]
    fn permutations_are_bijections(dim in 1usize..40, split_frac in 0.0f64..1.0) {
        let split = ((dim as f64) * split_frac) as usize;
        let p = swap_halves(dim, split);
        let inv = invert_permutation(&p);
        let mut seen = p.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..dim).collect::<Vec<_>>());
        for i in 0..dim {
            prop_assert_eq!(p[inv[i]], i);
            prop_assert_eq!(inv[p[i]], i);
        }
    }

    #[test]
    fn speed_stays_in_envelope(v in 0.0f64..=V_MAX, a in MAX_DECELERATION..=MAX_ACCELERATION, t in 0.0f64..120.0) {
        let s = speed_after(v, a, t);
        prop_assert!((0.0..=V_MAX).contains(&s));
        let d = distance_after(v, a, t);
        prop_assert!(d >= 0.0);
        prop_assert!(d <= V_MAX * t + 1e-9);
        prop_assert!(distance_after(v, a, t + 1.0) >= d);
    }

    #[test]
    fn rate_grid_members_in_bounds(steps in 1usize..200) {
        let r = RateSet::with_steps(steps);
        prop_assert_eq!(r.rates.len(), steps + 2);
        prop_assert!(r.rates.iter().all(|a| (MAX_DECELERATION..=MAX_ACCELERATION).contains(a)));
        prop_assert_eq!(*r.rates.last().unwrap(), MAX_DECELERATION);
    }

    #[test]
    fn weights_sum_to_one(lp in prop::collection::vec(-500.0f64..50.0, 1..120)) {
        let w = normalized_weights(&lp);
        prop_assert_eq!(w.len(), lp.len());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn los_probability_is_a_weighted_hit_fraction(
        offsets in prop::collection::vec((-3000.0f64..3000.0, -600.0f64..600.0, 0.1f64..1.0), 1..20),
    ) {
        let frame = LocalFrame::new(GIMPO).unwrap();
        let lane = LaneGeometry::new(EnuPoint::new(0.0, 0.0, 0.0), EnuPoint::new(0.0, 20_000.0, 0.0), 600.0);
        let plan: Vec<EnuPoint> = (1..=60).map(|t| lane.point_at(V_MAX * t as f64)).collect();
        let raw: Vec<f64> = offsets.iter().map(|o| o.2).collect();
        let total: f64 = raw.iter().sum();
        let preds = PredictionSet {
            aircraft_id: "x".into(),
            issued_at: 0,
            paths: offsets
                .iter()
                .map(|&(de, du, _)| plan.iter().map(|p| EnuPoint::new(p.east + de, p.north, p.up + du)).collect())
                .collect(),
            weights: raw.iter().map(|w| w / total).collect(),
            clamped_samples: 0,
        };
        let std = SeparationStandard::default();
        let hits = los_probability(&frame, &plan, &preds, &std).unwrap();
        prop_assert!((0.0..=1.0).contains(&hits.probability));
        prop_assert_eq!(hits.probability == 0.0, hits.first_hit.iter().all(Option::is_none));
        let expected: f64 = offsets
            .iter()
            .zip(&preds.weights)
            .filter(|((de, du, _), _)| de.abs() < 761.0 && du.abs() <= std.vertical_m)
            .map(|(_, w)| w)
            .sum();
        let borderline = offsets.iter().any(|(de, du, _)| (de.abs() - 762.0).abs() < 1.0 || (du.abs() - std.vertical_m).abs() < 1e-6);
        if !borderline {
            prop_assert!((hits.probability - expected).abs() <= 1e-12);
        }
    }
}
