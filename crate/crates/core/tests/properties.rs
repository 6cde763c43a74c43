use epigraph_marl::model::total_value;
use epigraph_marl::rollout::{recursive_values, suffix_values};
use epigraph_marl::solver::{components, consensus, solve_zi, ZSolverConfig};
use epigraph_marl::train::{clipped_objective, lagrange_step, normalize, targets_vh};
use proptest::prelude::*;

fn solver(xi: f64) -> ZSolverConfig {
    ZSolverConfig { z_min: -0.5, z_max: 3.0, xi, ..ZSolverConfig::default() }
}

proptest! {
    #[test]
    fn total_value_never_increases_with_budget(
        vh in -2.0f64..2.0, vl in -2.0f64..2.0, z in -2.0f64..2.0, dz in 0.0f64..3.0,
    ) {
        prop_assert!(total_value(vh, vl, z + dz) <= total_value(vh, vl, z));
        // a large enough budget leaves only the constraint branch
        prop_assert_eq!(total_value(vh, vl, vl - vh + 1.0), vh);
    }

    #[test]
    fn recursion_equals_suffix_definition(
        h in proptest::collection::vec(-1.0f64..1.0, 2..40),
        l_raw in proptest::collection::vec(0.0f64..0.2, 40),
        z0 in -0.5f64..3.0,
    ) {
        let l = &l_raw[..h.len() - 1];
        let mut z = vec![z0];
        for c in l {
            z.push(z.last().unwrap() - c);
        }
        let a = suffix_values(&h, l, &z);
        let b = recursive_values(&h, l, z0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn constraint_targets_at_full_trace_are_suffix_maxima(
        h in proptest::collection::vec(-1.0f64..1.0, 1..30),
        boot in -1.0f64..1.0,
        noise in proptest::collection::vec(-1.0f64..1.0, 31),
    ) {
        let mut values: Vec<f64> = noise[..h.len()].to_vec();
        values.push(boot);
        let t = targets_vh(&h, &values, 1.0);
        for k in 0..h.len() {
            let want = h[k..].iter().copied().fold(boot, f64::max);
            prop_assert_eq!(t[k], want);
        }
    }

    #[test]
    fn solved_budget_is_certified_and_grows_with_buffer(
        a in -1.0f64..2.0, b in 0.1f64..2.0, xi1 in 0.0f64..0.5, dxi in 0.0f64..0.5,
    ) {
        let xi2 = (xi1 + dxi).min(0.5);
        let vh = |z: f64| a - b * z;
        let r1 = solve_zi(vh, &solver(xi1)).unwrap();
        let r2 = solve_zi(vh, &solver(xi2)).unwrap();
        prop_assert!(r1.z >= -0.5 && r1.z <= 3.0);
        if r1.feasible {
            prop_assert!(vh(r1.z) <= -xi1 + 1e-6 * b + 1e-12);
        } else {
            prop_assert_eq!(r1.z, 3.0);
        }
        prop_assert!(r2.z >= r1.z - 1e-6);
    }

    #[test]
    fn consensus_takes_component_maximum(
        pts in proptest::collection::vec((0.0f64..1.5, 0.0f64..1.5), 1..8),
        z in proptest::collection::vec(-0.5f64..3.0, 8),
    ) {
        let pos: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let z = &z[..pos.len()];
        let out = consensus(z, &pos, 0.5);
        let comp = components(&pos, 0.5);
        for i in 0..pos.len() {
            prop_assert!(out[i] >= z[i]);
            let best = (0..pos.len()).filter(|&j| comp[j] == comp[i]).map(|j| z[j]).fold(f64::MIN, f64::max);
            prop_assert_eq!(out[i], best);
        }
    }

    #[test]
    fn clipped_objective_is_pessimistic(ratio in 0.0f64..3.0, adv in -3.0f64..3.0, eps in 0.05f64..0.5) {
        prop_assert!(clipped_objective(ratio, adv, eps) <= ratio * adv + 1e-12);
    }

    #[test]
    fn multiplier_never_decreases_under_violation(lambda in 0.0f64..10.0, lr in 0.0f64..0.1, v in 0.0f64..5.0) {
        prop_assert!(lagrange_step(lambda, lr, v) >= lambda);
        prop_assert!(lagrange_step(lambda, lr, -v) >= 0.0);
    }

    #[test]
    fn normalized_advantages_are_standardized(adv in proptest::collection::vec(-5.0f64..5.0, 2..50)) {
        let n = normalize(&adv);
        let m = n.iter().sum::<f64>() / n.len() as f64;
        prop_assert!(m.abs() < 1e-9);
        let spread = adv.iter().cloned().fold(f64::MIN, f64::max) - adv.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            let v = n.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n.len() as f64;
            prop_assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
