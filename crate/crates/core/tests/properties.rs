mod common;

use nalgebra::{DMatrix, DVector, Rotation3};
use proptest::prelude::*;
use tdoa_assoc::crlb::fisher_information;
use tdoa_assoc::refine::{objective, refine_position, RefineConfig};
use tdoa_assoc::scene::{tdoa, Observation, Point3, ReceiverPair};
use tdoa_assoc::transport::{
    dual_objective, extract_selection, gamma, ground_cost, primal_objective, sinkhorn_solve,
    CostMatrix, DualState, SolverConfig, Sweep, TransportPlan,
};

fn point(range: f64) -> impl Strategy<Value = Point3> {
    prop::array::uniform3(-range..range).prop_map(Point3::from)
}

fn receivers(n: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(5.0), n).prop_filter("receivers too close", |rx| {
        rx.iter()
            .enumerate()
            .all(|(i, a)| rx[..i].iter().all(|b| (a - b).norm() > 0.3))
    })
}

fn cost_matrix(max_cost: f64) -> impl Strategy<Value = CostMatrix> {
    (1usize..=6, 1usize..=4)
        .prop_flat_map(move |(rows, cols)| {
            (
                prop::collection::vec(0.0..max_cost, rows * cols),
                0.0..max_cost,
                Just((rows, cols)),
            )
        })
        .prop_map(|(values, void, (rows, cols))| {
            CostMatrix::new(
                DMatrix::from_vec(rows, cols, values),
                DVector::from_element(rows, void),
                vec![ReceiverPair { k: 0, l: 1 }; rows],
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tdoa_is_antisymmetric(s in point(10.0), a in point(10.0), b in point(10.0)) {
        let d = tdoa(&s, &a, &b, 1.0);
        prop_assert!((d + tdoa(&s, &b, &a, 1.0)).abs() <= 1e-12 * (1.0 + d.abs()));
        prop_assert!(d.abs() <= (a - b).norm() + 1e-12);
    }

    #[test]
    fn ground_cost_pair_swap(x in point(5.0), tau in -3.0..3.0f64, rx in receivers(2)) {
        let c = ground_cost(&x, tau, ReceiverPair { k: 0, l: 1 }, &rx);
        let swapped = ground_cost(&x, -tau, ReceiverPair { k: 1, l: 0 }, &rx);
        prop_assert!((c - swapped).abs() <= 1e-12 * (1.0 + c));
    }

    #[test]
    fn gamma_kkt(y in prop::collection::vec(prop_oneof![Just(0.0), 1e-3..50.0f64], 1..8), p in 0.0..6.0f64) {
        let x = gamma(&y, p);
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        prop_assert!(l1 <= p + 1e-12);
        prop_assert!(x.iter().all(|&v| v <= 0.0));
        let active: Vec<usize> = (0..y.len()).filter(|&i| x[i] < 0.0).collect();
        if let Some(&first) = active.first() {
            let level = y[first] * x[first].exp();
            for &i in &active {
                prop_assert!((y[i] * x[i].exp() - level).abs() <= 1e-8 * level.max(1.0));
            }
            for i in (0..y.len()).filter(|i| !active.contains(i)) {
                prop_assert!(y[i] <= level * (1.0 + 1e-8));
            }
            prop_assert!((l1 - p).abs() <= 1e-9 * p.max(1.0));
        }
        let (_, best) = common::gamma_bruteforce(&y, p);
        let f: f64 = x.iter().zip(&y).map(|(a, b)| b * a.exp()).sum();
        prop_assert!((f - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn log_domain_safety(cm in cost_matrix(1e4)) {
        let cfg = SolverConfig { r_tilde: 2.0, max_iter: 300, ..SolverConfig::default() };
        let sol = sinkhorn_solve(&cm, &cfg).unwrap();
        // Plan entries are exponentials of sums of potentials as large as the
        // costs, so their relative resolution is about cost · 2⁻⁵² / ε.
        let slack = 8.0 * 1e4 * f64::EPSILON / cfg.epsilon;
        prop_assert!(sol.plan.plan.iter().chain(sol.plan.void.iter()).all(|v| v.is_finite() && (0.0..=1.0 + slack).contains(v)));
        prop_assert!(sol.dual.lambda.iter().chain(sol.dual.mu.iter()).chain(sol.dual.phi.iter()).all(|v| v.is_finite()));
        prop_assert!(sol.diagnostics.primal.is_finite() && sol.diagnostics.dual.is_finite());
        prop_assert!(sol.dual.mu.iter().all(|&m| m >= 0.0));
        prop_assert!(sol.dual.phi_norm() <= cfg.eta + 1e-12);
    }

    #[test]
    fn weak_duality(cm in cost_matrix(10.0), cap in 1usize..=3, eps in prop_oneof![Just(1e-7), Just(1e-3), Just(0.1)]) {
        let cfg = SolverConfig { r_tilde: cap as f64, epsilon: eps, max_iter: 500, ..SolverConfig::default() };
        let sol = sinkhorn_solve(&cm, &cfg).unwrap();
        // Sending everything to the void is feasible.
        let void_plan = TransportPlan {
            plan: DMatrix::zeros(cm.rows(), cm.cols()),
            void: DVector::from_element(cm.rows(), 1.0),
        };
        let d = dual_objective(&sol.dual, &cm, &cfg);
        prop_assert!(d <= primal_objective(&void_plan, &cm, &cfg) + 1e-9);
        // Any dual-feasible point lower-bounds it too.
        let mut other = DualState::zeros(cm.rows(), cm.cols(), eps);
        other.lambda = sol.dual.lambda.map(|v| v - 0.3);
        other.mu = sol.dual.mu.map(|v| v + 0.1);
        prop_assert!(dual_objective(&other, &cm, &cfg) <= primal_objective(&void_plan, &cm, &cfg) + 1e-9);
        if sol.diagnostics.converged {
            prop_assert!(sol.diagnostics.dual <= sol.diagnostics.primal + 1e-6 * sol.diagnostics.primal.abs().max(1.0));
        }
    }

    #[test]
    fn monotone_dual_ascent(cm in cost_matrix(10.0), cap in 1usize..=3, columnwise in any::<bool>()) {
        let cfg = SolverConfig {
            r_tilde: cap as f64,
            epsilon: 0.05,
            anneal: false,
            trace_objective: true,
            max_iter: 200,
            sweep: if columnwise { Sweep::Columnwise } else { Sweep::Alternating },
            ..SolverConfig::default()
        };
        let sol = sinkhorn_solve(&cm, &cfg).unwrap();
        let t = &sol.diagnostics.objective_trace;
        prop_assert!(!t.is_empty());
        for w in t.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0), "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn selection_permutation_equivariance(
        values in prop::collection::vec(0.0..1.0f64, 24),
        void in prop::collection::vec(0.0..1.0f64, 4),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        s in 1usize..=3,
    ) {
        let plan = DMatrix::from_vec(4, 6, values);
        let void = DVector::from_vec(void);
        let permuted = DMatrix::from_fn(4, 6, |i, j| plan[(i, perm[j])]);
        let a = extract_selection(&TransportPlan { plan: plan.clone(), void: void.clone() }, s).unwrap();
        let b = extract_selection(&TransportPlan { plan: permuted, void }, s).unwrap();
        let mut sa: Vec<usize> = a.selected.iter().map(|x| x.candidate).collect();
        let mut sb: Vec<usize> = b.selected.iter().map(|x| perm[x.candidate]).collect();
        sa.sort_unstable();
        sb.sort_unstable();
        prop_assert_eq!(sa, sb);
        // Same slot order, so rows land on the same original column.
        let orig = |r: &tdoa_assoc::transport::AssociationResult, map: &dyn Fn(usize) -> usize, i: usize| match r.assign[i] {
            tdoa_assoc::transport::Assignment::Source(slot) => Some(map(r.selected[slot].candidate)),
            tdoa_assoc::transport::Assignment::Void => None,
        };
        for i in 0..4 {
            prop_assert_eq!(orig(&a, &|c| c, i), orig(&b, &|c| perm[c], i));
        }
    }

    #[test]
    fn refine_never_increases_objective(
        rx in receivers(6),
        s in point(4.0),
        x0 in point(6.0),
        noise in prop::collection::vec(-0.2..0.2f64, 15),
    ) {
        let obs: Vec<Observation> = ReceiverPair::all(6)
            .into_iter()
            .zip(&noise)
            .map(|(pair, n)| Observation { pair, value: tdoa(&s, &rx[pair.k], &rx[pair.l], 1.0) + n })
            .collect();
        let out = refine_position(&x0, &obs, &rx, &RefineConfig::default());
        prop_assert!(out.objective <= out.initial_objective);
        prop_assert!((objective(&out.position, &obs, &rx) - out.objective).abs() <= 1e-12 * (1.0 + out.objective));
        prop_assert!((out.position - x0).norm() <= RefineConfig::default().max_shift + 1e-9);
    }

    #[test]
    fn fisher_loewner_order(rx in receivers(7), s in point(4.0), split in 1usize..20, sigma in 0.01..0.3f64) {
        let all = ReceiverPair::all(7);
        let sub = &all[..split];
        let big = fisher_information(&s, &all, &rx, sigma);
        let small = fisher_information(&s, sub, &rx, sigma);
        if let (Ok(big), Ok(small)) = (big, small) {
            let diff = big.0 - small.0;
            let min_ev = diff.symmetric_eigenvalues().min();
            prop_assert!(min_ev >= -1e-9 * big.0.norm());
        }
    }

    #[test]
    fn fisher_rigid_invariance(rx in receivers(6), s in point(4.0), t in point(20.0), angles in prop::array::uniform3(-3.0..3.0f64)) {
        let pairs = ReceiverPair::all(6);
        let Ok(j) = fisher_information(&s, &pairs, &rx, 0.05) else { return Ok(()); };
        let moved: Vec<Point3> = rx.iter().map(|r| r + t).collect();
        let jt = fisher_information(&(s + t), &pairs, &moved, 0.05).unwrap();
        prop_assert!((j.0 - jt.0).norm() <= 1e-9 * j.0.norm());
        let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
        let turned: Vec<Point3> = rx.iter().map(|r| rot * r).collect();
        let jr = fisher_information(&(rot * s), &pairs, &turned, 0.05).unwrap();
        let expected = rot.matrix() * j.0 * rot.matrix().transpose();
        prop_assert!((jr.0 - expected).norm() <= 1e-9 * j.0.norm());
    }

    #[test]
    fn fisher_matches_finite_differences(rx in receivers(5), s in point(4.0), sigma in 0.01..0.3f64) {
        let pairs = ReceiverPair::all(5);
        let Ok(j) = fisher_information(&s, &pairs, &rx, sigma) else { return Ok(()); };
        let fd = common::fisher_fd(&s, &pairs, &rx, sigma, 1e-4);
        prop_assert!((j.0 - fd).norm() <= 1e-4 * j.0.norm());
    }
}
