use std::sync::OnceLock;

use hyperbolic_backstepping::controller::{
    backstepping_transform, evaluate_controls, gains_from_table, ControlGains,
};
use hyperbolic_backstepping::geometry::{
    build_phi_maps, characteristic_l11, characteristic_l12, CoefficientProfile, Phi, PhiMaps,
    Region, SpeedCase,
};
use hyperbolic_backstepping::grid::PlantGrid;
use hyperbolic_backstepping::kernel::{
    solve_kernels, solve_kernels_with, InitialIterate, KernelGrid, KernelName, KernelTable,
    SolveOptions,
};
use hyperbolic_backstepping::simulator::BoundaryFeedback;
use hyperbolic_backstepping::simulator::{simulate, OpenLoop, PlantState, SimConfig};
use proptest::prelude::*;

struct Fixture {
    profile: CoefficientProfile,
    phi: PhiMaps,
    kernels: KernelGrid,
    table: KernelTable,
    gains: ControlGains,
}

const PLANT_NODES: usize = 81;

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let profile = CoefficientProfile::example(1024).unwrap();
        let phi = build_phi_maps(&profile, 1025).unwrap();
        let (kernels, _) =
            solve_kernels(&profile, &phi, SpeedCase::LambdaFaster, 65, 1e-12).unwrap();
        let table = KernelTable::new(&kernels, PlantGrid::new(PLANT_NODES).unwrap());
        let gains = gains_from_table(&table, &phi);
        Fixture {
            profile,
            phi,
            kernels,
            table,
            gains,
        }
    })
}

/// A point of the upper triangle `0 <= w <= 1`, `|z| <= w`.
fn upper_point() -> impl Strategy<Value = (f64, f64)> {
    (0.01f64..=1.0, -1.0f64..=1.0).prop_map(|(w, t)| (t * w, w))
}

fn rk4(f: impl Fn(f64) -> f64, x0: f64, t: f64, steps: usize) -> f64 {
    let h = t / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

fn state_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-2.0f64..2.0, PLANT_NODES),
        prop::collection::vec(-2.0f64..2.0, PLANT_NODES),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn characteristics_reproduce_their_endpoint((z, w) in upper_point()) {
        let f = fixture();
        let paths = [
            characteristic_l11(z, w, &f.phi).unwrap(),
            characteristic_l12(z, w, &f.phi, SpeedCase::LambdaFaster).unwrap(),
        ];
        for path in &paths {
            prop_assert!((path.w_at(path.t_final) - w).abs() <= 1e-9);
            prop_assert!((path.z_at(path.t_final) - z).abs() <= 1e-9);
            for i in 1..=32 {
                let t = path.t_final * i as f64 / 33.0;
                let (pz, pw) = (path.z_at(t), path.w_at(t));
                prop_assert!(pw >= -1e-9 && pw <= 1.0 + 1e-9);
                prop_assert!(pz.abs() <= pw + 1e-9, "({pz}, {pw}) left the triangle");
            }
        }
    }

    #[test]
    fn characteristics_match_ode_integration((z, w) in upper_point()) {
        let f = fixture();
        // analytic speeds of the example profile
        let lambda = |x: f64| 3.0 + x * x;
        let mu = |x: f64| 2.0 + x.powi(4);
        let l11 = characteristic_l11(z, w, &f.phi).unwrap();
        let (z0, w0) = l11.start;
        let t = l11.t_final;
        prop_assert!((rk4(lambda, w0, t, 400) - w).abs() < 1e-9);
        prop_assert!((rk4(lambda, z0, t, 400) - z).abs() < 1e-9);

        let l12 = characteristic_l12(z, w, &f.phi, SpeedCase::LambdaFaster).unwrap();
        let (z0, w0) = l12.start;
        let t = l12.t_final;
        prop_assert!((rk4(lambda, w0, t, 400) - w).abs() < 1e-9);
        prop_assert!((rk4(|x| -mu(x), z0, t, 400) - z).abs() < 1e-9);
    }

    #[test]
    fn l12_region_follows_start_boundary((z, w) in upper_point()) {
        let f = fixture();
        let path = characteristic_l12(z, w, &f.phi, SpeedCase::LambdaFaster).unwrap();
        let (z0, w0) = path.start;
        match path.region {
            Region::T1 => prop_assert!((z0 - w0).abs() < 1e-9),
            Region::T2 => prop_assert!((z0 + w0).abs() < 1e-9),
            Region::NotApplicable => prop_assert!(false, "Case 2 point without a region"),
        }
        // the example speeds are even, so the sign rule is mirror symmetric
        prop_assert_eq!(f.kernels.region(z, w), f.kernels.region(-z, -w));
    }

    #[test]
    fn phi_maps_are_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        prop_assume!((a - b).abs() > 1e-6);
        let phi = &fixture().phi;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for kind in [Phi::One, Phi::Two, Phi::Three] {
            prop_assert!(phi.eval(kind, lo) < phi.eval(kind, hi));
        }
        prop_assert!(phi.eval(Phi::Four, lo) > phi.eval(Phi::Four, hi));
    }

    #[test]
    fn decoupled_transport_never_amplifies(
        u in prop::collection::vec(-1.0f64..1.0, 41),
        v in prop::collection::vec(-1.0f64..1.0, 41),
        lam in 0.5f64..3.0,
        mu in 0.5f64..3.0,
    ) {
        let p = CoefficientProfile::constant(lam, mu, 0.0, 0.0, 64).unwrap();
        let grid = PlantGrid::new(41).unwrap();
        let s0 = PlantState::new(&grid, u, v).unwrap();
        let sup0 = s0.u.iter().chain(&s0.v).fold(0.0_f64, |m, x| m.max(x.abs()));
        let cfg = SimConfig::new(41, 0.8, 1.0).unwrap();
        let mut ok = true;
        simulate(&p, &cfg, s0, &OpenLoop, |s| {
            let sup = s.u.iter().chain(&s.v).fold(0.0_f64, |m, x| m.max(x.abs()));
            ok &= sup <= sup0 + 1e-14;
        }).unwrap();
        prop_assert!(ok);
    }

    #[test]
    fn closure_zeroes_transformed_boundary((u, v) in state_strategy()) {
        let f = fixture();
        let grid = *f.table.grid();
        let (u1, u2) = f.gains.boundary_inputs(0.0, &u, &v);
        let (mut u, mut v) = (u, v);
        u[0] = u1;
        v[PLANT_NODES - 1] = u2;
        let state = PlantState::new(&grid, u, v).unwrap();
        let target = backstepping_transform(&state, &f.table).unwrap();
        let scale = 1.0 + state.l2_norm(&grid);
        prop_assert!(target.alpha[0].abs() <= 1e-10 * scale);
        prop_assert!(target.beta[PLANT_NODES - 1].abs() <= 1e-10 * scale);
    }

    #[test]
    fn controls_are_linear_in_the_state((u, v) in state_strategy(), a in -5.0f64..5.0) {
        let f = fixture();
        let (c1, c2) = evaluate_controls(&u, &v, &f.gains);
        let su: Vec<f64> = u.iter().map(|x| a * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| a * x).collect();
        let (s1, s2) = evaluate_controls(&su, &sv, &f.gains);
        let tol = 1e-12 * (1.0 + c1.abs().max(c2.abs()) * a.abs().max(1.0));
        prop_assert!((a * c1 - s1).abs() <= tol && (a * c2 - s2).abs() <= tol);
    }
}

#[test]
fn initial_iterates_reach_the_same_fixed_point() {
    let f = fixture();
    let tol = 1e-12;
    let solve = |initial| {
        solve_kernels_with(
            &f.profile,
            &f.phi,
            SpeedCase::LambdaFaster,
            &SolveOptions {
                tol,
                initial,
                ..SolveOptions::with_nodes(65)
            },
        )
        .unwrap()
        .0
    };
    let (a, b) = (solve(InitialIterate::Forcing), solve(InitialIterate::Zero));
    for name in KernelName::ALL {
        let diff = a
            .field(name)
            .iter()
            .zip(b.field(name))
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff <= 10.0 * tol, "{name:?} differs by {diff:e}");
    }
}

#[test]
fn doubling_couplings_doubles_diagonal_traces() {
    let f = fixture();
    let doubled = f.profile.scaled_couplings(2.0);
    let (k2, _) = solve_kernels(&doubled, &f.phi, SpeedCase::LambdaFaster, 65, 1e-12).unwrap();
    for (a, b) in f.kernels.h1_trace().iter().zip(k2.h1_trace()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    for (a, b) in f.kernels.h2_trace().iter().zip(k2.h2_trace()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn refinement_differences_shrink() {
    let f = fixture();
    let solve = |n| {
        solve_kernels(&f.profile, &f.phi, SpeedCase::LambdaFaster, n, 1e-12)
            .unwrap()
            .0
    };
    let (k33, k65, k129) = (solve(33), solve(65), solve(129));
    // compare on points away from the discontinuity line, where the sup norm is meaningful
    let mut d1 = 0.0_f64;
    let mut d2 = 0.0_f64;
    for i in 0..=32 {
        let w = -1.0 + 2.0 * i as f64 / 32.0;
        for j in 0..=32 {
            let z = w * (-1.0 + 2.0 * j as f64 / 32.0);
            let inv = f.phi.phi1(w) + f.phi.phi2(z);
            if inv.abs() < 0.05 {
                continue;
            }
            for name in KernelName::ALL {
                let (a, b, c) = (
                    k33.eval(name, z, w),
                    k65.eval(name, z, w),
                    k129.eval(name, z, w),
                );
                d1 = d1.max((a - b).abs());
                d2 = d2.max((b - c).abs());
            }
        }
    }
    assert!(
        d1 / d2 >= 1.5,
        "difference ratio {:.3} ({d1:e} -> {d2:e})",
        d1 / d2
    );
}

#[test]
fn l12_jump_near_apex_matches_diagonal_data() {
    let f = fixture();
    // just above the apex, T1 values come from h1(0) on the diagonal and T2
    // values from zero on the anti-diagonal
    let w = 0.1;
    let z_line = f.phi.inverse(Phi::Two, -f.phi.phi1(w)).unwrap();
    let eps = 0.01;
    let t1 = f.kernels.eval(KernelName::L12, z_line + eps, w);
    let t2 = f.kernels.eval(KernelName::L12, z_line - eps, w);
    let h1_0 = f.profile.h1(0.0);
    let jump = (t1 - t2).abs();
    assert!(
        (jump - h1_0.abs()).abs() < 0.05 * h1_0.abs(),
        "jump {jump:.4} vs |h1(0)| {:.4}",
        h1_0.abs()
    );
}
