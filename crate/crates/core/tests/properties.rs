use proptest::prelude::*;

use twolane::control::{estimates_to_physical, ObserverState};
use twolane::model::{
    characteristic_to_physical, compute_steady_state, equilibrium_speed, linearize, physical_to_characteristic,
    pressure, ratio_coefficients, CharField, ModelParams, SteadyState, TrafficField, PER_KM,
};
use twolane::Grid;

fn params(gamma: f64, sigma: f64, relax: (f64, f64)) -> ModelParams {
    let mut p = ModelParams::table1();
    p.gamma = gamma;
    p.t_pref_fast = sigma * p.t_pref_slow;
    p.t_relax_slow = relax.0;
    p.t_relax_fast = relax.1;
    p
}

/// Largest slow-lane density keeping both lane speeds positive.
fn feasible_limit(p: &ModelParams) -> f64 {
    let r = ratio_coefficients(p);
    let lane_zero = |i: usize| p.rho_max_equiv * r[i].powf(-1.0 / p.gamma);
    lane_zero(0).min(lane_zero(1) / p.sigma())
}

fn table1_setup() -> (ModelParams, SteadyState, twolane::LinearCoeffs) {
    let p = ModelParams::table1();
    let ss = compute_steady_state(&p, 180.0 * PER_KM).unwrap();
    let lc = linearize(&p, &ss).unwrap();
    (p, ss, lc)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn equilibrium_satisfies_balance(
        gamma in 0.5f64..2.0,
        sigma in 0.25f64..4.0,
        ts in 20.0f64..400.0,
        tf in 20.0f64..400.0,
        frac in 0.05f64..0.95,
    ) {
        let p = params(gamma, sigma, (ts, tf));
        let ss = compute_steady_state(&p, frac * feasible_limit(&p)).unwrap();
        for r in ss.balance_residuals(&p) {
            prop_assert!(r < 1e-10, "residual {r}");
        }
        prop_assert!(ss.v_star.iter().all(|&v| v > 0.0));
        prop_assert!(rel_err(ss.rho_star[1], sigma * ss.rho_star[0]) < 1e-15);
    }

    #[test]
    fn symmetric_lanes_are_greenshield(
        gamma in 0.5f64..2.0,
        relax in 20.0f64..400.0,
        frac in 0.05f64..0.95,
    ) {
        let p = params(gamma, 1.0, (relax, relax));
        let rho = frac * p.rho_max_equiv;
        let ss = compute_steady_state(&p, rho).unwrap();
        let v = equilibrium_speed(rho, &p).unwrap();
        prop_assert_eq!(ss.r, [1.0, 1.0]);
        prop_assert_eq!(ss.rho_star, [rho, rho]);
        prop_assert_eq!(ss.v_star, [v, v]);
        prop_assert_eq!(ss.rho_max, [p.rho_max_equiv; 2]);
    }

    #[test]
    fn speed_falls_and_pressure_rises_with_density(
        gamma in 0.5f64..2.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let p = params(gamma, 0.5, (200.0, 100.0));
        let (lo, hi) = (a.min(b) * p.rho_max_equiv, a.max(b) * p.rho_max_equiv);
        prop_assume!(hi > lo);
        prop_assert!(equilibrium_speed(lo, &p).unwrap() > equilibrium_speed(hi, &p).unwrap());
        prop_assert!(pressure(lo, p.rho_max_equiv, &p).unwrap() < pressure(hi, p.rho_max_equiv, &p).unwrap());
    }
}

fn random_field(grid: Grid, ss: &SteadyState, amp: &[f64]) -> TrafficField {
    let mut f = TrafficField::steady(grid, ss);
    let n = grid.n_nodes();
    for i in 0..2 {
        for j in 0..n {
            f.rho[i][j] *= 1.0 + amp[(4 * j + 2 * i) % amp.len()];
            f.v[i][j] *= 1.0 + amp[(4 * j + 2 * i + 1) % amp.len()];
        }
    }
    f
}

fn max_rel(a: &TrafficField, b: &TrafficField) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for (x, y) in a.rho[i].iter().zip(&b.rho[i]).chain(a.v[i].iter().zip(&b.v[i])) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn physical_characteristic_round_trip(
        n_cells in 8usize..40,
        amp in prop::collection::vec(-0.4f64..0.4, 16),
    ) {
        let (_, ss, lc) = table1_setup();
        let grid = Grid::new(n_cells, lc.length).unwrap();
        let f = random_field(grid, &ss, &amp);
        let back = characteristic_to_physical(&physical_to_characteristic(&f, &ss, &lc).unwrap(), &ss, &lc).unwrap();
        prop_assert!(max_rel(&f, &back) < 1e-12);
    }

    #[test]
    fn estimate_round_trip(
        n_cells in 8usize..40,
        amp in prop::collection::vec(-0.4f64..0.4, 16),
    ) {
        let (_, ss, lc) = table1_setup();
        let grid = Grid::new(n_cells, lc.length).unwrap();
        let f = random_field(grid, &ss, &amp);
        let est = ObserverState::from_physical(&f, &ss, &lc).unwrap();
        let back = estimates_to_physical(&est, &ss, &lc).unwrap();
        prop_assert!(max_rel(&f, &back) < 1e-12);
    }

    #[test]
    fn characteristic_physical_round_trip(
        vals in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let (_, ss, lc) = table1_setup();
        let grid = Grid::new(15, lc.length).unwrap();
        let mut c = CharField::zeros(grid);
        for i in 0..2 {
            for j in 0..grid.n_nodes() {
                c.w[i][j] = vals[4 * j + i];
                c.vbar[i][j] = vals[4 * j + 2 + i];
            }
        }
        let back = physical_to_characteristic(&characteristic_to_physical(&c, &ss, &lc).unwrap(), &ss, &lc).unwrap();
        for i in 0..2 {
            for j in 0..grid.n_nodes() {
                prop_assert!((back.w[i][j] - c.w[i][j]).abs() < 1e-12 * c.w[i][j].abs().max(1.0));
                prop_assert!((back.vbar[i][j] - c.vbar[i][j]).abs() < 1e-12 * c.vbar[i][j].abs().max(1.0));
            }
        }
    }
}
