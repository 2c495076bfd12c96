use epiident::residuals::acf;
use epiident::scenarios::{from_toml, standard_grid, to_toml, Scenario};
use epiident::sir::{integrate_sir, EpidemicParameters};
use proptest::prelude::*;

#[test]
fn standard_grid_round_trips_through_toml() {
    let grid = standard_grid(1000).unwrap();
    let back = from_toml(&to_toml(&grid)).unwrap();
    assert_eq!(grid, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acf_is_invariant_to_affine_maps(
        x in prop::collection::vec(-10.0f64..10.0, 40..80),
        scale in 0.1f64..50.0,
        shift in -100.0f64..100.0,
    ) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
        let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let (a, b) = (acf(&x, 10).unwrap(), acf(&y, 10).unwrap());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ode_conserves_population_and_stays_nonnegative(
        alpha in 0.05f64..0.5,
        r0 in 0.5f64..15.0,
        i0 in 1u64..50,
    ) {
        let n = 1000;
        let beta = r0 * alpha / n as f64;
        let params = EpidemicParameters::new(alpha, beta, n).unwrap();
        let sc = Scenario::new("p", params, i0, 100).unwrap();
        let sol = integrate_sir(&sc.params, &sc.initial, &sc.grid).unwrap();
        for s in &sol.states {
            prop_assert!(s.susceptible >= 0.0 && s.infectious >= 0.0 && s.recovered >= 0.0);
            prop_assert!((s.susceptible + s.infectious + s.recovered - n as f64).abs() < 1e-9 * n as f64);
        }
        for w in sol.states.windows(2) {
            prop_assert!(w[1].susceptible <= w[0].susceptible + 1e-12);
        }
    }
}
