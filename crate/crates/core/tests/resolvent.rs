use rbsde_core::grid::GridFunction;
use rbsde_core::pde::resolvent_fd;
use rbsde_core::resolvent::{
    conditional_product_check, estimate_potential, nested_potential, potential_martingale_check, truncation_bias, verify_composition,
    verify_product_formula, NestedPotentialSpec, PotentialTerm, ResolventConfig,
};
use rbsde_core::{CoefficientField, DomainSpec, Error, InitialLaw, StateFunction};

fn config(n_paths: usize, seed: u64) -> ResolventConfig {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    let mut cfg = ResolventConfig::new(domain, field, 0.01, n_paths, seed);
    cfg.bias_tol = 1e-4;
    cfg.grid_points = 17;
    cfg.grid_paths = 1500;
    cfg
}

fn geometric(alpha: f64, h: f64) -> f64 {
    h / (1.0 - (-alpha * h).exp())
}

fn x_cos(a1: f64, a2: f64) -> NestedPotentialSpec {
    NestedPotentialSpec::new(vec![PotentialTerm::new(StateFunction::Coordinate(0), a1), PotentialTerm::new(StateFunction::CosPi(0), a2)])
        .unwrap()
}

fn ones(a1: f64, a2: f64) -> NestedPotentialSpec {
    NestedPotentialSpec::new(vec![PotentialTerm::new(StateFunction::Constant(1.0), a1), PotentialTerm::new(StateFunction::Constant(1.0), a2)])
        .unwrap()
}

#[test]
fn constant_integrand_is_deterministic() {
    let cfg = config(64, 1);
    let est = estimate_potential(&StateFunction::Constant(0.5), 2.0, &InitialLaw::point(vec![0.4]), &cfg).unwrap();
    assert_eq!(est.std_err, 0.0);
    let t = est.truncation;
    let h = cfg.dt;
    let discrete = 0.5 * h * (1.0 - (-2.0 * t).exp()) / (1.0 - (-2.0 * h).exp());
    assert!((est.value - discrete).abs() < 1e-12);
    let analytic = 0.5 * (1.0 - (-2.0 * t).exp()) / 2.0;
    assert!((est.value - analytic).abs() < 2.0 * h * analytic);
    assert!(est.bias_bound <= cfg.bias_tol);
}

#[test]
fn large_rates_have_negligible_truncation_bias() {
    let mut cfg = config(16, 1);
    cfg.truncation = Some(1.0);
    cfg.dt = 1e-3;
    let est = estimate_potential(&StateFunction::CosPi(0), 50.0, &InitialLaw::Uniform, &cfg).unwrap();
    assert!(est.bias_bound < 1e-22);
}

#[test]
fn short_truncation_is_rejected_with_a_proposal() {
    let mut cfg = config(16, 1);
    cfg.truncation = Some(1.0);
    match estimate_potential(&StateFunction::Constant(1.0), 1.0, &InitialLaw::Uniform, &cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("T_trunc >=")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_bias_decreases_with_horizon() {
    let mut last = f64::INFINITY;
    for k in 1..50 {
        let b = truncation_bias(2.0, 0.7, k as f64 * 0.3, 0.01);
        assert!(b <= last);
        last = b;
    }
}

fn fd_cosine_potential(cfg: &ResolventConfig) -> GridFunction {
    resolvent_fd(&cfg.domain, &cfg.field, &StateFunction::CosPi(0), 1.0, 201).unwrap()
}

#[test]
fn potential_matches_fd_resolvent_away_from_the_walls() {
    let mut cfg = config(4000, 5);
    cfg.bias_tol = 1e-3;
    cfg.dt = 2e-3;
    let fd = fd_cosine_potential(&cfg);
    for i in 5..=15 {
        let x = i as f64 / 20.0;
        let est = estimate_potential(&StateFunction::CosPi(0), 1.0, &InitialLaw::point(vec![x]), &cfg).unwrap();
        let err = (est.value - fd.interpolate(&[x])).abs();
        assert!(err < 0.01 + 3.0 * est.std_err, "x = {x}: error {err}, se {}", est.std_err);
    }
}

#[test]
fn boundary_bias_of_the_step_scheme_shrinks_with_dt() {
    // the projection step overweights the wall, so starts at the wall read high
    let start = InitialLaw::point(vec![1e-9]);
    let mut errs = Vec::new();
    for dt in [8e-3, 2e-3] {
        let mut cfg = config(20_000, 3);
        cfg.bias_tol = 1e-3;
        cfg.dt = dt;
        let fd = fd_cosine_potential(&cfg);
        let est = estimate_potential(&StateFunction::CosPi(0), 1.0, &start, &cfg).unwrap();
        errs.push(est.value - fd.interpolate(&[0.0]));
    }
    assert!(errs[0] > 0.0 && errs[1] > 0.0, "{errs:?}");
    assert!(errs[1] < 0.6 * errs[0], "{errs:?}");
}

#[test]
fn base_case_collapses_bit_identically() {
    let cfg = config(2000, 9);
    let spec = NestedPotentialSpec::new(vec![PotentialTerm::new(StateFunction::CosPi(0), 1.5)]).unwrap();
    let start = InitialLaw::point(vec![0.3]);
    let direct = estimate_potential(&StateFunction::CosPi(0), 1.5, &start, &cfg).unwrap();
    let nested = nested_potential(&spec, &start, &cfg).unwrap();
    assert_eq!(direct.value.to_bits(), nested.value.to_bits());
    let rep = verify_product_formula(&spec, &start, &cfg).unwrap();
    assert_eq!(rep.lhs.to_bits(), direct.value.to_bits());
    assert_eq!(rep.rhs.to_bits(), direct.value.to_bits());
    assert!(rep.pass);
}

#[test]
fn constants_pass_through_nested_levels() {
    let cfg = config(200, 2);
    let (a1, a2) = (1.0, 2.0);
    let est = nested_potential(&ones(a1, a2), &InitialLaw::point(vec![0.5]), &cfg).unwrap();
    let h = cfg.dt;
    // outer full geometric sum, inner with half weight at lag zero (up to truncation)
    let discrete = geometric(a1 + a2, h) * (geometric(a2, h) - 0.5 * h);
    assert!((est.value - discrete).abs() <= 2.0 * est.bias_bound + 1e-12, "{} vs {}", est.value, discrete);
    assert!((est.value - 1.0 / ((a1 + a2) * a2)).abs() < 0.01);
    assert!(est.std_err < 1e-12);
}

#[test]
fn product_of_constants_matches_inverse_rates() {
    let cfg = config(200, 3);
    let rep = verify_product_formula(&ones(1.0, 2.0), &InitialLaw::Uniform, &cfg).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!((rep.lhs - 0.5).abs() < 0.01);
    assert!((rep.rhs - 0.5).abs() < 0.01);
    assert_eq!(rep.terms.len(), 2);
}

#[test]
fn composition_identity_holds_for_coordinate_and_cosine() {
    let cfg = config(20_000, 4);
    let rep = verify_composition(&x_cos(1.0, 2.0), &InitialLaw::point(vec![0.3]), &cfg).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.se_lhs > 0.0 && rep.se_rhs > 0.0);
}

#[test]
fn product_formula_holds_for_coordinate_and_cosine() {
    let cfg = config(20_000, 6);
    let rep = verify_product_formula(&x_cos(1.0, 2.0), &InitialLaw::point(vec![0.3]), &cfg).unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn permuted_inputs_give_the_same_right_side() {
    let cfg = config(1000, 8);
    let a = x_cos(1.0, 2.0);
    let b = NestedPotentialSpec::new(vec![a.terms[1].clone(), a.terms[0].clone()]).unwrap();
    let start = InitialLaw::point(vec![0.6]);
    let ra = verify_product_formula(&a, &start, &cfg).unwrap();
    let rb = verify_product_formula(&b, &start, &cfg).unwrap();
    assert!((ra.rhs - rb.rhs).abs() <= 1e-12 * ra.rhs.abs());
    assert!((ra.lhs - rb.lhs).abs() <= 1e-12 * ra.lhs.abs());
}

#[test]
fn nested_mode_needs_a_low_dimensional_grid() {
    let domain = DomainSpec::unit_box(3).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    let cfg = ResolventConfig::new(domain, field, 0.01, 10, 1);
    let spec = ones(1.0, 1.0);
    assert!(matches!(nested_potential(&spec, &InitialLaw::Uniform, &cfg), Err(Error::Input(_))));
}

#[test]
fn martingale_check_trivial_cases() {
    let mut cfg = config(500, 10);
    cfg.truncation = Some(1.0);
    let grid = cfg.grid().unwrap();
    let zero = potential_martingale_check(&StateFunction::Constant(0.0), 1.0, &GridFunction::constant(grid.clone(), 0.0), &InitialLaw::Uniform, &cfg)
        .unwrap();
    assert!(zero.probes.iter().all(|p| p.t_stats.iter().all(|t| *t == 0.0)));
    let c = 0.8;
    let constant =
        potential_martingale_check(&StateFunction::Constant(c), 2.0, &GridFunction::constant(grid, c / 2.0), &InitialLaw::Uniform, &cfg).unwrap();
    assert_eq!(constant.max_abs_t, 0.0);
    assert_eq!(constant.probes.len(), 5);
}

#[test]
fn martingale_check_with_fd_potential() {
    let mut cfg = config(2000, 12);
    cfg.truncation = Some(1.0);
    cfg.dt = 0.002;
    let u = fd_cosine_potential(&cfg);
    let rep = potential_martingale_check(&StateFunction::CosPi(0), 1.0, &u, &InitialLaw::Uniform, &cfg).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.probes.iter().all(|p| p.mean_increment.abs() < 4.0 * p.mean_increment_se + 1e-3), "{rep:?}");

    // a wrong potential is caught at the same budget
    let mut wrong = u.clone();
    wrong.values.iter_mut().for_each(|v| *v *= 1.5);
    let rep = potential_martingale_check(&StateFunction::CosPi(0), 1.0, &wrong, &InitialLaw::Uniform, &cfg).unwrap();
    assert!(!rep.pass, "{rep:?}");
}

#[test]
fn conditional_product_matches_assembled_nested_potentials() {
    let mut cfg = config(20_000, 14);
    cfg.bias_tol = 1e-3;
    let rep = conditional_product_check(&x_cos(1.0, 2.0), 0.3, &InitialLaw::Uniform, &cfg).unwrap();
    assert!(rep.pass, "{rep:?}");
}
