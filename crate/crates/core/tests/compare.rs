use std::sync::Arc;

use rbsde_core::bsde::{stochastic_solution, BasisChoice, BsdeProblem, BuiltinDriver};
use rbsde_core::compare::{compare, integrate_against, ProblemDescriptor};
use rbsde_core::diffusion::SimulationConfig;
use rbsde_core::pde::{solve_fd, FdConfig};
use rbsde_core::{CoefficientField, DomainSpec, Error, InitialLaw, StateFunction, TerminalFunction};

fn descriptor(phi: &StateFunction, t: f64) -> ProblemDescriptor {
    ProblemDescriptor { domain: "box[0,1]".into(), field: "identity".into(), driver: "zero".into(), terminal: phi.name(), t }
}

fn run(phi: StateFunction, law: InitialLaw, n_paths: usize, dt: f64) -> (rbsde_core::compare::ComparisonReport, f64) {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    let t = 0.5;
    let problem = BsdeProblem::from_pde(Arc::new(BuiltinDriver::Zero), TerminalFunction::scalar(phi.clone()), t, 0.0, &domain).unwrap();
    let cfg = SimulationConfig::new(domain.clone(), field.clone(), law.clone(), t, dt, n_paths, 17);
    let rep = stochastic_solution(&problem, &cfg, &BasisChoice::Auto, 1e-10, 10).unwrap();
    let fine = solve_fd(&domain, &field, &BuiltinDriver::Zero, &phi, t, &FdConfig::explicit(101, 2e-5)).unwrap();
    let coarse = solve_fd(&domain, &field, &BuiltinDriver::Zero, &phi, t, &FdConfig::explicit(51, 8e-5)).unwrap();
    let d = descriptor(&phi, t);
    let cmp = compare(&d, &rep, &d, &fine, Some(&coarse), &law, &domain, 0.01).unwrap();
    (cmp, rep.std_err[0])
}

#[test]
fn constants_agree_exactly() {
    let (cmp, se) = run(StateFunction::Constant(0.4), InitialLaw::Uniform, 500, 0.01);
    assert_eq!(se, 0.0);
    assert!(cmp.difference.abs() < 1e-10, "{cmp:?}");
    assert!(cmp.pass);
}

#[test]
fn heat_cosine_case_passes() {
    let (cmp, _) = run(StateFunction::CosPi(0), InitialLaw::point(vec![0.3]), 20_000, 1e-3);
    let exact = (-std::f64::consts::PI.powi(2) * 0.25).exp() * (0.3 * std::f64::consts::PI).cos();
    assert!((cmp.u_fd - exact).abs() < 1e-4);
    assert!(cmp.fd_error < 1e-4 && cmp.fd_error > 0.0);
    assert!(cmp.pass, "{cmp:?}");
}

#[test]
fn uniform_law_integrates_against_the_density() {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    let phi = StateFunction::custom("x", 1.0, |x: &[f64]| x[0]);
    let sol = solve_fd(&domain, &field, &BuiltinDriver::Zero, &phi, 0.1, &FdConfig::explicit(41, 1e-4)).unwrap();
    // mass is conserved, so the mean stays at 1/2
    assert!((integrate_against(&sol, 0.1, &InitialLaw::Uniform, &domain).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn mismatched_horizons_list_the_difference() {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    let phi = StateFunction::CosPi(0);
    let problem = BsdeProblem::from_pde(Arc::new(BuiltinDriver::Zero), TerminalFunction::scalar(phi.clone()), 0.5, 0.0, &domain).unwrap();
    let cfg = SimulationConfig::new(domain.clone(), field.clone(), InitialLaw::Uniform, 0.5, 0.05, 100, 1);
    let rep = stochastic_solution(&problem, &cfg, &BasisChoice::Auto, 1e-10, 10).unwrap();
    let fd = solve_fd(&domain, &field, &BuiltinDriver::Zero, &phi, 0.4, &FdConfig::explicit(21, 1e-4)).unwrap();
    match compare(&descriptor(&phi, 0.5), &rep, &descriptor(&phi, 0.4), &fd, None, &InitialLaw::Uniform, &domain, 0.01) {
        Err(Error::Input(msg)) => assert!(msg.contains("t: 0.5 vs 0.4"), "{msg}"),
        other => panic!("{other:?}"),
    }
}
