use rbsde_core::basis::RegressionBasis;
use rbsde_core::bsde::BuiltinDriver;
use rbsde_core::diffusion::{simulate, PathBundle, SimulationConfig};
use rbsde_core::pde::{solve_fd, FdConfig};
use rbsde_core::representation::{evaluate_density, extract_densities, fit_conditional, RepresentationEstimate};
use rbsde_core::rng::stream;
use rbsde_core::{CoefficientField, DomainSpec, InitialLaw, StateFunction};

use rand_distr::{Distribution, StandardNormal};

fn bundle(n: usize, horizon: f64, dt: f64, seed: u64) -> PathBundle {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    simulate(&SimulationConfig::new(domain, field, InitialLaw::Uniform, horizon, dt, n, seed)).unwrap()
}

/// `n_paths x K` increments `g(t_k, X_k) dM_k`.
fn increments(b: &PathBundle, g: impl Fn(f64) -> f64) -> Vec<f64> {
    let k = b.n_steps();
    let mut out = Vec::with_capacity(b.n_paths() * k);
    for p in 0..b.n_paths() {
        for s in 0..k {
            out.push(g(b.state(p, s)[0]) * b.mart_increment(p, s)[0]);
        }
    }
    out
}

fn poly(b: &PathBundle, degree: usize) -> RegressionBasis {
    RegressionBasis::polynomial(&b.config().domain, degree)
}

#[test]
fn conditional_mean_matches_the_heat_oracle() {
    let domain = DomainSpec::unit_box(1).unwrap();
    let field = CoefficientField::from_name("identity", &domain).unwrap();
    // the projection step pulls conditional means toward the centre by O(dt^0.3)
    // here (0.013 at dt = 1e-3), hence the fine step
    let mut cfg = SimulationConfig::new(domain.clone(), field.clone(), InitialLaw::Uniform, 0.2, 2.5e-4, 200_000, 21);
    cfg.record_every = 400;
    let b = simulate(&cfg).unwrap();
    assert_eq!(b.n_steps(), 2);
    let targets: Vec<f64> = (0..b.n_paths()).map(|p| b.state(p, 2)[0]).collect();
    let est = fit_conditional(&b, 1, &targets, &poly(&b, 3)).unwrap();

    let x = StateFunction::Coordinate(0);
    let fd = solve_fd(&domain, &field, &BuiltinDriver::Zero, &x, 0.1, &FdConfig::explicit(101, 2e-5)).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..=20 {
        let s = i as f64 / 20.0;
        worst = worst.max((est.predict(&[s])[0] - fd.evaluate(0.1, &[s]).unwrap()).abs());
    }
    assert!(worst < 0.01, "max error {worst}");
}

#[test]
fn coordinate_martingale_represents_itself() {
    let b = bundle(100_000, 0.05, 0.01, 22);
    let est = extract_densities(&b, &increments(&b, |_| 1.0), &poly(&b, 3)).unwrap();
    for s in &est.steps {
        // coefficients of (1, x, x^2, x^3) in Legendre-type form all map to F = 1
        for x in [0.1, 0.5, 0.9] {
            let f = est.evaluate(s.step, &[x]).unwrap()[0];
            assert!((f - 1.0).abs() < 0.02, "{f}");
        }
        assert!(s.residual_variance[0] < 1e-4 * s.target_variance[0]);
    }
}

fn linear_density_estimate(n: usize, seed: u64) -> (PathBundle, RepresentationEstimate) {
    let b = bundle(n, 0.1, 0.01, seed);
    let est = extract_densities(&b, &increments(&b, |x| x), &poly(&b, 3)).unwrap();
    (b, est)
}

#[test]
fn state_dependent_density_is_recovered() {
    let (_, est) = linear_density_estimate(100_000, 23);
    for s in &est.steps {
        let mse = (0..=20)
            .map(|i| {
                let x = i as f64 / 20.0;
                (est.evaluate(s.step, &[x]).unwrap()[0] - x).powi(2)
            })
            .sum::<f64>()
            / 21.0;
        assert!(mse < 1e-3, "step {}: {mse}", s.step);
        assert!(s.residual_variance[0] < 0.02 * s.target_variance[0]);
    }
    let f = evaluate_density(&est, 3, &[0.25]).unwrap()[0];
    assert!((f - 0.25).abs() < 0.02, "{f}");
}

#[test]
fn independent_noise_has_no_density() {
    let b = bundle(20_000, 0.1, 0.01, 24);
    let k = b.n_steps();
    let mut rng = stream(99, "noise", 0);
    let noise: Vec<f64> = (0..b.n_paths() * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let est = extract_densities(&b, &noise, &poly(&b, 2)).unwrap();
    for s in &est.steps {
        for (c, se) in s.coef.iter().zip(&s.std_err) {
            assert!(c.abs() < 4.0 * se, "{c} vs {se}");
        }
    }
}

#[test]
fn density_evaluation_is_linear_in_coefficients() {
    let (_, mut est) = linear_density_estimate(2000, 25);
    let step = &mut est.steps[0];
    step.coef.iter_mut().for_each(|c| *c = 0.0);
    assert_eq!(evaluate_density(&est, 0, &[0.3]).unwrap(), vec![0.0]);
    // the constant basis function is 1, so a unit first coefficient gives F = e1
    est.steps[0].coef[0] = 1.0;
    assert_eq!(evaluate_density(&est, 0, &[0.3]).unwrap(), vec![1.0]);
    assert_eq!(evaluate_density(&est, 0, &[0.9]).unwrap(), vec![1.0]);
}

#[test]
fn least_squares_beats_any_candidate_in_the_span() {
    let (b, est) = linear_density_estimate(5000, 26);
    let basis = poly(&b, 3);
    let inc = increments(&b, |x| x);
    let k = b.n_steps();
    let mut rng = stream(7, "candidates", 0);
    for s in [0, k / 2, k - 1] {
        let best = est.steps[s].residual_variance[0];
        for _ in 0..10 {
            let coef: Vec<f64> = (0..basis.size())
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    est.steps[s].coef[c] + 0.1 * z
                })
                .collect();
            let rv = (0..b.n_paths())
                .map(|p| {
                    let phi = basis.eval(b.state(p, s));
                    let f: f64 = phi.iter().zip(&coef).map(|(a, c)| a * c).sum();
                    (inc[p * k + s] - f * b.mart_increment(p, s)[0]).powi(2)
                })
                .sum::<f64>()
                / b.n_paths() as f64;
            assert!(best <= rv, "{best} > {rv}");
        }
    }
}

#[test]
fn enlarging_the_basis_never_increases_residuals() {
    let b = bundle(3000, 0.2, 0.02, 27);
    let k = b.n_steps();
    let targets: Vec<f64> = (0..b.n_paths()).map(|p| (3.0 * b.state(p, k)[0]).sin()).collect();
    let inc = increments(&b, |x| (2.0 * x).cos());
    let mut last_fit = f64::INFINITY;
    let mut last_density = f64::INFINITY;
    for degree in 0..=4 {
        let fit = fit_conditional(&b, k / 2, &targets, &poly(&b, degree)).unwrap();
        assert!(fit.residual_variance[0] <= last_fit * (1.0 + 1e-12));
        last_fit = fit.residual_variance[0];
        let rep = extract_densities(&b, &inc, &poly(&b, degree)).unwrap();
        assert!(rep.steps[2].residual_variance[0] <= last_density * (1.0 + 1e-12));
        last_density = rep.steps[2].residual_variance[0];
    }
}

#[test]
fn well_conditioned_designs_give_stable_coefficients() {
    // five independent ensembles stand in for resamples of one
    let fits: Vec<RepresentationEstimate> = (0..5)
        .map(|i| {
            let b = bundle(10_000, 0.1, 0.01, 100 + i);
            let mut rng = stream(i, "noise", 0);
            let mut inc = increments(&b, |x| (3.0 * x).sin());
            for v in inc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.005 * z;
            }
            extract_densities(&b, &inc, &poly(&b, 3)).unwrap()
        })
        .collect();
    let step = 4;
    for f in &fits {
        assert!(f.steps[step].condition < 1e8);
    }
    let p = fits[0].steps[step].coef.len();
    for c in 0..p {
        let vals: Vec<f64> = fits.iter().map(|f| f.steps[step].coef[c]).collect();
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let se = fits[0].steps[step].std_err[c];
        assert!(spread < 5.0 * se, "coefficient {c}: spread {spread}, se {se}");
    }
}
