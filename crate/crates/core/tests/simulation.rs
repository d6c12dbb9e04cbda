use crr::data::hoes_dataset;
use crr::estimation::OptimizerConfig;
use crr::simulation::{
    coverage_study, grid_runner, replicate_rng, simulate_dataset, GridAxis, Method, Scenario,
    SimulationConfig,
};
use crr::skovgaard::{critical_value, Analysis};

#[test]
fn coverage_independent_of_worker_count() {
    let s = Scenario::preset(3, 1.0, 1.0).unwrap();
    let mut base = SimulationConfig::new(s, 5, 25, 77);
    let axis = GridAxis::Tau(vec![0.5, 1.5]);
    let scenarios = [("3".to_string(), s)];
    let runs: Vec<_> = [1, 2, 5]
        .into_iter()
        .map(|w| {
            base.workers = w;
            grid_runner(&scenarios, &[5, 7], &axis, &base).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn signed_corrected_root_has_nominal_size() {
    // Rejection rate of the two-sided 5% test at the true slope.
    let s = Scenario::preset(1, 0.3, 1.0).unwrap();
    let mut c = SimulationConfig::new(s, 20, 2000, 31);
    c.workers = 0;
    let r = coverage_study(&c).unwrap();
    let m = r.get(Method::RBar);
    let rejection = 1.0 - m.coverage();
    assert!((0.035..=0.065).contains(&rejection), "rejection {rejection}");
    assert!(m.failed * 100 < m.replicates());
}

#[test]
fn large_n_likelihood_methods_are_nominal() {
    // WLS weights ignore the between-study variance, so its interval stays
    // short even for many studies; only the likelihood roots are checked.
    let s = Scenario::preset(1, 0.5, 1.0).unwrap();
    let c = SimulationConfig::new(s, 100, 400, 8);
    let r = coverage_study(&c).unwrap();
    for m in [Method::RP, Method::RBar] {
        let cov = r.get(m).coverage();
        assert!((0.9..=0.99).contains(&cov), "{} {cov}", m.as_str());
    }
}

#[test]
fn replicate_matches_direct_test() {
    let s = Scenario::preset(2, 0.8, 1.0).unwrap();
    let (d, beta1) = simulate_dataset(&s, 10, (100.0, 5000.0), &mut replicate_rng(3, 0)).unwrap();
    let a = Analysis::new(&d, &OptimizerConfig::default()).unwrap();
    let p = a.profile_point(beta1).unwrap();
    let one = SimulationConfig { replicates: 1, ..SimulationConfig::new(s, 10, 1, 3) };
    let r = coverage_study(&one).unwrap();
    let z = critical_value(0.95);
    assert_eq!(r.get(Method::RP).covered, usize::from(p.r_p.abs() < z));
    assert_eq!(r.get(Method::RBar).covered, usize::from(p.r_bar.abs() < z));
}

#[test]
fn hoes_dataset_has_twelve_studies() {
    assert_eq!(hoes_dataset().len(), 12);
}
