//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crr::cli;
use crr::data::{hoes_dataset, Dataset, StudyObservation};
use crr::estimation::OptimizerConfig;
use crr::likelihood::{
    expected_info, loglik, marginal_moments, model_derivs, score, Theta, BETA1, MU, N_PARAMS,
    SIGMA2, TAU2,
};
use crr::linalg::Mat2;
use crr::re_oracle::{re_fit, re_q, re_s, ReData};
use crr::simulation::{coverage_study, replicate_rng, simulate_dataset, Method, Scenario, SimulationConfig};
use crr::skovgaard::{s_and_q, Alternative, Analysis, StatisticKind};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: u32, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    Outcome {
        id,
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn config() -> OptimizerConfig {
    OptimizerConfig::default()
}

// ═══ 1: estimates on the hypertension data ═══

fn hoes_estimates() -> (bool, String) {
    let start = Instant::now();
    let d = hoes_dataset();
    let a = Analysis::new(&d, &config()).expect("analysis");
    let elapsed = start.elapsed();
    let wls = a.wls();
    let se_wls = wls.se_beta1.expect("wls se");
    let mle = a.mle().theta.beta1;
    let se_mle = a.mle().std_errs.expect("mle se")[BETA1];
    let pass = (wls.beta1 - 0.60973).abs() <= 5e-6
        && (se_wls - 0.10892).abs() <= 5e-6
        && rel(mle, 0.68917) < 5e-3
        && rel(se_mle, 0.08124) < 5e-3
        && elapsed < Duration::from_secs(1);
    (
        pass,
        format!("WLS {:.5} ({:.5}), MLE {:.5} ({:.5}), fit {:.3}s", wls.beta1, se_wls, mle, se_mle, elapsed.as_secs_f64()),
    )
}

// ═══ 2: statistics at beta1 = 1 ═══

fn hoes_statistics() -> (bool, String) {
    let start = Instant::now();
    let d = hoes_dataset();
    let r = Analysis::new(&d, &config())
        .and_then(|a| a.test(1.0, Alternative::TwoSided))
        .expect("test");
    let elapsed = start.elapsed();
    let wald = r.wald.expect("wald");
    let p_wald = r.p_wald.expect("wald p");
    let pass = (wald - -3.5830787).abs() <= 1e-5
        && (p_wald - 0.0003396).abs() <= 1e-5
        && rel(r.r_p, -2.3447177) < 5e-3
        && rel(r.p_r, 0.0190415) < 5e-3
        && rel(r.r_bar, -1.2709290) < 5e-3
        && rel(r.p_rbar, 0.2037539) < 5e-3
        && elapsed < Duration::from_secs(5);
    (
        pass,
        format!(
            "Wald {wald:.7} (p {p_wald:.7}), r_P {:.7} (p {:.7}), r_bar {:.7} (p {:.7})",
            r.r_p, r.p_r, r.r_bar, r.p_rbar
        ),
    )
}

// ═══ 3: confidence intervals ═══

fn hoes_intervals() -> (bool, String) {
    let start = Instant::now();
    let d = hoes_dataset();
    let a = Analysis::new(&d, &config()).expect("analysis");
    let rp = a.confint(0.95, StatisticKind::RP).expect("r_P interval");
    let rbar = a.confint(0.95, StatisticKind::RBar).expect("r_bar interval");
    let elapsed = start.elapsed();
    let close = |x: f64, want: f64| (x - want).abs() <= 0.01;
    let checks = [
        close(rp.lower, 0.45),
        close(rp.upper, 0.93),
        close(rbar.lower, 0.38),
        close(rbar.upper, 1.13),
    ];
    let pass = checks.iter().all(|c| *c) && elapsed < Duration::from_secs(30);
    let mark = |ok: bool| if ok { "ok" } else { "off" };
    (
        pass,
        format!(
            "r_P ({:.5} {}, {:.5} {}), r_bar ({:.5} {}, {:.5} {}), {:.1}s",
            rp.lower,
            mark(checks[0]),
            rp.upper,
            mark(checks[1]),
            rbar.lower,
            mark(checks[2]),
            rbar.upper,
            mark(checks[3]),
            elapsed.as_secs_f64()
        ),
    )
}

// ═══ 4: identities ═══

fn identities() -> (bool, String) {
    let d = hoes_dataset();
    let a = Analysis::new(&d, &config()).expect("analysis");
    let hat = a.mle().theta;
    let (s, q) = s_and_q(&hat, &hat, &d).expect("S and q");
    let info = expected_info(&hat, &d).expect("information");
    let mut max_diff: f64 = 0.0;
    for j in 0..N_PARAMS {
        for k in 0..N_PARAMS {
            max_diff = max_diff.max((s[(j, k)] - info[(j, k)]).abs());
        }
    }
    let q_zero = q.iter().all(|v| *v == 0.0);
    let r0 = a.profile_point(hat.beta1).expect("profile at MLE").r_p;
    let null = 1.0;
    let tilde = a.profile_point(null).expect("profile").constrained.theta;
    let (s_mixed, _) = s_and_q(&hat, &tilde, &d).expect("S");
    let block_zero = s_mixed[(TAU2, MU)] == 0.0 && s_mixed[(SIGMA2, MU)] == 0.0;
    let pass = q_zero && max_diff < 1e-8 && r0.abs() < 1e-6 && block_zero;
    (
        pass,
        format!(
            "q(hat,hat)=0: {q_zero}, max|S-I| {max_diff:.2e}, r_P(MLE) {r0:.2e}, variance-by-mu block zero: {block_zero}"
        ),
    )
}

// ═══ 5: derivatives against finite differences ═══

fn random_case(rng: &mut ChaCha8Rng, i: usize) -> (Theta, Dataset) {
    let theta = Theta::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-4.0..0.0),
        rng.random_range(0.05..1.0),
        rng.random_range(0.1..1.5),
    );
    let scenario = Scenario::preset(1 + (i % 4) as u32, rng.random_range(0.3..1.5), 1.0).unwrap();
    let n = rng.random_range(5..15);
    let (d, _) = simulate_dataset(&scenario, n, (100.0, 5000.0), rng).expect("dataset");
    (theta, d)
}

/// Five-point central difference of `g` along coordinate `j`, with one
/// Richardson step so the truncation error is sixth order.
fn stencil<const M: usize>(theta: &Theta, j: usize, g: impl Fn(&Theta) -> [f64; M]) -> [f64; M] {
    let x = theta.to_array()[j];
    let five = |h: f64| -> [f64; M] {
        let at = |s: f64| g(&theta.with(j, x + s * h));
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        std::array::from_fn(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
    };
    let h = 2e-4 * x.abs().max(1.0);
    let (coarse, fine) = (five(h), five(h / 2.0));
    std::array::from_fn(|i| (16.0 * fine[i] - coarse[i]) / 15.0)
}

fn flat(m: &Mat2) -> [f64; 4] {
    [m.m[0][0], m.m[0][1], m.m[1][0], m.m[1][1]]
}

fn derivatives() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_501);
    let mut worst_score: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    for i in 0..100 {
        let (theta, d) = random_case(&mut rng, i);
        let g = score(&theta, &d).expect("score");
        for j in 0..N_PARAMS {
            let fd = stencil(&theta, j, |t| [loglik(t, &d)])[0];
            let err = (g[j] - fd).abs() / g[j].abs().max(1e-3);
            worst_score = worst_score.max(err);
        }
        let gamma = d.studies()[0].gamma;
        let md = model_derivs(&theta, &gamma).expect("derivatives");
        for j in 0..N_PARAMS {
            let f_fd = stencil(&theta, j, |t| marginal_moments(t, &gamma).unwrap().f);
            let v_fd = stencil(&theta, j, |t| flat(&marginal_moments(t, &gamma).unwrap().v));
            let vi_fd = stencil(&theta, j, |t| flat(&model_derivs(t, &gamma).unwrap().v_inv));
            let mut diffs: Vec<f64> = Vec::new();
            diffs.extend((0..2).map(|a| (f_fd[a] - md.f_grad[j][a]).abs()));
            diffs.extend((0..4).map(|a| (v_fd[a] - flat(&md.v_grad[j])[a]).abs()));
            diffs.extend((0..4).map(|a| (vi_fd[a] - flat(&md.v_inv_grad[j])[a]).abs()));
            for k in 0..N_PARAMS {
                let fg = stencil(&theta, k, |t| model_derivs(t, &gamma).unwrap().f_grad[j]);
                let vg = stencil(&theta, k, |t| flat(&model_derivs(t, &gamma).unwrap().v_grad[j]));
                let vig =
                    stencil(&theta, k, |t| flat(&model_derivs(t, &gamma).unwrap().v_inv_grad[j]));
                diffs.extend((0..2).map(|a| (fg[a] - md.f_hess(j, k)[a]).abs()));
                diffs.extend((0..4).map(|a| (vg[a] - flat(&md.v_hess(j, k))[a]).abs()));
                diffs.extend((0..4).map(|a| (vig[a] - flat(&md.v_inv_hess(j, k))[a]).abs()));
            }
            worst_model = diffs.into_iter().fold(worst_model, f64::max);
        }
    }
    let pass = worst_score < 1e-4 && worst_model < 1e-7;
    (
        pass,
        format!("100 draws, worst score rel err {worst_score:.2e}, worst model_derivs err {worst_model:.2e}"),
    )
}

// ═══ 6: Monte Carlo covariance oracle ═══

/// Sample covariance of columns `a` and `b` and its Monte Carlo SE.
fn mc_cov(rows: &[Vec<f64>], a: usize, b: usize) -> (f64, f64) {
    let m = rows.len() as f64;
    let ma = rows.iter().map(|r| r[a]).sum::<f64>() / m;
    let mb = rows.iter().map(|r| r[b]).sum::<f64>() / m;
    let p: Vec<f64> = rows.iter().map(|r| (r[a] - ma) * (r[b] - mb)).collect();
    let c = p.iter().sum::<f64>() / m;
    let v = p.iter().map(|x| (x - c).powi(2)).sum::<f64>() / (m - 1.0);
    (c, (v / m).sqrt())
}

fn covariance_oracle() -> (bool, String) {
    let start = Instant::now();
    let d = hoes_dataset();
    let a = Analysis::new(&d, &config()).expect("analysis");
    let hat = a.mle().theta;
    let tilde = a.profile_point(1.0).expect("profile").constrained.theta;
    let (s, q) = s_and_q(&hat, &tilde, &d).expect("S and q");
    let moments: Vec<_> = d
        .iter()
        .map(|o| (o.gamma, marginal_moments(&hat, &o.gamma).expect("moments")))
        .collect();
    let reps = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rows = Vec::with_capacity(reps);
    for _ in 0..reps {
        let studies: Vec<StudyObservation> = moments
            .iter()
            .map(|(gamma, mm)| {
                let v = mm.v.m;
                let l11 = v[0][0].sqrt();
                let l21 = v[1][0] / l11;
                let l22 = (v[1][1] - l21 * l21).sqrt();
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                StudyObservation::new(mm.f[0] + l11 * z1, mm.f[1] + l21 * z1 + l22 * z2, *gamma)
                    .expect("observation")
            })
            .collect();
        let sim = Dataset::new(studies).expect("dataset");
        let mut row = Vec::with_capacity(2 * N_PARAMS + 1);
        row.extend(score(&hat, &sim).expect("score"));
        row.extend(score(&tilde, &sim).expect("score"));
        row.push(loglik(&hat, &sim) - loglik(&tilde, &sim));
        rows.push(row);
    }
    let mut worst: f64 = 0.0;
    let mut misses = Vec::new();
    for j in 0..N_PARAMS {
        for k in 0..N_PARAMS {
            let (c, se) = mc_cov(&rows, j, N_PARAMS + k);
            let z = if se > 0.0 { (c - s[(j, k)]).abs() / se } else if c == s[(j, k)] { 0.0 } else { f64::INFINITY };
            worst = worst.max(z);
            if z > 3.0 {
                misses.push(format!("S[{j}][{k}]"));
            }
        }
        let (c, se) = mc_cov(&rows, j, 2 * N_PARAMS);
        let z = if se > 0.0 { (c - q[j]).abs() / se } else { 0.0 };
        worst = worst.max(z);
        if z > 3.0 {
            misses.push(format!("q[{j}]"));
        }
    }
    let elapsed = start.elapsed();
    let pass = misses.is_empty() && elapsed < Duration::from_secs(600);
    (
        pass,
        format!(
            "{reps} replicates, 30 entries, worst |diff|/SE {worst:.2}, misses {misses:?}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ═══ 7: random-effects closed forms ═══

fn re_oracle() -> (bool, String) {
    let cases = [
        (vec![0.3, -0.8, 1.9, 0.4, 1.1], 0.2, -0.5),
        (vec![2.1, 1.4, 3.3, 0.9, 2.8, 1.7, 2.2, 4.0], 0.5, 1.5),
        (vec![-1.0, 0.6, 2.5, -0.2], 0.1, 1.2),
    ];
    let reps = 50_000;
    let mut worst: f64 = 0.0;
    let mut misses = Vec::new();
    for (case, (y, sigma2, u0)) in cases.iter().enumerate() {
        let d = ReData::new(y.clone(), *sigma2).expect("data");
        let f = re_fit(&d, *u0).expect("fit");
        let n = d.len() as f64;
        let s = re_s(n, f.upsilon_hat, *u0, f.omega_tilde);
        let q = re_q(n, f.upsilon_hat, *u0, f.omega_hat, f.omega_tilde);
        let dist = Normal::new(f.upsilon_hat, f.omega_hat.sqrt()).expect("normal");
        let mut rng = replicate_rng(7, case as u64);
        let score = |y: &[f64], u: f64, o: f64| {
            let s1: f64 = y.iter().map(|v| v - u).sum();
            let s2: f64 = y.iter().map(|v| (v - u).powi(2)).sum();
            [s1 / o, -(y.len() as f64) / (2.0 * o) + s2 / (2.0 * o * o)]
        };
        let mut rows = Vec::with_capacity(reps);
        for _ in 0..reps {
            let ys: Vec<f64> = (0..d.len()).map(|_| dist.sample(&mut rng)).collect();
            let h = score(&ys, f.upsilon_hat, f.omega_hat);
            let t = score(&ys, *u0, f.omega_tilde);
            let sim = ReData::new(ys, *sigma2).expect("data");
            let l = sim.loglik(f.upsilon_hat, f.omega_hat) - sim.loglik(*u0, f.omega_tilde);
            rows.push(vec![h[0], h[1], t[0], t[1], l]);
        }
        for j in 0..2 {
            for k in 0..2 {
                let (c, se) = mc_cov(&rows, j, 2 + k);
                let z = if se > 0.0 { (c - s[j][k]).abs() / se } else { 0.0 };
                worst = worst.max(z);
                if z > 3.0 {
                    misses.push(format!("case {case} S[{j}][{k}]"));
                }
            }
            let (c, se) = mc_cov(&rows, j, 4);
            let z = (c - q[j]).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                misses.push(format!("case {case} q[{j}]"));
            }
        }
    }
    (
        misses.is_empty(),
        format!("3 datasets x {reps} replicates, worst |diff|/SE {worst:.2}, misses {misses:?}"),
    )
}

// ═══ 8, 9: coverage ═══

fn coverage(scenario: Scenario, n: usize, reps: usize, seed: u64) -> [f64; 3] {
    let mut c = SimulationConfig::new(scenario, n, reps, seed);
    c.workers = 8;
    let r = coverage_study(&c).expect("coverage study");
    [Method::WlsWald, Method::RP, Method::RBar].map(|m| r.get(m).coverage())
}

fn coverage_reproduction() -> (bool, String) {
    let start = Instant::now();
    let a = coverage(Scenario::preset(1, 0.3, 1.0).unwrap(), 20, 1000, 2024);
    let b = coverage(Scenario::preset(1, 2.0, 1.0).unwrap(), 5, 1000, 2025);
    let elapsed = start.elapsed();
    let pass_a = (0.93..=0.97).contains(&a[2]);
    let pass_b = b[2] > b[1] && b[1] > b[0] && b[0] < 0.90;
    (
        pass_a && pass_b && elapsed < Duration::from_secs(1200),
        format!(
            "(a) r_bar {:.3}; (b) WLS {:.3} < r_P {:.3} < r_bar {:.3}; {:.1}s",
            a[2],
            b[0],
            b[1],
            b[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn sigma_trend() -> (bool, String) {
    let low = coverage(Scenario::preset(4, 1.2, 0.3).unwrap(), 5, 500, 2026);
    let high = coverage(Scenario::preset(4, 1.2, 1.5).unwrap(), 5, 500, 2026);
    (
        high[0] < low[0],
        format!("WLS coverage sigma=0.3 {:.3}, sigma=1.5 {:.3}", low[0], high[0]),
    )
}

// ═══ 10: determinism of the simulate command ═══

fn simulate_output(workers: &str) -> (i32, Vec<u8>) {
    let args = [
        "crr", "simulate", "--scenario", "2", "--n-list", "5,8", "--tau-list", "0.5,1.5",
        "--replicates", "60", "--seed", "99", "--workers", workers,
    ];
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(args, &mut out, &mut err);
    (code, out)
}

fn determinism() -> (bool, String) {
    let (c1, one) = simulate_output("1");
    let (c4, four) = simulate_output("4");
    let pass = c1 == 0 && c4 == 0 && !one.is_empty() && one == four;
    (
        pass,
        format!("exit codes {c1}/{c4}, {} bytes, identical: {}", one.len(), one == four),
    )
}

fn main() {
    let outcomes = [
        run(1, "hypertension estimates", hoes_estimates),
        run(2, "hypertension statistics at beta1 = 1", hoes_statistics),
        run(3, "confidence intervals", hoes_intervals),
        run(4, "identities", identities),
        run(5, "derivatives", derivatives),
        run(6, "covariance oracle", covariance_oracle),
        run(7, "random-effects oracle", re_oracle),
        run(8, "coverage reproduction", coverage_reproduction),
        run(9, "sigma trend", sigma_trend),
        run(10, "simulate determinism", determinism),
    ];
    println!();
    for o in &outcomes {
        println!(
            "criterion {:>2} {} {}: {} [{:.2}s]",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.elapsed.as_secs_f64()
        );
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
