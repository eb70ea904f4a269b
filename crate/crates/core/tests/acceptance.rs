//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts.

use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skcov::experiment::{run, ExperimentConfig, ExperimentReport, Kind};
use skcov::gibbs::log_weight;
use skcov::mcmc::ChainConfig;
use skcov::spectral::{frobenius_norm, jacobi_eigen, DEFAULT_TOL};
use skcov::stats::derive_seed;
use skcov::{
    exact_summary, interaction_matrix, overlap_moments_exact, sample_couplings, Couplings,
    SymMatrix,
};

const SEED: u64 = 42;
/// Disorder instances for the `n in {8, 12, 16, 20}` sweeps at `beta = 0.5`.
/// Instances are nested across `n`, and this many resolves the smallest step
/// of the residual sequence at about three standard errors.
const SWEEP_SAMPLES: usize = 2000;
/// Disorder instances for the low-temperature and `beta` scans.
const SCAN_SAMPLES: usize = 200;
const SWEEP_N: [usize; 4] = [8, 12, 16, 20];

fn report_line(criterion: u32, title: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "[acceptance {criterion}] {tag} {title}: {detail}").unwrap();
}

fn checks_summary(report: &ExperimentReport, names: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in names {
        let c = report
            .check(name)
            .unwrap_or_else(|| panic!("missing check {name}: {:?}", report.checks));
        ok &= c.passed;
        parts.push(format!(
            "{} [{}]",
            c.detail,
            if c.passed { "ok" } else { "x" }
        ));
    }
    (ok, parts.join("; "))
}

fn high_temperature_sweep() -> &'static ExperimentReport {
    static REPORT: OnceLock<ExperimentReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = ExperimentConfig::new(
            Kind::ResidualSweep,
            SWEEP_N.to_vec(),
            vec![0.5],
            SWEEP_SAMPLES,
        )
        .with_seed(SEED);
        run(&cfg).expect("residual sweep")
    })
}

#[test]
fn criterion_1_exact_identities() {
    let cfg =
        ExperimentConfig::new(Kind::Identities, vec![10], vec![0.3, 0.5, 0.8], 500).with_seed(SEED);
    let start = std::time::Instant::now();
    let report = run(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let zs: Vec<String> = report
        .identity_checks
        .iter()
        .map(|c| {
            format!(
                "beta={}: z_trace={:.2} z_frob={:.2}",
                c.beta, c.trace.z_score, c.frobenius.z_score
            )
        })
        .collect();
    let ok = report.checks.len() == 6 && report.all_passed;
    report_line(
        1,
        "trace and Frobenius identities, n=10, 500 instances, |z| <= 4",
        ok,
        &format!("{} ({secs:.1}s)", zs.join(", ")),
    );
    assert!(ok, "{:#?}", report.checks);
}

#[test]
fn criterion_2_residual_constant() {
    let report = high_temperature_sweep();
    let (ok, detail) = checks_summary(
        report,
        &[
            "residual_constant beta=0.5",
            "residual_deviation_nonincreasing beta=0.5",
        ],
    );
    report_line(
        2,
        "mean ||P-I||_F^2 within 20% of 0.55556 at n=20, deviation non-increasing",
        ok,
        &detail,
    );
    assert!(ok, "{detail}");
}

#[test]
fn criterion_3_overlap_expansion() {
    let report = high_temperature_sweep();
    let (ok, detail) = checks_summary(
        report,
        &[
            "n_m2_limit beta=0.5",
            "n_m2_approaches_limit beta=0.5",
            "n2_m3_limit beta=0.5",
        ],
    );
    report_line(
        3,
        "n m2 within 10% of 4/3 and approaching it, n^2 m3 within 30% of 2.370",
        ok,
        &detail,
    );
    assert!(ok, "{detail}");
}

#[test]
fn criterion_4_opnorm_bounded() {
    let cfg = ExperimentConfig::new(
        Kind::OpnormSweep,
        SWEEP_N.to_vec(),
        vec![0.5],
        SWEEP_SAMPLES,
    )
    .with_seed(SEED);
    let report = run(&cfg).unwrap();
    let (ok, detail) = checks_summary(
        &report,
        &[
            "opnorm_bounded_in_n beta=0.5",
            "opnorm_above_lower beta=0.5",
        ],
    );
    report_line(
        4,
        "mean ||C||_op varies < 15% over n and exceeds 0.9213",
        ok,
        &detail,
    );
    assert!(ok, "{detail}");
}

#[test]
fn criterion_5_low_temperature_growth() {
    let cfg = ExperimentConfig::new(
        Kind::LowtempScan,
        vec![10, 14, 18, 20],
        vec![0.5, 1.5],
        SCAN_SAMPLES,
    )
    .with_seed(SEED);
    let report = run(&cfg).unwrap();
    let (ok, detail) = checks_summary(
        &report,
        &["opnorm_growth beta=1.5", "m2_vs_high_temperature beta=1.5"],
    );
    report_line(
        5,
        "beta=1.5 opnorm ratio n=20/n=10 >= 1.15 and m2 >= 5x the beta=0.5 value",
        ok,
        &detail,
    );
    assert!(ok, "{detail}");
}

#[test]
fn criterion_6_derivative_identity() {
    let cfg =
        ExperimentConfig::new(Kind::DerivCheck, vec![6], vec![0.2, 0.7, 1.1], 50).with_seed(SEED);
    let report = run(&cfg).unwrap();
    let maxes: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.statistic == "max_abs_diff")
        .map(|r| format!("beta={}: {:.2e}", r.beta, r.stat.mean))
        .collect();
    let ok = report.checks.len() == 3 && report.all_passed;
    report_line(
        6,
        "central difference vs four-point formula, max error <= 1e-6",
        ok,
        &maxes.join(", "),
    );
    assert!(ok, "{:#?}", report.checks);
}

/// Moments by enumerating every replica tuple.
fn brute_force_moments(c: &Couplings, beta: f64) -> [f64; 6] {
    let n = c.n();
    let states: Vec<Vec<i8>> = (0..1u32 << n)
        .map(|x| {
            (0..n)
                .map(|k| if (x >> k) & 1 == 1 { -1 } else { 1 })
                .collect()
        })
        .collect();
    let lw: Vec<f64> = states
        .iter()
        .map(|s| log_weight(c, beta, s).unwrap())
        .collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let nf = n as f64;
    let r = |a: &[i8], b: &[i8]| a.iter().zip(b).map(|(x, y)| f64::from(x * y)).sum::<f64>() / nf;
    let r4 = |a: &[i8], b: &[i8], c: &[i8], d: &[i8]| {
        (0..n)
            .map(|i| f64::from(a[i] * b[i] * c[i] * d[i]))
            .sum::<f64>()
            / nf
    };
    let mut m = [0.0; 6];
    let m_states = states.len();
    for s1 in 0..m_states {
        for s2 in 0..m_states {
            let p12 = p[s1] * p[s2];
            let r12 = r(&states[s1], &states[s2]);
            m[0] += p12 * r12 * r12;
            m[2] += p12 * r12.powi(4);
            for s3 in 0..m_states {
                let p123 = p12 * p[s3];
                let r23 = r(&states[s2], &states[s3]);
                let r13 = r(&states[s1], &states[s3]);
                m[1] += p123 * r12 * r13 * r23;
                m[3] += p123 * r12 * r12 * r23 * r23;
                for s4 in 0..m_states {
                    let p1234 = p123 * p[s4];
                    let r34 = r(&states[s3], &states[s4]);
                    let r41 = r(&states[s4], &states[s1]);
                    m[4] += p1234 * r12 * r23 * r34 * r41;
                    let multi = r4(&states[s1], &states[s2], &states[s3], &states[s4]);
                    m[5] += p1234 * r12 * r34 * multi;
                }
            }
        }
    }
    m
}

fn random_symmetric(n: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SymMatrix::from_upper(n, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn criterion_7_oracle_equivalence() {
    // Closed-form moments against replica enumeration.
    let mut worst: f64 = 0.0;
    for n in [2, 3, 4] {
        for (k, beta) in [0.4, 1.0, 1.7].into_iter().enumerate() {
            let c = sample_couplings(
                n,
                derive_seed(SEED, &[("instance", k as u64), ("n", n as u64)]),
            )
            .unwrap();
            let m = overlap_moments_exact(&exact_summary(&c, beta, true).unwrap()).unwrap();
            let got = [
                m.m2,
                m.m3,
                m.m4.unwrap(),
                m.m22.unwrap(),
                m.m_cycle,
                m.m_multi,
            ];
            for (a, b) in got.iter().zip(brute_force_moments(&c, beta)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let closed_ok = worst <= 1e-12;

    // MCMC against the exact engine.
    let chain = ChainConfig::new(20_000, 0).with_ladder(vec![0.6, 0.9, 1.2, 1.5]);
    let cfg = ExperimentConfig::new(Kind::McmcValidate, vec![8, 12], vec![0.5, 1.5], 40)
        .with_seed(SEED)
        .with_chain(chain);
    let report = run(&cfg).unwrap();
    let mcmc_ok = report.checks.len() == 4 && report.all_passed;
    let rates: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.statistic == "min_slot_hit_rate")
        .map(|r| format!("n={} beta={}: {:.3}", r.n, r.beta, r.stat.mean))
        .collect();

    // Eigensolver trace identities.
    let mut eig_err: f64 = 0.0;
    for seed in 0..5 {
        let m = random_symmetric(50, seed);
        let spec = jacobi_eigen(&m, DEFAULT_TOL).unwrap();
        let sum: f64 = spec.eigenvalues.iter().sum();
        let sq: f64 = spec.eigenvalues.iter().map(|l| l * l).sum();
        eig_err = eig_err
            .max((sum - m.trace()).abs())
            .max((sq - frobenius_norm(m.as_slice()).powi(2)).abs());
    }
    let eig_ok = eig_err <= 1e-9;

    let ok = closed_ok && mcmc_ok && eig_ok;
    report_line(
        7,
        "closed-form vs enumeration <= 1e-12, MCMC within 4 stderr in >= 95% of 40 trials, eigen identities <= 1e-9",
        ok,
        &format!(
            "enumeration max error {worst:.2e}; MCMC per-scalar hit rates {}; eigen max error {eig_err:.2e}",
            rates.join(", ")
        ),
    );
    assert!(closed_ok, "closed form vs enumeration: {worst:e}");
    assert!(mcmc_ok, "{:#?}", report.checks);
    assert!(eig_ok, "eigen identities: {eig_err:e}");
}

#[test]
fn criterion_8_frobenius_monotone_in_beta() {
    let cfg = ExperimentConfig::new(
        Kind::CriticalScan,
        vec![20],
        vec![0.5, 0.8, 1.0, 1.2],
        SCAN_SAMPLES,
    )
    .with_seed(SEED);
    let report = run(&cfg).unwrap();
    let (ok, detail) = checks_summary(&report, &["frobenius_monotone_in_beta n=20"]);
    report_line(
        8,
        "n=20 mean ||C||_F/sqrt(n) strictly increasing in beta by > 2 combined stderr",
        ok,
        &detail,
    );
    assert!(ok, "{detail}");
}

#[test]
fn criterion_9_goe_edge() {
    let n = 400;
    let tops: Vec<f64> = (0..20u64)
        .map(|k| {
            let c = sample_couplings(n, derive_seed(SEED, &[("instance", k)])).unwrap();
            jacobi_eigen(&interaction_matrix(&c), DEFAULT_TOL)
                .unwrap()
                .max()
        })
        .collect();
    let mean = tops.iter().sum::<f64>() / tops.len() as f64;
    let largest = tops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = (1.6..=2.1).contains(&mean) && largest < 2.2;
    report_line(
        9,
        "n=400, 20 samples: mean lambda_max(A) in [1.6, 2.1], none >= 2.2",
        ok,
        &format!("mean {mean:.4}, largest {largest:.4}"),
    );
    assert!(ok);
}
