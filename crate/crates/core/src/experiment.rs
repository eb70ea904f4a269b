//! Config-driven experiments over disorder ensembles.
//!
//! Every experiment walks the grid `n_list x beta_list`, draws `samples`
//! disorder instances per grid point (instance `k` uses the seed
//! `derive_seed(master, [("instance", k)])` at every `beta`, so cells at the
//! same `n` are paired), measures per-instance statistics in parallel and
//! folds them into [`EnsembleStat`]s in instance order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::{interaction_matrix, sample_couplings, Couplings};
use crate::error::{Error, Result};
use crate::gibbs::{
    exact_summary, overlap_distribution, overlap_moments_exact, pair_moments, OverlapMoments,
    DEFAULT_CAP, FOUR_POINT_CAP, OVERLAP_CAP,
};
use crate::matrix::SymMatrix;
use crate::mcmc::{run_chain, run_tempered, ChainConfig, McmcEstimate};
use crate::observables::{
    hightemp_opnorm_lower, ibp_derivative_check, identity_frobenius_check, identity_trace_check,
    predicted_moments, predicted_residual_constant, tap_report, tap_report_with_rows,
    IdentityCheck, TapReport,
};
use crate::report::{write_instance_dumps, write_report};
use crate::spectral::frobenius_norm;
use crate::stats::{derive_seed, EnsembleStat};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SKCOV_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Identities,
    ResidualSweep,
    OpnormSweep,
    CriticalScan,
    LowtempScan,
    DerivCheck,
    McmcValidate,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Identities,
        Kind::ResidualSweep,
        Kind::OpnormSweep,
        Kind::CriticalScan,
        Kind::LowtempScan,
        Kind::DerivCheck,
        Kind::McmcValidate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Identities => "identities",
            Kind::ResidualSweep => "residual-sweep",
            Kind::OpnormSweep => "opnorm-sweep",
            Kind::CriticalScan => "critical-scan",
            Kind::LowtempScan => "lowtemp-scan",
            Kind::DerivCheck => "deriv-check",
            Kind::McmcValidate => "mcmc-validate",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    #[default]
    Exact,
    Mcmc,
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Engine::Exact),
            "mcmc" => Ok(Engine::Mcmc),
            _ => Err(format!("unknown engine `{s}`")),
        }
    }
}

/// Pass/fail thresholds. All are finite-size tolerances, not limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub z_max: f64,
    pub residual_rel: f64,
    pub n_m2_rel: f64,
    pub n2_m3_rel: f64,
    pub opnorm_variation: f64,
    pub lowtemp_ratio: f64,
    pub lowtemp_m2_factor: f64,
    pub deriv_tol: f64,
    pub mcmc_z: f64,
    pub mcmc_hit_rate: f64,
    pub monotone_sigma: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            z_max: 4.0,
            residual_rel: 0.2,
            n_m2_rel: 0.1,
            n2_m3_rel: 0.3,
            opnorm_variation: 0.15,
            lowtemp_ratio: 1.15,
            lowtemp_m2_factor: 5.0,
            deriv_tol: 1e-6,
            mcmc_z: 4.0,
            mcmc_hit_rate: 0.95,
            monotone_sigma: 2.0,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_step() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub n_list: Vec<usize>,
    pub beta_list: Vec<f64>,
    /// Disorder instances per grid point (tuples for `deriv-check`, trials
    /// for `mcmc-validate`).
    pub samples: usize,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Chain settings for the MCMC engine; the seed field is overridden per
    /// instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// `critical-scan` adds `beta_n = sqrt(1 - kappa n^{-1/4})` per `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_critical_kappa: Option<f64>,
    #[serde(default = "default_step")]
    pub fd_step: f64,
    /// Exact-engine instances per grid point written under `out/instances`.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dump_instances: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl ExperimentConfig {
    pub fn new(kind: Kind, n_list: Vec<usize>, beta_list: Vec<f64>, samples: usize) -> Self {
        Self {
            kind,
            n_list,
            beta_list,
            samples,
            engine: Engine::Exact,
            seed: default_seed(),
            chain: None,
            out: None,
            thresholds: Thresholds::default(),
            near_critical_kappa: None,
            fd_step: default_step(),
            dump_instances: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_chain(mut self, chain: ChainConfig) -> Self {
        self.engine = Engine::Mcmc;
        self.chain = Some(chain);
        self
    }

    fn uses_mcmc(&self) -> bool {
        self.engine == Engine::Mcmc || self.kind == Kind::McmcValidate
    }

    fn chain_config(&self) -> ChainConfig {
        self.chain
            .clone()
            .unwrap_or_else(|| ChainConfig::new(20_000, 0))
    }

    /// Largest `n` the configured kind and engine can handle.
    pub fn n_cap(&self) -> usize {
        match (self.kind, self.engine) {
            (Kind::DerivCheck | Kind::McmcValidate, _) => FOUR_POINT_CAP,
            (Kind::Identities, Engine::Exact) => FOUR_POINT_CAP,
            (Kind::CriticalScan, Engine::Exact) => OVERLAP_CAP,
            (_, Engine::Exact) => DEFAULT_CAP,
            (_, Engine::Mcmc) => usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_list.is_empty() || self.beta_list.is_empty() {
            return bad("n_list and beta_list must be non-empty".into());
        }
        if self.samples < 2 {
            return bad(format!("samples must be at least 2, got {}", self.samples));
        }
        if let Some(&b) = self
            .beta_list
            .iter()
            .find(|b| !(b.is_finite() && **b >= 0.0))
        {
            return bad(format!("beta must be finite and nonnegative, got {b}"));
        }
        if self.n_list.contains(&0) {
            return Err(Error::EmptySystem);
        }
        let cap = self.n_cap();
        if let Some(&n) = self.n_list.iter().find(|&&n| n > cap) {
            return Err(Error::AboveCap { n, cap });
        }
        if self.dump_instances > 0 {
            if let Some(&n) = self.n_list.iter().find(|&&n| n > DEFAULT_CAP) {
                return Err(Error::AboveCap {
                    n,
                    cap: DEFAULT_CAP,
                });
            }
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if let Some(k) = self.near_critical_kappa {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("near_critical_kappa must be positive, got {k}"));
            }
        }
        if self.uses_mcmc() {
            let chain = self.chain_config();
            chain.validate()?;
            if self.kind == Kind::Identities && chain.replicas < 4 {
                return bad("identities with the mcmc engine need at least 4 replicas".into());
            }
        }
        Ok(())
    }
}

/// One aggregated statistic at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub n: usize,
    pub beta: f64,
    pub statistic: String,
    pub stat: EnsembleStat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<f64>,
    /// A z-score or a pass/fail flag, when the statistic has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_or_flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Least-squares fit `mean = slope * sqrt(n) + intercept` at one `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqrtFit {
    pub beta: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Statistic name to definition; all quantities are dimensionless.
    pub definitions: BTreeMap<String, String>,
    pub rows: Vec<Row>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub identity_checks: Vec<CellIdentity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<SqrtFit>,
    pub checks: Vec<Check>,
    pub all_passed: bool,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellIdentity {
    pub n: usize,
    pub beta: f64,
    pub trace: IdentityCheck,
    pub frobenius: IdentityCheck,
}

impl ExperimentReport {
    pub fn row(&self, n: usize, beta: f64, statistic: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.beta == beta && r.statistic == statistic)
    }

    pub fn mean(&self, n: usize, beta: f64, statistic: &str) -> Option<f64> {
        self.row(n, beta, statistic).map(|r| r.stat.mean)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn definitions() -> BTreeMap<String, String> {
    [
        ("trace_lhs", "Tr P with P = ((1+beta^2) I - beta A) C"),
        ("trace_rhs", "n + n beta^2 m2"),
        ("trace_diff", "trace_lhs - trace_rhs; z = mean / stderr"),
        ("frobenius_lhs", "||P||_F^2"),
        (
            "frobenius_rhs",
            "n^2 [(1-b^2) m2 + (4b^2(1+b^2) - 6b^4) m3 + b^4 m4 - 4b^4 m22 + 6b^4 m_cycle]",
        ),
        (
            "frobenius_diff",
            "frobenius_lhs - frobenius_rhs; z = mean / stderr",
        ),
        (
            "row_resid_scaled",
            "n^2 times the mean of P_ij^2 over i != j",
        ),
        (
            "resid_frob_sq",
            "||P - I||_F^2; predictor beta^2 (1+beta^2) / (1-beta^2)^2",
        ),
        (
            "n_m2",
            "n <R12^2>; predictor n times the two-term expansion",
        ),
        ("n2_m3", "n^2 <R12 R13 R23>; predictor 1 / (1-beta^2)^3"),
        ("m2", "<R12^2> = sum_ij C_ij^2 / n^2"),
        ("opnorm", "||C||_op; predictor sqrt(2 / (pi (1-beta^2)))"),
        ("opnorm_sq", "||C||_op^2"),
        ("frob_over_sqrt_n", "||C||_F / sqrt(n)"),
        ("sqrt_n_abs_overlap", "sqrt(n) <|R12|>"),
        ("schedule_n_m2", "n_m2 at beta_n = sqrt(1 - kappa n^{-1/4})"),
        (
            "schedule_sqrt_n_abs_overlap",
            "sqrt_n_abs_overlap at beta_n",
        ),
        ("schedule_frob_over_sqrt_n", "frob_over_sqrt_n at beta_n"),
        (
            "abs_diff",
            "|central difference - (beta/sqrt n)(T_ijkl - C_ij C_kl)|",
        ),
        ("max_abs_diff", "largest abs_diff over the tuples"),
        (
            "hit_fraction",
            "share of scalars (C_ij for i<j, m2, m4, m3, m_cycle) with |z| <= mcmc_z",
        ),
        (
            "min_slot_hit_rate",
            "smallest per-scalar share of trials with |z| <= mcmc_z",
        ),
        (
            "max_abs_z",
            "largest |MCMC - exact| / stderr over the scalars of a trial",
        ),
        (
            "acceptance_rate",
            "Metropolis acceptance at the target beta",
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Per-instance output of one grid cell.
#[derive(Default)]
struct InstanceOut {
    values: Vec<(&'static str, f64)>,
    /// Per-scalar pass flags, aligned across instances.
    hits: Vec<bool>,
    identity: Option<(OverlapMoments, TapReport)>,
}

struct Cell {
    n: usize,
    beta: f64,
    stats: BTreeMap<&'static str, EnsembleStat>,
    max: BTreeMap<&'static str, f64>,
    /// Instances in which each scalar slot passed.
    slot_hits: Vec<usize>,
    identity: Vec<(OverlapMoments, TapReport)>,
}

impl Cell {
    fn mean(&self, name: &str) -> f64 {
        self.stats[name].mean
    }
}

/// Runs the experiment and, when `config.out` is set, writes the report there.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut report = pool.install(|| Runner { cfg: config }.run())?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = &config.out {
        write_report(&report, dir)?;
        if config.dump_instances > 0 {
            write_instance_dumps(config, dir)?;
        }
    }
    Ok(report)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
}

struct Measured {
    c: SymMatrix,
    moments: OverlapMoments,
    mcmc: Option<McmcEstimate>,
}

impl Runner<'_> {
    fn instance_seed(&self, k: usize) -> u64 {
        derive_seed(self.cfg.seed, &[("instance", k as u64)])
    }

    fn couplings(&self, n: usize, k: usize) -> Result<Couplings> {
        sample_couplings(n, self.instance_seed(k))
    }

    fn chain_for(&self, n: usize, beta: f64, k: usize, series: bool) -> ChainConfig {
        let mut chain = self.cfg.chain_config();
        chain.seed = derive_seed(
            self.cfg.seed,
            &[
                ("chain", k as u64),
                ("n", n as u64),
                ("beta", beta.to_bits()),
            ],
        );
        chain.keep_overlap_series |= series;
        chain
    }

    fn sample_chain(
        &self,
        c: &Couplings,
        beta: f64,
        k: usize,
        series: bool,
    ) -> Result<McmcEstimate> {
        let chain = self.chain_for(c.n(), beta, k, series);
        let tempered = chain
            .ladder
            .as_ref()
            .is_some_and(|l| l.iter().any(|&b| (b - beta).abs() <= 1e-12 * beta.max(1.0)));
        if tempered {
            run_tempered(c, beta, &chain)
        } else {
            run_chain(c, beta, &chain)
        }
    }

    fn measure(
        &self,
        c: &Couplings,
        beta: f64,
        k: usize,
        four_point: bool,
        series: bool,
    ) -> Result<Measured> {
        match self.cfg.engine {
            Engine::Exact => {
                let s = exact_summary(c, beta, four_point)?;
                let moments = if four_point {
                    overlap_moments_exact(&s)?
                } else {
                    pair_moments(&s.c)
                };
                Ok(Measured {
                    c: s.c,
                    moments,
                    mcmc: None,
                })
            }
            Engine::Mcmc => {
                let est = self.sample_chain(c, beta, k, series)?;
                let pm = pair_moments(&est.c_hat);
                let m = &est.moments;
                let moments = OverlapMoments {
                    m2: m.m2.value,
                    m3: m.m3.map_or(pm.m3, |e| e.value),
                    m4: Some(m.m4.value),
                    m22: m.m22.map(|e| e.value),
                    m_cycle: m.m_cycle.map_or(pm.m_cycle, |e| e.value),
                    m_multi: m.m_multi.map_or(pm.m_multi, |e| e.value),
                };
                Ok(Measured {
                    c: est.c_hat.clone(),
                    moments,
                    mcmc: Some(est),
                })
            }
        }
    }

    /// Evaluates `f` on every instance of a cell, in parallel, keeping order.
    fn cell<F>(&self, n: usize, beta: f64, f: F) -> Result<Cell>
    where
        F: Fn(usize) -> Result<InstanceOut> + Sync,
    {
        let outs: Vec<InstanceOut> = (0..self.cfg.samples)
            .into_par_iter()
            .map(|k| {
                f(k).map_err(|e| Error::Instance {
                    instance: k,
                    seed: self.instance_seed(k),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let mut stats: BTreeMap<&'static str, EnsembleStat> = BTreeMap::new();
        let mut max: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut identity = Vec::new();
        let mut slot_hits: Vec<usize> = Vec::new();
        for out in outs {
            if slot_hits.len() < out.hits.len() {
                slot_hits.resize(out.hits.len(), 0);
            }
            for (slot, &h) in slot_hits.iter_mut().zip(&out.hits) {
                *slot += usize::from(h);
            }
            for (name, v) in out.values {
                stats.entry(name).or_default().push(v);
                let m = max.entry(name).or_insert(v);
                *m = m.max(v);
            }
            identity.extend(out.identity);
        }
        Ok(Cell {
            n,
            beta,
            stats,
            max,
            slot_hits,
            identity,
        })
    }

    fn grid(&self) -> Vec<(usize, f64)> {
        let mut ns = self.cfg.n_list.clone();
        ns.sort_unstable();
        ns.dedup();
        let mut betas = self.cfg.beta_list.clone();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        ns.iter()
            .flat_map(|&n| betas.iter().map(move |&b| (n, b)))
            .collect()
    }

    fn run(&self) -> Result<ExperimentReport> {
        let mut out = Output::default();
        match self.cfg.kind {
            Kind::Identities => self.identities(&mut out)?,
            Kind::ResidualSweep => self.residual_sweep(&mut out)?,
            Kind::OpnormSweep => self.opnorm_sweep(&mut out)?,
            Kind::CriticalScan => self.critical_scan(&mut out)?,
            Kind::LowtempScan => self.lowtemp_scan(&mut out)?,
            Kind::DerivCheck => self.deriv_check(&mut out)?,
            Kind::McmcValidate => self.mcmc_validate(&mut out)?,
        }
        out.rows.sort_by(|a, b| {
            (a.n, a.beta, &a.statistic)
                .partial_cmp(&(b.n, b.beta, &b.statistic))
                .expect("finite beta")
        });
        let all_passed = out.checks.iter().all(|c| c.passed);
        Ok(ExperimentReport {
            config: self.cfg.clone(),
            definitions: definitions(),
            rows: out.rows,
            identity_checks: out.identity,
            fits: out.fits,
            checks: out.checks,
            all_passed,
            wall_clock_secs: 0.0,
        })
    }

    fn identities(&self, out: &mut Output) -> Result<()> {
        let z_max = self.cfg.thresholds.z_max;
        for (n, beta) in self.grid() {
            let cell = self.cell(n, beta, |k| {
                let c = self.couplings(n, k)?;
                let m = self.measure(&c, beta, k, true, false)?;
                let r = tap_report_with_rows(&m.c, &interaction_matrix(&c), beta)?;
                Ok(InstanceOut {
                    values: vec![("row_resid_scaled", r.scaled_row_residual())],
                    identity: Some((m.moments, r)),
                    hits: Vec::new(),
                })
            })?;
            let trace = identity_trace_check(&cell.identity, n, beta)?;
            let frob = identity_frobenius_check(&cell.identity, n, beta)?;
            for (prefix, chk) in [("trace", &trace), ("frobenius", &frob)] {
                out.row(n, beta, &format!("{prefix}_lhs"), chk.lhs, None, None);
                out.row(n, beta, &format!("{prefix}_rhs"), chk.rhs, None, None);
                out.row(
                    n,
                    beta,
                    &format!("{prefix}_diff"),
                    chk.diff,
                    Some(0.0),
                    Some(format!("{:.6}", chk.z_score)),
                );
                out.check(
                    format!("{prefix}_identity_z n={n} beta={beta}"),
                    chk.z_score.abs() <= z_max,
                    format!("z = {:.3}, |z| <= {z_max}", chk.z_score),
                );
            }
            out.row(
                n,
                beta,
                "row_resid_scaled",
                cell.stats["row_resid_scaled"],
                None,
                None,
            );
            out.identity.push(CellIdentity {
                n,
                beta,
                trace,
                frobenius: frob,
            });
        }
        Ok(())
    }

    fn tap_cells(&self) -> Result<Vec<Cell>> {
        self.grid()
            .into_iter()
            .map(|(n, beta)| {
                self.cell(n, beta, |k| {
                    let c = self.couplings(n, k)?;
                    let m = self.measure(&c, beta, k, false, false)?;
                    let r = tap_report(&m.c, &interaction_matrix(&c), beta)?;
                    let nf = n as f64;
                    Ok(InstanceOut {
                        values: vec![
                            ("resid_frob_sq", r.resid_frob_sq),
                            ("n_m2", nf * m.moments.m2),
                            ("n2_m3", nf * nf * m.moments.m3),
                            ("m2", m.moments.m2),
                            ("opnorm", r.cov_opnorm),
                            ("opnorm_sq", r.cov_opnorm * r.cov_opnorm),
                            ("frob_over_sqrt_n", r.cov_frob / nf.sqrt()),
                        ],
                        identity: None,
                        hits: Vec::new(),
                    })
                })
            })
            .collect()
    }

    fn residual_sweep(&self, out: &mut Output) -> Result<()> {
        let th = self.cfg.thresholds;
        let cells = self.tap_cells()?;
        for cell in &cells {
            let (n, beta) = (cell.n, cell.beta);
            let pred = predicted_moments(n, beta).ok();
            let nf = n as f64;
            out.row(
                n,
                beta,
                "resid_frob_sq",
                cell.stats["resid_frob_sq"],
                predicted_residual_constant(beta).ok(),
                None,
            );
            out.row(
                n,
                beta,
                "n_m2",
                cell.stats["n_m2"],
                pred.map(|p| nf * p.m2),
                None,
            );
            out.row(
                n,
                beta,
                "n2_m3",
                cell.stats["n2_m3"],
                pred.map(|p| nf * nf * p.m3),
                None,
            );
        }
        for (beta, series) in by_beta(&cells) {
            let Ok(k) = predicted_residual_constant(beta) else {
                continue;
            };
            let q = 1.0 - beta * beta;
            let last = series.last().expect("non-empty n_list");
            let nm = last.n;

            let resid: Vec<f64> = series.iter().map(|c| c.mean("resid_frob_sq")).collect();
            let rel = (resid[resid.len() - 1] - k).abs() / k;
            out.check(
                format!("residual_constant beta={beta}"),
                rel <= th.residual_rel,
                format!(
                    "mean ||P-I||_F^2 = {:.5} at n={nm}, target {k:.5}, relative error {rel:.4} <= {}",
                    resid[resid.len() - 1],
                    th.residual_rel
                ),
            );
            let dev: Vec<f64> = resid.iter().map(|r| (r - k).abs()).collect();
            out.check(
                format!("residual_deviation_nonincreasing beta={beta}"),
                non_increasing(&dev),
                format!("|mean - {k:.5}| along n_list: {}", fmt_list(&dev)),
            );

            let lim = 1.0 / q;
            let nm2: Vec<f64> = series.iter().map(|c| c.mean("n_m2")).collect();
            let rel = (nm2[nm2.len() - 1] - lim).abs() / lim;
            out.check(
                format!("n_m2_limit beta={beta}"),
                rel <= th.n_m2_rel,
                format!(
                    "n m2 = {:.5} at n={nm}, limit {lim:.5}, relative error {rel:.4} <= {}",
                    nm2[nm2.len() - 1],
                    th.n_m2_rel
                ),
            );
            let dev: Vec<f64> = nm2.iter().map(|v| (v - lim).abs()).collect();
            out.check(
                format!("n_m2_approaches_limit beta={beta}"),
                non_increasing(&dev),
                format!("|n m2 - {lim:.5}| along n_list: {}", fmt_list(&dev)),
            );

            let lim3 = 1.0 / q.powi(3);
            let v = last.mean("n2_m3");
            let rel = (v - lim3).abs() / lim3;
            out.check(
                format!("n2_m3_limit beta={beta}"),
                rel <= th.n2_m3_rel,
                format!(
                    "n^2 m3 = {v:.5} at n={nm}, limit {lim3:.5}, relative error {rel:.4} <= {}",
                    th.n2_m3_rel
                ),
            );
        }
        Ok(())
    }

    fn opnorm_sweep(&self, out: &mut Output) -> Result<()> {
        let th = self.cfg.thresholds;
        let cells = self.tap_cells()?;
        for cell in &cells {
            let (n, beta) = (cell.n, cell.beta);
            let lower = hightemp_opnorm_lower(beta).ok();
            for name in ["opnorm", "opnorm_sq", "frob_over_sqrt_n"] {
                let pred = if name == "opnorm" { lower } else { None };
                out.row(n, beta, name, cell.stats[name], pred, None);
            }
        }
        for (beta, series) in by_beta(&cells) {
            let Ok(lower) = hightemp_opnorm_lower(beta) else {
                continue;
            };
            let means: Vec<f64> = series.iter().map(|c| c.mean("opnorm")).collect();
            let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let variation = (hi - lo) / lo;
            out.check(
                format!("opnorm_bounded_in_n beta={beta}"),
                variation < th.opnorm_variation,
                format!(
                    "mean ||C||_op along n_list: {}; (max - min) / min = {variation:.4} < {}",
                    fmt_list(&means),
                    th.opnorm_variation
                ),
            );
            out.check(
                format!("opnorm_above_lower beta={beta}"),
                means.iter().all(|&m| m > lower),
                format!("every mean exceeds sqrt(2/(pi(1-beta^2))) = {lower:.5}"),
            );
        }
        Ok(())
    }

    fn abs_overlap(&self, c: &Couplings, beta: f64, m: &Measured) -> Result<f64> {
        match &m.mcmc {
            None => overlap_distribution(c, beta).map(|p| p.moment(f64::abs)),
            Some(est) => {
                let series = est
                    .overlap_series
                    .as_ref()
                    .ok_or_else(|| Error::InvalidChain("overlap series missing".into()))?;
                let cells = series.rows.iter().flatten();
                let count = series.rows.len() * series.pairs.len();
                Ok(cells.map(|r| r.abs()).sum::<f64>() / count as f64)
            }
        }
    }

    fn critical_cell(&self, n: usize, beta: f64, prefix: &'static str) -> Result<Cell> {
        let names: [&'static str; 3] = if prefix.is_empty() {
            ["n_m2", "sqrt_n_abs_overlap", "frob_over_sqrt_n"]
        } else {
            [
                "schedule_n_m2",
                "schedule_sqrt_n_abs_overlap",
                "schedule_frob_over_sqrt_n",
            ]
        };
        self.cell(n, beta, |k| {
            let c = self.couplings(n, k)?;
            let m = self.measure(&c, beta, k, false, true)?;
            let nf = n as f64;
            let abs = self.abs_overlap(&c, beta, &m)?;
            Ok(InstanceOut {
                values: vec![
                    (names[0], nf * m.moments.m2),
                    (names[1], nf.sqrt() * abs),
                    (names[2], frobenius_norm(m.c.as_slice()) / nf.sqrt()),
                ],
                identity: None,
                hits: Vec::new(),
            })
        })
    }

    fn critical_scan(&self, out: &mut Output) -> Result<()> {
        let sigma = self.cfg.thresholds.monotone_sigma;
        let mut cells = Vec::new();
        for (n, beta) in self.grid() {
            let cell = self.critical_cell(n, beta, "")?;
            for (name, stat) in &cell.stats {
                out.row(n, beta, name, *stat, None, None);
            }
            cells.push(cell);
        }
        if let Some(kappa) = self.cfg.near_critical_kappa {
            let mut ns = self.cfg.n_list.clone();
            ns.sort_unstable();
            ns.dedup();
            for n in ns {
                let gap = (kappa * (n as f64).powf(-0.25)).min(1.0);
                let beta = (1.0 - gap).sqrt();
                let cell = self.critical_cell(n, beta, "schedule")?;
                for (name, stat) in &cell.stats {
                    out.row(n, beta, name, *stat, None, None);
                }
            }
        }
        let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
        ns.dedup();
        for n in ns {
            let series: Vec<&Cell> = cells.iter().filter(|c| c.n == n).collect();
            if series.len() < 2 {
                continue;
            }
            let mut ok = true;
            let mut steps = Vec::new();
            for w in series.windows(2) {
                let (a, b) = (
                    w[0].stats["frob_over_sqrt_n"],
                    w[1].stats["frob_over_sqrt_n"],
                );
                let se = (a.stderr().powi(2) + b.stderr().powi(2)).sqrt();
                let step = b.mean - a.mean;
                ok &= step > sigma * se;
                steps.push(format!("{:.4} ({:.1} se)", step, step / se));
            }
            out.check(
                format!("frobenius_monotone_in_beta n={n}"),
                ok,
                format!(
                    "steps of mean ||C||_F/sqrt(n) along beta_list: {}; each must exceed {sigma} combined stderr",
                    steps.join(", ")
                ),
            );
        }
        Ok(())
    }

    fn lowtemp_scan(&self, out: &mut Output) -> Result<()> {
        let th = self.cfg.thresholds;
        let cells = self.tap_cells()?;
        for cell in &cells {
            for name in ["opnorm", "m2", "frob_over_sqrt_n"] {
                out.row(cell.n, cell.beta, name, cell.stats[name], None, None);
            }
        }
        let reference = by_beta(&cells).into_iter().find(|(b, _)| *b < 1.0);
        for (beta, series) in by_beta(&cells) {
            let xs: Vec<f64> = series.iter().map(|c| (c.n as f64).sqrt()).collect();
            let ys: Vec<f64> = series.iter().map(|c| c.mean("opnorm")).collect();
            if series.len() >= 2 {
                out.fits.push(sqrt_fit(beta, &xs, &ys));
            }
            if beta <= 1.0 || series.len() < 2 {
                continue;
            }
            let (first, last) = (series[0], series[series.len() - 1]);
            let ratio = last.mean("opnorm") / first.mean("opnorm");
            out.check(
                format!("opnorm_growth beta={beta}"),
                ratio >= th.lowtemp_ratio,
                format!(
                    "mean ||C||_op ratio n={} / n={} = {ratio:.4} >= {} (sqrt ratio {:.4})",
                    last.n,
                    first.n,
                    th.lowtemp_ratio,
                    (last.n as f64 / first.n as f64).sqrt()
                ),
            );
            if let Some((rb, rseries)) = &reference {
                if let Some(rc) = rseries.iter().find(|c| c.n == last.n) {
                    let factor = last.mean("m2") / rc.mean("m2");
                    out.check(
                        format!("m2_vs_high_temperature beta={beta}"),
                        factor >= th.lowtemp_m2_factor,
                        format!(
                            "mean m2 at n={}: {:.5} vs {:.5} at beta={rb}; factor {factor:.3} >= {}",
                            last.n,
                            last.mean("m2"),
                            rc.mean("m2"),
                            th.lowtemp_m2_factor
                        ),
                    );
                }
            }
        }
        Ok(())
    }

    fn deriv_check(&self, out: &mut Output) -> Result<()> {
        let tol = self.cfg.thresholds.deriv_tol;
        for (n, beta) in self.grid() {
            let cell = self.cell(n, beta, |k| {
                let c = self.couplings(n, k)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.cfg.seed,
                    &[("tuple", k as u64), ("n", n as u64)],
                ));
                let idx = random_tuple(&mut rng, n);
                let chk = ibp_derivative_check(&c, beta, idx, self.cfg.fd_step)?;
                Ok(InstanceOut {
                    values: vec![("abs_diff", chk.abs_diff)],
                    identity: None,
                    hits: Vec::new(),
                })
            })?;
            let stat = cell.stats["abs_diff"];
            out.row(n, beta, "abs_diff", stat, Some(0.0), None);
            let max = cell.max["abs_diff"];
            let passed = max <= tol;
            out.row(
                n,
                beta,
                "max_abs_diff",
                EnsembleStat::from_values([max]),
                Some(0.0),
                Some(flag(passed)),
            );
            out.check(
                format!("derivative n={n} beta={beta}"),
                passed,
                format!(
                    "max |finite_diff - formula| = {max:.3e} <= {tol:.0e} over {} tuples",
                    stat.count
                ),
            );
        }
        Ok(())
    }

    fn mcmc_validate(&self, out: &mut Output) -> Result<()> {
        let th = self.cfg.thresholds;
        for (n, beta) in self.grid() {
            let cell = self.cell(n, beta, |k| {
                let c = self.couplings(n, k)?;
                let exact = exact_summary(&c, beta, true)?;
                let moments = overlap_moments_exact(&exact)?;
                let est = self.sample_chain(&c, beta, k, false)?;
                let mut zs = Vec::with_capacity(n * (n - 1) / 2 + 4);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let se = est.c_stderr.get(i, j);
                        zs.push(z_score(est.c_hat.get(i, j), se, exact.c.get(i, j)));
                    }
                }
                let m = &est.moments;
                zs.push(m.m2.z_against(moments.m2));
                zs.push(m.m4.z_against(moments.m4()?));
                if let Some(e) = m.m3 {
                    zs.push(e.z_against(moments.m3));
                }
                if let Some(e) = m.m_cycle {
                    zs.push(e.z_against(moments.m_cycle));
                }
                let hits: Vec<bool> = zs.iter().map(|z| z.abs() <= th.mcmc_z).collect();
                let share = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
                let max_z = zs.iter().map(|z| z.abs()).fold(0.0, f64::max);
                Ok(InstanceOut {
                    values: vec![
                        ("hit_fraction", share),
                        ("max_abs_z", max_z),
                        ("acceptance_rate", est.acceptance_rate),
                    ],
                    identity: None,
                    hits,
                })
            })?;
            let trials = self.cfg.samples as f64;
            let worst = cell.slot_hits.iter().copied().min().unwrap_or(0) as f64 / trials;
            let passed = worst >= th.mcmc_hit_rate;
            out.row(
                n,
                beta,
                "hit_fraction",
                cell.stats["hit_fraction"],
                Some(1.0),
                None,
            );
            out.row(
                n,
                beta,
                "min_slot_hit_rate",
                EnsembleStat::from_values([worst]),
                Some(1.0),
                Some(flag(passed)),
            );
            out.row(n, beta, "max_abs_z", cell.stats["max_abs_z"], None, None);
            out.row(
                n,
                beta,
                "acceptance_rate",
                cell.stats["acceptance_rate"],
                None,
                None,
            );
            out.check(
                format!("mcmc_vs_exact n={n} beta={beta}"),
                passed,
                format!(
                    "every one of {} scalars within {} stderr in >= {:.4} of {} trials; need >= {}",
                    cell.slot_hits.len(),
                    th.mcmc_z,
                    worst,
                    self.cfg.samples,
                    th.mcmc_hit_rate
                ),
            );
        }
        Ok(())
    }
}

#[derive(Default)]
struct Output {
    rows: Vec<Row>,
    checks: Vec<Check>,
    identity: Vec<CellIdentity>,
    fits: Vec<SqrtFit>,
}

impl Output {
    fn row(
        &mut self,
        n: usize,
        beta: f64,
        statistic: &str,
        stat: EnsembleStat,
        predictor: Option<f64>,
        z_or_flag: Option<String>,
    ) {
        self.rows.push(Row {
            n,
            beta,
            statistic: statistic.to_string(),
            stat,
            predictor,
            z_or_flag,
        });
    }

    fn check(&mut self, name: String, passed: bool, detail: String) {
        self.checks.push(Check {
            name,
            passed,
            detail,
        });
    }
}

fn flag(passed: bool) -> String {
    if passed { "pass" } else { "fail" }.to_string()
}

fn z_score(value: f64, stderr: f64, exact: f64) -> f64 {
    let d = value - exact;
    if stderr > 0.0 {
        d / stderr
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

/// Cells grouped by `beta` (ascending), each group sorted by `n`.
fn by_beta(cells: &[Cell]) -> Vec<(f64, Vec<&Cell>)> {
    let mut groups: Vec<(f64, Vec<&Cell>)> = Vec::new();
    for cell in cells {
        match groups.iter_mut().find(|(b, _)| *b == cell.beta) {
            Some((_, g)) => g.push(cell),
            None => groups.push((cell.beta, vec![cell])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, g) in groups.iter_mut() {
        g.sort_by_key(|c| c.n);
    }
    groups
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.5}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Four distinct indices when `n >= 4`, otherwise independent uniform ones.
fn random_tuple(rng: &mut impl Rng, n: usize) -> (usize, usize, usize, usize) {
    if n >= 4 {
        let mut idx: Vec<usize> = (0..n).collect();
        for p in 0..4 {
            let q = rng.gen_range(p..n);
            idx.swap(p, q);
        }
        (idx[0], idx[1], idx[2], idx[3])
    } else {
        let mut d = || rng.gen_range(0..n);
        (d(), d(), d(), d())
    }
}

fn sqrt_fit(beta: f64, xs: &[f64], ys: &[f64]) -> SqrtFit {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    SqrtFit {
        beta,
        slope,
        intercept: my - slope * mx,
        r_squared: if syy > 0.0 {
            sxy * sxy / (sxx * syy)
        } else {
            1.0
        },
    }
}
