//! TAP residual operator, the disorder-averaged identities it satisfies, and
//! the high-temperature asymptotic predictors.
//!
//! With `P = ((1+beta^2) I - beta A) C`, averaging over the couplings gives,
//! exactly at every `n`,
//!
//! ```text
//! E Tr P     = n + n beta^2 E<R12^2>
//! E ||P||_F^2 = (1-beta^2) n^2 E<R12^2> + (4 beta^2 (1+beta^2) - 6 beta^4) n^2 E<R12 R13 R23>
//!             + beta^4 n^2 E<R12^4> - 4 beta^4 n^2 E<R12^2 R23^2> + 6 beta^4 n^2 E<R12 R23 R34 R14>
//! ```
//!
//! Neither holds per instance, so both are checked as ensemble z-tests.

use serde::{Deserialize, Serialize};

use crate::disorder::{tap_shift_operator, Couplings};
use crate::error::{Error, Result};
use crate::gibbs::{exact_summary_with, ExactOptions, OverlapMoments, FOUR_POINT_CAP};
use crate::matrix::{Matrix, SymMatrix};
use crate::spectral::{frobenius_norm, operator_norm};
use crate::stats::{Compensated, EnsembleStat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    pub n: usize,
    pub beta: f64,
    pub p: Matrix,
    pub trace_p: f64,
    /// `||P||_F^2`
    pub p_frob_sq: f64,
    /// `||P - I||_F^2`
    pub resid_frob_sq: f64,
    pub cov_opnorm: f64,
    pub cov_frob: f64,
    /// `P_ij^2` off the diagonal (zero on it), when requested.
    pub row_resid: Option<Matrix>,
}

impl TapReport {
    /// Mean of `n^2 P_ij^2` over ordered pairs `i != j`.
    pub fn scaled_row_residual(&self) -> f64 {
        let n = self.n;
        if n < 2 {
            return 0.0;
        }
        let mut acc = Compensated::default();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc.add(self.p.get(i, j).powi(2));
                }
            }
        }
        let nf = n as f64;
        nf * nf * acc.value() / (nf * (nf - 1.0))
    }
}

pub fn tap_report(c: &SymMatrix, a: &SymMatrix, beta: f64) -> Result<TapReport> {
    build_report(c, a, beta, false)
}

pub fn tap_report_with_rows(c: &SymMatrix, a: &SymMatrix, beta: f64) -> Result<TapReport> {
    build_report(c, a, beta, true)
}

fn build_report(c: &SymMatrix, a: &SymMatrix, beta: f64, rows: bool) -> Result<TapReport> {
    let n = c.n();
    if a.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.n(),
        });
    }
    let p = tap_shift_operator(beta, a).mul(c)?;
    let mut resid = Compensated::default();
    for i in 0..n {
        for j in 0..n {
            let d = p.get(i, j) - if i == j { 1.0 } else { 0.0 };
            resid.add(d * d);
        }
    }
    let row_resid = rows.then(|| {
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    r.set(i, j, p.get(i, j).powi(2));
                }
            }
        }
        r
    });
    Ok(TapReport {
        n,
        beta,
        trace_p: p.trace(),
        p_frob_sq: frobenius_norm(p.as_slice()).powi(2),
        resid_frob_sq: resid.value(),
        cov_opnorm: operator_norm(c),
        cov_frob: frobenius_norm(c.as_slice()),
        row_resid,
        p,
    })
}

/// Ensemble comparison of two sides of an identity that holds in expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: EnsembleStat,
    pub rhs: EnsembleStat,
    pub diff: EnsembleStat,
    pub z_score: f64,
}

impl IdentityCheck {
    fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut lhs = EnsembleStat::new();
        let mut rhs = EnsembleStat::new();
        let mut diff = EnsembleStat::new();
        for (l, r) in pairs {
            lhs.push(l);
            rhs.push(r);
            diff.push(l - r);
        }
        if diff.count == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let se = diff.stderr();
        let z_score = if se > 0.0 {
            diff.mean / se
        } else if diff.mean == 0.0 {
            0.0
        } else {
            diff.mean.signum() * f64::INFINITY
        };
        Ok(Self {
            lhs,
            rhs,
            diff,
            z_score,
        })
    }

    pub fn lhs_mean(&self) -> f64 {
        self.lhs.mean
    }
    pub fn lhs_stderr(&self) -> f64 {
        self.lhs.stderr()
    }
    pub fn rhs_mean(&self) -> f64 {
        self.rhs.mean
    }
    pub fn rhs_stderr(&self) -> f64 {
        self.rhs.stderr()
    }
    pub fn diff_mean(&self) -> f64 {
        self.diff.mean
    }
    pub fn diff_stderr(&self) -> f64 {
        self.diff.stderr()
    }
}

/// Right-hand side of the trace identity for one instance.
pub fn trace_rhs(n: usize, beta: f64, m2: f64) -> f64 {
    let nf = n as f64;
    nf + nf * beta * beta * m2
}

/// Right-hand side of the Frobenius identity for one instance.
pub fn frobenius_rhs(n: usize, beta: f64, m: &OverlapMoments) -> Result<f64> {
    let n2 = (n as f64).powi(2);
    let b2 = beta * beta;
    let b4 = b2 * b2;
    Ok(n2
        * ((1.0 - b2) * m.m2 + (4.0 * b2 * (1.0 + b2) - 6.0 * b4) * m.m3 + b4 * m.m4()?
            - 4.0 * b4 * m.m22()?
            + 6.0 * b4 * m.m_cycle))
}

pub fn identity_trace_check(
    ensemble: &[(OverlapMoments, TapReport)],
    n: usize,
    beta: f64,
) -> Result<IdentityCheck> {
    check_sizes(ensemble, n)?;
    IdentityCheck::from_pairs(
        ensemble
            .iter()
            .map(|(m, r)| (r.trace_p, trace_rhs(n, beta, m.m2))),
    )
}

pub fn identity_frobenius_check(
    ensemble: &[(OverlapMoments, TapReport)],
    n: usize,
    beta: f64,
) -> Result<IdentityCheck> {
    check_sizes(ensemble, n)?;
    let pairs = ensemble
        .iter()
        .map(|(m, r)| Ok((r.p_frob_sq, frobenius_rhs(n, beta, m)?)))
        .collect::<Result<Vec<_>>>()?;
    IdentityCheck::from_pairs(pairs)
}

fn check_sizes(ensemble: &[(OverlapMoments, TapReport)], n: usize) -> Result<()> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if let Some((_, r)) = ensemble.iter().find(|(_, r)| r.n != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: r.n,
        });
    }
    Ok(())
}

fn require_high_temperature(beta: f64) -> Result<()> {
    if beta.is_finite() && (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::NotHighTemperature(beta))
    }
}

/// Large-`n` overlap predictions for `beta < 1`. `m_cycle` is only known to
/// be `O(n^{-5/2})` and is reported as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedMoments {
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m22: f64,
    pub m_cycle: f64,
}

impl PredictedMoments {
    pub fn as_overlap_moments(&self) -> OverlapMoments {
        OverlapMoments {
            m2: self.m2,
            m3: self.m3,
            m4: Some(self.m4),
            m22: Some(self.m22),
            m_cycle: self.m_cycle,
            m_multi: 0.0,
        }
    }
}

pub fn predicted_moments(n: usize, beta: f64) -> Result<PredictedMoments> {
    require_high_temperature(beta)?;
    let nf = n as f64;
    let q = 1.0 - beta * beta;
    let b2 = beta * beta;
    Ok(PredictedMoments {
        m2: 1.0 / (nf * q) - b2 * (1.0 + b2) / (nf * nf * q.powi(4)),
        m3: 1.0 / (nf * nf * q.powi(3)),
        m4: 3.0 / (nf * nf * q * q),
        m22: 1.0 / (nf * nf * q * q),
        m_cycle: 0.0,
    })
}

/// Large-`n` limit of `E ||P - I||_F^2`: `beta^2 (1+beta^2) / (1-beta^2)^2`.
pub fn predicted_residual_constant(beta: f64) -> Result<f64> {
    require_high_temperature(beta)?;
    let b2 = beta * beta;
    Ok(b2 * (1.0 + b2) / (1.0 - b2).powi(2))
}

/// Asymptotic lower bound `sqrt(2 / (pi (1-beta^2)))` on `E ||C||_op`.
pub fn hightemp_opnorm_lower(beta: f64) -> Result<f64> {
    require_high_temperature(beta)?;
    Ok((2.0 / (std::f64::consts::PI * (1.0 - beta * beta))).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbpCheck {
    pub finite_diff: f64,
    pub formula: f64,
    pub abs_diff: f64,
}

/// Compares `d<sigma_i sigma_j>/d g_kl` by central differences with
/// `beta/sqrt(n) (<sigma_i sigma_j sigma_k sigma_l> - C_ij C_kl)`.
///
/// Only the single coupling variable of the pair `{k, l}` is perturbed.
pub fn ibp_derivative_check(
    c: &Couplings,
    beta: f64,
    (i, j, k, l): (usize, usize, usize, usize),
    step: f64,
) -> Result<IbpCheck> {
    let n = c.n();
    for idx in [i, j, k, l] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, n });
        }
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step}"
        )));
    }
    let opts = ExactOptions {
        cap: FOUR_POINT_CAP,
        ..ExactOptions::default()
    };
    let base = exact_summary_with(c, beta, true, &opts)?;
    let t = base.four_point(i, j, k, l).expect("four-point requested");
    let formula = beta / (n as f64).sqrt() * (t - base.c.get(i, j) * base.c.get(k, l));

    let plus = exact_summary_with(&c.with_shifted(k, l, step)?, beta, false, &opts)?;
    let minus = exact_summary_with(&c.with_shifted(k, l, -step)?, beta, false, &opts)?;
    let finite_diff = (plus.c.get(i, j) - minus.c.get(i, j)) / (2.0 * step);
    Ok(IbpCheck {
        finite_diff,
        formula,
        abs_diff: (finite_diff - formula).abs(),
    })
}
