//! Dense symmetric eigenvalues (cyclic Jacobi) and matrix norms.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SymMatrix};
use crate::stats::Compensated;

pub const DEFAULT_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order, optionally with orthonormal eigenvectors
/// stored as the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub vectors: Option<Matrix>,
    pub sweeps: usize,
}

impl Spectrum {
    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.max().abs().max(self.min().abs())
    }
}

fn off_diagonal_mass(a: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += a[i * n + j] * a[i * n + j];
        }
    }
    (2.0 * acc).sqrt()
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius mass drops to
/// `tol * ||m||_F`.
pub fn jacobi_eigen(m: &SymMatrix, tol: f64) -> Result<Spectrum> {
    jacobi(m, tol, false)
}

pub fn jacobi_eigen_with_vectors(m: &SymMatrix, tol: f64) -> Result<Spectrum> {
    jacobi(m, tol, true)
}

fn jacobi(m: &SymMatrix, tol: f64, want_vectors: bool) -> Result<Spectrum> {
    let n = m.n();
    let mut a = m.as_slice().to_vec();
    let mut v = want_vectors.then(|| Matrix::identity(n).as_slice().to_vec());
    let target = tol * frobenius_norm(&a);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_mass(&a, n);
        if off <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { off_diagonal: off });
        }
        sweeps += 1;
        // Entries far below the current off-diagonal scale are left alone
        // until later sweeps; they cannot matter at this precision yet.
        let skip = if sweeps < 4 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 || apq.abs() < skip {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[p * n + k];
                    let akq = a[q * n + k];
                    a[p * n + k] = c * akp - s * akq;
                    a[q * n + k] = s * akp + c * akq;
                }
                for k in 0..n {
                    a[k * n + p] = a[p * n + k];
                    a[k * n + q] = a[q * n + k];
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = v.map(|v| {
        let mut out = Matrix::zeros(n, n);
        for (col, &src) in order.iter().enumerate() {
            for k in 0..n {
                out.set(k, col, v[k * n + src]);
            }
        }
        out
    });
    Ok(Spectrum {
        eigenvalues,
        vectors,
        sweeps,
    })
}

/// Outcome of [`operator_norm_detailed`].
#[derive(Clone, Copy, Debug)]
pub struct OpNorm {
    pub value: f64,
    pub iterations: usize,
    /// Power iteration hit its cap and the value came from Jacobi.
    pub fell_back: bool,
}

fn start_vector(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x5eed_0f0b_5eed;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            0.5 + ((state >> 11) as f64) / (1u64 << 53) as f64
        })
        .collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn operator_norm(m: &SymMatrix) -> f64 {
    operator_norm_detailed(m).value
}

/// Power iteration on `M^2`, stopped once the eigen-residual of `M^2` falls
/// below `1e-10` relative; Jacobi takes over if the iteration cap is reached.
pub fn operator_norm_detailed(m: &SymMatrix) -> OpNorm {
    let n = m.n();
    if n == 0 {
        return OpNorm {
            value: 0.0,
            iterations: 0,
            fell_back: false,
        };
    }
    let nf = n as f64;
    let cap = ((10.0 * nf * nf.ln()).ceil() as usize).max(64);
    let mut v = start_vector(n);
    let mut w = vec![0.0; n];
    let mut u = vec![0.0; n];
    for it in 1..=cap {
        m.matvec(&v, &mut w);
        let theta: f64 = w.iter().map(|x| x * x).sum();
        if theta == 0.0 {
            // v lies in the kernel; only the zero matrix reaches this from
            // a generic start vector.
            if m.as_slice().iter().all(|&x| x == 0.0) {
                return OpNorm {
                    value: 0.0,
                    iterations: it,
                    fell_back: false,
                };
            }
            break;
        }
        m.matvec(&w, &mut u);
        let resid = u
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= 1e-10 * theta {
            return OpNorm {
                value: theta.sqrt(),
                iterations: it,
                fell_back: false,
            };
        }
        normalize(&mut u);
        std::mem::swap(&mut v, &mut u);
    }
    let value = match jacobi_eigen(m, DEFAULT_TOL) {
        Ok(s) => s.max_abs(),
        // Jacobi failing to converge after 100 sweeps leaves the diagonal
        // accurate to the reported off-diagonal mass; use it anyway.
        Err(_) => jacobi_unchecked_max_abs(m),
    };
    OpNorm {
        value,
        iterations: cap,
        fell_back: true,
    }
}

fn jacobi_unchecked_max_abs(m: &SymMatrix) -> f64 {
    jacobi_eigen(m, 1e-6)
        .map(|s| s.max_abs())
        .unwrap_or_else(|_| (0..m.n()).map(|i| m.get(i, i).abs()).fold(0.0, f64::max))
}

/// Root of the compensated sum of squared entries.
pub fn frobenius_norm(entries: &[f64]) -> f64 {
    let mut acc = Compensated::default();
    for &x in entries {
        acc.add(x * x);
    }
    acc.value().sqrt()
}
