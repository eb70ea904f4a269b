//! Quenched disorder: Gaussian couplings and the matrices built from them.
//!
//! Couplings are drawn for every `i <= j` in row-major order of the upper
//! triangle from a ChaCha12 uniform stream, converted to normals with the
//! Box-Muller transform (both outputs of each pair are used). The diagonal is
//! sampled too; the Hamiltonian never reads it, but `A = g / sqrt(n)` does.
//!
//! Dump formats (both list the upper triangle row-major, diagonal included):
//!
//! * binary: the 8 magic bytes `SKCOUPL1`, `n` as little-endian `u64`, then
//!   `n(n+1)/2` little-endian `f64` values;
//! * CSV: a header line `i,j,g` followed by one `i,j,g` line per entry with
//!   `g` printed in shortest round-trip form.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::matrix::SymMatrix;

const DUMP_MAGIC: &[u8; 8] = b"SKCOUPL1";

/// Box-Muller normal generator over a uniform stream.
#[derive(Debug)]
pub struct NormalStream<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> NormalStream<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// One SK disorder instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Couplings {
    g: SymMatrix,
}

impl Couplings {
    pub fn from_matrix(g: SymMatrix) -> Result<Self> {
        if g.n() == 0 {
            return Err(Error::EmptySystem);
        }
        if let Some(v) = g.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coupling {v}")));
        }
        Ok(Self { g })
    }

    /// Couplings with the given off-diagonal pairs `(i, j, g_ij)`; everything
    /// else, diagonal included, is zero.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        let mut g = SymMatrix::zeros(n);
        for &(i, j, v) in pairs {
            for idx in [i, j] {
                if idx >= n {
                    return Err(Error::IndexOutOfRange { index: idx, n });
                }
            }
            g.set(i, j, v);
        }
        Self::from_matrix(g)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.g.n()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.g.get(i, j)
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.g
    }

    /// Same off-diagonal couplings with `g_ii = 0`.
    pub fn with_zero_diagonal(&self) -> Self {
        let mut g = self.g.clone();
        for i in 0..g.n() {
            g.set(i, i, 0.0);
        }
        Self { g }
    }

    /// Shifts the single coupling variable attached to the unordered pair `{k, l}`.
    pub fn with_shifted(&self, k: usize, l: usize, delta: f64) -> Result<Self> {
        let n = self.n();
        for idx in [k, l] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, n });
            }
        }
        let mut g = self.g.clone();
        g.set(k, l, g.get(k, l) + delta);
        Ok(Self { g })
    }

    /// Off-diagonal couplings `g_ij`, `i < j`, in row-major order.
    pub fn upper_pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j, self.g.get(i, j))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(16 + 8 * n * (n + 1) / 2);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for i in 0..n {
            for j in i..n {
                out.extend_from_slice(&self.g.get(i, j).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != DUMP_MAGIC {
            return Err(Error::BadDump("missing SKCOUPL1 header".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice")) as usize;
        let count = n
            .checked_mul(n + 1)
            .map(|v| v / 2)
            .ok_or_else(|| Error::BadDump(format!("n = {n} overflows")))?;
        if bytes.len() != 16 + 8 * count {
            return Err(Error::BadDump(format!(
                "expected {} bytes for n = {n}, found {}",
                16 + 8 * count,
                bytes.len()
            )));
        }
        let mut values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut g = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                g.set(i, j, values.next().expect("length checked"));
            }
        }
        Self::from_matrix(g)
    }

    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut s = String::from("i,j,g\n");
        for i in 0..n {
            for j in i..n {
                writeln!(s, "{i},{j},{}", self.g.get(i, j)).expect("write to String");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "i,j,g" => {}
            _ => return Err(Error::BadDump("missing i,j,g header".into())),
        }
        let mut entries = Vec::new();
        for line in lines {
            let mut parts = line.split(',');
            let mut field = |what: &str| {
                parts
                    .next()
                    .map(str::trim)
                    .ok_or_else(|| Error::BadDump(format!("line `{line}`: missing {what}")))
            };
            let i: usize = field("i")?
                .parse()
                .map_err(|e| Error::BadDump(format!("line `{line}`: {e}")))?;
            let j: usize = field("j")?
                .parse()
                .map_err(|e| Error::BadDump(format!("line `{line}`: {e}")))?;
            let v: f64 = field("g")?
                .parse()
                .map_err(|e| Error::BadDump(format!("line `{line}`: {e}")))?;
            if j < i {
                return Err(Error::BadDump(format!("line `{line}`: expected i <= j")));
            }
            entries.push((i, j, v));
        }
        let count = entries.len();
        // n(n+1)/2 == count
        let n = ((((8 * count + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
        if n * (n + 1) / 2 != count {
            return Err(Error::BadDump(format!("{count} entries is not a triangle")));
        }
        let mut g = SymMatrix::zeros(n);
        for (i, j, v) in entries {
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, n });
            }
            g.set(i, j, v);
        }
        Self::from_matrix(g)
    }
}

/// Draws the couplings of one instance from `seed`.
///
/// Entries are drawn column by column (`g_0j, ..., g_jj` for `j = 0, 1, ...`),
/// so the instance at size `n` is the leading block of the instance at any
/// larger size with the same seed.
pub fn sample_couplings(n: usize, seed: u64) -> Result<Couplings> {
    if n == 0 {
        return Err(Error::EmptySystem);
    }
    let mut normals = NormalStream::new(ChaCha12Rng::seed_from_u64(seed));
    let mut g = SymMatrix::zeros(n);
    for j in 0..n {
        for i in 0..=j {
            g.set(i, j, normals.next_normal());
        }
    }
    Ok(Couplings { g })
}

/// `A = g / sqrt(n)`, diagonal included.
pub fn interaction_matrix(c: &Couplings) -> SymMatrix {
    c.g.scaled(1.0 / (c.n() as f64).sqrt())
}

/// `(1 + beta^2) I - beta A`.
pub fn tap_shift_operator(beta: f64, a: &SymMatrix) -> SymMatrix {
    let n = a.n();
    let diag = 1.0 + beta * beta;
    SymMatrix::from_upper(n, |i, j| {
        let v = -beta * a.get(i, j);
        if i == j {
            diag + v
        } else {
            v
        }
    })
}
