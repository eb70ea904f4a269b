//! Exact Gibbs averages by enumerating `{-1,+1}^n`.
//!
//! States are visited in reflected Gray-code order: step `s` flips spin
//! `trailing_zeros(s)`, and spin `k` is `-1` exactly when bit `k` of the Gray
//! code is set. The walker carries the local fields
//! `h_k = n^{-1/2} sum_{j != k} g_kj sigma_j`, so each step costs `O(n)` and
//! the log-weight changes by `-2 beta sigma_k h_k`.
//!
//! Two-point sums use the fact that within an aligned run of `2^b` Gray
//! indices the spins above bit `b` are frozen. Per state only the low-spin
//! weight table and an `O(b)` vector are updated; high-high and high-low
//! contributions are folded in once per run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::Couplings;
use crate::error::{Error, Result};
use crate::matrix::SymMatrix;
use crate::stats::Compensated;

/// Largest `n` enumerated for two-point quantities.
pub const DEFAULT_CAP: usize = 24;
/// Largest `n` for which the four-point tensor is built.
pub const FOUR_POINT_CAP: usize = 14;
/// Largest `n` for the exact overlap distribution (`4^n` state pairs).
pub const DISTRIBUTION_CAP: usize = 13;
/// Largest `n` for the transform-based overlap law.
pub const OVERLAP_CAP: usize = 22;

const LOW_BITS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactOptions {
    pub cap: usize,
    pub four_point_cap: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            four_point_cap: FOUR_POINT_CAP,
        }
    }
}

fn check_spins(n: usize, sigma: &[i8]) -> Result<()> {
    if sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sigma.len(),
        });
    }
    if let Some((index, &s)) = sigma.iter().enumerate().find(|(_, &s)| s != 1 && s != -1) {
        return Err(Error::MalformedSpin {
            index,
            value: i32::from(s),
        });
    }
    Ok(())
}

/// Unnormalized log-weight `beta/sqrt(n) * sum_{i<j} g_ij sigma_i sigma_j`.
pub fn log_weight(c: &Couplings, beta: f64, sigma: &[i8]) -> Result<f64> {
    check_spins(c.n(), sigma)?;
    Ok(beta * reduced_energy(c, sigma))
}

/// `n^{-1/2} sum_{i<j} g_ij sigma_i sigma_j` without validation.
pub(crate) fn reduced_energy(c: &Couplings, sigma: &[i8]) -> f64 {
    let n = c.n();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in (i + 1)..n {
            row += c.get(i, j) * f64::from(sigma[j]);
        }
        acc += f64::from(sigma[i]) * row;
    }
    acc / (n as f64).sqrt()
}

#[inline]
fn gray(index: u64) -> u64 {
    index ^ (index >> 1)
}

/// Incremental Gray-code walk over spin configurations.
#[derive(Clone, Debug)]
pub struct GrayWalk<'a> {
    couplings: &'a Couplings,
    inv_sqrt_n: f64,
    beta: f64,
    index: u64,
    spins: Vec<i8>,
    fields: Vec<f64>,
    energy: f64,
}

impl<'a> GrayWalk<'a> {
    /// Positions the walk at Gray index `index`, computing fields from scratch.
    pub fn new_at(couplings: &'a Couplings, beta: f64, index: u64) -> Self {
        let n = couplings.n();
        let code = gray(index);
        let spins: Vec<i8> = (0..n)
            .map(|k| if (code >> k) & 1 == 1 { -1 } else { 1 })
            .collect();
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        let fields = (0..n)
            .map(|k| {
                let mut h = 0.0;
                for j in 0..n {
                    if j != k {
                        h += couplings.get(k, j) * f64::from(spins[j]);
                    }
                }
                h * inv_sqrt_n
            })
            .collect();
        let energy = reduced_energy(couplings, &spins);
        Self {
            couplings,
            inv_sqrt_n,
            beta,
            index,
            spins,
            fields,
            energy,
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn log_weight(&self) -> f64 {
        self.beta * self.energy
    }

    /// Advances to the next Gray index.
    pub fn step(&mut self) {
        self.index += 1;
        let k = self.index.trailing_zeros() as usize;
        let old = f64::from(self.spins[k]);
        self.energy -= 2.0 * old * self.fields[k];
        self.spins[k] = -self.spins[k];
        let row = self.couplings.matrix().row(k);
        let shift = -2.0 * old * self.inv_sqrt_n;
        for (j, (h, g)) in self.fields.iter_mut().zip(row).enumerate() {
            if j != k {
                *h += shift * g;
            }
        }
    }
}

/// Lexicographic ranks of sorted distinct quadruples.
#[derive(Clone, Debug)]
struct QuadIndex {
    n: usize,
    len: usize,
    rank: Vec<u32>,
}

impl QuadIndex {
    fn new(n: usize) -> Self {
        let mut rank = vec![u32::MAX; n.pow(4)];
        let mut r = 0u32;
        for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    for l in (k + 1)..n {
                        rank[((i * n + j) * n + k) * n + l] = r;
                        r += 1;
                    }
                }
            }
        }
        Self {
            n,
            len: r as usize,
            rank,
        }
    }

    #[inline]
    fn get(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        self.rank[((i * self.n + j) * self.n + k) * self.n + l] as usize
    }
}

/// Log-partition function, two-point matrix and (optionally) four-point
/// tensor of one instance.
#[derive(Clone, Debug)]
pub struct ExactSummary {
    pub n: usize,
    pub beta: f64,
    pub log_z: f64,
    /// `C_ij = <sigma_i sigma_j>`, unit diagonal.
    pub c: SymMatrix,
    /// `<sigma_i>`, accumulated explicitly; zero up to rounding.
    pub magnetization: Vec<f64>,
    /// `<sigma_i sigma_j sigma_k sigma_l>` over sorted distinct quadruples,
    /// lexicographic order.
    four_point: Option<Vec<f64>>,
    quad: Option<QuadIndex>,
}

impl ExactSummary {
    pub fn has_four_point(&self) -> bool {
        self.four_point.is_some()
    }

    /// Four-point function for arbitrary indices, resolving repeats:
    /// indices occurring an even number of times drop out.
    pub fn four_point(&self, i: usize, j: usize, k: usize, l: usize) -> Option<f64> {
        let t = self.four_point.as_ref()?;
        let quad = self.quad.as_ref()?;
        let mut idx = [i, j, k, l];
        idx.sort_unstable();
        let mut odd = [0usize; 4];
        let mut m = 0;
        let mut p = 0;
        while p < 4 {
            if p + 1 < 4 && idx[p] == idx[p + 1] {
                p += 2;
            } else {
                odd[m] = idx[p];
                m += 1;
                p += 1;
            }
        }
        Some(match m {
            0 => 1.0,
            2 => self.c.get(odd[0], odd[1]),
            _ => t[quad.get(odd[0], odd[1], odd[2], odd[3])],
        })
    }

    pub fn four_point_packed(&self) -> Option<&[f64]> {
        self.four_point.as_deref()
    }
}

/// Accumulators for one contiguous range of Gray blocks.
struct Partial {
    log_ref: f64,
    z: Compensated,
    low_weight: Vec<Compensated>,
    high_pair: Vec<Compensated>,
    high_mean: Vec<Compensated>,
    cross: Vec<Compensated>,
    four: Option<Vec<Compensated>>,
}

impl Partial {
    fn new(n: usize, b: usize, quad_len: Option<usize>) -> Self {
        let h = n - b;
        Self {
            log_ref: f64::NEG_INFINITY,
            z: Compensated::default(),
            low_weight: vec![Compensated::default(); 1 << b],
            high_pair: vec![Compensated::default(); h * h],
            high_mean: vec![Compensated::default(); h],
            cross: vec![Compensated::default(); h * b],
            four: quad_len.map(|len| vec![Compensated::default(); len]),
        }
    }

    fn scale(&mut self, s: f64) {
        let all = std::iter::once(&mut self.z)
            .chain(self.low_weight.iter_mut())
            .chain(self.high_pair.iter_mut())
            .chain(self.high_mean.iter_mut())
            .chain(self.cross.iter_mut())
            .chain(self.four.iter_mut().flatten());
        for acc in all {
            acc.scale(s);
        }
    }

    fn absorb(&mut self, mut other: Partial) {
        if other.log_ref > self.log_ref {
            if self.log_ref.is_finite() {
                self.scale((self.log_ref - other.log_ref).exp());
            }
            self.log_ref = other.log_ref;
        } else if other.log_ref.is_finite() {
            other.scale((other.log_ref - self.log_ref).exp());
        }
        fn add_into(dst: &mut [Compensated], src: &[Compensated]) {
            for (d, s) in dst.iter_mut().zip(src) {
                d.add(s.value());
            }
        }
        self.z.add(other.z.value());
        add_into(&mut self.low_weight, &other.low_weight);
        add_into(&mut self.high_pair, &other.high_pair);
        add_into(&mut self.high_mean, &other.high_mean);
        add_into(&mut self.cross, &other.cross);
        if let (Some(d), Some(s)) = (self.four.as_mut(), other.four.as_ref()) {
            add_into(d, s);
        }
    }
}

fn walk_blocks(
    c: &Couplings,
    beta: f64,
    b: usize,
    blocks: std::ops::Range<u64>,
    quad: Option<&QuadIndex>,
) -> Result<Partial> {
    let n = c.n();
    let h = n - b;
    let block_len = 1u64 << b;
    let low_mask = block_len - 1;
    let mut acc = Partial::new(n, b, quad.map(|q| q.len));
    let mut walk = GrayWalk::new_at(c, beta, blocks.start * block_len);
    let mut u = vec![0.0f64; b];
    let mut spin_f = vec![0.0f64; n];
    let mut four_block = quad.map(|q| vec![0.0f64; q.len]);
    let mut first = true;

    for _block in blocks {
        let mut wsum = 0.0;
        u.iter_mut().for_each(|x| *x = 0.0);
        if let Some(t) = four_block.as_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        for _ in 0..block_len {
            if first {
                first = false;
            } else {
                walk.step();
            }
            let lw = walk.log_weight();
            if !lw.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-weight {lw} at Gray index {}",
                    walk.index()
                )));
            }
            if lw > acc.log_ref {
                // New running maximum: rebase everything accumulated so far.
                if acc.log_ref.is_finite() {
                    let s = (acc.log_ref - lw).exp();
                    acc.scale(s);
                    wsum *= s;
                    u.iter_mut().for_each(|x| *x *= s);
                    if let Some(t) = four_block.as_mut() {
                        t.iter_mut().for_each(|x| *x *= s);
                    }
                }
                acc.log_ref = lw;
            }
            let w = (lw - acc.log_ref).exp();
            wsum += w;
            acc.low_weight[(gray(walk.index()) & low_mask) as usize].add(w);
            let spins = walk.spins();
            for (uj, &s) in u.iter_mut().zip(&spins[..b]) {
                *uj += w * f64::from(s);
            }
            if let Some(t) = four_block.as_mut() {
                for (f, &s) in spin_f.iter_mut().zip(spins) {
                    *f = f64::from(s);
                }
                accumulate_four(t, &spin_f, w);
            }
        }
        // High spins are constant over the block.
        let spins = walk.spins();
        acc.z.add(wsum);
        for i in 0..h {
            let si = f64::from(spins[b + i]);
            acc.high_mean[i].add(si * wsum);
            for j in i..h {
                let sj = f64::from(spins[b + j]);
                acc.high_pair[i * h + j].add(si * sj * wsum);
            }
            for (j, &uj) in u.iter().enumerate() {
                acc.cross[i * b + j].add(si * uj);
            }
        }
        if let (Some(dst), Some(src)) = (acc.four.as_mut(), four_block.as_ref()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                d.add(s);
            }
        }
    }
    Ok(acc)
}

#[inline]
fn accumulate_four(t: &mut [f64], s: &[f64], w: f64) {
    let n = s.len();
    let mut r = 0;
    for i in 0..n {
        let a = w * s[i];
        for j in (i + 1)..n {
            let ab = a * s[j];
            for k in (j + 1)..n {
                let abc = ab * s[k];
                for &sl in &s[(k + 1)..] {
                    t[r] += abc * sl;
                    r += 1;
                }
            }
        }
    }
}

/// Exact summary with the default caps.
pub fn exact_summary(c: &Couplings, beta: f64, want_four_point: bool) -> Result<ExactSummary> {
    exact_summary_with(c, beta, want_four_point, &ExactOptions::default())
}

pub fn exact_summary_with(
    c: &Couplings,
    beta: f64,
    want_four_point: bool,
    opts: &ExactOptions,
) -> Result<ExactSummary> {
    let n = c.n();
    let cap = if want_four_point {
        opts.cap.min(opts.four_point_cap)
    } else {
        opts.cap
    };
    if n > cap {
        return Err(Error::AboveCap { n, cap });
    }
    if !beta.is_finite() {
        return Err(Error::NonFinite(format!("beta = {beta}")));
    }
    let b = n.min(LOW_BITS);
    let h = n - b;
    let quad = want_four_point.then(|| QuadIndex::new(n));

    // Fixed chunking (depends on n only) keeps results independent of the
    // thread count.
    let blocks = 1u64 << h;
    let chunks = 1u64 << h.min(4);
    let per = blocks / chunks;
    let partials: Vec<Result<Partial>> = (0..chunks)
        .into_par_iter()
        .map(|ch| walk_blocks(c, beta, b, ch * per..(ch + 1) * per, quad.as_ref()))
        .collect();
    let mut total: Option<Partial> = None;
    for p in partials {
        let p = p?;
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => t.absorb(p),
        }
    }
    let total = total.expect("at least one chunk");

    let z = total.z.value();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::NonFinite(format!("partition sum {z}")));
    }
    let log_z = total.log_ref + z.ln();

    let low_spin = |x: usize, j: usize| if (x >> j) & 1 == 1 { -1.0 } else { 1.0 };
    let mut cmat = SymMatrix::identity(n);
    let mut magnetization = vec![0.0; n];
    for j in 0..b {
        let mut m = Compensated::default();
        for (x, w) in total.low_weight.iter().enumerate() {
            m.add(low_spin(x, j) * w.value());
        }
        magnetization[j] = m.value() / z;
        for k in (j + 1)..b {
            let mut acc = Compensated::default();
            for (x, w) in total.low_weight.iter().enumerate() {
                acc.add(low_spin(x, j) * low_spin(x, k) * w.value());
            }
            cmat.set(j, k, acc.value() / z);
        }
    }
    for i in 0..h {
        magnetization[b + i] = total.high_mean[i].value() / z;
        for j in (i + 1)..h {
            cmat.set(b + i, b + j, total.high_pair[i * h + j].value() / z);
        }
        for j in 0..b {
            cmat.set(b + i, j, total.cross[i * b + j].value() / z);
        }
    }
    let four_point = total
        .four
        .map(|t| t.iter().map(|v| v.value() / z).collect::<Vec<f64>>());

    Ok(ExactSummary {
        n,
        beta,
        log_z,
        c: cmat,
        magnetization,
        four_point,
        quad,
    })
}

/// Replica-overlap moments of one instance.
///
/// `m4` and `m22` need the four-point function and are `None` when it is
/// unavailable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMoments {
    /// `<R12^2>`
    pub m2: f64,
    /// `<R12 R13 R23>`
    pub m3: f64,
    /// `<R12^4>`
    pub m4: Option<f64>,
    /// `<R12^2 R23^2>`
    pub m22: Option<f64>,
    /// `<R12 R23 R34 R14>`
    pub m_cycle: f64,
    /// `<R12 R34 R1234>`
    pub m_multi: f64,
}

impl OverlapMoments {
    pub fn m4(&self) -> Result<f64> {
        self.m4.ok_or(Error::MissingFourPoint)
    }

    pub fn m22(&self) -> Result<f64> {
        self.m22.ok_or(Error::MissingFourPoint)
    }
}

/// Moments that depend on `C` only; `m4`/`m22` are left empty.
pub fn pair_moments(c: &SymMatrix) -> OverlapMoments {
    let n = c.n();
    let nf = n as f64;
    let c2 = c.mul(c).expect("square");
    let mut tr2 = Compensated::default();
    let mut tr3 = Compensated::default();
    let mut tr4 = Compensated::default();
    for i in 0..n {
        for j in 0..n {
            let cij = c.get(i, j);
            let c2ij = c2.get(i, j);
            tr2.add(cij * cij);
            tr3.add(c2ij * cij);
            tr4.add(c2ij * c2ij);
        }
    }
    let mut multi = Compensated::default();
    for k in 0..n {
        let col: f64 = (0..n).map(|i| c.get(i, k).powi(2)).sum();
        multi.add(col * col);
    }
    OverlapMoments {
        m2: tr2.value() / nf.powi(2),
        m3: tr3.value() / nf.powi(3),
        m4: None,
        m22: None,
        m_cycle: tr4.value() / nf.powi(4),
        m_multi: multi.value() / nf.powi(3),
    }
}

/// All six overlap moments from an exact summary carrying the four-point tensor.
pub fn overlap_moments_exact(s: &ExactSummary) -> Result<OverlapMoments> {
    if !s.has_four_point() {
        return Err(Error::MissingFourPoint);
    }
    let n = s.n;
    let nf = n as f64;
    let mut m4 = Compensated::default();
    let mut m22 = Compensated::default();
    for i in 0..n {
        for j in 0..n {
            let cij = s.c.get(i, j);
            for k in 0..n {
                for l in 0..n {
                    let t = s.four_point(i, j, k, l).expect("four-point present");
                    m4.add(t * t);
                    m22.add(cij * s.c.get(k, l) * t);
                }
            }
        }
    }
    Ok(OverlapMoments {
        m4: Some(m4.value() / nf.powi(4)),
        m22: Some(m22.value() / nf.powi(4)),
        ..pair_moments(&s.c)
    })
}

/// JSON form of an [`ExactSummary`]; `c` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSummaryExport {
    pub n: usize,
    pub beta: f64,
    pub log_z: f64,
    pub c: Vec<f64>,
    pub moments: OverlapMoments,
}

impl ExactSummary {
    pub fn export(&self) -> ExactSummaryExport {
        let moments = overlap_moments_exact(self).unwrap_or_else(|_| pair_moments(&self.c));
        ExactSummaryExport {
            n: self.n,
            beta: self.beta,
            log_z: self.log_z,
            c: self.c.as_slice().to_vec(),
            moments,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.export())?)
    }
}

/// Exact law of `R12` for two independent Gibbs draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapPmf {
    pub n: usize,
    /// `masses[d]` is the probability of `R12 = -1 + 2d/n`.
    pub masses: Vec<f64>,
}

impl OverlapPmf {
    pub fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.n as f64;
        self.masses
            .iter()
            .enumerate()
            .map(move |(d, &p)| (-1.0 + 2.0 * d as f64 / n, p))
    }

    pub fn moment(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.support().map(|(r, p)| f(r) * p).sum()
    }
}

/// Gibbs probabilities of all `2^n` states, indexed by spin bit pattern
/// (bit `k` set means spin `k` is `-1`).
pub fn state_probabilities(c: &Couplings, beta: f64, cap: usize) -> Result<Vec<f64>> {
    let n = c.n();
    if n > cap {
        return Err(Error::AboveCap { n, cap });
    }
    let count = 1u64 << n;
    let mut logw = vec![0.0; count as usize];
    let mut walk = GrayWalk::new_at(c, beta, 0);
    for s in 0..count {
        if s > 0 {
            walk.step();
        }
        let lw = walk.log_weight();
        if !lw.is_finite() {
            return Err(Error::NonFinite(format!("log-weight {lw}")));
        }
        logw[gray(s) as usize] = lw;
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = Compensated::default();
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        z.add(*w);
    }
    let z = z.value();
    logw.iter_mut().for_each(|w| *w /= z);
    Ok(logw)
}

pub fn overlap_distribution_small(c: &Couplings, beta: f64) -> Result<OverlapPmf> {
    let n = c.n();
    let p = state_probabilities(c, beta, DISTRIBUTION_CAP)?;
    let mut masses = vec![Compensated::default(); n + 1];
    for (s, &ps) in p.iter().enumerate() {
        masses[n].add(ps * ps);
        for (t, &pt) in p.iter().enumerate().skip(s + 1) {
            let differ = (s ^ t).count_ones() as usize;
            // R12 = 1 - 2 differ / n  =>  d = n - differ
            masses[n - differ].add(2.0 * ps * pt);
        }
    }
    Ok(OverlapPmf {
        n,
        masses: masses.iter().map(Compensated::value).collect(),
    })
}

/// Exact law of `R12` through the self-correlation `q(x) = sum_s p(s) p(s ^ x)`,
/// computed with a Walsh-Hadamard transform in `O(n 2^n)`.
pub fn overlap_distribution(c: &Couplings, beta: f64) -> Result<OverlapPmf> {
    let n = c.n();
    let mut q = state_probabilities(c, beta, OVERLAP_CAP)?;
    walsh_hadamard(&mut q);
    q.iter_mut().for_each(|v| *v *= *v);
    walsh_hadamard(&mut q);
    let scale = 1.0 / q.len() as f64;
    let mut masses = vec![Compensated::default(); n + 1];
    for (x, &v) in q.iter().enumerate() {
        masses[n - x.count_ones() as usize].add(v * scale);
    }
    Ok(OverlapPmf {
        n,
        masses: masses.iter().map(|m| m.value().max(0.0)).collect(),
    })
}

fn walsh_hadamard(v: &mut [f64]) {
    let mut h = 1;
    while h < v.len() {
        for block in v.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::disorder::sample_couplings;
    use crate::spectral::{jacobi_eigen, operator_norm, DEFAULT_TOL};

    /// Direct enumeration without Gray code, blocking or rescaling.
    fn naive(c: &Couplings, beta: f64) -> (f64, Vec<Vec<f64>>) {
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
        let mut cm = vec![vec![0.0; n]; n];
        for (s, wi) in states.iter().zip(&w) {
            for i in 0..n {
                for j in 0..n {
                    cm[i][j] += wi * f64::from(s[i] * s[j]) / z;
                }
            }
        }
        (max + z.ln(), cm)
    }

    #[test]
    fn log_weight_examples() {
        let c1 = sample_couplings(1, 4).unwrap();
        assert_eq!(log_weight(&c1, 2.0, &[1]).unwrap(), 0.0);
        assert_eq!(log_weight(&c1, 2.0, &[-1]).unwrap(), 0.0);
        let c = Couplings::from_pairs(2, &[(0, 1, 1.0)]).unwrap();
        assert!((log_weight(&c, 0.5, &[1, 1]).unwrap() - 0.35355).abs() < 1e-5);
        assert!((log_weight(&c, 0.5, &[1, -1]).unwrap() + 0.35355).abs() < 1e-5);
        assert!(matches!(
            log_weight(&c, 0.5, &[1, 0]),
            Err(Error::MalformedSpin { index: 1, value: 0 })
        ));
        assert!(log_weight(&c, 0.5, &[1]).is_err());
    }

    #[test]
    fn two_spin_closed_form() {
        let c = Couplings::from_pairs(2, &[(0, 1, 1.0)]).unwrap();
        let s = exact_summary(&c, 0.5, true).unwrap();
        let x = 0.5 / 2f64.sqrt();
        assert!((s.c.get(0, 1) - x.tanh()).abs() < 1e-15);
        assert!((s.c.get(0, 1) - 0.33952).abs() < 1e-5);
        let lz = (2.0 * x.exp() + 2.0 * (-x).exp()).ln();
        assert!((s.log_z - lz).abs() < 1e-14);
        let m = overlap_moments_exact(&s).unwrap();
        assert!((m.m2 - (1.0 + x.tanh().powi(2)) / 2.0).abs() < 1e-15);
        assert!((m.m2 - 0.55764).abs() < 1e-5);
    }

    #[test]
    fn single_spin() {
        let c = sample_couplings(1, 0).unwrap();
        let s = exact_summary(&c, 3.0, true).unwrap();
        assert!((s.log_z - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.c.get(0, 0), 1.0);
    }

    #[test]
    fn infinite_temperature() {
        for n in [3, 6, 13] {
            let c = sample_couplings(n, 9).unwrap();
            let s = exact_summary(&c, 0.0, n <= FOUR_POINT_CAP).unwrap();
            assert!((s.log_z - n as f64 * 2f64.ln()).abs() < 1e-12);
            for i in 0..n {
                for j in 0..n {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((s.c.get(i, j) - e).abs() < 1e-14);
                }
            }
            if let Some(t) = s.four_point_packed() {
                assert!(t.iter().all(|v| v.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn matches_naive_enumeration() {
        for (n, beta) in [(5, 0.7), (11, 1.3), (13, 2.5)] {
            let c = sample_couplings(n, n as u64).unwrap();
            let s = exact_summary(&c, beta, false).unwrap();
            let (lz, cm) = naive(&c, beta);
            assert!((s.log_z - lz).abs() < 1e-11, "n={n}");
            for i in 0..n {
                for j in 0..n {
                    assert!((s.c.get(i, j) - cm[i][j]).abs() < 1e-12, "n={n} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn caps_enforced() {
        let c = sample_couplings(15, 1).unwrap();
        assert!(matches!(
            exact_summary(&c, 0.5, true),
            Err(Error::AboveCap { n: 15, cap: 14 })
        ));
        let c = sample_couplings(25, 1).unwrap();
        assert!(matches!(
            exact_summary(&c, 0.5, false),
            Err(Error::AboveCap { .. })
        ));
        let c = sample_couplings(14, 1).unwrap();
        assert!(overlap_distribution_small(&c, 0.5).is_err());
    }

    #[test]
    fn nonfinite_beta_flagged() {
        let c = sample_couplings(4, 1).unwrap();
        assert!(matches!(
            exact_summary(&c, f64::NAN, false),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            exact_summary(&c, f64::INFINITY, false),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn large_beta_does_not_overflow() {
        let c = sample_couplings(12, 5).unwrap();
        let s = exact_summary(&c, 400.0, false).unwrap();
        assert!(s.log_z.is_finite());
        // Two ground states related by a global flip dominate.
        for i in 0..12 {
            for j in 0..12 {
                assert!((s.c.get(i, j).abs() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn incremental_weight_matches_scratch() {
        let n = 16;
        let c = sample_couplings(n, 77).unwrap();
        let beta = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut targets: Vec<u64> = (0..100).map(|_| rng.gen_range(0..1u64 << n)).collect();
        targets.sort_unstable();
        let mut walk = GrayWalk::new_at(&c, beta, 0);
        for t in targets {
            while walk.index() < t {
                walk.step();
            }
            let scratch = log_weight(&c, beta, walk.spins()).unwrap();
            assert!((walk.log_weight() - scratch).abs() <= 1e-9 * n as f64);
        }
    }

    #[test]
    fn zero_field_symmetry_and_psd() {
        for (n, beta) in [(9, 0.5), (14, 1.2), (18, 0.9)] {
            let c = sample_couplings(n, 1000 + n as u64).unwrap();
            let s = exact_summary(&c, beta, false).unwrap();
            assert!(s.magnetization.iter().all(|m| m.abs() <= 1e-12));
            let spec = jacobi_eigen(&s.c, DEFAULT_TOL).unwrap();
            assert!(spec.min() >= -1e-10);
            assert!((spec.max() - operator_norm(&s.c)).abs() <= 1e-9);
            for i in 0..n {
                assert_eq!(s.c.get(i, i), 1.0);
                for j in 0..n {
                    assert!(s.c.get(i, j).abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn four_point_collapse_and_symmetry() {
        let n = 7;
        let c = sample_couplings(n, 3).unwrap();
        let beta = 0.9;
        let s = exact_summary(&c, beta, true).unwrap();
        let p = state_probabilities(&c, beta, 13).unwrap();
        let spin = |x: usize, k: usize| if (x >> k) & 1 == 1 { -1.0 } else { 1.0 };
        let brute = |i: usize, j: usize, k: usize, l: usize| -> f64 {
            p.iter()
                .enumerate()
                .map(|(x, px)| px * spin(x, i) * spin(x, j) * spin(x, k) * spin(x, l))
                .sum()
        };
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let t = s.four_point(i, j, k, l).unwrap();
                        assert!((t - brute(i, j, k, l)).abs() <= 1e-12);
                        assert_eq!(t, s.four_point(l, k, j, i).unwrap());
                        assert_eq!(t, s.four_point(j, i, l, k).unwrap());
                    }
                }
                assert_eq!(s.four_point(i, i, j, j).unwrap(), 1.0);
            }
            assert_eq!(s.four_point(i, i, i, i).unwrap(), 1.0);
            assert_eq!(s.four_point(i, i, 1, 2).unwrap(), s.c.get(1, 2));
        }
    }

    #[test]
    fn overlap_pmf_properties() {
        let c = Couplings::from_pairs(2, &[]).unwrap();
        let pmf = overlap_distribution_small(&c, 0.0).unwrap();
        assert!((pmf.masses[0] - 0.25).abs() < 1e-15);
        assert!((pmf.masses[1] - 0.5).abs() < 1e-15);
        assert!((pmf.masses[2] - 0.25).abs() < 1e-15);

        for (n, beta) in [(5, 0.4), (9, 1.5)] {
            let c = sample_couplings(n, 21).unwrap();
            let pmf = overlap_distribution_small(&c, beta).unwrap();
            assert!((pmf.masses.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for d in 0..=n {
                assert!((pmf.masses[d] - pmf.masses[n - d]).abs() <= 1e-12);
            }
            let m2 = pair_moments(&exact_summary(&c, beta, false).unwrap().c).m2;
            assert!((pmf.moment(|r| r * r) - m2).abs() <= 1e-10);
        }
    }

    #[test]
    fn missing_four_point_reported() {
        let c = sample_couplings(5, 1).unwrap();
        let s = exact_summary(&c, 0.5, false).unwrap();
        assert!(matches!(
            overlap_moments_exact(&s),
            Err(Error::MissingFourPoint)
        ));
        assert!(pair_moments(&s.c).m4().is_err());
    }

    #[test]
    fn export_round_trip() {
        let c = sample_couplings(5, 3).unwrap();
        let s = exact_summary(&c, 0.8, true).unwrap();
        let e: ExactSummaryExport = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(e, s.export());
        assert_eq!(e.c.len(), 25);
        assert_eq!(e.c[1], s.c.get(0, 1));
        assert!(e.moments.m4.is_some());
        let plain = exact_summary(&c, 0.8, false).unwrap().export();
        assert!(plain.moments.m4.is_none());
        assert_eq!(plain.moments.m2, e.moments.m2);
    }

    #[test]
    fn transform_overlap_law_matches_double_sum() {
        for (n, seed, beta) in [(1, 1, 0.8), (4, 2, 0.5), (7, 3, 1.2), (10, 4, 2.0)] {
            let c = sample_couplings(n, seed).unwrap();
            let a = overlap_distribution_small(&c, beta).unwrap();
            let b = overlap_distribution(&c, beta).unwrap();
            for (x, y) in a.masses.iter().zip(&b.masses) {
                assert!((x - y).abs() < 1e-13, "n={n}: {x} vs {y}");
            }
        }
        let c = sample_couplings(16, 5).unwrap();
        let pmf = overlap_distribution(&c, 0.9).unwrap();
        assert!((pmf.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s = exact_summary(&c, 0.9, false).unwrap();
        let m2 = pair_moments(&s.c).m2;
        assert!((pmf.moment(|r| r * r) - m2).abs() < 1e-12);
        assert!(matches!(
            overlap_distribution(&sample_couplings(23, 0).unwrap(), 0.5),
            Err(Error::AboveCap { .. })
        ));
    }
}
