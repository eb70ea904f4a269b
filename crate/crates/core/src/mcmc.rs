//! Metropolis single-spin-flip sampling with optional replica exchange.
//!
//! A run holds `replicas` independent copies of the system at every rung of
//! an inverse-temperature ladder. Plain runs are the one-rung case. Estimates
//! come from the target rung only: two-point functions from time averages
//! pooled across replicas, overlap moments from same-time products of
//! distinct replicas. Error bars use non-overlapping batch means.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disorder::Couplings;
use crate::error::{Error, Result};
use crate::gibbs::{reduced_energy, OverlapMoments};
use crate::matrix::SymMatrix;
use crate::stats::derive_seed;

pub const DEFAULT_BATCHES: usize = 20;
pub const DEFAULT_REPLICAS: usize = 4;
const SWAP_RATE_BAND: (f64, f64) = (0.05, 0.95);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub sweeps: usize,
    pub burn_in_sweeps: usize,
    /// Record every `thin`-th sweep after burn-in.
    pub thin: usize,
    pub replicas: usize,
    /// Ascending inverse temperatures for replica exchange.
    #[serde(default)]
    pub ladder: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Keep the raw pairwise-overlap series for [`McmcEstimate::overlap_series_csv`].
    #[serde(default)]
    pub keep_overlap_series: bool,
}

fn default_batches() -> usize {
    DEFAULT_BATCHES
}

impl ChainConfig {
    /// Defaults: 10% burn-in, no thinning, four replicas, 20 batches.
    pub fn new(sweeps: usize, seed: u64) -> Self {
        Self {
            sweeps,
            burn_in_sweeps: sweeps / 10,
            thin: 1,
            replicas: DEFAULT_REPLICAS,
            ladder: None,
            seed,
            batches: DEFAULT_BATCHES,
            keep_overlap_series: false,
        }
    }

    pub fn with_ladder(mut self, ladder: Vec<f64>) -> Self {
        self.ladder = Some(ladder);
        self
    }

    /// Number of recorded sweeps before truncation to whole batches.
    pub fn recorded_samples(&self) -> usize {
        let after = self.sweeps.saturating_sub(self.burn_in_sweeps);
        after.div_ceil(self.thin.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidChain(m));
        if self.sweeps == 0 {
            return bad("sweeps must be positive".into());
        }
        if self.burn_in_sweeps >= self.sweeps {
            return bad(format!(
                "burn-in {} must be below sweeps {}",
                self.burn_in_sweeps, self.sweeps
            ));
        }
        if self.thin == 0 {
            return bad("thin must be positive".into());
        }
        if self.replicas < 2 {
            return bad(format!("need at least 2 replicas, got {}", self.replicas));
        }
        if self.batches < 10 {
            return bad(format!("need at least 10 batches, got {}", self.batches));
        }
        if self.recorded_samples() < 10 * self.batches {
            return bad(format!(
                "{} recorded samples cannot fill {} batches of at least 10",
                self.recorded_samples(),
                self.batches
            ));
        }
        if let Some(ladder) = &self.ladder {
            if ladder.is_empty() {
                return bad("empty ladder".into());
            }
            if ladder.iter().any(|b| !b.is_finite() || *b < 0.0) {
                return bad("ladder entries must be finite and nonnegative".into());
            }
            if ladder.windows(2).any(|w| w[0] >= w[1]) {
                return bad("ladder must be strictly ascending".into());
            }
        }
        Ok(())
    }
}

/// Point estimate with batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn z_against(&self, exact: f64) -> f64 {
        if self.stderr > 0.0 {
            (self.value - exact) / self.stderr
        } else if self.value == exact {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Overlap-moment estimates; entries needing more replicas than were run are
/// `None`. `m22` and `m_multi` are noisy and meant for exploration only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub m2: Estimate,
    pub m4: Estimate,
    pub m3: Option<Estimate>,
    pub m22: Option<Estimate>,
    pub m_cycle: Option<Estimate>,
    pub m_multi: Option<Estimate>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McmcEstimate {
    pub beta: f64,
    pub c_hat: SymMatrix,
    pub c_stderr: SymMatrix,
    pub moments: MomentEstimates,
    /// Metropolis acceptance at the target rung.
    pub acceptance_rate: f64,
    /// Swap acceptance per adjacent rung pair; empty without a ladder.
    pub swap_acceptance: Vec<f64>,
    pub samples_used: usize,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_series: Option<OverlapSeries>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapSeries {
    pub pairs: Vec<(usize, usize)>,
    /// One row per recorded sample, one column per replica pair.
    pub rows: Vec<Vec<f64>>,
}

impl McmcEstimate {
    /// Point estimates shaped like the exact moments (requires four replicas).
    pub fn moments_hat(&self) -> Option<OverlapMoments> {
        let m = &self.moments;
        Some(OverlapMoments {
            m2: m.m2.value,
            m3: m.m3?.value,
            m4: Some(m.m4.value),
            m22: m.m22.map(|e| e.value),
            m_cycle: m.m_cycle?.value,
            m_multi: m.m_multi?.value,
        })
    }

    /// CSV with header `R_a_b,...` and one line per recorded sample.
    pub fn overlap_series_csv(&self) -> Option<String> {
        let series = self.overlap_series.as_ref()?;
        let mut out = series
            .pairs
            .iter()
            .map(|(a, b)| format!("R_{a}_{b}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in &series.rows {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", line.join(",")).expect("write to String");
        }
        Some(out)
    }
}

/// Standard error of the mean from `batch_count` equal batches; any
/// remainder at the tail is dropped.
pub fn batch_means_stderr(series: &[f64], batch_count: usize) -> Result<f64> {
    if batch_count < 10 {
        return Err(Error::InvalidChain(format!(
            "need at least 10 batches, got {batch_count}"
        )));
    }
    if series.len() < 10 * batch_count {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            batches: batch_count,
        });
    }
    let size = series.len() / batch_count;
    let means: Vec<f64> = series
        .chunks_exact(size)
        .take(batch_count)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    Ok(stderr_of_means(&means))
}

fn stderr_of_means(means: &[f64]) -> f64 {
    let k = means.len() as f64;
    let mean = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var / k).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One Metropolis chain with cached local fields.
#[derive(Clone, Debug)]
struct Chain {
    spins: Vec<i8>,
    fields: Vec<f64>,
    /// `n^{-1/2} sum_{i<j} g_ij sigma_i sigma_j`; the log-weight is `beta` times this.
    energy: f64,
    rng: ChaCha8Rng,
    accepted: u64,
    proposed: u64,
}

impl Chain {
    fn new(c: &Couplings, seed: u64) -> Self {
        let n = c.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spins: Vec<i8> = (0..n)
            .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
            .collect();
        let inv = 1.0 / (n as f64).sqrt();
        let fields = (0..n)
            .map(|k| {
                (0..n)
                    .filter(|&j| j != k)
                    .map(|j| c.get(k, j) * f64::from(spins[j]))
                    .sum::<f64>()
                    * inv
            })
            .collect();
        let energy = reduced_energy(c, &spins);
        Self {
            spins,
            fields,
            energy,
            rng,
            accepted: 0,
            proposed: 0,
        }
    }

    fn sweep(&mut self, c: &Couplings, beta: f64, inv_sqrt_n: f64) -> Result<()> {
        let n = self.spins.len();
        for _ in 0..n {
            let k = self.rng.gen_range(0..n);
            let s = f64::from(self.spins[k]);
            let delta_energy = -2.0 * s * self.fields[k];
            let delta = beta * delta_energy;
            if !delta.is_finite() {
                return Err(Error::NonFinite(format!("Metropolis log-ratio {delta}")));
            }
            self.proposed += 1;
            if delta >= 0.0 || self.rng.gen::<f64>() < delta.exp() {
                self.accepted += 1;
                self.spins[k] = -self.spins[k];
                self.energy += delta_energy;
                let shift = -2.0 * s * inv_sqrt_n;
                for (j, (h, g)) in self.fields.iter_mut().zip(c.matrix().row(k)).enumerate() {
                    if j != k {
                        *h += shift * g;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Time series accumulated at the target rung.
struct Recorder {
    n: usize,
    replicas: usize,
    batch_size: usize,
    batches: usize,
    recorded: usize,
    pair_sums: Vec<f64>,
    pair_batch: Vec<Vec<f64>>,
    m2: Vec<f64>,
    m4: Vec<f64>,
    m3: Vec<f64>,
    m22: Vec<f64>,
    m_cycle: Vec<f64>,
    m_multi: Vec<f64>,
    series: Option<OverlapSeries>,
    overlaps: Vec<f64>,
}

impl Recorder {
    fn new(n: usize, replicas: usize, batches: usize, samples: usize, keep: bool) -> Self {
        let batch_size = samples / batches;
        let pairs = n * (n - 1) / 2;
        let replica_pairs = (0..replicas)
            .flat_map(|a| ((a + 1)..replicas).map(move |b| (a, b)))
            .collect();
        Self {
            n,
            replicas,
            batch_size,
            batches,
            recorded: 0,
            pair_sums: vec![0.0; pairs],
            pair_batch: vec![vec![0.0; pairs]; batches],
            m2: Vec::new(),
            m4: Vec::new(),
            m3: Vec::new(),
            m22: Vec::new(),
            m_cycle: Vec::new(),
            m_multi: Vec::new(),
            series: keep.then(|| OverlapSeries {
                pairs: replica_pairs,
                rows: Vec::new(),
            }),
            overlaps: vec![0.0; replicas * replicas],
        }
    }

    fn full(&self) -> bool {
        self.recorded == self.batch_size * self.batches
    }

    fn record(&mut self, chains: &[&Chain]) {
        let n = self.n;
        let r = self.replicas;
        let batch = self.recorded / self.batch_size;
        self.recorded += 1;

        let inv_r = 1.0 / r as f64;
        let mut p = 0;
        let dst = &mut self.pair_batch[batch];
        for i in 0..n {
            for j in (i + 1)..n {
                let x: i32 = chains
                    .iter()
                    .map(|ch| i32::from(ch.spins[i] * ch.spins[j]))
                    .sum();
                dst[p] += f64::from(x) * inv_r;
                p += 1;
            }
        }

        let inv_n = 1.0 / n as f64;
        let q = &mut self.overlaps;
        for a in 0..r {
            for b in (a + 1)..r {
                let dot: i32 = chains[a]
                    .spins
                    .iter()
                    .zip(&chains[b].spins)
                    .map(|(x, y)| i32::from(x * y))
                    .sum();
                let v = f64::from(dot) * inv_n;
                q[a * r + b] = v;
                q[b * r + a] = v;
            }
        }
        let ov = |a: usize, b: usize| q[a * r + b];

        let pairs = (r * (r - 1) / 2) as f64;
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        for a in 0..r {
            for b in (a + 1)..r {
                let v = ov(a, b) * ov(a, b);
                s2 += v;
                s4 += v * v;
            }
        }
        self.m2.push(s2 / pairs);
        self.m4.push(s4 / pairs);
        if let Some(series) = self.series.as_mut() {
            series
                .rows
                .push(series.pairs.iter().map(|&(a, b)| ov(a, b)).collect());
        }

        if r >= 3 {
            let mut s3 = 0.0;
            let mut c3 = 0.0;
            let mut s22 = 0.0;
            let mut c22 = 0.0;
            for a in 0..r {
                for b in 0..r {
                    for c in 0..r {
                        if a == b || b == c || a == c {
                            continue;
                        }
                        s22 += ov(a, b).powi(2) * ov(b, c).powi(2);
                        c22 += 1.0;
                        if a < b && b < c {
                            s3 += ov(a, b) * ov(b, c) * ov(a, c);
                            c3 += 1.0;
                        }
                    }
                }
            }
            self.m3.push(s3 / c3);
            self.m22.push(s22 / c22);
        }
        if r >= 4 {
            let mut sc = 0.0;
            let mut sm = 0.0;
            let mut cnt = 0.0;
            for a in 0..r {
                for b in 0..r {
                    for c in 0..r {
                        for d in 0..r {
                            if a == b || a == c || a == d || b == c || b == d || c == d {
                                continue;
                            }
                            sc += ov(a, b) * ov(b, c) * ov(c, d) * ov(d, a);
                            let multi: i32 = (0..n)
                                .map(|i| {
                                    i32::from(
                                        chains[a].spins[i]
                                            * chains[b].spins[i]
                                            * chains[c].spins[i]
                                            * chains[d].spins[i],
                                    )
                                })
                                .sum();
                            sm += ov(a, b) * ov(c, d) * f64::from(multi) * inv_n;
                            cnt += 1.0;
                        }
                    }
                }
            }
            self.m_cycle.push(sc / cnt);
            self.m_multi.push(sm / cnt);
        }
    }

    fn scalar(&self, series: &[f64]) -> Result<Option<Estimate>> {
        if series.is_empty() {
            return Ok(None);
        }
        Ok(Some(Estimate {
            value: mean(series),
            stderr: batch_means_stderr(series, self.batches)?,
        }))
    }

    fn finish(mut self) -> Result<(SymMatrix, SymMatrix, MomentEstimates, Option<OverlapSeries>)> {
        let n = self.n;
        let used = self.recorded as f64;
        let bs = self.batch_size as f64;
        let mut c_hat = SymMatrix::identity(n);
        let mut c_err = SymMatrix::zeros(n);
        let mut means = vec![0.0; self.batches];
        let mut p = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                for (m, batch) in means.iter_mut().zip(&self.pair_batch) {
                    *m = batch[p] / bs;
                }
                self.pair_sums[p] = self.pair_batch.iter().map(|b| b[p]).sum();
                c_hat.set(i, j, self.pair_sums[p] / used);
                c_err.set(i, j, stderr_of_means(&means));
                p += 1;
            }
        }
        let moments = MomentEstimates {
            m2: self.scalar(&self.m2)?.expect("m2 series"),
            m4: self.scalar(&self.m4)?.expect("m4 series"),
            m3: self.scalar(&self.m3)?,
            m22: self.scalar(&self.m22)?,
            m_cycle: self.scalar(&self.m_cycle)?,
            m_multi: self.scalar(&self.m_multi)?,
        };
        Ok((c_hat, c_err, moments, self.series))
    }
}

/// Plain Metropolis at `beta`.
pub fn run_chain(c: &Couplings, beta: f64, cfg: &ChainConfig) -> Result<McmcEstimate> {
    run_ladder(c, &[beta], 0, cfg)
}

/// Replica exchange over `cfg.ladder`, reporting the rung equal to `beta`.
pub fn run_tempered(c: &Couplings, beta: f64, cfg: &ChainConfig) -> Result<McmcEstimate> {
    let ladder = cfg
        .ladder
        .as_ref()
        .ok_or_else(|| Error::InvalidChain("tempering requires a ladder".into()))?;
    let target = ladder
        .iter()
        .position(|&b| (b - beta).abs() <= 1e-12 * beta.abs().max(1.0))
        .ok_or_else(|| Error::InvalidChain(format!("ladder {ladder:?} does not contain {beta}")))?;
    run_ladder(c, ladder, target, cfg)
}

fn run_ladder(
    c: &Couplings,
    ladder: &[f64],
    target: usize,
    cfg: &ChainConfig,
) -> Result<McmcEstimate> {
    cfg.validate()?;
    let n = c.n();
    if n < 2 {
        return Err(Error::InvalidChain(format!("need n >= 2, got {n}")));
    }
    if let Some(b) = ladder.iter().find(|b| !b.is_finite() || **b < 0.0) {
        return Err(Error::InvalidChain(format!("inverse temperature {b}")));
    }
    let rungs = ladder.len();
    let r = cfg.replicas;
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();

    // chains[t * r + a]: rung t, replica a.
    let mut chains: Vec<Chain> = (0..rungs)
        .flat_map(|t| (0..r).map(move |a| (t, a)))
        .map(|(t, a)| {
            Chain::new(
                c,
                derive_seed(cfg.seed, &[("replica", a as u64), ("rung", t as u64)]),
            )
        })
        .collect();
    let mut swap_rngs: Vec<ChaCha8Rng> = (0..r)
        .map(|a| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[("swap", a as u64)])))
        .collect();
    let mut swap_tries = vec![0u64; rungs.saturating_sub(1)];
    let mut swap_accepts = vec![0u64; rungs.saturating_sub(1)];

    let samples = cfg.recorded_samples();
    let mut rec = Recorder::new(n, r, cfg.batches, samples, cfg.keep_overlap_series);
    let mut target_accepted = 0u64;
    let mut target_proposed = 0u64;

    for sweep in 0..cfg.sweeps {
        if sweep == cfg.burn_in_sweeps {
            for ch in &chains[target * r..(target + 1) * r] {
                target_accepted += ch.accepted;
                target_proposed += ch.proposed;
            }
        }
        for (idx, chain) in chains.iter_mut().enumerate() {
            chain.sweep(c, ladder[idx / r], inv_sqrt_n)?;
        }
        for (a, rng) in swap_rngs.iter_mut().enumerate() {
            for t in 0..rungs.saturating_sub(1) {
                let (lo, hi) = (t * r + a, (t + 1) * r + a);
                let log_ratio =
                    (ladder[t] - ladder[t + 1]) * (chains[hi].energy - chains[lo].energy);
                if !log_ratio.is_finite() {
                    return Err(Error::NonFinite(format!("swap log-ratio {log_ratio}")));
                }
                swap_tries[t] += 1;
                if log_ratio >= 0.0 || rng.gen::<f64>() < log_ratio.exp() {
                    swap_accepts[t] += 1;
                    let (left, right) = chains.split_at_mut(hi);
                    let (x, y) = (&mut left[lo], &mut right[0]);
                    std::mem::swap(&mut x.spins, &mut y.spins);
                    std::mem::swap(&mut x.fields, &mut y.fields);
                    std::mem::swap(&mut x.energy, &mut y.energy);
                }
            }
        }
        if sweep >= cfg.burn_in_sweeps
            && (sweep - cfg.burn_in_sweeps).is_multiple_of(cfg.thin)
            && !rec.full()
        {
            let group: Vec<&Chain> = chains[target * r..(target + 1) * r].iter().collect();
            rec.record(&group);
        }
    }

    let (mut acc, mut prop) = (0u64, 0u64);
    for ch in &chains[target * r..(target + 1) * r] {
        acc += ch.accepted;
        prop += ch.proposed;
    }
    let acceptance_rate = (acc - target_accepted) as f64 / (prop - target_proposed).max(1) as f64;
    let swap_acceptance: Vec<f64> = swap_tries
        .iter()
        .zip(&swap_accepts)
        .map(|(&t, &a)| a as f64 / t.max(1) as f64)
        .collect();
    let warnings = swap_acceptance
        .iter()
        .enumerate()
        .filter(|(_, &rate)| rate <= SWAP_RATE_BAND.0 || rate >= SWAP_RATE_BAND.1)
        .map(|(t, rate)| {
            format!(
                "swap rate {rate:.3} between beta {} and {} outside ({}, {}); consider adjusting the ladder",
                ladder[t], ladder[t + 1], SWAP_RATE_BAND.0, SWAP_RATE_BAND.1
            )
        })
        .collect();

    let samples_used = rec.recorded;
    let (c_hat, c_stderr, moments, overlap_series) = rec.finish()?;
    Ok(McmcEstimate {
        beta: ladder[target],
        c_hat,
        c_stderr,
        moments,
        acceptance_rate,
        swap_acceptance,
        samples_used,
        warnings,
        overlap_series,
    })
}
