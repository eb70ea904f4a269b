//! Seed derivation, ensemble statistics and compensated summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// z-quantile used for the reported 95% intervals.
pub const Z95: f64 = 1.96;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a master seed with an ordered list of `(name, index)` labels.
///
/// The state starts at `splitmix64(master)`; each label folds in the FNV-1a
/// hash of its name and then its index, each followed by a SplitMix64
/// finalizer round. Label order matters.
pub fn derive_seed(master: u64, labels: &[(&str, u64)]) -> u64 {
    let mut state = splitmix64(master);
    for (name, index) in labels {
        state = splitmix64(state ^ fnv1a64(name.as_bytes()));
        state = splitmix64(state ^ *index);
    }
    state
}

/// Running mean and variance (Welford), mergeable with the parallel formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStat {
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    m2: f64,
}

impl EnsembleStat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut s = Self::new();
        for v in values {
            s.push(v);
        }
        s
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &EnsembleStat) -> EnsembleStat {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        EnsembleStat {
            count: self.count + other.count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    /// Merges a non-empty collection of partial statistics.
    pub fn merge_all<'a, I>(parts: I) -> Result<EnsembleStat>
    where
        I: IntoIterator<Item = &'a EnsembleStat>,
    {
        let mut it = parts.into_iter();
        let first = *it.next().ok_or(Error::EmptyEnsemble)?;
        Ok(it.fold(first, |acc, s| acc.merge(s)))
    }

    /// Unbiased sample variance; zero for fewer than two values.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn ci95(&self) -> (f64, f64) {
        let h = Z95 * self.stderr();
        (self.mean - h, self.mean + h)
    }
}

/// Kahan-Babuska (Neumaier) compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    #[inline]
    pub fn scale(&mut self, s: f64) {
        self.sum *= s;
        self.comp *= s;
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = Compensated::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_values_have_zero_variance() {
        let s = EnsembleStat::from_values([1.0, 1.0, 1.0]);
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.stderr(), 0.0);
    }

    #[test]
    fn two_values() {
        let s = EnsembleStat::from_values([0.0, 2.0]);
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.variance(), 2.0);
        let (lo, hi) = s.ci95();
        assert!((hi - lo - 2.0 * 1.96).abs() < 1e-12);
    }

    #[test]
    fn split_merge_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() * 10.0 - 3.0).collect();
        let whole = EnsembleStat::from_values(values.iter().copied());
        let parts: Vec<EnsembleStat> = values
            .chunks(777)
            .map(|c| EnsembleStat::from_values(c.iter().copied()))
            .collect();
        let merged = EnsembleStat::merge_all(&parts).unwrap();
        let reversed = EnsembleStat::merge_all(parts.iter().rev()).unwrap();
        for m in [merged, reversed] {
            assert_eq!(m.count, whole.count);
            assert!((m.mean - whole.mean).abs() <= 1e-12 * whole.mean.abs().max(1.0));
            assert!((m.variance() - whole.variance()).abs() <= 1e-12 * whole.variance());
        }
    }

    #[test]
    fn empty_merge_rejected() {
        let none: Vec<EnsembleStat> = vec![];
        assert!(matches!(
            EnsembleStat::merge_all(&none),
            Err(Error::EmptyEnsemble)
        ));
    }

    #[test]
    fn seeds_are_reproducible_and_ordered() {
        let a = derive_seed(42, &[("instance", 3), ("replica", 1)]);
        assert_eq!(a, derive_seed(42, &[("instance", 3), ("replica", 1)]));
        assert_ne!(a, derive_seed(42, &[("replica", 1), ("instance", 3)]));
        assert_ne!(a, derive_seed(43, &[("instance", 3), ("replica", 1)]));
        assert_ne!(derive_seed(1, &[("a", 0)]), derive_seed(1, &[("b", 0)]));
    }

    #[test]
    fn no_collisions_over_ten_thousand_labels() {
        let mut seen = HashSet::new();
        for k in 0..5_000u64 {
            assert!(seen.insert(derive_seed(7, &[("instance", k)])));
            assert!(seen.insert(derive_seed(7, &[("instance", k), ("replica", 0)])));
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1e16, 1.0, -1e16];
        v.extend(std::iter::repeat_n(1.0, 10));
        assert_eq!(compensated_sum(v), 11.0);
    }
}
