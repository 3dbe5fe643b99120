//! Non-decreasing multi-indices and the multinomial weights attached to them.

use crate::error::{Error, Result};

/// Largest count of multi-indices (or expanded entries) we are willing to materialize.
pub const MAX_MATERIALIZED: u64 = 1 << 31;

/// Factorials above this are evaluated as a sum of logarithms instead of integers.
const EXACT_FACTORIAL_LIMIT: u32 = 20;

/// A length-`p` multi-index with 0-based entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }

    /// Occurrence counts of each distinct value, in ascending value order.
    ///
    /// Only the non-zero entries of the histogram are returned; they sum to `p`.
    pub fn histogram(&self) -> Vec<u32> {
        let mut sorted = self.0.clone();
        sorted.sort_unstable();
        let mut counts = Vec::new();
        let mut run = 0u32;
        for (n, &value) in sorted.iter().enumerate() {
            run += 1;
            if n + 1 == sorted.len() || sorted[n + 1] != value {
                counts.push(run);
                run = 0;
            }
        }
        counts
    }
}

/// `C(n, k)`, or `Overflow` if it does not fit in a `u64`.
pub fn binomial(n: u64, k: u64) -> Result<u64> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc
            .checked_mul((n - i) as u128)
            .ok_or_else(|| Error::Overflow(format!("C({n}, {k})")))?
            / (i as u128 + 1);
    }
    u64::try_from(acc).map_err(|_| Error::Overflow(format!("C({n}, {k})")))
}

/// Number of non-decreasing multi-indices of length `p` over `d` symbols.
pub fn ndmi_count(d: usize, p: u32) -> Result<u64> {
    binomial(d as u64 + p as u64 - 1, p as u64)
}

/// All non-decreasing multi-indices of length `p` over `0..d`, in lexicographic order.
pub fn enumerate_ndmi(d: usize, p: u32) -> Result<Vec<MultiIndex>> {
    enumerate_ndmi_capped(d, p, MAX_MATERIALIZED)
}

pub fn enumerate_ndmi_capped(d: usize, p: u32, cap: u64) -> Result<Vec<MultiIndex>> {
    if d == 0 || p == 0 {
        return Err(Error::InvalidSpec(format!("ndmi needs d >= 1 and p >= 1, got d={d}, p={p}")));
    }
    let count = ndmi_count(d, p)?;
    if count > cap {
        return Err(Error::Overflow(format!("{count} multi-indices exceed the cap of {cap}")));
    }
    let p = p as usize;
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0usize; p];
    loop {
        out.push(MultiIndex(current.clone()));
        let Some(z) = (0..p).rev().find(|&z| current[z] + 1 < d) else {
            break;
        };
        let next = current[z] + 1;
        for slot in &mut current[z..] {
            *slot = next;
        }
    }
    debug_assert_eq!(out.len() as u64, count);
    Ok(out)
}

/// `n!` as a `u64`; callers keep `n <= 20`.
fn factorial_u64(n: u32) -> u64 {
    (1..=n as u64).product()
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Multinomial coefficient `p! / prod_k hist_k!` for a histogram summing to `p`.
pub fn multinomial_coefficient(hist: &[u32]) -> f64 {
    let p: u32 = hist.iter().sum();
    if p <= EXACT_FACTORIAL_LIMIT {
        let denom: u64 = hist.iter().map(|&h| factorial_u64(h)).product();
        (factorial_u64(p) / denom) as f64
    } else {
        let ln = ln_factorial(p) - hist.iter().map(|&h| ln_factorial(h)).sum::<f64>();
        ln.exp()
    }
}

/// `sqrt(p! / prod_k hist_k(i)!)`, the weight of entry `i` in the symmetric power.
pub fn multinomial_weight(index: &MultiIndex, p: u32) -> f64 {
    assert_eq!(index.len(), p as usize, "multi-index length must equal p");
    multinomial_coefficient(&index.histogram()).sqrt()
}
