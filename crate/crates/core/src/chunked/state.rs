use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansions::{expansion_dim, ExpansionSpec};
use crate::scalar::Scalar;

/// Running `[D, v]` state and its `[D]` key-sum normalizer for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkState<T> {
    pub spec: ExpansionSpec,
    pub v: usize,
    /// Row-major `[D, v]`.
    pub s: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Scalar> ChunkState<T> {
    pub fn zeros(spec: ExpansionSpec, v: usize) -> Result<Self> {
        let dim = expansion_dim(&spec)? as usize;
        Ok(Self { spec, v, s: vec![T::zero(); dim * v], gamma: vec![T::zero(); dim] })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.spec == other.spec && self.v == other.v && self.s.len() == other.s.len() && self.gamma.len() == other.gamma.len()
    }

    pub fn is_finite(&self) -> bool {
        self.s.iter().chain(&self.gamma).all(|x| x.is_finite())
    }
}

/// How a length-`t` sequence is cut into chunks of `c` tokens (last one possibly short).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub t: usize,
    pub c: usize,
    pub n_chunks: usize,
    pub last_chunk_len: usize,
}

impl ChunkPlan {
    pub fn new(t: usize, c: usize) -> Result<Self> {
        if t == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!("chunk plan needs t >= 1 and c >= 1, got t={t}, c={c}")));
        }
        let n_chunks = t.div_ceil(c);
        Ok(Self { t, c, n_chunks, last_chunk_len: t - (n_chunks - 1) * c })
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n_chunks).map(move |n| n * self.c..((n + 1) * self.c).min(self.t))
    }
}

/// Discounted cumulative sum of chunk states.
///
/// `out[0] = states[0]`, `out[k] = carries[k-1] * out[k-1] + states[k]`,
/// elementwise on both `S` and `gamma`. `carries` has `n - 1` entries, or
/// `n` with the last one unused.
pub fn discumsum<T: Scalar>(states: &[ChunkState<T>], carries: &[T]) -> Result<Vec<ChunkState<T>>> {
    let n = states.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if carries.len() + 1 != n && carries.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} states need {} carries, got {}", n - 1, carries.len())));
    }
    if let Some(bad) = states.iter().position(|s| !s.same_layout(&states[0])) {
        return Err(Error::ShapeMismatch(format!("state {bad} differs in layout from state 0")));
    }
    let mut out: Vec<ChunkState<T>> = Vec::with_capacity(n);
    out.push(states[0].clone());
    for k in 1..n {
        let lambda = carries[k - 1];
        let mut next = states[k].clone();
        let prev = &out[k - 1];
        for (o, &p) in next.s.iter_mut().zip(&prev.s) {
            *o = lambda * p + *o;
        }
        for (o, &p) in next.gamma.iter_mut().zip(&prev.gamma) {
            *o = lambda * p + *o;
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(x: f64) -> ChunkState<f64> {
        ChunkState { spec: ExpansionSpec::identity(1), v: 1, s: vec![x], gamma: vec![x] }
    }

    #[test]
    fn plan_shapes() {
        let p = ChunkPlan::new(10, 4).unwrap();
        assert_eq!((p.n_chunks, p.last_chunk_len), (3, 2));
        assert_eq!(p.ranges().collect::<Vec<_>>(), vec![0..4, 4..8, 8..10]);
        let p = ChunkPlan::new(5, 100).unwrap();
        assert_eq!((p.n_chunks, p.last_chunk_len), (1, 5));
        assert!(ChunkPlan::new(0, 3).is_err());
        assert!(ChunkPlan::new(3, 0).is_err());
    }

    #[test]
    fn plan_ranges_tile_sequence() {
        for t in 1..40 {
            for c in 1..45 {
                let p = ChunkPlan::new(t, c).unwrap();
                let flat: Vec<usize> = p.ranges().flatten().collect();
                assert_eq!(flat, (0..t).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn discumsum_hand_recurrence() {
        let states = [scalar_state(1.0), scalar_state(2.0), scalar_state(3.0)];
        let out = discumsum(&states, &[0.5, 0.5]).unwrap();
        assert_eq!(out.iter().map(|s| s.s[0]).collect::<Vec<_>>(), vec![1.0, 2.5, 4.25]);
        let out = discumsum(&states, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.iter().map(|s| s.s[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let out = discumsum(&states, &[1.0, 1.0]).unwrap();
        assert_eq!(out.iter().map(|s| s.gamma[0]).collect::<Vec<_>>(), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn discumsum_shape_errors() {
        let states = [scalar_state(1.0), scalar_state(2.0)];
        assert!(discumsum(&states, &[]).is_err());
        let mut odd = scalar_state(1.0);
        odd.v = 2;
        odd.s = vec![1.0, 1.0];
        assert!(discumsum(&[scalar_state(1.0), odd], &[1.0]).is_err());
    }
}
