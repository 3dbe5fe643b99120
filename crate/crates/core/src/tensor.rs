//! Batched sequence inputs and outputs in `[batch, time, head, feature]` layout.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchShape {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    /// Query/key feature dimension.
    pub d: usize,
    /// Value feature dimension.
    pub v: usize,
}

impl BatchShape {
    pub fn new(b: usize, t: usize, h: usize, d: usize, v: usize) -> Self {
        Self { b, t, h, d, v }
    }

    pub fn n_streams(&self) -> usize {
        self.b * self.h
    }

    fn check(&self) -> Result<()> {
        if self.b == 0 || self.t == 0 || self.h == 0 || self.d == 0 || self.v == 0 {
            return Err(Error::ShapeMismatch(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Queries, keys, values and optional per-timestep gates for `b * h` streams.
///
/// Gates are decay factors in `[0, 1]`; `None` means no gating (all ones).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    pub shape: BatchShape,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub gates: Option<Vec<T>>,
}

/// One `(batch, head)` slice, stored contiguously as `[t, d]` / `[t, v]` / `[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream<T> {
    pub t: usize,
    pub d: usize,
    pub v: usize,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub values: Vec<T>,
    pub gates: Option<Vec<T>>,
}

impl<T: Scalar> Stream<T> {
    pub fn new(d: usize, v: usize, q: Vec<T>, k: Vec<T>, values: Vec<T>, gates: Option<Vec<T>>) -> Result<Self> {
        if d == 0 || v == 0 || q.len() % d != 0 {
            return Err(Error::ShapeMismatch(format!("q of length {} with d = {d}", q.len())));
        }
        let t = q.len() / d;
        let ok = k.len() == t * d
            && values.len() == t * v
            && gates.as_ref().map_or(true, |g| g.len() == t);
        if !ok || t == 0 {
            return Err(Error::ShapeMismatch(format!(
                "stream lengths q={} k={} v={} gates={:?} do not agree on t={t}",
                q.len(),
                k.len(),
                values.len(),
                gates.as_ref().map(Vec::len)
            )));
        }
        Ok(Self { t, d, v, q, k, values, gates })
    }

    pub fn q_row(&self, i: usize) -> &[T] {
        &self.q[i * self.d..(i + 1) * self.d]
    }

    pub fn k_row(&self, i: usize) -> &[T] {
        &self.k[i * self.d..(i + 1) * self.d]
    }

    pub fn v_row(&self, i: usize) -> &[T] {
        &self.values[i * self.v..(i + 1) * self.v]
    }

    pub fn gate(&self, i: usize) -> T {
        self.gates.as_ref().map_or(T::one(), |g| g[i])
    }

    /// Tokens `range` as a new stream.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let (d, v) = (self.d, self.v);
        Self {
            t: range.len(),
            d,
            v,
            q: self.q[range.start * d..range.end * d].to_vec(),
            k: self.k[range.start * d..range.end * d].to_vec(),
            values: self.values[range.start * v..range.end * v].to_vec(),
            gates: self.gates.as_ref().map(|g| g[range].to_vec()),
        }
    }
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(shape: BatchShape, q: Vec<T>, k: Vec<T>, v: Vec<T>, gates: Option<Vec<T>>) -> Result<Self> {
        let batch = Self { shape, q, k, v, gates };
        batch.validate()?;
        Ok(batch)
    }

    /// Single-stream batch (`b = h = 1`).
    pub fn single(d: usize, v: usize, q: Vec<T>, k: Vec<T>, values: Vec<T>, gates: Option<Vec<T>>) -> Result<Self> {
        let t = if d == 0 { 0 } else { q.len() / d };
        Self::new(BatchShape::new(1, t, 1, d, v), q, k, values, gates)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        s.check()?;
        let rows = s.b * s.t * s.h;
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!("{name} has {got} elements, expected {want}")))
            }
        };
        check("Q", self.q.len(), rows * s.d)?;
        check("K", self.k.len(), rows * s.d)?;
        check("V", self.v.len(), rows * s.v)?;
        if let Some(g) = &self.gates {
            check("gates", g.len(), rows)?;
        }
        Ok(())
    }

    /// Rejects NaN/inf inputs and gates outside `[0, 1]`.
    pub fn check_finite(&self) -> Result<()> {
        let finite = |xs: &[T]| xs.iter().all(|x| x.is_finite());
        if !finite(&self.q) {
            return Err(Error::NonFiniteInput("Q"));
        }
        if !finite(&self.k) {
            return Err(Error::NonFiniteInput("K"));
        }
        if !finite(&self.v) {
            return Err(Error::NonFiniteInput("V"));
        }
        if let Some(g) = &self.gates {
            if !finite(g) {
                return Err(Error::NonFiniteInput("gates"));
            }
            if g.iter().any(|&x| x < T::zero() || x > T::one()) {
                return Err(Error::InvalidConfig("gates must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Extracts stream `(bi, hi)`.
    pub fn stream(&self, bi: usize, hi: usize) -> Stream<T> {
        let s = self.shape;
        let mut q = Vec::with_capacity(s.t * s.d);
        let mut k = Vec::with_capacity(s.t * s.d);
        let mut values = Vec::with_capacity(s.t * s.v);
        let mut gates = self.gates.as_ref().map(|_| Vec::with_capacity(s.t));
        for ti in 0..s.t {
            let row = (bi * s.t + ti) * s.h + hi;
            q.extend_from_slice(&self.q[row * s.d..(row + 1) * s.d]);
            k.extend_from_slice(&self.k[row * s.d..(row + 1) * s.d]);
            values.extend_from_slice(&self.v[row * s.v..(row + 1) * s.v]);
            if let (Some(out), Some(g)) = (gates.as_mut(), self.gates.as_ref()) {
                out.push(g[row]);
            }
        }
        Stream { t: s.t, d: s.d, v: s.v, q, k, values, gates }
    }

    /// All streams in `(b, h)` row-major order.
    pub fn streams(&self) -> Vec<Stream<T>> {
        let s = self.shape;
        (0..s.b).flat_map(|bi| (0..s.h).map(move |hi| (bi, hi))).map(|(bi, hi)| self.stream(bi, hi)).collect()
    }

    /// Same batch with gating removed.
    pub fn without_gates(&self) -> Self {
        Self { gates: None, ..self.clone() }
    }
}

/// Scatters per-stream `[t, width]` rows back into `[b, t, h, width]`.
pub(crate) fn scatter<T: Scalar>(shape: BatchShape, width: usize, per_stream: &[Vec<T>]) -> Vec<T> {
    let mut out = vec![T::zero(); shape.b * shape.t * shape.h * width];
    for (n, rows) in per_stream.iter().enumerate() {
        let (bi, hi) = (n / shape.h, n % shape.h);
        for ti in 0..shape.t {
            let dst = ((bi * shape.t + ti) * shape.h + hi) * width;
            out[dst..dst + width].copy_from_slice(&rows[ti * width..(ti + 1) * width]);
        }
    }
    out
}

/// Attention output `Y` in `[b, t, h, v]` and the per-query score sums `zeta` in `[b, t, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub shape: BatchShape,
    pub y: Vec<T>,
    pub rowsum: Option<Vec<T>>,
}

/// Per-stream result: outputs `[t, v]` and score sums `[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput<T> {
    pub y: Vec<T>,
    pub zeta: Vec<T>,
}

impl<T: Scalar> AttentionOutput<T> {
    pub(crate) fn gather(shape: BatchShape, outputs: &[StreamOutput<T>]) -> Self {
        let ys: Vec<Vec<T>> = outputs.iter().map(|o| o.y.clone()).collect();
        let zs: Vec<Vec<T>> = outputs.iter().map(|o| o.zeta.clone()).collect();
        Self { shape, y: scatter(shape, shape.v, &ys), rowsum: Some(scatter(shape, 1, &zs)) }
    }

    /// Sum of all outputs, as a cheap cross-run fingerprint.
    pub fn checksum(&self) -> f64 {
        self.y.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()
    }
}

/// `max |a - b| / max |b|`, the norm-wise relative error used by every
/// equivalence check in this crate. Falls back to the absolute error when
/// `b` is identically zero.
pub fn max_rel_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    if diff.is_nan() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(e) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_roundtrip_layout() {
        let shape = BatchShape::new(2, 3, 2, 1, 1);
        let n = 2 * 3 * 2;
        let q: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let batch = SequenceBatch::new(shape, q.clone(), q.clone(), q.clone(), None).unwrap();
        // row index (b, t, h) = (1, 2, 0) -> ((1*3)+2)*2+0 = 10
        assert_eq!(batch.stream(1, 0).q, vec![6.0, 8.0, 10.0]);
        let outs: Vec<StreamOutput<f64>> =
            batch.streams().into_iter().map(|s| StreamOutput { y: s.values, zeta: vec![0.0; 3] }).collect();
        assert_eq!(AttentionOutput::gather(shape, &outs).y, q);
    }

    #[test]
    fn shape_errors() {
        let shape = BatchShape::new(1, 2, 1, 2, 1);
        assert!(SequenceBatch::new(shape, vec![0.0f64; 4], vec![0.0; 3], vec![0.0; 2], None).is_err());
        assert!(SequenceBatch::new(shape, vec![0.0f64; 4], vec![0.0; 4], vec![0.0; 2], Some(vec![1.0])).is_err());
        assert!(SequenceBatch::<f64>::new(BatchShape::new(1, 0, 1, 2, 1), vec![], vec![], vec![], None).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let b = SequenceBatch::single(1, 1, vec![f64::NAN], vec![1.0], vec![1.0], None).unwrap();
        assert_eq!(b.check_finite(), Err(Error::NonFiniteInput("Q")));
        let b = SequenceBatch::single(1, 1, vec![1.0f64], vec![1.0], vec![1.0], Some(vec![1.5])).unwrap();
        assert!(b.check_finite().is_err());
    }
}
