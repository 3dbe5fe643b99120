//! State expansions: the tensor power, the symmetric power, and the tiled
//! symmetric power.
//!
//! All three kinds share one layout. The input of length `d` is cut into
//! `d / tile` tiles and the expansion is a sequence of blocks, one per
//! non-decreasing multi-index over tiles (lexicographic). A block is the
//! flattened tensor product of the selected tiles, scaled by the square root
//! of the tile-level multinomial coefficient. The tensor power is the case
//! `tile = d` (a single unweighted block) and the symmetric power is the case
//! `tile = 1` (one entry per multi-index). With these weights every kind
//! satisfies `<phi(x), phi(y)> = (x . y)^p`.

mod combinatorics;

pub use combinatorics::{
    binomial, enumerate_ndmi, enumerate_ndmi_capped, multinomial_coefficient, multinomial_weight,
    ndmi_count, MultiIndex, MAX_MATERIALIZED,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::{dot, Scalar};

/// Above this expanded dimension `expansion_inner` uses `(x . y)^p` directly.
pub const DEFAULT_INNER_SHORTCUT_DIM: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionKind {
    Tpow,
    Spow,
    Tspow,
}

impl std::str::FromStr for ExpansionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tpow" => Ok(Self::Tpow),
            "spow" => Ok(Self::Spow),
            "tspow" => Ok(Self::Tspow),
            other => Err(Error::InvalidSpec(format!("unknown expansion kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ExpansionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tpow => "tpow",
            Self::Spow => "spow",
            Self::Tspow => "tspow",
        })
    }
}

/// Which feature map, its degree `p`, input dimension `d` and (for TSPOW) tile edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub kind: ExpansionKind,
    pub p: u32,
    pub d: usize,
    /// Only read for [`ExpansionKind::Tspow`].
    pub d_tile: usize,
}

impl ExpansionSpec {
    pub fn tpow(p: u32, d: usize) -> Self {
        Self { kind: ExpansionKind::Tpow, p, d, d_tile: d }
    }

    pub fn spow(p: u32, d: usize) -> Self {
        Self { kind: ExpansionKind::Spow, p, d, d_tile: 1 }
    }

    pub fn tspow(p: u32, d: usize, d_tile: usize) -> Self {
        Self { kind: ExpansionKind::Tspow, p, d, d_tile }
    }

    /// The degree-1 map, i.e. vanilla linear attention.
    pub fn identity(d: usize) -> Self {
        Self::spow(1, d)
    }

    pub fn new(kind: ExpansionKind, p: u32, d: usize, d_tile: usize) -> Result<Self> {
        let spec = match kind {
            ExpansionKind::Tpow => Self::tpow(p, d),
            ExpansionKind::Spow => Self::spow(p, d),
            ExpansionKind::Tspow => Self::tspow(p, d, d_tile),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidSpec("p must be at least 1".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidSpec("d must be at least 1".into()));
        }
        if self.kind == ExpansionKind::Tspow
            && (self.d_tile == 0 || self.d_tile > self.d || self.d % self.d_tile != 0)
        {
            return Err(Error::InvalidSpec(format!(
                "d_tile = {} must divide d = {}",
                self.d_tile, self.d
            )));
        }
        Ok(())
    }

    /// Tile edge actually used by the shared block layout.
    pub fn tile(&self) -> usize {
        match self.kind {
            ExpansionKind::Tpow => self.d,
            ExpansionKind::Spow => 1,
            ExpansionKind::Tspow => self.d_tile,
        }
    }

    pub fn n_blocks(&self) -> Result<u64> {
        self.validate()?;
        ndmi_count(self.d / self.tile(), self.p)
    }

    pub fn block_len(&self) -> Result<u64> {
        (self.tile() as u64)
            .checked_pow(self.p)
            .ok_or_else(|| Error::Overflow(format!("{}^{}", self.tile(), self.p)))
    }
}

/// Expanded dimension `D` of `spec`.
///
/// TPOW: `d^p`; SPOW: `C(d+p-1, p)`; TSPOW: `C(d/d_tile + p - 1, p) * d_tile^p`.
pub fn expansion_dim(spec: &ExpansionSpec) -> Result<u64> {
    let blocks = spec.n_blocks()?;
    blocks
        .checked_mul(spec.block_len()?)
        .ok_or_else(|| Error::Overflow(format!("expanded dimension of {spec:?}")))
}

/// `phi(x)` together with the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedVector<T> {
    pub values: Vec<T>,
    pub spec: ExpansionSpec,
}

#[derive(Debug, Clone)]
struct Block<T> {
    /// Offset into the input of each selected tile.
    offsets: Vec<usize>,
    weight: T,
}

/// Precomputed block plan for one spec; expands vectors and tiles of them.
#[derive(Debug, Clone)]
pub struct Expander<T> {
    spec: ExpansionSpec,
    tile: usize,
    block_len: usize,
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> Expander<T> {
    pub fn new(spec: ExpansionSpec) -> Result<Self> {
        let dim = expansion_dim(&spec)?;
        if dim > MAX_MATERIALIZED {
            return Err(Error::Overflow(format!(
                "expanded dimension {dim} exceeds the materialization cap {MAX_MATERIALIZED}"
            )));
        }
        let tile = spec.tile();
        let blocks = enumerate_ndmi(spec.d / tile, spec.p)?
            .into_iter()
            .map(|idx| Block {
                weight: T::of(multinomial_weight(&idx, spec.p)),
                offsets: idx.0.iter().map(|&k| k * tile).collect(),
            })
            .collect();
        Ok(Self { spec, tile, block_len: spec.block_len()? as usize, blocks })
    }

    pub fn spec(&self) -> &ExpansionSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.blocks.len() * self.block_len
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Multiplies performed per expanded vector: the Kronecker build of
    /// every block plus its weight scaling.
    pub fn muls_per_vector(&self) -> u64 {
        let t = self.tile as u64;
        let kron: u64 = (2..=self.spec.p).map(|z| t.pow(z)).sum();
        self.blocks.len() as u64 * (kron + self.block_len as u64)
    }

    /// Writes block `l` of `phi(x)` into `out` (length `block_len`).
    ///
    /// The Kronecker product is built in place, widening `out` one factor
    /// at a time from the back so no source entry is overwritten early.
    pub fn expand_block(&self, l: usize, x: &[T], out: &mut [T]) {
        let block = &self.blocks[l];
        let t = self.tile;
        out[..t].copy_from_slice(&x[block.offsets[0]..block.offsets[0] + t]);
        let mut len = t;
        for &off in &block.offsets[1..] {
            let factor = &x[off..off + t];
            for i in (0..len).rev() {
                let head = out[i];
                for a in (0..t).rev() {
                    out[i * t + a] = head * factor[a];
                }
            }
            len *= t;
        }
        for o in &mut out[..len] {
            *o *= block.weight;
        }
    }

    pub fn expand_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.spec.d);
        debug_assert_eq!(out.len(), self.dim());
        for (l, chunk) in out.chunks_exact_mut(self.block_len).enumerate() {
            self.expand_block(l, x, chunk);
        }
    }

    pub fn expand(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("expand input", self.spec.d, x.len())?;
        let mut out = vec![T::zero(); self.dim()];
        self.expand_into(x, &mut out);
        Ok(out)
    }

    /// Accumulates `J_phi(x)^T dphi` into `dx`.
    pub fn vjp_into(&self, x: &[T], dphi: &[T], dx: &mut [T]) {
        let p = self.spec.p as usize;
        let t = self.tile;
        let mut digits = vec![0usize; p];
        let mut vals = vec![T::zero(); p];
        let mut prefix = vec![T::zero(); p + 1];
        for (l, block) in self.blocks.iter().enumerate() {
            let grads = &dphi[l * self.block_len..(l + 1) * self.block_len];
            for (e, &g) in grads.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let mut rest = e;
                for z in (0..p).rev() {
                    digits[z] = rest % t;
                    rest /= t;
                }
                for z in 0..p {
                    vals[z] = x[block.offsets[z] + digits[z]];
                }
                prefix[0] = T::one();
                for z in 0..p {
                    prefix[z + 1] = prefix[z] * vals[z];
                }
                let g = g * block.weight;
                let mut suffix = T::one();
                for z in (0..p).rev() {
                    dx[block.offsets[z] + digits[z]] += g * prefix[z] * suffix;
                    suffix *= vals[z];
                }
            }
        }
    }
}

/// `phi(x)` for `spec`.
pub fn expand<T: Scalar>(x: &[T], spec: &ExpansionSpec) -> Result<ExpandedVector<T>> {
    check_len("expand input", spec.d, x.len())?;
    let expander = Expander::new(*spec)?;
    Ok(ExpandedVector { values: expander.expand(x)?, spec: *spec })
}

/// Gradient of `<dphi, phi(x)>` with respect to `x`.
pub fn vjp_expand<T: Scalar>(x: &[T], spec: &ExpansionSpec, dphi: &[T]) -> Result<Vec<T>> {
    check_len("expand input", spec.d, x.len())?;
    let expander = Expander::<T>::new(*spec)?;
    check_len("expanded cotangent", expander.dim(), dphi.len())?;
    let mut dx = vec![T::zero(); spec.d];
    expander.vjp_into(x, dphi, &mut dx);
    Ok(dx)
}

/// `<phi(x), phi(y)>`.
///
/// Materializes both expansions up to [`DEFAULT_INNER_SHORTCUT_DIM`], beyond
/// which it evaluates the identity `(x . y)^p` instead.
pub fn expansion_inner<T: Scalar>(x: &[T], y: &[T], spec: &ExpansionSpec) -> Result<T> {
    expansion_inner_with_threshold(x, y, spec, DEFAULT_INNER_SHORTCUT_DIM)
}

pub fn expansion_inner_with_threshold<T: Scalar>(
    x: &[T],
    y: &[T],
    spec: &ExpansionSpec,
    shortcut_above: u64,
) -> Result<T> {
    check_len("inner lhs", spec.d, x.len())?;
    check_len("inner rhs", spec.d, y.len())?;
    if expansion_dim(spec)? > shortcut_above {
        return Ok(dot(x, y).powi(spec.p as i32));
    }
    let expander = Expander::new(*spec)?;
    Ok(dot(&expander.expand(x)?, &expander.expand(y)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_from_table_and_tiling() {
        assert_eq!(expansion_dim(&ExpansionSpec::spow(2, 64)).unwrap(), 2080);
        assert_eq!(expansion_dim(&ExpansionSpec::tpow(3, 64)).unwrap(), 262144);
        assert_eq!(expansion_dim(&ExpansionSpec::spow(1, 17)).unwrap(), 17);
        assert_eq!(expansion_dim(&ExpansionSpec::tspow(2, 64, 8)).unwrap(), 2304);
        assert_eq!(expansion_dim(&ExpansionSpec::tpow(6, 64)).unwrap(), 68719476736);
    }

    #[test]
    fn tspow_dim_formula_and_limits() {
        for (d, dt, p) in [(8usize, 2usize, 2u32), (16, 4, 3), (12, 3, 2), (6, 6, 4), (6, 1, 3)] {
            let tspow = expansion_dim(&ExpansionSpec::tspow(p, d, dt)).unwrap();
            let formula = binomial((d / dt) as u64 + p as u64 - 1, p as u64).unwrap() * (dt as u64).pow(p);
            assert_eq!(tspow, formula);
        }
        // A single tile is the full tensor power.
        assert_eq!(
            expansion_dim(&ExpansionSpec::tspow(3, 8, 8)).unwrap(),
            expansion_dim(&ExpansionSpec::tpow(3, 8)).unwrap()
        );
        for p in 2..=4 {
            let s = expansion_dim(&ExpansionSpec::spow(p, 16)).unwrap();
            let ts = expansion_dim(&ExpansionSpec::tspow(p, 16, 4)).unwrap();
            let t = expansion_dim(&ExpansionSpec::tpow(p, 16)).unwrap();
            assert!(s < ts && ts <= t);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(expansion_dim(&ExpansionSpec::tspow(2, 64, 7)), Err(Error::InvalidSpec(_))));
        assert!(matches!(expansion_dim(&ExpansionSpec::spow(0, 4)), Err(Error::InvalidSpec(_))));
        assert!(matches!(expansion_dim(&ExpansionSpec::tpow(40, 64)), Err(Error::Overflow(_))));
        assert!(matches!(Expander::<f64>::new(ExpansionSpec::tpow(6, 64)), Err(Error::Overflow(_))));
    }

    #[test]
    fn worked_expansions() {
        let x = [1.0f64, 2.0];
        assert_eq!(expand(&x, &ExpansionSpec::tpow(2, 2)).unwrap().values, vec![1.0, 2.0, 2.0, 4.0]);
        let s = expand(&x, &ExpansionSpec::spow(2, 2)).unwrap().values;
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[2], 4.0);
        assert_eq!(expand(&[1.0f64, 0.0], &ExpansionSpec::spow(2, 2)).unwrap().values, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn spow3_matches_display() {
        let (a, b) = (0.7f64, -1.3);
        let s = expand(&[a, b], &ExpansionSpec::spow(3, 2)).unwrap().values;
        let r3 = 3f64.sqrt();
        let want = [a * a * a, r3 * a * a * b, r3 * a * b * b, b * b * b];
        for (got, want) in s.iter().zip(want) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn tspow_block_layout() {
        // d = 4, tile 2, p = 2: blocks (0,0), (0,1), (1,1) of 4 entries each.
        let x = [1.0f64, 2.0, 3.0, 5.0];
        let v = expand(&x, &ExpansionSpec::tspow(2, 4, 2)).unwrap().values;
        let r2 = 2f64.sqrt();
        let want = [
            1.0, 2.0, 2.0, 4.0,
            r2 * 3.0, r2 * 5.0, r2 * 6.0, r2 * 10.0,
            9.0, 15.0, 15.0, 25.0,
        ];
        assert_eq!(v.len(), want.len());
        for (g, w) in v.iter().zip(want) {
            assert!((g - w).abs() < 1e-14, "{v:?}");
        }
    }

    #[test]
    fn degree_one_is_identity() {
        let x = [0.3f64, -1.5, 2.25, 4.0];
        for spec in [ExpansionSpec::tpow(1, 4), ExpansionSpec::spow(1, 4), ExpansionSpec::tspow(1, 4, 2)] {
            assert_eq!(expand(&x, &spec).unwrap().values, x.to_vec());
        }
    }

    #[test]
    fn inner_examples() {
        let s2 = ExpansionSpec::spow(2, 2);
        assert!(expansion_inner(&[1.0f64, 1.0], &[1.0, -1.0], &s2).unwrap().abs() < 1e-15);
        for spec in [ExpansionSpec::tpow(2, 2), s2, ExpansionSpec::tspow(2, 2, 1), ExpansionSpec::tspow(2, 2, 2)] {
            let v = expansion_inner(&[1.0f64, 2.0], &[3.0, 4.0], &spec).unwrap();
            assert!((v - 121.0).abs() < 1e-12);
        }
        let mut e = vec![0.0f64; 64];
        e[0] = 1.0;
        let spec = ExpansionSpec::tspow(4, 64, 8);
        assert_eq!(expansion_inner(&e, &e, &spec).unwrap(), 1.0);
        assert_eq!(expansion_inner_with_threshold(&e, &e, &spec, u64::MAX).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let spec = ExpansionSpec::spow(2, 3);
        assert!(matches!(expand(&[1.0f64, 2.0], &spec), Err(Error::DimensionMismatch { .. })));
        assert!(expansion_inner(&[1.0f64; 3], &[1.0; 2], &spec).is_err());
    }

    #[test]
    fn muls_per_vector_counts() {
        assert_eq!(Expander::<f64>::new(ExpansionSpec::spow(2, 64)).unwrap().muls_per_vector(), 2 * 2080);
        assert_eq!(Expander::<f64>::new(ExpansionSpec::tpow(2, 64)).unwrap().muls_per_vector(), 2 * 4096);
    }
}
