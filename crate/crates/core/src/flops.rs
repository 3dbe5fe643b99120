//! FLOP accounting: per-token weight and state FLOPs for whole architectures,
//! their ratio (WSFR), and exact multiply-accumulate counts for the chunked
//! pipeline.
//!
//! Convention: one multiply-accumulate is 2 FLOPs, forward pass only. Causal
//! attention over `n` tokens attends to `(n + 1) / 2` keys on average.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attention::Mechanism;
use crate::chunked::{stage, ChunkPlan};
use crate::error::{Error, Result};
use crate::expansions::{binomial, expansion_dim, ExpansionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    /// Non-embedding parameters.
    pub n_params: u64,
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub value_dim: u64,
    pub model_width: u64,
    pub mechanism: Mechanism,
    /// Context length.
    pub t: u64,
    /// Chunk size of the chunked form, if any (power/linear only).
    pub chunk: Option<u64>,
}

/// Exact non-embedding parameter count of a GPT-2 style block stack with MLP
/// ratio 4: per layer `12 w^2` weights, `13 w` biases and LayerNorm
/// parameters, plus the final LayerNorm.
pub fn gpt2_non_embedding_params(width: u64, layers: u64) -> u64 {
    layers * (12 * width * width + 13 * width) + 2 * width
}

/// The usual `12 * width^2 * layers` approximation.
pub fn approx_non_embedding_params(width: u64, layers: u64) -> u64 {
    12 * width * width * layers
}

impl ArchSpec {
    fn gpt2(name: &str, width: u64, layers: u64, heads: u64) -> Self {
        let head_dim = width / heads;
        Self {
            name: name.into(),
            n_params: gpt2_non_embedding_params(width, layers),
            n_layers: layers,
            n_heads: heads,
            head_dim,
            value_dim: head_dim,
            model_width: width,
            mechanism: Mechanism::Exp,
            t: 1024,
            chunk: None,
        }
    }

    /// Width 768, 12 layers, 12 heads.
    pub fn gpt2_small() -> Self {
        Self::gpt2("gpt2-small", 768, 12, 12)
    }

    /// Width 1024, 24 layers, 16 heads.
    pub fn gpt2_medium() -> Self {
        Self::gpt2("gpt2-medium", 1024, 24, 16)
    }

    /// Width 1280, 36 layers, 20 heads.
    pub fn gpt2_large() -> Self {
        Self::gpt2("gpt2-large", 1280, 36, 20)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gpt2-small" | "small" => Ok(Self::gpt2_small()),
            "gpt2-medium" | "medium" => Ok(Self::gpt2_medium()),
            "gpt2-large" | "large" => Ok(Self::gpt2_large()),
            other => Err(Error::InvalidConfig(format!("unknown architecture preset {other:?}"))),
        }
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.mechanism = mechanism;
        self
    }

    pub fn with_context(mut self, t: u64) -> Self {
        self.t = t;
        self
    }

    pub fn with_chunk(mut self, chunk: Option<u64>) -> Self {
        self.chunk = chunk;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.n_heads, self.head_dim, self.value_dim, self.model_width, self.t];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("architecture dimensions must be positive: {self:?}")));
        }
        if self.n_heads * self.head_dim != self.model_width {
            return Err(Error::InvalidConfig(format!(
                "model_width {} != n_heads {} * head_dim {}",
                self.model_width, self.n_heads, self.head_dim
            )));
        }
        match self.mechanism {
            Mechanism::Window(0) => return Err(Error::InvalidConfig("window must be positive".into())),
            Mechanism::Linear(spec) | Mechanism::Power(spec) => {
                spec.validate()?;
                if spec.d as u64 != self.head_dim {
                    return Err(Error::InvalidConfig(format!(
                        "expansion d {} != head_dim {}",
                        spec.d, self.head_dim
                    )));
                }
            }
            _ => {}
        }
        if self.chunk == Some(0) {
            return Err(Error::InvalidConfig("chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// Short label such as `exp`, `window-8192` or `power-spow-p2`.
pub fn mechanism_label(m: &Mechanism) -> String {
    match m {
        Mechanism::Exp => "exp".into(),
        Mechanism::Window(w) => format!("window-{w}"),
        Mechanism::Linear(s) => format!("linear-{}-p{}", s.kind, s.p),
        Mechanism::Power(s) => format!("power-{}-p{}", s.kind, s.p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub weight_flops_per_token: f64,
    pub state_flops_per_token: f64,
    /// `[weight, state]` scaled so the smaller side is 1.
    pub wsfr: [f64; 2],
    pub breakdown: BTreeMap<String, f64>,
    pub arch: String,
    pub mechanism: String,
    pub t: u64,
    pub chunk: Option<u64>,
}

impl FlopReport {
    /// `"8:1"` style label; ratios below 10 keep one decimal.
    pub fn wsfr_label(&self) -> String {
        let fmt = |x: f64| if x < 10.0 { format!("{:.1}", x) } else { format!("{:.0}", x) };
        match self.wsfr {
            [w, s] if w >= s => format!("{}:1", fmt(w)),
            [_, s] => format!("1:{}", fmt(s)),
        }
    }
}

/// `2 * n_params` per token.
pub fn weight_flops(arch: &ArchSpec) -> f64 {
    2.0 * arch.n_params as f64
}

fn attended(n: u64) -> f64 {
    (n as f64 + 1.0) / 2.0
}

fn state_breakdown(arch: &ArchSpec) -> Result<BTreeMap<String, f64>> {
    arch.validate()?;
    let lh = 2.0 * (arch.n_layers * arch.n_heads) as f64;
    let (d, v) = (arch.head_dim as f64, arch.value_dim as f64);
    let mut out = BTreeMap::new();
    let exp_terms = |n: u64, out: &mut BTreeMap<String, f64>| {
        out.insert("scores".into(), lh * d * attended(n));
        out.insert("values".into(), lh * v * attended(n));
    };
    match arch.mechanism {
        Mechanism::Exp => exp_terms(arch.t, &mut out),
        // The effective context of a window saturates at t = w.
        Mechanism::Window(w) => exp_terms(arch.t.min(w as u64), &mut out),
        Mechanism::Linear(spec) | Mechanism::Power(spec) => {
            let big_d = expansion_dim(&spec)? as f64;
            out.insert("update_state".into(), lh * big_d * v);
            out.insert("query_state".into(), lh * big_d * v);
            if let Some(c) = arch.chunk {
                out.insert("intra_chunk".into(), lh * (d + v) * attended(c.min(arch.t)));
            }
        }
    }
    Ok(out)
}

/// Per-token forward state FLOPs.
///
/// - EXP: `2 L H (d + v) (t + 1) / 2`
/// - WINDOW(w): the same with `t` replaced by `min(t, w)`
/// - LINEAR/POWER: `2 L H (D v + D v)`, plus `2 L H (d + v) (min(c, t) + 1) / 2`
///   for the intra-chunk attention when a chunk size is set.
pub fn state_flops(arch: &ArchSpec) -> Result<f64> {
    Ok(state_breakdown(arch)?.values().sum())
}

/// Normalizes `(weight, state)` so the smaller side is 1.
pub fn normalize_ratio(weight: f64, state: f64) -> [f64; 2] {
    match (weight > 0.0, state > 0.0) {
        (false, false) => [0.0, 0.0],
        (true, false) | (false, true) => {
            let m = weight.max(state);
            [weight / m, state / m]
        }
        _ if weight >= state => [weight / state, 1.0],
        _ => [1.0, state / weight],
    }
}

pub fn wsfr(arch: &ArchSpec) -> Result<FlopReport> {
    let mut breakdown = state_breakdown(arch)?;
    let state: f64 = breakdown.values().sum();
    let weight = weight_flops(arch);
    breakdown.insert("weights".into(), weight);
    Ok(FlopReport {
        weight_flops_per_token: weight,
        state_flops_per_token: state,
        wsfr: normalize_ratio(weight, state),
        breakdown,
        arch: arch.name.clone(),
        mechanism: mechanism_label(&arch.mechanism),
        t: arch.t,
        chunk: arch.chunk,
    })
}

/// Multiplications to expand one vector: for each of the
/// `C(d/tile + p - 1, p)` blocks, the Kronecker build (`tile^2 + ... + tile^p`)
/// and the weight scaling (`tile^p`).
pub fn expansion_muls_per_vector(spec: &ExpansionSpec) -> Result<u64> {
    spec.validate()?;
    let tile = spec.tile() as u64;
    let blocks = binomial((spec.d as u64 / tile) + spec.p as u64 - 1, spec.p as u64)?;
    let kron: u64 = (2..=spec.p).map(|z| tile.pow(z)).sum();
    Ok(blocks * (kron + tile.pow(spec.p)))
}

/// Exact multiply-accumulate counts of the chunked pipeline for one stream,
/// keyed by stage name. These are the counts the instrumented forward pass
/// reports.
pub fn count_flops_chunked(plan: &ChunkPlan, spec: &ExpansionSpec, v: usize) -> Result<BTreeMap<&'static str, u64>> {
    let big_d = expansion_dim(spec)?;
    let (t, d, v) = (plan.t as u64, spec.d as u64, v as u64);
    let intra: u64 = plan.ranges().map(|r| r.len() as u64).map(|l| l * (l + 1) / 2 * (d + v)).sum();
    let mut out = BTreeMap::new();
    out.insert(stage::INTRA_ATTENTION, intra);
    out.insert(stage::EXPANSION, 2 * t * expansion_muls_per_vector(spec)?);
    out.insert(stage::UPDATE_STATE, t * big_d * (v + 2));
    out.insert(stage::DISCUMSUM, plan.n_chunks as u64 * big_d * (v + 1));
    out.insert(stage::QUERY_STATE, t * big_d * (v + 1) + t * (v + 1));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_flops_examples() {
        let mut a = ArchSpec::gpt2_small();
        a.n_params = 124_000_000;
        assert_eq!(weight_flops(&a), 2.48e8);
        a.n_params = 0;
        assert_eq!(weight_flops(&a), 0.0);
        a.n_params = 10;
        let one = weight_flops(&a);
        a.n_params = 20;
        assert_eq!(weight_flops(&a), 2.0 * one);
    }

    #[test]
    fn gpt2_parameter_counts() {
        assert_eq!(gpt2_non_embedding_params(768, 12), 85_056_000);
        assert_eq!(approx_non_embedding_params(768, 12), 84_934_656);
        let m = ArchSpec::gpt2_medium();
        assert_eq!((m.head_dim, m.n_layers), (64, 24));
    }

    #[test]
    fn identity_power_state_flops() {
        let a = ArchSpec::gpt2_small().with_mechanism(Mechanism::Power(ExpansionSpec::identity(64)));
        assert_eq!(state_flops(&a).unwrap(), 2.0 * 12.0 * 12.0 * (4096.0 + 4096.0));
    }

    #[test]
    fn exp_minimal_context_and_window_saturation() {
        let a = ArchSpec::gpt2_small().with_context(1);
        assert_eq!(state_flops(&a).unwrap(), 2.0 * 144.0 * 128.0);
        for t in [1, 100, 8192] {
            let e = ArchSpec::gpt2_small().with_context(t);
            let w = e.clone().with_mechanism(Mechanism::Window(8192));
            assert_eq!(state_flops(&e).unwrap(), state_flops(&w).unwrap());
        }
    }

    #[test]
    fn ratio_normalization() {
        assert_eq!(normalize_ratio(8.0, 1.0), [8.0, 1.0]);
        assert_eq!(normalize_ratio(2.0, 6.0), [1.0, 3.0]);
        assert_eq!(normalize_ratio(0.0, 5.0), [0.0, 1.0]);
        assert_eq!(normalize_ratio(0.0, 0.0), [0.0, 0.0]);
    }

    #[test]
    fn invalid_arch() {
        let mut a = ArchSpec::gpt2_small();
        a.head_dim = 32;
        assert!(wsfr(&a).is_err());
        let a = ArchSpec::gpt2_small().with_mechanism(Mechanism::Power(ExpansionSpec::spow(2, 32)));
        assert!(wsfr(&a).is_err());
    }
}
