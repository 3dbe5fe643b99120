//! Quadratic-time attention forms: exponential, sliding window, generic
//! linear (through an explicit feature map) and power attention.
//!
//! Every mechanism shares the gating convention `G_ij = prod_{k=j+1..i} g_k`
//! and a fixed ascending-`j` reduction order within each query row.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expansions::{ExpansionSpec, Expander};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{AttentionOutput, SequenceBatch, Stream, StreamOutput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    /// Softmax-style `exp(s)` scores.
    Exp,
    /// `exp(s)` restricted to the `w` most recent tokens (self included).
    Window(usize),
    /// `phi(Q_i) . phi(K_j)` through an explicitly materialized expansion.
    Linear(ExpansionSpec),
    /// `(s)^p` with `p = spec.p`; the spec selects the state expansion used by
    /// the recurrent and chunked forms.
    Power(ExpansionSpec),
}

impl Mechanism {
    pub fn expansion(&self) -> Option<&ExpansionSpec> {
        match self {
            Mechanism::Linear(spec) | Mechanism::Power(spec) => Some(spec),
            _ => None,
        }
    }

    pub fn degree(&self) -> Option<u32> {
        self.expansion().map(|s| s.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Multiplies `Q` before scoring; `None` means `1 / sqrt(d)`.
    pub scale: Option<f64>,
    /// Divide each output row by its score sum.
    pub normalize: bool,
    /// Stabilizer inside `log(|s| + eps)`; `None` picks the dtype default.
    pub epsilon: Option<f64>,
    /// Evaluate power scores as `exp(p log(|s| + eps) - rowmax)`.
    pub use_log_space: bool,
}

impl AttentionConfig {
    pub fn new(mechanism: Mechanism) -> Self {
        Self { mechanism, scale: None, normalize: false, epsilon: None, use_log_space: false }
    }

    pub fn power(spec: ExpansionSpec) -> Self {
        Self::new(Mechanism::Power(spec))
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = Some(scale);
        self
    }

    pub fn normalized(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn log_space(mut self, on: bool) -> Self {
        self.use_log_space = on;
        self
    }

    pub fn scale_for(&self, d: usize) -> f64 {
        self.scale.unwrap_or_else(|| 1.0 / (d as f64).sqrt())
    }

    pub fn epsilon_for<T: Scalar>(&self) -> f64 {
        self.epsilon.unwrap_or(T::DEFAULT_EPSILON)
    }

    /// Checks the config against the head dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self.mechanism {
            Mechanism::Window(0) => return Err(Error::InvalidConfig("window must be at least 1".into())),
            Mechanism::Linear(spec) | Mechanism::Power(spec) => {
                spec.validate()?;
                if spec.d != d {
                    return Err(Error::DimensionMismatch { what: "expansion d vs head dim", expected: d, got: spec.d });
                }
                if self.normalize && spec.p % 2 == 1 {
                    return Err(Error::OddPowerWithNormalize(spec.p));
                }
            }
            _ => {}
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(Error::InvalidConfig("epsilon must be positive".into()));
            }
        }
        if let Some(scale) = self.scale {
            if !scale.is_finite() {
                return Err(Error::InvalidConfig("scale must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Score {
    Exp,
    Power(u32),
}

impl Score {
    pub(crate) fn eval<T: Scalar>(self, s: T) -> T {
        match self {
            Score::Exp => s.exp(),
            Score::Power(p) => s.powi(p as i32),
        }
    }

    /// Derivative with respect to the scaled score.
    pub(crate) fn deriv<T: Scalar>(self, s: T) -> T {
        match self {
            Score::Exp => s.exp(),
            Score::Power(0) => T::zero(),
            Score::Power(p) => T::of(p as f64) * s.powi(p as i32 - 1),
        }
    }
}

/// Row-wise scoring parameters shared by the attention form, the intra-chunk
/// attention and their backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowKernel<T> {
    pub score: Score,
    pub scale: T,
    pub window: Option<usize>,
    pub log_space: bool,
    pub eps: T,
}

impl<T: Scalar> RowKernel<T> {
    pub(crate) fn from_config(cfg: &AttentionConfig, d: usize) -> Self {
        let (score, window, log_space) = match cfg.mechanism {
            Mechanism::Exp => (Score::Exp, None, true),
            Mechanism::Window(w) => (Score::Exp, Some(w), true),
            Mechanism::Linear(spec) | Mechanism::Power(spec) => (Score::Power(spec.p), None, cfg.use_log_space),
        };
        Self { score, scale: T::of(cfg.scale_for(d)), window, log_space, eps: T::of(cfg.epsilon_for::<T>()) }
    }

    /// First key position visible from query `i`.
    pub(crate) fn lo(&self, i: usize) -> usize {
        match self.window {
            Some(w) => (i + 1).saturating_sub(w),
            None => 0,
        }
    }
}

/// Fills `out[j - lo] = prod_{k=j+1..=i} g_k` for `j` in `lo..=i`.
pub(crate) fn gate_products<T: Scalar>(s: &Stream<T>, lo: usize, i: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(i + 1 - lo, T::one());
    if s.gates.is_none() {
        return;
    }
    let mut acc = T::one();
    for j in (lo..=i).rev() {
        out[j - lo] = acc;
        acc *= s.gate(j);
    }
}

/// Unnormalized attention for one stream: `y_i = sum_j A_ij V_j`, `zeta_i = sum_j A_ij`.
pub(crate) fn attend_stream<T: Scalar>(s: &Stream<T>, kern: &RowKernel<T>) -> StreamOutput<T> {
    let mut y = vec![T::zero(); s.t * s.v];
    let mut zeta = vec![T::zero(); s.t];
    let mut g = Vec::new();
    let mut logits = Vec::new();
    let mut signs = Vec::new();
    for i in 0..s.t {
        let lo = kern.lo(i);
        gate_products(s, lo, i, &mut g);
        let q = s.q_row(i);
        let row = &mut y[i * s.v..(i + 1) * s.v];
        if !kern.log_space {
            let mut z = T::zero();
            for j in lo..=i {
                let a = g[j - lo] * kern.score.eval(kern.scale * dot(q, s.k_row(j)));
                z += a;
                axpy(a, s.v_row(j), row);
            }
            zeta[i] = z;
            continue;
        }
        logits.clear();
        signs.clear();
        for j in lo..=i {
            let sc = kern.scale * dot(q, s.k_row(j));
            let (logit, sign) = match kern.score {
                Score::Exp => (sc, T::one()),
                Score::Power(p) => {
                    let sign = if p % 2 == 1 && sc < T::zero() { -T::one() } else { T::one() };
                    (T::of(p as f64) * (sc.abs() + kern.eps).ln(), sign)
                }
            };
            logits.push(logit + g[j - lo].ln());
            signs.push(sign);
        }
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            continue;
        }
        let mut z = T::zero();
        for j in lo..=i {
            let w = signs[j - lo] * (logits[j - lo] - m).exp();
            z += w;
            axpy(w, s.v_row(j), row);
        }
        let back = m.exp();
        for x in row.iter_mut() {
            *x *= back;
        }
        zeta[i] = z * back;
    }
    StreamOutput { y, zeta }
}

/// Divides each output row by its score sum.
pub(crate) fn normalize_rows<T: Scalar>(out: &mut StreamOutput<T>, v: usize) -> Result<()> {
    for (i, &z) in out.zeta.iter().enumerate() {
        if !(z > T::zero()) || !z.is_finite() {
            return Err(Error::ZeroDenominator { position: i });
        }
        for x in &mut out.y[i * v..(i + 1) * v] {
            *x /= z;
        }
    }
    Ok(())
}

pub(crate) fn map_streams<T, F>(batch: &SequenceBatch<T>, f: F) -> Result<AttentionOutput<T>>
where
    T: Scalar,
    F: Fn(&Stream<T>) -> Result<StreamOutput<T>> + Sync + Send,
{
    batch.validate()?;
    batch.check_finite()?;
    let outputs = batch.streams().par_iter().map(&f).collect::<Result<Vec<_>>>()?;
    Ok(AttentionOutput::gather(batch.shape, &outputs))
}

fn kernel_form<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    cfg.validate(batch.shape.d)?;
    let kern = RowKernel::<T>::from_config(cfg, batch.shape.d);
    map_streams(batch, |s| {
        let mut out = attend_stream(s, &kern);
        if cfg.normalize {
            normalize_rows(&mut out, s.v)?;
        }
        Ok(out)
    })
}

fn expect(cfg: &AttentionConfig, ok: bool, name: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} called with mechanism {:?}", cfg.mechanism)))
    }
}

/// `Y_i = sum_{j<=i} G_ij exp(scale Q_i.K_j) V_j`, row-max stabilized.
pub fn exp_attention<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    expect(cfg, cfg.mechanism == Mechanism::Exp, "exp_attention")?;
    kernel_form(batch, cfg)
}

/// Exponential attention over `j in [max(0, i-w+1), i]`.
pub fn window_attention<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    expect(cfg, matches!(cfg.mechanism, Mechanism::Window(_)), "window_attention")?;
    kernel_form(batch, cfg)
}

/// Power attention in attention form: scores `G_ij (scale Q_i.K_j)^p`.
pub fn power_attention_form<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    expect(cfg, matches!(cfg.mechanism, Mechanism::Power(_)), "power_attention_form")?;
    kernel_form(batch, cfg)
}

/// Linear attention with explicit feature maps: scores `G_ij phi(scale Q_i) . phi(K_j)`.
pub fn linear_attention_form<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    let Mechanism::Linear(spec) = cfg.mechanism else {
        return expect(cfg, false, "linear_attention_form").map(|_| unreachable!());
    };
    cfg.validate(batch.shape.d)?;
    let expander = Expander::<T>::new(spec)?;
    let scale = T::of(cfg.scale_for(batch.shape.d));
    map_streams(batch, |s| {
        let dim = expander.dim();
        let mut phi_q = vec![T::zero(); s.t * dim];
        let mut phi_k = vec![T::zero(); s.t * dim];
        let mut scaled = vec![T::zero(); s.d];
        for i in 0..s.t {
            for (o, &x) in scaled.iter_mut().zip(s.q_row(i)) {
                *o = scale * x;
            }
            expander.expand_into(&scaled, &mut phi_q[i * dim..(i + 1) * dim]);
            expander.expand_into(s.k_row(i), &mut phi_k[i * dim..(i + 1) * dim]);
        }
        let mut out = StreamOutput { y: vec![T::zero(); s.t * s.v], zeta: vec![T::zero(); s.t] };
        let mut g = Vec::new();
        for i in 0..s.t {
            gate_products(s, 0, i, &mut g);
            let fq = &phi_q[i * dim..(i + 1) * dim];
            let mut z = T::zero();
            for j in 0..=i {
                let a = g[j] * dot(fq, &phi_k[j * dim..(j + 1) * dim]);
                z += a;
                axpy(a, s.v_row(j), &mut out.y[i * s.v..(i + 1) * s.v]);
            }
            out.zeta[i] = z;
        }
        if cfg.normalize {
            normalize_rows(&mut out, s.v)?;
        }
        Ok(out)
    })
}

/// Dispatches on `cfg.mechanism` to the matching attention-form routine.
pub fn attention<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    match cfg.mechanism {
        Mechanism::Exp => exp_attention(batch, cfg),
        Mechanism::Window(_) => window_attention(batch, cfg),
        Mechanism::Linear(_) => linear_attention_form(batch, cfg),
        Mechanism::Power(_) => power_attention_form(batch, cfg),
    }
}
