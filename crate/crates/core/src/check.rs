//! Correctness suites run by the `check` and `equiv` commands.
//!
//! Every test yields a [`CheckRecord`]; a run passes iff all records pass.
//! Instance `i` of a suite uses seed `cfg.seed + i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention, AttentionConfig};
use crate::bench::{cast_batch, generate_batch, Dtype};
use crate::chunked::{chunked_power_attention, discumsum, recurrent_power_attention, ChunkPlan, ChunkState, PowerAttentionStream};
use crate::error::{Error, Result};
use crate::expansions::{expansion_inner, ExpansionKind, ExpansionSpec};
use crate::gradients::{finite_difference, vjp_attention, vjp_chunked, GradBundle};
use crate::scalar::Scalar;
use crate::tensor::{max_abs_error, max_rel_error, BatchShape, SequenceBatch};

pub const EQUIV_TOL_F64: f64 = 1e-8;
pub const EQUIV_TOL_F32: f64 = 5e-3;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;
pub const LOG_SPACE_TOL: f64 = 1e-6;
/// Scores smaller than this (after scaling) are excluded from the log-space comparison.
pub const LOG_SPACE_MIN_SCORE: f64 = 1e-3;
pub const INNER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckConfig {
    pub kind: ExpansionKind,
    pub p: u32,
    pub d: usize,
    pub v: usize,
    pub d_tile: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub b: usize,
    pub dtype: Dtype,
    pub seed: u64,
    pub instances: usize,
    pub normalize: bool,
    pub gating: bool,
    pub scale: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            kind: ExpansionKind::Spow,
            p: 2,
            d: 4,
            v: 4,
            d_tile: 2,
            t: 16,
            c: 5,
            h: 2,
            b: 1,
            dtype: Dtype::F64,
            seed: 0,
            instances: 20,
            normalize: false,
            gating: false,
            scale: None,
        }
    }
}

impl CheckConfig {
    pub fn spec(&self) -> Result<ExpansionSpec> {
        ExpansionSpec::new(self.kind, self.p, self.d, self.d_tile)
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::power(self.spec()?).normalized(self.normalize);
        if let Some(s) = self.scale {
            cfg = cfg.with_scale(s);
        }
        cfg.validate(self.d)?;
        Ok(cfg)
    }

    pub fn shape(&self) -> BatchShape {
        BatchShape::new(self.b, self.t, self.h, self.d, self.v)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.b, self.t, self.h, self.d, self.v, self.c, self.instances].contains(&0) {
            return Err(Error::InvalidConfig("dimensions and instance count must be positive".into()));
        }
        self.attention_config()?;
        ChunkPlan::new(self.t, self.c)?;
        Ok(())
    }

    pub fn equiv_tol(&self) -> f64 {
        match self.dtype {
            Dtype::F32 => EQUIV_TOL_F32,
            Dtype::F64 => EQUIV_TOL_F64,
        }
    }

    fn params(&self) -> String {
        format!(
            "kind={} p={} d={} v={} t={} c={} h={} b={} dtype={:?} normalize={} gating={}",
            self.kind, self.p, self.d, self.v, self.t, self.c, self.h, self.b, self.dtype, self.normalize, self.gating
        )
        .to_lowercase()
    }

    /// A chunk size different from `c`, for the chunk-independence test.
    fn other_chunk(&self) -> usize {
        if self.c > 1 {
            self.c / 2
        } else {
            self.t
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub suite: String,
    pub test: String,
    pub seed: u64,
    pub params: String,
    pub error: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckRecord {
    fn new(suite: &str, test: &str, seed: u64, params: String, error: f64, tol: f64) -> Self {
        Self { suite: suite.into(), test: test.into(), seed, params, error, tol, pass: error <= tol }
    }
}

fn instance<T: Scalar>(cfg: &CheckConfig, seed: u64) -> Result<SequenceBatch<T>> {
    Ok(cast_batch(&generate_batch(cfg.shape(), cfg.gating, seed)?))
}

/// `|<phi x, phi y> - (x.y)^p| / max(1, |x.y|^p)` over random vectors.
pub fn inner_product_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    let spec = cfg.spec()?;
    (0..cfg.instances as u64)
        .map(|i| {
            let seed = cfg.seed + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let y: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let want = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().powi(cfg.p as i32);
            let got = expansion_inner(&x, &y, &spec)?;
            let err = (got - want).abs() / want.abs().max(1.0);
            Ok(CheckRecord::new("inner_product", "identity", seed, cfg.params(), err, INNER_TOL))
        })
        .collect()
}

fn equivalence_typed<T: Scalar>(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    let att = cfg.attention_config()?;
    let plan = ChunkPlan::new(cfg.t, cfg.c)?;
    let other = ChunkPlan::new(cfg.t, cfg.other_chunk())?;
    let tol = cfg.equiv_tol();
    let mut out = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = cfg.seed + i;
        let batch = instance::<T>(cfg, seed)?;
        let a = attention(&batch, &att)?.y;
        let r = recurrent_power_attention(&batch, &att)?.y;
        let c = chunked_power_attention(&batch, &att, &plan)?.y;
        let c2 = chunked_power_attention(&batch, &att, &other)?.y;
        for (test, x, y, tol) in [
            ("attention_vs_recurrent", &r, &a, tol),
            ("attention_vs_chunked", &c, &a, tol),
            ("recurrent_vs_chunked", &c, &r, tol),
            ("chunk_size_independence", &c2, &c, 2.0 * tol),
        ] {
            out.push(CheckRecord::new("equivalence", test, seed, cfg.params(), max_rel_error(x, y), tol));
        }
    }
    Ok(out)
}

/// Attention, recurrent and chunked outputs agree, and chunked output does
/// not depend on the chunk size.
pub fn equivalence_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    match cfg.dtype {
        Dtype::F32 => equivalence_typed::<f32>(cfg),
        Dtype::F64 => equivalence_typed::<f64>(cfg),
    }
}

fn streaming_typed<T: Scalar>(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    let att = cfg.attention_config()?;
    let plan = ChunkPlan::new(cfg.t, cfg.c)?;
    let mut out = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = cfg.seed + i;
        let batch = instance::<T>(cfg, seed)?;
        let mut err: f64 = 0.0;
        for s in batch.streams() {
            let mut stream = PowerAttentionStream::new(&att, cfg.d, cfg.v)?;
            let mut y = Vec::with_capacity(s.t * s.v);
            for r in plan.ranges() {
                y.extend(stream.step(&s.slice(r))?.y);
            }
            let single = SequenceBatch::single(s.d, s.v, s.q, s.k, s.values, s.gates)?;
            err = err.max(max_rel_error(&y, &attention(&single, &att)?.y));
        }
        out.push(CheckRecord::new("streaming", "chunk_by_chunk", seed, cfg.params(), err, cfg.equiv_tol()));
    }
    Ok(out)
}

/// Feeding chunks one at a time through a persistent state reproduces the
/// full-sequence output.
pub fn streaming_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    match cfg.dtype {
        Dtype::F32 => streaming_typed::<f32>(cfg),
        Dtype::F64 => streaming_typed::<f64>(cfg),
    }
}

fn flatten(b: &SequenceBatch<f64>) -> Vec<f64> {
    let mut x = [b.q.as_slice(), &b.k, &b.v].concat();
    x.extend(b.gates.iter().flatten());
    x
}

fn rebuild(b: &SequenceBatch<f64>, x: &[f64]) -> SequenceBatch<f64> {
    let (nq, nv) = (b.q.len(), b.v.len());
    SequenceBatch {
        shape: b.shape,
        q: x[..nq].to_vec(),
        k: x[nq..2 * nq].to_vec(),
        v: x[2 * nq..2 * nq + nv].to_vec(),
        gates: b.gates.as_ref().map(|_| x[2 * nq + nv..].to_vec()),
    }
}

fn flatten_grads(g: &GradBundle<f64>) -> Vec<f64> {
    let mut x = [g.dq.as_slice(), &g.dk, &g.dv].concat();
    x.extend(g.dgates.iter().flatten());
    x
}

/// Relative error of an analytic gradient against its numeric estimate. An
/// analytic gradient that is exactly zero is compared absolutely, since the
/// numeric side then only holds rounding noise.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.iter().all(|&x| x == 0.0) {
        return if max_abs_error(analytic, numeric) < 1e-10 { 0.0 } else { f64::INFINITY };
    }
    max_rel_error(analytic, numeric)
}

/// Analytic VJPs of the attention and chunked forms against central
/// differences. Always run in `f64`.
///
/// Gates are pulled from `[0.9, 1]` into `[0.9, 0.99]` so that the
/// difference probes stay inside the valid gate range.
pub fn gradient_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    let att = cfg.attention_config()?;
    let plan = ChunkPlan::new(cfg.t, cfg.c)?;
    let params = cfg.params().replace("dtype=f32", "dtype=f64");
    let mut out = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = cfg.seed + i;
        let mut batch = instance::<f64>(cfg, seed)?;
        batch.gates.iter_mut().flatten().for_each(|g| *g = 0.9 + 0.9 * (*g - 0.9));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let upstream: Vec<f64> = (0..batch.v.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let x = flatten(&batch);

        let analytic = flatten_grads(&vjp_attention(&batch, &att, &upstream)?);
        let numeric = finite_difference(|x| attention(&rebuild(&batch, x), &att).map(|o| o.y).unwrap_or_default(), &x, &upstream, GRAD_STEP);
        out.push(CheckRecord::new("gradients", "attention_vjp", seed, params.clone(), gradient_error(&analytic, &numeric), GRAD_TOL));

        let analytic = flatten_grads(&vjp_chunked(&batch, &att, &plan, &upstream)?);
        let numeric = finite_difference(
            |x| chunked_power_attention(&rebuild(&batch, x), &att, &plan).map(|o| o.y).unwrap_or_default(),
            &x,
            &upstream,
            GRAD_STEP,
        );
        out.push(CheckRecord::new("gradients", "chunked_vjp", seed, params.clone(), gradient_error(&analytic, &numeric), GRAD_TOL));
    }
    Ok(out)
}

/// Individual scores through the stabilized log-space path against the
/// direct power, for even `p`. Each score is read off a length-1 sequence
/// with value 1, whose unnormalized output is exactly the score.
pub fn log_space_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    if cfg.p % 2 == 1 {
        return Ok(Vec::new());
    }
    let direct = AttentionConfig { normalize: false, ..cfg.attention_config()? };
    let logs = direct.log_space(true);
    let n = 64;
    let shape = BatchShape::new(n, 1, 1, cfg.d, 1);
    let mut out = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = cfg.seed + i;
        let mut batch = generate_batch(shape, false, seed)?;
        batch.v.fill(1.0);
        let a = attention(&batch, &direct)?.y;
        let b = attention(&batch, &logs)?.y;
        let scale = direct.scale_for(cfg.d);
        let err = (0..n)
            .filter(|&j| {
                let s: f64 = batch.q[j * cfg.d..(j + 1) * cfg.d].iter().zip(&batch.k[j * cfg.d..(j + 1) * cfg.d]).map(|(x, y)| x * y).sum();
                (scale * s).abs() >= LOG_SPACE_MIN_SCORE
            })
            .map(|j| (a[j] - b[j]).abs() / a[j].abs())
            .fold(0.0, f64::max);
        out.push(CheckRecord::new("log_space", "score_vs_direct", seed, cfg.params(), err, LOG_SPACE_TOL));
    }
    Ok(out)
}

fn random_states(rng: &mut ChaCha8Rng, spec: ExpansionSpec, v: usize, n: usize) -> Result<Vec<ChunkState<f64>>> {
    (0..n)
        .map(|_| {
            let mut s = ChunkState::zeros(spec, v)?;
            s.s.iter_mut().chain(s.gamma.iter_mut()).for_each(|x| *x = rng.gen_range(-1.0..=1.0));
            Ok(s)
        })
        .collect()
}

/// `discumsum` against a plain sequential loop; any difference fails.
pub fn discumsum_suite(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    let spec = cfg.spec()?;
    let mut out = Vec::new();
    for i in 0..cfg.instances as u64 {
        let seed = cfg.seed + i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let states = random_states(&mut rng, spec, cfg.v, n)?;
        let carries: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let got = discumsum(&states, &carries)?;
        let mut acc = states[0].clone();
        let mut mismatches = usize::from(got[0] != acc);
        for k in 1..n {
            for (a, x) in acc.s.iter_mut().zip(&states[k].s) {
                *a = carries[k - 1] * *a + *x;
            }
            for (a, x) in acc.gamma.iter_mut().zip(&states[k].gamma) {
                *a = carries[k - 1] * *a + *x;
            }
            mismatches += usize::from(got[k] != acc);
        }
        out.push(CheckRecord::new("discumsum", "bit_exact", seed, cfg.params(), mismatches as f64, 0.0));
    }
    Ok(out)
}

/// Every suite, in a fixed order.
pub fn run_checks(cfg: &CheckConfig) -> Result<Vec<CheckRecord>> {
    cfg.validate()?;
    let mut out = inner_product_suite(cfg)?;
    out.extend(equivalence_suite(cfg)?);
    out.extend(streaming_suite(cfg)?);
    out.extend(gradient_suite(cfg)?);
    out.extend(log_space_suite(cfg)?);
    out.extend(discumsum_suite(cfg)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivRow {
    pub pair: String,
    pub max_abs: f64,
    pub max_rel: f64,
}

fn equiv_typed<T: Scalar>(cfg: &CheckConfig) -> Result<Vec<EquivRow>> {
    let att = cfg.attention_config()?;
    let batch = instance::<T>(cfg, cfg.seed)?;
    let a = attention(&batch, &att)?.y;
    let r = recurrent_power_attention(&batch, &att)?.y;
    let c = chunked_power_attention(&batch, &att, &ChunkPlan::new(cfg.t, cfg.c)?)?.y;
    Ok([("attention_vs_recurrent", &r, &a), ("attention_vs_chunked", &c, &a), ("recurrent_vs_chunked", &c, &r)]
        .into_iter()
        .map(|(pair, x, y)| EquivRow { pair: pair.into(), max_abs: max_abs_error(x, y), max_rel: max_rel_error(x, y) })
        .collect())
}

/// One comparison of the three forms on the inputs for `cfg.seed`.
pub fn equiv(cfg: &CheckConfig) -> Result<Vec<EquivRow>> {
    cfg.validate()?;
    match cfg.dtype {
        Dtype::F32 => equiv_typed::<f32>(cfg),
        Dtype::F64 => equiv_typed::<f64>(cfg),
    }
}
