//! Seeded input generation and timing of the evaluation forms.
//!
//! Inputs come from ChaCha8 (`rand_chacha`) seeded with the config seed, one
//! independent stream per tensor (Q = 0, K = 1, V = 2, gates = 3). Q, K and V
//! are uniform in `[-1, 1]`, gates uniform in `[0.9, 1]`. Values are drawn in
//! `f64` and rounded for `f32` runs, so both dtypes see the same inputs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention, AttentionConfig, Mechanism};
use crate::chunked::{chunked_power_attention_with_stats, recurrent_power_attention, stage, state_elements, ChunkPlan, DEFAULT_STATE_BUDGET};
use crate::error::{Error, Result};
use crate::expansions::{ExpansionKind, ExpansionSpec};
use crate::flops::{wsfr, ArchSpec, FlopReport};
use crate::scalar::Scalar;
use crate::tensor::{AttentionOutput, BatchShape, SequenceBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidConfig(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Attention,
    Recurrent,
    Chunked,
}

impl std::str::FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "recurrent" => Ok(Self::Recurrent),
            "chunked" => Ok(Self::Chunked),
            other => Err(Error::InvalidConfig(format!("unknown form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Power,
    Linear,
    Exp,
    Window,
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(Self::Power),
            "linear" => Ok(Self::Linear),
            "exp" => Ok(Self::Exp),
            "window" => Ok(Self::Window),
            other => Err(Error::InvalidConfig(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// Builds the attention mechanism for a kind and expansion parameters.
pub fn build_mechanism(
    kind: MechanismKind,
    expansion: ExpansionKind,
    p: u32,
    d: usize,
    d_tile: usize,
    window: Option<usize>,
) -> Result<Mechanism> {
    Ok(match kind {
        MechanismKind::Power => Mechanism::Power(ExpansionSpec::new(expansion, p, d, d_tile)?),
        MechanismKind::Linear => Mechanism::Linear(ExpansionSpec::new(expansion, p, d, d_tile)?),
        MechanismKind::Exp => Mechanism::Exp,
        MechanismKind::Window => {
            Mechanism::Window(window.ok_or_else(|| Error::InvalidConfig("window mechanism needs a window size".into()))?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub mechanism: MechanismKind,
    pub kind: ExpansionKind,
    pub p: u32,
    pub d_tile: usize,
    pub window: Option<usize>,
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub d: usize,
    pub v: usize,
    pub c: usize,
    pub dtype: Dtype,
    pub seed: u64,
    pub repeats: usize,
    pub warmup: usize,
    pub form: Form,
    pub normalize: bool,
    pub gating: bool,
    pub scale: Option<f64>,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mechanism: MechanismKind::Power,
            kind: ExpansionKind::Spow,
            p: 2,
            d_tile: 8,
            window: None,
            b: 1,
            t: 1024,
            h: 1,
            d: 16,
            v: 16,
            c: 64,
            dtype: Dtype::F64,
            seed: 0,
            repeats: 3,
            warmup: 1,
            form: Form::Chunked,
            normalize: false,
            gating: false,
            scale: None,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn shape(&self) -> BatchShape {
        BatchShape::new(self.b, self.t, self.h, self.d, self.v)
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let mech = build_mechanism(self.mechanism, self.kind, self.p, self.d, self.d_tile, self.window)?;
        let mut cfg = AttentionConfig::new(mech).normalized(self.normalize);
        if let Some(s) = self.scale {
            cfg = cfg.with_scale(s);
        }
        cfg.validate(self.d)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.b, self.t, self.h, self.d, self.v, self.c, self.repeats, self.threads];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("dimensions, repeats and threads must be positive: {self:?}")));
        }
        let cfg = self.attention_config()?;
        let finite_state = matches!(cfg.mechanism, Mechanism::Power(_) | Mechanism::Linear(_));
        if self.form != Form::Attention && !finite_state {
            return Err(Error::InvalidConfig(format!("{:?} form needs a power or linear mechanism", self.form)));
        }
        if self.form == Form::Chunked {
            let spec = cfg.mechanism.expansion().expect("checked above");
            let plan = ChunkPlan::new(self.t, self.c)?;
            let elements = state_elements(spec, self.v, plan.n_chunks + 1)?;
            if elements > DEFAULT_STATE_BUDGET {
                return Err(Error::StateTooLarge { elements, budget: DEFAULT_STATE_BUDGET });
            }
        }
        Ok(())
    }

    /// Single-layer architecture used for the FLOP report of a run.
    pub fn arch(&self) -> Result<ArchSpec> {
        Ok(ArchSpec {
            name: "bench".into(),
            n_params: 0,
            n_layers: 1,
            n_heads: self.h as u64,
            head_dim: self.d as u64,
            value_dim: self.v as u64,
            model_width: (self.h * self.d) as u64,
            mechanism: self.attention_config()?.mechanism,
            t: self.t as u64,
            chunk: (self.form == Form::Chunked).then_some(self.c as u64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub tokens_per_sec: f64,
    pub wall_ns_total: u64,
    pub per_op_ns: BTreeMap<String, u64>,
    pub flops: FlopReport,
    pub checksum: f64,
}

fn uniform(seed: u64, stream: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Deterministic inputs for `shape`; see the module docs for the distribution.
pub fn generate_batch(shape: BatchShape, gating: bool, seed: u64) -> Result<SequenceBatch<f64>> {
    let rows = shape.b * shape.t * shape.h;
    SequenceBatch::new(
        shape,
        uniform(seed, 0, rows * shape.d, -1.0, 1.0),
        uniform(seed, 1, rows * shape.d, -1.0, 1.0),
        uniform(seed, 2, rows * shape.v, -1.0, 1.0),
        gating.then(|| uniform(seed, 3, rows, 0.9, 1.0)),
    )
}

pub fn cast_batch<T: Scalar>(b: &SequenceBatch<f64>) -> SequenceBatch<T> {
    let cast = |x: &[f64]| x.iter().map(|&v| T::of(v)).collect::<Vec<T>>();
    SequenceBatch {
        shape: b.shape,
        q: cast(&b.q),
        k: cast(&b.k),
        v: cast(&b.v),
        gates: b.gates.as_deref().map(cast),
    }
}

struct Sample {
    wall: u64,
    stages: BTreeMap<String, u64>,
    checksum: f64,
}

fn run_once<T: Scalar>(cfg: &BenchConfig, att: &AttentionConfig, batch: &SequenceBatch<T>) -> Result<Sample> {
    let started = Instant::now();
    let (out, stages): (AttentionOutput<T>, BTreeMap<String, u64>) = match cfg.form {
        Form::Attention => (attention(batch, att)?, BTreeMap::new()),
        Form::Recurrent => (recurrent_power_attention(batch, att)?, BTreeMap::new()),
        Form::Chunked => {
            let (out, stats) = chunked_power_attention_with_stats(batch, att, &ChunkPlan::new(cfg.t, cfg.c)?)?;
            // Expansion time is already inside the update/query stages.
            let stages = stats
                .nanos
                .iter()
                .filter(|(k, _)| **k != stage::EXPANSION)
                .map(|(k, v)| (k.to_string(), *v))
                .collect();
            (out, stages)
        }
    };
    let wall = started.elapsed().as_nanos() as u64;
    let stages = if stages.is_empty() {
        BTreeMap::from([(format!("{:?}", cfg.form).to_lowercase(), wall)])
    } else {
        stages
    };
    Ok(Sample { wall, stages, checksum: out.checksum() })
}

fn bench_typed<T: Scalar>(cfg: &BenchConfig) -> Result<BenchResult> {
    let att = cfg.attention_config()?;
    let batch = cast_batch::<T>(&generate_batch(cfg.shape(), cfg.gating, cfg.seed)?);
    for _ in 0..cfg.warmup {
        run_once(cfg, &att, &batch)?;
    }
    let mut samples = (0..cfg.repeats).map(|_| run_once(cfg, &att, &batch)).collect::<Result<Vec<_>>>()?;
    samples.sort_by_key(|s| s.wall);
    let median = samples.swap_remove(samples.len() / 2);
    let wall_ns_total = median.wall.max(1) * cfg.repeats as u64;
    // Stage clocks are summed over streams; with several threads they can
    // exceed wall time, so they are scaled down to fit.
    let staged: u64 = median.stages.values().sum();
    let per_op_ns = if staged > median.wall {
        median.stages.iter().map(|(k, &v)| (k.clone(), (v as u128 * median.wall as u128 / staged as u128) as u64)).collect()
    } else {
        median.stages
    };
    Ok(BenchResult {
        config: cfg.clone(),
        tokens_per_sec: (cfg.b * cfg.t * cfg.repeats) as f64 / (wall_ns_total as f64 / 1e9),
        wall_ns_total,
        per_op_ns,
        flops: wsfr(&cfg.arch()?)?,
        checksum: median.checksum,
    })
}

/// Runs one benchmark configuration on a pool of `cfg.threads` threads.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.dtype {
        Dtype::F32 => bench_typed::<f32>(cfg),
        Dtype::F64 => bench_typed::<f64>(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let shape = BatchShape::new(2, 5, 3, 4, 2);
        let a = generate_batch(shape, true, 9).unwrap();
        assert_eq!(a, generate_batch(shape, true, 9).unwrap());
        assert_ne!(a.q, generate_batch(shape, true, 10).unwrap().q);
        assert_ne!(a.q, a.k);
        assert!(a.q.iter().chain(&a.k).chain(&a.v).all(|x| (-1.0..=1.0).contains(x)));
        assert!(a.gates.as_ref().unwrap().iter().all(|g| (0.9..=1.0).contains(g)));
    }

    #[test]
    fn budget_and_form_checks() {
        let cfg = BenchConfig { p: 4, d: 64, v: 64, t: 4096, c: 16, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::StateTooLarge { .. })));
        let cfg = BenchConfig { mechanism: MechanismKind::Exp, form: Form::Chunked, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = BenchConfig { p: 3, normalize: true, ..Default::default() };
        assert_eq!(cfg.validate(), Err(Error::OddPowerWithNormalize(3)));
    }

    #[test]
    fn repeats_do_not_change_checksum() {
        let base = BenchConfig { t: 64, c: 8, d: 4, v: 4, repeats: 1, warmup: 0, gating: true, ..Default::default() };
        let one = run_bench(&base).unwrap();
        let five = run_bench(&BenchConfig { repeats: 5, ..base.clone() }).unwrap();
        assert_eq!(one.checksum, five.checksum);
        assert!(one.per_op_ns.values().sum::<u64>() <= one.wall_ns_total);
        assert_eq!(one.per_op_ns.len(), 4);
    }
}
