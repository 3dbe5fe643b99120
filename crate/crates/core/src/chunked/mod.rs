//! Linear-cost evaluation of power attention.
//!
//! The chunked pipeline is split into four kernels: intra-chunk attention,
//! `update_state` (per-chunk state contributions through a fused
//! expand-and-multiply), `discumsum` (gated accumulation across chunks) and
//! `query_state` (reading the accumulated state with expanded queries, fused
//! with the intra-chunk output and the normalization).

mod state;

pub use state::{discumsum, ChunkPlan, ChunkState};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::attention::{attend_stream, normalize_rows, AttentionConfig, Mechanism, RowKernel};
use crate::error::{check_len, Error, Result};
use crate::expansions::{expansion_dim, ExpansionSpec, Expander};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{AttentionOutput, SequenceBatch, Stream, StreamOutput};

/// Default cap on materialized state elements (`(n_chunks + 1) * D * (v + 1)`).
pub const DEFAULT_STATE_BUDGET: u128 = 1 << 27;

/// Stage names used in MAC counts and timings.
pub mod stage {
    pub const INTRA_ATTENTION: &str = "intra_attention";
    pub const EXPANSION: &str = "expansion";
    pub const UPDATE_STATE: &str = "update_state";
    pub const DISCUMSUM: &str = "discumsum";
    pub const QUERY_STATE: &str = "query_state";
}

/// Multiply-accumulate counts and wall time per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageStats {
    pub macs: BTreeMap<&'static str, u64>,
    pub nanos: BTreeMap<&'static str, u64>,
}

impl StageStats {
    fn add_macs(&mut self, stage: &'static str, n: u64) {
        *self.macs.entry(stage).or_default() += n;
    }

    fn add_time(&mut self, stage: &'static str, since: Instant) {
        *self.nanos.entry(stage).or_default() += since.elapsed().as_nanos() as u64;
    }

    pub fn merge(&mut self, other: &StageStats) {
        for (k, v) in &other.macs {
            *self.macs.entry(k).or_default() += v;
        }
        for (k, v) in &other.nanos {
            *self.nanos.entry(k).or_default() += v;
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }
}

/// `prod_{k=j+1..c} g_k` for each position `j` of a chunk.
pub(crate) fn decay_to_end<T: Scalar>(gates: Option<&[T]>, c: usize) -> Vec<T> {
    let mut w = vec![T::one(); c];
    if let Some(g) = gates {
        let mut acc = T::one();
        for j in (0..c).rev() {
            w[j] = acc;
            acc *= g[j];
        }
    }
    w
}

/// `prod_{k=0..=m} g_k` for each position `m` of a chunk.
pub(crate) fn decay_from_start<T: Scalar>(gates: Option<&[T]>, c: usize) -> Vec<T> {
    let mut w = vec![T::one(); c];
    if let Some(g) = gates {
        let mut acc = T::one();
        for m in 0..c {
            acc *= g[m];
            w[m] = acc;
        }
    }
    w
}

pub(crate) fn update_state_with<T: Scalar>(
    expander: &Expander<T>,
    k: &[T],
    vals: &[T],
    gates: Option<&[T]>,
    v: usize,
    stats: &mut StageStats,
) -> Result<(ChunkState<T>, T)> {
    let d = expander.spec().d;
    let c = k.len() / d;
    check_len("update_state keys", c * d, k.len())?;
    check_len("update_state values", c * v, vals.len())?;
    if let Some(g) = gates {
        check_len("update_state gates", c, g.len())?;
    }
    let dim = expander.dim();
    let bl = expander.block_len();
    let mut out = ChunkState { spec: *expander.spec(), v, s: vec![T::zero(); dim * v], gamma: vec![T::zero(); dim] };
    let weights = decay_to_end(gates, c);
    let lambda = gates.map_or(T::one(), |g| g.iter().fold(T::one(), |acc, &x| acc * x));
    let mut tile = vec![T::zero(); bl];
    for l in 0..expander.n_blocks() {
        let rows = &mut out.s[l * bl * v..(l + 1) * bl * v];
        let gamma = &mut out.gamma[l * bl..(l + 1) * bl];
        for j in 0..c {
            expander.expand_block(l, &k[j * d..(j + 1) * d], &mut tile);
            let value = &vals[j * v..(j + 1) * v];
            for (e, &phi) in tile.iter().enumerate() {
                let coef = phi * weights[j];
                gamma[e] += coef;
                axpy(coef, value, &mut rows[e * v..(e + 1) * v]);
            }
        }
        stats.add_macs(stage::UPDATE_STATE, (c * bl * (v + 2)) as u64);
    }
    stats.add_macs(stage::EXPANSION, c as u64 * expander.muls_per_vector());
    Ok((out, lambda))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn query_state_with<T: Scalar>(
    expander: &Expander<T>,
    state: &ChunkState<T>,
    q: &[T],
    y_attn: &[T],
    zeta: &[T],
    gates_prefix: &[T],
    normalize: bool,
    stats: &mut StageStats,
) -> Result<StreamOutput<T>> {
    let d = expander.spec().d;
    let v = state.v;
    let c = q.len() / d;
    check_len("query_state queries", c * d, q.len())?;
    check_len("query_state intra output", c * v, y_attn.len())?;
    check_len("query_state zeta", c, zeta.len())?;
    check_len("query_state gate prefix", c, gates_prefix.len())?;
    check_len("query_state state", expander.dim(), state.dim())?;
    let bl = expander.block_len();
    let mut num = vec![T::zero(); c * v];
    let mut den = vec![T::zero(); c];
    let mut tile = vec![T::zero(); bl];
    for l in 0..expander.n_blocks() {
        let rows = &state.s[l * bl * v..(l + 1) * bl * v];
        let gamma = &state.gamma[l * bl..(l + 1) * bl];
        for m in 0..c {
            expander.expand_block(l, &q[m * d..(m + 1) * d], &mut tile);
            let acc = &mut num[m * v..(m + 1) * v];
            for (e, &phi) in tile.iter().enumerate() {
                axpy(phi, &rows[e * v..(e + 1) * v], acc);
            }
            den[m] += dot(&tile, gamma);
        }
        stats.add_macs(stage::QUERY_STATE, (c * bl * (v + 1)) as u64);
    }
    stats.add_macs(stage::EXPANSION, c as u64 * expander.muls_per_vector());
    stats.add_macs(stage::QUERY_STATE, (c * (v + 1)) as u64);
    let mut y = y_attn.to_vec();
    let mut z = zeta.to_vec();
    for m in 0..c {
        let gp = gates_prefix[m];
        z[m] += gp * den[m];
        for (o, &n) in y[m * v..(m + 1) * v].iter_mut().zip(&num[m * v..(m + 1) * v]) {
            *o += gp * n;
        }
    }
    let mut out = StreamOutput { y, zeta: z };
    if normalize {
        normalize_rows(&mut out, v)?;
    }
    Ok(out)
}

/// Per-chunk state contribution `(sum_j W_j phi(K_j) V_j^T, sum_j W_j phi(K_j))`
/// with `W_j = prod_{k>j} g_k` inside the chunk, plus the chunk's total decay.
///
/// The incoming state is not added; accumulation across chunks is [`discumsum`]'s job.
pub fn update_state<T: Scalar>(
    spec: &ExpansionSpec,
    k_chunk: &[T],
    v_chunk: &[T],
    gates_chunk: Option<&[T]>,
) -> Result<(ChunkState<T>, T)> {
    let expander = Expander::new(*spec)?;
    let c = k_chunk.len() / spec.d;
    if c == 0 || v_chunk.len() % c != 0 {
        return Err(Error::ShapeMismatch(format!(
            "chunk of {} keys with {} value entries",
            c,
            v_chunk.len()
        )));
    }
    update_state_with(&expander, k_chunk, v_chunk, gates_chunk, v_chunk.len() / c, &mut StageStats::default())
}

/// Combines intra-chunk output with the incoming state:
/// `(Y_attn + gp * phi(Q) S) / (zeta + gp * phi(Q) gamma)`, without the
/// division when `normalize` is false.
///
/// `q_chunk` must already carry the attention scale. The returned `zeta` holds
/// the full denominators.
pub fn query_state<T: Scalar>(
    state: &ChunkState<T>,
    q_chunk: &[T],
    y_attn: &[T],
    zeta: &[T],
    gates_prefix: &[T],
    normalize: bool,
) -> Result<StreamOutput<T>> {
    let expander = Expander::new(state.spec)?;
    query_state_with(&expander, state, q_chunk, y_attn, zeta, gates_prefix, normalize, &mut StageStats::default())
}

/// Reusable chunked/recurrent evaluator for one config and head geometry.
#[derive(Debug, Clone)]
pub struct ChunkEngine<T> {
    cfg: AttentionConfig,
    expander: Expander<T>,
    kern: RowKernel<T>,
    d: usize,
    v: usize,
    budget: u128,
}

impl<T: Scalar> ChunkEngine<T> {
    pub fn new(cfg: &AttentionConfig, d: usize, v: usize) -> Result<Self> {
        cfg.validate(d)?;
        let spec = match cfg.mechanism {
            Mechanism::Power(spec) | Mechanism::Linear(spec) => spec,
            other => {
                return Err(Error::InvalidConfig(format!("{other:?} has no finite-state form")));
            }
        };
        if v == 0 {
            return Err(Error::InvalidConfig("v must be at least 1".into()));
        }
        let mut kern = RowKernel::from_config(cfg, d);
        kern.window = None;
        Ok(Self { cfg: *cfg, expander: Expander::new(spec)?, kern, d, v, budget: DEFAULT_STATE_BUDGET })
    }

    pub fn with_state_budget(mut self, elements: u128) -> Self {
        self.budget = elements;
        self
    }

    pub fn spec(&self) -> &ExpansionSpec {
        self.expander.spec()
    }

    pub fn expander(&self) -> &Expander<T> {
        &self.expander
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub(crate) fn kernel(&self) -> &RowKernel<T> {
        &self.kern
    }

    pub fn zero_state(&self) -> ChunkState<T> {
        ChunkState {
            spec: *self.spec(),
            v: self.v,
            s: vec![T::zero(); self.expander.dim() * self.v],
            gamma: vec![T::zero(); self.expander.dim()],
        }
    }

    pub(crate) fn check_budget(&self, states: usize) -> Result<()> {
        let elements = states as u128 * self.expander.dim() as u128 * (self.v as u128 + 1);
        if elements > self.budget {
            return Err(Error::StateTooLarge { elements, budget: self.budget });
        }
        Ok(())
    }

    pub(crate) fn check_stream(&self, s: &Stream<T>) -> Result<()> {
        check_len("stream d", self.d, s.d)?;
        check_len("stream v", self.v, s.v)
    }

    pub(crate) fn scaled_queries(&self, s: &Stream<T>) -> Vec<T> {
        s.q.iter().map(|&x| self.kern.scale * x).collect()
    }

    /// Token-by-token recurrence `S_i = g_i S_{i-1} + phi(K_i) V_i^T`,
    /// `gamma_i = g_i gamma_{i-1} + phi(K_i)`, `y_i = phi(Q_i) S_i`.
    pub fn recurrent_stream(&self, s: &Stream<T>, init: Option<&ChunkState<T>>) -> Result<(StreamOutput<T>, ChunkState<T>)> {
        self.check_stream(s)?;
        self.check_budget(1)?;
        let mut state = match init {
            Some(st) => {
                check_len("initial state", self.expander.dim(), st.dim())?;
                st.clone()
            }
            None => self.zero_state(),
        };
        let (dim, v) = (self.expander.dim(), self.v);
        let mut phi_k = vec![T::zero(); dim];
        let mut phi_q = vec![T::zero(); dim];
        let q = self.scaled_queries(s);
        let mut out = StreamOutput { y: vec![T::zero(); s.t * v], zeta: vec![T::zero(); s.t] };
        for i in 0..s.t {
            let g = s.gate(i);
            self.expander.expand_into(s.k_row(i), &mut phi_k);
            self.expander.expand_into(&q[i * s.d..(i + 1) * s.d], &mut phi_q);
            let value = s.v_row(i);
            let y = &mut out.y[i * v..(i + 1) * v];
            let mut z = T::zero();
            for e in 0..dim {
                let row = &mut state.s[e * v..(e + 1) * v];
                for (r, &x) in row.iter_mut().zip(value) {
                    *r = g * *r + phi_k[e] * x;
                }
                state.gamma[e] = g * state.gamma[e] + phi_k[e];
                axpy(phi_q[e], row, y);
                z += phi_q[e] * state.gamma[e];
            }
            out.zeta[i] = z;
        }
        if self.cfg.normalize {
            normalize_rows(&mut out, v)?;
        }
        Ok((out, state))
    }

    /// Chunked evaluation of one stream, starting from `init` (zero if `None`).
    /// Returns the outputs and the state after the last token.
    pub fn run_stream(
        &self,
        s: &Stream<T>,
        plan: &ChunkPlan,
        init: Option<&ChunkState<T>>,
        stats: &mut StageStats,
    ) -> Result<(StreamOutput<T>, ChunkState<T>)> {
        self.check_stream(s)?;
        check_len("chunk plan t", s.t, plan.t)?;
        self.check_budget(plan.n_chunks + 1)?;
        let (d, v) = (self.d, self.v);
        let q = self.scaled_queries(s);

        let mut intra = Vec::with_capacity(plan.n_chunks);
        let mut contributions = Vec::with_capacity(plan.n_chunks + 1);
        let mut carries = Vec::with_capacity(plan.n_chunks);
        contributions.push(match init {
            Some(st) => {
                check_len("initial state", self.expander.dim(), st.dim())?;
                st.clone()
            }
            None => self.zero_state(),
        });
        for range in plan.ranges() {
            let chunk = s.slice(range.clone());
            let started = Instant::now();
            intra.push(attend_stream(&chunk, &self.kern));
            let len = range.len() as u64;
            stats.add_macs(stage::INTRA_ATTENTION, len * (len + 1) / 2 * (d + v) as u64);
            stats.add_time(stage::INTRA_ATTENTION, started);

            let started = Instant::now();
            let (contribution, lambda) =
                update_state_with(&self.expander, &chunk.k, &chunk.values, chunk.gates.as_deref(), v, stats)?;
            contributions.push(contribution);
            carries.push(lambda);
            stats.add_time(stage::UPDATE_STATE, started);
        }

        let started = Instant::now();
        let mut accumulated = discumsum(&contributions, &carries)?;
        stats.add_macs(stage::DISCUMSUM, (plan.n_chunks * self.expander.dim() * (v + 1)) as u64);
        stats.add_time(stage::DISCUMSUM, started);

        let started = Instant::now();
        let mut out = StreamOutput { y: Vec::with_capacity(s.t * v), zeta: Vec::with_capacity(s.t) };
        for (n, range) in plan.ranges().enumerate() {
            let gates = s.gates.as_ref().map(|g| &g[range.clone()]);
            let prefix = decay_from_start(gates, range.len());
            let part = query_state_with(
                &self.expander,
                &accumulated[n],
                &q[range.start * d..range.end * d],
                &intra[n].y,
                &intra[n].zeta,
                &prefix,
                self.cfg.normalize,
                stats,
            )
            .map_err(|e| match e {
                Error::ZeroDenominator { position } => Error::ZeroDenominator { position: position + range.start },
                other => other,
            })?;
            out.y.extend_from_slice(&part.y);
            out.zeta.extend_from_slice(&part.zeta);
        }
        stats.add_time(stage::QUERY_STATE, started);
        let last = accumulated.pop().expect("at least the initial state");
        Ok((out, last))
    }
}

fn engine_for<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<ChunkEngine<T>> {
    batch.validate()?;
    ChunkEngine::new(cfg, batch.shape.d, batch.shape.v)
}

fn run_batch<T, F>(batch: &SequenceBatch<T>, f: F) -> Result<(AttentionOutput<T>, StageStats)>
where
    T: Scalar,
    F: Fn(&Stream<T>) -> Result<(StreamOutput<T>, StageStats)> + Sync + Send,
{
    batch.check_finite()?;
    let results = batch.streams().par_iter().map(&f).collect::<Result<Vec<_>>>()?;
    let mut stats = StageStats::default();
    let outputs: Vec<StreamOutput<T>> = results
        .into_iter()
        .map(|(o, st)| {
            stats.merge(&st);
            o
        })
        .collect();
    Ok((AttentionOutput::gather(batch.shape, &outputs), stats))
}

/// Recurrent form of power (or explicit linear) attention, from a zero state.
pub fn recurrent_power_attention<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig) -> Result<AttentionOutput<T>> {
    let engine = engine_for(batch, cfg)?;
    run_batch(batch, |s| Ok((engine.recurrent_stream(s, None)?.0, StageStats::default()))).map(|r| r.0)
}

/// Chunked form from a zero state.
pub fn chunked_power_attention<T: Scalar>(
    batch: &SequenceBatch<T>,
    cfg: &AttentionConfig,
    plan: &ChunkPlan,
) -> Result<AttentionOutput<T>> {
    chunked_power_attention_with_stats(batch, cfg, plan).map(|r| r.0)
}

/// Chunked form that also reports per-stage MAC counts and timings, summed over streams.
pub fn chunked_power_attention_with_stats<T: Scalar>(
    batch: &SequenceBatch<T>,
    cfg: &AttentionConfig,
    plan: &ChunkPlan,
) -> Result<(AttentionOutput<T>, StageStats)> {
    let engine = engine_for(batch, cfg)?;
    run_batch(batch, |s| {
        let mut stats = StageStats::default();
        let (out, _) = engine.run_stream(s, plan, None, &mut stats)?;
        Ok((out, stats))
    })
}

/// Constant-memory streaming evaluation of one `(batch, head)` stream.
///
/// Each call to [`PowerAttentionStream::step`] consumes the next tokens as one
/// chunk and carries the state forward.
#[derive(Debug, Clone)]
pub struct PowerAttentionStream<T> {
    engine: ChunkEngine<T>,
    state: ChunkState<T>,
    position: usize,
}

impl<T: Scalar> PowerAttentionStream<T> {
    pub fn new(cfg: &AttentionConfig, d: usize, v: usize) -> Result<Self> {
        let engine = ChunkEngine::new(cfg, d, v)?;
        let state = engine.zero_state();
        Ok(Self { engine, state, position: 0 })
    }

    pub fn with_state(cfg: &AttentionConfig, d: usize, v: usize, state: ChunkState<T>) -> Result<Self> {
        let mut stream = Self::new(cfg, d, v)?;
        check_len("initial state", stream.state.dim(), state.dim())?;
        stream.state = state;
        Ok(stream)
    }

    pub fn state(&self) -> &ChunkState<T> {
        &self.state
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn step(&mut self, chunk: &Stream<T>) -> Result<StreamOutput<T>> {
        let (out, next) = process_chunk(&self.engine, &self.state, chunk)?;
        self.state = next;
        self.position += chunk.t;
        Ok(out)
    }
}

/// `(state, chunk) -> (outputs, next state)`.
pub fn process_chunk<T: Scalar>(
    engine: &ChunkEngine<T>,
    state: &ChunkState<T>,
    chunk: &Stream<T>,
) -> Result<(StreamOutput<T>, ChunkState<T>)> {
    let plan = ChunkPlan::new(chunk.t, chunk.t)?;
    engine.run_stream(chunk, &plan, Some(state), &mut StageStats::default())
}

/// Guard used by callers that size states up front.
pub fn state_elements(spec: &ExpansionSpec, v: usize, n_states: usize) -> Result<u128> {
    Ok(expansion_dim(spec)? as u128 * (v as u128 + 1) * n_states as u128)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::power_attention_form;

    fn single(d: usize, v: usize, q: &[f64], k: &[f64], vals: &[f64], gates: Option<&[f64]>) -> SequenceBatch<f64> {
        SequenceBatch::single(d, v, q.to_vec(), k.to_vec(), vals.to_vec(), gates.map(<[f64]>::to_vec)).unwrap()
    }

    fn cfg(p: u32, d: usize) -> AttentionConfig {
        AttentionConfig::power(ExpansionSpec::spow(p, d)).with_scale(1.0)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn update_state_single_key() {
        let spec = ExpansionSpec::spow(2, 2);
        let (st, lambda) = update_state(&spec, &[1.0f64, 0.0], &[5.0], Some(&[1.0])).unwrap();
        assert_eq!(st.s, vec![5.0, 0.0, 0.0]);
        assert_eq!(st.gamma, vec![1.0, 0.0, 0.0]);
        assert_eq!(lambda, 1.0);
    }

    #[test]
    fn update_state_zero_gate_drops_earlier_keys() {
        let spec = ExpansionSpec::spow(2, 1);
        let (st, lambda) = update_state(&spec, &[3.0f64, 2.0, 1.0], &[1.0, 10.0, 100.0], Some(&[0.5, 0.0, 0.5])).unwrap();
        // W_0 = g_1 g_2 = 0, W_1 = g_2 = 0.5, W_2 = 1
        assert_eq!(st.s, vec![0.5 * 4.0 * 10.0 + 100.0]);
        assert_eq!(lambda, 0.0);
    }

    #[test]
    fn query_state_examples() {
        let spec = ExpansionSpec::spow(2, 2);
        let state = ChunkState { spec, v: 1, s: vec![5.0f64, 0.0, 0.0], gamma: vec![1.0, 0.0, 0.0] };
        let out = query_state(&state, &[1.0, 0.0], &[0.0], &[0.0], &[1.0], true).unwrap();
        assert_eq!(out.y, vec![5.0]);
        let empty = ChunkState::zeros(spec, 1).unwrap();
        let out = query_state(&empty, &[0.3, 0.2], &[6.0], &[2.0], &[1.0], true).unwrap();
        assert_eq!(out.y, vec![3.0]);
        let out = query_state(&state, &[1.0, 0.0], &[6.0], &[2.0], &[0.0], true).unwrap();
        assert_eq!(out.y, vec![3.0]);
        assert_eq!(
            query_state(&empty, &[1.0, 0.0], &[0.0], &[0.0], &[1.0], true),
            Err(Error::ZeroDenominator { position: 0 })
        );
    }

    #[test]
    fn recurrent_worked_example() {
        let b = single(1, 1, &[1.0, 2.0], &[1.0, 2.0], &[10.0, 20.0], None);
        let out = recurrent_power_attention(&b, &cfg(2, 1)).unwrap();
        close(&out.y, &[10.0, 360.0], 1e-14);
        let g = single(1, 1, &[1.0, 2.0], &[1.0, 2.0], &[10.0, 20.0], Some(&[1.0, 0.0]));
        let out = recurrent_power_attention(&g, &cfg(2, 1)).unwrap();
        close(&out.y, &[10.0, 320.0], 1e-14);
    }

    #[test]
    fn chunked_prefix_sums() {
        let b = single(1, 1, &[1.0; 4], &[1.0; 4], &[1.0, 2.0, 3.0, 4.0], None);
        let out = chunked_power_attention(&b, &cfg(2, 1), &ChunkPlan::new(4, 2).unwrap()).unwrap();
        close(&out.y, &[1.0, 3.0, 6.0, 10.0], 1e-15);
    }

    #[test]
    fn chunked_matches_attention_small() {
        let q = [0.3, -0.5, 0.8, 0.1, -0.9, 0.4, 0.2, 0.7, -0.3, 0.6];
        let k = [-0.6, 0.2, 0.5, 0.7, 0.3, -0.1, 0.9, 0.4, -0.2, -0.8];
        let v = [1.0, -2.0, 0.5, 3.0, -1.5];
        let gates = [0.9, 0.5, 1.0, 0.7, 0.95];
        let b = single(2, 1, &q, &k, &v, Some(&gates));
        for norm in [false, true] {
            let c = AttentionConfig::power(ExpansionSpec::tpow(2, 2)).normalized(norm);
            let reference = power_attention_form(&b, &c).unwrap();
            let rec = recurrent_power_attention(&b, &c).unwrap();
            close(&rec.y, &reference.y, 1e-12);
            for chunk in 1..=6 {
                let out = chunked_power_attention(&b, &c, &ChunkPlan::new(5, chunk).unwrap()).unwrap();
                close(&out.y, &reference.y, 1e-12);
                close(out.rowsum.as_ref().unwrap(), reference.rowsum.as_ref().unwrap(), 1e-12);
            }
        }
    }

    #[test]
    fn streaming_matches_batch() {
        let q: Vec<f64> = (0..14).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let k: Vec<f64> = (0..14).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
        let v: Vec<f64> = (0..7).map(|i| i as f64 - 2.0).collect();
        let gates = vec![0.9; 7];
        let b = single(2, 1, &q, &k, &v, Some(&gates));
        let c = AttentionConfig::power(ExpansionSpec::spow(2, 2));
        let whole = power_attention_form(&b, &c).unwrap();
        let stream = b.stream(0, 0);
        let mut st = PowerAttentionStream::new(&c, 2, 1).unwrap();
        let mut ys = Vec::new();
        for range in [0..3, 3..4, 4..7] {
            ys.extend(st.step(&stream.slice(range)).unwrap().y);
        }
        assert_eq!(st.position(), 7);
        close(&ys, &whole.y, 1e-12);
    }

    #[test]
    fn state_budget_enforced() {
        let c = AttentionConfig::power(ExpansionSpec::spow(2, 2));
        let engine = ChunkEngine::<f64>::new(&c, 2, 1).unwrap().with_state_budget(10);
        let s = single(2, 1, &[0.1; 8], &[0.2; 8], &[1.0; 4], None).stream(0, 0);
        assert!(matches!(
            engine.run_stream(&s, &ChunkPlan::new(4, 1).unwrap(), None, &mut StageStats::default()),
            Err(Error::StateTooLarge { .. })
        ));
    }

    #[test]
    fn exp_has_no_state_form() {
        assert!(ChunkEngine::<f64>::new(&AttentionConfig::new(Mechanism::Exp), 2, 1).is_err());
    }
}
