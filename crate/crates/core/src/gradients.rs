//! Reverse-mode vector-Jacobian products for the forward operations, plus a
//! central-difference oracle for checking them.
//!
//! Every VJP returns the gradient of `<upstream, output>` with respect to the
//! operation's inputs. Gate gradients are taken with respect to the raw gate
//! values and are computed without dividing by gates, so a zero gate still
//! receives a gradient.

use rayon::prelude::*;

use crate::attention::{gate_products, AttentionConfig, Mechanism, RowKernel, Score};
use crate::chunked::{
    decay_from_start, decay_to_end, discumsum, update_state_with, ChunkEngine, ChunkPlan, ChunkState, StageStats,
};
use crate::error::{check_len, Error, Result};
use crate::expansions::{ExpansionSpec, Expander};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{scatter, BatchShape, SequenceBatch, Stream};

/// Gradients in the layout of the forward inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    pub shape: BatchShape,
    /// `[b, t, h, d]`
    pub dq: Vec<T>,
    /// `[b, t, h, d]`
    pub dk: Vec<T>,
    /// `[b, t, h, v]`
    pub dv: Vec<T>,
    /// `[b, t, h]`, present iff the batch is gated.
    pub dgates: Option<Vec<T>>,
}

impl<T: Scalar> GradBundle<T> {
    fn gather(shape: BatchShape, parts: &[StreamGrads<T>]) -> Self {
        let pick = |f: fn(&StreamGrads<T>) -> &Vec<T>| parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>();
        let dgates = if parts.iter().all(|p| p.dgates.is_some()) && !parts.is_empty() {
            let gs: Vec<Vec<T>> = parts.iter().map(|p| p.dgates.clone().unwrap()).collect();
            Some(scatter(shape, 1, &gs))
        } else {
            None
        };
        Self {
            shape,
            dq: scatter(shape, shape.d, &pick(|p| &p.dq)),
            dk: scatter(shape, shape.d, &pick(|p| &p.dk)),
            dv: scatter(shape, shape.v, &pick(|p| &p.dv)),
            dgates,
        }
    }

    pub fn is_finite(&self) -> bool {
        let ok = |xs: &[T]| xs.iter().all(|x| x.is_finite());
        ok(&self.dq) && ok(&self.dk) && ok(&self.dv) && self.dgates.as_deref().is_none_or(ok)
    }
}

/// Gradients for one stream, `[t, d]` / `[t, v]` / `[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dgates: Option<Vec<T>>,
}

impl<T: Scalar> StreamGrads<T> {
    fn zeros(s: &Stream<T>) -> Self {
        Self {
            dq: vec![T::zero(); s.t * s.d],
            dk: vec![T::zero(); s.t * s.d],
            dv: vec![T::zero(); s.t * s.v],
            dgates: s.gates.as_ref().map(|_| vec![T::zero(); s.t]),
        }
    }

    fn add_at(&mut self, start: usize, d: usize, v: usize, other: &StreamGrads<T>) {
        let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
        add(&mut self.dq[start * d..], &other.dq);
        add(&mut self.dk[start * d..], &other.dk);
        add(&mut self.dv[start * v..], &other.dv);
        if let (Some(dst), Some(src)) = (self.dgates.as_mut(), other.dgates.as_ref()) {
            add(&mut dst[start..], src);
        }
    }
}

/// What the upstream gradient refers to in [`attention_backward`].
enum Upstream<'a, T> {
    /// Cotangents of the unnormalized numerator rows and score sums.
    Raw { dy: &'a [T], dzeta: &'a [T] },
    /// Cotangent of the normalized output `numerator / zeta`.
    Normalized { dy: &'a [T] },
}

/// Accumulates `dg_k += sum_{lo <= j < k <= i} h_j prod_{m in (j, i], m != k} g_m`
/// for one query row, i.e. the gate part of `sum_j h_j dG_ij`.
fn gate_row_vjp<T: Scalar>(s: &Stream<T>, lo: usize, i: usize, h: &[T], dg: &mut [T]) {
    let mut r = vec![T::zero(); i + 1 - lo];
    let mut acc = T::zero();
    for k in lo + 1..=i {
        acc = s.gate(k - 1) * acc + h[k - 1 - lo];
        r[k - lo] = acc;
    }
    let mut suffix = T::one();
    for k in (lo + 1..=i).rev() {
        dg[k] += suffix * r[k - lo];
        suffix *= s.gate(k);
    }
}

/// Backward of the attention-form row kernel for one stream.
///
/// Power scores are differentiated as the direct power, whatever path the
/// forward took; exponential scores use the same row-max shift as the forward.
fn attention_backward<T: Scalar>(s: &Stream<T>, kern: &RowKernel<T>, up: Upstream<'_, T>) -> Result<StreamGrads<T>> {
    let (d, v) = (s.d, s.v);
    let mut out = StreamGrads::zeros(s);
    let mut dg_acc = vec![T::zero(); s.t];
    let mut g = Vec::new();
    let (mut fc, mut fcd, mut a, mut h) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut num = vec![T::zero(); v];
    let mut dn = vec![T::zero(); v];
    for i in 0..s.t {
        let lo = kern.lo(i);
        gate_products(s, lo, i, &mut g);
        let q = s.q_row(i);
        fc.clear();
        fcd.clear();
        // Row factor c: the stored quantities are c * (true numerator, zeta).
        let c = match kern.score {
            Score::Exp => {
                let sc: Vec<T> = (lo..=i).map(|j| kern.scale * dot(q, s.k_row(j))).collect();
                let m = sc
                    .iter()
                    .zip(&g)
                    .filter(|(_, &gj)| gj > T::zero())
                    .map(|(&x, &gj)| x + gj.ln())
                    .fold(T::neg_infinity(), T::max);
                for &x in &sc {
                    let e = (x - m).exp();
                    fc.push(e);
                    fcd.push(e);
                }
                (-m).exp()
            }
            Score::Power(p) => {
                for j in lo..=i {
                    let x = kern.scale * dot(q, s.k_row(j));
                    fc.push(Score::Power(p).eval(x));
                    fcd.push(Score::Power(p).deriv(x));
                }
                T::one()
            }
        };
        a.clear();
        a.extend(g.iter().zip(&fc).map(|(&gj, &f)| gj * f));
        num.iter_mut().for_each(|x| *x = T::zero());
        let mut zeta = T::zero();
        for j in lo..=i {
            axpy(a[j - lo], s.v_row(j), &mut num);
            zeta += a[j - lo];
        }
        let dz = match &up {
            Upstream::Raw { dy, dzeta } => {
                for (o, &x) in dn.iter_mut().zip(&dy[i * v..(i + 1) * v]) {
                    *o = x / c;
                }
                dzeta[i] / c
            }
            Upstream::Normalized { dy } => {
                if !(zeta > T::zero()) || !zeta.is_finite() {
                    return Err(Error::ZeroDenominator { position: i });
                }
                let row = &dy[i * v..(i + 1) * v];
                let mut dot_y = T::zero();
                for ((o, &x), &n) in dn.iter_mut().zip(row).zip(&num) {
                    *o = x / zeta;
                    dot_y += x * n / zeta;
                }
                -dot_y / zeta
            }
        };
        h.clear();
        for j in lo..=i {
            let da = dot(&dn, s.v_row(j)) + dz;
            axpy(a[j - lo], &dn, &mut out.dv[j * v..(j + 1) * v]);
            let ds = da * g[j - lo] * fcd[j - lo] * kern.scale;
            axpy(ds, s.k_row(j), &mut out.dq[i * d..(i + 1) * d]);
            axpy(ds, q, &mut out.dk[j * d..(j + 1) * d]);
            h.push(da * fc[j - lo]);
        }
        if s.gates.is_some() {
            gate_row_vjp(s, lo, i, &h, &mut dg_acc);
        }
    }
    if let Some(dg) = out.dgates.as_mut() {
        dg.copy_from_slice(&dg_acc);
    }
    Ok(out)
}

fn check_upstream<T: Scalar>(batch: &SequenceBatch<T>, upstream: &[T]) -> Result<()> {
    let s = batch.shape;
    check_len("upstream", s.b * s.t * s.h * s.v, upstream.len())
}

/// Upstream rows of stream `n` in `[t, v]` order.
fn stream_rows<T: Scalar>(shape: BatchShape, n: usize, x: &[T]) -> Vec<T> {
    let (bi, hi) = (n / shape.h, n % shape.h);
    let mut out = Vec::with_capacity(shape.t * shape.v);
    for ti in 0..shape.t {
        let row = ((bi * shape.t + ti) * shape.h + hi) * shape.v;
        out.extend_from_slice(&x[row..row + shape.v]);
    }
    out
}

fn map_stream_grads<T, F>(batch: &SequenceBatch<T>, upstream: &[T], f: F) -> Result<GradBundle<T>>
where
    T: Scalar,
    F: Fn(&Stream<T>, &[T]) -> Result<StreamGrads<T>> + Sync + Send,
{
    batch.validate()?;
    batch.check_finite()?;
    check_upstream(batch, upstream)?;
    let streams = batch.streams();
    let parts = streams
        .par_iter()
        .enumerate()
        .map(|(n, s)| f(s, &stream_rows(batch.shape, n, upstream)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradBundle::gather(batch.shape, &parts))
}

/// VJP of the attention form for any mechanism.
///
/// Explicit linear attention shares its scores with power attention of the
/// same degree, so both use the power-score backward.
pub fn vjp_attention<T: Scalar>(batch: &SequenceBatch<T>, cfg: &AttentionConfig, upstream: &[T]) -> Result<GradBundle<T>> {
    cfg.validate(batch.shape.d)?;
    let kern = RowKernel::<T>::from_config(cfg, batch.shape.d);
    map_stream_grads(batch, upstream, |s, dy| {
        if cfg.normalize {
            attention_backward(s, &kern, Upstream::Normalized { dy })
        } else {
            attention_backward(s, &kern, Upstream::Raw { dy, dzeta: &vec![T::zero(); s.t] })
        }
    })
}

/// VJP of [`crate::power_attention_form`].
pub fn vjp_power_attention<T: Scalar>(
    batch: &SequenceBatch<T>,
    cfg: &AttentionConfig,
    upstream: &[T],
) -> Result<GradBundle<T>> {
    if !matches!(cfg.mechanism, Mechanism::Power(_)) {
        return Err(Error::InvalidConfig(format!("vjp_power_attention called with {:?}", cfg.mechanism)));
    }
    vjp_attention(batch, cfg, upstream)
}

/// VJP of the unnormalized intra-chunk attention `(Y_attn, zeta)` of one chunk,
/// given cotangents for both outputs. Queries are unscaled; the config's
/// scale is applied inside.
pub fn vjp_intra_chunk<T: Scalar>(
    chunk: &Stream<T>,
    cfg: &AttentionConfig,
    dy: &[T],
    dzeta: &[T],
) -> Result<StreamGrads<T>> {
    cfg.validate(chunk.d)?;
    check_len("intra upstream", chunk.t * chunk.v, dy.len())?;
    check_len("intra zeta upstream", chunk.t, dzeta.len())?;
    let mut kern = RowKernel::<T>::from_config(cfg, chunk.d);
    if !matches!(cfg.mechanism, Mechanism::Window(_)) {
        kern.window = None;
    }
    attention_backward(chunk, &kern, Upstream::Raw { dy, dzeta })
}

/// Gradients of [`crate::update_state`] with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStateGrads<T> {
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dgates: Option<Vec<T>>,
}

fn vjp_update_state_with<T: Scalar>(
    expander: &Expander<T>,
    k: &[T],
    vals: &[T],
    gates: Option<&[T]>,
    dstate: &ChunkState<T>,
    dlambda: T,
) -> Result<UpdateStateGrads<T>> {
    let d = expander.spec().d;
    let v = dstate.v;
    let c = k.len() / d;
    check_len("update_state keys", c * d, k.len())?;
    check_len("update_state values", c * v, vals.len())?;
    check_len("update_state cotangent", expander.dim(), dstate.dim())?;
    let dim = expander.dim();
    let weights = decay_to_end(gates, c);
    let mut dk = vec![T::zero(); c * d];
    let mut dv = vec![T::zero(); c * v];
    let mut dw = vec![T::zero(); c];
    let mut phi = vec![T::zero(); dim];
    let mut dphi = vec![T::zero(); dim];
    for j in 0..c {
        let kj = &k[j * d..(j + 1) * d];
        let vj = &vals[j * v..(j + 1) * v];
        expander.expand_into(kj, &mut phi);
        // u_e = dS_e . v_j + dgamma_e
        let mut w_grad = T::zero();
        for e in 0..dim {
            let u = dot(&dstate.s[e * v..(e + 1) * v], vj) + dstate.gamma[e];
            dphi[e] = weights[j] * u;
            w_grad += phi[e] * u;
            axpy(weights[j] * phi[e], &dstate.s[e * v..(e + 1) * v], &mut dv[j * v..(j + 1) * v]);
        }
        dw[j] = w_grad;
        expander.vjp_into(kj, &dphi, &mut dk[j * d..(j + 1) * d]);
    }
    let dgates = gates.map(|g| {
        // dg_k = prod_{m>k} g_m * (dlambda prod_{m<k} g_m + sum_{j<k} dw_j prod_{j<m<k} g_m)
        let mut dg = vec![T::zero(); c];
        let mut r = dlambda;
        let mut before = vec![T::zero(); c];
        for kk in 0..c {
            before[kk] = r;
            r = g[kk] * r + dw[kk];
        }
        let mut suffix = T::one();
        for kk in (0..c).rev() {
            dg[kk] = suffix * before[kk];
            suffix *= g[kk];
        }
        dg
    });
    Ok(UpdateStateGrads { dk, dv, dgates })
}

/// VJP of [`crate::update_state`]: cotangents `dstate` for the contribution
/// and `dlambda` for the chunk decay.
pub fn vjp_update_state<T: Scalar>(
    spec: &ExpansionSpec,
    k_chunk: &[T],
    v_chunk: &[T],
    gates_chunk: Option<&[T]>,
    dstate: &ChunkState<T>,
    dlambda: T,
) -> Result<UpdateStateGrads<T>> {
    let expander = Expander::new(*spec)?;
    if let Some(g) = gates_chunk {
        check_len("update_state gates", k_chunk.len() / spec.d, g.len())?;
    }
    vjp_update_state_with(&expander, k_chunk, v_chunk, gates_chunk, dstate, dlambda)
}

/// VJP of [`crate::discumsum`]. Returns cotangents for the input states and
/// for each carry (same length as `carries`).
pub fn vjp_discumsum<T: Scalar>(
    states: &[ChunkState<T>],
    carries: &[T],
    douts: &[ChunkState<T>],
) -> Result<(Vec<ChunkState<T>>, Vec<T>)> {
    let outs = discumsum(states, carries)?;
    check_len("discumsum cotangents", outs.len(), douts.len())?;
    if let Some(bad) = douts.iter().position(|s| outs.first().is_some_and(|o| !o.same_layout(s))) {
        return Err(Error::ShapeMismatch(format!("cotangent {bad} differs in layout from the states")));
    }
    let n = outs.len();
    let mut dstates = douts.to_vec();
    let mut dcarries = vec![T::zero(); carries.len()];
    for k in (1..n).rev() {
        let (head, tail) = dstates.split_at_mut(k);
        let acc = &tail[0];
        let prev = &outs[k - 1];
        dcarries[k - 1] = dot(&acc.s, &prev.s) + dot(&acc.gamma, &prev.gamma);
        let lambda = carries[k - 1];
        let dst = &mut head[k - 1];
        axpy(lambda, &acc.s, &mut dst.s);
        axpy(lambda, &acc.gamma, &mut dst.gamma);
    }
    Ok((dstates, dcarries))
}

/// Gradients of [`crate::query_state`] with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryStateGrads<T> {
    pub dstate: ChunkState<T>,
    /// With respect to the (already scaled) queries.
    pub dq: Vec<T>,
    pub dy_attn: Vec<T>,
    pub dzeta: Vec<T>,
    pub dgates_prefix: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn vjp_query_state_with<T: Scalar>(
    expander: &Expander<T>,
    state: &ChunkState<T>,
    q: &[T],
    y_attn: &[T],
    zeta: &[T],
    gates_prefix: &[T],
    normalize: bool,
    dy: &[T],
) -> Result<QueryStateGrads<T>> {
    let d = expander.spec().d;
    let v = state.v;
    let c = q.len() / d;
    check_len("query_state queries", c * d, q.len())?;
    check_len("query_state intra output", c * v, y_attn.len())?;
    check_len("query_state zeta", c, zeta.len())?;
    check_len("query_state gate prefix", c, gates_prefix.len())?;
    check_len("query_state state", expander.dim(), state.dim())?;
    check_len("query_state upstream", c * v, dy.len())?;
    let dim = expander.dim();
    let mut grads = QueryStateGrads {
        dstate: ChunkState { spec: state.spec, v, s: vec![T::zero(); dim * v], gamma: vec![T::zero(); dim] },
        dq: vec![T::zero(); c * d],
        dy_attn: vec![T::zero(); c * v],
        dzeta: vec![T::zero(); c],
        dgates_prefix: vec![T::zero(); c],
    };
    let mut phi = vec![T::zero(); dim];
    let mut dphi = vec![T::zero(); dim];
    let mut num = vec![T::zero(); v];
    let mut dn = vec![T::zero(); v];
    for m in 0..c {
        let qm = &q[m * d..(m + 1) * d];
        expander.expand_into(qm, &mut phi);
        num.iter_mut().for_each(|x| *x = T::zero());
        for e in 0..dim {
            axpy(phi[e], &state.s[e * v..(e + 1) * v], &mut num);
        }
        let den = dot(&phi, &state.gamma);
        let gp = gates_prefix[m];
        let row = &dy[m * v..(m + 1) * v];
        let dz = if normalize {
            let z = zeta[m] + gp * den;
            if !(z > T::zero()) || !z.is_finite() {
                return Err(Error::ZeroDenominator { position: m });
            }
            let mut dot_y = T::zero();
            for (((o, &g), &ya), &n) in dn.iter_mut().zip(row).zip(&y_attn[m * v..(m + 1) * v]).zip(&num) {
                *o = g / z;
                dot_y += g * (ya + gp * n) / z;
            }
            -dot_y / z
        } else {
            dn.copy_from_slice(row);
            T::zero()
        };
        grads.dy_attn[m * v..(m + 1) * v].copy_from_slice(&dn);
        grads.dzeta[m] = dz;
        grads.dgates_prefix[m] = dot(&dn, &num) + dz * den;
        for e in 0..dim {
            let srow = &state.s[e * v..(e + 1) * v];
            dphi[e] = gp * (dot(srow, &dn) + dz * state.gamma[e]);
            axpy(gp * phi[e], &dn, &mut grads.dstate.s[e * v..(e + 1) * v]);
            grads.dstate.gamma[e] += gp * phi[e] * dz;
        }
        expander.vjp_into(qm, &dphi, &mut grads.dq[m * d..(m + 1) * d]);
    }
    Ok(grads)
}

/// VJP of [`crate::query_state`] with respect to the normalized (or raw) output rows.
pub fn vjp_query_state<T: Scalar>(
    state: &ChunkState<T>,
    q_chunk: &[T],
    y_attn: &[T],
    zeta: &[T],
    gates_prefix: &[T],
    normalize: bool,
    dy: &[T],
) -> Result<QueryStateGrads<T>> {
    let expander = Expander::new(state.spec)?;
    vjp_query_state_with(&expander, state, q_chunk, y_attn, zeta, gates_prefix, normalize, dy)
}

/// Maps cotangents of `prefix_m = prod_{k<=m} g_k` onto the gates.
fn prefix_vjp<T: Scalar>(g: &[T], dprefix: &[T]) -> Vec<T> {
    let c = g.len();
    let mut out = vec![T::zero(); c];
    let mut tail = T::zero();
    let mut tails = vec![T::zero(); c];
    for k in (0..c).rev() {
        tail = dprefix[k] + if k + 1 < c { g[k + 1] * tail } else { T::zero() };
        tails[k] = tail;
    }
    let mut before = T::one();
    for k in 0..c {
        out[k] = before * tails[k];
        before *= g[k];
    }
    out
}

fn chunked_stream_vjp<T: Scalar>(engine: &ChunkEngine<T>, s: &Stream<T>, plan: &ChunkPlan, dy: &[T]) -> Result<StreamGrads<T>> {
    engine.check_stream(s)?;
    check_len("chunk plan t", s.t, plan.t)?;
    engine.check_budget(2 * (plan.n_chunks + 1))?;
    let cfg = engine.config();
    let kern = engine.kernel();
    let expander = engine.expander();
    let (d, v) = (s.d, s.v);
    let q = engine.scaled_queries(s);
    let scale = kern.scale;

    let mut chunks = Vec::with_capacity(plan.n_chunks);
    let mut intra = Vec::with_capacity(plan.n_chunks);
    let mut contributions = vec![engine.zero_state()];
    let mut carries = Vec::with_capacity(plan.n_chunks);
    let mut stats = StageStats::default();
    for range in plan.ranges() {
        let chunk = s.slice(range);
        intra.push(crate::attention::attend_stream(&chunk, kern));
        let (contribution, lambda) =
            update_state_with(expander, &chunk.k, &chunk.values, chunk.gates.as_deref(), v, &mut stats)?;
        contributions.push(contribution);
        carries.push(lambda);
        chunks.push(chunk);
    }
    let accumulated = discumsum(&contributions, &carries)?;

    let mut out = StreamGrads::zeros(s);
    let mut daccumulated = vec![engine.zero_state(); plan.n_chunks + 1];
    let mut intra_up = Vec::with_capacity(plan.n_chunks);
    for (n, range) in plan.ranges().enumerate() {
        let chunk = &chunks[n];
        let prefix = decay_from_start(chunk.gates.as_deref(), chunk.t);
        let g = vjp_query_state_with(
            expander,
            &accumulated[n],
            &q[range.start * d..range.end * d],
            &intra[n].y,
            &intra[n].zeta,
            &prefix,
            cfg.normalize,
            &dy[range.start * v..range.end * v],
        )
        .map_err(|e| match e {
            Error::ZeroDenominator { position } => Error::ZeroDenominator { position: position + range.start },
            other => other,
        })?;
        for (o, &x) in out.dq[range.start * d..range.end * d].iter_mut().zip(&g.dq) {
            *o += scale * x;
        }
        if let (Some(dg), Some(gates)) = (out.dgates.as_mut(), chunk.gates.as_ref()) {
            for (o, x) in dg[range.clone()].iter_mut().zip(prefix_vjp(gates, &g.dgates_prefix)) {
                *o += x;
            }
        }
        daccumulated[n] = g.dstate;
        intra_up.push((g.dy_attn, g.dzeta));
    }

    let (dcontributions, dcarries) = vjp_discumsum(&contributions, &carries, &daccumulated)?;
    for (n, range) in plan.ranges().enumerate() {
        let chunk = &chunks[n];
        let u = vjp_update_state_with(
            expander,
            &chunk.k,
            &chunk.values,
            chunk.gates.as_deref(),
            &dcontributions[n + 1],
            dcarries[n],
        )?;
        let part = StreamGrads { dq: vec![T::zero(); chunk.t * d], dk: u.dk, dv: u.dv, dgates: u.dgates };
        out.add_at(range.start, d, v, &part);
        let (dya, dz) = &intra_up[n];
        let part = attention_backward(chunk, kern, Upstream::Raw { dy: dya, dzeta: dz })?;
        out.add_at(range.start, d, v, &part);
    }
    Ok(out)
}

/// VJP through the chunked pipeline (intra-chunk attention, `update_state`,
/// `discumsum`, `query_state`) from a zero initial state.
pub fn vjp_chunked<T: Scalar>(
    batch: &SequenceBatch<T>,
    cfg: &AttentionConfig,
    plan: &ChunkPlan,
    upstream: &[T],
) -> Result<GradBundle<T>> {
    let engine = ChunkEngine::new(cfg, batch.shape.d, batch.shape.v)?;
    map_stream_grads(batch, upstream, |s, dy| chunked_stream_vjp(&engine, s, plan, dy))
}

/// Central-difference estimate of `J_f(x)^T upstream`.
///
/// Costs `2 * x.len()` evaluations of `f`; meant for tests.
pub fn finite_difference<T, F>(mut f: F, x: &[T], upstream: &[T], step: T) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> Vec<T>,
{
    let mut probe = x.to_vec();
    let two = T::of(2.0);
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            plus.iter().zip(&minus).zip(upstream).map(|((&a, &b), &u)| u * (a - b) / (two * step)).sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::power_attention_form;
    use crate::expansions::expansion_inner;

    #[test]
    fn oracle_examples() {
        let g = finite_difference(|x: &[f64]| vec![x[0] * x[0]], &[3.0], &[1.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let k = [0.3, -0.7, 0.5];
        let spec = ExpansionSpec::spow(2, 3);
        let x = [0.2, 0.9, -0.4];
        let g = finite_difference(|x: &[f64]| vec![expansion_inner(x, &k, &spec).unwrap()], &x, &[1.0], 1e-5);
        let s: f64 = x.iter().zip(&k).map(|(a, b)| a * b).sum();
        for (gi, ki) in g.iter().zip(&k) {
            assert!((gi - 2.0 * s * ki).abs() < 1e-6);
        }
        let g: Vec<f64> = finite_difference(|x: &[f64]| vec![3.0 * x[0] - 2.0 * x[1]], &[1.0, 5.0], &[2.0], 0.7);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_normalized_has_no_score_gradient() {
        let b = SequenceBatch::single(2, 2, vec![0.4f64, -0.3], vec![0.8, 0.1], vec![1.5, -2.0], None).unwrap();
        let cfg = AttentionConfig::power(ExpansionSpec::spow(2, 2)).normalized(true);
        let g = vjp_power_attention(&b, &cfg, &[0.7, -1.1]).unwrap();
        assert!(g.dq.iter().chain(&g.dk).all(|&x| x.abs() < 1e-15));
        assert_eq!(g.dv, vec![0.7, -1.1]);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let b = SequenceBatch::single(1, 1, vec![0.5, -0.2], vec![0.3, 0.9], vec![1.0, 2.0], Some(vec![0.9, 0.8]))
            .unwrap();
        let cfg = AttentionConfig::power(ExpansionSpec::spow(2, 1));
        let g = vjp_power_attention(&b, &cfg, &[0.0, 0.0]).unwrap();
        assert!(g.dq.iter().chain(&g.dk).chain(&g.dv).chain(g.dgates.as_ref().unwrap()).all(|&x| x == 0.0));
    }

    #[test]
    fn prefix_vjp_matches_direct() {
        let g = [0.5, 0.0, 0.8];
        let dp = [1.0, 2.0, 3.0];
        // prefix = [g0, g0 g1, g0 g1 g2]
        let want = [1.0 + 2.0 * 0.0 + 3.0 * 0.0, 2.0 * 0.5 + 3.0 * 0.5 * 0.8, 3.0 * 0.5 * 0.0];
        assert_eq!(prefix_vjp(&g, &dp), want.to_vec());
    }

    #[test]
    fn chunked_single_chunk_matches_attention_form() {
        let q = vec![0.3, -0.5, 0.8, 0.1, -0.9, 0.4, 0.2, 0.7];
        let k = vec![-0.6, 0.2, 0.5, 0.7, 0.3, -0.1, 0.9, 0.4];
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let b = SequenceBatch::single(2, 1, q, k, v, Some(vec![0.9, 0.5, 1.0, 0.7])).unwrap();
        let up = [0.3, -1.2, 0.8, 2.0];
        for norm in [false, true] {
            let cfg = AttentionConfig::power(ExpansionSpec::spow(2, 2)).normalized(norm);
            let a = vjp_power_attention(&b, &cfg, &up).unwrap();
            let c = vjp_chunked(&b, &cfg, &ChunkPlan::new(4, 8).unwrap(), &up).unwrap();
            for (x, y) in [(&a.dq, &c.dq), (&a.dk, &c.dk), (&a.dv, &c.dv), (a.dgates.as_ref().unwrap(), c.dgates.as_ref().unwrap())] {
                assert!(crate::tensor::max_rel_error(x, y) < 1e-12);
            }
            let _ = power_attention_form(&b, &cfg).unwrap();
        }
    }
}
