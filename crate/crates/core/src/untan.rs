//! Uncertainty-aware multi-time attention.
//!
//! Each head embeds scalar times with `φ(t) = sin(ω t + β)` and scores a
//! query/key pair with `(φ(t_q) w) · (φ(t_k) v) / √d_e`. Per input channel two
//! features are pooled from the exponentiated scores:
//!
//! * the intensity `pool(exp α over observed keys) / pool(exp α over the
//!   union key set)`, which lies in `[0, 1]` and drops where observations are
//!   sparse relative to the data set as a whole;
//! * the value, a softmax-weighted average of the observed values.
//!
//! Features are laid out head-major, channel-minor as `[int, val]` pairs and
//! mixed by a single `2·D·H → J` linear map. All pooling runs in the log
//! domain, shifted by the maximum score of the set being pooled.
//!
//! The array-level functions at the bottom of this file build a throwaway
//! tape and call the same code the model trains through, so their outputs are
//! bit-identical to what the model sees.

use serde::{Deserialize, Serialize};

use crate::data::{Channel, IrregularSeries};
use crate::error::{Error, Result};
use crate::numgrad::{Array, Bound, Reduce, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Sum,
}

impl Pooling {
    fn reduce(self) -> Reduce {
        match self {
            Pooling::Max => Reduce::Max,
            Pooling::Sum => Reduce::LogSumExp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbeddingHead {
    pub omega: Array,
    pub beta: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub embedding: TimeEmbeddingHead,
    /// Query projection `[d_e, d_e / H]`.
    pub w: Array,
    /// Key projection `[d_e, d_e / H]`.
    pub v: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnTANWeights {
    pub heads: Vec<AttentionHead>,
    /// `[2·D_in·H, J]`.
    pub mixing: Array,
    pub pooling_intensity: Pooling,
}

impl UnTANWeights {
    pub fn embed_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.embedding.omega.len())
    }

    pub fn input_channels(&self) -> usize {
        self.mixing.shape()[0] / (2 * self.heads.len().max(1))
    }

    pub fn output_dim(&self) -> usize {
        self.mixing.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d_e = self.embed_dim();
        let h = self.heads.len();
        if h == 0 || d_e == 0 || (h > 1 && !d_e.is_multiple_of(h)) {
            return Err(Error::Config(format!(
                "embedding dimension {d_e} must be a positive multiple of the head count {h}"
            )));
        }
        if self.heads.len() > 1 && self.heads[0].w.shape().get(1) != Some(&(d_e / h)) {
            return Err(Error::Dimension(format!(
                "multi-head projections must map {d_e} to {}",
                d_e / h
            )));
        }
        let d_k = self.heads[0].w.shape().get(1).copied().unwrap_or(0);
        for (i, head) in self.heads.iter().enumerate() {
            if head.embedding.beta.len() != d_e
                || head.w.shape() != [d_e, d_k]
                || head.v.shape() != [d_e, d_k]
            {
                return Err(Error::Dimension(format!(
                    "head {i}: beta {:?}, w {:?}, v {:?} for d_e = {d_e}, d_k = {d_k}",
                    head.embedding.beta.shape(),
                    head.w.shape(),
                    head.v.shape()
                )));
            }
        }
        let (rows, _) = self.mixing.dims2()?;
        if rows % (2 * h) != 0 {
            return Err(Error::Dimension(format!(
                "mixing has {rows} rows, not a multiple of 2·H = {}",
                2 * h
            )));
        }
        Ok(())
    }
}

/// Per-dimension sorted union of every observation time in a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionTimeSet {
    pub times: Vec<Vec<f64>>,
}

impl UnionTimeSet {
    pub fn from_dataset(data: &[IrregularSeries], dim: usize) -> Self {
        let mut times = vec![Vec::new(); dim];
        for s in data {
            for (d, c) in s.channels.iter().enumerate().take(dim) {
                times[d].extend_from_slice(&c.times);
            }
        }
        for t in &mut times {
            t.sort_by(f64::total_cmp);
            t.dedup();
        }
        Self { times }
    }

    /// Every channel keyed on the same time grid.
    pub fn uniform(dim: usize, times: &[f64]) -> Self {
        let mut t = times.to_vec();
        t.sort_by(f64::total_cmp);
        t.dedup();
        Self {
            times: vec![t; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.times.len()
    }

    /// Positions of `times` in dimension `d`, or `None` if any is missing.
    fn positions(&self, d: usize, times: &[f64]) -> Option<Vec<usize>> {
        let keys = &self.times[d];
        times
            .iter()
            .map(|t| keys.binary_search_by(|k| k.total_cmp(t)).ok())
            .collect()
    }
}

pub(crate) struct HeadVars {
    omega: Var,
    beta: Var,
    w: Var,
    v: Var,
}

/// An UnTAN layer bound to a tape.
pub(crate) struct UntanLayer {
    heads: Vec<HeadVars>,
    mixing: Var,
    embed_dim: usize,
    pooling: Pooling,
    use_intensity: bool,
}

pub(crate) fn head_param_names(prefix: &str, h: usize) -> [String; 4] {
    [
        format!("{prefix}.head{h}.omega"),
        format!("{prefix}.head{h}.beta"),
        format!("{prefix}.head{h}.w"),
        format!("{prefix}.head{h}.v"),
    ]
}

impl UntanLayer {
    pub(crate) fn from_bound(
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        n_heads: usize,
        embed_dim: usize,
        pooling: Pooling,
        use_intensity: bool,
    ) -> Result<Self> {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let [o, b, w, v] = head_param_names(prefix, h);
            let omega = tape.reshape(bound.get(&o)?, vec![1, embed_dim])?;
            heads.push(HeadVars {
                omega,
                beta: bound.get(&b)?,
                w: bound.get(&w)?,
                v: bound.get(&v)?,
            });
        }
        Ok(Self {
            heads,
            mixing: bound.get(&format!("{prefix}.mixing"))?,
            embed_dim,
            pooling,
            use_intensity,
        })
    }

    pub(crate) fn from_weights(tape: &mut Tape, weights: &UnTANWeights) -> Result<Self> {
        weights.validate()?;
        let embed_dim = weights.embed_dim();
        let mut heads = Vec::with_capacity(weights.heads.len());
        for h in &weights.heads {
            let omega = tape.constant(h.embedding.omega.clone().reshape(vec![1, embed_dim])?);
            heads.push(HeadVars {
                omega,
                beta: tape.constant(h.embedding.beta.clone()),
                w: tape.constant(h.w.clone()),
                v: tape.constant(h.v.clone()),
            });
        }
        Ok(Self {
            heads,
            mixing: tape.constant(weights.mixing.clone()),
            embed_dim,
            pooling: weights.pooling_intensity,
            use_intensity: true,
        })
    }

    fn embed(&self, tape: &mut Tape, h: usize, times: &[f64]) -> Result<Var> {
        let head = &self.heads[h];
        let t = tape.constant(Array::column(times.to_vec()));
        let lin = tape.matmul(t, head.omega)?;
        let lin = tape.add_row(lin, head.beta)?;
        Ok(tape.sin(lin))
    }

    fn queries(&self, tape: &mut Tape, h: usize, times: &[f64]) -> Result<Var> {
        let e = self.embed(tape, h, times)?;
        tape.matmul(e, self.heads[h].w)
    }

    fn keys(&self, tape: &mut Tape, h: usize, times: &[f64]) -> Result<Var> {
        let e = self.embed(tape, h, times)?;
        tape.matmul(e, self.heads[h].v)
    }

    /// Scores `[n_q, n_k]` between projected queries and keys.
    fn scores(&self, tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
        let raw = tape.matmul_nt(q, k)?;
        Ok(tape.scale(raw, 1.0 / (self.embed_dim as f64).sqrt()))
    }

    /// Encoder-side UnTAND for a batch: `[B·K, J]`, case-major rows.
    ///
    /// Scores against the union key set are shared by all cases; a case's
    /// observed columns are gathered from them. Times missing from the union
    /// get a per-case extended key set so the intensity stays in `[0, 1]`.
    pub(crate) fn untand_batch(
        &self,
        tape: &mut Tape,
        refs: &[f64],
        cases: &[&IrregularSeries],
        union: &UnionTimeSet,
    ) -> Result<Var> {
        if refs.is_empty() {
            return Err(Error::Contract("UnTAND needs at least one reference time".into()));
        }
        let dim = union.dim();
        if let Some(bad) = cases.iter().find(|c| c.dim() != dim) {
            return Err(Error::Dimension(format!(
                "series `{}` has {} channels, layer expects {dim}",
                bad.id,
                bad.dim()
            )));
        }
        let k = refs.len();
        let n_heads = self.heads.len();

        let mut queries = Vec::with_capacity(n_heads);
        // shared[h][d] = (scores over union, pooled denominator)
        let mut shared: Vec<Vec<Option<(Var, Var)>>> = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = self.queries(tape, h, refs)?;
            let mut per_dim = Vec::with_capacity(dim);
            for d in 0..dim {
                if union.times[d].is_empty() {
                    per_dim.push(None);
                    continue;
                }
                let kv = self.keys(tape, h, &union.times[d])?;
                let s = self.scores(tape, q, kv)?;
                let den = tape.reduce(self.pooling.reduce(), s, 1)?;
                per_dim.push(Some((s, den)));
            }
            queries.push(q);
            shared.push(per_dim);
        }

        let zeros = tape.constant(Array::zeros(&[k, 1]));
        let ones = tape.constant(Array::ones(&[k, 1]));
        let mut rows = Vec::with_capacity(cases.len());
        for case in cases {
            let mut feats = Vec::with_capacity(2 * dim * n_heads);
            let channels: Vec<Channel> = case.channels.iter().map(Channel::sorted).collect();
            for h in 0..n_heads {
                for (d, ch) in channels.iter().enumerate() {
                    if ch.is_empty() {
                        feats.push(zeros);
                        feats.push(zeros);
                        continue;
                    }
                    let (scores, den, cols) = match (union.positions(d, &ch.times), shared[h][d]) {
                        (Some(cols), Some((s, den))) => (s, den, cols),
                        _ => {
                            let mut keys = union.times[d].clone();
                            keys.extend_from_slice(&ch.times);
                            keys.sort_by(f64::total_cmp);
                            keys.dedup();
                            let kv = self.keys(tape, h, &keys)?;
                            let s = self.scores(tape, queries[h], kv)?;
                            let den = tape.reduce(self.pooling.reduce(), s, 1)?;
                            let cols = UnionTimeSet { times: vec![keys] }
                                .positions(0, &ch.times)
                                .expect("keys contain the channel times");
                            (s, den, cols)
                        }
                    };
                    let observed = tape.gather_cols(scores, &cols)?;
                    let int = if self.use_intensity {
                        intensity_from_scores(tape, observed, den, self.pooling)?
                    } else {
                        ones
                    };
                    let val = value_from_scores(tape, observed, &ch.values)?;
                    feats.push(int);
                    feats.push(val);
                }
            }
            rows.push(tape.concat_cols(&feats)?);
        }
        let features = tape.concat_rows(&rows)?;
        tape.matmul(features, self.mixing)
    }

    /// Decoder-side UnTAND where every channel is observed at every key time,
    /// so the union key set is `key_times` itself.
    ///
    /// `values` holds one `[K, C]` block per query group, stacked; group `g`
    /// is queried at `query_times[g]`. Returns `[Σ_g |query_times[g]|, J]`.
    pub(crate) fn untand_dense(
        &self,
        tape: &mut Tape,
        key_times: &[f64],
        values: Var,
        query_times: &[Vec<f64>],
    ) -> Result<Var> {
        let (rows, c) = tape.value(values).dims2()?;
        let k = key_times.len();
        if k == 0 || rows != k * query_times.len() {
            return Err(Error::Dimension(format!(
                "dense UnTAND: {rows} value rows for {} groups of {k} keys",
                query_times.len()
            )));
        }
        let all_q: Vec<f64> = query_times.iter().flatten().copied().collect();
        let segments: Vec<usize> = query_times.iter().map(Vec::len).collect();
        let r = all_q.len();
        // With t_d equal to the union for every channel the pooled ratio is
        // exactly one (same scores, same reduction order), with zero gradient.
        let ones = tape.constant(Array::ones(&[r, c]));
        let interleave: Vec<usize> = (0..c).flat_map(|j| [j, c + j]).collect();
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in 0..self.heads.len() {
            let q = self.queries(tape, h, &all_q)?;
            let kv = self.keys(tape, h, key_times)?;
            let s = self.scores(tape, q, kv)?;
            let lse = tape.reduce(Reduce::LogSumExp, s, 1)?;
            let shifted = tape.sub_col(s, lse)?;
            let attn = tape.exp(shifted);
            let val = tape.segment_matmul(attn, values, segments.clone())?;
            let both = tape.concat_cols(&[ones, val])?;
            heads.push(tape.gather_cols(both, &interleave)?);
        }
        let features = tape.concat_cols(&heads)?;
        tape.matmul(features, self.mixing)
    }
}

/// `exp(pool(observed) − pool(union))`, `[K, 1]`.
fn intensity_from_scores(tape: &mut Tape, observed: Var, den: Var, pooling: Pooling) -> Result<Var> {
    let num = tape.reduce(pooling.reduce(), observed, 1)?;
    let diff = tape.sub(num, den)?;
    let e = tape.exp(diff);
    let k = tape.value(e).len();
    tape.reshape(e, vec![k, 1])
}

/// Softmax over observed scores applied to the observed values, `[K, 1]`.
fn value_from_scores(tape: &mut Tape, observed: Var, values: &[f64]) -> Result<Var> {
    let lse = tape.reduce(Reduce::LogSumExp, observed, 1)?;
    let shifted = tape.sub_col(observed, lse)?;
    let weights = tape.exp(shifted);
    let x = tape.constant(Array::column(values.to_vec()));
    tape.matmul(weights, x)
}

/// `sin(ω t + β)` for one head.
pub fn embed_time(t: f64, head: &TimeEmbeddingHead) -> Result<Array> {
    let d_e = head.omega.len();
    let mut tape = Tape::new();
    let omega = tape.constant(head.omega.clone().reshape(vec![1, d_e])?);
    let beta = tape.constant(head.beta.clone());
    let tv = tape.constant(Array::column(vec![t]));
    let lin = tape.matmul(tv, omega)?;
    let lin = tape.add_row(lin, beta)?;
    let out = tape.sin(lin);
    tape.value(out).clone().reshape(vec![d_e])
}

fn single_head(head: &AttentionHead, pooling: Pooling) -> UnTANWeights {
    UnTANWeights {
        heads: vec![head.clone()],
        mixing: Array::zeros(&[2, 1]),
        pooling_intensity: pooling,
    }
}

/// Scaled attention score between a query and a key time.
pub fn attention_score(t_q: f64, t_k: f64, head: &AttentionHead) -> Result<f64> {
    let weights = single_head(head, Pooling::Max);
    let mut tape = Tape::new();
    let layer = UntanLayer::from_weights(&mut tape, &weights)?;
    let q = layer.queries(&mut tape, 0, &[t_q])?;
    let k = layer.keys(&mut tape, 0, &[t_k])?;
    let s = layer.scores(&mut tape, q, k)?;
    tape.value(s).item()
}

/// Intensity of observed times `t_d` at `t_q` relative to the union `t_u`.
///
/// Requires `t_d ⊆ t_u` and a non-empty `t_u`; an empty `t_d` gives 0.
pub fn intensity(
    t_q: f64,
    t_d: &[f64],
    t_u: &[f64],
    head: &AttentionHead,
    pooling: Pooling,
) -> Result<f64> {
    if t_u.is_empty() {
        return Err(Error::Contract("intensity needs a non-empty union time set".into()));
    }
    if t_d.is_empty() {
        return Ok(0.0);
    }
    let union = UnionTimeSet::uniform(1, t_u);
    let mut sorted = t_d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cols = union
        .positions(0, &sorted)
        .ok_or_else(|| Error::Contract("observed times must be a subset of the union".into()))?;
    let weights = single_head(head, pooling);
    let mut tape = Tape::new();
    let layer = UntanLayer::from_weights(&mut tape, &weights)?;
    let q = layer.queries(&mut tape, 0, &[t_q])?;
    let k = layer.keys(&mut tape, 0, &union.times[0])?;
    let s = layer.scores(&mut tape, q, k)?;
    let den = tape.reduce(pooling.reduce(), s, 1)?;
    let observed = tape.gather_cols(s, &cols)?;
    let out = intensity_from_scores(&mut tape, observed, den, pooling)?;
    tape.value(out).item()
}

/// Output of the value pathway for one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    /// Set when the channel had no observations; `value` is then 0.
    pub unobserved: bool,
}

/// Softmax-weighted interpolation of `x_d` at `t_q`.
pub fn value(t_q: f64, t_d: &[f64], x_d: &[f64], head: &AttentionHead) -> Result<ValueEstimate> {
    if t_d.len() != x_d.len() {
        return Err(Error::Dimension(format!(
            "{} times but {} values",
            t_d.len(),
            x_d.len()
        )));
    }
    if t_d.is_empty() {
        return Ok(ValueEstimate {
            value: 0.0,
            unobserved: true,
        });
    }
    let ch = Channel::new(t_d.to_vec(), x_d.to_vec()).sorted();
    let weights = single_head(head, Pooling::Max);
    let mut tape = Tape::new();
    let layer = UntanLayer::from_weights(&mut tape, &weights)?;
    let q = layer.queries(&mut tape, 0, &[t_q])?;
    let k = layer.keys(&mut tape, 0, &ch.times)?;
    let s = layer.scores(&mut tape, q, k)?;
    let out = value_from_scores(&mut tape, s, &ch.values)?;
    Ok(ValueEstimate {
        value: tape.value(out).item()?,
        unobserved: false,
    })
}

/// The value pathway applied to precomputed scores.
pub fn softmax_value(scores: &[f64], values: &[f64]) -> Result<f64> {
    if scores.len() != values.len() || scores.is_empty() {
        return Err(Error::Dimension(format!(
            "{} scores for {} values",
            scores.len(),
            values.len()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Array::new(vec![1, scores.len()], scores.to_vec())?);
    let out = value_from_scores(&mut tape, s, values)?;
    tape.value(out).item()
}

/// UnTAN output `[J]` at a single query time.
pub fn untan(
    t_q: f64,
    channels: &[Channel],
    weights: &UnTANWeights,
    union: &UnionTimeSet,
) -> Result<Array> {
    let out = untand(&[t_q], channels, weights, union)?;
    let j = out.len();
    out.reshape(vec![j])
}

/// UnTAN materialized at each reference time, `[K, J]`.
pub fn untand(
    refs: &[f64],
    channels: &[Channel],
    weights: &UnTANWeights,
    union: &UnionTimeSet,
) -> Result<Array> {
    if channels.len() != weights.input_channels() || union.dim() != channels.len() {
        return Err(Error::Dimension(format!(
            "{} channels given, weights expect {}, union covers {}",
            channels.len(),
            weights.input_channels(),
            union.dim()
        )));
    }
    let series = IrregularSeries::new("", channels.to_vec());
    let mut tape = Tape::new();
    let layer = UntanLayer::from_weights(&mut tape, weights)?;
    let out = layer.untand_batch(&mut tape, refs, &[&series], union)?;
    Ok(tape.value(out).clone())
}
