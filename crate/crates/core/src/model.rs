//! The encoder/decoder assembly.
//!
//! ```text
//! series ──UnTAND(enc)──> h_enc [K, J] ──MLP──> μ, σ² ──sample──> z ─┐
//!                                     └──linear g───────> det ──────┴─> z_cat [K, C]
//! z_cat ──UnTAND(dec) at query times──> h_dec [Q, J] ──MLP──> μ_out, σ²_out
//! ```
//!
//! Batched entry points operate on a [`Tape`] so the objective can
//! differentiate through them; the array-level methods wrap them for
//! inspection and tests.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::IrregularSeries;
use crate::error::{Error, Result};
use crate::numgrad::{
    init_linear_weight, init_standard_normal, Array, Bound, ParamStore, Tape, Var,
};
use crate::rng::{normals, stream, streams, Rng};
use crate::untan::{head_param_names, Pooling, UnionTimeSet, UntanLayer};

/// Lower bound added to the decoder variance in heteroscedastic mode.
pub const VARIANCE_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HetvaeConfig {
    pub input_dim: usize,
    pub n_ref: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub untan_dim: usize,
    pub latent_dim: usize,
    pub mlp_width: usize,
    pub het: bool,
    pub int_path: bool,
    pub det_path: bool,
    pub prob_path: bool,
    /// Output variance used when `het` is off.
    pub const_var: f64,
    pub intensity_pooling: Pooling,
}

impl Default for HetvaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            n_ref: 16,
            embed_dim: 128,
            n_heads: 1,
            untan_dim: 32,
            latent_dim: 16,
            mlp_width: 128,
            het: true,
            int_path: true,
            det_path: true,
            prob_path: true,
            const_var: 1.0,
            intensity_pooling: Pooling::Max,
        }
    }
}

impl HetvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("n_ref", self.n_ref),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("untan_dim", self.untan_dim),
            ("latent_dim", self.latent_dim),
            ("mlp_width", self.mlp_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !self.prob_path && !self.det_path {
            return Err(Error::Config(
                "at least one of prob_path and det_path must be enabled".into(),
            ));
        }
        if !(self.const_var > 0.0) {
            return Err(Error::Config(format!("const_var {} must be positive", self.const_var)));
        }
        Ok(())
    }

    /// Width of the concatenated latent state.
    pub fn latent_channels(&self) -> usize {
        self.latent_dim * (usize::from(self.prob_path) + usize::from(self.det_path))
    }

    /// `K` reference times evenly spaced on `[0, 1]`, endpoints included.
    pub fn refs(&self) -> Vec<f64> {
        if self.n_ref == 1 {
            return vec![0.0];
        }
        let step = 1.0 / (self.n_ref - 1) as f64;
        (0..self.n_ref).map(|i| i as f64 * step).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Heteroscedastic,
    Homoscedastic,
}

/// Per-query Gaussian marginals for one latent sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    pub times: Vec<f64>,
    /// `[Q, D]`.
    pub mu: Array,
    /// `[Q, D]`.
    pub sigma2: Array,
    pub mode: OutputMode,
}

/// Posterior and latent values for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    /// `[K, L]`; absent when the probabilistic path is off.
    pub mu: Option<Array>,
    pub sigma2: Option<Array>,
    /// `[S, K, L]`.
    pub z: Option<Array>,
    /// `[K, L]`; absent when the deterministic path is off.
    pub det: Option<Array>,
    /// `[S, K, C]`, columns `[z | det]`.
    pub z_cat: Array,
}

/// Sampled output distributions at a set of query times.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    /// `[S, Q, D]`.
    pub mu: Array,
    /// `[S, Q, D]`.
    pub sigma2: Array,
}

impl Prediction {
    pub fn n_samples(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn at(&self, s: usize, q: usize, d: usize) -> (f64, f64) {
        let sh = self.mu.shape();
        let i = (s * sh[1] + q) * sh[2] + d;
        (self.mu.data()[i], self.sigma2.data()[i])
    }
}

/// Tape handles for the encoder's posterior.
pub(crate) struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
    pub sigma2: Var,
}

/// Tape handles for a batched forward pass up to the latent state.
pub(crate) struct LatentVars {
    pub posterior: Option<PosteriorVars>,
    /// `[G·K, C]`, one block of `K` rows per (case, sample) group.
    pub z_cat: Var,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hetvae {
    pub config: HetvaeConfig,
    pub params: ParamStore,
    pub union: UnionTimeSet,
}

fn insert_linear(p: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    p.insert(format!("{name}.weight"), init_linear_weight(rng, fan_in, fan_out))?;
    p.insert(format!("{name}.bias"), Array::zeros(&[fan_out]))
}

fn insert_untan(
    p: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    cfg: &HetvaeConfig,
    channels: usize,
) -> Result<()> {
    let d_k = cfg.embed_dim / cfg.n_heads;
    for h in 0..cfg.n_heads {
        let [o, b, w, v] = head_param_names(prefix, h);
        p.insert(o, init_standard_normal(rng, &[cfg.embed_dim]))?;
        p.insert(b, init_standard_normal(rng, &[cfg.embed_dim]))?;
        p.insert(w, init_linear_weight(rng, cfg.embed_dim, d_k))?;
        p.insert(v, init_linear_weight(rng, cfg.embed_dim, d_k))?;
    }
    p.insert(
        format!("{prefix}.mixing"),
        init_linear_weight(rng, 2 * channels * cfg.n_heads, cfg.untan_dim),
    )
}

impl Hetvae {
    /// Freshly initialized model; `seed` selects the initialization stream.
    pub fn new(config: HetvaeConfig, union: UnionTimeSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if union.dim() != config.input_dim {
            return Err(Error::Dimension(format!(
                "union time set covers {} dimensions, model expects {}",
                union.dim(),
                config.input_dim
            )));
        }
        let mut rng = stream(seed, streams::INIT);
        let mut p = ParamStore::new();
        let c = &config;
        insert_untan(&mut p, &mut rng, "untan.enc", c, c.input_dim)?;
        if c.prob_path {
            insert_linear(&mut p, &mut rng, "enc.hidden", c.untan_dim, c.mlp_width)?;
            insert_linear(&mut p, &mut rng, "enc.mu", c.mlp_width, c.latent_dim)?;
            insert_linear(&mut p, &mut rng, "enc.sigma", c.mlp_width, c.latent_dim)?;
        }
        if c.det_path {
            insert_linear(&mut p, &mut rng, "det", c.untan_dim, c.latent_dim)?;
        }
        insert_untan(&mut p, &mut rng, "untan.dec", c, c.latent_channels())?;
        insert_linear(&mut p, &mut rng, "dec.hidden", c.untan_dim, c.mlp_width)?;
        insert_linear(&mut p, &mut rng, "dec.mu", c.mlp_width, c.input_dim)?;
        if c.het {
            insert_linear(&mut p, &mut rng, "dec.sigma", c.mlp_width, c.input_dim)?;
        }
        Ok(Self {
            config,
            params: p,
            union,
        })
    }

    pub fn refs(&self) -> Vec<f64> {
        self.config.refs()
    }

    pub fn output_mode(&self) -> OutputMode {
        if self.config.het {
            OutputMode::Heteroscedastic
        } else {
            OutputMode::Homoscedastic
        }
    }

    fn dense(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = bound.get(&format!("{name}.weight"))?;
        let b = bound.get(&format!("{name}.bias"))?;
        tape.linear(x, w, Some(b))
    }

    /// `h_enc` for every case, `[B·K, J]` with case-major rows.
    pub(crate) fn encode_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cases: &[&IrregularSeries],
    ) -> Result<Var> {
        let c = &self.config;
        let layer = UntanLayer::from_bound(
            tape,
            bound,
            "untan.enc",
            c.n_heads,
            c.embed_dim,
            c.intensity_pooling,
            c.int_path,
        )?;
        layer.untand_batch(tape, &self.refs(), cases, &self.union)
    }

    pub(crate) fn posterior_vars(&self, tape: &mut Tape, bound: &Bound, h_enc: Var) -> Result<PosteriorVars> {
        let pre = self.dense(tape, bound, "enc.hidden", h_enc)?;
        let hidden = tape.relu(pre);
        let mu = self.dense(tape, bound, "enc.mu", hidden)?;
        let logvar = self.dense(tape, bound, "enc.sigma", hidden)?;
        let sigma2 = tape.exp(logvar);
        Ok(PosteriorVars { mu, logvar, sigma2 })
    }

    pub(crate) fn det_vars(&self, tape: &mut Tape, bound: &Bound, h_enc: Var) -> Result<Var> {
        self.dense(tape, bound, "det", h_enc)
    }

    /// Encoder through `z_cat` for a batch. `noise` is `[B·S·K, L]` ordered
    /// (case, sample, ref); it is ignored when the probabilistic path is off,
    /// in which case a single deterministic sample is produced.
    pub(crate) fn latent_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cases: &[&IrregularSeries],
        samples: usize,
        noise: Option<&Array>,
    ) -> Result<LatentVars> {
        let c = &self.config;
        let k = c.n_ref;
        let b = cases.len();
        let samples = if c.prob_path { samples.max(1) } else { 1 };
        let h_enc = self.encode_vars(tape, bound, cases)?;
        let replicate = |tape: &mut Tape, v: Var| -> Result<Var> {
            if samples == 1 {
                return Ok(v);
            }
            let rows: Vec<usize> = (0..b)
                .flat_map(|n| (0..samples).flat_map(move |_| (0..k).map(move |r| n * k + r)))
                .collect();
            tape.gather_rows(v, &rows)
        };

        let mut parts = Vec::with_capacity(2);
        let mut posterior = None;
        if c.prob_path {
            let post = self.posterior_vars(tape, bound, h_enc)?;
            let noise = noise.ok_or_else(|| Error::Contract("probabilistic path needs noise".into()))?;
            if noise.shape() != [b * samples * k, c.latent_dim] {
                return Err(Error::Dimension(format!(
                    "noise shape {:?}, expected {:?}",
                    noise.shape(),
                    [b * samples * k, c.latent_dim]
                )));
            }
            let mu = replicate(tape, post.mu)?;
            let sigma2 = replicate(tape, post.sigma2)?;
            let z = reparameterize_vars(tape, mu, sigma2, noise)?;
            parts.push(z);
            posterior = Some(post);
        }
        if c.det_path {
            let det = self.det_vars(tape, bound, h_enc)?;
            parts.push(replicate(tape, det)?);
        }
        let z_cat = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        Ok(LatentVars {
            posterior,
            z_cat,
            samples,
        })
    }

    /// Decodes `[G·K, C]` latent blocks at per-group query times.
    /// Returns `(μ, σ²)`, each `[Σ_g Q_g, D]`.
    pub(crate) fn decode_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_cat: Var,
        queries: &[Vec<f64>],
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let layer = UntanLayer::from_bound(
            tape,
            bound,
            "untan.dec",
            c.n_heads,
            c.embed_dim,
            c.intensity_pooling,
            true,
        )?;
        let h_dec = layer.untand_dense(tape, &self.refs(), z_cat, queries)?;
        let pre = self.dense(tape, bound, "dec.hidden", h_dec)?;
        let hidden = tape.relu(pre);
        let mu = self.dense(tape, bound, "dec.mu", hidden)?;
        let sigma2 = if c.het {
            let raw = self.dense(tape, bound, "dec.sigma", hidden)?;
            let sp = tape.softplus(raw);
            tape.add_scalar(sp, VARIANCE_FLOOR)
        } else {
            let shape = tape.shape(mu).to_vec();
            tape.constant(Array::full(&shape, c.const_var))
        };
        Ok((mu, sigma2))
    }

    /// UnTAND encoder embedding `[K, J]` of one series.
    pub fn encode(&self, series: &IrregularSeries) -> Result<Array> {
        self.check_dim(series)?;
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let h = self.encode_vars(&mut tape, &bound, &[series])?;
        Ok(tape.value(h).clone())
    }

    /// Posterior mean and variance `[K, L]` from an encoder embedding.
    pub fn latent_params(&self, h_enc: &Array) -> Result<(Array, Array)> {
        if !self.config.prob_path {
            return Err(Error::Contract("probabilistic path is disabled".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let h = tape.constant(h_enc.clone());
        let post = self.posterior_vars(&mut tape, &bound, h)?;
        Ok((tape.value(post.mu).clone(), tape.value(post.sigma2).clone()))
    }

    /// Deterministic path output `[K, L]`.
    pub fn det_path(&self, h_enc: &Array) -> Result<Array> {
        if !self.config.det_path {
            return Err(Error::Contract("deterministic path is disabled".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let h = tape.constant(h_enc.clone());
        let d = self.det_vars(&mut tape, &bound, h)?;
        Ok(tape.value(d).clone())
    }

    /// Full latent state for one series with the given `[S, K, L]` noise.
    pub fn latent_state(&self, series: &IrregularSeries, noise: &Array) -> Result<LatentState> {
        self.check_dim(series)?;
        let c = &self.config;
        let h_enc = self.encode(series)?;
        let (mu, sigma2, z) = if c.prob_path {
            let (mu, sigma2) = self.latent_params(&h_enc)?;
            let z = reparameterize(&mu, &sigma2, noise)?;
            (Some(mu), Some(sigma2), Some(z))
        } else {
            (None, None, None)
        };
        let det = if c.det_path {
            Some(self.det_path(&h_enc)?)
        } else {
            None
        };
        let z_cat = concat_latent(z.as_ref(), det.as_ref())?;
        Ok(LatentState {
            mu,
            sigma2,
            z,
            det,
            z_cat,
        })
    }

    /// One output distribution per latent sample of `z_cat` (`[S, K, C]`).
    pub fn decode(&self, z_cat: &Array, query_times: &[f64]) -> Result<Vec<OutputDistribution>> {
        let c = &self.config;
        let shape = z_cat.shape();
        if shape.len() != 3 || shape[1] != c.n_ref || shape[2] != c.latent_channels() {
            return Err(Error::Dimension(format!(
                "z_cat shape {shape:?}, expected [S, {}, {}]",
                c.n_ref,
                c.latent_channels()
            )));
        }
        let s = shape[0];
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let z = tape.constant(z_cat.clone().reshape(vec![s * c.n_ref, c.latent_channels()])?);
        let queries = vec![query_times.to_vec(); s];
        let (mu, sigma2) = self.decode_vars(&mut tape, &bound, z, &queries)?;
        let q = query_times.len();
        let d = c.input_dim;
        let (mu, sigma2) = (tape.value(mu).data(), tape.value(sigma2).data());
        (0..s)
            .map(|i| {
                let span = i * q * d..(i + 1) * q * d;
                Ok(OutputDistribution {
                    times: query_times.to_vec(),
                    mu: Array::new(vec![q, d], mu[span.clone()].to_vec())?,
                    sigma2: Array::new(vec![q, d], sigma2[span].to_vec())?,
                    mode: self.output_mode(),
                })
            })
            .collect()
    }

    /// Conditions on `cond` and returns `S` sampled output distributions at
    /// `query_times`.
    pub fn predict(
        &self,
        cond: &IrregularSeries,
        query_times: &[f64],
        samples: usize,
        rng: &mut Rng,
    ) -> Result<Prediction> {
        self.check_dim(cond)?;
        let c = &self.config;
        let samples = if c.prob_path { samples.max(1) } else { 1 };
        let noise = Array::new(
            vec![samples * c.n_ref, c.latent_dim],
            normals(rng, samples * c.n_ref * c.latent_dim),
        )?;
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let latent = self.latent_vars(&mut tape, &bound, &[cond], samples, Some(&noise))?;
        let queries = vec![query_times.to_vec(); latent.samples];
        let (mu, sigma2) = self.decode_vars(&mut tape, &bound, latent.z_cat, &queries)?;
        let shape = vec![latent.samples, query_times.len(), c.input_dim];
        Ok(Prediction {
            times: query_times.to_vec(),
            mu: tape.value(mu).clone().reshape(shape.clone())?,
            sigma2: tape.value(sigma2).clone().reshape(shape)?,
        })
    }

    fn check_dim(&self, series: &IrregularSeries) -> Result<()> {
        if series.dim() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "series `{}` has {} channels, model expects {}",
                series.id,
                series.dim(),
                self.config.input_dim
            )));
        }
        Ok(())
    }
}

pub(crate) fn reparameterize_vars(tape: &mut Tape, mu: Var, sigma2: Var, noise: &Array) -> Result<Var> {
    let sd = tape.sqrt(sigma2);
    let eps = tape.constant(noise.clone().reshape(tape.shape(mu).to_vec())?);
    let scaled = tape.mul(sd, eps)?;
    tape.add(mu, scaled)
}

/// `z = μ + √σ² ⊙ ε`, broadcasting `[K, L]` parameters over the leading
/// sample axis of `noise` (`[S, K, L]` or `[K, L]`).
pub fn reparameterize(mu: &Array, sigma2: &Array, noise: &Array) -> Result<Array> {
    if mu.shape() != sigma2.shape() {
        return Err(Error::Dimension(format!(
            "mu {:?} and sigma2 {:?} differ",
            mu.shape(),
            sigma2.shape()
        )));
    }
    if let Some(bad) = sigma2.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Contract(format!("variance must be positive, got {bad}")));
    }
    let n = mu.len();
    if n == 0 || !noise.len().is_multiple_of(n) || !noise.shape().ends_with(mu.shape()) {
        return Err(Error::Dimension(format!(
            "noise {:?} does not match parameters {:?}",
            noise.shape(),
            mu.shape()
        )));
    }
    let data = noise
        .data()
        .iter()
        .enumerate()
        .map(|(i, e)| mu.data()[i % n] + sigma2.data()[i % n].sqrt() * e)
        .collect();
    Array::new(noise.shape().to_vec(), data)
}

/// Concatenates `[z | det]` per row. `z` is `[S, K, L]`; `det` (`[K, L]`) is
/// replicated across samples. With only `det`, the result has `S = 1`.
pub fn concat_latent(z: Option<&Array>, det: Option<&Array>) -> Result<Array> {
    match (z, det) {
        (None, None) => Err(Error::Config(
            "both latent pathways are disabled".into(),
        )),
        (Some(z), None) => Ok(z.clone()),
        (None, Some(det)) => {
            let (k, l) = det.dims2()?;
            det.clone().reshape(vec![1, k, l])
        }
        (Some(z), Some(det)) => {
            let (k, l) = det.dims2()?;
            let zs = z.shape();
            if zs.len() != 3 || zs[1] != k {
                return Err(Error::Dimension(format!(
                    "z {zs:?} does not match det {:?}",
                    det.shape()
                )));
            }
            let (s, lz) = (zs[0], zs[2]);
            let mut out = Vec::with_capacity(s * k * (lz + l));
            for si in 0..s {
                for r in 0..k {
                    out.extend_from_slice(&z.data()[(si * k + r) * lz..(si * k + r + 1) * lz]);
                    out.extend_from_slice(det.row(r));
                }
            }
            Array::new(vec![s, k, lz + l], out)
        }
    }
}

/// `x = μ + √σ² ⊙ ε` for an output distribution.
pub fn sample_output(dist: &OutputDistribution, noise: &Array) -> Result<Array> {
    if noise.len() != dist.mu.len() {
        return Err(Error::Dimension(format!(
            "noise {:?} for distribution {:?}",
            noise.shape(),
            dist.mu.shape()
        )));
    }
    let data = dist
        .mu
        .data()
        .iter()
        .zip(dist.sigma2.data())
        .zip(noise.data())
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Array::new(dist.mu.shape().to_vec(), data)
}

/// Draws `[S, K, L]` standard-normal latent noise.
pub fn latent_noise(config: &HetvaeConfig, samples: usize, rng: &mut Rng) -> Array {
    let shape = [samples, config.n_ref, config.latent_dim];
    let n = shape.iter().product();
    Array::new(shape.to_vec(), normals(rng, n)).expect("sized by construction")
}

/// Uniform draw used by tests that need a random model input.
pub fn random_series(id: &str, dim: usize, max_obs: usize, grid: &[f64], rng: &mut Rng) -> IrregularSeries {
    use crate::data::Channel;
    let channels = (0..dim)
        .map(|_| {
            let n = rng.gen_range(1..=max_obs.min(grid.len()));
            let mut idx = rand::seq::index::sample(rng, grid.len(), n).into_vec();
            idx.sort_unstable();
            let times = idx.iter().map(|&i| grid[i]).collect();
            let values = normals(rng, n);
            Channel::new(times, values)
        })
        .collect();
    IrregularSeries::new(id, channels)
}
