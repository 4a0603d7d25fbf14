//! Normalized training objective, KL divergence and the Adam training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_condition_target, IrregularSeries};
use crate::error::{Error, Result};
use crate::model::Hetvae;
use crate::numgrad::{AdamConfig, AdamState, Array, Bound, GradMap, Reduce, Tape, Var};
use crate::rng::{stream, streams, Rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alo: bool,
    /// Latent samples per case per step.
    pub samples: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Fraction of each case's points shown to the encoder per step; every
    /// point is still reconstructed. 1 encodes the whole case.
    pub cond_fraction: f64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub lambda_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lambda: 1.0,
            alo: true,
            samples: 1,
            batch_size: 128,
            iterations: 2000,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            cond_fraction: 1.0,
            checkpoint_every: 0,
            lambda_grid: vec![1.0, 5.0, 10.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("samples and batch_size must be positive".into()));
        }
        if !(self.cond_fraction > 0.0 && self.cond_fraction <= 1.0) {
            return Err(Error::Config(format!("cond_fraction {} not in (0, 1]", self.cond_fraction)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// Weight actually applied to the squared-error term.
    pub fn effective_lambda(&self) -> f64 {
        if self.alo {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Unnormalized per-case terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTerms {
    pub id: String,
    pub n_obs: usize,
    pub nll: f64,
    pub kl: f64,
    pub mse: f64,
}

impl CaseTerms {
    /// This case's additive share of the minimized loss.
    pub fn contribution(&self, lambda: f64) -> f64 {
        (self.nll + self.kl + lambda * self.mse) / self.n_obs as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `nll + kl + lambda · mse`.
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub mse: f64,
    pub lambda: f64,
    pub cases: Vec<CaseTerms>,
    /// Cases dropped for having no observations.
    pub skipped: usize,
}

impl LossReport {
    pub fn normalizers(&self) -> Vec<usize> {
        self.cases.iter().map(|c| c.n_obs).collect()
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub mse: f64,
}

impl LossRecord {
    pub fn from_report(iter: u64, r: &LossReport) -> Self {
        Self {
            iter,
            total: r.total,
            nll: r.nll,
            kl: r.kl,
            mse: r.mse,
        }
    }
}

pub const HISTORY_HEADER: &str = "iter,total,nll,kl,mse";

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.iter, r.total, r.nll, r.kl, r.mse));
    }
    out
}

pub fn gaussian_logpdf(x: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Contract(format!("variance must be positive, got {sigma2}")));
    }
    Ok(-HALF_LN_2PI - 0.5 * sigma2.ln() - (x - mu) * (x - mu) / (2.0 * sigma2))
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` summed over all entries.
pub fn kl_diag_standard(mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    if mu.len() != sigma2.len() {
        return Err(Error::Dimension(format!("{} means, {} variances", mu.len(), sigma2.len())));
    }
    let mut total = 0.0;
    for (m, v) in mu.iter().zip(sigma2) {
        if !(*v > 0.0) {
            return Err(Error::Contract(format!("variance must be positive, got {v}")));
        }
        total += 0.5 * (m * m + v - v.ln() - 1.0);
    }
    Ok(total)
}

/// Standard-normal latent noise for a batch: one `[S, K, L]` array per case.
pub fn draw_noise(model: &Hetvae, n_cases: usize, samples: usize, rng: &mut Rng) -> Vec<Array> {
    (0..n_cases)
        .map(|_| crate::model::latent_noise(&model.config, samples, rng))
        .collect()
}

struct LossVars {
    total: Var,
    nll: Var,
    kl: Var,
    mse: Var,
    nll_case: Var,
    kl_case: Var,
    mse_case: Var,
}

struct Layout {
    kept: Vec<usize>,
    n_obs: Vec<usize>,
}

/// `conds[i]` is encoded and `batch[i]` is reconstructed.
fn loss_vars(
    tape: &mut Tape,
    bound: &Bound,
    model: &Hetvae,
    batch: &[IrregularSeries],
    conds: &[&IrregularSeries],
    noise: &[Array],
    cfg: &TrainConfig,
) -> Result<(LossVars, Layout)> {
    let mc = &model.config;
    if conds.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} conditioning sets for {} cases",
            conds.len(),
            batch.len()
        )));
    }
    for s in batch.iter().chain(conds.iter().copied()) {
        if s.dim() != mc.input_dim {
            return Err(Error::Dimension(format!(
                "series `{}` has {} channels, model expects {}",
                s.id,
                s.dim(),
                mc.input_dim
            )));
        }
    }
    if mc.prob_path && noise.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} noise draws for {} cases",
            noise.len(),
            batch.len()
        )));
    }
    let kept: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].n_obs() > 0).collect();
    if kept.is_empty() {
        return Err(Error::Data("batch contains no observations".into()));
    }
    let cases: Vec<&IrregularSeries> = kept.iter().map(|&i| &batch[i]).collect();
    let encoded: Vec<&IrregularSeries> = kept.iter().map(|&i| conds[i]).collect();
    let samples = if mc.prob_path { cfg.samples } else { 1 };
    let (k, l, d) = (mc.n_ref, mc.latent_dim, mc.input_dim);

    let eps = if mc.prob_path {
        let mut flat = Vec::with_capacity(kept.len() * samples * k * l);
        for &i in &kept {
            if noise[i].shape() != [samples, k, l] {
                return Err(Error::Dimension(format!(
                    "noise for case `{}` has shape {:?}, expected {:?}",
                    batch[i].id,
                    noise[i].shape(),
                    [samples, k, l]
                )));
            }
            flat.extend_from_slice(noise[i].data());
        }
        Some(Array::new(vec![kept.len() * samples * k, l], flat)?)
    } else {
        None
    };
    let latent = model.latent_vars(tape, bound, &encoded, samples, eps.as_ref())?;

    // Decoder queries are each case's observed times; gather the decoded
    // mean and variance at every observed (time, dimension) pair.
    let mut queries = Vec::with_capacity(cases.len() * samples);
    let mut flat_idx = Vec::new();
    let mut targets = Vec::new();
    let mut segments = Vec::new();
    let mut n_obs = Vec::with_capacity(cases.len());
    let mut offset = 0;
    for case in &cases {
        let times = case.observed_times();
        let mut rows = Vec::with_capacity(case.n_obs());
        for (dim, ch) in case.channels.iter().enumerate() {
            for (t, x) in ch.times.iter().zip(&ch.values) {
                let pos = times
                    .binary_search_by(|probe| probe.total_cmp(t))
                    .map_err(|_| Error::Contract("observation time missing from query set".into()))?;
                rows.push((pos, dim, *x));
            }
        }
        for _ in 0..samples {
            for &(pos, dim, x) in &rows {
                flat_idx.push((offset + pos) * d + dim);
                targets.push(x);
            }
            segments.push(rows.len());
            offset += times.len();
            queries.push(times.clone());
        }
        n_obs.push(rows.len());
    }
    let (mu_out, var_out) = model.decode_vars(tape, bound, latent.z_cat, &queries)?;
    let m = flat_idx.len();
    let mu = tape.gather(mu_out, flat_idx.clone(), vec![m])?;
    let var = tape.gather(var_out, flat_idx, vec![m])?;
    let x = tape.constant(Array::from_vec(targets));

    let diff = tape.sub(x, mu)?;
    let sq = tape.square(diff);
    let ratio = tape.div(sq, var)?;
    let log_var = tape.log(var);
    let inner = tape.add(ratio, log_var)?;
    let half = tape.scale(inner, 0.5);
    let nll_obs = tape.add_scalar(half, HALF_LN_2PI);

    let b = cases.len();
    let per_case = |tape: &mut Tape, v: Var| -> Result<Var> {
        let g = tape.segment_sum(v, segments.clone())?;
        let g = tape.reshape(g, vec![b, samples])?;
        let s = tape.reduce(Reduce::Sum, g, 1)?;
        Ok(tape.scale(s, 1.0 / samples as f64))
    };
    let nll_case = per_case(tape, nll_obs)?;
    let mse_case = per_case(tape, sq)?;
    let kl_case = match &latent.posterior {
        Some(post) => {
            let m2 = tape.square(post.mu);
            let a = tape.add(m2, post.sigma2)?;
            let a = tape.sub(a, post.logvar)?;
            let a = tape.add_scalar(a, -1.0);
            let a = tape.scale(a, 0.5);
            let a = tape.reshape(a, vec![b, k * l])?;
            tape.reduce(Reduce::Sum, a, 1)?
        }
        None => tape.constant(Array::zeros(&[b])),
    };

    let w = tape.constant(Array::from_vec(n_obs.iter().map(|&n| 1.0 / n as f64).collect()));
    let weighted = |tape: &mut Tape, v: Var| -> Result<Var> {
        let p = tape.mul(v, w)?;
        tape.sum_all(p)
    };
    let nll = weighted(tape, nll_case)?;
    let kl = weighted(tape, kl_case)?;
    let mse = weighted(tape, mse_case)?;
    let elbo = tape.add(nll, kl)?;
    let aug = tape.scale(mse, cfg.effective_lambda());
    let total = tape.add(elbo, aug)?;
    Ok((
        LossVars {
            total,
            nll,
            kl,
            mse,
            nll_case,
            kl_case,
            mse_case,
        },
        Layout { kept, n_obs },
    ))
}

fn report(tape: &Tape, vars: &LossVars, layout: &Layout, batch: &[IrregularSeries], cfg: &TrainConfig) -> LossReport {
    let item = |v: Var| tape.value(v).data()[0];
    let cases = layout
        .kept
        .iter()
        .enumerate()
        .map(|(j, &i)| CaseTerms {
            id: batch[i].id.clone(),
            n_obs: layout.n_obs[j],
            nll: tape.value(vars.nll_case).data()[j],
            kl: tape.value(vars.kl_case).data()[j],
            mse: tape.value(vars.mse_case).data()[j],
        })
        .collect();
    let skipped = batch.len() - layout.kept.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} case(s) without observations");
    }
    LossReport {
        total: item(vars.total),
        nll: item(vars.nll),
        kl: item(vars.kl),
        mse: item(vars.mse),
        lambda: cfg.effective_lambda(),
        cases,
        skipped,
    }
}

/// Evaluates the normalized objective with fixed weights and noise, encoding
/// and reconstructing every observation of each case.
///
/// `noise` holds one `[S, K, L]` draw per case (ignored when the
/// probabilistic path is off).
pub fn nvae_loss(model: &Hetvae, batch: &[IrregularSeries], noise: &[Array], cfg: &TrainConfig) -> Result<LossReport> {
    let conds: Vec<&IrregularSeries> = batch.iter().collect();
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&model.params);
    let (vars, layout) = loss_vars(&mut tape, &bound, model, batch, &conds, noise, cfg)?;
    Ok(report(&tape, &vars, &layout, batch, cfg))
}

/// Objective value and gradient over every trainable parameter. The encoder
/// sees `conds[i]` while every observation of `batch[i]` is reconstructed.
pub fn nvae_loss_grad(
    model: &Hetvae,
    batch: &[IrregularSeries],
    conds: &[&IrregularSeries],
    noise: &[Array],
    cfg: &TrainConfig,
) -> Result<(LossReport, GradMap)> {
    let mut tape = Tape::new();
    let bound = tape.bind(&model.params);
    let (vars, layout) = loss_vars(&mut tape, &bound, model, batch, conds, noise, cfg)?;
    let grads = tape.backward(vars.total)?;
    Ok((report(&tape, &vars, &layout, batch, cfg), grads))
}

/// Builds the loss on a caller-provided tape; used for gradient checking.
pub fn nvae_loss_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    model: &Hetvae,
    batch: &[IrregularSeries],
    noise: &[Array],
    cfg: &TrainConfig,
) -> Result<Var> {
    let conds: Vec<&IrregularSeries> = batch.iter().collect();
    Ok(loss_vars(tape, bound, model, batch, &conds, noise, cfg)?.0.total)
}

/// Encoder inputs for one training step: a random `cond_fraction` of each
/// case's points, or the whole case when the fraction is 1.
pub fn training_inputs(batch: &[IrregularSeries], cond_fraction: f64, rng: &mut Rng) -> Result<Vec<IrregularSeries>> {
    batch
        .iter()
        .map(|c| {
            if cond_fraction >= 1.0 || c.n_obs() == 0 {
                Ok(c.clone())
            } else {
                Ok(split_condition_target(c, cond_fraction, rng)?.0)
            }
        })
        .collect()
}

/// Case indices used at iteration `iter`: consecutive slices of per-epoch
/// permutations, so any iteration can be reproduced without replaying the
/// ones before it.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, iter: u64) -> Vec<usize> {
    let b = batch_size.min(n);
    if b == 0 {
        return Vec::new();
    }
    let start = iter as u128 * b as u128;
    let mut out = Vec::with_capacity(b);
    let mut pos = start;
    let mut cached: Option<(u128, Vec<usize>)> = None;
    while out.len() < b {
        let epoch = pos / n as u128;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut stream(seed, streams::EPOCH.wrapping_add(epoch as u64)));
                &cached.insert((epoch, p)).1
            }
        };
        out.push(perm[(pos % n as u128) as usize]);
        pos += 1;
    }
    out
}

fn check_finite(r: &LossReport, iter: u64) -> Result<()> {
    for (name, v) in [("nll", r.nll), ("kl", r.kl), ("mse", r.mse), ("total", r.total)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} term is {v} at iteration {iter}")));
        }
    }
    Ok(())
}

/// Runs Adam from `state.step` up to `cfg.iterations`.
///
/// `on_checkpoint` is called every `cfg.checkpoint_every` steps and once at
/// the end. Returns the loss history of the iterations run here.
pub fn train<F>(
    model: &mut Hetvae,
    state: &mut AdamState,
    data: &[IrregularSeries],
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&Hetvae, &AdamState, &[LossRecord]) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut history = Vec::new();
    while state.step < cfg.iterations {
        let iter = state.step;
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.seed, iter);
        let batch: Vec<IrregularSeries> = idx.iter().map(|&i| data[i].clone()).collect();
        let mut rng = stream(cfg.seed, streams::STEP_NOISE.wrapping_add(iter));
        let noise = if model.config.prob_path {
            draw_noise(model, batch.len(), cfg.samples, &mut rng)
        } else {
            Vec::new()
        };
        let mut split_rng = stream(cfg.seed, streams::STEP_SPLIT.wrapping_add(iter));
        let inputs = training_inputs(&batch, cfg.cond_fraction, &mut split_rng)?;
        let conds: Vec<&IrregularSeries> = inputs.iter().collect();
        let (rep, grads) = nvae_loss_grad(model, &batch, &conds, &noise, cfg)?;
        check_finite(&rep, iter + 1)?;
        if let Some(bad) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numerical(format!(
                "gradient of `{}` is not finite at iteration {}",
                bad.0,
                iter + 1
            )));
        }
        state.step(&mut model.params, &grads)?;
        history.push(LossRecord::from_report(iter + 1, &rep));
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < cfg.iterations {
            on_checkpoint(model, state, &history)?;
        }
    }
    on_checkpoint(model, state, &history)?;
    Ok(history)
}

/// Standard-normal draw used when noise is needed outside training.
pub fn frozen_noise(model: &Hetvae, n_cases: usize, samples: usize, seed: u64) -> Vec<Array> {
    let mut rng = stream(seed, streams::TRAIN_NOISE);
    draw_noise(model, n_cases, samples, &mut rng)
}
