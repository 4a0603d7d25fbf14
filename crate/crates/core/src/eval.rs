//! Interpolation metrics and trace export.

use serde::{Deserialize, Serialize};

use crate::data::{split_condition_target, IrregularSeries};
use crate::error::{Error, Result};
use crate::model::{Hetvae, Prediction};
use crate::numgrad::logsumexp;
use crate::objective::gaussian_logpdf;
use crate::rng::{keyed, streams, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fraction of each case's points used for conditioning.
    pub fraction: f64,
    /// Latent samples per case.
    pub samples: usize,
    /// Number of repeated evaluation seeds.
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            samples: 100,
            seeds: 5,
        }
    }
}

/// `−log(1/S Σ_s N(x; μ_s, σ²_s))`.
pub fn mixture_nll_point(x: f64, mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    if mu.is_empty() || mu.len() != sigma2.len() {
        return Err(Error::Dimension(format!(
            "{} means and {} variances",
            mu.len(),
            sigma2.len()
        )));
    }
    let logs = mu
        .iter()
        .zip(sigma2)
        .map(|(m, v)| gaussian_logpdf(x, *m, *v))
        .collect::<Result<Vec<_>>>()?;
    Ok((mu.len() as f64).ln() - logsumexp(&logs))
}

/// Target points of a case as `(time, dim, value)` triples.
fn target_points(target: &IrregularSeries) -> Vec<(f64, usize, f64)> {
    target
        .channels
        .iter()
        .enumerate()
        .flat_map(|(d, c)| c.times.iter().zip(&c.values).map(move |(t, x)| (*t, d, *x)))
        .collect()
}

/// Per-target mixture NLL, mixture means and targets read from a prediction
/// made at `target.observed_times()`.
fn score(pred: &Prediction, target: &IrregularSeries) -> Result<CaseMetrics> {
    let s = pred.n_samples();
    let mut m = CaseMetrics::default();
    let mut mu = vec![0.0; s];
    let mut var = vec![0.0; s];
    for (t, d, x) in target_points(target) {
        let q = pred
            .times
            .binary_search_by(|p| p.total_cmp(&t))
            .map_err(|_| Error::Contract(format!("target time {t} not queried")))?;
        for i in 0..s {
            (mu[i], var[i]) = pred.at(i, q, d);
        }
        m.nll_sum += mixture_nll_point(x, &mu, &var)?;
        let mean = mu.iter().sum::<f64>() / s as f64;
        m.abs_sum += (x - mean).abs();
        m.sq_sum += (x - mean) * (x - mean);
        m.n_targets += 1;
    }
    Ok(m)
}

/// Mean mixture NLL over `target`'s points after conditioning on `cond`.
pub fn mixture_nll(
    model: &Hetvae,
    cond: &IrregularSeries,
    target: &IrregularSeries,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    if target.n_obs() == 0 {
        return Err(Error::Data(format!("case `{}` has no target points", target.id)));
    }
    let pred = model.predict(cond, &target.observed_times(), samples, rng)?;
    let m = score(&pred, target)?;
    Ok(m.nll_sum / m.n_targets as f64)
}

pub fn point_metrics(means: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if means.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            means.len(),
            targets.len()
        )));
    }
    if means.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = means.len() as f64;
    let (mut a, mut s) = (0.0, 0.0);
    for (m, x) in means.iter().zip(targets) {
        a += (x - m).abs();
        s += (x - m) * (x - m);
    }
    Ok((a / n, s / n))
}

/// Sums over one case's targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub nll_sum: f64,
    pub abs_sum: f64,
    pub sq_sum: f64,
    pub n_targets: usize,
}

/// Observation-weighted metrics for one evaluation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub seed: u64,
    pub nll: f64,
    pub mae: f64,
    pub mse: f64,
    pub n_targets: usize,
    pub n_cases: usize,
    pub skipped: usize,
}

impl EvalMetrics {
    pub fn from_cases(seed: u64, cases: &[Option<CaseMetrics>]) -> Self {
        let mut total = CaseMetrics::default();
        for c in cases.iter().flatten() {
            total.nll_sum += c.nll_sum;
            total.abs_sum += c.abs_sum;
            total.sq_sum += c.sq_sum;
            total.n_targets += c.n_targets;
        }
        let n = total.n_targets.max(1) as f64;
        let scored = cases.iter().filter(|c| c.is_some()).count();
        Self {
            seed,
            nll: total.nll_sum / n,
            mae: total.abs_sum / n,
            mse: total.sq_sum / n,
            n_targets: total.n_targets,
            n_cases: scored,
            skipped: cases.len() - scored,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub nll_std: f64,
    pub mae: f64,
    pub mae_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    pub n_targets: usize,
    pub fraction: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalMetrics>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_runs(cfg: &EvalConfig, runs: Vec<EvalMetrics>) -> Self {
        let col = |f: fn(&EvalMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (nll, nll_std) = col(|r| r.nll);
        let (mae, mae_std) = col(|r| r.mae);
        let (mse, mse_std) = col(|r| r.mse);
        Self {
            nll,
            nll_std,
            mae,
            mae_std,
            mse,
            mse_std,
            n_targets: runs.first().map_or(0, |r| r.n_targets),
            fraction: cfg.fraction,
            samples: cfg.samples,
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
        }
    }
}

/// Conditions on a random `fraction` of one case and scores the rest.
/// Returns `None` when the case has no target points.
pub fn evaluate_case(
    model: &Hetvae,
    case: &IrregularSeries,
    fraction: f64,
    samples: usize,
    seed: u64,
) -> Result<Option<CaseMetrics>> {
    if case.n_obs() == 0 {
        return Ok(None);
    }
    let mut split_rng = keyed(seed, streams::CONDITION, &case.id);
    let (cond, target) = split_condition_target(case, fraction, &mut split_rng)?;
    if target.n_obs() == 0 {
        return Ok(None);
    }
    let mut rng = keyed(seed, streams::CASE_NOISE, &case.id);
    let pred = model.predict(&cond, &target.observed_times(), samples, &mut rng)?;
    score(&pred, &target).map(Some)
}

/// Runs `f` over `items` on up to `jobs` threads, returning results in input
/// order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// One pass of the conditioning protocol over a normalized test split.
pub fn evaluate(
    model: &Hetvae,
    test: &[IrregularSeries],
    fraction: f64,
    samples: usize,
    seed: u64,
    jobs: usize,
) -> Result<EvalMetrics> {
    if samples == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    let cases = parallel_map(test, jobs, |c| evaluate_case(model, c, fraction, samples, seed))?;
    let m = EvalMetrics::from_cases(seed, &cases);
    if m.skipped > 0 {
        log::warn!("{} case(s) had no target points and were skipped", m.skipped);
    }
    Ok(m)
}

/// Repeats [`evaluate`] for seeds `seed, seed + 1, …`.
pub fn evaluate_seeds(
    model: &Hetvae,
    test: &[IrregularSeries],
    cfg: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    let runs = (0..cfg.seeds as u64)
        .map(|i| evaluate(model, test, cfg.fraction, cfg.samples, seed + i, jobs))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(cfg, runs))
}

/// Mixture mean and standard deviation per query time and dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTrace {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major `[Q, D]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const TRACE_HEADER: &str = "time,dim,mean,std";

impl InterpolationTrace {
    pub fn from_prediction(pred: &Prediction) -> Self {
        let sh = pred.mu.shape();
        let (s, q, d) = (sh[0], sh[1], sh[2]);
        let mut mean = Vec::with_capacity(q * d);
        let mut std = Vec::with_capacity(q * d);
        for qi in 0..q {
            for di in 0..d {
                let (mut m, mut v) = (0.0, 0.0);
                for si in 0..s {
                    let (mu, s2) = pred.at(si, qi, di);
                    m += mu;
                    v += s2;
                }
                m /= s as f64;
                let mut spread = 0.0;
                for si in 0..s {
                    let dev = pred.at(si, qi, di).0 - m;
                    spread += dev * dev;
                }
                mean.push(m);
                std.push(((v + spread) / s as f64).sqrt());
            }
        }
        Self {
            times: pred.times.clone(),
            dim: d,
            mean,
            std,
        }
    }

    pub fn get(&self, q: usize, d: usize) -> (f64, f64) {
        (self.mean[q * self.dim + d], self.std[q * self.dim + d])
    }

    /// Maps times and values back through `f_time` / `f_value(d, mean, std)`.
    pub fn map_units(
        &self,
        f_time: impl Fn(f64) -> f64,
        f_value: impl Fn(usize, f64, f64) -> (f64, f64),
    ) -> Self {
        let mut out = self.clone();
        out.times.iter_mut().for_each(|t| *t = f_time(*t));
        for q in 0..self.times.len() {
            for d in 0..self.dim {
                let i = q * self.dim + d;
                (out.mean[i], out.std[i]) = f_value(d, self.mean[i], self.std[i]);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for (q, t) in self.times.iter().enumerate() {
            for d in 0..self.dim {
                let (m, s) = self.get(q, d);
                out.push_str(&format!("{t},{d},{m},{s}\n"));
            }
        }
        out
    }
}

pub fn interpolation_trace(
    model: &Hetvae,
    cond: &IrregularSeries,
    grid: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<InterpolationTrace> {
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("query grid must be finite and sorted".into()));
    }
    let pred = model.predict(cond, grid, samples, rng)?;
    Ok(InterpolationTrace::from_prediction(&pred))
}
