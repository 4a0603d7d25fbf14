use serde::{Deserialize, Serialize};

use super::series::IrregularSeries;
use crate::error::{Error, Result};

pub const DEFAULT_TRIM: f64 = 0.001;
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-transform plus an affine time rescaling onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub trim: f64,
    pub t_min: f64,
    pub t_max: f64,
}

/// 1-based nearest-rank bounds `[lo, hi]` kept after trimming `trim` of the
/// mass from each tail of `n` sorted values.
pub fn trim_ranks(n: usize, trim: f64) -> (usize, usize) {
    let lo = ((trim * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let lo = lo.min(n.div_ceil(2));
    (lo, n + 1 - lo)
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits statistics on a training split.
///
/// Extreme values are excluded from the statistics only; every point is
/// still transformed by [`Normalizer::apply`].
pub fn fit_normalizer(train: &[IrregularSeries], trim: f64) -> Result<Normalizer> {
    let dim = train
        .first()
        .map(IrregularSeries::dim)
        .ok_or_else(|| Error::Data("cannot fit a normalizer on an empty split".into()))?;
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Config(format!("trim fraction {trim} outside [0, 0.5)")));
    }
    let mut mean = Vec::with_capacity(dim);
    let mut std = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut vals: Vec<f64> = train
            .iter()
            .flat_map(|s| s.channels[d].values.iter().copied())
            .collect();
        if vals.is_empty() {
            return Err(Error::Data(format!("dimension {d} has no observations in the training split")));
        }
        vals.sort_by(f64::total_cmp);
        let (lo, hi) = trim_ranks(vals.len(), trim);
        let (m, s) = moments(&vals[lo - 1..hi]);
        mean.push(m);
        std.push(s.max(STD_FLOOR));
    }
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in train.iter().flat_map(|s| s.channels.iter().flat_map(|c| c.times.iter())) {
        t_min = t_min.min(*t);
        t_max = t_max.max(*t);
    }
    Ok(Normalizer {
        mean,
        std,
        trim,
        t_min,
        t_max,
    })
}

impl Normalizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn t_span(&self) -> f64 {
        let span = self.t_max - self.t_min;
        if span > 0.0 {
            span
        } else {
            1.0
        }
    }

    pub fn time(&self, t: f64) -> f64 {
        (t - self.t_min) / self.t_span()
    }

    pub fn time_inverse(&self, t: f64) -> f64 {
        t * self.t_span() + self.t_min
    }

    pub fn value(&self, d: usize, x: f64) -> f64 {
        (x - self.mean[d]) / self.std[d]
    }

    pub fn value_inverse(&self, d: usize, x: f64) -> f64 {
        x * self.std[d] + self.mean[d]
    }

    fn map(
        &self,
        series: &IrregularSeries,
        ft: impl Fn(f64) -> f64,
        fx: impl Fn(usize, f64) -> f64,
    ) -> Result<IrregularSeries> {
        if series.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "series `{}` has {} channels, normalizer has {}",
                series.id,
                series.dim(),
                self.dim()
            )));
        }
        let mut out = series.clone();
        for (d, c) in out.channels.iter_mut().enumerate() {
            c.times.iter_mut().for_each(|t| *t = ft(*t));
            c.values.iter_mut().for_each(|x| *x = fx(d, *x));
        }
        Ok(out)
    }

    pub fn apply(&self, series: &IrregularSeries) -> Result<IrregularSeries> {
        self.map(series, |t| self.time(t), |d, x| self.value(d, x))
    }

    pub fn invert(&self, series: &IrregularSeries) -> Result<IrregularSeries> {
        self.map(series, |t| self.time_inverse(t), |d, x| self.value_inverse(d, x))
    }

    pub fn apply_all(&self, data: &[IrregularSeries]) -> Result<Vec<IrregularSeries>> {
        data.iter().map(|s| self.apply(s)).collect()
    }
}
