use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::series::{Channel, IrregularSeries};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Splits a case's pooled observations into conditioning and target sets.
///
/// `⌈fraction · n⌉` points (at least one) are drawn uniformly without
/// replacement across all channels; the rest become targets.
pub fn split_condition_target(
    series: &IrregularSeries,
    fraction: f64,
    rng: &mut Rng,
) -> Result<(IrregularSeries, IrregularSeries)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("conditioning fraction {fraction} not in (0, 1)")));
    }
    let pooled: Vec<(usize, usize)> = series
        .channels
        .iter()
        .enumerate()
        .flat_map(|(d, c)| (0..c.len()).map(move |j| (d, j)))
        .collect();
    if pooled.is_empty() {
        return Err(Error::Data(format!("series `{}` has no observations", series.id)));
    }
    let n_cond = ((fraction * pooled.len() as f64).ceil() as usize).clamp(1, pooled.len());
    let mut chosen = vec![false; pooled.len()];
    for i in index::sample(rng, pooled.len(), n_cond) {
        chosen[i] = true;
    }
    let mut cond = vec![Channel::default(); series.dim()];
    let mut target = vec![Channel::default(); series.dim()];
    for (&(d, j), &c) in pooled.iter().zip(&chosen) {
        let dst = if c { &mut cond[d] } else { &mut target[d] };
        dst.times.push(series.channels[d].times[j]);
        dst.values.push(series.channels[d].values[j]);
    }
    Ok((
        IrregularSeries::new(series.id.clone(), cond),
        IrregularSeries::new(series.id.clone(), target),
    ))
}

/// Case ids assigned to each split, with the rule used to size them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub rule: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const SPLIT_RULE: &str = "test = ceil(n / 5); val = ceil((n - test) / 5); train = rest";

/// `(train, val, test)` sizes for `n` cases.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n.div_ceil(5);
    let val = (n - test).div_ceil(5);
    (n - test - val, val, test)
}

/// Shuffles the cases and assigns them to train / val / test, keeping the
/// original order within each split.
pub fn train_val_test(
    data: &[IrregularSeries],
    seed: u64,
    rng: &mut Rng,
) -> (SplitManifest, [Vec<IrregularSeries>; 3]) {
    let (n_train, n_val, _) = split_sizes(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut which = vec![2u8; data.len()];
    for &i in &order[..n_train] {
        which[i] = 0;
    }
    for &i in &order[n_train..n_train + n_val] {
        which[i] = 1;
    }
    let mut parts: [Vec<IrregularSeries>; 3] = Default::default();
    for (s, &w) in data.iter().zip(&which) {
        parts[w as usize].push(s.clone());
    }
    let ids = |p: &Vec<IrregularSeries>| p.iter().map(|s| s.id.clone()).collect();
    let manifest = SplitManifest {
        seed,
        rule: SPLIT_RULE.to_string(),
        train: ids(&parts[0]),
        val: ids(&parts[1]),
        test: ids(&parts[2]),
    };
    (manifest, parts)
}
