//! Kernel-smoothed random trajectories on a regular grid, subsampled into
//! sparse univariate series.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::series::{Channel, IrregularSeries};
use crate::error::{Error, Result};
use crate::rng::{normals, stream, streams, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_trajectories: usize,
    pub n_points: usize,
    pub n_anchors: usize,
    /// RBF bandwidth `α` in `exp(−α (t − r)²)`.
    pub bandwidth: f64,
    pub noise_std: f64,
    pub min_obs: usize,
    pub max_obs: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 2000,
            n_points: 50,
            n_anchors: 10,
            bandwidth: 120.0,
            noise_std: 0.1,
            min_obs: 3,
            max_obs: 10,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 || self.n_points == 0 || self.n_anchors == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if !(self.bandwidth > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("bandwidth must be positive, noise_std non-negative".into()));
        }
        if self.min_obs == 0 || self.min_obs > self.max_obs || self.max_obs > self.n_points {
            return Err(Error::Config(format!(
                "need 0 < min_obs ({}) <= max_obs ({}) <= n_points ({})",
                self.min_obs, self.max_obs, self.n_points
            )));
        }
        Ok(())
    }

    /// Anchor locations `k / n_anchors`, `k = 1..=n_anchors`.
    pub fn anchors(&self) -> Vec<f64> {
        let step = 1.0 / self.n_anchors as f64;
        (1..=self.n_anchors).map(|k| k as f64 * step).collect()
    }

    /// Grid times `i / n_points`, `i = 1..=n_points`.
    pub fn grid(&self) -> Vec<f64> {
        let step = 1.0 / self.n_points as f64;
        (1..=self.n_points).map(|i| i as f64 * step).collect()
    }
}

/// A fully observed trajectory on the generation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Normalized RBF smoother: `Σ_k w_k z_k / Σ_k w_k` with `w_k = exp(−α (t − r_k)²)`.
pub fn smooth(t: f64, anchors: &[f64], anchor_values: &[f64], bandwidth: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&r, &z) in anchors.iter().zip(anchor_values) {
        let w = (-bandwidth * (t - r) * (t - r)).exp();
        num += w * z;
        den += w;
    }
    num / den
}

fn trajectory(cfg: &SyntheticConfig, rng: &mut Rng, anchors: &[f64], grid: &[f64]) -> DenseTrajectory {
    let z = normals(rng, cfg.n_anchors);
    let noise = normals(rng, cfg.n_points);
    let values = grid
        .iter()
        .zip(&noise)
        .map(|(&t, &e)| smooth(t, anchors, &z, cfg.bandwidth) + cfg.noise_std * e)
        .collect();
    DenseTrajectory {
        times: grid.to_vec(),
        values,
    }
}

/// Draws every dense trajectory. Trajectory `i` uses its own stream, so the
/// result for a given index does not depend on `n_trajectories`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<DenseTrajectory>> {
    cfg.validate()?;
    let anchors = cfg.anchors();
    let grid = cfg.grid();
    Ok((0..cfg.n_trajectories)
        .map(|i| {
            let mut rng = stream(cfg.seed, streams::TRAJECTORY + i as u64);
            trajectory(cfg, &mut rng, &anchors, &grid)
        })
        .collect())
}

/// Keeps `m ~ U{min_obs..=max_obs}` distinct grid points chosen uniformly.
pub fn subsample(
    id: impl Into<String>,
    traj: &DenseTrajectory,
    min_obs: usize,
    max_obs: usize,
    rng: &mut Rng,
) -> Result<IrregularSeries> {
    let n = traj.times.len();
    if min_obs > max_obs || max_obs > n {
        return Err(Error::Config(format!(
            "cannot draw {min_obs}..={max_obs} observations from {n} points"
        )));
    }
    let m = rng.gen_range(min_obs..=max_obs);
    let mut picked = index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    let times = picked.iter().map(|&i| traj.times[i]).collect();
    let values = picked.iter().map(|&i| traj.values[i]).collect();
    Ok(IrregularSeries::new(id, vec![Channel::new(times, values)]))
}

/// Generates and subsamples the full synthetic dataset.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<IrregularSeries>> {
    generate_synthetic(cfg)?
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut rng = stream(cfg.seed, streams::SUBSAMPLE + i as u64);
            subsample(format!("syn-{i:05}"), traj, cfg.min_obs, cfg.max_obs, &mut rng)
        })
        .collect()
}
