use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations of one dimension: strictly ascending times with matching values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    #[serde(rename = "t")]
    pub times: Vec<f64>,
    #[serde(rename = "x")]
    pub values: Vec<f64>,
}

impl Channel {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        Self { times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sorts observations by time (ties by value).
    pub fn sorted(&self) -> Channel {
        let mut pairs: Vec<(f64, f64)> = self
            .times
            .iter()
            .copied()
            .zip(self.values.iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (times, values) = pairs.into_iter().unzip();
        Channel { times, values }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.times.len() != self.values.len() {
            return Err(format!(
                "{} times but {} values",
                self.times.len(),
                self.values.len()
            ));
        }
        if let Some(bad) = self.times.iter().chain(&self.values).find(|v| !v.is_finite()) {
            return Err(format!("non-finite entry {bad}"));
        }
        if let Some(w) = self.times.windows(2).find(|w| w[0] >= w[1]) {
            return Err(format!("times not strictly ascending ({} then {})", w[0], w[1]));
        }
        Ok(())
    }
}

/// One data case: per-dimension observation lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrregularSeries {
    pub id: String,
    pub channels: Vec<Channel>,
}

impl IrregularSeries {
    pub fn new(id: impl Into<String>, channels: Vec<Channel>) -> Self {
        Self {
            id: id.into(),
            channels,
        }
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    /// Total observation count across dimensions.
    pub fn n_obs(&self) -> usize {
        self.channels.iter().map(Channel::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (d, c) in self.channels.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::Data(format!("series `{}` channel {d}: {e}", self.id)))?;
        }
        Ok(())
    }

    /// Sorted, de-duplicated union of observation times over all channels.
    pub fn observed_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.channels.iter().flat_map(|c| c.times.iter().copied()).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

pub type Dataset = Vec<IrregularSeries>;

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let series: IrregularSeries = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        series
            .validate()
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        match dim {
            None => dim = Some(series.dim()),
            Some(d) if d != series.dim() => {
                return Err(Error::Data(format!(
                    "{}:{lineno}: series has {} channels, expected {d}",
                    path.display(),
                    series.dim()
                )))
            }
            _ => {}
        }
        out.push(series);
    }
    Ok(out)
}

pub fn write_dataset(dataset: &[IrregularSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in dataset {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
