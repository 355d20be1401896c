use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest divisor used for a channel's standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel statistics fitted on valid (unpadded) steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and std per channel. Indicator channels keep mean 0
    /// and std 1 so they pass through unchanged.
    pub fn fit(ds: &Dataset) -> ChannelStats {
        let r = ds.input_dim;
        let passthrough = ds.indicator_from.unwrap_or(r);
        let mut count = 0usize;
        let mut mean = vec![0.0; r];
        for s in &ds.samples {
            for row in s.x.chunks_exact(r) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            count += s.len;
        }
        let n = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; r];
        for s in &ds.samples {
            for row in s.x.chunks_exact(r) {
                for c in 0..r {
                    let d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        for c in passthrough..r {
            mean[c] = 0.0;
            std[c] = 1.0;
        }
        ChannelStats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, r: usize) -> Result<()> {
        if r != self.dim() {
            return Err(Error::Shape(format!(
                "statistics cover {} channels, data has {r}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds.input_dim)?;
        let mut out = ds.clone();
        for s in &mut out.samples {
            for row in s.x.chunks_exact_mut(ds.input_dim) {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(out)
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds.input_dim)?;
        let mut out = ds.clone();
        for s in &mut out.samples {
            for row in s.x.chunks_exact_mut(ds.input_dim) {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = *v * self.std[c] + self.mean[c];
                }
            }
        }
        Ok(out)
    }

    /// Standardizes a padded `B × T × R` batch, leaving steps past each
    /// row's length at zero.
    pub fn apply_tensor(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let &[b, t, r] = x.shape() else {
            return Err(Error::Shape(format!("expected B×T×R input, got {:?}", x.shape())));
        };
        self.check(r)?;
        if lengths.len() != b {
            return Err(Error::Shape(format!("{} lengths for batch of {b}", lengths.len())));
        }
        let mut out = x.clone();
        let data = out.data_mut();
        for (row, &len) in lengths.iter().enumerate() {
            for step in 0..len.min(t) {
                let base = (row * t + step) * r;
                for c in 0..r {
                    data[base + c] = (data[base + c] - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(out)
    }
}

/// Fits statistics on `ds` unless `stats` is given, and applies them.
pub fn standardize(ds: &Dataset, stats: Option<&ChannelStats>) -> Result<(Dataset, ChannelStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::fit(ds),
    };
    Ok((stats.apply(ds)?, stats))
}
