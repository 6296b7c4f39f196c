use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::engine::{Scalar, Tensor};

/// Per-channel mean and standard deviation of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(ds: &Dataset) -> Result<Self, DataError> {
        if ds.is_empty() {
            return Err(DataError::Invalid("cannot compute statistics of an empty dataset".into()));
        }
        let plane = ds.height * ds.width;
        let count = (ds.len() * plane) as f64;
        let mut mean = vec![0.0; ds.channels];
        let mut sq = vec![0.0; ds.channels];
        for i in 0..ds.len() {
            for (c, px) in ds.image(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt()
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// Maps images at `indices` to a `[n, C, H, W]` tensor with
/// `(p/255 − mean_c) / std_c`. A zero standard deviation is treated as one.
pub fn normalize<T: Scalar>(ds: &Dataset, indices: &[usize], stats: Option<&NormStats>) -> Result<Tensor<T>, DataError> {
    let stats = stats.ok_or_else(|| DataError::MissingStats(ds.provenance.clone()))?;
    if stats.mean.len() != ds.channels || stats.std.len() != ds.channels {
        return Err(DataError::Invalid(format!(
            "statistics for {} channels applied to {}-channel images",
            stats.mean.len(),
            ds.channels
        )));
    }
    let plane = ds.height * ds.width;
    let scale: Vec<f64> = stats.std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 }).collect();
    let mut out = Vec::with_capacity(indices.len() * ds.image_len());
    for &i in indices {
        for (c, px) in ds.image(i).chunks(plane).enumerate() {
            out.extend(px.iter().map(|&p| T::cast_f64((p as f64 / 255.0 - stats.mean[c]) * scale[c])));
        }
    }
    Tensor::from_vec(&[indices.len(), ds.channels, ds.height, ds.width], out)
        .map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixels_at_the_mean_map_to_zero() {
        let ds = Dataset::new(2, 2, 2, vec![51; 16], vec![0, 1]).unwrap();
        let stats = NormStats { mean: vec![0.2, 0.2], std: vec![0.5, 0.1] };
        let t: Tensor<f64> = normalize(&ds, &[0, 1], Some(&stats)).unwrap();
        assert!(t.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_std_is_clamped() {
        let ds = Dataset::new(1, 2, 2, vec![200; 4], vec![0]).unwrap();
        let stats = NormStats::compute(&ds).unwrap();
        assert_eq!(stats.std, vec![0.0]);
        let t: Tensor<f32> = normalize(&ds, &[0], Some(&stats)).unwrap();
        assert!(t.all_finite());
    }

    #[test]
    fn missing_stats_are_rejected() {
        let ds = Dataset::new(1, 1, 1, vec![0], vec![0]).unwrap();
        assert!(matches!(normalize::<f32>(&ds, &[0], None), Err(DataError::MissingStats(_))));
    }
}
