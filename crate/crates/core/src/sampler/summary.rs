//! Location-wise posterior summaries of a sample set.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{mean, quantile_sorted, variance};
use crate::transforms::{karcher_mean, AffineTransform, KARCHER_MAX_ITER, KARCHER_TOL};

use super::chain::Sample;

/// Ratios are reported as zero where the standard deviation is below this.
pub const SD_FLOOR: f64 = 1e-12;

/// Mean, standard deviation, mean/sd ratio and equal-tailed interval of a
/// scalar field's samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub ratio: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FieldSummary {
    /// `columns[k]` holds all draws at location `k`.
    pub fn from_columns(columns: &[Vec<f64>], level: f64) -> Result<Self> {
        let mut s = FieldSummary {
            mean: Vec::with_capacity(columns.len()),
            sd: Vec::with_capacity(columns.len()),
            ratio: Vec::with_capacity(columns.len()),
            lower: Vec::with_capacity(columns.len()),
            upper: Vec::with_capacity(columns.len()),
        };
        let tail = 0.5 * (1.0 - level);
        for col in columns {
            if col.len() < 2 {
                return Err(Error::InsufficientSamples {
                    needed: 2,
                    got: col.len(),
                });
            }
            let m = mean(col);
            let sd = variance(col).max(0.0).sqrt();
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            s.mean.push(m);
            s.sd.push(sd);
            s.ratio.push(if sd < SD_FLOOR { 0.0 } else { m / sd });
            s.lower.push(quantile_sorted(&sorted, tail));
            s.upper.push(quantile_sorted(&sorted, 1.0 - tail));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub level: f64,
    pub samples: usize,
    pub template: FieldSummary,
    /// Karcher means of the sampled forward transforms, per subject.
    pub forward: Vec<AffineTransform>,
    /// Karcher means of the sampled reverse transforms, per subject.
    pub reverse: Vec<AffineTransform>,
    pub beta_mean: Vec<f64>,
    pub sigma2_mean: Vec<f64>,
    pub alpha_mean: f64,
    pub rho_mean: f64,
    pub rho_median: f64,
}

/// Summarizes a sample set at credible level `level` (e.g. 0.95).
pub fn summarize(samples: &[Sample], level: f64) -> Result<PosteriorSummary> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("credible level {level} must lie in (0, 1)")));
    }
    let v = samples[0].x.len();
    let n = samples[0].t.len();
    let columns: Vec<Vec<f64>> = (0..v).map(|l| samples.iter().map(|s| s.x[l]).collect()).collect();
    let per_subject = |f: &dyn Fn(&Sample, usize) -> AffineTransform| -> Result<Vec<AffineTransform>> {
        (0..n)
            .map(|i| {
                let ts: Vec<AffineTransform> = samples.iter().map(|s| f(s, i)).collect();
                karcher_mean(&ts, KARCHER_TOL, KARCHER_MAX_ITER)
            })
            .collect()
    };
    let mut rhos: Vec<f64> = samples.iter().map(|s| s.rho).collect();
    rhos.sort_by(f64::total_cmp);
    let k = samples.len() as f64;
    Ok(PosteriorSummary {
        level,
        samples: samples.len(),
        template: FieldSummary::from_columns(&columns, level)?,
        forward: per_subject(&|s, i| s.t[i].clone())?,
        reverse: per_subject(&|s, i| s.t_r[i].clone())?,
        beta_mean: (0..n).map(|i| samples.iter().map(|s| s.beta[i]).sum::<f64>() / k).collect(),
        sigma2_mean: (0..n).map(|i| samples.iter().map(|s| s.sigma2[i]).sum::<f64>() / k).collect(),
        alpha_mean: samples.iter().map(|s| s.alpha).sum::<f64>() / k,
        rho_mean: rhos.iter().sum::<f64>() / k,
        rho_median: quantile_sorted(&rhos, 0.5),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<f64>, shift: f64) -> Sample {
        Sample {
            iteration: 0,
            x,
            t: vec![AffineTransform::translation(&[shift])],
            t_r: vec![AffineTransform::translation(&[-shift])],
            beta: vec![1.0],
            sigma2: vec![1.0],
            alpha: 1.0,
            rho: 1.0,
        }
    }

    #[test]
    fn constant_samples_collapse() {
        let s = vec![sample(vec![3.0, -1.0], 0.0); 5];
        let sum = summarize(&s, 0.9).unwrap();
        assert_eq!(sum.template.sd, vec![0.0, 0.0]);
        assert_eq!(sum.template.ratio, vec![0.0, 0.0]);
        assert_eq!(sum.template.lower, sum.template.upper);
        assert_eq!(sum.template.lower, vec![3.0, -1.0]);
    }

    #[test]
    fn two_point_order_statistics() {
        let s = vec![sample(vec![0.0], 0.0), sample(vec![2.0], 0.0)];
        let sum = summarize(&s, 0.5).unwrap();
        assert!((sum.template.mean[0] - 1.0).abs() < 1e-15);
        assert!((sum.template.sd[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((sum.template.lower[0] - 0.5).abs() < 1e-15);
        assert!((sum.template.upper[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn translations_average_arithmetically() {
        let shifts = [0.3, -0.1, 0.7, 0.25];
        let s: Vec<Sample> = shifts.iter().map(|&b| sample(vec![0.0], b)).collect();
        let sum = summarize(&s, 0.9).unwrap();
        let m = shifts.iter().sum::<f64>() / 4.0;
        assert!((sum.forward[0].offset()[0] - m).abs() < 1e-9);
        assert!((sum.reverse[0].offset()[0] + m).abs() < 1e-9);
    }

    #[test]
    fn one_sample_rejected() {
        let s = vec![sample(vec![0.0], 0.0)];
        assert!(matches!(summarize(&s, 0.9), Err(Error::InsufficientSamples { .. })));
    }
}
