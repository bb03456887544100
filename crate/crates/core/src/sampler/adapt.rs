//! Adaptive random-walk proposal scales.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Acceptance rate targeted by multivariate proposals.
pub const TARGET_ACCEPT: f64 = 0.234;
/// Acceptance rate targeted by scalar proposals.
pub const TARGET_ACCEPT_SCALAR: f64 = 0.44;
const COV_JITTER: f64 = 1e-8;

/// Robbins-Monro gain `k^{-0.6}`.
pub fn gain(k: u64) -> f64 {
    (k.max(1) as f64).powf(-0.6)
}

/// Outcome of one Metropolis-Hastings step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Accepted,
    Rejected,
    /// The proposal moved a site outside the neighbor library.
    OutOfBounds,
    /// The proposal had no real logarithm or was otherwise invalid.
    Invalid,
}

impl Outcome {
    pub fn from_accepted(accepted: bool) -> Self {
        if accepted {
            Outcome::Accepted
        } else {
            Outcome::Rejected
        }
    }

    pub fn accepted(self) -> bool {
        self == Outcome::Accepted
    }
}

/// Proposal state for a Lie-algebra random walk: `δ ~ N(0, λ_δ Σ_T)`.
#[derive(Clone, Debug)]
pub struct AdaptRecord {
    log_scale: f64,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
    n_accepted_adapt: u64,
    steps: u64,
    pub proposals: u64,
    pub accepts: u64,
    pub out_of_bounds: u64,
    pub invalid: u64,
}

impl AdaptRecord {
    /// Starts from a diagonal covariance and `λ_δ = 1`.
    pub fn new(diag: &[f64]) -> Self {
        let p = diag.len();
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        let chol = cov.map(|v| v.sqrt());
        Self {
            log_scale: 0.0,
            cov,
            chol,
            sum: DVector::zeros(p),
            outer: DMatrix::zeros(p, p),
            n_accepted_adapt: 0,
            steps: 0,
            proposals: 0,
            accepts: 0,
            out_of_bounds: 0,
            invalid: 0,
        }
    }

    /// Default initial covariance for `d`-dimensional affine transforms:
    /// translation sd of half a lattice spacing, linear-part sd 0.01.
    pub fn for_affine(dim: usize, spacing: &[f64]) -> Self {
        let mut diag = Vec::with_capacity(dim * (dim + 1));
        for i in 0..dim {
            for j in 0..=dim {
                diag.push(if j == dim { (0.5 * spacing[i]).powi(2) } else { 1e-4 });
            }
        }
        Self::new(&diag)
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn set_scale(&mut self, lambda: f64) {
        self.log_scale = lambda.ln();
    }

    /// `λ_δ Σ_T`.
    pub fn proposal_cov(&self) -> DMatrix<f64> {
        &self.cov * self.scale()
    }

    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.dim();
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let d = &self.chol * z * (0.5 * self.log_scale).exp();
        d.iter().copied().collect()
    }

    pub fn record(&mut self, outcome: Outcome) {
        self.proposals += 1;
        match outcome {
            Outcome::Accepted => self.accepts += 1,
            Outcome::OutOfBounds => self.out_of_bounds += 1,
            Outcome::Invalid => self.invalid += 1,
            Outcome::Rejected => {}
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }

    /// One adaptation step after a proposal `delta` with the given result.
    pub fn adapt(&mut self, accepted: bool, delta: &[f64]) {
        self.steps += 1;
        let g = gain(self.steps);
        self.log_scale += g * (if accepted { 1.0 } else { 0.0 } - TARGET_ACCEPT);
        self.log_scale = self.log_scale.clamp(-40.0, 10.0);
        if !accepted {
            return;
        }
        let p = self.dim();
        let d = DVector::from_column_slice(delta);
        self.sum += &d;
        self.outer += &d * d.transpose();
        self.n_accepted_adapt += 1;
        let n = self.n_accepted_adapt as f64;
        if self.n_accepted_adapt as usize >= 20 * p {
            let mean = &self.sum / n;
            let mut cov = (&self.outer - &mean * mean.transpose() * n) / (n - 1.0);
            for i in 0..p {
                cov[(i, i)] += COV_JITTER;
            }
            if let Some(c) = cov.clone().cholesky() {
                self.chol = c.l();
                self.cov = cov;
            }
        }
    }
}

/// Adaptive step size for a scalar Gaussian random walk.
#[derive(Clone, Debug)]
pub struct ScalarAdapt {
    log_step: f64,
    steps: u64,
    pub proposals: u64,
    pub accepts: u64,
}

impl ScalarAdapt {
    pub fn new(step: f64) -> Self {
        Self {
            log_step: step.ln(),
            steps: 0,
            proposals: 0,
            accepts: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposals += 1;
        if accepted {
            self.accepts += 1;
        }
    }

    pub fn adapt(&mut self, accepted: bool) {
        self.steps += 1;
        self.log_step += gain(self.steps) * (if accepted { 1.0 } else { 0.0 } - TARGET_ACCEPT_SCALAR);
        self.log_step = self.log_step.clamp(-30.0, 5.0);
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_rejections_shrink_scale() {
        let mut r = AdaptRecord::new(&[1.0, 1.0]);
        let mut prev = r.scale();
        for _ in 0..100 {
            r.adapt(false, &[0.0, 0.0]);
            assert!(r.scale() < prev);
            prev = r.scale();
        }
    }

    #[test]
    fn alternating_stream_settles() {
        let mut r = AdaptRecord::new(&[1.0]);
        let mut swings = Vec::new();
        let mut last = r.scale().ln();
        for k in 0..2000 {
            r.adapt(k % 2 == 0, &[0.1 * (k % 3) as f64]);
            let now = r.scale().ln();
            swings.push((now - last).abs());
            last = now;
        }
        assert!(swings[1999] < swings[1] * 0.05);
        assert!(swings.windows(2).step_by(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn empirical_covariance_takes_over() {
        let mut r = AdaptRecord::new(&[1.0, 1.0]);
        for k in 0..200 {
            let t = k as f64;
            r.adapt(true, &[(t * 0.37).sin() * 0.1, (t * 0.91).cos() * 0.02]);
        }
        let c = r.proposal_cov() / r.scale();
        assert!(c[(0, 0)] < 0.02 && c[(1, 1)] < 0.001);
    }
}
