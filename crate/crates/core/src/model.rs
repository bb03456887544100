//! The generalized-Bayes registration model: symmetric loss, priors, the
//! unnormalized Gibbs log posterior and WAIC.
//!
//! Each squared-difference term enters the pseudo-likelihood as a Gaussian
//! kernel `N(r | 0, σ_i²)` per site, so the closed-form full conditionals used
//! by the sampler are exact conditionals of [`gibbs_log_posterior`].

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::interp::{self, InterpolationPolicy};
use crate::map::{ActivationMap, Lattice, LocationSet};
use crate::spatial::{self, Conditionals, LibraryFactors, NeighborLibrary};
use crate::transforms::AffineTransform;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Prior and penalty settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub lambda_r: f64,
    pub a_t: f64,
    pub b_t: f64,
    pub a_tr: f64,
    pub b_tr: f64,
    pub a0_alpha: f64,
    pub b0_alpha: f64,
    pub rho_lower: f64,
    pub rho_upper: f64,
    pub mu0: f64,
    /// Prior precision (in units of `1/σ²`) of the scaling correction.
    pub lambda0: f64,
    pub a0: f64,
    pub a1: f64,
    pub m: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            a_t: 0.1,
            b_t: 0.1,
            a_tr: 0.1,
            b_tr: 0.1,
            a0_alpha: 0.2,
            b0_alpha: 0.1,
            rho_lower: 0.0,
            rho_upper: 3.0,
            mu0: 1.0,
            lambda0: 1.0,
            a0: 2.0,
            a1: 1.0,
            m: 10,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_t", self.a_t),
            ("b_t", self.b_t),
            ("a_tr", self.a_tr),
            ("b_tr", self.b_tr),
            ("a0_alpha", self.a0_alpha),
            ("b0_alpha", self.b0_alpha),
            ("lambda0", self.lambda0),
            ("a0", self.a0),
            ("a1", self.a1),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive (got {v})")));
            }
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda_r must be nonnegative (got {})",
                self.lambda_r
            )));
        }
        if !(self.rho_lower >= 0.0 && self.rho_lower < self.rho_upper && self.rho_upper.is_finite()) {
            return Err(Error::Validation(format!(
                "rho bounds must satisfy 0 <= rho_lower < rho_upper (got {}, {})",
                self.rho_lower, self.rho_upper
            )));
        }
        if !self.mu0.is_finite() {
            return Err(Error::Validation("mu0 must be finite".into()));
        }
        if self.m == 0 {
            return Err(Error::Validation("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gram matrix of the homogeneous site coordinates `(s, 1)`.
#[derive(Clone, Debug)]
pub struct SigmaS {
    gram: DMatrix<f64>,
    ln_det: f64,
}

impl SigmaS {
    pub fn from_locations(sites: &LocationSet) -> Result<Self> {
        let d = sites.dim();
        let mut gram = DMatrix::<f64>::zeros(d + 1, d + 1);
        for p in sites.iter() {
            for a in 0..=d {
                let pa = if a < d { p[a] } else { 1.0 };
                for b in 0..=d {
                    let pb = if b < d { p[b] } else { 1.0 };
                    gram[(a, b)] += pa * pb;
                }
            }
        }
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateInput("coordinate Gram matrix is singular".into()))?;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self { gram, ln_det })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows() - 1
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    /// `Σ_j (m_j - m0_j)^T Σ_s (m_j - m0_j)` over the rows `m_j = (A_j, b_j)`;
    /// equals the summed squared displacement `Σ_v ‖T(s_v) - s_v‖²`.
    pub fn quadratic(&self, t: &AffineTransform) -> f64 {
        let d = self.dim();
        let h = t.homogeneous();
        let mut q = 0.0;
        let mut r = vec![0.0; d + 1];
        for j in 0..d {
            for k in 0..=d {
                r[k] = h[(j, k)] - if j == k { 1.0 } else { 0.0 };
            }
            for a in 0..=d {
                for b in 0..=d {
                    q += r[a] * self.gram[(a, b)] * r[b];
                }
            }
        }
        q
    }
}

/// Multivariate-t log density of `vec(M)` with `2a` degrees of freedom,
/// location `vec(M0)` and scale `(b/a) I ⊗ Σ_s^{-1}`.
pub fn transform_log_prior(t: &AffineTransform, a: f64, b: f64, sigma_s: &SigmaS) -> f64 {
    let d = sigma_s.dim() as f64;
    let p = d * (d + 1.0);
    let nu = 2.0 * a;
    let q = sigma_s.quadratic(t) * a / b;
    let ln_det_scale = p * (b / a).ln() - d * sigma_s.ln_det();
    ln_gamma(0.5 * (nu + p)) - ln_gamma(0.5 * nu) - 0.5 * p * (nu * std::f64::consts::PI).ln()
        - 0.5 * ln_det_scale
        - 0.5 * (nu + p) * (q / nu).ln_1p()
}

/// Matrix-normal log density of `vec(M)` given precision `lambda_t`, i.e. the
/// conditional prior before marginalizing the precision.
pub fn transform_log_prior_given_precision(t: &AffineTransform, lambda_t: f64, sigma_s: &SigmaS) -> f64 {
    let d = sigma_s.dim() as f64;
    let p = d * (d + 1.0);
    -0.5 * p * LN_2PI + 0.5 * p * lambda_t.ln() + 0.5 * d * sigma_s.ln_det()
        - 0.5 * lambda_t * sigma_s.quadratic(t)
}

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

pub fn ln_inv_gamma(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// `‖H_T H_{T^r} - I‖_F + ‖H_{T^r} H_T - I‖_F`.
pub fn inverse_consistency_penalty(t: &AffineTransform, t_r: &AffineTransform) -> f64 {
    t.inverse_consistency_error(t_r) + t_r.inverse_consistency_error(t)
}

/// Data and current parameters for one subject.
#[derive(Clone, Debug)]
pub struct SubjectBlock {
    pub y: ActivationMap,
    pub t: AffineTransform,
    pub t_r: AffineTransform,
    pub beta: f64,
    pub sigma2: f64,
    /// Values of the template at the forward-transformed sites `T(s_l)`.
    pub xt: Vec<f64>,
    /// `Y(T^r(s_l))`, kept in step with `t_r`.
    pub y_tr: Vec<f64>,
}

impl SubjectBlock {
    pub fn forward_ssd(&self) -> f64 {
        self.y
            .values()
            .iter()
            .zip(&self.xt)
            .map(|(y, x)| (y - self.beta * x).powi(2))
            .sum()
    }

    pub fn backward_ssd(&self, x: &[f64]) -> f64 {
        self.y_tr
            .iter()
            .zip(x)
            .map(|(y, x)| (y - self.beta * x).powi(2))
            .sum()
    }
}

/// The complete set of sampled quantities.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub x: Vec<f64>,
    pub blocks: Vec<SubjectBlock>,
    pub alpha: f64,
    pub rho: f64,
}

/// `Σ_i { ½σ_i⁻²‖Y_i(T_i^r) - β_i X‖² + ½σ_i⁻²‖Y_i - β_i X(T_i)‖² + λ^r (penalties) }`.
pub fn symmetric_loss(x: &[f64], blocks: &[SubjectBlock], lambda_r: f64) -> f64 {
    blocks
        .iter()
        .map(|b| {
            0.5 * (b.backward_ssd(x) + b.forward_ssd()) / b.sigma2
                + lambda_r * inverse_consistency_penalty(&b.t, &b.t_r)
        })
        .sum()
}

/// Fixed lattice structure shared by every evaluation in a run.
#[derive(Clone, Debug)]
pub struct Geometry {
    lattice: Lattice,
    sites: LocationSet,
    sets: Vec<Vec<usize>>,
    library: NeighborLibrary,
    sigma_s: Option<SigmaS>,
    policy: InterpolationPolicy,
}

impl Geometry {
    pub fn new(lattice: &Lattice, m: usize, margin: usize, policy: InterpolationPolicy) -> Result<Self> {
        let sites = lattice.locations();
        Ok(Self {
            sets: spatial::build_ordered_neighbor_sets(&sites, m),
            library: spatial::build_neighbor_library(lattice, margin, m),
            sigma_s: SigmaS::from_locations(&sites).ok(),
            lattice: lattice.clone(),
            sites,
            policy,
        })
    }

    /// Smallest margin (in lattice points) whose library contains every
    /// site moved by any of `transforms`, plus `slack` extra points.
    pub fn margin_covering(lattice: &Lattice, transforms: &[AffineTransform], slack: usize) -> usize {
        let sites = lattice.locations();
        let d = lattice.dim();
        let mut need = 0.0f64;
        let mut out = vec![0.0; d];
        for t in transforms {
            for p in sites.iter() {
                t.apply_into(p, &mut out);
                for k in 0..d {
                    let u = lattice.index_coord(k, out[k]);
                    let over = (-u).max(u - (lattice.dims()[k] - 1) as f64);
                    need = need.max(over);
                }
            }
        }
        need.max(0.0).ceil() as usize + slack
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn sites(&self) -> &LocationSet {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn neighbor_sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn library(&self) -> &NeighborLibrary {
        &self.library
    }

    /// Whether the sites are affinely independent enough to carry the
    /// transform prior (at least `d + 1` sites in general position).
    pub fn has_transform_prior(&self) -> bool {
        self.sigma_s.is_some()
    }

    /// # Panics
    /// If the lattice cannot carry a transform prior; see
    /// [`Geometry::has_transform_prior`].
    pub fn sigma_s(&self) -> &SigmaS {
        self.sigma_s
            .as_ref()
            .expect("lattice has too few sites for a transform prior")
    }

    pub fn policy(&self) -> InterpolationPolicy {
        self.policy
    }

    pub fn transformed_sites(&self, t: &AffineTransform) -> LocationSet {
        let d = self.dim();
        let mut coords = vec![0.0; self.sites.len() * d];
        for (p, out) in self.sites.iter().zip(coords.chunks_mut(d)) {
            t.apply_into(p, out);
        }
        LocationSet::new(d, coords).expect("dimension is consistent")
    }

    pub fn template_conditionals(&self, rho: f64) -> Result<Conditionals> {
        Conditionals::for_template(&self.sites, &self.sets, rho)
    }

    pub fn library_factors(&self, rho: f64) -> Result<LibraryFactors> {
        self.library.factors(rho)
    }

    pub fn subject_conditionals(&self, t: &AffineTransform, factors: &LibraryFactors) -> Result<Conditionals> {
        Conditionals::for_points(&self.transformed_sites(t), &self.library, factors)
    }

    /// `Y(T^r(s_l))` on the template sites.
    pub fn resample(&self, y: &ActivationMap, t_r: &AffineTransform) -> Vec<f64> {
        interp::interpolate(y, &self.transformed_sites(t_r), self.policy)
    }
}

/// The unnormalized Gibbs log posterior, split by term. Vectors are indexed
/// by subject.
#[derive(Clone, Debug, Default)]
pub struct LogPosteriorTerms {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub penalty: Vec<f64>,
    pub kriging: Vec<f64>,
    pub prior_t: Vec<f64>,
    pub prior_tr: Vec<f64>,
    pub prior_beta: Vec<f64>,
    pub prior_sigma2: Vec<f64>,
    pub template: f64,
    pub prior_alpha: f64,
    pub prior_rho: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        let per_subject: f64 = [
            &self.forward,
            &self.backward,
            &self.penalty,
            &self.kriging,
            &self.prior_t,
            &self.prior_tr,
            &self.prior_beta,
            &self.prior_sigma2,
        ]
        .iter()
        .map(|v| v.iter().sum::<f64>())
        .sum();
        per_subject + self.template + self.prior_alpha + self.prior_rho
    }
}

fn gaussian_ssd_term(ssd: f64, n: usize, sigma2: f64) -> f64 {
    -0.5 * (n as f64 * (LN_2PI + sigma2.ln()) + ssd / sigma2)
}

/// Evaluates every term of the log posterior from scratch. `Y(T^r)` is
/// re-interpolated rather than read from the cached `y_tr`.
pub fn log_posterior_terms(state: &ModelState, geom: &Geometry, hyper: &Hyperparams) -> Result<LogPosteriorTerms> {
    let v = geom.n_sites();
    let mut terms = LogPosteriorTerms::default();
    let rho_ok = state.rho > hyper.rho_lower && state.rho < hyper.rho_upper;
    terms.prior_rho = if rho_ok {
        -(hyper.rho_upper - hyper.rho_lower).ln()
    } else {
        f64::NEG_INFINITY
    };
    terms.prior_alpha = ln_inv_gamma(state.alpha, hyper.a0_alpha, hyper.b0_alpha);
    let tc = geom.template_conditionals(state.rho)?;
    terms.template = tc.log_density(&state.x, &state.x, state.alpha);
    let factors = geom.library_factors(state.rho)?;
    for b in &state.blocks {
        let y_tr = geom.resample(&b.y, &b.t_r);
        let back: f64 = y_tr
            .iter()
            .zip(&state.x)
            .map(|(y, x)| (y - b.beta * x).powi(2))
            .sum();
        terms.forward.push(gaussian_ssd_term(b.forward_ssd(), v, b.sigma2));
        terms.backward.push(gaussian_ssd_term(back, v, b.sigma2));
        terms
            .penalty
            .push(-hyper.lambda_r * inverse_consistency_penalty(&b.t, &b.t_r));
        let sc = geom.subject_conditionals(&b.t, &factors)?;
        terms.kriging.push(sc.log_density(&b.xt, &state.x, state.alpha));
        terms
            .prior_t
            .push(transform_log_prior(&b.t, hyper.a_t, hyper.b_t, geom.sigma_s()));
        terms
            .prior_tr
            .push(transform_log_prior(&b.t_r, hyper.a_tr, hyper.b_tr, geom.sigma_s()));
        terms
            .prior_beta
            .push(ln_normal(b.beta, hyper.mu0, b.sigma2 / hyper.lambda0));
        terms.prior_sigma2.push(ln_inv_gamma(b.sigma2, hyper.a0, hyper.a1));
    }
    Ok(terms)
}

pub fn gibbs_log_posterior(state: &ModelState, geom: &Geometry, hyper: &Hyperparams) -> Result<f64> {
    Ok(log_posterior_terms(state, geom, hyper)?.total())
}

/// The `2·N·V` pointwise log pseudo-likelihood values of a state: forward
/// residuals of every subject followed by its backward residuals.
pub fn pointwise_log_lik(x: &[f64], blocks: &[SubjectBlock], out: &mut Vec<f64>) {
    out.clear();
    for b in blocks {
        let c = -0.5 * (LN_2PI + b.sigma2.ln());
        for (y, xt) in b.y.values().iter().zip(&b.xt) {
            out.push(c - 0.5 * (y - b.beta * xt).powi(2) / b.sigma2);
        }
        for (y, xv) in b.y_tr.iter().zip(x) {
            out.push(c - 0.5 * (y - b.beta * xv).powi(2) / b.sigma2);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// Streaming WAIC: per-column log-sum-exp and Welford variance.
#[derive(Clone, Debug)]
pub struct WaicAccumulator {
    n: usize,
    max: Vec<f64>,
    scaled: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WaicAccumulator {
    pub fn new(columns: usize) -> Self {
        Self {
            n: 0,
            max: vec![f64::NEG_INFINITY; columns],
            scaled: vec![0.0; columns],
            mean: vec![0.0; columns],
            m2: vec![0.0; columns],
        }
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, ll: &[f64]) -> Result<()> {
        if ll.len() != self.max.len() {
            return Err(Error::DimensionMismatch {
                expected: self.max.len(),
                got: ll.len(),
            });
        }
        self.n += 1;
        let n = self.n as f64;
        for (j, &x) in ll.iter().enumerate() {
            if x > self.max[j] {
                self.scaled[j] = self.scaled[j] * (self.max[j] - x).exp() + 1.0;
                self.max[j] = x;
            } else {
                self.scaled[j] += (x - self.max[j]).exp();
            }
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x - self.mean[j]);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<WaicResult> {
        if self.n < 2 {
            return Err(Error::DegenerateVariance(format!(
                "WAIC needs at least 2 samples per observation, got {}",
                self.n
            )));
        }
        let ln_n = (self.n as f64).ln();
        let lppd: f64 = self
            .max
            .iter()
            .zip(&self.scaled)
            .map(|(m, s)| m + s.ln() - ln_n)
            .sum();
        let p_waic: f64 = self.m2.iter().map(|m2| m2 / (self.n as f64 - 1.0)).sum();
        Ok(WaicResult {
            waic: -2.0 * (lppd - p_waic),
            lppd,
            p_waic,
        })
    }
}

/// WAIC from a samples-by-observations matrix of log pseudo-likelihoods.
pub fn waic(pointwise: &[Vec<f64>]) -> Result<WaicResult> {
    let cols = pointwise.first().map_or(0, |r| r.len());
    let mut acc = WaicAccumulator::new(cols);
    for row in pointwise {
        acc.push(row)?;
    }
    acc.finish()
}
