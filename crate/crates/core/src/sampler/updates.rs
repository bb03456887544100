//! Individual Gibbs and Metropolis-Hastings updates.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{
    inverse_consistency_penalty, transform_log_prior, Geometry, Hyperparams, SigmaS, SubjectBlock,
};
use crate::spatial::{Conditionals, LibraryFactors, ReverseIndex};
use crate::transforms::{lie_exp, AffineTransform, LieVector};

use super::adapt::{AdaptRecord, Outcome, ScalarAdapt};
use super::state::Caches;

const RATE_FLOOR: f64 = 1e-12;

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> f64 {
    mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Draws from `Inv-Gamma(shape, rate)`.
pub fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::NonPositiveScale(rate));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|_| Error::NonPositiveScale(shape))?;
    Ok(1.0 / g.sample(rng))
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().ln()
}

/// Mean and variance of one transformed-template site given everything else.
#[inline]
pub fn transformed_site_conditional(y: f64, prior_mean: f64, prior_var: f64, beta: f64, sigma2: f64) -> (f64, f64) {
    let prec = beta * beta / sigma2 + 1.0 / prior_var;
    let var = 1.0 / prec;
    (var * (beta * y / sigma2 + prior_mean / prior_var), var)
}

/// Element-wise Gibbs update of `X(T_i)`.
pub fn update_transformed_template<R: Rng + ?Sized>(
    block: &mut SubjectBlock,
    x: &[f64],
    cond: &Conditionals,
    alpha: f64,
    rng: &mut R,
) {
    let (beta, sigma2) = (block.beta, block.sigma2);
    let y = block.y.values();
    for (l, xt) in block.xt.iter_mut().enumerate() {
        let (m, v) = transformed_site_conditional(y[l], cond.mean(l, x), alpha * cond.fvar(l), beta, sigma2);
        *xt = normal(rng, m, v);
    }
}

/// Mean and variance of template site `l` given everything else.
pub fn template_site_conditional(
    l: usize,
    x: &[f64],
    blocks: &[SubjectBlock],
    template: &Conditionals,
    subjects: &[Conditionals],
    index: &ReverseIndex,
    alpha: f64,
) -> (f64, f64) {
    let f_l = alpha * template.fvar(l);
    let mut prec = 1.0 / f_l;
    let mut mu = template.mean(l, x) / f_l;
    for &(set, t, pos) in index.dependents(l) {
        let (set, t) = (set as usize, t as usize);
        let (cond, value) = if set == 0 {
            (template, x[t])
        } else {
            (&subjects[set - 1], blocks[set - 1].xt[t])
        };
        let b = cond.weights(t)[pos as usize];
        let f = alpha * cond.fvar(t);
        let a = value - cond.mean(t, x) + b * x[l];
        prec += b * b / f;
        mu += b * a / f;
    }
    for blk in blocks {
        prec += blk.beta * blk.beta / blk.sigma2;
        mu += blk.beta * blk.y_tr[l] / blk.sigma2;
    }
    (mu / prec, 1.0 / prec)
}

pub fn reverse_index(template: &Conditionals, subjects: &[Conditionals]) -> ReverseIndex {
    let mut sets: Vec<&Conditionals> = Vec::with_capacity(subjects.len() + 1);
    sets.push(template);
    sets.extend(subjects.iter());
    ReverseIndex::build(template.len(), &sets)
}

/// Sequential site-by-site Gibbs sweep of the template.
pub fn update_template<R: Rng + ?Sized>(
    x: &mut [f64],
    blocks: &[SubjectBlock],
    template: &Conditionals,
    subjects: &[Conditionals],
    alpha: f64,
    rng: &mut R,
) {
    let index = reverse_index(template, subjects);
    for l in 0..x.len() {
        let (m, v) = template_site_conditional(l, x, blocks, template, subjects, &index, alpha);
        x[l] = normal(rng, m, v);
    }
}

/// Joint conditional of `(β, σ²)` for one subject: `σ² ~ Inv-Gamma(shape, rate)`
/// with `β` integrated out, then `β | σ² ~ N(mu_n, lambda_n σ²)`.
#[derive(Clone, Copy, Debug)]
pub struct BetaSigmaConditional {
    pub shape: f64,
    pub rate: f64,
    pub mu_n: f64,
    pub lambda_n: f64,
}

impl BetaSigmaConditional {
    pub fn new(block: &SubjectBlock, x: &[f64], hyper: &Hyperparams) -> Self {
        let y = block.y.values();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let xtx = dot(&block.xt, &block.xt) + dot(x, x);
        let xty = dot(&block.xt, y) + dot(x, &block.y_tr);
        let yy = dot(y, y) + dot(&block.y_tr, &block.y_tr);
        let prec_n = xtx + hyper.lambda0;
        let lambda_n = 1.0 / prec_n;
        let mu_n = lambda_n * (hyper.mu0 * hyper.lambda0 + xty);
        let rate = hyper.a1 + 0.5 * (yy + hyper.mu0 * hyper.mu0 * hyper.lambda0 - mu_n * mu_n * prec_n);
        Self {
            shape: hyper.a0 + y.len() as f64,
            rate: rate.max(RATE_FLOOR),
            mu_n,
            lambda_n,
        }
    }

    /// Log density of the joint block at `(beta, sigma2)`.
    pub fn ln_density(&self, beta: f64, sigma2: f64) -> f64 {
        crate::model::ln_inv_gamma(sigma2, self.shape, self.rate)
            + crate::model::ln_normal(beta, self.mu_n, self.lambda_n * sigma2)
    }
}

/// Shape and rate of the inverse-gamma conditional of `σ²` at fixed `β`.
pub fn sigma2_conditional(block: &SubjectBlock, x: &[f64], hyper: &Hyperparams) -> (f64, f64) {
    let v = block.y.values().len() as f64;
    let ssd = block.forward_ssd() + block.backward_ssd(x) + hyper.lambda0 * (block.beta - hyper.mu0).powi(2);
    (hyper.a0 + v + 0.5, hyper.a1 + 0.5 * ssd)
}

pub fn update_beta_sigma<R: Rng + ?Sized>(
    block: &mut SubjectBlock,
    x: &[f64],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let c = BetaSigmaConditional::new(block, x, hyper);
    block.sigma2 = inv_gamma(rng, c.shape, c.rate)?;
    block.beta = normal(rng, c.mu_n, c.lambda_n * block.sigma2);
    Ok(())
}

/// Shape and rate of the inverse-gamma conditional of `alpha`.
pub fn alpha_conditional(
    x: &[f64],
    blocks: &[SubjectBlock],
    template: &Conditionals,
    subjects: &[Conditionals],
    hyper: &Hyperparams,
) -> (f64, f64) {
    let v = x.len() as f64;
    let n = blocks.len() as f64;
    let mut r = template.scaled_sq_residuals(x, x);
    for (b, c) in blocks.iter().zip(subjects) {
        r += c.scaled_sq_residuals(&b.xt, x);
    }
    (hyper.a0_alpha + 0.5 * v * (n + 1.0), hyper.b0_alpha + 0.5 * r)
}

pub fn update_alpha<R: Rng + ?Sized>(
    x: &[f64],
    blocks: &[SubjectBlock],
    caches: &Caches,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = alpha_conditional(x, blocks, &caches.template, &caches.subjects, hyper);
    inv_gamma(rng, shape, rate)
}

/// NNGP log densities of the template and all transformed templates.
pub fn spatial_log_density(
    x: &[f64],
    blocks: &[SubjectBlock],
    template: &Conditionals,
    subjects: &[Conditionals],
    alpha: f64,
) -> f64 {
    template.log_density(x, x, alpha)
        + blocks
            .iter()
            .zip(subjects)
            .map(|(b, c)| c.log_density(&b.xt, x, alpha))
            .sum::<f64>()
}

/// Random-walk Metropolis step on the spatial decay. Returns whether the
/// proposal was accepted; on acceptance `caches` is rebuilt for the new value.
#[allow(clippy::too_many_arguments)]
pub fn update_rho<R: Rng + ?Sized>(
    rho: &mut f64,
    x: &[f64],
    blocks: &[SubjectBlock],
    alpha: f64,
    caches: &mut Caches,
    geom: &Geometry,
    hyper: &Hyperparams,
    adapt: &mut ScalarAdapt,
    adapting: bool,
    rng: &mut R,
) -> Result<bool> {
    let proposal = *rho + adapt.step() * rng.sample::<f64, _>(StandardNormal);
    let mut accepted = false;
    if proposal > hyper.rho_lower && proposal < hyper.rho_upper {
        let current = spatial_log_density(x, blocks, &caches.template, &caches.subjects, alpha);
        let template = geom.template_conditionals(proposal)?;
        let factors = geom.library_factors(proposal)?;
        let subjects = blocks
            .iter()
            .map(|b| geom.subject_conditionals(&b.t, &factors))
            .collect::<Result<Vec<_>>>()?;
        let candidate = spatial_log_density(x, blocks, &template, &subjects, alpha);
        if log_uniform(rng) < candidate - current {
            *rho = proposal;
            *caches = Caches {
                template,
                factors,
                subjects,
            };
            accepted = true;
        }
    }
    adapt.record(accepted);
    if adapting {
        adapt.adapt(accepted);
    }
    Ok(accepted)
}

/// Log acceptance ratio of the intensity-scale move
/// `(X, X(T_i), β_i, α) -> (X/c, X(T_i)/c, c β_i, α/c²)`.
///
/// The symmetric loss is invariant under the move and every NNGP density
/// gains `ln c` per site, which cancels against the Jacobian except for
/// `(N - 2) ln c`; what remains are the changes of the β and α priors.
pub fn scale_log_ratio(log_c: f64, betas_sigma2: &[(f64, f64)], alpha: f64, hyper: &Hyperparams) -> f64 {
    let c = log_c.exp();
    let n = betas_sigma2.len() as f64;
    let beta_prior: f64 = betas_sigma2
        .iter()
        .map(|&(b, s2)| {
            let var = s2 / hyper.lambda0;
            crate::model::ln_normal(c * b, hyper.mu0, var) - crate::model::ln_normal(b, hyper.mu0, var)
        })
        .sum();
    let alpha_prior = crate::model::ln_inv_gamma(alpha / (c * c), hyper.a0_alpha, hyper.b0_alpha)
        - crate::model::ln_inv_gamma(alpha, hyper.a0_alpha, hyper.b0_alpha);
    (n - 2.0) * log_c + beta_prior + alpha_prior
}

/// Applies `(X, X(T_i), β_i, α) -> (X/c, X(T_i)/c, c β_i, α/c²)`.
pub fn apply_scale(c: f64, x: &mut [f64], blocks: &mut [SubjectBlock], alpha: &mut f64) {
    for v in x.iter_mut() {
        *v /= c;
    }
    for b in blocks.iter_mut() {
        b.beta *= c;
        for v in b.xt.iter_mut() {
            *v /= c;
        }
    }
    *alpha /= c * c;
}

/// Metropolis move along the direction in which the template intensity and
/// the scaling corrections trade off. Single-site Gibbs updates cross this
/// ridge very slowly.
pub fn update_scale<R: Rng + ?Sized>(
    x: &mut [f64],
    blocks: &mut [SubjectBlock],
    alpha: &mut f64,
    hyper: &Hyperparams,
    adapt: &mut ScalarAdapt,
    adapting: bool,
    rng: &mut R,
) -> bool {
    let log_c = adapt.step() * rng.sample::<f64, _>(StandardNormal);
    let bs: Vec<(f64, f64)> = blocks.iter().map(|b| (b.beta, b.sigma2)).collect();
    let ratio = scale_log_ratio(log_c, &bs, *alpha, hyper);
    let accepted = ratio.is_finite() && log_uniform(rng) < ratio;
    if accepted {
        apply_scale(log_c.exp(), x, blocks, alpha);
    }
    adapt.record(accepted);
    if adapting {
        adapt.adapt(accepted);
    }
    accepted
}

/// `log q(x | y) - log q(y | x)` for the proposal `y = exp(δ) x` on the
/// affine group, with densities taken with respect to Lebesgue measure on
/// the matrix entries. The reverse move is `-δ`, and the ratio reduces to
/// `exp((d + 1) tr L_δ)` where `L_δ` is the linear block of `δ`.
pub fn log_proposal_correction(delta: &LieVector) -> f64 {
    (delta.dim() + 1) as f64 * delta.linear_trace()
}

/// Terms of the log posterior that involve the forward transform.
pub fn forward_log_target(
    t: &AffineTransform,
    t_r: &AffineTransform,
    xt: &[f64],
    x: &[f64],
    cond: &Conditionals,
    alpha: f64,
    hyper: &Hyperparams,
    sigma_s: &SigmaS,
) -> f64 {
    transform_log_prior(t, hyper.a_t, hyper.b_t, sigma_s) + cond.log_density(xt, x, alpha)
        - hyper.lambda_r * inverse_consistency_penalty(t, t_r)
}

/// Terms of the log posterior that involve the reverse transform.
pub fn reverse_log_target(
    t: &AffineTransform,
    t_r: &AffineTransform,
    y_tr: &[f64],
    x: &[f64],
    beta: f64,
    sigma2: f64,
    hyper: &Hyperparams,
    sigma_s: &SigmaS,
) -> f64 {
    let ssd: f64 = y_tr.iter().zip(x).map(|(y, x)| (y - beta * x).powi(2)).sum();
    transform_log_prior(t_r, hyper.a_tr, hyper.b_tr, sigma_s) - 0.5 * ssd / sigma2
        - hyper.lambda_r * inverse_consistency_penalty(t, t_r)
}

fn lie_proposal<R: Rng + ?Sized>(record: &AdaptRecord, dim: usize, rng: &mut R) -> LieVector {
    LieVector::new(dim, record.propose(rng)).expect("proposal dimension matches")
}

/// Metropolis-Hastings step for `T_i` with proposal `exp(δ) T_i`.
#[allow(clippy::too_many_arguments)]
pub fn update_forward_transform<R: Rng + ?Sized>(
    block: &mut SubjectBlock,
    cond: &mut Conditionals,
    x: &[f64],
    alpha: f64,
    factors: &LibraryFactors,
    geom: &Geometry,
    hyper: &Hyperparams,
    record: &mut AdaptRecord,
    adapting: bool,
    rng: &mut R,
) -> Outcome {
    let delta = lie_proposal(record, geom.dim(), rng);
    let outcome = match lie_exp(&delta).compose(&block.t) {
        Err(_) => Outcome::Invalid,
        Ok(t_new) => match geom.subject_conditionals(&t_new, factors) {
            Err(Error::OutOfLibraryBounds(_)) => Outcome::OutOfBounds,
            Err(_) => Outcome::Invalid,
            Ok(c_new) => {
                let s = geom.sigma_s();
                let cur = forward_log_target(&block.t, &block.t_r, &block.xt, x, cond, alpha, hyper, s);
                let new = forward_log_target(&t_new, &block.t_r, &block.xt, x, &c_new, alpha, hyper, s);
                let log_ratio = new - cur + log_proposal_correction(&delta);
                if log_ratio.is_finite() && log_uniform(rng) < log_ratio {
                    block.t = t_new;
                    *cond = c_new;
                    Outcome::Accepted
                } else {
                    Outcome::Rejected
                }
            }
        },
    };
    record.record(outcome);
    if adapting {
        record.adapt(outcome.accepted(), delta.as_slice());
    }
    outcome
}

/// Metropolis-Hastings step for `T_i^r` with proposal `exp(δ) T_i^r`.
pub fn update_reverse_transform<R: Rng + ?Sized>(
    block: &mut SubjectBlock,
    x: &[f64],
    geom: &Geometry,
    hyper: &Hyperparams,
    record: &mut AdaptRecord,
    adapting: bool,
    rng: &mut R,
) -> Outcome {
    let delta = lie_proposal(record, geom.dim(), rng);
    let outcome = match lie_exp(&delta).compose(&block.t_r) {
        Err(_) => Outcome::Invalid,
        Ok(tr_new) => {
            let y_new = geom.resample(&block.y, &tr_new);
            let s = geom.sigma_s();
            let (b, s2) = (block.beta, block.sigma2);
            let cur = reverse_log_target(&block.t, &block.t_r, &block.y_tr, x, b, s2, hyper, s);
            let new = reverse_log_target(&block.t, &tr_new, &y_new, x, b, s2, hyper, s);
            let log_ratio = new - cur + log_proposal_correction(&delta);
            if log_ratio.is_finite() && log_uniform(rng) < log_ratio {
                block.t_r = tr_new;
                block.y_tr = y_new;
                Outcome::Accepted
            } else {
                Outcome::Rejected
            }
        }
    };
    record.record(outcome);
    if adapting {
        record.adapt(outcome.accepted(), delta.as_slice());
    }
    outcome
}
