//! Numerical audits: closed-form conditionals against the joint density,
//! detailed balance of the transform moves, and NNGP against dense
//! Gaussian-process computations.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baseline::{BaselineConfig, BaselineModel, BaselineState};
use crate::error::Result;
use crate::interp::InterpolationPolicy;
use crate::map::{ActivationMap, Lattice};
use crate::model::{gibbs_log_posterior, ln_inv_gamma, ln_normal, Geometry, Hyperparams, ModelState, SubjectBlock};
use crate::sampler::adapt::AdaptRecord;
use crate::sampler::rng::{stream, Phase};
use crate::sampler::state::Caches;
use crate::sampler::updates::{
    alpha_conditional, apply_scale, forward_log_target, log_proposal_correction, reverse_index, reverse_log_target,
    scale_log_ratio, sigma2_conditional, template_site_conditional, transformed_site_conditional, BetaSigmaConditional,
};
use crate::spatial::{dense_kriging, dense_log_density, CovarianceParams};
use crate::transforms::{lie_exp, log_proposal_jacobian, standardize, AffineTransform, LieVector};

pub const CONJUGACY_TOL: f64 = 1e-8;
pub const BALANCE_TOL: f64 = 1e-10;
pub const DENSE_TOL: f64 = 1e-8;
pub const KRIGING_TOL: f64 = 1e-3;
pub const BALANCE_PAIRS: usize = 100;

/// One audited quantity: the largest error seen and its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, errors: impl IntoIterator<Item = f64>, tolerance: f64) -> Self {
        let max_error = errors
            .into_iter()
            .fold(0.0, |m: f64, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) });
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn rel(expected: f64, got: f64) -> f64 {
    (expected - got).abs() / (1.0 + expected.abs())
}

/// V = 4, N = 2 instance on a 2 x 2 grid with small, distinct transforms.
pub fn toy_instance() -> Result<(ModelState, Geometry, Hyperparams)> {
    let lat = Lattice::grid(2, 2)?;
    let hyper = Hyperparams {
        m: 3,
        ..Hyperparams::default()
    };
    let geom = Geometry::new(&lat, hyper.m, 4, InterpolationPolicy::default())?;
    let ts = standardize(&[
        AffineTransform::translation(&[0.1, -0.05]),
        AffineTransform::rotation_about(0.05, &[0.5, 0.5]),
    ])?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut blocks = Vec::new();
    for (i, t) in ts.into_iter().enumerate() {
        let y = ActivationMap::new(lat.clone(), (0..4).map(|_| rng.random::<f64>() * 2.0).collect())?;
        let t_r = t.inverse()?.compose(&AffineTransform::translation(&[0.02, 0.01]))?;
        let y_tr = geom.resample(&y, &t_r);
        blocks.push(SubjectBlock {
            y,
            t,
            t_r,
            beta: 0.9 + 0.1 * i as f64,
            sigma2: 0.3 + 0.2 * i as f64,
            xt: (0..4).map(|_| rng.random::<f64>()).collect(),
            y_tr,
        });
    }
    let model = ModelState {
        x: vec![0.4, 1.1, 0.8, 1.6],
        blocks,
        alpha: 0.7,
        rho: 1.2,
    };
    Ok((model, geom, hyper))
}

/// Log-ratio of the joint density after `change` is applied to `m`.
fn joint_ratio(m: &ModelState, g: &Geometry, h: &Hyperparams, change: impl FnOnce(&mut ModelState)) -> Result<f64> {
    let p0 = gibbs_log_posterior(m, g, h)?;
    let mut moved = m.clone();
    change(&mut moved);
    Ok(gibbs_log_posterior(&moved, g, h)? - p0)
}

/// Closed-form conditional log-ratios of every Gibbs block against the
/// joint Gibbs posterior, at several target values per block.
pub fn conjugacy_checks() -> Result<Vec<Check>> {
    let (m, g, h) = toy_instance()?;
    let c = Caches::build(&m, &g)?;
    let n = m.blocks.len();
    let shifts = [0.37, -0.8, 1.5];

    let mut xt_err = Vec::new();
    for i in 0..n {
        for l in 0..g.n_sites() {
            let b = &m.blocks[i];
            let (mu, var) = transformed_site_conditional(
                b.y.values()[l],
                c.subjects[i].mean(l, &m.x),
                m.alpha * c.subjects[i].fvar(l),
                b.beta,
                b.sigma2,
            );
            for s in shifts {
                let (v0, v1) = (b.xt[l], mu + s);
                let got = joint_ratio(&m, &g, &h, |w| w.blocks[i].xt[l] = v1)?;
                xt_err.push(rel(ln_normal(v1, mu, var) - ln_normal(v0, mu, var), got));
            }
        }
    }

    let index = reverse_index(&c.template, &c.subjects);
    let mut x_err = Vec::new();
    for l in 0..g.n_sites() {
        let (mu, var) = template_site_conditional(l, &m.x, &m.blocks, &c.template, &c.subjects, &index, m.alpha);
        for s in shifts {
            let (v0, v1) = (m.x[l], mu + s);
            let got = joint_ratio(&m, &g, &h, |w| w.x[l] = v1)?;
            x_err.push(rel(ln_normal(v1, mu, var) - ln_normal(v0, mu, var), got));
        }
    }

    let mut beta_err = Vec::new();
    let mut sigma_err = Vec::new();
    for i in 0..n {
        let b = &m.blocks[i];
        let bc = BetaSigmaConditional::new(b, &m.x, &h);
        let (b0, s0) = (b.beta, b.sigma2);
        // β | σ² is N(mu_n, lambda_n σ²)
        for s in shifts {
            let b1 = bc.mu_n + 0.3 * s;
            let got = joint_ratio(&m, &g, &h, |w| w.blocks[i].beta = b1)?;
            let var = bc.lambda_n * s0;
            beta_err.push(rel(ln_normal(b1, bc.mu_n, var) - ln_normal(b0, bc.mu_n, var), got));
        }
        let (shape, rate) = sigma2_conditional(b, &m.x, &h);
        for f in [0.5, 1.7, 3.0] {
            let s1 = f * s0;
            let got = joint_ratio(&m, &g, &h, |w| w.blocks[i].sigma2 = s1)?;
            sigma_err.push(rel(ln_inv_gamma(s1, shape, rate) - ln_inv_gamma(s0, shape, rate), got));
        }
        // the collapsed joint draw of (β, σ²)
        for (db, f) in [(0.1, 0.8), (-0.2, 1.9)] {
            let (b1, s1) = (bc.mu_n + db, f * s0);
            let got = joint_ratio(&m, &g, &h, |w| {
                w.blocks[i].beta = b1;
                w.blocks[i].sigma2 = s1;
            })?;
            sigma_err.push(rel(bc.ln_density(b1, s1) - bc.ln_density(b0, s0), got));
        }
    }

    let (shape, rate) = alpha_conditional(&m.x, &m.blocks, &c.template, &c.subjects, &h);
    let mut alpha_err = Vec::new();
    for a1 in [0.2, 1.9, 5.0] {
        let got = joint_ratio(&m, &g, &h, |w| w.alpha = a1)?;
        alpha_err.push(rel(ln_inv_gamma(a1, shape, rate) - ln_inv_gamma(m.alpha, shape, rate), got));
    }

    let v = g.n_sites() as f64;
    let bs: Vec<(f64, f64)> = m.blocks.iter().map(|b| (b.beta, b.sigma2)).collect();
    let mut scale_err = Vec::new();
    for log_c in [-0.7f64, -0.1, 0.25, 1.3] {
        let got = joint_ratio(&m, &g, &h, |w| apply_scale(log_c.exp(), &mut w.x, &mut w.blocks, &mut w.alpha))?;
        // X and X(T_i) scale by 1/c, β_i by c, α by 1/c²
        let ln_jac = (-(v * (n as f64 + 1.0)) + n as f64 - 2.0) * log_c;
        scale_err.push(rel(scale_log_ratio(log_c, &bs, m.alpha, &h), got + ln_jac));
    }

    Ok(vec![
        Check::new("transformed-template conditional", xt_err, CONJUGACY_TOL),
        Check::new("template conditional", x_err, CONJUGACY_TOL),
        Check::new("scaling-correction conditional", beta_err, CONJUGACY_TOL),
        Check::new("noise-variance conditional", sigma_err, CONJUGACY_TOL),
        Check::new("spatial-variance conditional", alpha_err, CONJUGACY_TOL),
        Check::new("intensity-scale move ratio", scale_err, CONJUGACY_TOL),
    ])
}

/// Conditionals of the conventional model against its own joint density.
pub fn baseline_checks() -> Result<Vec<Check>> {
    let lat = Lattice::line(12, 0.5, -3.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ys: Vec<ActivationMap> = (0..2)
        .map(|_| ActivationMap::from_fn(lat.clone(), |s| (-s[0] * s[0]).exp() + 0.1 * rng.random::<f64>()))
        .collect();
    let cfg = BaselineConfig {
        landmark_stride: 2,
        tau: 0.8,
        policy: InterpolationPolicy::default(),
    };
    let model = BaselineModel::new(&ys, &cfg)?;
    let h = Hyperparams::default();
    let w0: Vec<f64> = (0..model.n_landmarks()).map(|k| 0.1 * k as f64).collect();
    let ts = vec![AffineTransform::affine_1d(1.05, 0.1)?, AffineTransform::affine_1d(0.97, -0.2)?];
    let s = BaselineState::new(&model, w0.clone(), ts, vec![0.4, 0.7])?;
    let p0 = model.log_joint(&s, &h);

    let (q, b) = model.weight_conditional(&s);
    let mean = q.clone().cholesky().ok_or(crate::Error::IllConditioned)?.solve(&b);
    let lq = |w: &[f64]| {
        let d = DVector::from_column_slice(w) - &mean;
        -0.5 * (&q * &d).dot(&d)
    };
    let mut w_err = Vec::new();
    for scale in [0.05, -0.2, 0.6] {
        let w1: Vec<f64> = w0.iter().enumerate().map(|(k, v)| v + scale * (k as f64 - 2.0)).collect();
        let mut moved = s.clone();
        moved.w = w1.clone();
        w_err.push(rel(lq(&w1) - lq(&w0), model.log_joint(&moved, &h) - p0));
    }
    let mut s_err = Vec::new();
    for i in 0..2 {
        let (shape, rate) = model.sigma_conditional(&s, i, &h);
        for v1 in [0.05, 1.3] {
            let mut moved = s.clone();
            moved.sigma2[i] = v1;
            let got = model.log_joint(&moved, &h) - p0;
            s_err.push(rel(ln_inv_gamma(v1, shape, rate) - ln_inv_gamma(s.sigma2[i], shape, rate), got));
        }
    }
    Ok(vec![
        Check::new("kernel-weight conditional (conventional)", w_err, CONJUGACY_TOL),
        Check::new("noise-variance conditional (conventional)", s_err, CONJUGACY_TOL),
    ])
}

fn ln_gauss(delta: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let p = delta.len();
    let chol = cov.clone().cholesky().ok_or(crate::Error::IllConditioned)?;
    let v = DVector::from_column_slice(delta);
    let sol = chol.solve(&v);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + v.dot(&sol)))
}

/// Lebesgue density, on the affine matrix entries, of moving from `x` to
/// `exp(δ) x` when `δ ~ N(0, cov)`.
pub fn ln_transition_density(delta: &LieVector, x: &AffineTransform, cov: &DMatrix<f64>) -> Result<f64> {
    let d = delta.dim() as f64;
    Ok(ln_gauss(delta.as_slice(), cov)? + log_proposal_jacobian(delta)
        - (d + 1.0) * delta.linear_trace()
        - d * x.det().abs().ln())
}

/// `|log π(x) q(y|x) a(x→y) - log π(y) q(x|y) a(y→x)|` for the move
/// `y = exp(δ) x` with the sampler's acceptance rule.
pub fn balance_gap(
    log_target: impl Fn(&AffineTransform) -> f64,
    x: &AffineTransform,
    delta: &LieVector,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let y = lie_exp(delta).compose(x)?;
    let back = delta.scaled(-1.0);
    let (px, py) = (log_target(x), log_target(&y));
    let acc_xy = (py - px + log_proposal_correction(delta)).min(0.0);
    let acc_yx = (px - py + log_proposal_correction(&back)).min(0.0);
    let lhs = acc_xy + px + ln_transition_density(delta, x, cov)?;
    let rhs = acc_yx + py + ln_transition_density(&back, &y, cov)?;
    Ok((lhs - rhs).abs() / (1.0 + lhs.abs()))
}

fn random_lie(dim: usize, sd: f64, rng: &mut impl Rng) -> Result<LieVector> {
    LieVector::new(dim, (0..dim * (dim + 1)).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Detailed balance of the forward and reverse transform moves over
/// `pairs` random (state, proposal) pairs each.
pub fn detailed_balance_checks(pairs: usize, seed: u64) -> Result<Vec<Check>> {
    let (m, g, h) = toy_instance()?;
    let c = Caches::build(&m, &g)?;
    let d = g.dim();
    let mut rec = AdaptRecord::for_affine(d, g.lattice().spacing());
    let mut fwd = Vec::with_capacity(pairs);
    let mut rev = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let mut rng = stream(seed, k as u64, 0, Phase::Audit);
        rec.set_scale((rng.random::<f64>() * 4.0 - 2.0).exp());
        let cov = rec.proposal_cov();
        let i = k % m.blocks.len();
        let b = &m.blocks[i];

        let x = lie_exp(&random_lie(d, 0.05, &mut rng)?).compose(&b.t)?;
        let delta = LieVector::new(d, rec.propose(&mut rng))?;
        let target = |t: &AffineTransform| match g.subject_conditionals(t, &c.factors) {
            Ok(cond) => forward_log_target(t, &b.t_r, &b.xt, &m.x, &cond, m.alpha, &h, g.sigma_s()),
            Err(_) => f64::NEG_INFINITY,
        };
        fwd.push(balance_gap(target, &x, &delta, &cov)?);

        let xr = lie_exp(&random_lie(d, 0.05, &mut rng)?).compose(&b.t_r)?;
        let delta = LieVector::new(d, rec.propose(&mut rng))?;
        let target = |tr: &AffineTransform| {
            let y_tr = g.resample(&b.y, tr);
            reverse_log_target(&b.t, tr, &y_tr, &m.x, b.beta, b.sigma2, &h, g.sigma_s())
        };
        rev.push(balance_gap(target, &xr, &delta, &cov)?);
    }
    Ok(vec![
        Check::new("forward-transform detailed balance", fwd, BALANCE_TOL),
        Check::new("reverse-transform detailed balance", rev, BALANCE_TOL),
    ])
}

/// NNGP joint densities with full neighborhoods against the dense GP, and
/// transformed-site conditional moments with `m = 10` against dense kriging
/// on the same conditioning sets.
pub fn nngp_dense_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = InterpolationPolicy::default();
    let mut joint = Vec::new();
    let lattices = [Lattice::line(40, 0.3, -2.0)?, Lattice::grid(8, 8)?, Lattice::new(vec![5, 7], vec![0.5, 1.5], vec![1.0, -3.0])?];
    for lat in &lattices {
        let v = lat.len();
        let g = Geometry::new(lat, v - 1, 2, policy)?;
        for (alpha, rho) in [(1.0, 0.8), (2.5, 0.3)] {
            let x: Vec<f64> = (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nngp = g.template_conditionals(rho)?.log_density(&x, &x, alpha);
            let dense = dense_log_density(&x, g.sites(), CovarianceParams::new(alpha, rho)?)?;
            joint.push((nngp - dense).abs() / (1.0 + dense.abs()));
        }
    }

    let lat = Lattice::grid(12, 12)?;
    let g = Geometry::new(&lat, 10, 6, policy)?;
    let mut mean_err = Vec::new();
    let mut var_err = Vec::new();
    for (alpha, rho) in [(1.0, 0.5), (0.7, 1.5)] {
        let params = CovarianceParams::new(alpha, rho)?;
        let factors = g.library_factors(rho)?;
        let x: Vec<f64> = (0..lat.len()).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..3 {
            let t = lie_exp(&random_lie(2, 0.1, &mut rng)?).compose(&AffineTransform::rotation_about(
                rng.random::<f64>() - 0.5,
                &lat.center(),
            ))?;
            let cond = g.subject_conditionals(&t, &factors)?;
            let pts = g.transformed_sites(&t);
            for l in 0..lat.len() {
                let nb: Vec<usize> = cond.neighbors(l).iter().map(|&j| j as usize).collect();
                let (p, s) = dense_kriging(&g.sites().select(&nb), &pts.select(&[l]), params)?;
                let dense_mean: f64 = nb.iter().enumerate().map(|(k, &j)| p[(0, k)] * x[j]).sum();
                let got = cond.mean(l, &x);
                mean_err.push((got - dense_mean).abs() / dense_mean.abs().max(1e-8));
                let var = alpha * cond.fvar(l);
                var_err.push((var - s[(0, 0)]).abs() / s[(0, 0)].abs().max(1e-12 * alpha));
            }
        }
    }
    Ok(vec![
        Check::new("full-neighborhood NNGP vs dense log density", joint, DENSE_TOL),
        Check::new("transformed-site kriging mean vs dense (m = 10)", mean_err, KRIGING_TOL),
        Check::new("transformed-site kriging variance vs dense (m = 10)", var_err, KRIGING_TOL),
    ])
}

/// Every audit.
pub fn run_audit(seed: u64) -> Result<AuditReport> {
    let mut checks = conjugacy_checks()?;
    checks.extend(baseline_checks()?);
    checks.extend(detailed_balance_checks(BALANCE_PAIRS, seed)?);
    checks.extend(nngp_dense_checks(seed)?);
    Ok(AuditReport { checks })
}
