//! Deterministic starting values: alternating affine fits of each map to a
//! running template estimate, followed by back-warped averaging.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{self, InterpolationPolicy};
use crate::linalg;
use crate::map::{ActivationMap, Lattice, LocationSet};
use crate::model::{Hyperparams, ModelState, SubjectBlock};
use crate::transforms::{lie_exp, lie_log, standardize, AffineTransform};

pub const INIT_ITERATIONS: usize = 10;
pub const INIT_TOLERANCE: f64 = 1e-4;
const VARIANCE_FLOOR: f64 = 1e-6;

fn transformed(lattice_sites: &LocationSet, t: &AffineTransform) -> LocationSet {
    let d = lattice_sites.dim();
    let mut coords = vec![0.0; lattice_sites.len() * d];
    for (p, out) in lattice_sites.iter().zip(coords.chunks_mut(d)) {
        t.apply_into(p, out);
    }
    LocationSet::new(d, coords).expect("dimension is consistent")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Residual sum of squares of `y` regressed (without intercept) on the
/// template warped by `t`.
#[derive(Clone)]
struct FitCost<'a> {
    y: &'a [f64],
    template: &'a ActivationMap,
    sites: &'a LocationSet,
    policy: InterpolationPolicy,
    dim: usize,
}

impl FitCost<'_> {
    fn eval(&self, t: &AffineTransform) -> f64 {
        let xt = interp::interpolate(self.template, &transformed(self.sites, t), self.policy);
        let xx = dot(&xt, &xt);
        let yy = dot(self.y, self.y);
        if xx <= 0.0 {
            return yy;
        }
        let xy = dot(&xt, self.y);
        yy - xy * xy / xx
    }

    fn eval_params(&self, p: &[f64]) -> f64 {
        let mut h = p.to_vec();
        h.extend((0..self.dim).map(|_| 0.0));
        h.push(1.0);
        match AffineTransform::from_row_major(self.dim, &h) {
            Ok(t) if t.det() > 1e-3 => self.eval(&t),
            _ => f64::MAX,
        }
    }
}

impl CostFunction for FitCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval_params(p))
    }
}

/// Residual sum of squares of `y` after regressing it on `template` warped
/// by `t` (no intercept).
pub fn fit_cost(y: &ActivationMap, template: &ActivationMap, t: &AffineTransform, policy: InterpolationPolicy) -> f64 {
    let sites = y.lattice().locations();
    FitCost {
        y: y.values(),
        template,
        sites: &sites,
        policy,
        dim: y.lattice().dim(),
    }
    .eval(t)
}

/// Candidate transforms about the lattice center: translations within 25%
/// of the extent, isotropic scales {0.8, 1, 1.25} and, in 2D, rotations
/// within ±30°.
pub fn coarse_grid(lattice: &Lattice) -> Vec<AffineTransform> {
    let center = lattice.center();
    let extent = lattice.extent();
    let scales = [0.8, 1.0, 1.25];
    let mut out = Vec::new();
    match lattice.dim() {
        1 => {
            let steps = 10;
            for k in -steps..=steps {
                let shift = 0.25 * extent[0] * k as f64 / steps as f64;
                for &a in &scales {
                    let b = center[0] * (1.0 - a) + shift;
                    out.push(AffineTransform::affine_1d(a, b).expect("positive scale"));
                }
            }
        }
        _ => {
            let steps = 3;
            let angles = [-30.0f64, -15.0, 0.0, 15.0, 30.0];
            for i in -steps..=steps {
                for j in -steps..=steps {
                    let shift = [
                        0.25 * extent[0] * i as f64 / steps as f64,
                        0.25 * extent[1] * j as f64 / steps as f64,
                    ];
                    for &deg in &angles {
                        for &a in &scales {
                            let r = AffineTransform::rotation_about(deg.to_radians(), &center);
                            let s = AffineTransform::scaling(2, a).expect("positive scale");
                            let c = AffineTransform::translation(&center);
                            let ci = AffineTransform::translation(&[-center[0], -center[1]]);
                            let t = AffineTransform::translation(&shift)
                                .compose(&r)
                                .and_then(|m| m.compose(&c))
                                .and_then(|m| m.compose(&s))
                                .and_then(|m| m.compose(&ci))
                                .expect("invertible");
                            out.push(t);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fits one map to the template over the affine group: best coarse-grid
/// candidate (or `start`, whichever is better), refined by Nelder-Mead.
pub fn fit_affine(
    y: &ActivationMap,
    template: &ActivationMap,
    start: &AffineTransform,
    grid: &[AffineTransform],
    policy: InterpolationPolicy,
) -> Result<AffineTransform> {
    let lattice = y.lattice();
    let sites = lattice.locations();
    let d = lattice.dim();
    let cost = FitCost {
        y: y.values(),
        template,
        sites: &sites,
        policy,
        dim: d,
    };
    let mut best = start.clone();
    let mut best_cost = cost.eval(start);
    for t in grid {
        let c = cost.eval(t);
        if c < best_cost {
            best_cost = c;
            best = t.clone();
        }
    }
    let p0: Vec<f64> = best.row_major()[..d * (d + 1)].to_vec();
    let mut simplex = vec![p0.clone()];
    for k in 0..p0.len() {
        let mut v = p0.clone();
        let is_offset = k % (d + 1) == d;
        v[k] += if is_offset { lattice.spacing()[k / (d + 1)] } else { 0.05 };
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12)
        .map_err(|e| Error::Validation(e.to_string()))?;
    let res = Executor::new(cost.clone(), solver)
        .configure(|s| s.max_iters(150 * (d as u64 + 1) * (d as u64 + 1)))
        .run()
        .map_err(|e| Error::DegenerateInput(format!("affine fit failed: {e}")))?;
    let refined = res.state().get_best_param().cloned().unwrap_or(p0);
    let mut h = refined;
    h.extend((0..d).map(|_| 0.0));
    h.push(1.0);
    let t = AffineTransform::from_row_major(d, &h)?;
    Ok(if cost.eval(&t) <= best_cost { t } else { best })
}

fn mean_of(rows: &[Vec<f64>], v: usize) -> Vec<f64> {
    (0..v).map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64).collect()
}

fn regression_slope(y: &[f64], x: &[f64]) -> f64 {
    let xx = dot(x, x);
    if xx > 0.0 {
        dot(x, y) / xx
    } else {
        1.0
    }
}

/// `exp(w log(new ∘ old⁻¹)) ∘ old`, or `new` when the step has no real logarithm.
fn relaxed_step(old: &AffineTransform, new: &AffineTransform, w: f64) -> Result<AffineTransform> {
    match lie_log(&new.compose(&old.inverse()?)?) {
        Ok(step) => lie_exp(&step.scaled(w)).compose(old),
        Err(_) => Ok(new.clone()),
    }
}

/// Result of the alternating initialization, before sampler state is built.
#[derive(Clone, Debug)]
pub struct InitialFit {
    pub template: ActivationMap,
    pub transforms: Vec<AffineTransform>,
    pub betas: Vec<f64>,
    pub iterations: usize,
}

/// Alternating template/transform estimation.
pub fn initial_fit(ys: &[ActivationMap], policy: InterpolationPolicy) -> Result<InitialFit> {
    let first = ys
        .first()
        .ok_or_else(|| Error::DegenerateInput("at least one subject map is required".into()))?;
    let lattice = first.lattice().clone();
    for (i, y) in ys.iter().enumerate() {
        if y.lattice() != &lattice {
            return Err(Error::DegenerateInput(format!("map {i} is on a different lattice")));
        }
        if linalg::variance(y.values()) <= 0.0 {
            return Err(Error::DegenerateInput(format!("map {i} is constant")));
        }
    }
    let n = ys.len();
    let v = lattice.len();
    let sites = lattice.locations();
    let grid = coarse_grid(&lattice);
    let mut backs: Vec<Vec<f64>> = ys.iter().map(|y| y.values().to_vec()).collect();
    let mut x = mean_of(&backs, v);
    let mut transforms = vec![AffineTransform::identity(lattice.dim()); n];
    let mut betas = vec![1.0; n];
    let mut iterations = 0;
    for _ in 0..INIT_ITERATIONS {
        iterations += 1;
        let fits: Vec<(AffineTransform, f64)> = ys
            .par_iter()
            .zip(transforms.par_iter())
            .zip(backs.par_iter())
            .map(|((y, t0), own)| {
                // Each map is fitted to the template of the others so that its
                // own noise does not pull the fit towards its current position.
                let loo: Vec<f64> = if n > 1 {
                    x.iter().zip(own).map(|(m, b)| (n as f64 * m - b) / (n - 1) as f64).collect()
                } else {
                    x.clone()
                };
                let template = ActivationMap::new(lattice.clone(), loo)?;
                let t = fit_affine(y, &template, t0, &grid, policy)?;
                let xt = interp::interpolate(&template, &transformed(&sites, &t), policy);
                Ok((t, regression_slope(y.values(), &xt)))
            })
            .collect::<Result<_>>()?;
        // A fit against the other maps overshoots: the error of subject i
        // becomes minus the mean error of the others, -e_i/(N-1) once the set
        // is centred. Moving a fraction (N-1)/N of the way cancels this.
        let relax = if n > 1 { (n - 1) as f64 / n as f64 } else { 1.0 };
        let raw: Vec<AffineTransform> = fits
            .iter()
            .zip(&transforms)
            .map(|((fitted, _), old)| relaxed_step(old, fitted, relax))
            .collect::<Result<_>>()?;
        transforms = standardize(&raw)?;
        let mean_beta = fits.iter().map(|f| f.1).sum::<f64>() / n as f64;
        if !(mean_beta.abs() > 1e-12) {
            return Err(Error::DegenerateInput("scaling regression is degenerate".into()));
        }
        betas = fits.iter().map(|f| f.1 / mean_beta).collect();
        backs = ys
            .iter()
            .zip(&transforms)
            .zip(&betas)
            .map(|((y, t), b)| {
                let back = interp::interpolate(y, &transformed(&sites, &t.inverse()?), policy);
                Ok(back.into_iter().map(|v| v / b).collect())
            })
            .collect::<Result<_>>()?;
        let x_new = mean_of(&backs, v);
        let change: f64 = x_new.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        x = x_new;
        if change / norm < INIT_TOLERANCE {
            break;
        }
    }
    Ok(InitialFit {
        template: ActivationMap::new(lattice, x)?,
        transforms,
        betas,
        iterations,
    })
}

/// Builds the full starting state from the alternating fit.
pub fn initialize(ys: &[ActivationMap], hyper: &Hyperparams, policy: InterpolationPolicy) -> Result<ModelState> {
    let fit = initial_fit(ys, policy)?;
    state_from_fit(ys, &fit, hyper, policy)
}

pub fn state_from_fit(
    ys: &[ActivationMap],
    fit: &InitialFit,
    hyper: &Hyperparams,
    policy: InterpolationPolicy,
) -> Result<ModelState> {
    let lattice = fit.template.lattice();
    let sites = lattice.locations();
    let x = fit.template.values().to_vec();
    let mut blocks = Vec::with_capacity(ys.len());
    for ((y, t), &beta) in ys.iter().zip(&fit.transforms).zip(&fit.betas) {
        let t_r = t.inverse()?;
        let xt = interp::interpolate(&fit.template, &transformed(&sites, t), policy);
        let y_tr = interp::interpolate(y, &transformed(&sites, &t_r), policy);
        let resid: Vec<f64> = y
            .values()
            .iter()
            .zip(&xt)
            .map(|(y, x)| y - beta * x)
            .chain(y_tr.iter().zip(&x).map(|(y, x)| y - beta * x))
            .collect();
        let sigma2 = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).max(VARIANCE_FLOOR);
        blocks.push(SubjectBlock {
            y: y.clone(),
            t: t.clone(),
            t_r,
            beta,
            sigma2,
            xt,
            y_tr,
        });
    }
    let alpha = linalg::variance(&x).max(VARIANCE_FLOOR);
    Ok(ModelState {
        x,
        blocks,
        alpha,
        rho: 0.5 * (hyper.rho_lower + hyper.rho_upper),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump(lattice: &Lattice, c: f64, scale: f64) -> ActivationMap {
        ActivationMap::from_fn(lattice.clone(), |p| scale * (-(p[0] - c).powi(2)).exp())
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let lat = Lattice::line(81, 0.1, -4.0).unwrap();
        let y = bump(&lat, 0.3, 1.0);
        let fit = initial_fit(&[y.clone(), y.clone(), y.clone()], InterpolationPolicy::default()).unwrap();
        for (t, b) in fit.transforms.iter().zip(&fit.betas) {
            assert!(t.distance(&AffineTransform::identity(1)) < 1e-4);
            assert!((b - 1.0).abs() < 1e-6);
        }
        for (a, b) in fit.template.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn shifted_pair_splits_the_shift() {
        let lat = Lattice::line(81, 0.1, -4.0).unwrap();
        let s0 = 0.8;
        let ys = [bump(&lat, 0.0, 1.0), bump(&lat, s0, 1.0)];
        let fit = initial_fit(&ys, InterpolationPolicy::default()).unwrap();
        let b: Vec<f64> = fit.transforms.iter().map(|t| t.offset()[0]).collect();
        // Y_2(s) = X(s - s0/2) and Y_1(s) = X(s + s0/2) for the midpoint template
        assert!((b[0] - s0 / 2.0).abs() < 0.02, "{b:?}");
        assert!((b[1] + s0 / 2.0).abs() < 0.02, "{b:?}");
    }

    #[test]
    fn beta_regression_identity() {
        let lat = Lattice::line(41, 0.1, -2.0).unwrap();
        let x = bump(&lat, 0.0, 1.0);
        let y = bump(&lat, 0.0, 2.0);
        assert!((regression_slope(y.values(), x.values()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_map_rejected() {
        let lat = Lattice::line(10, 1.0, 0.0).unwrap();
        let y = ActivationMap::new(lat, vec![1.0; 10]).unwrap();
        assert!(matches!(
            initial_fit(&[y], InterpolationPolicy::default()),
            Err(Error::DegenerateInput(_))
        ));
    }
}
