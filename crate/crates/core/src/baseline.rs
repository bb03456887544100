//! Conventional one-directional model: the template is a Gaussian-kernel
//! expansion over landmarks, `X(s) = Σ_p K(s, s̃_p) w_p`, each map is
//! `Y_i(s) = X(T_i(s)) + σ_i ε`, and there are no reverse transforms,
//! scaling corrections or inverse-consistency penalty.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interp::InterpolationPolicy;
use crate::map::{pearson, ActivationMap, Lattice, LocationSet};
use crate::model::{ln_inv_gamma, transform_log_prior, Hyperparams, SigmaS};
use crate::sampler::adapt::{AdaptRecord, Outcome};
use crate::sampler::rng::{stream, Phase};
use crate::sampler::summary::FieldSummary;
use crate::sampler::updates::{inv_gamma, log_proposal_correction};
use crate::sampler::{init, ChainConfig, MoveStats};
use crate::synth::{warp, Scenario};
use crate::transforms::{karcher_mean, lie_exp, AffineTransform, LieVector, KARCHER_MAX_ITER, KARCHER_TOL};

/// Kernel values below this are treated as zero when building designs.
pub const KERNEL_CUTOFF: f64 = 1e-12;
/// Diagonal jitter of the landmark Gram matrix.
pub const GRAM_JITTER: f64 = 1e-8;

const RATE_FLOOR: f64 = 1e-12;

/// `exp(-|s - t|² / τ²)`.
pub fn gaussian_kernel(s: &[f64], t: &[f64], tau: f64) -> f64 {
    let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (tau * tau)).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelTemplate {
    landmarks: LocationSet,
    weights: Vec<f64>,
    tau: f64,
}

impl KernelTemplate {
    pub fn new(landmarks: LocationSet, weights: Vec<f64>, tau: f64) -> Result<Self> {
        if landmarks.is_empty() {
            return Err(Error::Validation("kernel template needs at least one landmark".into()));
        }
        if weights.len() != landmarks.len() {
            return Err(Error::DimensionMismatch {
                expected: landmarks.len(),
                got: weights.len(),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Validation(format!("kernel width must be positive (got {tau})")));
        }
        Ok(Self { landmarks, weights, tau })
    }

    pub fn landmarks(&self) -> &LocationSet {
        &self.landmarks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Landmark Gram matrix `K`, jittered on the diagonal.
    pub fn gram(&self) -> DMatrix<f64> {
        gram(&self.landmarks, self.tau)
    }
}

/// `Σ_p K(s, s̃_p) w_p` at each point.
pub fn kernel_template_eval(template: &KernelTemplate, points: &LocationSet) -> Vec<f64> {
    points
        .iter()
        .map(|s| {
            template
                .landmarks
                .iter()
                .zip(&template.weights)
                .map(|(l, w)| gaussian_kernel(s, l, template.tau) * w)
                .sum()
        })
        .collect()
}

fn gram(landmarks: &LocationSet, tau: f64) -> DMatrix<f64> {
    let p = landmarks.len();
    let mut k = DMatrix::from_fn(p, p, |i, j| gaussian_kernel(landmarks.point(i), landmarks.point(j), tau));
    for i in 0..p {
        k[(i, i)] += GRAM_JITTER;
    }
    k
}

/// Every `stride`-th point of `lattice` along each axis, starting at the origin.
pub fn landmark_lattice(lattice: &Lattice, stride: usize) -> Result<Lattice> {
    if stride == 0 {
        return Err(Error::Validation("landmark stride must be positive".into()));
    }
    Lattice::new(
        lattice.dims().iter().map(|&n| (n - 1) / stride + 1).collect(),
        lattice.spacing().iter().map(|h| h * stride as f64).collect(),
        lattice.origin().to_vec(),
    )
}

/// Kernel design rows `Φ[v, p] = K(s_v, s̃_p)` over landmarks on a lattice,
/// with entries below [`KERNEL_CUTOFF`] dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Design {
    pub fn build(landmarks: &Lattice, tau: f64, points: &LocationSet) -> Self {
        let radius = tau * (-KERNEL_CUTOFF.ln()).sqrt();
        let d = landmarks.dim();
        let mut out = Design {
            offsets: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        };
        let range = |k: usize, x: f64| -> Option<(usize, usize)> {
            let n = landmarks.dims()[k] as f64;
            let lo = landmarks.index_coord(k, x - radius).ceil().max(0.0);
            let hi = landmarks.index_coord(k, x + radius).floor().min(n - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let mut q = vec![0.0; d];
        for p in points.iter() {
            let r0 = range(0, p[0]);
            let r1 = if d == 2 { range(1, p[1]) } else { Some((0, 0)) };
            if let (Some((a0, b0)), Some((a1, b1))) = (r0, r1) {
                for i in a0..=b0 {
                    for j in a1..=b1 {
                        let idx = landmarks.ravel([i, j]);
                        landmarks.point_into(idx, &mut q);
                        let k = gaussian_kernel(p, &q, tau);
                        if k >= KERNEL_CUTOFF {
                            out.cols.push(idx as u32);
                            out.vals.push(k);
                        }
                    }
                }
            }
            out.offsets.push(out.cols.len());
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, v: usize) -> (&[u32], &[f64]) {
        let r = self.offsets[v]..self.offsets[v + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `Φ w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|v| {
                let (c, k) = self.row(v);
                c.iter().zip(k).map(|(&p, k)| k * w[p as usize]).sum()
            })
            .collect()
    }

    /// Adds `scale * Φᵀ Φ` to `q` and `scale * Φᵀ y` to `b`.
    fn accumulate(&self, y: &[f64], scale: f64, q: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        for (v, &yv) in y.iter().enumerate() {
            let (c, k) = self.row(v);
            for (a, (&pa, &ka)) in c.iter().zip(k).enumerate() {
                b[pa as usize] += scale * ka * yv;
                for (&pb, &kb) in c[..=a].iter().zip(&k[..=a]) {
                    q[(pa as usize, pb as usize)] += scale * ka * kb;
                }
            }
        }
    }
}

/// Landmark placement and kernel width. `tau` is in coordinate units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub landmark_stride: usize,
    pub tau: f64,
    pub policy: InterpolationPolicy,
}

impl BaselineConfig {
    /// Every other lattice point as a landmark, kernel width two spacings.
    pub fn for_lattice(lattice: &Lattice) -> Self {
        Self {
            landmark_stride: 2,
            tau: 2.0 * lattice.spacing()[0],
            policy: InterpolationPolicy::default(),
        }
    }

    /// Landmark spacing and width used for each simulated benchmark.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let (landmark_stride, tau) = match scenario {
            Scenario::Indicator => (2, 0.1),
            Scenario::Cosine => (1, 0.05),
            Scenario::Glyph => (2, 1.5),
        };
        Self {
            landmark_stride,
            tau,
            policy: InterpolationPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmark_stride == 0 {
            return Err(Error::Validation("landmark_stride must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Validation(format!("tau must be positive (got {})", self.tau)));
        }
        Ok(())
    }
}

/// Fixed quantities of a conventional fit.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    ys: Vec<ActivationMap>,
    sites: LocationSet,
    landmarks: Lattice,
    tau: f64,
    k_inv: DMatrix<f64>,
    k_ln_det: f64,
    sigma_s: SigmaS,
    /// Design of the template on the subject lattice.
    lattice_design: Design,
}

impl BaselineModel {
    pub fn new(ys: &[ActivationMap], cfg: &BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        let first = ys
            .first()
            .ok_or_else(|| Error::DegenerateInput("at least one subject map is required".into()))?;
        let lattice = first.lattice().clone();
        if let Some(i) = ys.iter().position(|y| y.lattice() != &lattice) {
            return Err(Error::DegenerateInput(format!("map {i} is on a different lattice")));
        }
        let sites = lattice.locations();
        let landmarks = landmark_lattice(&lattice, cfg.landmark_stride)?;
        let k = gram(&landmarks.locations(), cfg.tau);
        let chol = k.cholesky().ok_or(Error::IllConditioned)?;
        let k_ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let sigma_s = SigmaS::from_locations(&sites)?;
        Ok(Self {
            lattice_design: Design::build(&landmarks, cfg.tau, &sites),
            k_inv: chol.inverse(),
            k_ln_det,
            sigma_s,
            ys: ys.to_vec(),
            sites,
            landmarks,
            tau: cfg.tau,
        })
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmarks(&self) -> &Lattice {
        &self.landmarks
    }

    pub fn maps(&self) -> &[ActivationMap] {
        &self.ys
    }

    /// Design of the template at `T(s)` for every lattice site `s`.
    pub fn design(&self, t: &AffineTransform) -> Design {
        let d = self.sites.dim();
        let mut coords = vec![0.0; self.sites.len() * d];
        for (p, out) in self.sites.iter().zip(coords.chunks_mut(d)) {
            t.apply_into(p, out);
        }
        let pts = LocationSet::new(d, coords).expect("dimension matches");
        Design::build(&self.landmarks, self.tau, &pts)
    }

    /// Template values on the subject lattice.
    pub fn template(&self, w: &[f64]) -> Vec<f64> {
        self.lattice_design.apply(w)
    }

    pub fn kernel_template(&self, w: &[f64]) -> Result<KernelTemplate> {
        KernelTemplate::new(self.landmarks.locations(), w.to_vec(), self.tau)
    }

    fn rss(&self, i: usize, design: &Design, w: &[f64]) -> f64 {
        let fit = design.apply(w);
        self.ys[i].values().iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum()
    }

    fn ln_weight_prior(&self, w: &[f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        let p = w.len() as f64;
        -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + self.k_ln_det + (&self.k_inv * &wv).dot(&wv))
    }

    /// Log joint density of the conventional model.
    pub fn log_joint(&self, state: &BaselineState, hyper: &Hyperparams) -> f64 {
        let v = self.sites.len() as f64;
        let mut total = self.ln_weight_prior(&state.w);
        for (i, ((t, &s2), design)) in state.t.iter().zip(&state.sigma2).zip(&state.designs).enumerate() {
            let rss = self.rss(i, design, &state.w);
            total += -0.5 * v * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * rss / s2;
            total += ln_inv_gamma(s2, hyper.a0, hyper.a1);
            total += transform_log_prior(t, hyper.a_t, hyper.b_t, &self.sigma_s);
        }
        total
    }

    /// Precision `K⁻¹ + Σ Φ_iᵀΦ_i/σ_i²` and shift `Σ Φ_iᵀ Y_i/σ_i²` of the
    /// weight conditional.
    pub fn weight_conditional(&self, state: &BaselineState) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.n_landmarks();
        let mut q = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for (i, (design, &s2)) in state.designs.iter().zip(&state.sigma2).enumerate() {
            design.accumulate(self.ys[i].values(), 1.0 / s2, &mut q, &mut b);
        }
        for a in 0..p {
            for c in 0..a {
                q[(c, a)] = q[(a, c)];
            }
        }
        (q + &self.k_inv, b)
    }

    /// Shape and rate of the inverse-gamma conditional of `σ_i²`.
    pub fn sigma_conditional(&self, state: &BaselineState, i: usize, hyper: &Hyperparams) -> (f64, f64) {
        let rss = self.rss(i, &state.designs[i], &state.w);
        (
            hyper.a0 + 0.5 * self.sites.len() as f64,
            (hyper.a1 + 0.5 * rss).max(RATE_FLOOR),
        )
    }

    /// Terms of the log joint that involve `T_i`.
    fn transform_target(&self, i: usize, t: &AffineTransform, design: &Design, w: &[f64], sigma2: f64, hyper: &Hyperparams) -> f64 {
        transform_log_prior(t, hyper.a_t, hyper.b_t, &self.sigma_s) - 0.5 * self.rss(i, design, w) / sigma2
    }
}

#[derive(Clone, Debug)]
pub struct BaselineState {
    pub w: Vec<f64>,
    pub t: Vec<AffineTransform>,
    pub sigma2: Vec<f64>,
    pub designs: Vec<Design>,
    pub records: Vec<AdaptRecord>,
    pub iteration: u64,
}

impl BaselineState {
    pub fn new(model: &BaselineModel, w: Vec<f64>, t: Vec<AffineTransform>, sigma2: Vec<f64>) -> Result<Self> {
        if w.len() != model.n_landmarks() {
            return Err(Error::DimensionMismatch {
                expected: model.n_landmarks(),
                got: w.len(),
            });
        }
        if t.len() != model.ys.len() || sigma2.len() != model.ys.len() {
            return Err(Error::DimensionMismatch {
                expected: model.ys.len(),
                got: t.len().min(sigma2.len()),
            });
        }
        let lattice = model.ys[0].lattice();
        Ok(Self {
            designs: t.iter().map(|t| model.design(t)).collect(),
            records: t.iter().map(|_| AdaptRecord::for_affine(lattice.dim(), lattice.spacing())).collect(),
            w,
            t,
            sigma2,
            iteration: 0,
        })
    }
}

/// Starting point from the shared alternating initialization: its
/// transforms, the kernel weights that best reproduce its template, and
/// residual variances.
pub fn initialize_baseline(model: &BaselineModel, policy: InterpolationPolicy) -> Result<BaselineState> {
    let fit = init::initial_fit(&model.ys, policy)?;
    let p = model.n_landmarks();
    let mut q = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    model.lattice_design.accumulate(fit.template.values(), 1.0, &mut q, &mut b);
    for a in 0..p {
        for c in 0..a {
            q[(c, a)] = q[(a, c)];
        }
    }
    let q = q + &model.k_inv;
    let w: Vec<f64> = q.cholesky().ok_or(Error::IllConditioned)?.solve(&b).iter().copied().collect();
    let mut state = BaselineState::new(model, w, fit.transforms, vec![1.0; model.ys.len()])?;
    let v = model.sites.len() as f64;
    for i in 0..model.ys.len() {
        state.sigma2[i] = (model.rss(i, &state.designs[i], &state.w) / v).max(1e-6);
    }
    Ok(state)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Gibbs draw of the kernel weights.
pub fn update_weights<R: Rng + ?Sized>(model: &BaselineModel, state: &mut BaselineState, rng: &mut R) -> Result<()> {
    let (q, b) = model.weight_conditional(state);
    let chol = q.cholesky().ok_or(Error::IllConditioned)?;
    let mean = chol.solve(&b);
    let z = DVector::from_iterator(b.len(), (0..b.len()).map(|_| normal(rng)));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(Error::IllConditioned)?;
    state.w = (mean + noise).iter().copied().collect();
    Ok(())
}

/// Metropolis-Hastings step for `T_i` with proposal `exp(δ) T_i`.
#[allow(clippy::too_many_arguments)]
fn update_transform<R: Rng + ?Sized>(
    model: &BaselineModel,
    i: usize,
    t: &mut AffineTransform,
    design: &mut Design,
    record: &mut AdaptRecord,
    w: &[f64],
    sigma2: f64,
    hyper: &Hyperparams,
    adapting: bool,
    rng: &mut R,
) -> Outcome {
    let dim = t.dim();
    let delta = LieVector::new(dim, record.propose(rng)).expect("proposal dimension matches");
    let outcome = match lie_exp(&delta).compose(t) {
        Err(_) => Outcome::Invalid,
        Ok(t_new) => {
            let d_new = model.design(&t_new);
            let cur = model.transform_target(i, t, design, w, sigma2, hyper);
            let new = model.transform_target(i, &t_new, &d_new, w, sigma2, hyper);
            let log_ratio = new - cur + log_proposal_correction(&delta);
            if log_ratio.is_finite() && rng.random::<f64>().ln() < log_ratio {
                *t = t_new;
                *design = d_new;
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

/// One sweep: weights, then every transform, then every noise variance.
pub fn baseline_sweep(
    model: &BaselineModel,
    state: &mut BaselineState,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
) -> Result<Vec<Outcome>> {
    state.iteration += 1;
    let it = state.iteration;
    let seed = cfg.seed;
    let adapting = it <= cfg.burn_in;
    let mut rng = stream(seed, it, 0, Phase::BaselineWeights);
    update_weights(model, state, &mut rng)?;

    let BaselineState {
        w,
        t,
        sigma2,
        designs,
        records,
        ..
    } = state;
    let w = &*w;
    let outcomes: Vec<Outcome> = t
        .par_iter_mut()
        .zip(designs.par_iter_mut())
        .zip(records.par_iter_mut())
        .zip(sigma2.par_iter())
        .enumerate()
        .map(|(i, (((t, d), rec), &s2))| {
            let mut rng = stream(seed, it, i, Phase::BaselineTransform);
            update_transform(model, i, t, d, rec, w, s2, hyper, adapting, &mut rng)
        })
        .collect();

    let draws = (0..model.ys.len())
        .into_par_iter()
        .map(|i| {
            let (shape, rate) = model.sigma_conditional(state, i, hyper);
            let mut rng = stream(seed, it, i, Phase::BaselineSigma);
            inv_gamma(&mut rng, shape, rate)
        })
        .collect::<Result<Vec<f64>>>()?;
    state.sigma2 = draws;
    Ok(outcomes)
}

/// One thinned draw of the conventional model.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSample {
    pub iteration: u64,
    /// Template on the subject lattice.
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub t: Vec<AffineTransform>,
    pub sigma2: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BaselineDiagnostics {
    pub forward: Vec<MoveStats>,
    pub forward_scale: Vec<f64>,
    pub trace_iteration: Vec<u64>,
    pub trace_log_joint: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub state: BaselineState,
    pub samples: Vec<BaselineSample>,
    pub diagnostics: BaselineDiagnostics,
}

fn run_baseline_inner(
    model: &BaselineModel,
    mut state: BaselineState,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
) -> Result<BaselineOutput> {
    let n = model.ys.len();
    let mut diag = BaselineDiagnostics {
        forward: vec![MoveStats::default(); n],
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(cfg.kept() as usize);
    while state.iteration < cfg.total {
        let outcomes = baseline_sweep(model, &mut state, hyper, cfg).map_err(|e| Error::Sweep {
            iteration: state.iteration,
            source: Box::new(e),
        })?;
        let it = state.iteration;
        if it <= cfg.burn_in {
            continue;
        }
        for (s, o) in diag.forward.iter_mut().zip(outcomes) {
            s.record(o);
        }
        if (it - cfg.burn_in) % cfg.thin == 0 {
            samples.push(BaselineSample {
                iteration: it,
                x: model.template(&state.w),
                w: state.w.clone(),
                t: state.t.clone(),
                sigma2: state.sigma2.clone(),
            });
            diag.trace_iteration.push(it);
            diag.trace_log_joint.push(model.log_joint(&state, hyper));
        }
    }
    diag.forward_scale = state.records.iter().map(|r| r.scale()).collect();
    Ok(BaselineOutput {
        state,
        samples,
        diagnostics: diag,
    })
}

/// Initializes and runs the conventional chain.
pub fn fit_conventional(
    ys: &[ActivationMap],
    hyper: &Hyperparams,
    chain: &ChainConfig,
    cfg: &BaselineConfig,
) -> Result<BaselineOutput> {
    chain.validate()?;
    hyper.validate()?;
    let model = BaselineModel::new(ys, cfg)?;
    let state = initialize_baseline(&model, cfg.policy)?;
    match chain.threads {
        None => run_baseline_inner(&model, state, hyper, chain),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(|| run_baseline_inner(&model, state, hyper, chain)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSummary {
    pub level: f64,
    pub samples: usize,
    pub template: FieldSummary,
    /// Karcher means of the sampled transforms, per subject.
    pub forward: Vec<AffineTransform>,
    pub sigma2_mean: Vec<f64>,
}

pub fn summarize_baseline(samples: &[BaselineSample], level: f64) -> Result<BaselineSummary> {
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
    let k = samples.len() as f64;
    Ok(BaselineSummary {
        level,
        samples: samples.len(),
        template: FieldSummary::from_columns(&columns, level)?,
        forward: (0..n)
            .map(|i| {
                let ts: Vec<AffineTransform> = samples.iter().map(|s| s.t[i].clone()).collect();
                karcher_mean(&ts, KARCHER_TOL, KARCHER_MAX_ITER)
            })
            .collect::<Result<_>>()?,
        sigma2_mean: (0..n).map(|i| samples.iter().map(|s| s.sigma2[i]).sum::<f64>() / k).collect(),
    })
}

/// Brings each map back to template space by warping it with the inverse
/// of its transform, and averages the results.
pub fn inverse_warp(
    ys: &[ActivationMap],
    transforms: &[AffineTransform],
    policy: InterpolationPolicy,
) -> Result<(Vec<ActivationMap>, ActivationMap)> {
    if ys.is_empty() || ys.len() != transforms.len() {
        return Err(Error::DimensionMismatch {
            expected: ys.len(),
            got: transforms.len(),
        });
    }
    let warped = ys
        .iter()
        .zip(transforms)
        .map(|(y, t)| Ok(warp(y, &t.inverse()?, policy)))
        .collect::<Result<Vec<_>>>()?;
    let lattice = warped[0].lattice().clone();
    let n = warped.len() as f64;
    let mean = (0..lattice.len())
        .map(|l| warped.iter().map(|m| m.values()[l]).sum::<f64>() / n)
        .collect();
    Ok((warped, ActivationMap::new(lattice, mean)?))
}

/// Mean Pearson correlation over all pairs of maps.
pub fn mean_pairwise_correlation(maps: &[ActivationMap]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            total += pearson(maps[i].values(), maps[j].values());
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(points: &[f64]) -> LocationSet {
        LocationSet::new(1, points.to_vec()).unwrap()
    }

    #[test]
    fn kernel_template_examples() {
        let zero = KernelTemplate::new(single(&[0.0, 1.0]), vec![0.0, 0.0], 0.7).unwrap();
        assert!(kernel_template_eval(&zero, &single(&[-1.0, 0.3, 4.0])).iter().all(|&v| v == 0.0));
        let one = KernelTemplate::new(single(&[0.0]), vec![1.0], 1.0).unwrap();
        let v = kernel_template_eval(&one, &single(&[0.0, 1.0]));
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn invalid_templates_rejected() {
        assert!(KernelTemplate::new(single(&[]), vec![], 1.0).is_err());
        assert!(KernelTemplate::new(single(&[0.0]), vec![1.0], 0.0).is_err());
        assert!(KernelTemplate::new(single(&[0.0]), vec![1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn narrow_kernels_interpolate_weights() {
        let lat = Lattice::line(9, 0.5, -2.0).unwrap();
        let w: Vec<f64> = (0..9).map(|k| (k as f64).sin()).collect();
        let t = KernelTemplate::new(lat.locations(), w.clone(), 1e-3).unwrap();
        let v = kernel_template_eval(&t, &lat.locations());
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sparse_design_matches_dense_evaluation() {
        let lat = Lattice::grid(9, 7).unwrap();
        let marks = landmark_lattice(&lat, 2).unwrap();
        let w: Vec<f64> = (0..marks.len()).map(|k| (k as f64 * 0.37).cos()).collect();
        let t = AffineTransform::rotation_about(0.2, &lat.center());
        let pts = lat.locations();
        let moved = LocationSet::from_points(2, &pts.iter().map(|p| t.apply(p).unwrap()).collect::<Vec<_>>()).unwrap();
        let tpl = KernelTemplate::new(marks.locations(), w.clone(), 1.5).unwrap();
        let dense = kernel_template_eval(&tpl, &moved);
        let sparse = Design::build(&marks, 1.5, &moved).apply(&w);
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn landmark_lattice_counts() {
        let lat = Lattice::line(201, 0.05, -5.0).unwrap();
        let m = landmark_lattice(&lat, 2).unwrap();
        assert_eq!(m.len(), 101);
        assert!((m.point(100)[0] - 5.0).abs() < 1e-12);
        assert_eq!(landmark_lattice(&Lattice::grid(28, 28).unwrap(), 2).unwrap().dims(), &[14, 14]);
    }

    fn toy() -> (BaselineModel, BaselineState, Hyperparams) {
        let lat = Lattice::line(12, 0.5, -3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<ActivationMap> = (0..2)
            .map(|_| ActivationMap::from_fn(lat.clone(), |s| (-s[0] * s[0]).exp() + 0.1 * rng.random::<f64>()))
            .collect();
        let cfg = BaselineConfig {
            landmark_stride: 2,
            tau: 0.8,
            policy: InterpolationPolicy::default(),
        };
        let model = BaselineModel::new(&ys, &cfg).unwrap();
        let w = (0..model.n_landmarks()).map(|k| 0.1 * k as f64).collect();
        let ts = vec![
            AffineTransform::affine_1d(1.05, 0.1).unwrap(),
            AffineTransform::affine_1d(0.97, -0.2).unwrap(),
        ];
        let state = BaselineState::new(&model, w, ts, vec![0.4, 0.7]).unwrap();
        (model, state, Hyperparams::default())
    }

    #[test]
    fn weight_conditional_audit() {
        let (model, mut s, h) = toy();
        let (q, b) = model.weight_conditional(&s);
        let mean = q.clone().cholesky().unwrap().solve(&b);
        let lq = |w: &[f64]| {
            let d = DVector::from_column_slice(w) - &mean;
            -0.5 * (&q * &d).dot(&d)
        };
        let w0 = s.w.clone();
        let w1: Vec<f64> = w0.iter().enumerate().map(|(k, v)| v + 0.05 * (k as f64 - 2.0)).collect();
        let p0 = model.log_joint(&s, &h);
        s.w = w1.clone();
        let p1 = model.log_joint(&s, &h);
        let expected = lq(&w1) - lq(&w0);
        assert!((expected - (p1 - p0)).abs() < 1e-8 * (1.0 + expected.abs()));
    }

    #[test]
    fn sigma_conditional_audit() {
        let (model, mut s, h) = toy();
        for i in 0..2 {
            let (shape, rate) = model.sigma_conditional(&s, i, &h);
            let (v0, v1) = (s.sigma2[i], 1.3);
            let p0 = model.log_joint(&s, &h);
            s.sigma2[i] = v1;
            let p1 = model.log_joint(&s, &h);
            s.sigma2[i] = v0;
            let expected = ln_inv_gamma(v1, shape, rate) - ln_inv_gamma(v0, shape, rate);
            assert!((expected - (p1 - p0)).abs() < 1e-8 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn weights_match_ridge_solution() {
        // N = 1, T = Id, σ² = 1: the conditional mean is (K⁻¹ + ΦᵀΦ)⁻¹ΦᵀY
        let lat = Lattice::line(10, 1.0, 0.0).unwrap();
        let y = ActivationMap::from_fn(lat.clone(), |s| (0.6 * s[0]).sin());
        let cfg = BaselineConfig {
            landmark_stride: 3,
            tau: 1.7,
            policy: InterpolationPolicy::default(),
        };
        let model = BaselineModel::new(std::slice::from_ref(&y), &cfg).unwrap();
        let marks = model.landmarks().locations();
        let p = marks.len();
        let phi = DMatrix::from_fn(10, p, |v, k| gaussian_kernel(&lat.point(v), marks.point(k), 1.7));
        let kmat = gram(&marks, 1.7);
        let post = (kmat.try_inverse().unwrap() + phi.transpose() * &phi).try_inverse().unwrap();
        let ridge = &post * phi.transpose() * DVector::from_column_slice(y.values());

        let mut s = BaselineState::new(&model, vec![0.0; p], vec![AffineTransform::identity(1)], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 20_000;
        let mut sum = vec![0.0; p];
        for _ in 0..n {
            update_weights(&model, &mut s, &mut rng).unwrap();
            for (a, b) in sum.iter_mut().zip(&s.w) {
                *a += b;
            }
        }
        for k in 0..p {
            let m = sum[k] / n as f64;
            let se = (post[(k, k)] / n as f64).sqrt();
            assert!((m - ridge[k]).abs() < 5.0 * se, "{k}: {m} vs {}", ridge[k]);
        }
    }

    #[test]
    fn zero_data_weights_shrink_to_zero() {
        let lat = Lattice::line(10, 1.0, 0.0).unwrap();
        let y = ActivationMap::zeros(lat);
        let model = BaselineModel::new(&[y], &BaselineConfig { landmark_stride: 2, tau: 1.0, policy: InterpolationPolicy::default() }).unwrap();
        let s = BaselineState::new(&model, vec![1.0; model.n_landmarks()], vec![AffineTransform::identity(1)], vec![1.0]).unwrap();
        let (q, b) = model.weight_conditional(&s);
        let mean = q.cholesky().unwrap().solve(&b);
        assert!(mean.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn inverse_warp_identity_and_constant() {
        let lat = Lattice::grid(6, 5).unwrap();
        let y = ActivationMap::from_fn(lat.clone(), |p| p[0] * 0.3 - p[1]);
        let (w, mean) = inverse_warp(&[y.clone()], &[AffineTransform::identity(2)], InterpolationPolicy::default()).unwrap();
        assert_eq!(w[0], y);
        assert_eq!(mean, y);
        let c = ActivationMap::from_fn(lat.clone(), |_| 2.5);
        let t = AffineTransform::translation(&[0.3, -0.2]);
        let policy = InterpolationPolicy {
            boundary: crate::interp::Boundary::Clamp,
        };
        let (w, _) = inverse_warp(&[c], &[t], policy).unwrap();
        assert!(w[0].values().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn pairwise_correlation_of_identical_maps_is_one() {
        let lat = Lattice::grid(4, 4).unwrap();
        let a = ActivationMap::from_fn(lat, |p| p[0] + 2.0 * p[1]);
        assert!((mean_pairwise_correlation(&[a.clone(), a.clone(), a]) - 1.0).abs() < 1e-12);
    }
}
