//! Chain orchestration: the fixed sweep order, thinning, diagnostics and
//! WAIC accumulation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interp::InterpolationPolicy;
use crate::map::ActivationMap;
use crate::model::{self, Geometry, Hyperparams, ModelState, WaicAccumulator, WaicResult};
use crate::transforms::{standardize, AffineTransform};

use super::adapt::Outcome;
use super::init;
use super::rng::{stream, Phase};
use super::state::ChainState;
use super::updates;

/// Library margin slack added on top of what the initial transforms need.
pub const MIN_MARGIN_SLACK: usize = 5;

/// Parameter blocks that can be held at their current value. Everything
/// is updated by default; freezing exists for controlled experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub transformed_template: bool,
    pub template: bool,
    pub forward: bool,
    pub reverse: bool,
    pub beta_sigma: bool,
    pub scale: bool,
    pub alpha: bool,
    pub rho: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub total: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub frozen: Frozen,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            total: 30_000,
            burn_in: 15_000,
            thin: 10,
            seed: 1,
            threads: None,
            frozen: Frozen::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Validation("thin must be positive".into()));
        }
        if self.burn_in >= self.total {
            return Err(Error::Validation(format!(
                "burn_in ({}) must be smaller than total ({})",
                self.burn_in, self.total
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be positive".into()));
        }
        Ok(())
    }

    /// Number of samples kept after burn-in and thinning.
    pub fn kept(&self) -> u64 {
        (self.total - self.burn_in) / self.thin
    }

    fn keeps(&self, iteration: u64) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// One thinned draw of the parameters that are persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub iteration: u64,
    pub x: Vec<f64>,
    pub t: Vec<AffineTransform>,
    pub t_r: Vec<AffineTransform>,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub alpha: f64,
    pub rho: f64,
}

impl Sample {
    pub fn from_state(iteration: u64, m: &ModelState) -> Self {
        Self {
            iteration,
            x: m.x.clone(),
            t: m.blocks.iter().map(|b| b.t.clone()).collect(),
            t_r: m.blocks.iter().map(|b| b.t_r.clone()).collect(),
            beta: m.blocks.iter().map(|b| b.beta).collect(),
            sigma2: m.blocks.iter().map(|b| b.sigma2).collect(),
            alpha: m.alpha,
            rho: m.rho,
        }
    }
}

/// Receives every kept sample.
pub trait SampleSink: Send {
    fn push(&mut self, sample: &Sample) -> Result<()>;
}

#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub samples: Vec<Sample>,
}

impl SampleSink for MemorySink {
    fn push(&mut self, sample: &Sample) -> Result<()> {
        self.samples.push(sample.clone());
        Ok(())
    }
}

/// Discards samples; useful when only diagnostics or WAIC are needed.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl SampleSink for NullSink {
    fn push(&mut self, _: &Sample) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MoveStats {
    pub proposals: u64,
    pub accepts: u64,
    pub out_of_bounds: u64,
    pub invalid: u64,
}

impl MoveStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }

    pub fn record(&mut self, o: Outcome) {
        self.proposals += 1;
        match o {
            Outcome::Accepted => self.accepts += 1,
            Outcome::Rejected => {}
            Outcome::OutOfBounds => self.out_of_bounds += 1,
            Outcome::Invalid => self.invalid += 1,
        }
    }
}

/// Acceptance statistics of the post-burn-in chain and a thinned trace.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub forward: Vec<MoveStats>,
    pub reverse: Vec<MoveStats>,
    pub rho: MoveStats,
    pub scale: MoveStats,
    pub forward_scale: Vec<f64>,
    pub reverse_scale: Vec<f64>,
    pub rho_step: f64,
    pub scale_step: f64,
    pub margin: usize,
    pub trace_iteration: Vec<u64>,
    pub trace_log_posterior: Vec<f64>,
    pub trace_alpha: Vec<f64>,
    pub trace_rho: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub state: ChainState,
    pub diagnostics: Diagnostics,
    pub waic: Option<WaicResult>,
}

/// Applies a forward-transform standardization and re-binds each subject's
/// transformed-template conditionals to the new site locations.
fn standardize_forward(state: &mut ChainState, geom: &Geometry) -> Result<()> {
    let ts: Vec<AffineTransform> = state.model.blocks.iter().map(|b| b.t.clone()).collect();
    let std = standardize(&ts)?;
    let factors = &state.caches.factors;
    let subjects = std
        .par_iter()
        .map(|t| geom.subject_conditionals(t, factors))
        .collect::<Result<Vec<_>>>()?;
    for (b, t) in state.model.blocks.iter_mut().zip(std) {
        b.t = t;
    }
    state.caches.subjects = subjects;
    Ok(())
}

/// Outcomes of the Metropolis moves of one sweep; empty or `None` for
/// frozen blocks.
#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub forward: Vec<Outcome>,
    pub reverse: Vec<Outcome>,
    pub scale: Option<bool>,
    pub rho: Option<bool>,
}

/// Runs one full sweep in the fixed order.
pub fn sweep(state: &mut ChainState, geom: &Geometry, hyper: &Hyperparams, cfg: &ChainConfig) -> Result<SweepOutcome> {
    state.iteration += 1;
    let it = state.iteration;
    let seed = cfg.seed;
    let adapting = it <= cfg.burn_in;
    let frozen = cfg.frozen;
    let ChainState {
        model,
        forward,
        reverse,
        caches,
        ..
    } = state;
    let alpha = model.alpha;

    if !frozen.transformed_template {
        let x = &model.x;
        model
            .blocks
            .par_iter_mut()
            .zip(caches.subjects.par_iter())
            .enumerate()
            .for_each(|(i, (b, c))| {
                let mut rng = stream(seed, it, i, Phase::TransformedTemplate);
                updates::update_transformed_template(b, x, c, alpha, &mut rng);
            });
    }

    if !frozen.template {
        let mut rng = stream(seed, it, 0, Phase::Template);
        updates::update_template(
            &mut model.x,
            &model.blocks,
            &caches.template,
            &caches.subjects,
            alpha,
            &mut rng,
        );
    }

    let mut fwd = Vec::new();
    if !frozen.forward {
        let x = &model.x;
        let factors = &caches.factors;
        fwd = model
            .blocks
            .par_iter_mut()
            .zip(caches.subjects.par_iter_mut())
            .zip(forward.par_iter_mut())
            .enumerate()
            .map(|(i, ((b, c), rec))| {
                let mut rng = stream(seed, it, i, Phase::Forward);
                updates::update_forward_transform(b, c, x, alpha, factors, geom, hyper, rec, adapting, &mut rng)
            })
            .collect();
    }

    let mut rev = Vec::new();
    if !frozen.reverse {
        let x = &model.x;
        rev = model
            .blocks
            .par_iter_mut()
            .zip(reverse.par_iter_mut())
            .enumerate()
            .map(|(i, (b, rec))| {
                let mut rng = stream(seed, it, i, Phase::Reverse);
                updates::update_reverse_transform(b, x, geom, hyper, rec, adapting, &mut rng)
            })
            .collect();
    }

    if !frozen.forward {
        standardize_forward(state, geom)?;
    }
    let ChainState {
        model,
        rho_adapt,
        scale_adapt,
        caches,
        ..
    } = state;

    if !frozen.beta_sigma {
        let x = &model.x;
        model
            .blocks
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, b)| {
                let mut rng = stream(seed, it, i, Phase::BetaSigma);
                updates::update_beta_sigma(b, x, hyper, &mut rng)
            })?;
    }

    let mut scale_acc = None;
    if !frozen.scale {
        let mut rng = stream(seed, it, 0, Phase::Scale);
        scale_acc = Some(updates::update_scale(
            &mut model.x,
            &mut model.blocks,
            &mut model.alpha,
            hyper,
            scale_adapt,
            adapting,
            &mut rng,
        ));
    }

    if !frozen.alpha {
        let mut rng = stream(seed, it, 0, Phase::Alpha);
        model.alpha = updates::update_alpha(&model.x, &model.blocks, caches, hyper, &mut rng)?;
    }

    let mut rho_acc = None;
    if !frozen.rho {
        let mut rng = stream(seed, it, 0, Phase::Rho);
        rho_acc = Some(updates::update_rho(
            &mut model.rho,
            &model.x,
            &model.blocks,
            model.alpha,
            caches,
            geom,
            hyper,
            rho_adapt,
            adapting,
            &mut rng,
        )?);
    }
    Ok(SweepOutcome {
        forward: fwd,
        reverse: rev,
        scale: scale_acc,
        rho: rho_acc,
    })
}

fn run_inner(
    mut state: ChainState,
    geom: &Geometry,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    sink: &mut dyn SampleSink,
) -> Result<ChainOutput> {
    let n = state.model.blocks.len();
    let v = geom.n_sites();
    let mut diag = Diagnostics {
        forward: vec![MoveStats::default(); n],
        reverse: vec![MoveStats::default(); n],
        margin: geom.library().margin(),
        ..Default::default()
    };
    let mut waic = WaicAccumulator::new(2 * n * v);
    let mut ll = Vec::with_capacity(2 * n * v);
    while state.iteration < cfg.total {
        let outcome = sweep(&mut state, geom, hyper, cfg).map_err(|e| Error::Sweep {
            iteration: state.iteration,
            source: Box::new(e),
        })?;
        let it = state.iteration;
        if it <= cfg.burn_in {
            continue;
        }
        for (s, o) in diag.forward.iter_mut().zip(outcome.forward) {
            s.record(o);
        }
        for (s, o) in diag.reverse.iter_mut().zip(outcome.reverse) {
            s.record(o);
        }
        if let Some(a) = outcome.rho {
            diag.rho.record(Outcome::from_accepted(a));
        }
        if let Some(a) = outcome.scale {
            diag.scale.record(Outcome::from_accepted(a));
        }
        if cfg.keeps(it) {
            let m = &state.model;
            sink.push(&Sample::from_state(it, m))?;
            model::pointwise_log_lik(&m.x, &m.blocks, &mut ll);
            waic.push(&ll)?;
            diag.trace_iteration.push(it);
            diag.trace_log_posterior.push(model::gibbs_log_posterior(m, geom, hyper)?);
            diag.trace_alpha.push(m.alpha);
            diag.trace_rho.push(m.rho);
        }
    }
    diag.forward_scale = state.forward.iter().map(|r| r.scale()).collect();
    diag.reverse_scale = state.reverse.iter().map(|r| r.scale()).collect();
    diag.rho_step = state.rho_adapt.step();
    diag.scale_step = state.scale_adapt.step();
    let waic = if waic.samples() >= 2 { Some(waic.finish()?) } else { None };
    Ok(ChainOutput {
        state,
        diagnostics: diag,
        waic,
    })
}

/// Runs a chain from `state` until `cfg.total` sweeps have been done.
pub fn run_chain(
    state: ChainState,
    geom: &Geometry,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    sink: &mut dyn SampleSink,
) -> Result<ChainOutput> {
    cfg.validate()?;
    hyper.validate()?;
    match cfg.threads {
        None => run_inner(state, geom, hyper, cfg, sink),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(|| run_inner(state, geom, hyper, cfg, sink)),
    }
}

/// Options for building the geometry of a fit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitOptions {
    /// Minimum library margin in lattice points.
    pub margin: usize,
    pub policy: InterpolationPolicy,
}

/// Library margin large enough for the initial transforms with room to
/// move: the larger of the configured margin and the covering margin plus
/// a slack of 10% of the largest lattice dimension (at least 5 points).
pub fn choose_margin(lattice: &crate::map::Lattice, transforms: &[AffineTransform], minimum: usize) -> usize {
    let largest = lattice.dims().iter().copied().max().unwrap_or(0);
    let slack = MIN_MARGIN_SLACK.max(largest / 10);
    minimum.max(Geometry::margin_covering(lattice, transforms, slack))
}

/// Initializes, builds the geometry and prepares the chain state.
pub fn prepare(ys: &[ActivationMap], hyper: &Hyperparams, opts: FitOptions) -> Result<(ChainState, Geometry)> {
    hyper.validate()?;
    let model = init::initialize(ys, hyper, opts.policy)?;
    let lattice = model.blocks[0].y.lattice().clone();
    let ts: Vec<AffineTransform> = model.blocks.iter().map(|b| b.t.clone()).collect();
    let margin = choose_margin(&lattice, &ts, opts.margin);
    let geom = Geometry::new(&lattice, hyper.m, margin, opts.policy)?;
    if !geom.has_transform_prior() {
        return Err(Error::DegenerateInput(
            "lattice has too few sites for the transform prior".into(),
        ));
    }
    let state = ChainState::new(model, &geom, hyper.rho_upper - hyper.rho_lower)?;
    Ok((state, geom))
}

/// Initialization followed by a full chain.
pub fn fit(
    ys: &[ActivationMap],
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    opts: FitOptions,
    sink: &mut dyn SampleSink,
) -> Result<(ChainOutput, Geometry)> {
    cfg.validate()?;
    let (state, geom) = prepare(ys, hyper, opts)?;
    let out = run_chain(state, &geom, hyper, cfg, sink)?;
    Ok((out, geom))
}
