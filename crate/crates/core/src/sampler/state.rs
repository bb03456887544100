use crate::error::Result;
use crate::model::{Geometry, ModelState};
use crate::spatial::{Conditionals, LibraryFactors};

use super::adapt::{AdaptRecord, ScalarAdapt};

/// Initial standard deviation of the log intensity-scale proposal.
pub const INITIAL_SCALE_STEP: f64 = 0.05;

/// Unit-variance NNGP conditionals consistent with the current transforms
/// and decay.
#[derive(Clone, Debug)]
pub struct Caches {
    pub template: Conditionals,
    pub factors: LibraryFactors,
    pub subjects: Vec<Conditionals>,
}

impl Caches {
    pub fn build(model: &ModelState, geom: &Geometry) -> Result<Self> {
        let factors = geom.library_factors(model.rho)?;
        let subjects = model
            .blocks
            .iter()
            .map(|b| geom.subject_conditionals(&b.t, &factors))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            template: geom.template_conditionals(model.rho)?,
            factors,
            subjects,
        })
    }
}

/// Sampler state: model quantities, proposal adaptation and caches.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub model: ModelState,
    pub iteration: u64,
    pub forward: Vec<AdaptRecord>,
    pub reverse: Vec<AdaptRecord>,
    pub rho_adapt: ScalarAdapt,
    pub scale_adapt: ScalarAdapt,
    pub caches: Caches,
}

impl ChainState {
    pub fn new(model: ModelState, geom: &Geometry, rho_range: f64) -> Result<Self> {
        let spacing = geom.lattice().spacing().to_vec();
        let d = geom.dim();
        let n = model.blocks.len();
        Ok(Self {
            caches: Caches::build(&model, geom)?,
            forward: (0..n).map(|_| AdaptRecord::for_affine(d, &spacing)).collect(),
            reverse: (0..n).map(|_| AdaptRecord::for_affine(d, &spacing)).collect(),
            rho_adapt: ScalarAdapt::new(0.05 * rho_range),
            scale_adapt: ScalarAdapt::new(INITIAL_SCALE_STEP),
            iteration: 0,
            model,
        })
    }

    /// Rebuilds every cache from the model quantities.
    pub fn refresh(&mut self, geom: &Geometry) -> Result<()> {
        self.caches = Caches::build(&self.model, geom)?;
        Ok(())
    }
}
