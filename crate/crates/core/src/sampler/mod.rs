//! Markov chain Monte Carlo for the symmetric registration model.

pub mod adapt;
pub mod chain;
pub mod init;
pub mod rng;
pub mod state;
pub mod summary;
pub mod updates;

pub use chain::{
    SweepOutcome,
    fit, prepare, run_chain, sweep, ChainConfig, ChainOutput, Diagnostics, FitOptions, Frozen, MemorySink, NullSink,
    MoveStats, Sample, SampleSink,
};
pub use init::initialize;
pub use state::ChainState;
pub use summary::{summarize, FieldSummary, PosteriorSummary};
