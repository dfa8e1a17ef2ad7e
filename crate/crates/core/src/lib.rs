//! Incremental and unbiased truncated backpropagation-through-time for
//! memory-segmented models, with the oracles needed to verify them.
//!
//! The crate is organized around a minimal reverse-mode tape
//! ([`tape`]), two toy segment models ([`nets`]), the four gradient
//! schedulers and reservoir mechanism ([`sched`]), statistical and
//! finite-difference oracles ([`verify`]), and the segment-compression
//! inference path ([`pipeline`]).

pub mod data;
pub mod nets;
pub mod opt;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sched;
pub mod tape;
pub mod verify;

pub use nets::{RnnSegment, SegmentModel, StepOutput, ToyRnn, ToyTransformer, TransformerConfig};
pub use params::{BoundParams, GradReport, Param, ParamSet};
pub use sched::{
    bench_mode, compensation_factor, run_bptt, run_incremental_tbptt, run_mode, run_tbptt,
    run_unbiased_incremental_tbptt, BenchRow, Mode, Reservoir, ReservoirDecision, RunOutput,
    SchedError, TrainConfig,
};
pub use tape::{Tape, TapeError, TapeStats, TensorId};
