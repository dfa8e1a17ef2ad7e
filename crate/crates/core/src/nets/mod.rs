//! Toy segment models: a fully-connected memory RNN and a
//! memory-enhanced mini-transformer.
//!
//! Both implement [`SegmentModel`]: one time step maps (segment input,
//! detached memories from earlier steps) to (scalar loss, new memory).
//! The new memory is computed from the segment alone, so cross-memory
//! Jacobians are structurally zero and the per-segment encoder graphs
//! can be backpropagated independently.

mod rnn;
mod transformer;

pub use rnn::{RnnSegment, ToyRnn};
pub use transformer::{ToyTransformer, TransformerConfig};

use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, TapeResult, TensorId};

/// Loss and freshly produced memory for one segment.
pub struct StepOutput {
    pub loss: TensorId,
    pub memory: TensorId,
}

/// The per-step model interface shared by all schedulers.
///
/// Contract: `memory` depends only on the segment input and the bound
/// parameters, never on the `memories` argument; `loss` depends on the
/// segment, the parameters, and every supplied memory.
///
/// A detached memory leaf is turned into its decoder-side view once by
/// [`SegmentModel::prepare_memory`]; every later `forward` reuses that
/// view, so per-memory projection work is not repeated per step.
pub trait SegmentModel {
    type Input;

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &Self::Input,
        memories: &[Vec<TensorId>],
    ) -> TapeResult<StepOutput>;

    /// Project one memory leaf into the tensors `forward` consumes.
    /// Models without a projection step pass the leaf through.
    fn prepare_memory(
        &self,
        _tape: &mut Tape,
        _bound: &BoundParams,
        leaf: TensorId,
    ) -> TapeResult<Vec<TensorId>> {
        Ok(vec![leaf])
    }

    fn init_params(&self, seed: u64) -> ParamSet;
}
