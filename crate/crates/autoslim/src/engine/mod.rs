//! Minimal deterministic tensor/NN compute with slimmable weight sharing.
//!
//! The production element type is f32; kernels are generic so gradient
//! checks can run the identical code path in f64.

pub mod checkpoint;
mod elem;
mod kernels;
mod net;
mod sgd;
mod tensor;

pub use elem::Elem;
pub use kernels::{softmax_probs, softmax_xent, top1_accuracy, Targets};
pub use net::{
    accuracy, backward, backward_from_trace, forward_calibrate, forward_eval, forward_loss,
    forward_train, recalibrate_bn, BackwardOut, BnMode, BnParams, CalibState, EngineError,
    ForwardTrace, GradStore, LayerParams, LossKind, SlimmableWeights,
};
pub use sgd::{sgd_step, SgdHyper, SgdState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
