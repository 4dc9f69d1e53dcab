//! Transducer loss engine: the standard and alignment-restricted transducer
//! losses as log-domain forward-backward recursions with exact gradients,
//! band-packed storage, alignment-label generation, a streaming beam decoder
//! with emission-delay bookkeeping, end-pointer simulators and a small
//! trainable transducer.

pub mod align;
pub mod band;
pub mod bench;
pub mod decoder;
pub mod endpoint;
pub mod error;
pub mod lattice;
pub mod logspace;
pub mod loss;
pub mod toy;

pub use align::{align_as1, align_as2, Strategy, WordAlignment, WordSpan};
pub use band::{make_band, pack, unpack, AlignLabels, BandPlan, PackedTensor};
pub use error::{Error, Result};
pub use lattice::{CellLayout, DenseLayout, Lattice, Target, Vocab};
pub use loss::{
    brute_force_loss, grad_check, loss_forward_backward, packed_loss_forward_backward, AlphaBeta, LossGrad,
};
