//! Reverse-mode automatic differentiation over dense fp64 tensors.

mod kernels;
mod tensor;

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rnn;
pub mod tape;

pub use optim::{Adam, ClipMode};
pub use params::{ParamId, ParamStore};
pub use rnn::{gru_cell, lstm_cell, GruWeights, LstmWeights};
pub use tape::{BufferUpdate, ConvOpts, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

/// Writes queued batch-norm running statistics back into the store.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<BufferUpdate>) {
    for u in updates {
        store.value_mut(u.id).data_mut().copy_from_slice(&u.value);
    }
}
