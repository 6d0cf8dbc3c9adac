//! Small dense-tensor engine: a reverse-mode tape over row-major matrices,
//! LSTM / BiLSTM / dense layers, Adam, and the `.ifw` weight container.
//!
//! Tape values are 2-D (`rows × cols`); rows are batch lanes (or stacked
//! `time × batch` rows), columns are features.

mod adam;
mod init;
mod kernels;
mod layers;
mod real;
mod tape;
mod tensor;
mod weights;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use init::{kaiming_uniform, orthogonal, Initializer};
pub use layers::{
    bilstm_forward, lstm_forward, lstm_step, Activation, BiLstmLayer, DenseLayer, HiddenState, LayerState, LstmLayer,
};
pub use real::Real;
pub(crate) use tape::cov_entries;
pub use tape::{Tape, Var, View};
pub use tensor::{Param, ParamId, ParamStore, Tensor};
pub use weights::{
    decode_weights, encode_weights, read_weights, write_weights, TensorEntry, WeightFile, WeightHeader, FORMAT_VERSION,
};
