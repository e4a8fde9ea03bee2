//! Small convolutional networks with hand-written backpropagation.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod network;
pub mod spec;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::ModelCheckpoint;
pub use gradcheck::{finite_diff_check, relative_error};
pub use network::{softmax, softmax_cross_entropy, Network};
pub use spec::{LayerSpec, NetworkSpec, Shape};
