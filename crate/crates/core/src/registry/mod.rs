//! Neuron enumeration, parameter costs and checkpoint files.

mod checkpoint;
pub(crate) mod container;
mod neurons;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint,
    topology_of, AnyCheckpoint, Checkpoint, CheckpointError, FromAnyCheckpoint, LayerSpec,
    RngState, Topology,
};
pub use container::{FormatError, FORMAT_VERSION, MAGIC};
pub use neurons::{enumerate_neurons, NeuronDescriptor, NeuronTable};
