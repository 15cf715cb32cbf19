//! Dataset loading, checkpoint persistence, and the synthetic phantom
//! generator that stands in for clinical data.

mod checkpoint;
mod dataset;
pub mod pgm;
mod phantom;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{load_dataset, write_dataset, DatasetEntry, SplitTag};
pub use phantom::{
    generate_benchmark_dataset, generate_phantom, PhantomParams, SubjectAnatomy, PHANTOM_SIZE,
};
