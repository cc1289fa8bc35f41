//! Dataset ingestion and synthesis: JSON manifests with relative paths,
//! PNG image/mask IO, deterministic epoch ordering, and the synthetic
//! corpora the desk-scale training checks run on.

pub mod dataset;
pub mod manifest;
pub mod png_io;
pub mod synth;

pub use dataset::{epoch_order, CapDataset, CapSplit, ClsDataset, ClsSplit, Dataset, PretrainDataset, SegDataset, SegSplit};
pub use manifest::{load_dataset, Manifest, TaskKind};
