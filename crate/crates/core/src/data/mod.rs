//! Synthetic faces, style filters, PPM I/O and paired datasets.

pub mod dataset;
pub mod face;
pub mod image;
pub mod ppm;
pub mod stylize;

pub use dataset::{
    build_datasets, ingest_directory, load_dataset, make_dataset, write_dataset, Batch, Batcher, DatasetPlan, Manifest,
    ManifestRecord, PairDataset, PairRecord, Split,
};
pub use face::{eye_row, gen_face};
pub use image::{stack_images, unstack_images, Image};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use stylize::{default_seen_styles, default_unseen_styles, stylize, StyleKind, StyleSpec, StyleSplit};
