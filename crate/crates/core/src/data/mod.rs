//! Dataset ingestion, the synthetic generator and cross-validation splits.

mod manifest;
mod netpbm;
mod split;
mod synth;

pub use manifest::{
    load_manifest, read_manifest_rows, write_manifest, GradingSample, LabelMap, ManifestRow, Normalization,
    MANIFEST_HEADER,
};
pub use netpbm::{decode_pnm, encode_pnm, read_pnm, write_pnm, Pnm};
pub use split::{kfold_split, Fold};
pub use synth::{joint_table, label_correlation, synth_generate, synth_labels, SynthSpec};
