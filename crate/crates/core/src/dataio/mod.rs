//! Dataset ingestion, synthetic generation, normalization and splits.

mod meta;
mod series;
mod split;
mod synth;
mod ucr;

pub use meta::{
    looks_normalized, read_metadata, resolve_normalization, write_metadata, DatasetMeta, Normalize, METADATA_FILE,
};
pub use series::{z_normalize, Dataset, LabeledSeries};
pub use split::{stratified_kfold, Fold};
pub use synth::{synth_pattern_dataset, SynthConfig};
pub use ucr::{find_ucr_pair, load_ucr_dir, parse_ucr, write_ucr, Delimiter};
