//! Irregular series, the synthetic benchmark, preprocessing and persistence.

mod normalize;
mod series;
mod split;
mod synthetic;

pub use normalize::{fit_normalizer, trim_ranks, Normalizer, DEFAULT_TRIM, STD_FLOOR};
pub use series::{read_dataset, write_dataset, Channel, Dataset, IrregularSeries};
pub use split::{split_condition_target, split_sizes, train_val_test, SplitManifest, SPLIT_RULE};
pub use synthetic::{
    generate_synthetic, smooth, subsample, synthetic_dataset, DenseTrajectory, SyntheticConfig,
};
