pub mod fold;
pub mod metrics;
pub mod optim;
pub mod stats;

pub use fold::{
    cross_entropy, evaluate, loso_split, run_loso, train_fold, EpochRecord, Evaluation, Fold, FoldResult,
    TrainConfig, TrainedFold,
};
pub use optim::{Adam, PlateauScheduler};
pub use stats::{aggregate_folds, welch_t_test, Aggregate, WelchTest};
