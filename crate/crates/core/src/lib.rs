//! Segmentation models that fuse a scene prior — an earlier frame of the
//! same scene — with the current frame, plus everything needed to train and
//! score them: a small autodiff tape over deterministic CPU kernels, an
//! encoder-decoder backbone in four fusion variants, confusion-matrix
//! metrics, synthetic and on-disk datasets, and checkpointing.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod grad_check;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, RngState};
pub use dataset::{
    default_class_table, generate_synthetic, ClassGroup, ClassTable, Dataset, LabeledFramePair,
    MemoryDataset, PairMeta,
};
pub use error::{CheckpointError, DataError, TensorError, TrainError};
pub use grad_check::{grad_check, grad_check_multi, GradCheckReport};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use models::{build_model, fusion_forward, FusionParams, Model, ModelSpec, ParamRow, Variant};
pub use optim::Sgd;
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::{Dtype, IndexMap, IntTensor, Scalar, Tensor, VOID};
pub use train::{
    evaluate, finetune_from, log_to_csv, predict_pair, train, train_with_progress,
    FinetuneReport, TrainConfig, TrainLogRow, TrainState,
};
