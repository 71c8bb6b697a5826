use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor construction, operator kernels, and the tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch, expected {expected} but got {got}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: shapes differ at dim {dim}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        dim: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor shape {shape:?} implies {expected} elements but {got} were supplied")]
    DataLenMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor shape {shape:?} contains a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("conv2d: stride must be >= 1")]
    NonPositiveStride,
    #[error("conv2d: kernel {kernel} exceeds padded input extent {padded} along {dim}")]
    KernelTooLarge {
        dim: &'static str,
        kernel: usize,
        padded: usize,
    },
    #[error("max_pool2d: spatial extents must be even, got {h}x{w}")]
    OddSpatialExtent { h: usize, w: usize },
    #[error("max_unpool2d: index {index} out of range for output of {limit} elements")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("label {label} out of range for {classes} classes (void is {void})")]
    LabelOutOfRange { label: u8, classes: usize, void: u8 },
    #[error("expected a scalar (1-element) tensor, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("value id {id} is not recorded on this tape (tape has {len} entries)")]
    NotOnTape { id: usize, len: usize },
    #[error("grad_check: epsilon {eps} outside (0, 1e-2]")]
    BadEpsilon { eps: f64 },
    #[error("sgd_step: {0}")]
    Optimizer(String),
}

/// Errors raised by dataset generation, loading, and image I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: failed to decode image: {detail}")]
    BadImage { path: PathBuf, detail: String },
    #[error("{path}: label color ({0}, {1}, {2}) not in the class palette", .color[0], .color[1], .color[2])]
    PaletteMismatch { path: PathBuf, color: [u8; 3] },
    #[error("crop {crop}x{crop} larger than frame {h}x{w}")]
    CropTooLarge { crop: usize, h: usize, w: usize },
    #[error("sprite {sw}x{sh} does not fit a {h}x{w} frame")]
    SpriteTooLarge {
        sw: usize,
        sh: usize,
        h: usize,
        w: usize,
    },
    #[error("frame extents {h}x{w} must be divisible by 16")]
    IndivisibleExtents { h: usize, w: usize },
    #[error("dataset manifest {path}: malformed line {line}: {detail}")]
    BadManifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("item index {index} out of range ({len} items)")]
    BadIndex { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Errors raised by the training loop and evaluation harness.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became NaN at step {step} (phase {phase})")]
    NanLoss { step: usize, phase: u8 },
    #[error("variant {variant} needs a prior but the dataset provides none")]
    MissingPrior { variant: String },
    #[error("classifier emits {classifier} channels but the class table has {classes} classes")]
    ClassifierWidthMismatch { classifier: usize, classes: usize },
    #[error("batch items disagree on frame size: {first:?} vs {got:?}")]
    MixedItemSizes { first: Vec<usize>, got: Vec<usize> },
    #[error("parameter {name} has shape {donor:?} in the donor model but {target:?} in the target plan")]
    ShapeConflict {
        name: String,
        donor: Vec<usize>,
        target: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("confusion matrix is empty: no evaluated pixels")]
    EmptyMatrix,
}

/// Errors raised while reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported tensor dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error(
        "checkpoint does not match the requested spec: extra tensors {extra:?}, missing tensors {missing:?}"
    )]
    SpecMismatch {
        extra: Vec<String>,
        missing: Vec<String>,
    },
    #[error("tensor {name} has shape {stored:?} but the target plan expects {expected:?}")]
    ShapeConflict {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
