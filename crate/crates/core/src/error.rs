use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Foreground or background side of a partition is empty.
    #[error("partition has an empty {side} side")]
    EmptyPartitionSide { side: &'static str },

    /// The jittered box collapsed to zero area after clamping.
    #[error("degenerate RoI box {0:?}")]
    DegenerateRoi((i64, i64, i64, i64)),

    #[error("mask is single-valued; no boundary exists")]
    SingleValuedMask,

    #[error("invalid class id {id} (num classes {num_classes})")]
    InvalidClass { id: usize, num_classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing ground-truth mask for instance {0}")]
    MissingMask(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
