use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label out of range: {0}")]
    InvalidLabel(String),

    #[error("cannot decode an angle from a zero (sin, cos) pair")]
    DegenerateAngle,

    #[error("negative variance in batch-norm parameters")]
    NegativeVariance,

    #[error("operation requires a non-static SGM")]
    StaticSgm,

    #[error("operation requires a static SGM")]
    NonStaticSgm,

    #[error("no SGM attached to trainable layer {0}")]
    MissingSgm(usize),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("no positive samples to evaluate")]
    NoPositives,

    #[error("offset {offset} px is outside the {class} band")]
    OffsetOutOfBand { offset: f32, class: &'static str },
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
