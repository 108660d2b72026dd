use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("invalid fixed-point format: width {width_bits}, fraction {frac_bits}")]
    InvalidFormat { width_bits: u32, frac_bits: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("inconsistent key parameters: {0}")]
    KeyConfig(String),

    #[error("segment width {0} outside 1..=24")]
    SegmentWidth(u32),

    #[error("flag count {flags} does not match element count {elements}")]
    FlagLengthMismatch { flags: usize, elements: usize },

    #[error("compressed stream truncated")]
    Truncated,

    #[error("compressed stream has trailing data")]
    Overlong,

    #[error("corrupt compressed stream: {0}")]
    Corrupt(String),

    #[error("reference encoding is empty; ratio undefined")]
    EmptyMap,

    #[error("model is already obfuscated")]
    DoubleObfuscation,

    #[error("model is not obfuscated")]
    NotObfuscated,

    #[error("group map does not cover the model biases: {0}")]
    GroupCoverage(String),

    #[error("models do not share an architecture: {0}")]
    ArchitectureMismatch(String),

    #[error("Mkey of {0} bits cannot mask any bias")]
    NothingToMask(u32),
}
