use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, pipeline stages, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// A tensor constructor or operation received inconsistent dimensions.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// Input channel count does not match what the kernel expects.
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Kernel window is larger than the padded input.
    KernelExceedsInput {
        kernel: (usize, usize),
        padded: (usize, usize),
    },
    /// Kernel construction arguments are inconsistent.
    InvalidKernel { reason: String },
    /// Channel-group sizes do not sum to the input channel count.
    BadSplit { channels: usize, sum: usize },
    /// Node features must have an even dimension for the axis-split encoding.
    OddNodeDim { dim: usize },
    /// Not enough candidate nodes for the requested dilated selection.
    NeighborBudget {
        k: usize,
        dilation: usize,
        n_nodes: usize,
    },
    /// A node or channel index points outside its container.
    IndexOutOfRange { index: usize, len: usize },
    /// Selection count is outside `1..=channels`.
    SelectOutOfRange { k: usize, channels: usize },
    /// Input values fall outside the operation's valid domain.
    Domain {
        context: &'static str,
        min: f64,
        max: f64,
    },
    /// A non-finite value was produced where outputs must be finite.
    NonFinite { stage: &'static str },
    /// A configuration field violates an invariant.
    InvalidConfig { field: &'static str, reason: String },
    /// The named quantity is a fixed hyperparameter, not a differentiable parameter.
    NotDifferentiable { name: String },
    /// No parameter with this name exists.
    UnknownParameter { name: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Tensor or artifact file is malformed.
    Format {
        context: &'static str,
        reason: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: shape mismatch, expected {expected}, got {got}"),
            Self::ChannelMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected {expected} channels, got {got}"),
            Self::KernelExceedsInput { kernel, padded } => write!(
                f,
                "kernel {}x{} larger than padded input {}x{}",
                kernel.0, kernel.1, padded.0, padded.1
            ),
            Self::InvalidKernel { reason } => write!(f, "invalid kernel: {reason}"),
            Self::BadSplit { channels, sum } => write!(
                f,
                "split groups sum to {sum} but input has {channels} channels"
            ),
            Self::OddNodeDim { dim } => {
                write!(f, "node feature dimension {dim} must be even")
            }
            Self::NeighborBudget {
                k,
                dilation,
                n_nodes,
            } => write!(
                f,
                "dilated selection needs k*d < n_nodes, got k={k}, d={dilation}, n_nodes={n_nodes}"
            ),
            Self::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Self::SelectOutOfRange { k, channels } => {
                write!(f, "selection count {k} out of range for {channels} channels")
            }
            Self::Domain { context, min, max } => write!(
                f,
                "{context}: input range [{min}, {max}] outside valid domain"
            ),
            Self::NonFinite { stage } => write!(f, "non-finite value detected in {stage}"),
            Self::InvalidConfig { field, reason } => {
                write!(f, "invalid config field `{field}`: {reason}")
            }
            Self::NotDifferentiable { name } => {
                write!(f, "`{name}` is a fixed hyperparameter with no gradient")
            }
            Self::UnknownParameter { name } => write!(f, "unknown parameter `{name}`"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
            Self::Format { context, reason } => write!(f, "format error in {context}: {reason}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
