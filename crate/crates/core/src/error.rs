use std::fmt;

/// Errors produced by packing, kernels, and file IO.
#[derive(Debug)]
pub enum Error {
    /// Matrix or plan dimensions are inconsistent or zero.
    DimMismatch(String),
    /// More workers requested than column blocks available to partition.
    OverPartitioned {
        workers: usize,
        blocks: usize,
    },
    /// A partition start is not aligned to a metadata word boundary.
    UnalignedPartition(usize),
    /// Bitmap popcount and value count disagree.
    CorruptTensor(String),
    /// Decompression ran past the end of the value stream.
    ExhaustedValues,
    /// Tensor was packed for a different worker count than the plan uses.
    RepartitionRequired {
        packed: usize,
        plan: usize,
    },
    /// Non-finite value where a finite one is required.
    NonFinite,
    /// Vector-path group count outside the supported 1..=8 range.
    UnsupportedGroupCount(usize),
    /// Attention requested with an empty cache.
    NoContext,
    /// Inner dimension exceeds the bound asserted for INT32 accumulation.
    InnerDimTooLarge(usize),
    /// File does not start with the expected magic bytes.
    BadMagic([u8; 4]),
    /// File version not understood by this build.
    BadVersion(u8),
    /// Unknown dtype code in a file header.
    BadDtype(u8),
    /// Stream ended before the declared contents (truncation).
    Truncated,
    /// Malformed input file contents.
    MalformedInput(String),
    /// Kernel output disagreed with its reference; timing must not proceed.
    Validation(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::OverPartitioned { workers, blocks } => write!(
                f,
                "over-partitioned: {workers} workers for {blocks} column blocks"
            ),
            Error::UnalignedPartition(bit) => {
                write!(f, "unaligned partition start at bit {bit}")
            }
            Error::CorruptTensor(msg) => write!(f, "corrupt tensor: {msg}"),
            Error::ExhaustedValues => write!(f, "exhausted values during decompression"),
            Error::RepartitionRequired { packed, plan } => write!(
                f,
                "repartition required: tensor packed for {packed} workers, plan uses {plan}"
            ),
            Error::NonFinite => write!(f, "non-finite input"),
            Error::UnsupportedGroupCount(g) => write!(f, "unsupported group count {g}"),
            Error::NoContext => write!(f, "no context: cache holds no tokens"),
            Error::InnerDimTooLarge(k) => {
                write!(f, "inner dimension {k} exceeds INT32 accumulation bound")
            }
            Error::BadMagic(m) => write!(f, "bad magic {m:?}"),
            Error::BadVersion(v) => write!(f, "unsupported version {v}"),
            Error::BadDtype(d) => write!(f, "unknown dtype code {d}"),
            Error::Truncated => write!(f, "truncation: stream ended early"),
            Error::MalformedInput(msg) => write!(f, "malformed input file: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        // Short reads surface as UnexpectedEof; report them as truncation.
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
