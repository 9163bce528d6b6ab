use std::fmt;

/// Operation kinds recorded on the tape. Used in diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Matmul,
    MatmulTransposed,
    Add,
    Mul,
    Scale,
    Gelu,
    Exp,
    Rsqrt,
    Softmax,
    Sum,
    RmsNorm,
    Rope,
    Embedding,
    CausalAttention,
    CrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::MatmulTransposed => "matmul_transposed",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Rsqrt => "rsqrt",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::RmsNorm => "rmsnorm",
            OpKind::Rope => "rope",
            OpKind::Embedding => "embedding",
            OpKind::CausalAttention => "causal_attention",
            OpKind::CrossEntropy => "cross_entropy",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: OpKind, detail: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value produced by {op} during {pass} pass")]
    NonFinite { op: OpKind, pass: Pass },

    #[error("format error: {0}")]
    Format(String),

    #[error("loss scale fell below 1 after repeated gradient overflow")]
    LossScaleUnderflow,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: OpKind, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
