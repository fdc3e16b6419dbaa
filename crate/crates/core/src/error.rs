use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown class id {0}")]
    UnknownLabel(usize),

    #[error("class {0} is not a seen class")]
    UnseenTrainingLabel(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("unknown parameter `{0}` in checkpoint")]
    UnknownParameter(String),

    #[error("checkpoint lacks parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite {0}")]
    NonFinite(Component),

    #[error("non-finite {component} at epoch {epoch}, batch {batch}")]
    Diverged {
        component: Component,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss term named in divergence reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Classification,
    SemanticAlignment,
    CrossGranularity,
    Debias,
    Total,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Classification => "l_cls",
            Component::SemanticAlignment => "l_sem",
            Component::CrossGranularity => "d_kl",
            Component::Debias => "l_deb",
            Component::Total => "total",
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
