use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Agent indices in error messages are 1-based, matching the external formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph must contain at least one agent")]
    EmptyGraph,

    #[error("invalid edge ({0}, {1}): {2}")]
    InvalidEdge(usize, usize, String),

    #[error("graph is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<usize>>),

    #[error("weight matrix rejected: {0}")]
    InvalidWeights(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("objective rejected: {0}")]
    InvalidObjective(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("protocol violation at agent {agent}, round {round}: {detail}")]
    Protocol {
        agent: usize,
        round: usize,
        detail: String,
    },

    #[error("non-finite value at agent {agent}, iteration {iter}")]
    NonFinite { agent: usize, iter: usize },

    #[error("newton solver did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iters: usize, grad_norm: f64 },

    #[error("trace rejected: {0}")]
    Trace(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

fn format_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| {
            let ids: Vec<String> = c.iter().map(|i| (i + 1).to_string()).collect();
            format!("{{{}}}", ids.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
