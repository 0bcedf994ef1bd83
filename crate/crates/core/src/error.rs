use std::path::PathBuf;

use crate::linalg::SvdTriple;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        last: Box<SvdTriple>,
    },

    #[error("input too large for dense oracle: {rows}x{cols} (limit {limit})")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    #[error("constraint Gram matrix is singular: constraints {first} (site {first_site}) and {second} (site {second_site}) are linearly dependent")]
    RankDeficient {
        first: usize,
        second: usize,
        first_site: usize,
        second_site: usize,
    },

    #[error("assumption regime violated: {0}")]
    NotSurpriseValid(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
