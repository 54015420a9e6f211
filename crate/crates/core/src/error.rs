use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("infeasible equilibrium: {0}")]
    Infeasible(String),

    #[error("steady state is not congested: {0}")]
    NotCongested(String),

    #[error("kernel sweeps did not converge after {iterations} iterations (last sweep difference {last_diff:e}, tol {tol:e})")]
    NoConvergence {
        iterations: usize,
        last_diff: f64,
        tol: f64,
    },

    #[error("characteristic of component {component} leaves the domain without boundary data at node ({i}, {j})")]
    Characteristic { component: usize, i: usize, j: usize },

    #[error("state blow-up at t = {time:.3} s, node {node}: {detail}")]
    BlowUp {
        time: f64,
        node: usize,
        detail: String,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Invalid { .. } => "invalid",
            Error::Infeasible(_) => "infeasible",
            Error::NotCongested(_) => "not_congested",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Characteristic { .. } => "characteristic",
            Error::BlowUp { .. } => "blow_up",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Stage { source, .. } => source.kind(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
