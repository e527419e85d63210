use thiserror::Error;

use lesionscope::attribution::AttributionError;
use lesionscope::autodiff::GradError;
use lesionscope::evalkit::EvalError;
use lesionscope::netgraph::GraphError;
use lesionscope::tensor::TensorError;
use lesionscope::trainer::TrainError;
use lesionscope::validate::ValidateError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("manifest rows without a mask: {}", .0.join(", "))]
    MissingMasks(Vec<String>),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches the offending path to an IO error.
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}
