use std::path::PathBuf;

use profproj_core::bma::BmaError;
use profproj_core::impute::ImputeError;
use profproj_core::lgcm::GrowthError;
use profproj_core::panel::PanelError;
use profproj_core::project::ProjectError;
use profproj_core::score::ScoreError;
use thiserror::Error;

/// Pipeline failure, classified by exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Output { .. } => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }

    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Output { path: path.into(), source }
    }
}

impl From<PanelError> for PipelineError {
    fn from(e: PanelError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ImputeError> for PipelineError {
    fn from(e: ImputeError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<GrowthError> for PipelineError {
    fn from(e: GrowthError) -> Self {
        match e {
            GrowthError::NotPositiveDefinite(_) => PipelineError::Numerical(e.to_string()),
            GrowthError::InvalidData(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<BmaError> for PipelineError {
    fn from(e: BmaError) -> Self {
        match e {
            BmaError::RankDeficient(_) => PipelineError::Numerical(e.to_string()),
            BmaError::TooManyPredictors { .. } | BmaError::InvalidPrior(_) | BmaError::InvalidConfig(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ScoreError> for PipelineError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::TooFewDraws { .. } => PipelineError::Config(e.to_string()),
            ScoreError::BadShape => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<ProjectError> for PipelineError {
    fn from(e: ProjectError) -> Self {
        match e {
            ProjectError::Bma(b) => b.into(),
            ProjectError::NotInFuture { .. } | ProjectError::NoLoading(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Config(format!("writing CSV output: {e}"))
    }
}
