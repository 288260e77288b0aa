use normint::eval::EvalError;
use normint::mesh::MeshError;
use normint::normal_io::NormalIoError;
use normint::pipeline::PipelineError;
use normint::remesh::RemeshError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<NormalIoError> for CliError {
    fn from(e: NormalIoError) -> Self {
        match e {
            NormalIoError::Domain { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::EmptyMask => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Mesh(m) | PipelineError::Remesh(RemeshError::Mesh(m)) => m.into(),
            PipelineError::Remesh(r) => CliError::Config(r.to_string()),
            PipelineError::Integrate(i) => CliError::Numerical(i.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scene(s) => s.into(),
            EvalError::Pipeline(p) => p.into(),
            EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::EmptySweep | EvalError::DomainMismatch { .. } => CliError::Config(e.to_string()),
            EvalError::TooFewSamples(_) | EvalError::DegenerateFit | EvalError::Coverage { .. } => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
