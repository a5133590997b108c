use std::process::ExitCode;

use rankprompt_core::dataset::DatasetError;
use rankprompt_core::evaluator::EvalError;
use rankprompt_core::fusion::FusionError;
use rankprompt_core::gateway::GatewayError;
use rankprompt_core::optimizer::OptimizeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidScript(_) => CliError::Config(e.to_string()),
            GatewayError::CorruptCache { .. } => CliError::Data(e.to_string()),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            EvalError::Io(io) => CliError::Io(io),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Gateway(g) => g.into(),
            OptimizeError::InvalidConfig(m) => CliError::Config(m),
            OptimizeError::EmptyDataset => CliError::Data(e.to_string()),
            OptimizeError::Io(io) => CliError::Io(io),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Gateway(g) => g.into(),
            FusionError::Eval(ev) => ev.into(),
            FusionError::Optimize(o) => o.into(),
            FusionError::Io(io) => CliError::Io(io),
            FusionError::TooFewExperts(_) | FusionError::InvalidConfig(_) => {
                CliError::Config(e.to_string())
            }
            FusionError::ListParseFailure => CliError::Backend(e.to_string()),
            FusionError::InsufficientInstances { .. } | FusionError::UnknownDomain(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}
