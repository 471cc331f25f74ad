//! Failures mapped to process exit codes.

use std::fmt;

use rtk_core::assign::AssignError;
use rtk_core::corpus::CorpusError;
use rtk_core::evaluation::EvalError;
use rtk_core::extract::ExtractError;
use rtk_core::groupnames::GroupNamesError;
use rtk_core::llm_gateway::GatewayError;
use rtk_core::pipeline::PipelineError;
use rtk_core::timeline::TimelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    /// Bad configuration, flags or input files.
    Config = 2,
    /// The model server failed, or a replay store lacked an answer.
    Upstream = 3,
    /// A model answer could not be used even after the retry.
    Parse = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Code::Config, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::config(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn gateway_code(e: &GatewayError) -> Code {
    match e {
        GatewayError::InvalidRequest(_)
        | GatewayError::ContextBudget { .. }
        | GatewayError::NoUpstream(_)
        | GatewayError::Store { .. } => Code::Config,
        GatewayError::ReplayMiss { .. }
        | GatewayError::RetriesExhausted { .. }
        | GatewayError::Upstream(_)
        | GatewayError::DimensionMismatch { .. } => Code::Upstream,
    }
}

fn extract_code(e: &ExtractError) -> Code {
    match e {
        ExtractError::EmptyReport(_) => Code::Config,
        ExtractError::Gateway(g) => gateway_code(g),
    }
}

fn names_code(e: &GroupNamesError) -> Code {
    match e {
        GroupNamesError::Parse { .. } => Code::Parse,
        GroupNamesError::Gateway(g) => gateway_code(g),
        _ => Code::Config,
    }
}

fn assign_code(e: &AssignError) -> Code {
    match e {
        AssignError::Config(_) | AssignError::MissingContext | AssignError::NoNames(_) => Code::Config,
        AssignError::Embedding(_) => Code::Upstream,
        AssignError::Gateway(g) => gateway_code(g),
    }
}

macro_rules! wrap {
    ($ty:ty, $code:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                let code = $code(&e);
                Self::new(code, e)
            }
        }
    };
}

wrap!(GatewayError, gateway_code);
wrap!(ExtractError, extract_code);
wrap!(GroupNamesError, names_code);
wrap!(AssignError, assign_code);
wrap!(CorpusError, |_: &CorpusError| Code::Config);
wrap!(EvalError, |_: &EvalError| Code::Config);
wrap!(TimelineError, |_: &TimelineError| Code::Config);
wrap!(PipelineError, |e: &PipelineError| match e {
    PipelineError::Extract(x) => extract_code(x),
    PipelineError::Names(x) => names_code(x),
    PipelineError::Assign(x) => assign_code(x),
    PipelineError::Timeline(_) | PipelineError::MissingNames(_) => Code::Config,
});
