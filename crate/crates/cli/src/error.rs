use std::fmt;

use promptrag::config::ConfigError;
use promptrag::embedders::EmbedError;
use promptrag::encoder::EncodeError;
use promptrag::evalharness::EvalError;
use promptrag::pipeline::StageError;
use promptrag::promptbank::BankError;
use promptrag::rag::{AnswerError, RagError};
use promptrag::trainer::TrainError;
use promptrag::vecindex::IndexError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Config = 2,
    Io = 3,
    Validation = 4,
    Backend = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(Exit::Io, format!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> i32 {
        self.exit as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn class<E: fmt::Display>(exit: Exit) -> impl Fn(E) -> CliError {
    move |e| CliError::new(exit, e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        class(Exit::Config)(e)
    }
}

fn embed_exit(e: &EmbedError) -> Exit {
    match e {
        EmbedError::ProviderUnavailable(_) => Exit::Backend,
        EmbedError::InvalidConfig(_) => Exit::Config,
        EmbedError::Batch { source, .. } => embed_exit(source),
        _ => Exit::Validation,
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        class(embed_exit(&e))(e)
    }
}

fn encode_exit(e: &EncodeError) -> Exit {
    match e {
        EncodeError::InvalidConfig(_) => Exit::Config,
        EncodeError::Embed(inner) => embed_exit(inner),
        _ => Exit::Validation,
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        class(encode_exit(&e))(e)
    }
}

fn index_exit(e: &IndexError) -> Exit {
    match e {
        IndexError::ChecksumMismatch { .. }
        | IndexError::VersionMismatch { .. }
        | IndexError::IoFailure { .. }
        | IndexError::Malformed(_) => Exit::Io,
        _ => Exit::Validation,
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        class(index_exit(&e))(e)
    }
}

fn bank_exit(e: &BankError) -> Exit {
    match e {
        BankError::ChecksumMismatch { .. }
        | BankError::VersionMismatch { .. }
        | BankError::Io { .. }
        | BankError::Malformed(_) => Exit::Io,
        BankError::InvalidConfig(_) => Exit::Config,
        _ => Exit::Validation,
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        class(bank_exit(&e))(e)
    }
}

fn stage_exit(e: &StageError) -> Exit {
    match e {
        StageError::Setup(_) => Exit::Config,
        StageError::Embed(e) => embed_exit(e),
        StageError::Bank(e) => bank_exit(e),
        StageError::Encode(e) => encode_exit(e),
        StageError::Retrieval(e) => index_exit(e),
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        class(stage_exit(&e))(e)
    }
}

fn train_exit(e: &TrainError) -> Exit {
    match e {
        TrainError::InvalidConfig(_) | TrainError::Parse(_) => Exit::Config,
        TrainError::Io { .. } => Exit::Io,
        TrainError::Embed(e) => embed_exit(e),
        TrainError::Encode(e) => encode_exit(e),
        TrainError::Bank(e) => bank_exit(e),
        _ => Exit::Validation,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        class(train_exit(&e))(e)
    }
}

fn eval_exit(e: &EvalError) -> Exit {
    match e {
        EvalError::InvalidConfig(_) => Exit::Config,
        EvalError::UnknownTruthId(_) => Exit::Validation,
        EvalError::Cell { source, .. } | EvalError::Stage(source) => stage_exit(source),
        EvalError::Train(e) => train_exit(e),
        EvalError::Bank(e) => bank_exit(e),
        EvalError::Ablation { source, .. } => eval_exit(source),
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        class(eval_exit(&e))(e)
    }
}

fn rag_exit(e: &RagError) -> Exit {
    match e {
        RagError::Config(_) => Exit::Config,
        RagError::EmptyQuery | RagError::EmptyPrompt => Exit::Validation,
        RagError::BackendUnavailable { .. }
        | RagError::BackendRejected { .. }
        | RagError::Timeout { .. }
        | RagError::MalformedResponse(_) => Exit::Backend,
    }
}

impl From<RagError> for CliError {
    fn from(e: RagError) -> Self {
        class(rag_exit(&e))(e)
    }
}

impl From<AnswerError> for CliError {
    fn from(e: AnswerError) -> Self {
        let exit = match &e {
            AnswerError::Pipeline(s) => stage_exit(s),
            AnswerError::Context(r) | AnswerError::Generation(r) => rag_exit(r),
        };
        class(exit)(e)
    }
}
