//! Exit-code classification of pipeline errors.

use std::fmt;
use std::io::ErrorKind;

use capguide::classifier::ClassifierError;
use capguide::corpus::CorpusError;
use capguide::guidance::GuidanceError;
use capguide::io::IoError;
use capguide::lm::LmError;
use capguide::metrics::MetricsError;
use capguide::tokenizer::TokenizerError;
use capguide::trainer::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad flags, bad config values, missing inputs.
    Usage = 2,
    /// Inputs exist but are malformed or inconsistent.
    Data = 3,
    /// A loss or activation went non-finite.
    Numeric = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Usage, error: anyhow::anyhow!("{msg}") }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Data, error: anyhow::anyhow!("{msg}") }
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Numeric, error: anyhow::anyhow!("{msg}") }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self { kind: self.kind, error: self.error.context(what.to_string()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // thiserror messages often embed their source already
        let mut shown = self.error.to_string();
        write!(f, "{shown}")?;
        for cause in self.error.chain().skip(1) {
            let c = cause.to_string();
            if !shown.contains(&c) {
                write!(f, ": {c}")?;
                shown = c;
            }
        }
        Ok(())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_kind(e: &IoError) -> ExitKind {
    match e {
        IoError::Io { source, .. } if source.kind() == ErrorKind::NotFound => ExitKind::Usage,
        _ => ExitKind::Data,
    }
}

fn lm_kind(e: &LmError) -> ExitKind {
    match e {
        LmError::Config(_) => ExitKind::Usage,
        LmError::Numeric(capguide::ndiff::NdError::NonFinite { .. }) => ExitKind::Numeric,
        LmError::Io(io) => io_kind(io),
        _ => ExitKind::Data,
    }
}

fn clf_kind(e: &ClassifierError) -> ExitKind {
    match e {
        ClassifierError::Config(_) => ExitKind::Usage,
        ClassifierError::Numeric(capguide::ndiff::NdError::NonFinite { .. }) => ExitKind::Numeric,
        ClassifierError::Io(io) => io_kind(io),
        _ => ExitKind::Data,
    }
}

macro_rules! classify {
    ($t:ty, $e:ident => $kind:expr) => {
        impl From<$t> for CliError {
            fn from($e: $t) -> Self {
                let kind = $kind;
                Self { kind, error: anyhow::Error::new($e) }
            }
        }
    };
}

classify!(IoError, e => io_kind(&e));
classify!(LmError, e => lm_kind(&e));
classify!(ClassifierError, e => clf_kind(&e));
classify!(CorpusError, _e => ExitKind::Usage);
classify!(TokenizerError, e => match &e {
    TokenizerError::Io(io) if io.kind() == ErrorKind::NotFound => ExitKind::Usage,
    _ => ExitKind::Data,
});
classify!(TrainError, e => match &e {
    TrainError::Config(_) => ExitKind::Usage,
    TrainError::Data(_) | TrainError::TooLong { .. } => ExitKind::Data,
    TrainError::NonFinite { .. } | TrainError::Numeric(_) => ExitKind::Numeric,
    TrainError::Lm(l) => lm_kind(l),
    TrainError::Classifier(c) => clf_kind(c),
});
classify!(GuidanceError, e => match &e {
    GuidanceError::Config(_) | GuidanceError::PrefixTooLong { .. } | GuidanceError::VocabMismatch { .. } => ExitKind::Usage,
    GuidanceError::EmptyContext => ExitKind::Data,
    GuidanceError::NonFinite { .. } | GuidanceError::Numeric(_) | GuidanceError::WeightsChanged { .. } => ExitKind::Numeric,
    GuidanceError::Lm(l) => lm_kind(l),
    GuidanceError::Classifier(c) => clf_kind(c),
});
classify!(MetricsError, e => match &e {
    MetricsError::LengthMismatch { .. } => ExitKind::Usage,
    MetricsError::Classifier(c) => clf_kind(c),
    _ => ExitKind::Data,
});
classify!(serde_json::Error, _e => ExitKind::Usage);
