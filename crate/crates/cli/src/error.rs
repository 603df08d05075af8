use std::fmt;

use statute_core::corpus::CorpusError;
use statute_core::embeddings::EmbedError;

/// A problem with the invocation or its inputs rather than with the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// Exit code for a failed command: 1 when the input was at fault, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let user = err.chain().any(|e| {
        e.is::<UserError>()
            || e.is::<CorpusError>()
            || matches!(
                e.downcast_ref::<EmbedError>(),
                Some(EmbedError::MissingText(_) | EmbedError::UnknownCase(_) | EmbedError::DimensionMismatch { .. })
            )
    });
    if user {
        1
    } else {
        2
    }
}

macro_rules! user_bail {
    ($($t:tt)*) => { return Err($crate::error::UserError(format!($($t)*)).into()) };
}
pub(crate) use user_bail;
