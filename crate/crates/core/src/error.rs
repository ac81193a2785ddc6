use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("numeric error in layer {layer}: {message}")]
    Numeric { layer: usize, message: String },

    #[error("training diverged at step {step}: loss {loss:.4} stayed above 10x the initial loss {initial:.4}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// Maps a serde_json error onto a byte offset into `input`.
    pub(crate) fn from_json(err: &serde_json::Error, input: &[u8]) -> Self {
        let offset = line_col_to_offset(input, err.line(), err.column());
        Error::parse(offset, err.to_string())
    }
}

fn line_col_to_offset(input: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, &b) in input.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(input.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_offsets_point_into_the_input() {
        let input = b"{\n  \"a\": tru }";
        let err = serde_json::from_slice::<serde_json::Value>(input).unwrap_err();
        match Error::from_json(&err, input) {
            Error::Parse { offset, .. } => assert!(offset >= 9 && offset <= input.len()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
