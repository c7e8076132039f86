use crate::sim::SimTime;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed scenario file: {0}")]
    Parse(#[from] toml::de::Error),

    /// A runtime invariant was violated while processing an event.
    #[error("protocol violation at t={time}: {message}")]
    Protocol {
        time: SimTime,
        message: String,
        /// The most recent events before the violation, oldest first.
        trace: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
