use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capacity exceeded ({resource}): need {needed}, have {available}")]
    Capacity {
        resource: String,
        needed: u64,
        available: u64,
    },

    #[error(
        "bank capacity exhausted: codebook {codebook_rows} + index {index_rows} + buffer {buffer_rows} rows > {rows_per_bank}"
    )]
    BankFull {
        codebook_rows: u64,
        index_rows: u64,
        buffer_rows: u64,
        rows_per_bank: u64,
    },

    #[error("protocol violation at command {index} on channel {channel}: {reason}")]
    Protocol {
        channel: usize,
        index: usize,
        reason: String,
    },

    #[error(transparent)]
    Core(#[from] aqpim_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
