use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("symbol index {index} outside [-{max}, {max}]")]
    Range { index: i64, max: i64 },

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("training diverged at step {step} (loss {loss}, rate {rate_bpp} bpp, mse {mse})")]
    Training {
        step: usize,
        loss: f64,
        rate_bpp: f64,
        mse: f64,
    },

    #[error("corrupt stream at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },

    #[error("incompatible stream: {0}")]
    Incompatible(String),

    #[error("no PSNR overlap between curves ({0})")]
    NoOverlap(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
