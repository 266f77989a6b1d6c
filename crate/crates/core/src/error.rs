use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver became unstable at step {step}")]
    Instability { step: usize },
    #[error("encoder error: {0}")]
    Encoder(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] scatter_nn::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
