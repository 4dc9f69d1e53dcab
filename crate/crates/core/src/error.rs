use thiserror::Error;

/// Errors raised by the loss engine and its satellites.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("band infeasible: {0}")]
    BandInfeasible(String),

    #[error("enumeration guard exceeded: T + U = {0} > {1}")]
    SizeGuardExceeded(usize, usize),

    #[error("word {0} ({1:?}) has no word pieces")]
    EmptyWordPieces(usize, String),

    #[error("invalid word alignment: {0}")]
    InvalidAlignment(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("decoder received no frames")]
    EmptyInput,

    #[error("cannot aggregate an empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for band infeasibility, including when wrapped with an utterance id.
    pub fn is_band_infeasible(&self) -> bool {
        match self {
            Error::BandInfeasible(_) => true,
            Error::Utterance { source, .. } => source.is_band_infeasible(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
