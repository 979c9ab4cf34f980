//! Error type shared by all modules of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied parameter or configuration value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Kron reduction could not be carried out (singular load block or
    /// singular augmented matrix).
    #[error("kron reduction failed: {0}")]
    KronReduction(String),

    /// Model assembly violated a structural assumption.
    #[error("model assembly failed: {0}")]
    Assembly(String),

    /// Random model synthesis exhausted its resampling budget.
    #[error("model synthesis failed after {attempts} attempts: {diagnostic}")]
    Synthesis { attempts: usize, diagnostic: String },

    /// The open-loop state matrix does not have the expected single zero
    /// eigenvalue with all remaining eigenvalues in the left half plane.
    #[error("consensus structure violated: {0}")]
    ConsensusStructure(String),

    /// Riccati solve failed (imaginary-axis Hamiltonian eigenvalues,
    /// wrong stable count, or residual above tolerance).
    #[error("riccati solve failed: {0}")]
    Riccati(String),

    /// Eigenvalue/eigenvector computation failed or did not converge.
    #[error("spectrum computation failed: {0}")]
    Spectrum(String),

    /// Lyapunov equation solve failed.
    #[error("lyapunov solve failed: {0}")]
    Lyapunov(String),

    /// Low-rank Gramian truncation produced an indefinite leading block.
    #[error("gramian truncation failed: {0}")]
    Truncation(String),

    /// Invalid clustering plan (empty, overlapping, or non-covering sets,
    /// or zero within-cluster weight).
    #[error("invalid clustering plan: {0}")]
    Plan(String),

    /// Dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A stability precondition does not hold.
    #[error("stability requirement violated: {0}")]
    Stability(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    /// The CLI maps these to exit code 2, everything else to 3.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Plan(_) | Error::Dimension(_) | Error::Json(_)
        )
    }
}
