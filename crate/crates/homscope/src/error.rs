//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model evaluation, simulation, calibration and estimation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A physical parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two detector channels that cannot form a coincidence (i == j or out of 1..=8).
    #[error("invalid channel pair ({0}, {1})")]
    InvalidChannelPair(u8, u8),

    /// Klyshko calibration is impossible because a heralding channel saw no singles.
    #[error("calibration failed: zero singles on channel {channel}")]
    ZeroSingles { channel: u8 },

    /// A detection efficiency of zero (or below) cannot be divided out.
    #[error("calibration failed: nonpositive efficiency on channel {channel}")]
    ZeroEfficiency { channel: u8 },

    /// A tally with no counts cannot be normalized or fitted.
    #[error("tally has no counts to work with")]
    EmptyTally,

    /// The likelihood carries no delay information (flat, or all counts in one
    /// outcome category).
    #[error("delay estimate is non-identifiable from this tally")]
    NonIdentifiable,

    /// The search window spans several interference fringes and no fringe
    /// branch was supplied; `candidates` lists the refined local optima.
    #[error("ambiguous delay estimate; candidate optima (s): {candidates:?}")]
    Ambiguous { candidates: Vec<f64> },

    /// Not enough estimates for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The scan planner cannot reach the requested precision within its
    /// detuning menu and pair budget.
    #[error("scan planning infeasible: best achievable sigma = {best_sigma_m:.3e} m")]
    Infeasible { best_sigma_m: f64 },

    /// Malformed sample map, calibration document or other artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
