use epigraph_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("config: {0}")]
    Config(String),
    #[error("placement infeasible after {attempts} attempts (arena too crowded)")]
    PlacementInfeasible { attempts: usize },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    NoBracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
