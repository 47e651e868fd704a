use thiserror::Error;

/// Errors raised across the estimation, design and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("pattern parse error at line {line}: {msg}")]
    PatternParse { line: usize, msg: String },

    #[error("no full-rank realization found after {attempts} attempts")]
    RankDeficient { attempts: usize },

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("empty sensor graph")]
    EmptyGraph,

    #[error("no feasible starting point for the gain LMIs")]
    Infeasible,

    #[error("gain design did not converge after {iterations} iterations (spectral radius {rho:.6})")]
    NotConverged { iterations: usize, rho: f64 },

    #[error("thresholds unavailable: spectral norm b = {b:.6} is not below 1")]
    ThresholdUnavailable { b: f64 },

    #[error("sensor {sensor} measures state {state}, the sole member of its parent SCC; no replacement exists")]
    Unrecoverable { sensor: usize, state: usize },

    #[error("could not restore strong connectivity of the sensor network")]
    NetworkRepair,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
