use thiserror::Error;

/// Assumptions on the invertibility of the step matrices of the Σ-chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Assumption {
    /// Invertibility of N̄₁ = N₁ + Σ Bᵢᵀ P₁ Bᵢ.
    A21,
    /// Step 1 (common-information projection).
    A22,
    /// Step 2 (leader projection).
    A23,
    /// Step 3 (follower projection).
    A24,
    /// Step 4 (full information).
    A25,
}

impl Assumption {
    pub fn label(self) -> &'static str {
        match self {
            Assumption::A21 => "A2.1",
            Assumption::A22 => "A2.2",
            Assumption::A23 => "A2.3",
            Assumption::A24 => "A2.4",
            Assumption::A25 => "A2.5",
        }
    }
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite value at t = {t} in {which}")]
    NonFinite { t: f64, which: String },
    #[error("assumption {which} violated at t = {t} (node {node})")]
    AssumptionViolated { t: f64, node: usize, which: Assumption },
    #[error("degenerate fit: J(eps) does not vary beyond rounding")]
    DegenerateFit,
}

pub type Result<T> = std::result::Result<T, Error>;
