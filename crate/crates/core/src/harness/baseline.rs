use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Reference policies for comparison with trained agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Uniform random action per slice.
    Random,
    /// Always `floor(C / num_slices / chunk) * chunk` PRBs.
    StaticEqual,
    /// `ceil(d(t+1) / chunk) * chunk`, reading the future demand.
    Oracle,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown baseline kind {0:?} (expected random, static or oracle)")]
pub struct UnknownBaseline(pub String);

impl FromStr for BaselineKind {
    type Err = UnknownBaseline;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "static" | "static_equal" => Ok(Self::StaticEqual),
            "oracle" => Ok(Self::Oracle),
            other => Err(UnknownBaseline(other.to_string())),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::StaticEqual => "static",
            Self::Oracle => "oracle",
        })
    }
}

/// Action index of the static equal split.
pub(crate) fn static_equal_action(capacity: u32, chunk: u32, num_slices: usize) -> usize {
    (capacity / num_slices as u32 / chunk) as usize
}

/// Action index covering `demand` with the fewest chunks.
pub(crate) fn oracle_action(demand: u32, chunk: u32) -> usize {
    demand.div_ceil(chunk) as usize
}
