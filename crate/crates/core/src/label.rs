use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Binary class of a frame. Index 0 is real, index 1 is fake; "fake" is the
/// positive class for F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

pub const NUM_CLASSES: usize = 2;

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Self, Error> {
        match index {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::Label(other)),
        }
    }

    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        match self {
            Label::Real => [1.0, 0.0],
            Label::Fake => [0.0, 1.0],
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "pristine" | "0" => Ok(Label::Real),
            "fake" | "deepfake" | "1" => Ok(Label::Fake),
            other => Err(Error::Config(format!("unknown label '{other}'"))),
        }
    }
}
