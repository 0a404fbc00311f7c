use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Scanner field strength of a case's input scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldStrength {
    #[serde(rename = "1.5")]
    T1_5,
    #[serde(rename = "3.0")]
    T3,
}

impl FieldStrength {
    pub const ALL: [FieldStrength; 2] = [FieldStrength::T1_5, FieldStrength::T3];

    pub fn tesla(self) -> f64 {
        match self {
            FieldStrength::T1_5 => 1.5,
            FieldStrength::T3 => 3.0,
        }
    }
}

impl fmt::Display for FieldStrength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldStrength::T1_5 => "1.5",
            FieldStrength::T3 => "3.0",
        })
    }
}

impl FromStr for FieldStrength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().trim_end_matches(['T', 't']) {
            "1.5" => Ok(FieldStrength::T1_5),
            "3" | "3.0" => Ok(FieldStrength::T3),
            other => Err(Error::invalid(
                "field_strength",
                format!("unknown field strength `{other}`"),
            )),
        }
    }
}

/// Parses a tesla value, rejecting anything but 1.5 and 3.
impl TryFrom<f64> for FieldStrength {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self, Error> {
        if t == 1.5 {
            Ok(FieldStrength::T1_5)
        } else if t == 3.0 {
            Ok(FieldStrength::T3)
        } else {
            Err(Error::invalid(
                "field_strength",
                format!("unknown field strength {t}"),
            ))
        }
    }
}
