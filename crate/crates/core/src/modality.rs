use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Imaging spectrum of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Ir];

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Ir,
            Modality::Ir => Modality::Rgb,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Ir => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, Error> {
        match tag {
            0 => Ok(Modality::Rgb),
            1 => Ok(Modality::Ir),
            t => Err(Error::Format(format!("unknown modality tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "visible" => Ok(Modality::Rgb),
            "ir" | "infrared" | "thermal" => Ok(Modality::Ir),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}
