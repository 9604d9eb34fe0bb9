use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where teacher velocities come from, written `self`, `ema:<decay>` or
/// `frozen:<checkpoint path>` in configs.
///
/// `ema:0` tracks the student exactly and so behaves like `self`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TeacherSource {
    #[default]
    SelfInstant,
    Ema(f64),
    Frozen(PathBuf),
}

impl FromStr for TeacherSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "self" {
            return Ok(TeacherSource::SelfInstant);
        }
        if let Some(d) = s.strip_prefix("ema:") {
            let decay: f64 = d
                .parse()
                .map_err(|_| Error::config(format!("teacher: bad EMA decay `{d}`")))?;
            if !(0.0..=1.0).contains(&decay) {
                return Err(Error::config(format!(
                    "teacher: EMA decay {decay} outside [0, 1]"
                )));
            }
            return Ok(TeacherSource::Ema(decay));
        }
        if let Some(p) = s.strip_prefix("frozen:") {
            if p.is_empty() {
                return Err(Error::config("teacher: frozen needs a checkpoint path"));
            }
            return Ok(TeacherSource::Frozen(PathBuf::from(p)));
        }
        Err(Error::config(format!(
            "teacher must be `self`, `ema:<decay>` or `frozen:<path>`, got `{s}`"
        )))
    }
}

impl TryFrom<String> for TeacherSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TeacherSource> for String {
    fn from(t: TeacherSource) -> String {
        t.to_string()
    }
}

impl fmt::Display for TeacherSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherSource::SelfInstant => write!(f, "self"),
            TeacherSource::Ema(d) => write!(f, "ema:{d}"),
            TeacherSource::Frozen(p) => write!(f, "frozen:{}", p.display()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for s in ["self", "ema:0.999", "frozen:/tmp/a.fmap"] {
            assert_eq!(s.parse::<TeacherSource>().unwrap().to_string(), s);
        }
        assert!("ema:1.5".parse::<TeacherSource>().is_err());
        assert!("teacher".parse::<TeacherSource>().is_err());
    }
}
