//! Semantic versions and dependency version ranges.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A strict MAJOR.MINOR.PATCH version. No pre-release or build metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemVer {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl SemVer {
    pub const fn new(major: u64, minor: u64, patch: u64) -> Self {
        Self { major, minor, patch }
    }
}

impl fmt::Display for SemVer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl FromStr for SemVer {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('.');
        let mut next = || -> Result<u64, VersionError> {
            let part = parts.next().ok_or_else(|| VersionError(s.to_string()))?;
            // Digits only: u64::from_str would also accept a leading '+'.
            if part.is_empty()
                || !part.bytes().all(|b| b.is_ascii_digit())
                || (part.len() > 1 && part.starts_with('0'))
            {
                return Err(VersionError(s.to_string()));
            }
            part.parse::<u64>().map_err(|_| VersionError(s.to_string()))
        };
        let v = SemVer::new(next()?, next()?, next()?);
        if parts.next().is_some() {
            return Err(VersionError(s.to_string()));
        }
        Ok(v)
    }
}

impl Serialize for SemVer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SemVer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid version {0:?}, expected MAJOR.MINOR.PATCH")]
pub struct VersionError(pub String);

/// An inclusive-lower, exclusive-upper version range, written
/// `>=X.Y.Z <A.B.C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VersionRange {
    pub lower: SemVer,
    pub upper: SemVer,
}

impl VersionRange {
    pub fn new(lower: SemVer, upper: SemVer) -> Result<Self, RangeError> {
        if lower >= upper {
            return Err(RangeError::Empty { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, v: SemVer) -> bool {
        self.lower <= v && v < self.upper
    }
}

impl fmt::Display for VersionRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, ">={} <{}", self.lower, self.upper)
    }
}

impl FromStr for VersionRange {
    type Err = RangeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let lower = parts
            .next()
            .and_then(|p| p.strip_prefix(">="))
            .ok_or_else(|| RangeError::Syntax(s.to_string()))?;
        let upper = parts
            .next()
            .and_then(|p| p.strip_prefix('<'))
            .ok_or_else(|| RangeError::Syntax(s.to_string()))?;
        if parts.next().is_some() {
            return Err(RangeError::Syntax(s.to_string()));
        }
        let lower: SemVer = lower.parse().map_err(|_| RangeError::Syntax(s.to_string()))?;
        let upper: SemVer = upper.parse().map_err(|_| RangeError::Syntax(s.to_string()))?;
        VersionRange::new(lower, upper)
    }
}

impl Serialize for VersionRange {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for VersionRange {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum RangeError {
    #[error("invalid version range {0:?}, expected \">=X.Y.Z <A.B.C\"")]
    Syntax(String),
    #[error("empty version range: lower {lower} must be below upper {upper}")]
    Empty { lower: SemVer, upper: SemVer },
}
