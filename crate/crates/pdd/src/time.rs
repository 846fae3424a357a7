//! UTC timestamps and clock sources.
//!
//! Timestamps are whole-second UTC instants rendered in exactly one form,
//! `YYYY-MM-DDThh:mm:ssZ`, so canonical bytes of signed documents never
//! depend on a formatter's precision choices.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A UTC instant with whole-second precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UtcTime {
    secs: i64,
}

impl UtcTime {
    pub fn from_unix_seconds(secs: i64) -> Self {
        Self { secs }
    }

    pub fn unix_seconds(&self) -> i64 {
        self.secs
    }

    /// The calendar date as `(year, month, day)`.
    pub fn date(&self) -> (i64, u32, u32) {
        let days = self.secs.div_euclid(86_400);
        civil_from_days(days)
    }

    /// Date rendered `YYYY_MM_DD`, the stem used by evidence and context ids.
    pub fn date_id(&self) -> String {
        let (y, m, d) = self.date();
        format!("{y:04}_{m:02}_{d:02}")
    }

    /// Date rendered `YYYY.MM.DD`, used in deployed-version strings.
    pub fn date_dotted(&self) -> String {
        let (y, m, d) = self.date();
        format!("{y:04}.{m:02}.{d:02}")
    }

    pub fn parse(s: &str) -> Result<Self, TimeParseError> {
        let b = s.as_bytes();
        if b.len() != 20 || b[4] != b'-' || b[7] != b'-' || b[10] != b'T' {
            return Err(TimeParseError(s.to_string()));
        }
        if b[13] != b':' || b[16] != b':' || b[19] != b'Z' {
            return Err(TimeParseError(s.to_string()));
        }
        let num = |r: std::ops::Range<usize>| -> Result<i64, TimeParseError> {
            s[r].parse::<i64>().map_err(|_| TimeParseError(s.to_string()))
        };
        let (year, month, day) = (num(0..4)?, num(5..7)?, num(8..10)?);
        let (hh, mm, ss) = (num(11..13)?, num(14..16)?, num(17..19)?);
        if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
            return Err(TimeParseError(s.to_string()));
        }
        if hh > 23 || mm > 59 || ss > 59 {
            return Err(TimeParseError(s.to_string()));
        }
        let days = days_from_civil(year, month as u32, day as u32);
        Ok(Self {
            secs: days * 86_400 + hh * 3600 + mm * 60 + ss,
        })
    }
}

impl fmt::Display for UtcTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let days = self.secs.div_euclid(86_400);
        let rem = self.secs.rem_euclid(86_400);
        let (y, m, d) = civil_from_days(days);
        let (hh, mm, ss) = (rem / 3600, (rem % 3600) / 60, rem % 60);
        write!(f, "{y:04}-{m:02}-{d:02}T{hh:02}:{mm:02}:{ss:02}Z")
    }
}

impl Serialize for UtcTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for UtcTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        UtcTime::parse(&s).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid UTC timestamp {0:?}, expected YYYY-MM-DDThh:mm:ssZ")]
pub struct TimeParseError(pub String);

// Civil-date conversions (proleptic Gregorian, days since 1970-01-01).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y.rem_euclid(400);
    let mp = if m > 2 { m - 3 } else { m + 9 } as i64;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// A source of UTC timestamps.
///
/// Sealing, evidence issuance, and ledger appends take a clock so tests and
/// replay runs can pin timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> UtcTime;
}

/// Wall-clock time.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> UtcTime {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        UtcTime::from_unix_seconds(now.as_secs() as i64)
    }
}

/// A pinned clock returning a fixed instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub UtcTime);

impl Clock for FixedClock {
    fn now(&self) -> UtcTime {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_epoch() {
        assert_eq!(UtcTime::from_unix_seconds(0).to_string(), "1970-01-01T00:00:00Z");
    }

    #[test]
    fn round_trips_ledger_style_timestamps() {
        for s in [
            "2026-05-11T00:00:00Z",
            "2026-05-11T00:05:00Z",
            "2026-05-11T00:06:00Z",
            "1999-12-31T23:59:59Z",
            "2000-02-29T12:00:00Z",
        ] {
            let t = UtcTime::parse(s).unwrap();
            assert_eq!(t.to_string(), s);
        }
    }

    #[test]
    fn date_id_matches_evidence_id_stem() {
        let t = UtcTime::parse("2026-05-11T00:00:00Z").unwrap();
        assert_eq!(t.date_id(), "2026_05_11");
        assert_eq!(t.date_dotted(), "2026.05.11");
    }

    #[test]
    fn rejects_malformed_timestamps() {
        for s in ["2026-05-11", "2026-05-11T00:00:00", "2026-13-01T00:00:00Z", "garbage"] {
            assert!(UtcTime::parse(s).is_err(), "accepted {s}");
        }
    }

    #[test]
    fn civil_conversion_round_trips() {
        for days in (-200_000..200_000).step_by(97) {
            let (y, m, d) = civil_from_days(days);
            assert_eq!(days_from_civil(y, m, d), days);
        }
    }
}
