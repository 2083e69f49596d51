//! Millisecond-precision UTC timestamps.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};

/// Milliseconds since the Unix epoch, restricted to years 0000..=9999 so that
/// every value has exactly one RFC 3339 rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimestampError {
    #[error("invalid RFC 3339 timestamp {0:?}")]
    Parse(String),
    #[error("timestamp {0:?} has sub-millisecond precision")]
    SubMillisecond(String),
    #[error("timestamp {0} ms is outside years 0000..=9999")]
    OutOfRange(i64),
}

impl Timestamp {
    /// 0000-01-01T00:00:00.000Z
    pub const MIN: Timestamp = Timestamp(-62_167_219_200_000);
    /// 9999-12-31T23:59:59.999Z. Used as the "close everything" watermark.
    pub const MAX: Timestamp = Timestamp(253_402_300_799_999);
    pub const EPOCH: Timestamp = Timestamp(0);

    pub fn from_millis(ms: i64) -> Result<Self, TimestampError> {
        if (Self::MIN.0..=Self::MAX.0).contains(&ms) {
            Ok(Timestamp(ms))
        } else {
            Err(TimestampError::OutOfRange(ms))
        }
    }

    /// Clamps into the representable range.
    pub fn saturating_from_millis(ms: i64) -> Self {
        Timestamp(ms.clamp(Self::MIN.0, Self::MAX.0))
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn checked_add_ms(self, delta: i64) -> Option<Self> {
        self.0.checked_add(delta).and_then(|ms| Self::from_millis(ms).ok())
    }

    pub fn saturating_add_ms(self, delta: i64) -> Self {
        Self::saturating_from_millis(self.0.saturating_add(delta))
    }

    pub fn now() -> Self {
        Self::saturating_from_millis(Utc::now().timestamp_millis())
    }

    pub fn parse(text: &str) -> Result<Self, TimestampError> {
        let parsed = DateTime::parse_from_rfc3339(text)
            .map_err(|_| TimestampError::Parse(text.to_string()))?;
        if parsed.timestamp_subsec_nanos() % 1_000_000 != 0 {
            return Err(TimestampError::SubMillisecond(text.to_string()));
        }
        Self::from_millis(parsed.timestamp_millis())
    }

    /// `YYYY-MM-DDTHH:MM:SS.mmmZ`
    pub fn to_rfc3339(self) -> String {
        DateTime::<Utc>::from_timestamp_millis(self.0)
            .expect("range checked at construction")
            .to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

pub const MS_PER_SECOND: i64 = 1_000;
pub const MS_PER_MINUTE: i64 = 60 * MS_PER_SECOND;
pub const MS_PER_HOUR: i64 = 60 * MS_PER_MINUTE;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;
pub const MS_PER_WEEK: i64 = 7 * MS_PER_DAY;
