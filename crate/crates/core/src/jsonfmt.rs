//! JSON emission with floats at 17 significant digits.
//!
//! Emitted artifacts (reports, metrics, summaries) must be byte-stable
//! across runs and carry enough digits to round-trip every f64 exactly, so
//! all JSON written by this crate goes through this formatter instead of the
//! default shortest-representation one.

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{Error, Result};

struct SigDigits;

impl Formatter for SigDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        // 16 fractional digits in scientific notation = 17 significant.
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.16e}", value as f64)
    }
}

/// Serialize to a JSON string with 17-significant-digit floats.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidArgument(format!("json serialization failed: {e}")))?;
    String::from_utf8(out)
        .map_err(|e| Error::InvalidArgument(format!("json was not utf-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_significant_digits() {
        let s = to_string(&serde_json::json!({"x": 1.0 / 3.0})).unwrap();
        assert_eq!(s, r#"{"x":3.3333333333333331e-1}"#);
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn round_trips_are_exact_for_awkward_values() {
        for v in [f64::MIN_POSITIVE, 0.1 + 0.2, 1e300, -7.25] {
            let s = to_string(&serde_json::json!({ "v": v })).unwrap();
            let back: serde_json::Value = serde_json::from_str(&s).unwrap();
            assert_eq!(back["v"].as_f64().unwrap(), v, "value {v}");
        }
    }
}
