//! Small shared helpers.

use serde::Serialize;
use serde_json::ser::PrettyFormatter;

/// Serialize with sorted keys (serde_json's default map) and a one-space indent.
pub fn to_pretty_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PrettyFormatter::with_indent(b" "));
    serde_json::to_value(value)
        .expect("JSON serialization of in-memory value")
        .serialize(&mut ser)
        .expect("JSON serialization of in-memory value");
    let mut text = String::from_utf8(buf).expect("serde_json emits UTF-8");
    text.push('\n');
    text
}

/// Format a ratio with exactly four decimals.
pub fn rate4(rate: f64) -> String {
    format!("{rate:.4}")
}
