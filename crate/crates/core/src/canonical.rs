//! Canonical JSON: sorted object keys, no insignificant whitespace, UTF-8.
//!
//! Every hashed or signed byte string in the crate goes through here, so
//! that two processes (or two languages) agree on the exact bytes.

use serde::Serialize;
use serde_json::Value;

/// Serialize `value` to canonical JSON bytes.
///
/// `serde_json::Map` is backed by a `BTreeMap` (the `preserve_order`
/// feature is not enabled anywhere in the workspace), so routing through
/// [`Value`] sorts every object's keys.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("canonical encoding of in-memory value");
    serde_json::to_vec(&value).expect("serializing a serde_json::Value cannot fail")
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_vec(value)).expect("serde_json emits UTF-8")
}

pub fn to_value<T: Serialize + ?Sized>(value: &T) -> Value {
    serde_json::to_value(value).expect("canonical encoding of in-memory value")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v = json!({"b": 1, "a": {"z": [1, 2], "c": "x"}});
        assert_eq!(to_string(&v), r#"{"a":{"c":"x","z":[1,2]},"b":1}"#);
    }

    #[test]
    fn struct_field_order_does_not_leak() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        assert_eq!(to_string(&S { zeta: 1, alpha: 2 }), r#"{"alpha":2,"zeta":1}"#);
    }
}
