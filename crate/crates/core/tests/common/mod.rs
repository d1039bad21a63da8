//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use serde_json::Value;

pub fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/results.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks `doc` against `$defs/<def>` of the shipped schema, covering the
/// keywords it uses: `$ref`, `type`, `required`, `properties`, `items`,
/// `enum` and `const`. Returns the first violation.
pub fn validate(doc: &Value, def: &str) -> Result<(), String> {
    let schema = schema();
    let node = &schema["$defs"][def];
    assert!(!node.is_null(), "no schema definition {def}");
    check(&schema, node, doc, def)
}

fn check(root: &Value, node: &Value, doc: &Value, at: &str) -> Result<(), String> {
    if let Some(r) = node.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return check(root, &root["$defs"][name], doc, at);
    }
    if let Some(c) = node.get("const") {
        if c != doc {
            return Err(format!("{at}: expected {c}, got {doc}"));
        }
    }
    if let Some(options) = node.get("enum").and_then(Value::as_array) {
        if !options.contains(doc) {
            return Err(format!("{at}: {doc} not in {options:?}"));
        }
    }
    if let Some(t) = node.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => doc.is_object(),
            "array" => doc.is_array(),
            "string" => doc.is_string(),
            "number" => doc.is_number(),
            "integer" => doc.is_u64() || doc.is_i64(),
            "boolean" => doc.is_boolean(),
            other => panic!("unsupported type {other}"),
        };
        if !ok {
            return Err(format!("{at}: expected {t}, got {doc}"));
        }
        if t == "integer" {
            if let (Some(min), Some(v)) = (node.get("minimum").and_then(Value::as_f64), doc.as_f64()) {
                if v < min {
                    return Err(format!("{at}: {v} below {min}"));
                }
            }
        }
    }
    if let Some(required) = node.get("required").and_then(Value::as_array) {
        for key in required {
            let key = key.as_str().unwrap();
            if doc.get(key).is_none() {
                return Err(format!("{at}: missing {key}"));
            }
        }
    }
    if let (Some(props), Some(fields)) = (node.get("properties").and_then(Value::as_object), doc.as_object()) {
        for (key, value) in fields {
            if let Some(sub) = props.get(key) {
                check(root, sub, value, &format!("{at}.{key}"))?;
            }
        }
    }
    if let (Some(items), Some(values)) = (node.get("items"), doc.as_array()) {
        for (i, value) in values.iter().enumerate() {
            check(root, items, value, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}
