//! Canonical instance documents.
//!
//! Instances are JSON objects with keys `datasets`, `models`, `caps` and
//! `shapley`. Saving goes through `serde_json::Value`, whose maps are ordered,
//! so object keys always come out sorted and the output is canonical.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::MarketInstance;

/// Parses a document, reporting failures with a JSON-pointer style path.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|err| {
        let mut path = String::new();
        for seg in err.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => path.push_str(&format!("/{index}")),
                Segment::Map { key } => path.push_str(&format!("/{key}")),
                Segment::Enum { variant } => path.push_str(&format!("/{variant}")),
                Segment::Unknown => path.push_str("/?"),
            }
        }
        let reason = err.inner().to_string();
        // serde reports a missing field at its parent; point at the field itself.
        if let Some(rest) = reason.strip_prefix("missing field `") {
            if let Some(field) = rest.split('`').next() {
                path.push('/');
                path.push_str(field);
            }
        }
        if path.is_empty() {
            path.push('/');
        }
        Error::Parse { path, reason }
    })?;
    Ok(value)
}

/// Serializes with sorted object keys and two-space indentation.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value).map_err(|e| Error::Parse {
        path: "/".into(),
        reason: e.to_string(),
    })?;
    let mut text = serde_json::to_string_pretty(&tree).map_err(|e| Error::Parse {
        path: "/".into(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    Ok(text)
}

pub fn parse_instance(text: &str) -> Result<MarketInstance> {
    from_json_str(text)
}

pub fn instance_to_string(instance: &MarketInstance) -> Result<String> {
    to_canonical_json(instance)
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<MarketInstance> {
    let text = fs::read_to_string(path)?;
    parse_instance(&text)
}

pub fn save_instance(instance: &MarketInstance, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, instance_to_string(instance)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::testing::e2;

    #[test]
    fn canonical_output_is_a_fixed_point() {
        let text = instance_to_string(&e2()).unwrap();
        let again = instance_to_string(&parse_instance(&text).unwrap()).unwrap();
        assert_eq!(text, again);
        assert_eq!(parse_instance(&text).unwrap(), e2());
    }

    #[test]
    fn keys_are_sorted() {
        let text = instance_to_string(&e2()).unwrap();
        let caps = text.find("\"caps\"").unwrap();
        let datasets = text.find("\"datasets\"").unwrap();
        let shapley = text.find("\"shapley\"").unwrap();
        assert!(caps < datasets && datasets < shapley);
    }

    #[test]
    fn missing_shapley_block_names_its_path() {
        let mut tree = serde_json::to_value(e2()).unwrap();
        tree.as_object_mut().unwrap().remove("shapley");
        let err = parse_instance(&tree.to_string()).unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, "/shapley"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_type_names_the_nested_path() {
        let mut tree = serde_json::to_value(e2()).unwrap();
        tree["models"][0]["kappa_m"] = serde_json::Value::String("cheap".into());
        match parse_instance(&tree.to_string()).unwrap_err() {
            Error::Parse { path, reason } => {
                assert_eq!(path, "/models/0/kappa_m");
                assert!(reason.contains("invalid type"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut tree = serde_json::to_value(e2()).unwrap();
        tree["datasets"][0]["price"] = serde_json::json!(1.0);
        assert!(matches!(parse_instance(&tree.to_string()), Err(Error::Parse { .. })));
    }

    #[test]
    fn caps_block_is_optional() {
        let mut tree = serde_json::to_value(e2()).unwrap();
        tree.as_object_mut().unwrap().remove("caps");
        assert!(parse_instance(&tree.to_string()).unwrap().caps.is_empty());
    }
}
