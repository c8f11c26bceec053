//! Canonical JSON for configurations: `{"raw": {...}, "subspace_id": n}` with
//! sorted keys and no insignificant whitespace.

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};

use super::{Configuration, SearchSpace, SpaceError, Value};

pub fn config_to_json(config: &Configuration) -> Json {
    let raw: Map<String, Json> = config.raw.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
    let mut obj = Map::new();
    obj.insert("raw".into(), Json::Object(raw));
    obj.insert("subspace_id".into(), Json::from(config.subspace_id));
    Json::Object(obj)
}

pub fn serialize_config(config: &Configuration) -> String {
    config_to_json(config).to_string()
}

pub fn config_from_json(json: &Json, space: &SearchSpace) -> Result<Configuration, SpaceError> {
    let malformed = |m: &str| SpaceError::Malformed(m.to_string());
    let obj = json.as_object().ok_or_else(|| malformed("expected a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "raw" && *k != "subspace_id") {
        return Err(SpaceError::Malformed(format!("unexpected field `{k}`")));
    }
    let raw_obj = obj
        .get("raw")
        .and_then(Json::as_object)
        .ok_or_else(|| malformed("missing `raw` object"))?;
    let mut raw = BTreeMap::new();
    for (k, v) in raw_obj {
        let value = Value::from_json(v).ok_or_else(|| SpaceError::Malformed(format!("`{k}` is not a literal")))?;
        raw.insert(k.clone(), value);
    }
    let subspace_id = match obj.get("subspace_id") {
        Some(v) => v
            .as_u64()
            .map(|u| u as usize)
            .ok_or_else(|| malformed("`subspace_id` must be a positive integer"))?,
        None => space.locate(&raw).ok_or_else(|| match unknown_key(space, &raw) {
            Some(k) => SpaceError::UnknownHyperparameter(k),
            None => malformed("configuration matches no subspace"),
        })?,
    };
    space.make_config(subspace_id, raw)
}

fn unknown_key(space: &SearchSpace, raw: &BTreeMap<String, Value>) -> Option<String> {
    raw.keys()
        .find(|k| !space.subspaces.iter().any(|s| s.slots.iter().any(|slot| &slot.key == *k)))
        .cloned()
}

pub fn deserialize_config(text: &str, space: &SearchSpace) -> Result<Configuration, SpaceError> {
    let json: Json = serde_json::from_str(text).map_err(|e| SpaceError::Malformed(e.to_string()))?;
    config_from_json(&json, space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::fixtures;
    use proptest::prelude::*;

    #[test]
    fn canonical_form() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let c = space.sample(2, 9).unwrap();
        let text = serialize_config(&c);
        assert!(text.starts_with("{\"raw\":{\"C\":"));
        assert!(text.ends_with(",\"subspace_id\":2}"));
        assert!(text.contains("\"kernel\":\"poly\""));
    }

    #[test]
    fn rejects_bad_documents() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let unknown = r#"{"raw":{"C":1.0,"kernel":"linear","zeta":2},"subspace_id":1}"#;
        assert!(matches!(deserialize_config(unknown, &space), Err(SpaceError::UnknownHyperparameter(k)) if k == "zeta"));
        let out = r#"{"raw":{"C":5000.0,"kernel":"linear"},"subspace_id":1}"#;
        assert!(matches!(deserialize_config(out, &space), Err(SpaceError::OutOfRange { .. })));
        let wrong_branch = r#"{"raw":{"C":1.0,"kernel":"rbf"},"subspace_id":1}"#;
        assert!(deserialize_config(wrong_branch, &space).is_err());
        assert!(deserialize_config("[1,2]", &space).is_err());
        assert!(deserialize_config("{", &space).is_err());
        let located = r#"{"raw":{"C":1,"kernel":"rbf","gamma":0.5}}"#;
        let c = deserialize_config(located, &space).unwrap();
        assert_eq!(c.subspace_id, 4);
        assert_eq!(c.raw["C"], Value::Float(1.0));
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), which in 0usize..5) {
            let doc = [fixtures::SIMULATION, fixtures::SVM, fixtures::XGBOOST, fixtures::CASH, fixtures::NAS][which];
            let space = SearchSpace::parse(doc).unwrap();
            let id = 1 + (seed as usize % space.subspaces.len());
            let c = space.sample(id, seed).unwrap();
            let back = deserialize_config(&serialize_config(&c), &space).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
