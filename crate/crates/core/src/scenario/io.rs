use std::fs;
use std::path::Path;

use super::Scenario;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

pub fn scenario_to_json(s: &Scenario) -> Result<String> {
    let mut v = serde_json::to_value(s)?;
    v.as_object_mut().expect("scenario serializes to an object").insert("version".into(), SCHEMA_VERSION.into());
    Ok(serde_json::to_string(&v)?)
}

/// Parses a scenario document. Unknown keys are ignored; the schema version
/// must match.
pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    if text.trim().is_empty() {
        return Err(Error::Serde("scenario document is empty".into()));
    }
    let v: serde_json::Value = serde_json::from_str(text)?;
    match v.get("version").and_then(|x| x.as_u64()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(Error::Serde(format!("unsupported scenario schema version {other}, expected {SCHEMA_VERSION}")))
        }
        None => return Err(Error::Serde("scenario document has no version".into())),
    }
    let s: Scenario = serde_json::from_value(v)?;
    s.validate()?;
    Ok(s)
}

pub fn save_scenario(path: impl AsRef<Path>, s: &Scenario) -> Result<()> {
    fs::write(path, scenario_to_json(s)?)?;
    Ok(())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    scenario_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scenario, GeneratorConfig};
    use super::*;

    #[test]
    fn round_trip() {
        let s = generate_scenario(11, &GeneratorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        save_scenario(&p, &s).unwrap();
        assert_eq!(load_scenario(&p).unwrap(), s);
    }

    #[test]
    fn empty_and_truncated_rejected() {
        assert!(matches!(scenario_from_json(""), Err(Error::Serde(_))));
        let s = generate_scenario(1, &GeneratorConfig::default()).unwrap();
        let text = scenario_to_json(&s).unwrap();
        assert!(scenario_from_json(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn unknown_keys_ignored_and_version_checked() {
        let s = generate_scenario(2, &GeneratorConfig::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&scenario_to_json(&s).unwrap()).unwrap();
        v["weather"] = "rain".into();
        v["tracks"][0]["note"] = 3.into();
        assert_eq!(scenario_from_json(&v.to_string()).unwrap(), s);
        v["version"] = 99.into();
        assert!(scenario_from_json(&v.to_string()).is_err());
    }
}
