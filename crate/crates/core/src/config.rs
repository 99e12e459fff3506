//! JSON configuration loading with field-precise errors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses `text`; errors name the offending field path.
pub fn from_json_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config {
            path: origin.to_string(),
            field: if field == "." { String::new() } else { field },
            reason: e.into_inner().to_string(),
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: origin.clone(),
        field: String::new(),
        reason: format!("cannot read: {e}"),
    })?;
    from_json_str(&text, &origin)
}

/// `p` relative to the directory of the config file `base`.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match base.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.join(p),
        _ => p.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::GeneratorConfig;

    #[test]
    fn unknown_field_is_named() {
        let e = from_json_str::<GeneratorConfig>(r#"{"kind":"randfuzz","sed":1}"#, "c.json").unwrap_err();
        match e {
            Error::Config { path, reason, .. } => {
                assert_eq!(path, "c.json");
                assert!(reason.contains("sed"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_path_is_reported() {
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct Outer {
            generators: Vec<GeneratorConfig>,
        }
        let e = from_json_str::<Outer>(r#"{"generators":[{"kind":"randfuzz"},{"kind":"nope"}]}"#, "x").unwrap_err();
        match e {
            Error::Config { field, .. } => assert_eq!(field, "generators[1].kind"),
            other => panic!("{other:?}"),
        }
    }
}
