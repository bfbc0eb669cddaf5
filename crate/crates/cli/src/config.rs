//! Flag/config-file merging. A config file is TOML with one table per
//! subcommand; keys are flag names (dashes or underscores). Flags given on
//! the command line win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Failure;

pub fn load(path: &Path) -> Result<toml::Table, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

/// Fill the flags left unset in `cli` from `section` of the config file.
pub fn resolve<T: Serialize + DeserializeOwned>(cli: &T, file: Option<&toml::Table>, section: &str) -> Result<T, Failure> {
    let mut value = serde_json::to_value(cli).expect("argument structs serialize");
    let Some(table) = file.and_then(|f| f.get(section)) else {
        return Ok(serde_json::from_value(value).expect("round trip of own value"));
    };
    let toml::Value::Table(table) = table else {
        return Err(Failure::usage(format!("config section [{section}] is not a table")));
    };
    let fields = value.as_object_mut().expect("argument structs are objects");
    for (key, v) in table {
        let name = key.replace('-', "_");
        let slot = fields
            .get_mut(&name)
            .ok_or_else(|| Failure::usage(format!("config [{section}]: unknown key {key}")))?;
        if slot.is_null() || *slot == serde_json::Value::Bool(false) {
            *slot = serde_json::to_value(v).map_err(|e| Failure::usage(format!("config [{section}] {key}: {e}")))?;
        }
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("config [{section}]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Default, Debug, PartialEq)]
    struct Args {
        epochs: Option<usize>,
        learning_rate: Option<f64>,
        png: bool,
    }

    #[test]
    fn flags_win_and_gaps_are_filled() {
        let file: toml::Table = "[train]\nepochs = 9\nlearning-rate = 0.5\npng = true\n".parse().unwrap();
        let cli = Args {
            epochs: Some(3),
            ..Args::default()
        };
        let got = resolve(&cli, Some(&file), "train").unwrap();
        assert_eq!(
            got,
            Args {
                epochs: Some(3),
                learning_rate: Some(0.5),
                png: true
            }
        );
    }

    #[test]
    fn unknown_keys_and_bad_types_are_usage_errors() {
        let file: toml::Table = "[train]\nepoch = 9\n".parse().unwrap();
        assert_eq!(resolve(&Args::default(), Some(&file), "train").unwrap_err().code, 2);
        let file: toml::Table = "[train]\nepochs = \"many\"\n".parse().unwrap();
        assert_eq!(resolve(&Args::default(), Some(&file), "train").unwrap_err().code, 2);
    }

    #[test]
    fn missing_section_keeps_flags() {
        let file: toml::Table = "[other]\nx = 1\n".parse().unwrap();
        assert_eq!(resolve(&Args::default(), Some(&file), "train").unwrap(), Args::default());
    }
}
