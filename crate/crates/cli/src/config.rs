//! Scenario loading: preset, then TOML file, then `CBRL_*` environment
//! overrides, merged as TOML tables and decoded with unknown keys rejected.

use std::path::Path;

use cbrl_core::experiments::ScenarioConfig;
use cbrl_core::Error;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "CBRL_";

/// Merge `over` into `base`; nested tables merge key by key.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(sc: &ScenarioConfig) -> Result<Table, Error> {
    Table::try_from(sc).map_err(|e| Error::Config(format!("cannot encode scenario: {e}")))
}

/// `CBRL_TD3__GAMMA=0.9` becomes `td3.gamma = 0.9`. Values are parsed as
/// TOML and fall back to plain strings.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Table {
    let mut out = Table::new();
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        if rest.is_empty() {
            continue;
        }
        let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(raw));
        let mut node = &mut out;
        for part in &path[..path.len() - 1] {
            let entry = node.entry(part.clone()).or_insert_with(|| Value::Table(Table::new()));
            if !entry.is_table() {
                *entry = Value::Table(Table::new());
            }
            node = entry.as_table_mut().expect("entry was just made a table");
        }
        node.insert(path[path.len() - 1].clone(), value);
    }
    out
}

/// Resolve the scenario from an optional file and the process environment.
pub fn load(path: Option<&Path>, env: Table) -> Result<ScenarioConfig, Error> {
    let mut user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    merge(&mut user, env);
    let preset = match user.remove("preset") {
        Some(Value::String(name)) => name,
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        None => "goal".to_string(),
    };
    let mut table = to_table(&ScenarioConfig::preset(&preset)?)?;
    merge(&mut table, user);
    let sc: ScenarioConfig =
        Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    sc.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_keys_become_nested_paths() {
        let t = env_overrides([
            ("CBRL_TD3__GAMMA".to_string(), "0.9".to_string()),
            ("CBRL_ACTOR".to_string(), "mlp-noisy".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        assert_eq!(t["td3"]["gamma"].as_float(), Some(0.9));
        assert_eq!(t["actor"].as_str(), Some("mlp-noisy"));
        assert!(!t.contains_key("home"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut env = Table::new();
        env.insert("bogus".into(), Value::Integer(1));
        assert!(load(None, env).is_err());
    }

    #[test]
    fn preset_then_override() {
        let env = env_overrides([
            ("CBRL_PRESET".to_string(), "goal-change".to_string()),
            ("CBRL_RESERVOIR__G".to_string(), "5".to_string()),
        ]);
        let sc = load(None, env).unwrap();
        assert_eq!(sc.env.change_step, 20_001);
        assert_eq!(sc.reservoir.g, 5.0);
    }
}
