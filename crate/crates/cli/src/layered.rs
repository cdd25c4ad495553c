//! Config layering: an optional TOML file, then `key.path=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use stsplat::{Error, Result};
use toml::{Table, Value};

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a plain string (so `policy=mcmc` works without quotes).
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v parsed"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in override path {path}")));
        }
        if parts.peek().is_none() {
            cur.insert(key.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {path}: {key} is not a table"))),
        };
    }
    unreachable!("split yields at least one part")
}

pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

/// Loads `T` from the optional file with the overrides applied on top; keys
/// absent from both take the type's defaults. Unknown keys are rejected.
pub fn load<T: DeserializeOwned + Serialize + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text)?
        }
        None => Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    let known = toml::Table::try_from(T::default())?;
    check_keys(&table, &known, "")?;
    Ok(Value::Table(table).try_into()?)
}

fn check_keys(table: &Table, known: &Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let Some(reference) = known.get(k) else {
            return Err(Error::Config(format!("unknown config key {prefix}{k}")));
        };
        if let (Value::Table(sub), Value::Table(ref_sub)) = (v, reference) {
            check_keys(sub, ref_sub, &format!("{prefix}{k}."))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use stsplat::trainer::TrainConfig;

    #[test]
    fn overrides_nested_keys() {
        let cfg: TrainConfig = load(
            None,
            &["iterations=12".into(), "density.policy=exact_copy".into(), "lr.opacity=0.1".into(), "cc=true".into()],
        )
        .unwrap();
        assert_eq!(cfg.iterations, 12);
        assert_eq!(cfg.density.policy.name(), "exact_copy");
        assert_eq!(cfg.lr.opacity, 0.1);
        assert!(cfg.cc);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_syntax() {
        assert!(load::<TrainConfig>(None, &["iterationz=3".into()]).is_err());
        assert!(load::<TrainConfig>(None, &["density.polcy=mcmc".into()]).is_err());
        assert!(load::<TrainConfig>(None, &["iterations".into()]).is_err());
        assert!(load::<TrainConfig>(None, &["iterations.x=1".into()]).is_err());
    }
}
