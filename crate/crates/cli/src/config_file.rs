//! `--config path` support: TOML keys become flags inserted ahead of the
//! explicit ones, so explicit flags win.
//!
//! Top-level keys apply to whichever subcommand runs; a table named after a
//! subcommand (`[train]`) applies only to it.

use std::ffi::OsString;
use std::path::Path;

use toml::Value;

const SUBCOMMANDS: [&str; 5] = ["gen", "train", "eval", "inspect", "sweep"];

fn flag_value(v: &Value) -> Result<Option<String>, String> {
    Ok(match v {
        Value::String(s) => Some(s.clone()),
        Value::Integer(i) => Some(i.to_string()),
        Value::Float(f) => Some(f.to_string()),
        Value::Boolean(_) => None,
        Value::Array(items) => {
            let parts: Result<Vec<_>, _> = items
                .iter()
                .map(|i| flag_value(i)?.ok_or_else(|| "arrays of booleans are not supported".to_string()))
                .collect();
            Some(parts?.join(","))
        }
        other => return Err(format!("unsupported value {other}")),
    })
}

fn push_table(out: &mut Vec<OsString>, table: &toml::Table) -> Result<(), String> {
    for (key, v) in table {
        if matches!(v, Value::Table(_)) {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match (v, flag_value(v)?) {
            (Value::Boolean(true), _) => out.push(flag.into()),
            (Value::Boolean(false), _) => {}
            (_, Some(val)) => {
                out.push(flag.into());
                out.push(val.into());
            }
            (_, None) => unreachable!("only booleans have no value"),
        }
    }
    Ok(())
}

/// Flags derived from `path` for `subcommand`.
pub fn config_args(path: &Path, subcommand: &str) -> Result<Vec<OsString>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
    let mut out = Vec::new();
    push_table(&mut out, &table)?;
    if let Some(Value::Table(sub)) = table.get(subcommand) {
        push_table(&mut out, sub)?;
    }
    Ok(out)
}

/// Rewrites `argv` so that flags from a `--config` file sit right after the
/// subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = argv.get(i + 1).map(|p| (i, 2, p.clone()));
            break;
        }
        if let Some(p) = s.strip_prefix("--config=") {
            config = Some((i, 1, OsString::from(p)));
            break;
        }
    }
    let Some((at, width, path)) = config else {
        return Ok(argv);
    };
    let mut rest: Vec<OsString> = argv.clone();
    rest.drain(at..at + width);
    let Some(sub_at) = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(argv);
    };
    let sub = rest[sub_at].to_string_lossy().into_owned();
    let extra = config_args(Path::new(&path), &sub)?;
    rest.splice(sub_at + 1..sub_at + 1, extra);
    Ok(rest)
}
