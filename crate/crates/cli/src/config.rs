//! TOML config files layered under command-line flags.
//!
//! A config file mirrors the command tree. Scalar keys at the top level
//! become global flags; a table named after a subcommand holds that
//! subcommand's flags, nested for `review serve` and friends:
//!
//! ```toml
//! jobs = 4
//!
//! [qa-gen]
//! endpoint = "http://localhost:8000/generate"
//! model = "my-model"
//!
//! [review.serve]
//! port = 9000
//! ```
//!
//! The file is turned into extra arguments inserted ahead of the user's own,
//! so flags given on the command line win. Unknown keys surface as ordinary
//! unknown-argument errors.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Value of `--config` in `argv`, if any.
pub fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Positions of the subcommand tokens in `argv` (walking the command tree).
fn subcommand_positions(cmd: &Command, argv: &[OsString]) -> Vec<(usize, String)> {
    let mut found = Vec::new();
    let mut current = cmd;
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if s == "--" {
            break;
        }
        if let Some(sub) = current.find_subcommand(s.as_ref()) {
            found.push((i, sub.get_name().to_string()));
            current = sub;
        }
        i += 1;
    }
    found
}

fn flags_from_table(table: &toml::Table, cmd: &Command, section: &str) -> Result<Vec<OsString>, ConfigError> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{key}");
        match value {
            toml::Value::Table(_) => {
                if cmd.find_subcommand(key).is_none() {
                    return Err(ConfigError(format!("unknown config section [{section}{key}]")));
                }
            }
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => {
                out.push(flag.into());
                out.push(s.into());
            }
            toml::Value::Integer(n) => {
                out.push(flag.into());
                out.push(n.to_string().into());
            }
            toml::Value::Float(x) => {
                out.push(flag.into());
                out.push(x.to_string().into());
            }
            toml::Value::Array(items) => {
                let parts: Result<Vec<String>, ConfigError> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => Ok(s.clone()),
                        toml::Value::Integer(n) => Ok(n.to_string()),
                        toml::Value::Float(x) => Ok(x.to_string()),
                        toml::Value::Boolean(b) => Ok(b.to_string()),
                        other => Err(ConfigError(format!("{key}: unsupported list element {other}"))),
                    })
                    .collect();
                out.push(flag.into());
                out.push(parts?.join(",").into());
            }
            toml::Value::Datetime(d) => {
                out.push(flag.into());
                out.push(d.to_string().into());
            }
        }
    }
    Ok(out)
}

/// Returns `argv` with flags from the config file (if `--config` is given)
/// spliced in ahead of the user's flags at each command level.
pub fn layer(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let root: toml::Table = text
        .parse()
        .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.to_string_lossy())))?;

    // (insert position, flags) per level, applied back to front
    let mut inserts = vec![(1, flags_from_table(&root, cmd, "")?)];
    let mut table = Some(&root);
    let mut current = cmd;
    let mut section = String::new();
    for (pos, name) in subcommand_positions(cmd, &argv) {
        current = current.find_subcommand(&name).expect("found while walking");
        section.push_str(&name);
        section.push('.');
        table = table.and_then(|t| t.get(&name)).and_then(|v| v.as_table());
        if let Some(t) = table {
            inserts.push((pos + 1, flags_from_table(t, current, &section)?));
        }
    }
    let mut argv = argv;
    for (pos, flags) in inserts.into_iter().rev() {
        argv.splice(pos..pos, flags);
    }
    Ok(argv)
}
