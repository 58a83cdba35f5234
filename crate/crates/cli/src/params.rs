//! Subcommand parameters: declared once, parsed from the command line and an
//! optional `key=value` file, and echoed back as a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Value,
    /// An existing file or directory.
    Input,
    /// A destination; never echoed into the manifest.
    Output,
    /// The config file itself; never echoed.
    Config,
}

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    pub default: Option<&'static str>,
    pub required: bool,
    pub kind: Kind,
}

pub const fn value(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, help, default: Some(default), required: false, kind: Kind::Value }
}

pub const fn optional(name: &'static str, help: &'static str) -> Key {
    Key { name, help, default: None, required: false, kind: Kind::Value }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key { name, help, default: None, required: true, kind: Kind::Value }
}

pub const fn input(name: &'static str, required: bool, help: &'static str) -> Key {
    Key { name, help, default: None, required, kind: Kind::Input }
}

pub const fn output(name: &'static str, help: &'static str) -> Key {
    Key { name, help, default: None, required: true, kind: Kind::Output }
}

pub const CONFIG: Key = Key { name: "config", help: "key=value file supplying any of these options", default: None, required: false, kind: Kind::Config };
pub const SEED: Key = required("seed", "seed for every random choice of the run");

/// A clap subcommand with one `--name VALUE` option per key. Repeated
/// options are joined with commas.
pub fn command(name: &'static str, about: &'static str, keys: &[Key]) -> Command {
    keys.iter().fold(Command::new(name).about(about), |cmd, k| {
        cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help).action(ArgAction::Append))
    })
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", n + 1))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            bail!("line {}: duplicate key `{}`", n + 1, k.trim());
        }
    }
    Ok(out)
}

/// Effective parameters of one run.
#[derive(Debug)]
pub struct Params {
    pub command: &'static str,
    keys: Vec<Key>,
    values: BTreeMap<String, String>,
}

impl Params {
    /// Defaults, overlaid by the config file, overlaid by the command line.
    pub fn resolve(command: &'static str, keys: &[Key], m: &ArgMatches) -> Result<Params> {
        let mut values: BTreeMap<String, String> = keys.iter().filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string()))).collect();
        let cli: BTreeMap<String, String> = keys
            .iter()
            .filter_map(|k| m.get_many::<String>(k.name).map(|v| (k.name.to_string(), v.cloned().collect::<Vec<_>>().join(","))))
            .collect();
        if let Some(path) = cli.get(CONFIG.name) {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            for (k, v) in parse_key_values(&text).with_context(|| format!("in config {path}"))? {
                if k == "command" {
                    if v != command {
                        bail!("config {path} is for `{v}`, not `{command}`");
                    }
                    continue;
                }
                match keys.iter().find(|key| key.name == k) {
                    Some(key) if matches!(key.kind, Kind::Value | Kind::Input) => {
                        values.insert(k, v);
                    }
                    Some(_) => {}
                    None => bail!("config {path}: unknown key `{k}` for `{command}`"),
                }
            }
        }
        values.extend(cli);
        let p = Params { command, keys: keys.to_vec(), values };
        for k in &p.keys {
            if k.required && !p.values.contains_key(k.name) {
                bail!("missing required option --{}", k.name);
            }
            if k.kind == Kind::Input {
                if let Some(v) = p.values.get(k.name) {
                    if !Path::new(v).exists() {
                        bail!("--{} {v}: no such file or directory", k.name);
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn str(&self, name: &str) -> Result<&str> {
        self.values.get(name).map(String::as_str).ok_or_else(|| anyhow!("missing option --{name}"))
    }

    pub fn opt_str(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(name)?;
        raw.parse().map_err(|e| anyhow!("--{name} {raw}: {e}"))
    }

    pub fn opt<T: FromStr>(&self, name: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.has(name).then(|| self.get(name)).transpose()
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(name)?;
        raw.split(',').map(|s| s.trim().parse().map_err(|e| anyhow!("--{name} {raw}: {e}"))).collect()
    }

    pub fn path(&self, name: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.str(name)?))
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        match self.str(name)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => bail!("--{name} {other}: expected true or false"),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get(SEED.name)
    }

    /// Every effective value except outputs and the config path, in
    /// declaration order; fed back through `--config` it reproduces the run.
    pub fn manifest(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for k in self.keys.iter().filter(|k| matches!(k.kind, Kind::Value | Kind::Input)) {
            if let Some(v) = self.values.get(k.name) {
                let _ = writeln!(s, "{}={v}", k.name);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[CONFIG, SEED, value("rate", "0.5", "r"), optional("unit", "u"), output("out", "o")];

    fn resolve(args: &[&str]) -> Result<Params> {
        let cmd = Command::new("t").subcommand(command("demo", "d", KEYS));
        let m = cmd.try_get_matches_from(std::iter::once("t").chain(args.iter().copied()))?;
        let (_, sub) = m.subcommand().unwrap();
        Params::resolve("demo", KEYS, sub)
    }

    #[test]
    fn layering_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "# comment\ncommand=demo\nseed=4\nrate=0.25\n").unwrap();
        let c = cfg.to_str().unwrap();
        let p = resolve(&["demo", "--config", c, "--rate", "2", "--unit", "1", "--unit", "3", "--out", "x"]).unwrap();
        assert_eq!(p.seed().unwrap(), 4);
        assert_eq!(p.get::<f32>("rate").unwrap(), 2.0);
        assert_eq!(p.list::<usize>("unit").unwrap(), vec![1, 3]);
        assert_eq!(p.manifest(), "command=demo\nseed=4\nrate=2\nunit=1,3\n");
        let m = dir.path().join("m.txt");
        std::fs::write(&m, p.manifest()).unwrap();
        let q = resolve(&["demo", "--config", m.to_str().unwrap(), "--out", "y"]).unwrap();
        assert_eq!(q.manifest(), p.manifest());
    }

    #[test]
    fn rejections() {
        assert!(resolve(&["demo", "--out", "x"]).unwrap_err().to_string().contains("--seed"));
        assert!(resolve(&["demo", "--seed", "1", "--out", "x", "--bogus", "2"]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, "seed=1\nwat=2\n").unwrap();
        assert!(resolve(&["demo", "--config", cfg.to_str().unwrap(), "--out", "x"]).unwrap_err().to_string().contains("unknown key"));
        std::fs::write(&cfg, "command=other\nseed=1\n").unwrap();
        assert!(resolve(&["demo", "--config", cfg.to_str().unwrap(), "--out", "x"]).is_err());
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }
}
