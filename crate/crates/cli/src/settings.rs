//! Layered run settings: defaults, then a `key=value` config file, then
//! `ROLLNET_THREADS`, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

pub const THREADS_ENV: &str = "ROLLNET_THREADS";

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_kv(&fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self { file, resolved: BTreeMap::new() })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.file.get(key).map(|v| v.parse::<T>().map_err(|_| anyhow!("config key `{key}` has invalid value `{v}`"))).transpose()
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`get`](Self::get) without a default.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.get_opt(key, flag)?.ok_or_else(|| anyhow!("missing required setting `{key}` (flag --{})", key.replace('_', "-")))
    }

    /// Worker count: flag, then environment, then file, then all cores.
    pub fn threads(&mut self, flag: Option<usize>) -> Result<usize> {
        let env = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| anyhow!("{THREADS_ENV} must be a positive integer"))?),
            Err(_) => None,
        };
        let n = match flag.or(env) {
            Some(n) => n,
            None => self.from_file("threads")?.unwrap_or(0),
        };
        // the thread count never changes results, so it is not recorded
        Ok(n)
    }

    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_config.txt"), self.to_text()).context("writing run_config.txt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut s = Settings { file: parse_kv("lr = 0.1\n# comment\nbatch-size=4\n").unwrap(), ..Default::default() };
        assert_eq!(s.get("lr", Some(0.5), 0.005).unwrap(), 0.5);
        assert_eq!(s.get("batch_size", None, 8usize).unwrap(), 4);
        assert_eq!(s.get("epochs", None, 3usize).unwrap(), 3);
        assert_eq!(s.to_text(), "batch_size=4\nepochs=3\nlr=0.5\n");
    }

    #[test]
    fn bad_values_are_reported() {
        let mut s = Settings { file: parse_kv("lr=fast").unwrap(), ..Default::default() };
        assert!(s.get("lr", None, 0.005f64).is_err());
        assert!(parse_kv("no equals sign").is_err());
    }
}
