//! Flat `key = value` settings: built-in defaults, then a config file, then
//! command-line flags. The resolved table is echoed before a command acts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::Fail;

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    allowed: Vec<&'static str>,
}

impl Settings {
    /// Starts from `defaults`; only their keys are accepted afterwards.
    pub fn new(defaults: &[(&'static str, &str)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            allowed: defaults.iter().map(|(k, _)| *k).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<(), Fail> {
        if !self.allowed.contains(&key) {
            return Err(Fail::usage(format!(
                "unknown setting `{key}` (known: {})",
                self.allowed.join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), Fail> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    /// Applies a file of `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Fail> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Fail::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Fail> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Fail::usage(format!("{origin}:{}: expected `key = value`, got `{raw}`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Fail::usage(format!("{origin}:{}: empty key", n + 1)));
            }
            self.set(k, v).map_err(|e| Fail::usage(format!("{origin}:{}: {}", n + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Fail>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Fail::usage(format!("setting `{key}` = `{raw}`: {e}")))
    }

    /// Empty values mean "unset".
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Fail>
    where
        T::Err: fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool, Fail> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Fail::usage(format!("setting `{key}` = `{other}` is not a boolean"))),
        }
    }

    /// The audit line printed before a command runs.
    pub fn audit(&self, command: &str) -> String {
        let body: Vec<String> = self.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("config {command}: {}", body.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::new(&[("epochs", "10"), ("lr", "0.001"), ("transmix", "true")]);
        s.apply_text("# comment\n epochs = 3  # trailing\n\nlr=5e-4\n", "test").unwrap();
        s.set("epochs", 7).unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), 7);
        assert_eq!(s.get::<f64>("lr").unwrap(), 5e-4);
        assert!(s.flag("transmix").unwrap());
        assert_eq!(s.audit("train"), "config train: epochs=7 lr=5e-4 transmix=true");
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        let mut s = Settings::new(&[("epochs", "10")]);
        let e = s.apply_text("epochs 3\n", "f").unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("f:1"));
        assert!(s.apply_text("depth = 3", "f").unwrap_err().message.contains("unknown setting"));
        s.set("epochs", "x").unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap_err().code, 2);
    }
}
