//! Line-oriented configuration: `[section]` headers, `key = value` lines,
//! `#` comments. Flags override file values. Serialization is canonical
//! (sections and keys sorted), so parse -> serialize -> parse is a fixed
//! point.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug)]
pub enum ConfigError {
    Syntax { line: usize, msg: String },
    DuplicateKey { key: String },
    UnknownKey { key: String, command: String },
    MissingKey { key: String, command: String },
    TypeMismatch { key: String, value: String, expected: &'static str },
    Conflict { msg: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, msg } => write!(f, "config line {line}: {msg}"),
            ConfigError::DuplicateKey { key } => write!(f, "duplicate config key '{key}'"),
            ConfigError::UnknownKey { key, command } => {
                write!(f, "unknown config key '{key}' for subcommand '{command}'")
            }
            ConfigError::MissingKey { key, command } => {
                write!(f, "missing required config key '{key}' for subcommand '{command}'")
            }
            ConfigError::TypeMismatch { key, value, expected } => {
                write!(f, "config key '{key}': '{value}' is not a valid {expected}")
            }
            ConfigError::Conflict { msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Flat `section.key -> value` map with canonical ordering.
#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line: idx + 1,
                    msg: format!("unterminated section header '{raw}'"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: idx + 1,
                msg: format!("expected 'key = value', got '{raw}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if entries.contains_key(&full) {
                return Err(ConfigError::DuplicateKey { key: full });
            }
            entries.insert(full, value.trim().to_string());
        }
        Ok(Config { entries })
    }

    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current_section: Option<String> = None;
        for (key, value) in &self.entries {
            let (section, name) = match key.rsplit_once('.') {
                Some((s, n)) => (s.to_string(), n),
                None => (String::new(), key.as_str()),
            };
            if current_section.as_deref() != Some(section.as_str()) {
                if !out.is_empty() {
                    out.push('\n');
                }
                if !section.is_empty() {
                    out.push_str(&format!("[{section}]\n"));
                }
                current_section = Some(section);
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require(&self, key: &str, command: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or(ConfigError::MissingKey {
            key: key.to_string(),
            command: command.to_string(),
        })
    }

    pub fn get_parsed<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::TypeMismatch {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }

    pub fn get_or<T: std::str::FromStr>(
        &self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        Ok(self.get_parsed(key, expected)?.unwrap_or(default))
    }

    /// Reject any key not in the allow list for this subcommand.
    pub fn check_known(&self, known: &[&str], command: &str) -> Result<(), ConfigError> {
        for key in self.keys() {
            // [run] metadata keys are always accepted so a run.meta file can
            // be replayed as a config
            if key.starts_with("run.") {
                continue;
            }
            if !known.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    command: command.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Resolve the utility weight: `lambda` directly, or `gamma` as 1/lambda.
    /// Giving both is an error.
    pub fn lambda(&self, section: &str) -> Result<Option<f32>, ConfigError> {
        let lambda_key = format!("{section}.lambda");
        let gamma_key = format!("{section}.gamma");
        let lambda: Option<f32> = self.get_parsed(&lambda_key, "number")?;
        let gamma: Option<f32> = self.get_parsed(&gamma_key, "number")?;
        match (lambda, gamma) {
            (Some(_), Some(_)) => Err(ConfigError::Conflict {
                msg: format!("both {lambda_key} and {gamma_key} given; set exactly one"),
            }),
            (Some(l), None) => Ok(Some(l)),
            (None, Some(g)) => {
                if g <= 0.0 {
                    Err(ConfigError::TypeMismatch {
                        key: gamma_key,
                        value: g.to_string(),
                        expected: "positive number",
                    })
                } else {
                    Ok(Some(1.0 / g))
                }
            }
            (None, None) => Ok(None),
        }
    }
}
