//! Flat `key = value` run configuration. Command-line flags win over the
//! file, the file wins over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attentionet::Error;

pub const KEYS: &[&str] = &[
    "seed",
    "jobs",
    "subjects",
    "profile",
    "seconds_per_class",
    "low_cut",
    "high_cut",
    "filter_order",
    "include_eyes_closed",
    "model",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "plateau_patience",
    "early_stop_patience",
    "schedule",
    "finetune_learning_rate",
    "finetune_epochs",
    "finetune_batch_size",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    values: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let err = |line: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected 'key = value', got '{line}'")))?;
            let key = k.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(err(i + 1, format!("unknown key '{key}'")));
            }
            if values.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(err(i + 1, format!("'{key}' set twice")));
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            values,
        })
    }

    /// The flag if given, else the parsed file entry, else `None`.
    pub fn get<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Error>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "{key} missing from KEYS");
        if flag.is_some() {
            return Ok(flag);
        }
        let Some((raw, line)) = self.values.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|e| Error::Format {
            path: self.path.clone().unwrap_or_default(),
            line: *line,
            message: format!("{key}: {e}"),
        })
    }

    pub fn get_or<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Error>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }
}

/// Comma-separated list, e.g. `10,20,30`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<usize>);

impl FromStr for List {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}' in '{s}': {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let cfg = ConfigFile::parse("seed = 3\nmax-epochs=9 # short\n\n", Path::new("run.cfg")).unwrap();
        assert_eq!(cfg.get::<u64>("seed", None).unwrap(), Some(3));
        assert_eq!(cfg.get("seed", Some(5u64)).unwrap(), Some(5));
        assert_eq!(cfg.get_or("max_epochs", None, 100usize).unwrap(), 9);
        assert_eq!(cfg.get_or("batch_size", None, 32usize).unwrap(), 32);
    }

    #[test]
    fn bad_entries_name_the_line() {
        let e = ConfigFile::parse("seed = 1\nbogus = 2\n", Path::new("run.cfg")).unwrap_err();
        assert!(e.to_string().contains("run.cfg:2") && e.to_string().contains("bogus"), "{e}");
        let cfg = ConfigFile::parse("\nseed = x\n", Path::new("run.cfg")).unwrap();
        assert!(cfg.get::<u64>("seed", None).unwrap_err().to_string().contains("run.cfg:2"));
        assert!(ConfigFile::parse("seed 1", Path::new("c")).is_err());
        assert!(ConfigFile::parse("seed=1\nseed=2", Path::new("c")).is_err());
    }

    #[test]
    fn lists_parse() {
        assert_eq!("10, 20,30".parse::<List>().unwrap(), List(vec![10, 20, 30]));
        assert!("10,x".parse::<List>().is_err());
    }
}
