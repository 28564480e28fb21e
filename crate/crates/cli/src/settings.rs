//! Flat `key = value` configuration files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    /// Parses `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped. Keys outside `known` are rejected.
    pub fn parse(text: &str, known: &[&str]) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    i + 1
                ));
            };
            let key = k.trim().replace('-', "_");
            if !known.contains(&key.as_str()) {
                return Err(format!(
                    "config line {}: unknown key `{key}` for this command (known: {})",
                    i + 1,
                    known.join(", ")
                ));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(format!("config line {}: duplicate key `{key}`", i + 1));
            }
        }
        Ok(FileConfig { values })
    }

    pub fn load(path: Option<&Path>, known: &[&str]) -> Result<Self, String> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config file {}: {e}", p.display()))?;
                Self::parse(&text, known)
            }
        }
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map_err(|e| format!("config key `{key}`: cannot parse `{s}`: {e}")),
            None => Ok(default),
        }
    }

    /// Like [`pick`](Self::pick) for comma-separated lists.
    pub fn pick_list<T>(
        &self,
        flag: Option<Vec<T>>,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| format!("config key `{key}`: cannot parse `{p}`: {e}"))
                })
                .collect(),
            None => Ok(default),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        let f = FileConfig::parse("# c\nseed = 7\n\nk=3\n", &["seed", "k", "r"]).unwrap();
        assert_eq!(f.pick(Some(1u64), "seed", 42).unwrap(), 1);
        assert_eq!(f.pick(None::<u64>, "seed", 42).unwrap(), 7);
        assert_eq!(f.pick(None::<usize>, "r", 3).unwrap(), 3);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(FileConfig::parse("bogus = 1", &["seed"]).is_err());
        assert!(FileConfig::parse("seed=1\nseed=2", &["seed"]).is_err());
        assert!(FileConfig::parse("seed", &["seed"]).is_err());
        let f = FileConfig::parse("seed = x", &["seed"]).unwrap();
        assert!(f.pick(None::<u64>, "seed", 0).is_err());
    }

    #[test]
    fn lists_split_on_commas() {
        let f = FileConfig::parse("sizes = 8, 16,32", &["sizes"]).unwrap();
        assert_eq!(
            f.pick_list(None::<Vec<usize>>, "sizes", vec![]).unwrap(),
            vec![8, 16, 32]
        );
    }
}
