//! `key=value` configuration files and flag > file > default resolution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Bad command line or configuration; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Every key a configuration file may set, with its built-in default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("precision", "f32"),
    ("out", "wemoe-out"),
    ("tasks", "stripe-orientation,glyph-template,corner-quadrant,ring-radius"),
    ("classes", "4"),
    ("n_train", "512"),
    ("n_test", "256"),
    ("noise", "0.05"),
    ("generic_classes", "4"),
    ("generic_train", "2048"),
    ("image_size", "32"),
    ("patch_size", "8"),
    ("d_model", "64"),
    ("n_heads", "4"),
    ("n_blocks", "6"),
    ("mlp_hidden", "256"),
    ("pretrain_epochs", "4"),
    ("pretrain_lr", "0.001"),
    ("pretrain_batch", "64"),
    ("finetune_epochs", "4"),
    ("finetune_lr", "0.0005"),
    ("finetune_batch", "32"),
    ("probe_epochs", "10"),
    ("probe_lr", "0.01"),
    ("strategy", "mlp-only"),
    ("lambda", "0.3"),
    ("lfc", "2"),
    ("rho", "0"),
    ("shared_router", "false"),
    ("steps", "200"),
    ("lr", "0.001"),
    ("batch", "16"),
    ("protocol", "standard"),
    ("methods", "pretrained,individual,weight-averaging,task-arithmetic,wemoe,e-wemoe-90%"),
    ("seen", ""),
    ("unseen", ""),
    ("corruptions", "gaussian-noise@3,impulse-noise@3,contrast@3,pixelate@3"),
    ("adapt_on_clean", "false"),
    ("layers", ""),
    ("pair", "0,1"),
    ("grid", "11"),
    ("grid_min", "-1"),
    ("grid_max", "1"),
    ("landscape_samples", "128"),
];

/// Parsed configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected key=value, got `{raw}`", i + 1)))?;
            let k = k.trim();
            if !DEFAULTS.iter().any(|(d, _)| *d == k) {
                return Err(UsageError(format!("config line {}: unknown key `{k}`", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Ok(Self::parse(&text)?)
    }
}

/// Resolved settings: explicit flags over the file over the defaults.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    flags: BTreeMap<String, String>,
    file: ConfigFile,
}

impl Settings {
    pub fn new(file: ConfigFile) -> Self {
        Settings {
            flags: BTreeMap::new(),
            file,
        }
    }

    /// Records a flag value when the flag was given.
    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.flags.insert(key.to_string(), v.to_string());
        }
    }

    /// Boolean switches only override when present.
    pub fn switch(&mut self, key: &str, on: bool) {
        if on {
            self.flags.insert(key.to_string(), "true".into());
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.flags.get(key) {
            return v;
        }
        if let Some(v) = self.file.values.get(key) {
            return v;
        }
        DEFAULTS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no default for `{key}`"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, UsageError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| UsageError(format!("invalid value `{raw}` for {key}: {e}")))
    }

    /// Comma-separated list; empty means none.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, UsageError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| UsageError(format!("invalid item `{s}` in {key}: {e}"))))
            .collect()
    }

    /// `key=value` lines for the given keys, used to fingerprint a stage.
    pub fn describe(&self, keys: &[&str]) -> String {
        keys.iter().map(|k| format!("{k}={}\n", self.raw(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let f = ConfigFile::parse("# header\n\nseed = 7 # trailing\nlambda=0.25\n").unwrap();
        assert_eq!(f.values["seed"], "7");
        assert_eq!(f.values["lambda"], "0.25");
        assert!(ConfigFile::parse("seed 7").is_err());
        assert!(ConfigFile::parse("colour=red").is_err());
    }

    #[test]
    fn precedence_matrix() {
        for (flag, file, expect) in [
            (None, None, 0u64),
            (None, Some(5u64), 5),
            (Some(9u64), None, 9),
            (Some(9u64), Some(5u64), 9),
        ] {
            let text = file.map_or(String::new(), |v| format!("seed={v}\n"));
            let mut s = Settings::new(ConfigFile::parse(&text).unwrap());
            s.flag("seed", flag);
            assert_eq!(s.get::<u64>("seed").unwrap(), expect, "flag {flag:?} file {file:?}");
        }
    }

    #[test]
    fn switches_never_clear_a_file_value() {
        let mut s = Settings::new(ConfigFile::parse("shared_router=true").unwrap());
        s.switch("shared_router", false);
        assert!(s.get::<bool>("shared_router").unwrap());
        let mut s = Settings::new(ConfigFile::default());
        s.switch("shared_router", true);
        assert!(s.get::<bool>("shared_router").unwrap());
    }

    #[test]
    fn every_default_parses() {
        let s = Settings::default();
        for (k, _) in DEFAULTS {
            let _ = s.raw(k);
        }
        assert_eq!(s.list::<usize>("pair").unwrap(), vec![0, 1]);
        assert!(s.list::<usize>("seen").unwrap().is_empty());
        assert!(s.get::<f64>("lambda").is_ok());
    }
}
