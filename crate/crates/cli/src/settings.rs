//! Flat `key=value` configuration with command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpmld::data::{parse_key_values, DataError};
use dpmld::privacy::PrivacyError;
use dpmld::trainer::TrainError;

pub const SEED_ENV: &str = "DPMLD_SEED";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    AuditViolation(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::AuditViolation(_) => 4,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::AuditViolation(m) => write!(f, "audit violation: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PrivacyError> for CliError {
    fn from(e: PrivacyError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Privacy(p) => p.into(),
            TrainError::Data(d) => d.into(),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<dpmld::audit::AuditError> for CliError {
    fn from(e: dpmld::audit::AuditError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Attaches the path to a filesystem failure; these exit as data errors.
pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Values from an optional config file, tracked so that unknown keys can be
/// reported.
pub struct Settings {
    file: BTreeMap<String, String>,
    source: Option<PathBuf>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                parse_key_values(&text)
                    .map_err(|m| CliError::Config(format!("{}: {m}", p.display())))?
            }
        };
        Ok(Self {
            file,
            source: path.map(Path::to_path_buf),
            used: BTreeSet::new(),
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                CliError::Config(format!("{key}={v} in {}: {e}", self.source_name()))
            }),
        }
    }

    fn source_name(&self) -> String {
        self.source
            .as_ref()
            .map_or_else(|| "config".into(), |p| p.display().to_string())
    }

    fn record(&mut self, key: &str, value: String) {
        self.used.insert(key.to_string());
        self.resolved.push((key.to_string(), value));
    }

    /// Flag, else file, else `default`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Flag, else file; `None` when neither is given.
    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    /// Boolean switch: a set flag wins, otherwise the file decides.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Seed from the flag, the file, then `DPMLD_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let v = match flag {
            Some(v) => v,
            None => match self.from_file::<u64>("seed")? {
                Some(v) => v,
                None => match std::env::var(SEED_ENV) {
                    Ok(s) => s.trim().parse().map_err(|e| {
                        CliError::Config(format!("{SEED_ENV}={s}: {e}"))
                    })?,
                    Err(_) => 0,
                },
            },
        };
        self.record("seed", v.to_string());
        Ok(v)
    }

    /// Fails on keys in the file that no option consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "unknown keys in {}: {}",
                self.source_name(),
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }

    /// Every resolved `key=value`, in resolution order.
    pub fn snapshot(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Comma-separated numbers, or `start:stop:step` inclusive of `stop`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumList(pub Vec<f64>);

impl FromStr for NumList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some((a, rest)) = s.split_once(':') {
            let (b, step) = rest
                .split_once(':')
                .ok_or_else(|| format!("range {s:?} needs start:stop:step"))?;
            let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(format!("range {s:?} is empty or has a non-positive step"));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            return Ok(NumList((0..=n).map(|i| a + i as f64 * step).collect()));
        }
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(NumList)
    }
}

impl Display for NumList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// `x` rounded to nine significant digits, in plain notation where that
/// stays short.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}
