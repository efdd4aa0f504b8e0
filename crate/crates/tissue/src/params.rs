//! Tissue parameters and the key=value parameter file format.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// Default exclusive upper bound on antigen values.
pub const DEFAULT_ANTIGEN_ALPHABET: u32 = 1024;

/// Default RNG seed when a parameter file does not set one.
pub const DEFAULT_RNG_SEED: u64 = 1;

/// Sizing and pacing parameters for one tissue compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TissueParams {
    /// Capacity of the tissue antigen store.
    pub max_antigen: usize,
    /// Number of cytokine signals carried by the tissue. The signal store
    /// always has at least one slot so internal signalling keeps working
    /// when this is zero.
    pub max_cytokines: usize,
    /// Capacity of the cell store.
    pub max_cells: usize,
    /// Microseconds per tick when running in real time.
    pub cell_update_rate_us: u64,
    /// Copies written into the antigen store per ingested antigen.
    pub antigen_multiplier: usize,
    /// Microseconds between probe samples.
    pub probe_rate_us: u64,
    /// Antigen values must lie in `0..antigen_alphabet`.
    pub antigen_alphabet: u32,
    /// Seed for the compartment's random stream.
    pub rng_seed: u64,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            max_antigen: 1000,
            max_cytokines: 0,
            max_cells: 100,
            cell_update_rate_us: 100_000,
            antigen_multiplier: 10,
            probe_rate_us: 1_000_000,
            antigen_alphabet: DEFAULT_ANTIGEN_ALPHABET,
            rng_seed: DEFAULT_RNG_SEED,
        }
    }
}

impl TissueParams {
    /// Number of slots in the signal store (at least one).
    pub fn signal_slots(&self) -> usize {
        self.max_cytokines.max(1)
    }

    /// Checks every field and returns the params unchanged when valid.
    pub fn validated(self) -> Result<Self, ParamError> {
        if self.max_antigen == 0 {
            return Err(ParamError::EmptyAntigenStore);
        }
        if self.max_cells == 0 {
            return Err(ParamError::EmptyCellStore);
        }
        if self.antigen_multiplier == 0 {
            return Err(ParamError::ZeroMultiplier);
        }
        if self.cell_update_rate_us == 0 {
            return Err(ParamError::ZeroUpdateRate);
        }
        if self.probe_rate_us == 0 {
            return Err(ParamError::ZeroProbeRate);
        }
        if self.antigen_alphabet == 0 {
            return Err(ParamError::EmptyAlphabet);
        }
        Ok(self)
    }

    /// Reads tissue params from a key=value file, rejecting unknown keys.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, KvError> {
        let mut kv = KvFile::load(path)?;
        let params = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(params)
    }

    /// Consumes this struct's keys from a parsed key=value file. Keys that
    /// belong to other consumers are left in place; call [`KvFile::finish`]
    /// once everything expected has been taken.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self, KvError> {
        let mut params = TissueParams::default();
        if let Some(v) = kv.take_usize("max_antigen")? {
            params.max_antigen = v;
        }
        if let Some(v) = kv.take_usize("max_cytokines")? {
            params.max_cytokines = v;
        }
        if let Some(v) = kv.take_usize("max_cells")? {
            params.max_cells = v;
        }
        if let Some(v) = kv.take_u64("cell_update_rate")? {
            params.cell_update_rate_us = v;
        }
        if let Some(v) = kv.take_usize("antigen_multiplier")? {
            params.antigen_multiplier = v;
        }
        if let Some(v) = kv.take_u64("probe_rate")? {
            params.probe_rate_us = v;
        }
        if let Some(v) = kv.take_u32("antigen_alphabet")? {
            params.antigen_alphabet = v;
        }
        if let Some(v) = kv.take_u64("rng_seed")? {
            params.rng_seed = v;
        }
        params.validated().map_err(KvError::Invalid)
    }
}

/// A rejected parameter combination, one variant per distinct cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ParamError {
    #[error("empty antigen store: max_antigen must be at least 1")]
    EmptyAntigenStore,
    #[error("empty cell store: max_cells must be at least 1")]
    EmptyCellStore,
    #[error("antigen_multiplier must be at least 1")]
    ZeroMultiplier,
    #[error("cell_update_rate must be a positive number of microseconds")]
    ZeroUpdateRate,
    #[error("probe_rate must be a positive number of microseconds")]
    ZeroProbeRate,
    #[error("antigen_alphabet must be at least 1")]
    EmptyAlphabet,
}

/// A failure while reading a key=value parameter file.
#[derive(Debug, Error)]
pub enum KvError {
    #[error("cannot read parameter file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key:?}: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error(transparent)]
    Invalid(#[from] ParamError),
}

/// A parsed key=value file. Consumers take the keys they understand; any
/// left over at [`KvFile::finish`] are reported as unknown.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl KvFile {
    /// Parses parameter text. Blank lines and `#` comments are ignored;
    /// duplicate keys are rejected immediately.
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries: Vec<Entry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| KvError::Malformed {
                line,
                text: stripped.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(KvError::Malformed {
                    line,
                    text: stripped.to_string(),
                });
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(KvError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(KvFile { entries })
    }

    /// Reads and parses a parameter file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KvError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Removes and returns the raw value for `key`, if present.
    pub fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let pos = self.entries.iter().position(|e| e.key == key)?;
        let entry = self.entries.remove(pos);
        Some((entry.value, entry.line))
    }

    /// Errors if any keys were never taken.
    pub fn finish(self) -> Result<(), KvError> {
        match self.entries.into_iter().next() {
            Some(entry) => Err(KvError::UnknownKey {
                line: entry.line,
                key: entry.key,
            }),
            None => Ok(()),
        }
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>, KvError> {
        self.take_parsed(key)
    }

    pub fn take_u32(&mut self, key: &str) -> Result<Option<u32>, KvError> {
        self.take_parsed(key)
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>, KvError> {
        self.take_parsed(key)
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>, KvError> {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => match value.as_str() {
                "true" | "1" | "yes" | "on" => Ok(Some(true)),
                "false" | "0" | "no" | "off" => Ok(Some(false)),
                other => Err(KvError::BadValue {
                    line,
                    key: key.to_string(),
                    reason: format!("expected a boolean, got {other:?}"),
                }),
            },
        }
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => match value.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(e) => Err(KvError::BadValue {
                    line,
                    key: key.to_string(),
                    reason: format!("{e} (got {value:?})"),
                }),
            },
        }
    }
}
