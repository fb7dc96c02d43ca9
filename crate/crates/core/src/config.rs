//! Cohort configuration, shared by the server, the clients and the harness.
//!
//! The file format is TOML:
//!
//! ```toml
//! n = 20
//! t = 13
//! epoch_len = 10
//! rounds = 50
//! dim = 1000
//! mode = "chronos"
//! seed = 7
//! dropouts = 3        # the last 3 clients are absent ...
//! dropout_from = 1    # ... from this round on
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::QuantConfig;
use crate::id::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Trusted enclave backend: sealed seeds, non-rewindable counter.
    Chronos,
    /// Same protocol with seeds and counter in plain, rewindable files.
    ChronosSw,
    /// Unmasked quantized gradients; no key establishment.
    Plaintext,
    /// Full key establishment inside every round.
    Sync,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Chronos, Mode::ChronosSw, Mode::Plaintext, Mode::Sync];

    pub fn masked(self) -> bool {
        self != Mode::Plaintext
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Chronos => "chronos",
            Mode::ChronosSw => "chronos-sw",
            Mode::Plaintext => "plaintext",
            Mode::Sync => "sync",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
}

/// File representation with defaults. Converted into a validated
/// [`CohortConfig`] by [`CohortConfig::from_file_config`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub n: usize,
    pub t: usize,
    pub epoch_len: u32,
    pub rounds: u32,
    pub dim: usize,
    pub scale: u32,
    pub g_max: f64,
    pub seed: u64,
    pub mode: Mode,
    pub quorum: Option<usize>,
    pub round_timeout_ms: u64,
    pub idle_timeout_ms: u64,
    pub max_samples: u32,
    pub learning_rate: f64,
    pub dropouts: usize,
    pub dropout_from: u32,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            n: 20,
            t: 13,
            epoch_len: 10,
            rounds: 50,
            dim: 1000,
            scale: QuantConfig::DEFAULT_SCALE,
            g_max: QuantConfig::DEFAULT_G_MAX,
            seed: 1,
            mode: Mode::Chronos,
            quorum: None,
            round_timeout_ms: 100,
            idle_timeout_ms: 5000,
            max_samples: 500,
            learning_rate: 0.1,
            dropouts: 0,
            dropout_from: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortConfig {
    pub n: usize,
    pub t: usize,
    pub epoch_len: u32,
    pub rounds: u32,
    pub dim: usize,
    pub quant: QuantConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Minimum announces (and healthy establishers) for an epoch to start.
    pub quorum: usize,
    pub round_timeout: Duration,
    pub idle_timeout: Duration,
    /// Reference sample count for FedAvg pre-weighting.
    pub max_samples: u32,
    pub learning_rate: f64,
    pub dropouts: usize,
    pub dropout_from: u32,
}

impl CohortConfig {
    /// Defaults for a cohort of `n` with threshold `t`.
    pub fn new(n: usize, t: usize) -> Result<Self, ConfigError> {
        CohortConfig::from_file_config(FileConfig {
            n,
            t,
            ..FileConfig::default()
        })
    }

    pub fn from_file_config(f: FileConfig) -> Result<Self, ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if f.n == 0 || f.n > 254 {
            return bad(format!("n = {} outside 1..=254", f.n));
        }
        if f.mode.masked() {
            if f.n < 2 {
                return bad("masked modes need n >= 2".into());
            }
            if f.t < 1 || f.t > f.n - 1 {
                return bad(format!("threshold t = {} outside 1..={}", f.t, f.n - 1));
            }
        }
        if f.epoch_len == 0 {
            return bad("epoch_len must be positive".into());
        }
        if f.dim == 0 {
            return bad("dim must be positive".into());
        }
        if f.max_samples == 0 {
            return bad("max_samples must be positive".into());
        }
        if f.dropouts > f.n {
            return bad(format!("dropouts = {} exceeds n = {}", f.dropouts, f.n));
        }
        if f.dropout_from == 0 {
            return bad("dropout_from counts rounds from 1".into());
        }
        let quorum = f.quorum.unwrap_or(f.n);
        if quorum == 0 || quorum > f.n {
            return bad(format!("quorum = {quorum} outside 1..={}", f.n));
        }
        if f.mode.masked() && quorum < f.t + 1 {
            return bad(format!("quorum = {quorum} below t + 1 = {}", f.t + 1));
        }
        let quant = QuantConfig::new(f.scale, f.g_max, f.n as u32).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(CohortConfig {
            n: f.n,
            t: f.t,
            epoch_len: f.epoch_len,
            rounds: f.rounds,
            dim: f.dim,
            quant,
            seed: f.seed,
            mode: f.mode,
            quorum,
            round_timeout: Duration::from_millis(f.round_timeout_ms),
            idle_timeout: Duration::from_millis(f.idle_timeout_ms),
            max_samples: f.max_samples,
            learning_rate: f.learning_rate,
            dropouts: f.dropouts,
            dropout_from: f.dropout_from,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        CohortConfig::from_file_config(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        CohortConfig::parse(&text)
    }

    pub fn to_file_config(&self) -> FileConfig {
        FileConfig {
            n: self.n,
            t: self.t,
            epoch_len: self.epoch_len,
            rounds: self.rounds,
            dim: self.dim,
            scale: self.quant.scale(),
            g_max: self.quant.g_max(),
            seed: self.seed,
            mode: self.mode,
            quorum: Some(self.quorum),
            round_timeout_ms: self.round_timeout.as_millis() as u64,
            idle_timeout_ms: self.idle_timeout.as_millis() as u64,
            max_samples: self.max_samples,
            learning_rate: self.learning_rate,
            dropouts: self.dropouts,
            dropout_from: self.dropout_from,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file_config()).expect("config serializes")
    }

    /// Re-validates after fields were edited in place.
    pub fn validated(self) -> Result<Self, ConfigError> {
        CohortConfig::from_file_config(self.to_file_config())
    }

    /// Device ids of the cohort: `1..=n`.
    pub fn client_ids(&self) -> Vec<DeviceId> {
        (1..=self.n as u64).map(DeviceId).collect()
    }

    /// Clients scheduled to be permanently absent: the last `dropouts` ids.
    pub fn dropout_ids(&self) -> Vec<DeviceId> {
        self.client_ids().split_off(self.n - self.dropouts)
    }

    /// Rounds in epoch `e` (1-based); empty past the schedule.
    pub fn epoch_rounds(&self, epoch: u32) -> std::ops::RangeInclusive<u32> {
        let first = (epoch - 1) * self.epoch_len + 1;
        let last = (epoch * self.epoch_len).min(self.rounds);
        first..=last
    }

    pub fn epochs(&self) -> u32 {
        self.rounds.div_ceil(self.epoch_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_bounds() {
        assert!(CohortConfig::new(20, 13).is_ok());
        assert!(CohortConfig::new(20, 19).is_ok());
        assert!(CohortConfig::new(20, 20).is_err());
        assert!(CohortConfig::new(20, 0).is_err());
        assert!(CohortConfig::new(1, 1).is_err());
        assert!(CohortConfig::new(2, 1).is_ok());
    }

    #[test]
    fn aliasing_constraint_checked_against_n() {
        // 2^15 * 1024 * 2 * 32 > p
        assert!(CohortConfig::new(32, 13).is_err());
        let f = FileConfig {
            n: 32,
            t: 13,
            g_max: 512.0,
            ..FileConfig::default()
        };
        assert!(CohortConfig::from_file_config(f).is_ok());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = CohortConfig::parse("n = 5\nt = 3\nmode = \"chronos-sw\"\ndim = 16\n").unwrap();
        assert_eq!(c.mode, Mode::ChronosSw);
        assert_eq!(c.quorum, 5);
        assert_eq!(c.round_timeout, Duration::from_millis(100));
        assert_eq!(CohortConfig::parse(&c.to_toml()).unwrap(), c);
        assert!(CohortConfig::parse("n = 5\nbogus = 1\n").is_err());
        assert!(CohortConfig::parse("n = 5\nt = 3\nmode = \"fast\"\n").is_err());
    }

    #[test]
    fn schedule() {
        let c = CohortConfig::parse("n = 4\nt = 2\nrounds = 25\nepoch_len = 10\n").unwrap();
        assert_eq!(c.epochs(), 3);
        assert_eq!(c.epoch_rounds(1), 1..=10);
        assert_eq!(c.epoch_rounds(3), 21..=25);
        let d = CohortConfig::parse("n = 4\nt = 2\ndropouts = 2\n").unwrap();
        assert_eq!(d.dropout_ids(), vec![DeviceId(3), DeviceId(4)]);
    }

    #[test]
    fn plaintext_allows_single_client() {
        let c = CohortConfig::parse("n = 1\nt = 0\nmode = \"plaintext\"\n").unwrap();
        assert_eq!(c.client_ids(), vec![DeviceId(1)]);
    }
}
