//! Run configuration: a flat TOML document with an `[optimizer]` table.
//!
//! ```toml
//! d = 2000
//! n = 20
//! s = 80
//! sigma_p = 0.223606797749979
//! orthogonal = true
//! sigma_0 = 0.0022360679774997899
//! m_v = 20
//! m_k = 100
//! iters = 2000
//! L = 2
//! seed = 1
//!
//! [optimizer]
//! kind = "signgd"
//! eta = 1e-4
//! ```
//!
//! Optional keys: `zoom` (factor of a prepended micro-step segment covering
//! two main steps, probed on the same cadence counted in micro-steps),
//! `trainable_head`, and a `[probe]` table with `dense_until`, `every`,
//! `test_every`, `n_test`.

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, DEFAULT_TEST_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{Cadence, OptimizerSpec, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default = "default_dense")]
    pub dense_until: u64,
    #[serde(default = "default_every")]
    pub every: u64,
    /// Test loss is evaluated at multiples of this step count and at the
    /// end; 0 disables it.
    #[serde(default = "default_test_every")]
    pub test_every: u64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

fn default_dense() -> u64 {
    50
}
fn default_every() -> u64 {
    10
}
fn default_test_every() -> u64 {
    100
}
fn default_n_test() -> usize {
    DEFAULT_TEST_SIZE
}
fn default_context_len() -> usize {
    2
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { dense_until: default_dense(), every: default_every(), test_every: default_test_every(), n_test: default_n_test() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub n: usize,
    pub s: usize,
    pub sigma_p: f64,
    pub orthogonal: bool,
    pub sigma_0: f64,
    pub m_v: usize,
    pub m_k: usize,
    pub iters: u64,
    #[serde(rename = "L", default = "default_context_len")]
    pub context_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<u64>,
    #[serde(default)]
    pub trainable_head: bool,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub probe: ProbeSettings,
}

impl RunConfig {
    /// Data setting (a) at dimension `d` with SignGD, `eta = 1e-4`.
    pub fn row_a(d: usize, seed: u64) -> Self {
        let data = DataConfig::row_a(d, seed);
        let model = ModelConfig::row_a(d, seed);
        Self {
            d,
            n: data.n,
            s: data.s,
            sigma_p: data.sigma_p,
            orthogonal: true,
            sigma_0: model.sigma_0,
            m_v: model.m_v,
            m_k: model.m_k,
            iters: 2000,
            context_len: 2,
            seed,
            zoom: None,
            trainable_head: false,
            optimizer: OptimizerSpec::signgd(1e-4),
            probe: ProbeSettings::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            d: self.d,
            s: self.s,
            n: self.n,
            context_len: self.context_len,
            sigma_p: self.sigma_p,
            orthogonal: self.orthogonal,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            m_k: self.m_k,
            m_v: self.m_v,
            context_len: self.context_len,
            sigma_0: self.sigma_0,
            init_seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            iters: self.iters,
            cadence: Cadence { dense_until: self.probe.dense_until, every: self.probe.every.max(1) },
            test_every: (self.probe.test_every > 0).then_some(self.probe.test_every),
            n_test: self.probe.n_test,
            test_seed: self.seed,
            trainable_head: self.trainable_head,
            time_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate()?;
        self.model_config().validate()?;
        self.optimizer.validate()?;
        if self.zoom == Some(0) {
            return Err(Error::Config("zoom must be at least 1".into()));
        }
        if self.probe.test_every > 0 && self.probe.n_test == 0 {
            return Err(Error::Config("probe.n_test must be positive when test loss is enabled".into()));
        }
        Ok(())
    }

    /// Sets a possibly dotted key (`optimizer.beta1`) to a TOML value and
    /// re-validates.
    pub fn with_override(&self, key: &str, value: &toml::Value) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("key {key:?}: {part:?} is not inside a table")))?;
            if depth + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            slot = table.entry((*part).to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let out: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {e}")))?;
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW_A: &str = r#"
d = 2000
n = 20
s = 80
sigma_p = 0.223606797749979
orthogonal = true
sigma_0 = 0.0022360679774997899
m_v = 20
m_k = 100
iters = 2000

[optimizer]
kind = "signgd"
eta = 1e-4
"#;

    #[test]
    fn parses_minimal_file() {
        let c = RunConfig::parse(ROW_A).unwrap();
        assert_eq!(c.context_len, 2);
        assert_eq!(c.probe, ProbeSettings::default());
        assert_eq!(c.optimizer, OptimizerSpec::signgd(1e-4));
    }

    #[test]
    fn missing_field_is_named() {
        let text = ROW_A.replace("s = 80\n", "");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("`s`"), "{err}");
    }

    #[test]
    fn bad_value_reports_line() {
        let text = ROW_A.replace("n = 20", "n = \"twenty\"");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 3") || err.contains("3 |"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!("{ROW_A}\n[probe]\ncadence = 3\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn dotted_override() {
        let c = RunConfig::row_a(100, 3);
        let c2 = c.with_override("optimizer.beta1", &toml::Value::Float(0.5)).unwrap();
        assert_eq!(c2.optimizer.beta1, 0.5);
        let c3 = c.with_override("seed", &toml::Value::Integer(9)).unwrap();
        assert_eq!(c3.seed, 9);
        assert!(c.with_override("optimizer.eta", &toml::Value::Float(-1.0)).is_err());
    }
}
