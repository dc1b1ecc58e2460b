use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Exclusion, SyntheticConfig};
use crate::error::{FusionError, Result};
use crate::estimators::{TLearnerConfig, TrainConfig};

/// Estimators a grid can run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Pd,
    Penalty,
    DualOnly,
    IpmOnly,
    Weighted(f64),
    ObsOnly,
    RctOnly,
    TLearner,
}

impl Method {
    pub const SECTION4: [Method; 7] = [
        Method::Pd,
        Method::DualOnly,
        Method::IpmOnly,
        Method::Weighted(1.0),
        Method::ObsOnly,
        Method::RctOnly,
        Method::TLearner,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Pd => f.write_str("pd"),
            Method::Penalty => f.write_str("penalty"),
            Method::DualOnly => f.write_str("dual_only"),
            Method::IpmOnly => f.write_str("ipm_only"),
            Method::Weighted(a) => write!(f, "weighted:{a}"),
            Method::ObsOnly => f.write_str("obs_only"),
            Method::RctOnly => f.write_str("rct_only"),
            Method::TLearner => f.write_str("t_learner"),
        }
    }
}

impl FromStr for Method {
    type Err = FusionError;

    /// Accepts `weighted:1`, `weighted:alpha=1` and plain `weighted` (alpha 1).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "pd" => Method::Pd,
            "penalty" => Method::Penalty,
            "dual_only" => Method::DualOnly,
            "ipm_only" => Method::IpmOnly,
            "weighted" => Method::Weighted(1.0),
            "obs_only" => Method::ObsOnly,
            "rct_only" => Method::RctOnly,
            "t_learner" => Method::TLearner,
            _ => {
                let alpha = s
                    .strip_prefix("weighted:")
                    .map(|a| a.strip_prefix("alpha=").unwrap_or(a))
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| FusionError::Parse(format!("unknown method `{s}`")))?;
                if !(alpha.is_finite() && alpha >= 0.0) {
                    return Err(FusionError::Parse(format!("weighted alpha must be >= 0, got {alpha}")));
                }
                Method::Weighted(alpha)
            }
        })
    }
}

impl TryFrom<String> for Method {
    type Error = FusionError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// The grid's dial and seed replace `overlap_dial` and `seed`.
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        /// Draw a fresh structural exclusion half-plane per dataset seed.
        #[serde(default)]
        random_exclusion: bool,
    },
    /// A fixed pooled CSV; the dial only labels the rows.
    Csv { path: PathBuf },
}

impl DatasetSpec {
    pub fn materialize(&self, dial: f64, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                config,
                random_exclusion,
            } => {
                let mut cfg = config.clone();
                cfg.overlap_dial = dial;
                cfg.seed = seed;
                if *random_exclusion {
                    cfg.exclusion = Some(Exclusion::random(seed));
                }
                crate::datagen::gen_synthetic(&cfg)
            }
            DatasetSpec::Csv { path } => Dataset::load_csv(path),
        }
    }
}

/// Columns of the formatted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableStyle {
    #[default]
    QiniMse,
    MseGIpm,
}

/// One experiment grid: every method on every `(dial, seed)` dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    /// Dataset seeds; training and split seeds are derived from them.
    pub seeds: Vec<u64>,
    #[serde(default = "default_dials")]
    pub dials: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub t_learner: TLearnerConfig,
    /// Partial JSON objects merged over `train` (or `t_learner`) per method name.
    #[serde(default)]
    pub overrides: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub table: TableStyle,
    #[serde(default)]
    pub write_traces: bool,
    pub out: PathBuf,
}

fn default_dials() -> Vec<f64> {
    vec![0.0]
}

fn default_test_frac() -> f64 {
    0.2
}

/// Training iterations of the shipped presets, sized so the 210-run
/// reproduction grid finishes within half an hour on one core.
pub const PRESET_ITERS: usize = 600;

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl ExperimentConfig {
    /// 3 dials x 10 seeds x 7 methods at 5,000 rows per dataset.
    pub fn section4(out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                config: SyntheticConfig::section4(0.0, 0),
                random_exclusion: false,
            },
            methods: Method::SECTION4.to_vec(),
            seeds: (1..=10).collect(),
            dials: vec![0.0, 0.5, 1.0],
            master_seed: 0,
            test_frac: 0.2,
            train: TrainConfig {
                iters: PRESET_ITERS,
                log_every: 10,
                ..TrainConfig::default()
            },
            t_learner: TLearnerConfig {
                iters: PRESET_ITERS,
                ..TLearnerConfig::default()
            },
            overrides: BTreeMap::new(),
            table: TableStyle::QiniMse,
            write_traces: true,
            out: out.into(),
        }
    }

    /// Ten minimal-overlap datasets, each with its own random structural exclusion.
    pub fn severe(out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                config: SyntheticConfig::section4(0.0, 0),
                random_exclusion: true,
            },
            dials: vec![0.0],
            table: TableStyle::MseGIpm,
            ..Self::section4(out)
        }
    }

    pub fn preset(name: &str, out: impl Into<PathBuf>) -> Result<Self> {
        match name {
            "section4" => Ok(Self::section4(out)),
            "severe" => Ok(Self::severe(out)),
            _ => Err(FusionError::InvalidConfig(format!(
                "unknown preset `{name}` (expected section4 or severe)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.dials.is_empty() {
            return bad("dial list is empty".into());
        }
        if let Some(d) = self.dials.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return bad(format!("overlap dial {d} outside [0, 1]"));
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return bad(format!("test fraction {} outside (0, 1)", self.test_frac));
        }
        let names: Vec<String> = self.methods.iter().map(|m| m.to_string()).collect();
        if let Some(k) = self.overrides.keys().find(|k| !names.contains(k)) {
            return bad(format!("override for `{k}` which is not in the method list"));
        }
        for m in &self.methods {
            if *m == Method::TLearner {
                self.t_learner_config()?;
            } else {
                self.train_config(*m)?.validate()?;
            }
        }
        Ok(())
    }

    /// `train` with the method's override merged in.
    pub fn train_config(&self, method: Method) -> Result<TrainConfig> {
        self.resolve(&self.train, method)
    }

    pub fn t_learner_config(&self) -> Result<TLearnerConfig> {
        self.resolve(&self.t_learner, Method::TLearner)
    }

    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, base: &T, method: Method) -> Result<T> {
        match self.overrides.get(&method.to_string()) {
            None => Ok(serde_json::from_value(serde_json::to_value(base)?)?),
            Some(patch) => {
                let mut v = serde_json::to_value(base)?;
                merge(&mut v, patch);
                serde_json::from_value(v)
                    .map_err(|e| FusionError::InvalidConfig(format!("override for `{method}`: {e}")))
            }
        }
    }
}
