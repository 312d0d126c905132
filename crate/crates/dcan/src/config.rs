//! JSON run configuration: the trainer fields at top level plus an optional
//! nested `dataset` block. Every field has a default, so `{}` is a complete
//! configuration.

use std::path::{Path, PathBuf};

use dcan_core::datasets::make_partial_target;
use dcan_core::{make_shifted_clusters, ClusterSpec, DomainDataset, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::load_csv;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Clusters,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Cluster count for generated data. For CSV data the class count is
    /// inferred from the labels unless given here.
    pub classes: Option<usize>,
    pub per_class: usize,
    pub radius: f64,
    pub shift: [f64; 2],
    pub rotation: f64,
    pub noise: f64,
    /// Generator seed; falls back to the run seed.
    pub seed: Option<u64>,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    /// Restrict the target to classes `0..keep_classes`.
    pub keep_classes: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let c = ClusterSpec::default();
        Self {
            kind: DatasetKind::Clusters,
            classes: None,
            per_class: c.per_class,
            radius: c.radius,
            shift: c.shift,
            rotation: c.rotation,
            noise: c.noise,
            seed: None,
            source_csv: None,
            target_csv: None,
            keep_classes: None,
        }
    }
}

impl DatasetConfig {
    pub fn cluster_spec(&self, run_seed: u64) -> ClusterSpec {
        ClusterSpec {
            classes: self.classes.unwrap_or(ClusterSpec::default().classes),
            per_class: self.per_class,
            radius: self.radius,
            shift: self.shift,
            rotation: self.rotation,
            noise: self.noise,
            seed: self.seed.unwrap_or(run_seed),
        }
    }

    /// Builds `(source, target)`. Relative CSV paths resolve against `base`.
    pub fn build(&self, run_seed: u64, base: &Path) -> Result<(DomainDataset, DomainDataset)> {
        let (source, target) = match self.kind {
            DatasetKind::Clusters => make_shifted_clusters(&self.cluster_spec(run_seed))?,
            DatasetKind::Csv => {
                let path = |p: &Option<PathBuf>, key: &str| {
                    p.as_ref().map(|p| base.join(p)).ok_or_else(|| {
                        CliError::Config(format!("dataset.{key} is required for kind \"csv\""))
                    })
                };
                let (sp, tp) = (
                    path(&self.source_csv, "source_csv")?,
                    path(&self.target_csv, "target_csv")?,
                );
                let s = load_csv(&sp, self.classes)?;
                let t = load_csv(&tp, self.classes)?;
                // Both domains share the larger of the two inferred label spaces.
                let c = s.class_count().max(t.class_count());
                let widen = |d: DomainDataset, name: &str| {
                    DomainDataset::new(d.x().clone(), d.labels().to_vec(), c, name)
                };
                (widen(s, "source")?, widen(t, "target")?)
            }
        };
        let target = match self.keep_classes {
            Some(k) => make_partial_target(&target, k)?,
            None => target,
        };
        Ok((source, target))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(CliError::Config("top level must be a JSON object".into()));
        };
        let dataset = match map.remove("dataset") {
            Some(v) => {
                serde_json::from_value(v).map_err(|e| CliError::Config(format!("dataset: {e}")))?
            }
            None => DatasetConfig::default(),
        };
        let train: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = Self { train, dataset };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.kind == DatasetKind::Clusters {
            self.dataset.cluster_spec(self.train.seed).validate()?;
            if let Some(k) = self.dataset.keep_classes {
                let c = self.dataset.cluster_spec(0).classes;
                if k == 0 || k > c {
                    return Err(CliError::Config(format!(
                        "dataset.keep_classes {k} outside 1..={c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The full effective configuration, defaults included.
    pub fn to_json(&self) -> Value {
        let mut map = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        map.insert(
            "dataset".into(),
            serde_json::to_value(&self.dataset).unwrap_or(Value::Null),
        );
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcan_core::Mode;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lambda0, 0.1);
        assert_eq!(cfg.train.lambda1, 0.2);
        assert_eq!(cfg.train.gamma0, 0.95);
        assert_eq!(cfg.train.batch_n, 32);
    }

    #[test]
    fn partial_mode_parses() {
        let cfg = RunConfig::parse(
            r#"{"mode": "partial", "gamma1": 1.5, "dataset": {"keep_classes": 3}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.mode, Mode::Partial);
        assert_eq!(cfg.train.gamma1, 1.5);
        assert_eq!(cfg.dataset.keep_classes, Some(3));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse(r#"{"lamda0": 0.1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("lamda0"), "{err}");
        let err = RunConfig::parse(r#"{"dataset": {"rotaton": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("rotaton"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"gamma0": 1.5}"#,
            r#"{"batch_n": 1}"#,
            "[1]",
            "{",
            r#"{"dataset": {"keep_classes": 9}}"#,
        ] {
            assert_eq!(RunConfig::parse(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse(
            r#"{"lambda0": 0.25, "dataset": {"rotation": 0.3, "keep_classes": 2}}"#,
        )
        .unwrap();
        let echoed = RunConfig::parse(&cfg.to_json().to_string()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn dataset_seed_follows_run_seed() {
        let d = DatasetConfig::default();
        assert_eq!(d.cluster_spec(7).seed, 7);
        let pinned = DatasetConfig {
            seed: Some(3),
            ..DatasetConfig::default()
        };
        assert_eq!(pinned.cluster_spec(7).seed, 3);
    }
}
