//! Run configuration files.
//!
//! Input paths inside a config (network spec files, xyzl directories) are
//! resolved against the directory holding the config file. The output
//! directory is resolved against the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use pra_core::models::{build_classifier, build_keypoint_net, build_partseg_net, Ablation, GraphSpace, NetworkSpec};
use pra_core::trainkit::{generate_synthetic, Dataset, SyntheticSpec, Task, TrainConfig};
use pra_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Either an inline network description or a string naming a builtin
/// (`classifier`, `keypoint`, `partseg`) or a JSON spec file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Inline(NetworkSpec),
    Named(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSplits {
    pub train: SyntheticSpec,
    pub test: SyntheticSpec,
}

impl SyntheticSplits {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.test.validate()?;
        if self.train.classes != self.test.classes || self.train.labels != self.test.labels {
            return Err(Error::Config("train and test splits must list the same classes and label kind".into()));
        }
        if self.train.seed == self.test.seed {
            log::warn!("train and test splits share seed {}; the test clouds repeat training clouds", self.train.seed);
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        Ok((generate_synthetic(&self.train)?, generate_synthetic(&self.test)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSplits),
    Xyzl { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub network: NetworkRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    /// Fields left out take the defaults of `task`.
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub output_dir: PathBuf,
}

const BUILTINS: [&str; 3] = ["classifier", "keypoint", "partseg"];

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Reads a file, turning a missing file into a config error that names it.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid {what}: {e}")))
}

impl RunConfig {
    /// Loads and validates a config file, making relative input paths
    /// absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut raw: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        let obj = raw
            .as_object_mut()
            .ok_or_else(|| Error::Config("run config must be a JSON object".into()))?;
        let task: Task = parse_json(obj.get("task").cloned().unwrap_or(Value::Null), "task")?;
        // overlay the given train fields on the task defaults
        let mut train = serde_json::to_value(TrainConfig::for_task(task))?;
        match obj.remove("train") {
            Some(Value::Object(given)) => {
                let base = train.as_object_mut().expect("struct serializes to an object");
                for (k, v) in given {
                    base.insert(k, v);
                }
            }
            Some(Value::Null) | None => {}
            Some(_) => return Err(Error::Config("`train` must be an object".into())),
        }
        obj.insert("train".into(), train);
        obj.entry("output_dir")
            .or_insert_with(|| Value::String(default_output_dir().display().to_string()));
        let mut cfg: RunConfig = parse_json(raw, "run config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let NetworkRef::Named(name) = &mut self.network {
            if !BUILTINS.contains(&name.as_str()) {
                let mut p = PathBuf::from(&*name);
                fix(&mut p);
                *name = p.display().to_string();
            }
        }
        if let DatasetConfig::Xyzl { train, test } = &mut self.dataset {
            fix(train);
            fix(test);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let NetworkRef::Named(name) = &self.network {
            if !BUILTINS.contains(&name.as_str()) && !Path::new(name).is_file() {
                return Err(Error::Config(format!(
                    "network `{name}` is neither a builtin ({}) nor an existing file",
                    BUILTINS.join(", ")
                )));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.validate()?,
            DatasetConfig::Xyzl { train, test } => {
                for dir in [train, test] {
                    if !dir.is_dir() {
                        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic(s) => s.generate()?,
            DatasetConfig::Xyzl { train, test } => (Dataset::read_dir(train)?, Dataset::read_dir(test)?),
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("train and test sets must both be non-empty".into()));
        }
        Ok((train, test))
    }

    /// The network for this run, sized from the data for builtins.
    pub fn network_spec(&self, train: &Dataset, test: &Dataset, static_graph: bool) -> Result<NetworkSpec> {
        let classes = train.num_classes().max(test.num_classes());
        let mut spec = match &self.network {
            NetworkRef::Inline(spec) => spec.clone(),
            NetworkRef::Named(name) => match name.as_str() {
                "classifier" => build_classifier(classes),
                "keypoint" => build_keypoint_net(2),
                "partseg" => build_partseg_net(train.num_point_labels().max(test.num_point_labels()), classes),
                path => NetworkSpec::from_json(&read_text(Path::new(path))?)?,
            },
        };
        if let Some(a) = self.ablation {
            spec = a.apply(spec);
        }
        if static_graph {
            spec.options.graph = GraphSpace::Static;
        }
        spec.validate()?;
        Ok(spec)
    }
}
