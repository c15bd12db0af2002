//! Network descriptions and their JSON form.
//!
//! Stages serialize as the compact strings `"ISL(20, [64])"` and
//! `"IRL(256, 4, 4)"`; all other knobs live in [`ModelOptions`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irl::IrlConfig;
use crate::isl::{Fusion, IslConfig, DEFAULT_LEAKY_SLOPE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Stage {
    Isl { k_hat: usize, widths: Vec<usize> },
    Irl { s: usize, k: usize, m: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Isl { k_hat, widths } => {
                let w: Vec<String> = widths.iter().map(usize::to_string).collect();
                write!(f, "ISL({k_hat}, [{}])", w.join(", "))
            }
            Stage::Irl { s, k, m } => write!(f, "IRL({s}, {k}, {m})"),
        }
    }
}

fn parse_usize_list(text: &str, whole: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad stage `{whole}`")))
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad stage `{text}`; expected `ISL(k, [w, ...])` or `IRL(S, k, m)`"));
        let t = text.trim();
        let (kind, rest) = t.split_once('(').ok_or_else(bad)?;
        let body = rest.strip_suffix(')').ok_or_else(bad)?;
        match kind.trim() {
            "ISL" => {
                let (k, widths) = body.split_once(',').ok_or_else(bad)?;
                let widths = widths.trim().strip_prefix('[').and_then(|w| w.strip_suffix(']')).ok_or_else(bad)?;
                Ok(Stage::Isl {
                    k_hat: k.trim().parse().map_err(|_| bad())?,
                    widths: parse_usize_list(widths, t)?,
                })
            }
            "IRL" => match parse_usize_list(body, t)?[..] {
                [s, k, m] => Ok(Stage::Irl { s, k, m }),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Stage {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Classifier { num_classes: usize },
    Pointwise { num_outputs: usize },
    Partseg { num_parts: usize, num_categories: usize },
}

/// Which space later ISL stages search for neighbors in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSpace {
    /// First stage on coordinates, later stages on their input features.
    #[default]
    Dynamic,
    /// Coordinates throughout.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub fusion: Fusion,
    pub graph: GraphSpace,
    pub partition: String,
    pub sampler: String,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Width of the shared layer applied before global pooling.
    pub global_width: usize,
    /// Hidden widths of the classification head.
    pub head_widths: Vec<usize>,
    /// Hidden widths of per-point heads.
    pub point_widths: Vec<usize>,
    /// Category embedding width (part segmentation).
    pub embed_width: usize,
    /// Width of the layer feeding the final IRL stage (part segmentation).
    pub fuse_width: usize,
    /// Batchnorm running-statistic momentum.
    pub bn_momentum: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            fusion: Fusion::Dynamic,
            graph: GraphSpace::Dynamic,
            partition: "dilated_top_s".into(),
            sampler: "knn_based".into(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            dropout: 0.5,
            global_width: 1024,
            head_widths: vec![512, 256],
            point_widths: vec![256, 128],
            embed_width: 64,
            fuse_width: 256,
            bn_momentum: 0.9,
        }
    }
}

/// Stage chain, shortcut taps and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub stages: Vec<Stage>,
    /// Stage indices whose outputs are concatenated before the head.
    pub taps: Vec<usize>,
    pub head: Head,
    #[serde(default)]
    pub options: ModelOptions,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Stages run before the head; part segmentation keeps its last stage
    /// for after the global fusion.
    pub fn trunk_len(&self) -> usize {
        match self.head {
            Head::Partseg { .. } => self.stages.len().saturating_sub(1),
            _ => self.stages.len(),
        }
    }

    pub fn isl_config(&self, k_hat: usize, widths: &[usize]) -> IslConfig {
        IslConfig {
            k_hat,
            widths: widths.to_vec(),
            leaky_slope: self.options.leaky_slope,
        }
    }

    pub fn irl_config(&self, s: usize, k: usize, m: usize) -> IrlConfig {
        IrlConfig {
            s,
            k,
            m,
            partition: self.options.partition.clone(),
            sampler: self.options.sampler.clone(),
        }
    }

    /// Output width of every stage, starting from 3 input coordinates.
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut c = 3;
        self.stages
            .iter()
            .map(|st| {
                if let Stage::Isl { widths, .. } = st {
                    c = widths.last().copied().unwrap_or(0);
                }
                c
            })
            .collect()
    }

    pub fn tap_width(&self) -> usize {
        let w = self.stage_widths();
        self.taps.iter().map(|&t| w.get(t).copied().unwrap_or(0)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        match self.stages.first() {
            Some(Stage::Isl { .. }) => {}
            _ => return cfg("the first stage must be an ISL stage".into()),
        }
        for st in &self.stages {
            match st {
                Stage::Isl { k_hat, widths } => self.isl_config(*k_hat, widths).validate()?,
                Stage::Irl { s, k, m } => self.irl_config(*s, *k, *m).validate()?,
            }
        }
        let trunk = self.trunk_len();
        if self.taps.is_empty() || self.taps.iter().any(|&t| t >= trunk) {
            return cfg(format!("taps {:?} must be non-empty indices below {trunk}", self.taps));
        }
        let o = &self.options;
        if !(0.0..1.0).contains(&o.dropout) || !(0.0..=1.0).contains(&o.bn_momentum) || !o.leaky_slope.is_finite() {
            return cfg("dropout must lie in [0, 1), bn_momentum in [0, 1]".into());
        }
        if o.global_width == 0 || o.head_widths.contains(&0) || o.point_widths.contains(&0) {
            return cfg("head widths must be positive".into());
        }
        match self.head {
            Head::Classifier { num_classes: 0 } | Head::Pointwise { num_outputs: 0 } => {
                cfg("head needs at least one output".into())
            }
            Head::Partseg { num_parts, num_categories } => {
                if num_parts == 0 || num_categories == 0 || o.embed_width == 0 || o.fuse_width == 0 {
                    return cfg("part segmentation needs positive parts, categories and widths".into());
                }
                if !matches!(self.stages.last(), Some(Stage::Irl { .. })) || self.stages.len() < 2 {
                    return cfg("part segmentation ends with an IRL stage after the fusion layer".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Largest neighborhood or region size any stage needs.
    pub fn min_points(&self) -> usize {
        self.stages
            .iter()
            .map(|st| match st {
                Stage::Isl { k_hat, .. } => *k_hat,
                Stage::Irl { s, k, .. } => (*s).max(*k),
            })
            .max()
            .unwrap_or(1)
    }
}

fn parse_chain(chain: &str) -> Vec<Stage> {
    chain.split('→').map(|s| s.parse().expect("builtin chain parses")).collect()
}

const CLASSIFIER_CHAIN: &str =
    "ISL(20, [64]) → ISL(20, [64]) → IRL(256, 4, 4) → ISL(20, [128]) → IRL(128, 8, 4) → ISL(20, [256]) → IRL(64, 16, 4)";
const PARTSEG_CHAIN: &str = "ISL(32, [64, 64, 64]) → ISL(32, [128, 128, 128]) → IRL(128, 16, 8) → \
                             ISL(32, [256, 256, 256]) → IRL(256, 16, 8) → IRL(128, 32, 16)";

/// Shape classification: seven stages, shortcuts from the first ISL stage
/// and every IRL stage.
pub fn build_classifier(num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        stages: parse_chain(CLASSIFIER_CHAIN),
        taps: vec![0, 2, 4, 6],
        head: Head::Classifier { num_classes },
        options: ModelOptions::default(),
    }
}

/// Per-point saliency on the classifier trunk.
pub fn build_keypoint_net(num_outputs: usize) -> NetworkSpec {
    NetworkSpec {
        head: Head::Pointwise { num_outputs },
        ..build_classifier(1)
    }
}

pub fn build_partseg_net(num_parts: usize, num_categories: usize) -> NetworkSpec {
    NetworkSpec {
        stages: parse_chain(PARTSEG_CHAIN),
        taps: vec![0, 1, 2, 3, 4],
        head: Head::Partseg {
            num_parts,
            num_categories,
        },
        options: ModelOptions::default(),
    }
}

/// Component ablations of the classifier. Variants without IRL keep only
/// the ISL stages and tap all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SflOnly,
    NflOnly,
    Linear,
    Dynamic,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::SflOnly,
        Ablation::NflOnly,
        Ablation::Linear,
        Ablation::Dynamic,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::SflOnly => "SFL only",
            Ablation::NflOnly => "NFL only",
            Ablation::Linear => "NFL+SFL linear",
            Ablation::Dynamic => "NFL+SFL+DFA",
            Ablation::Full => "NFL+SFL+DFA+IRL",
        }
    }

    pub fn apply(self, mut spec: NetworkSpec) -> NetworkSpec {
        spec.options.fusion = match self {
            Ablation::SflOnly => Fusion::SflOnly,
            Ablation::NflOnly => Fusion::NflOnly,
            Ablation::Linear => Fusion::Linear,
            Ablation::Dynamic | Ablation::Full => Fusion::Dynamic,
        };
        if self != Ablation::Full {
            spec.stages.retain(|s| matches!(s, Stage::Isl { .. }));
            spec.taps = (0..spec.stages.len()).collect();
        }
        spec
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown ablation `{s}`")))
    }
}
