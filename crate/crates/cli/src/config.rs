use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ocs_core::analytic::Depth;
use ocs_core::network::{BiasPlacement, InitMode, NetworkConfig};
use ocs_core::ntk::OutputBiasTerm;
use ocs_core::response::DiscretizationConfig;
use ocs_core::task_data::{
    build_correlated, build_hierarchy, build_imbalance_case, load_dataset, CorrelatedInputSpec,
    Dataset, HierarchySpec, LevelSlice,
};
use ocs_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 6] = [
    ("fig2", include_str!("../presets/fig2.toml")),
    ("fig3", include_str!("../presets/fig3.toml")),
    ("fig4-sim", include_str!("../presets/fig4-sim.toml")),
    ("fig5", include_str!("../presets/fig5.toml")),
    ("fig6", include_str!("../presets/fig6.toml")),
    ("imbalance", include_str!("../presets/imbalance.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `runs/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntk: Option<NtkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discretization: Option<DiscretizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominance: Option<DominanceSpec>,
    pub conditions: Vec<Condition>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Hierarchy {
        depth: usize,
        branching: usize,
        include_root: bool,
    },
    Imbalance,
    /// Synthetic inputs attached to hierarchical targets.
    Correlated {
        targets: HierarchySpec,
        n_in: usize,
        shared_scale: f64,
        noise_scale: f64,
        orthogonalized: bool,
        /// Defaults to the experiment seed.
        #[serde(skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Whitespace-separated matrices as written by `generate`.
    File {
        path: PathBuf,
        #[serde(skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<LevelSlice>>,
    },
}

fn default_depth() -> usize {
    3
}

fn default_branching() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFields {
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_branching")]
    branching: usize,
    #[serde(default = "default_true")]
    include_root: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImbalanceFields {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrelatedFields {
    #[serde(default)]
    targets: HierarchySpec,
    n_in: usize,
    shared_scale: f64,
    noise_scale: f64,
    #[serde(default)]
    orthogonalized: bool,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFields {
    path: PathBuf,
    #[serde(default)]
    levels: Option<Vec<LevelSlice>>,
}

/// Prefix marking a nested field path inside a custom error message.
const NESTED: &str = "\u{1}";

fn fields<T: serde::de::DeserializeOwned, E: serde::de::Error>(table: toml::Table) -> Result<T, E> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        E::custom(format!("{NESTED}{path}{NESTED}{}", e.into_inner()))
    })
}

// Dispatch on `kind` by hand so errors inside a variant keep their field path.
impl<'de> Deserialize<'de> for DatasetSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut table = toml::Table::deserialize(de)?;
        let kind = match table.remove("kind") {
            Some(toml::Value::String(k)) => k,
            Some(_) => return Err(D::Error::custom("`kind` must be a string")),
            None => return Err(D::Error::missing_field("kind")),
        };
        Ok(match kind.as_str() {
            "hierarchy" => {
                let f: HierarchyFields = fields(table)?;
                DatasetSpec::Hierarchy {
                    depth: f.depth,
                    branching: f.branching,
                    include_root: f.include_root,
                }
            }
            "imbalance" => {
                let _: ImbalanceFields = fields(table)?;
                DatasetSpec::Imbalance
            }
            "correlated" => {
                let f: CorrelatedFields = fields(table)?;
                DatasetSpec::Correlated {
                    targets: f.targets,
                    n_in: f.n_in,
                    shared_scale: f.shared_scale,
                    noise_scale: f.noise_scale,
                    orthogonalized: f.orthogonalized,
                    seed: f.seed,
                }
            }
            "file" => {
                let f: FileFields = fields(table)?;
                DatasetSpec::File {
                    path: f.path,
                    levels: f.levels,
                }
            }
            other => {
                return Err(D::Error::unknown_variant(
                    other,
                    &["hierarchy", "imbalance", "correlated", "file"],
                ))
            }
        })
    }
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> ocs_core::Result<Dataset> {
        match self {
            DatasetSpec::Hierarchy {
                depth,
                branching,
                include_root,
            } => build_hierarchy(&HierarchySpec {
                depth: *depth,
                branching: *branching,
                include_root: *include_root,
            }),
            DatasetSpec::Imbalance => Ok(build_imbalance_case()),
            DatasetSpec::Correlated {
                targets,
                n_in,
                shared_scale,
                noise_scale,
                orthogonalized,
                seed: own,
            } => {
                let targets = build_hierarchy(targets)?;
                let spec = CorrelatedInputSpec {
                    n: targets.samples(),
                    n_in: *n_in,
                    shared_scale: *shared_scale,
                    noise_scale: *noise_scale,
                    orthogonalized: *orthogonalized,
                    seed: own.unwrap_or(seed),
                };
                build_correlated(&spec, &targets)
            }
            DatasetSpec::File { path, levels } => load_dataset(path, levels.as_deref()),
        }
    }
}

/// Either `tau` or `learning_rate` sets the step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub steps: usize,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
}

fn default_stride() -> usize {
    10
}

impl TrainSpec {
    pub fn train_config(&self, samples: usize) -> Result<TrainConfig> {
        let learning_rate = match (self.tau, self.learning_rate) {
            (Some(tau), None) => 1.0 / (tau * samples as f64),
            (None, Some(lr)) => lr,
            _ => bail!("train: set exactly one of `tau` and `learning_rate`"),
        };
        Ok(TrainConfig {
            learning_rate,
            steps: self.steps,
            log_stride: self.log_stride,
            record_outputs: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    ocs_core::metrics::DEFAULT_DELTA
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            delta: default_delta(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkSpec {
    #[serde(default)]
    pub output_term: OutputBiasTerm,
    /// Learning rate of the one-step output prediction check.
    #[serde(default = "default_step_epsilon")]
    pub step_epsilon: f64,
}

fn default_step_epsilon() -> f64 {
    1e-4
}

impl Default for NtkSpec {
    fn default() -> Self {
        NtkSpec {
            output_term: OutputBiasTerm::default(),
            step_epsilon: default_step_epsilon(),
        }
    }
}

/// Checks that output `leader` exceeds every output in `followers` in
/// magnitude on `sample`, from the first logged step where the sample's
/// output norm reaches `onset_fraction` of its target norm until `t_diff`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominanceSpec {
    pub sample: usize,
    pub leader: usize,
    pub followers: Vec<usize>,
    pub onset_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    #[serde(default)]
    pub depth: Depth,
    #[serde(default)]
    pub bias: BiasPlacement,
    #[serde(default)]
    pub init: InitMode,
    pub init_scale: f64,
    /// Ignored by shallow networks.
    #[serde(default = "default_hidden")]
    pub n_hid: usize,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Replaces the experiment dataset for this condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
}

fn default_hidden() -> usize {
    16
}

impl Condition {
    pub fn network_config(&self, d: &Dataset, experiment_seed: u64) -> NetworkConfig {
        NetworkConfig {
            depth: self.depth,
            n_in: d.n_in(),
            n_hid: if self.depth == Depth::Shallow {
                0
            } else {
                self.n_hid
            },
            n_out: d.n_out(),
            bias: self.bias,
            init: self.init,
            init_scale: self.init_scale,
            seed: self.seed.unwrap_or(experiment_seed),
        }
    }

    /// Whether the network is described by the bias-augmented task rather
    /// than the plain one.
    pub fn uses_augmented_task(&self) -> bool {
        match self.depth {
            Depth::Deep => self.bias.input(),
            Depth::Shallow => self.bias.output(),
        }
    }

    /// Whether closed-form mode dynamics describe this network.
    pub fn has_closed_form(&self) -> bool {
        !(self.depth == Depth::Deep && self.bias.output())
    }

    /// File-system safe directory name.
    pub fn dir_name(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).context("config is not valid TOML")?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut path = e.path().to_string();
            let mut message = e.into_inner().message().to_string();
            if let Some(rest) = message.strip_prefix(NESTED) {
                if let Some((inner, msg)) = rest.split_once(NESTED) {
                    if inner != "." {
                        path = format!("{path}.{inner}");
                    }
                    message = msg.to_string();
                }
            }
            anyhow::anyhow!("invalid config field `{path}`: {message}")
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let Some((_, text)) = PRESETS.iter().find(|(n, _)| *n == name) else {
            let known: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
            bail!(
                "unknown preset `{name}`; known presets: {}",
                known.join(", ")
            );
        };
        Self::parse(text).with_context(|| format!("in preset {name}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            bail!("conditions: at least one condition is required");
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i]
                .iter()
                .any(|o| o.dir_name() == c.dir_name())
            {
                bail!("conditions[{i}].name: `{}` is not unique", c.name);
            }
        }
        if self.metrics.delta.is_nan() || self.metrics.delta <= 0.0 {
            bail!("metrics.delta: must be positive");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }
}
