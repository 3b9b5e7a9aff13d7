//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_layout, load_uci_har, DomainDataset, SyntheticSpec};
use crate::engine::{AdaptationConfig, TtaMethod};
use crate::error::{Error, Result};
use crate::nn::ArchSpec;
use crate::prototype::{Capacity, PseudoLabelSource};
use crate::train::TrainConfig;

/// Environment variable consulted when a UCI-HAR root is not configured.
pub const DATA_ROOT_ENV: &str = "OFTTA_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Leave one domain out, fresh state per held-out domain.
    Looa,
    /// One source domain, state carried across the remaining domains.
    Ctta,
    /// Leave-one-out with single-sample batches.
    Bs1,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Looa => "looa",
            Protocol::Ctta => "ctta",
            Protocol::Bs1 => "bs1",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "looa" => Ok(Protocol::Looa),
            "ctta" => Ok(Protocol::Ctta),
            "bs1" => Ok(Protocol::Bs1),
            _ => Err(Error::config(format!("unknown protocol `{s}` (expected looa, ctta or bs1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    /// Raw UCI-HAR archive; `root` falls back to `OFTTA_DATA_ROOT`.
    UciHar {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        subjects: Option<Vec<usize>>,
    },
    /// A directory in the UCI-like layout with a `manifest.json`.
    Directory {
        root: PathBuf,
        #[serde(default)]
        subjects: Option<Vec<usize>>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// `synthetic`, `uci-har` or a directory path.
    pub fn from_selector(s: &str) -> Self {
        match s {
            "synthetic" => Self::default(),
            "uci-har" | "uci" => DatasetConfig::UciHar {
                root: None,
                subjects: None,
            },
            path => DatasetConfig::Directory {
                root: PathBuf::from(path),
                subjects: None,
            },
        }
    }

    pub fn load(&self) -> Result<Vec<DomainDataset>> {
        match self {
            DatasetConfig::Synthetic { spec } => generate_synthetic(spec),
            DatasetConfig::UciHar { root, subjects } => {
                let root = match root {
                    Some(r) => r.clone(),
                    None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::config(format!("dataset.root is not set and {DATA_ROOT_ENV} is undefined"))
                    })?,
                };
                load_uci_har(&root, subjects.as_deref())
            }
            DatasetConfig::Directory { root, subjects } => load_layout(root, subjects.as_deref()),
        }
    }

    /// Architecture used when the configuration does not name one.
    pub fn default_arch(&self, domains: &[DomainDataset]) -> Result<ArchSpec> {
        if let DatasetConfig::UciHar { .. } = self {
            return Ok(ArchSpec::uci_har());
        }
        let d = domains.first().ok_or_else(|| Error::Data("dataset has no domains".into()))?;
        let (h, w) = d.window_shape();
        Ok(ArchSpec::compact(h, w, d.num_classes()))
    }

    fn default_batch_size(&self) -> usize {
        match self {
            DatasetConfig::UciHar { .. } => 180,
            _ => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSettings {
    /// Defaults to 180 on UCI-HAR and 64 elsewhere; forced to 1 under `bs1`.
    pub batch_size: Option<usize>,
    /// Defaults to 25 for leave-one-out protocols and -1 for continual runs.
    pub capacity: Option<Capacity>,
    pub edtn_bottom: f64,
    pub edtn_top: f64,
    pub bs1_alpha_floor: f64,
    pub ctta_reset: bool,
    pub pseudo_labels: PseudoLabelSource,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self {
            batch_size: None,
            capacity: None,
            edtn_bottom: 0.1,
            edtn_top: 1.0,
            bs1_alpha_floor: 0.6,
            ctta_reset: false,
            pseudo_labels: PseudoLabelSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub repetitions: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { repetitions: 5 }
    }
}

fn default_methods() -> Vec<TtaMethod> {
    TtaMethod::STANDARD.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_protocol() -> Protocol {
    Protocol::Looa
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Defaults to the UCI preset on UCI-HAR and the compact network elsewhere.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_methods")]
    pub methods: Vec<TtaMethod>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptSettings,
    #[serde(default)]
    pub bench: BenchSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

fn field_err(field: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("`{field}`: {m}")),
        other => other,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::config(inner.to_string())
            } else {
                Error::config(format!("`{path}`: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("`methods`: at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("`seeds`: at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("`seeds`: duplicate seed"));
        }
        self.train.validate().map_err(|e| field_err("train", e))?;
        if let DatasetConfig::Synthetic { spec } = &self.dataset {
            spec.validate().map_err(|e| field_err("dataset.spec", e))?;
        }
        if let Some(arch) = &self.arch {
            arch.validate().map_err(|e| field_err("arch", e))?;
        }
        if self.adapt.batch_size == Some(0) {
            return Err(Error::config("`adapt.batch_size`: must be at least 1"));
        }
        if self.bench.repetitions < 3 {
            return Err(Error::config("`bench.repetitions`: must be at least 3"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("`output_dir`: must not be empty"));
        }
        for &m in &self.methods {
            self.adaptation(m, self.seeds[0]).validate().map_err(|e| field_err("adapt", e))?;
        }
        Ok(())
    }

    /// Fully resolved adaptation settings for one method and seed.
    pub fn adaptation(&self, method: TtaMethod, seed: u64) -> AdaptationConfig {
        let batch_size = match self.protocol {
            Protocol::Bs1 => 1,
            _ => self.adapt.batch_size.unwrap_or_else(|| self.dataset.default_batch_size()),
        };
        let capacity = self.adapt.capacity.unwrap_or(match self.protocol {
            Protocol::Ctta => Capacity::Unbounded,
            _ => Capacity::PerClass(25),
        });
        AdaptationConfig {
            method,
            batch_size,
            capacity,
            edtn_bottom: self.adapt.edtn_bottom,
            edtn_top: self.adapt.edtn_top,
            seed,
            bs1_alpha_floor: self.adapt.bs1_alpha_floor,
            ctta_reset: self.adapt.ctta_reset,
            pseudo_labels: self.adapt.pseudo_labels,
        }
    }

    /// Load the domains and resolve the architecture against them.
    pub fn load_data(&self) -> Result<(Vec<DomainDataset>, ArchSpec)> {
        let domains = self.dataset.load()?;
        if domains.len() < 2 {
            return Err(Error::Data(format!("need at least two domains, found {}", domains.len())));
        }
        let arch = match &self.arch {
            Some(a) => a.clone(),
            None => self.dataset.default_arch(&domains)?,
        };
        for d in &domains {
            if d.window_shape() != (arch.input_height, arch.input_width) || d.num_classes() != arch.num_classes {
                return Err(Error::Data(format!(
                    "domain `{}` has {:?} windows and {} classes; architecture `{}` expects {}x{} and {}",
                    d.subject(),
                    d.window_shape(),
                    d.num_classes(),
                    arch.name,
                    arch.input_height,
                    arch.input_width,
                    arch.num_classes
                )));
            }
        }
        Ok((domains, arch))
    }
}
