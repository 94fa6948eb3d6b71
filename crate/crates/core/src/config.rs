//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::scheduler::{Policy, SchedulerConfig, SimConfig};
use crate::step_graph::AggregationKind;
use crate::workload::{generate, Topology, Workload, WorkloadSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// A named calibration profile or an inline cost model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub name: Option<String>,
    pub cost: Option<CostModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSection {
    /// Defaults to the named profile's KV budget.
    pub gpu_capacity_bytes: Option<u64>,
    /// Unbounded when absent.
    pub cpu_capacity_bytes: Option<u64>,
}

/// Explicit agent graph; overrides `workload.topology`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSection {
    pub agents: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub aggregation: BTreeMap<String, AggregationKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Overrides `workload.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub check_invariants: bool,
    pub profile: ProfileSection,
    #[serde(default)]
    pub hardware: HardwareSection,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub workflow: Option<WorkflowSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Everything needed to run one simulation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sim: SimConfig,
    pub spec: WorkloadSpec,
    pub workload: Workload,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn cost(&self) -> Result<CostModel, ConfigError> {
        let cost = match (&self.profile.name, &self.profile.cost) {
            (Some(_), Some(_)) => return Err(invalid("profile: give either `name` or `cost`, not both")),
            (None, None) => return Err(invalid("profile: `name` or `cost` is required")),
            (Some(name), None) => CostModel::profile(name).map_err(|e| invalid(e.to_string()))?,
            (None, Some(c)) => *c,
        };
        cost.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cost)
    }

    pub fn gpu_capacity(&self) -> Result<u64, ConfigError> {
        self.hardware
            .gpu_capacity_bytes
            .or_else(|| self.profile.name.as_deref().and_then(CostModel::profile_kv_capacity))
            .ok_or_else(|| invalid("hardware.gpu_capacity_bytes is required with an inline cost model"))
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        let mut spec = self.workload.clone();
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(wf) = &self.workflow {
            spec.topology = Topology::Custom {
                agents: wf.agents.clone(),
                edges: wf.edges.clone(),
                aggregation: wf.aggregation.clone(),
            };
        }
        spec
    }

    /// Validates the whole configuration and generates the workload.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let cost = self.cost()?;
        let capacity = self.gpu_capacity()?;
        let spec = self.workload_spec();
        let workload = generate(&spec).map_err(|e| invalid(format!("workload: {e}")))?;
        let largest = workload
            .clients
            .iter()
            .flat_map(|c| &c.iterations)
            .flat_map(|i| &i.invocations)
            .map(|i| i.fixed_len)
            .max()
            .unwrap_or(0);
        let fixed_bytes = cost.kv_bytes(largest as u64);
        if capacity <= fixed_bytes {
            return Err(invalid(format!(
                "gpu capacity {capacity} bytes does not exceed the largest fixed prompt ({fixed_bytes} bytes)"
            )));
        }
        let s = &self.scheduler;
        if !(0.0..=1.0).contains(&s.overlap_fraction) {
            return Err(invalid(format!("scheduler.overlap_fraction {} not in [0, 1]", s.overlap_fraction)));
        }
        if s.max_running == 0 {
            return Err(invalid("scheduler.max_running must be at least 1"));
        }
        let sim = SimConfig {
            cost,
            gpu_capacity_bytes: capacity,
            cpu_capacity_bytes: self.hardware.cpu_capacity_bytes,
            scheduler: *s,
            check_invariants: self.check_invariants,
        };
        Ok(Resolved { sim, spec, workload })
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        let mut c = self.clone();
        c.scheduler.policy = policy;
        c
    }

    /// Sets a numeric parameter by name. Section prefixes such as
    /// `workload.` are optional.
    pub fn set_axis(&mut self, key: &str, value: f64) -> Result<(), ConfigError> {
        let name = key.rsplit('.').next().unwrap_or(key);
        let count = || -> Result<usize, ConfigError> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(invalid(format!("{key} needs a non-negative integer, got {value}")))
            }
        };
        match name {
            "fixed_len" => self.workload.fixed_len = count()?,
            "dyn_len" => self.workload.dyn_len = count()?,
            "out_len" => self.workload.out_len = count()?,
            "num_workflows" => self.workload.num_workflows = count()?,
            "iterations" => self.workload.iterations = count()?,
            "warmup_rounds" => self.workload.warmup_rounds = count()?,
            "shared_prefix_len" => self.workload.shared_prefix_len = count()?,
            "arrival_stagger" => self.workload.arrival_stagger = value,
            "seed" => self.seed = Some(count()? as u64),
            "gpu_capacity_bytes" => self.hardware.gpu_capacity_bytes = Some(count()? as u64),
            "max_concurrent_prefetch" => self.scheduler.max_concurrent_prefetch = count()?,
            "max_running" => self.scheduler.max_running = count()?,
            "overlap_fraction" => self.scheduler.overlap_fraction = value,
            "pcie_efficiency" => {
                let mut cost = self.cost()?;
                let capacity = self.gpu_capacity()?;
                cost.pcie_efficiency = value;
                self.profile = ProfileSection {
                    name: None,
                    cost: Some(cost),
                };
                self.hardware.gpu_capacity_bytes = Some(capacity);
            }
            _ => return Err(ConfigError::UnknownAxis(key.to_string())),
        }
        Ok(())
    }
}
