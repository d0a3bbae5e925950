use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::adversary::AttackPlan;
use crate::controller::TopologySpec;
use crate::fabric::{AddressPool, FabricConfig};
use crate::ids::{NodeId, Role, SecuritySetting};
use crate::model::{Activation, BlobSpec, Dataset, ModelArchitecture, TrainConfig};
use crate::node::ComputeModel;

/// A complete scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub fabric: FabricConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub security: SecuritySection,
    #[serde(default)]
    pub mtd: MtdSection,
    #[serde(default)]
    pub compute: ComputeModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub nodes: u32,
    pub rounds: u32,
    #[serde(default)]
    pub security: SecuritySetting,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default, skip_serializing_if = "RoleAssignment::is_empty")]
    pub roles: RoleAssignment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Per-round wait for peer models; derived from latency and size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receive_timeout_ms: Option<f64>,
    /// Token lifetime in rounds.
    #[serde(default = "default_ttl_rounds")]
    pub token_ttl_rounds: u32,
}

fn default_ttl_rounds() -> u32 {
    10
}

/// Non-default roles by participant index; everyone else aggregates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleAssignment {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trainer: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proxy: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub idle: Vec<u32>,
}

impl RoleAssignment {
    pub fn is_empty(&self) -> bool {
        self.trainer.is_empty() && self.proxy.is_empty() && self.idle.is_empty()
    }

    pub fn role_of(&self, id: u32) -> Role {
        if self.trainer.contains(&id) {
            Role::Trainer
        } else if self.proxy.contains(&id) {
            Role::Proxy
        } else if self.idle.contains(&id) {
            Role::Idle
        } else {
            Role::Aggregator
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    #[serde(default = "one")]
    pub local_epochs: usize,
    /// Hidden layer widths; input and output widths come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Share of each node's shard used for training.
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default)]
    pub dataset: DatasetSpec,
}

fn default_lr() -> f64 {
    0.05
}
fn default_l2() -> f64 {
    1e-4
}
fn one() -> usize {
    1
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_split() -> f64 {
    0.8
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            l2_lambda: default_l2(),
            local_epochs: 1,
            hidden: default_hidden(),
            activation: Activation::default(),
            split_ratio: default_split(),
            dataset: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian class blobs, `samples_per_node` samples for every participant.
    Blobs {
        #[serde(default = "default_per_node")]
        samples_per_node: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_box")]
        center_box: f64,
        /// Fixed so that the data does not change with the run seed.
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
    /// Numeric features with the integer label in the last column.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

fn default_per_node() -> usize {
    300
}
fn default_classes() -> usize {
    3
}
fn default_dims() -> usize {
    4
}
fn default_spread() -> f64 {
    1.0
}
fn default_box() -> f64 {
    5.0
}
fn default_data_seed() -> u64 {
    42
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            samples_per_node: default_per_node(),
            classes: default_classes(),
            dims: default_dims(),
            spread: default_spread(),
            center_box: default_box(),
            seed: default_data_seed(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, nodes: usize, base: Option<&Path>) -> Result<Dataset, ScenarioError> {
        match self {
            DatasetSpec::Blobs {
                samples_per_node,
                classes,
                dims,
                spread,
                center_box,
                seed,
            } => Ok(Dataset::gaussian_blobs(BlobSpec {
                samples: samples_per_node * nodes,
                classes: *classes,
                dims: *dims,
                spread: *spread,
                center_box: *center_box,
                seed: *seed,
            })),
            DatasetSpec::Csv { path, classes } => {
                let p = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Dataset::load_csv(&p, *classes).map_err(|e| ScenarioError::invalid("train.dataset.path", e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecuritySection {
    /// Session and KEM keys are renewed after every this many rounds.
    #[serde(default = "one_u32")]
    pub renewal_interval: u32,
}

fn one_u32() -> u32 {
    1
}

impl Default for SecuritySection {
    fn default() -> Self {
        SecuritySection { renewal_interval: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtdSection {
    /// Neighbors drawn per round; `⌈|N_all| / 2⌉` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default = "one_u32")]
    pub rotation_interval: u32,
    /// Lifetime of a released address; twice the latency bound when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grace_ms: Option<f64>,
    #[serde(default = "default_ip_first")]
    pub ip_first: Ipv4Addr,
    /// Number of pool IPs; one per participant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip_count: Option<u32>,
    #[serde(default = "default_port_min")]
    pub port_min: u16,
    #[serde(default = "default_port_max")]
    pub port_max: u16,
}

fn default_ip_first() -> Ipv4Addr {
    Ipv4Addr::new(10, 1, 0, 1)
}
fn default_port_min() -> u16 {
    20000
}
fn default_port_max() -> u16 {
    20007
}

impl Default for MtdSection {
    fn default() -> Self {
        MtdSection {
            sample_size: None,
            rotation_interval: 1,
            grace_ms: None,
            ip_first: default_ip_first(),
            ip_count: None,
            port_min: default_port_min(),
            port_max: default_port_max(),
        }
    }
}

impl MtdSection {
    pub fn pool(&self, nodes: u32) -> Result<AddressPool, ScenarioError> {
        let ips = AddressPool::ip_range(self.ip_first, self.ip_count.unwrap_or(nodes));
        AddressPool::new(ips, self.port_min, self.port_max).map_err(|e| ScenarioError::invalid("mtd", e))
    }
}

impl ScenarioConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        toml::to_string(self).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.scenario.nodes).map(NodeId)
    }

    pub fn roles(&self) -> BTreeMap<NodeId, Role> {
        self.node_ids()
            .map(|n| (n, self.scenario.roles.role_of(n.0)))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            l2_lambda: self.train.l2_lambda,
            local_epochs: self.train.local_epochs,
            rounds: self.scenario.rounds.max(1) as usize,
        }
    }

    pub fn architecture(&self, data: &Dataset) -> Result<ModelArchitecture, ScenarioError> {
        let mut sizes = vec![data.dims()];
        sizes.extend(&self.train.hidden);
        sizes.push(data.num_classes);
        ModelArchitecture::new(sizes, self.train.activation).map_err(|e| ScenarioError::invalid("train.hidden", e))
    }

    /// Same scenario under another security setting.
    pub fn with_security(&self, security: SecuritySetting) -> Self {
        let mut c = self.clone();
        c.scenario.security = security;
        c
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let s = &self.scenario;
        if s.name.trim().is_empty() {
            return Err(ScenarioError::invalid("scenario.name", "must not be empty"));
        }
        if s.seed > i64::MAX as u64 {
            return Err(ScenarioError::invalid("scenario.seed", "must fit a signed 64-bit TOML integer"));
        }
        if s.nodes < 2 {
            return Err(ScenarioError::invalid("scenario.nodes", format!("need at least 2 nodes, got {}", s.nodes)));
        }
        if s.nodes >= NodeId::ATTACKER_BASE {
            return Err(ScenarioError::invalid("scenario.nodes", "too many nodes"));
        }
        if s.token_ttl_rounds == 0 {
            return Err(ScenarioError::invalid("scenario.token_ttl_rounds", "must be at least 1"));
        }
        if let Some(t) = s.receive_timeout_ms {
            if !(t.is_finite() && t > 0.0) {
                return Err(ScenarioError::invalid("scenario.receive_timeout_ms", "must be positive"));
            }
        }
        s.topology
            .validate()
            .map_err(|e| ScenarioError::invalid("scenario.topology", e))?;
        let r = &s.roles;
        let mut seen = std::collections::BTreeSet::new();
        for (field, ids) in [("trainer", &r.trainer), ("proxy", &r.proxy), ("idle", &r.idle)] {
            for &id in ids {
                if id >= s.nodes {
                    return Err(ScenarioError::invalid(
                        format!("scenario.roles.{field}"),
                        format!("node {id} is outside 0..{}", s.nodes),
                    ));
                }
                if !seen.insert(id) {
                    return Err(ScenarioError::invalid(
                        format!("scenario.roles.{field}"),
                        format!("node {id} has more than one role"),
                    ));
                }
            }
        }
        let sharing = s.nodes as usize - r.idle.len();
        if sharing < 2 {
            return Err(ScenarioError::invalid("scenario.roles.idle", "at least two nodes must share models"));
        }
        self.fabric
            .validate()
            .map_err(|e| ScenarioError::invalid("fabric", e))?;
        self.train_config()
            .validate()
            .map_err(|e| ScenarioError::invalid("train", e))?;
        let t = &self.train;
        if !(t.split_ratio > 0.0 && t.split_ratio < 1.0) {
            return Err(ScenarioError::invalid("train.split_ratio", "must lie in (0, 1)"));
        }
        if t.hidden.contains(&0) {
            return Err(ScenarioError::invalid("train.hidden", "layer widths must be positive"));
        }
        if let DatasetSpec::Blobs {
            samples_per_node,
            classes,
            dims,
            spread,
            center_box,
            ..
        } = &t.dataset
        {
            if *samples_per_node < 2 || *classes < 2 || *dims == 0 {
                return Err(ScenarioError::invalid(
                    "train.dataset",
                    "need samples_per_node >= 2, classes >= 2 and dims >= 1",
                ));
            }
            if !(spread.is_finite() && *spread > 0.0 && center_box.is_finite() && *center_box > 0.0) {
                return Err(ScenarioError::invalid("train.dataset", "spread and center_box must be positive"));
            }
        }
        if !(self.compute.train_us_per_sample >= 0.0 && self.compute.eval_us_per_sample >= 0.0) {
            return Err(ScenarioError::invalid("compute", "costs must be >= 0"));
        }
        if self.security.renewal_interval == 0 {
            return Err(ScenarioError::invalid("security.renewal_interval", "must be at least 1"));
        }
        let m = &self.mtd;
        if m.rotation_interval == 0 {
            return Err(ScenarioError::invalid("mtd.rotation_interval", "must be at least 1"));
        }
        if let Some(n) = m.sample_size {
            if n == 0 || n >= sharing {
                return Err(ScenarioError::invalid(
                    "mtd.sample_size",
                    format!("must lie in 1..={}", sharing - 1),
                ));
            }
        }
        if let Some(g) = m.grace_ms {
            if !(g.is_finite() && g >= 0.0) {
                return Err(ScenarioError::invalid("mtd.grace_ms", "must be >= 0"));
            }
        }
        if m.ip_count == Some(0) {
            return Err(ScenarioError::invalid("mtd.ip_count", "must be positive"));
        }
        let pool = m.pool(s.nodes)?;
        if s.security.uses_mtd() && pool.len() <= s.nodes as usize {
            return Err(ScenarioError::invalid(
                "mtd",
                format!("pool of {} addresses is too small for {} nodes", pool.len(), s.nodes),
            ));
        }
        if let Some(a) = &self.attack {
            a.validate(s.nodes, s.rounds)
                .map_err(|e| ScenarioError::invalid("attack", e))?;
            if r.idle.contains(&a.target) {
                return Err(ScenarioError::invalid("attack.target", "an idle node cannot be attacked"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
[scenario]
name = "t"
nodes = 4
rounds = 3
"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let c = ScenarioConfig::from_toml(MIN).unwrap();
        assert_eq!(c.scenario.security, SecuritySetting::Baseline);
        assert_eq!(c.scenario.token_ttl_rounds, 10);
        assert_eq!(c.train, TrainSection::default());
        assert!(c.attack.is_none());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = ScenarioConfig::from_toml(&format!("{MIN}\n[fabric]\nlatency = 3\n")).unwrap_err();
        assert!(matches!(e, ScenarioError::Parse(_)), "{e}");
    }

    #[test]
    fn field_diagnostics_name_the_field() {
        let doc = format!("{MIN}\n[attack]\nkind = \"eclipse\"\ntarget = 9\n");
        match ScenarioConfig::from_toml(&doc).unwrap_err() {
            ScenarioError::Invalid { field, .. } => assert_eq!(field, "attack"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn full_document_round_trips() {
        let doc = r#"
[scenario]
name = "full"
seed = 9
nodes = 6
rounds = 4
security = "EncryptionMtd"
output_dir = "out/full"
receive_timeout_ms = 80.0
[scenario.topology]
kind = "random"
p = 0.4
[scenario.roles]
trainer = [1]
idle = [5]
[fabric]
latency_mean_ms = 3.0
loss_rate = 0.01
[train]
hidden = [8, 8]
activation = "relu"
[train.dataset]
kind = "blobs"
samples_per_node = 50
[mtd]
sample_size = 2
grace_ms = 4.0
[attack]
kind = "eclipse"
target = 2
tap = { links = [[0, 1]] }
"#;
        let a = ScenarioConfig::from_toml(doc).unwrap();
        let b = ScenarioConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
