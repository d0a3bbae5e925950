use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, ScenarioError};
use crate::controller::{build_topology, ControllerConfig, Topology};
use crate::crypto::RenewalPolicy;
use crate::fabric::{ms_to_micros, AddressPool, Backend, Micros, PeerAddress};
use crate::ids::{NodeId, Role};
use crate::model::{Dataset, ModelArchitecture, ModelParams};
use crate::node::{node_stream_seed, MtdSettings, NodeConfig};

const STREAM_INIT: u64 = 1;
const STREAM_TOPOLOGY: u64 = 2;
const STREAM_SHARDS: u64 = 3;

/// Rough wire sizes used to budget serialization delay.
const ENVELOPE_OVERHEAD: usize = 256;
const DIRECTORY_ENTRY_BYTES: usize = 420;
const NOTICE_BYTES: usize = 220;

/// Every timer of a run, derived from the fabric model and workload size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub receive_timeout_us: Micros,
    pub pull_after_us: Micros,
    pub round_period_us: Micros,
    pub start_delay_us: Micros,
    pub auth_retry_us: Micros,
    pub auth_deadline_us: Micros,
    pub key_update_wait_us: Micros,
    pub grace_us: Micros,
    pub token_ttl_ms: u64,
    pub finish_grace_us: Micros,
}

/// Everything derived from a scenario before any endpoint exists.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub roles: BTreeMap<NodeId, Role>,
    pub arch: ModelArchitecture,
    pub initial: ModelParams,
    /// `(train, test)` per participant.
    pub data: BTreeMap<NodeId, (Dataset, Dataset)>,
    pub topology: Topology,
    pub pool: AddressPool,
    pub timing: Timing,
}

fn tx_us(bytes: usize, bandwidth_mbps: f64) -> Micros {
    if bandwidth_mbps <= 0.0 {
        0
    } else {
        (bytes as f64 * 8.0 / bandwidth_mbps).ceil() as Micros
    }
}

/// Static address of participant `id` on the simulated fabric.
pub fn sim_node_address(id: NodeId) -> PeerAddress {
    let i = id.0;
    PeerAddress::new(Ipv4Addr::new(10, 0, (i / 250) as u8, (i % 250 + 1) as u8), 7000).expect("valid port")
}

pub fn sim_controller_address() -> PeerAddress {
    PeerAddress::new(Ipv4Addr::new(10, 255, 255, 1), 6000).expect("valid port")
}

pub fn sim_attacker_address(index: u32) -> PeerAddress {
    PeerAddress::new(Ipv4Addr::new(10, 254, (index / 250) as u8, (index % 250 + 1) as u8), 6666)
        .expect("valid port")
}

impl Deployment {
    /// `base` resolves relative dataset paths.
    pub fn plan(cfg: &ScenarioConfig, base: Option<&Path>, backend: Backend) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let s = &cfg.scenario;
        let seed = s.seed;
        let nodes = s.nodes as usize;
        let roles = cfg.roles();

        let data = cfg.train.dataset.load(nodes, base)?;
        if data.len() < 2 * nodes {
            return Err(ScenarioError::invalid(
                "train.dataset",
                format!("{} samples cannot feed {nodes} nodes", data.len()),
            ));
        }
        let arch = cfg.architecture(&data)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(node_stream_seed(seed, NodeId::CONTROLLER, STREAM_INIT));
        let initial = ModelParams::init(&arch, &mut init_rng).map_err(|e| ScenarioError::invalid("train", e))?;
        let shard_seed = node_stream_seed(seed, NodeId::CONTROLLER, STREAM_SHARDS);
        let mut split = BTreeMap::new();
        for (i, shard) in data.shard(nodes, shard_seed).into_iter().enumerate() {
            let (tr, te) = shard
                .split(cfg.train.split_ratio, shard_seed ^ i as u64)
                .map_err(|e| ScenarioError::invalid("train.split_ratio", e))?;
            if te.is_empty() || tr.is_empty() {
                return Err(ScenarioError::invalid("train.split_ratio", format!("node {i} gets an empty split")));
            }
            split.insert(NodeId(i as u32), (tr, te));
        }

        let sharing: Vec<NodeId> = roles.iter().filter(|(_, r)| r.shares_model()).map(|(&n, _)| n).collect();
        let mut topo_rng = ChaCha8Rng::seed_from_u64(node_stream_seed(seed, NodeId::CONTROLLER, STREAM_TOPOLOGY));
        let topology = build_topology(s.topology, &sharing, &mut topo_rng)
            .map_err(|e| ScenarioError::invalid("scenario.topology", e))?;

        let pool = match backend {
            Backend::Sim => cfg.mtd.pool(s.nodes)?,
            // loopback aliases keep rotation on the local host
            Backend::Tcp => AddressPool::new(
                AddressPool::ip_range(Ipv4Addr::new(127, 1, 0, 1), cfg.mtd.ip_count.unwrap_or(s.nodes)),
                cfg.mtd.port_min,
                cfg.mtd.port_max,
            )
            .map_err(|e| ScenarioError::invalid("mtd", e))?,
        };

        let max_train = split.values().map(|(t, _)| t.len()).max().unwrap_or(0);
        let min_train = split.values().map(|(t, _)| t.len()).min().unwrap_or(0);
        let max_test = split.values().map(|(_, t)| t.len()).max().unwrap_or(0);
        let timing = derive_timing(cfg, &arch, max_train, min_train, max_test, backend);
        Ok(Deployment {
            roles,
            arch,
            initial,
            data: split,
            topology,
            pool,
            timing,
        })
    }

    pub fn sharing_nodes(&self) -> Vec<NodeId> {
        self.roles.iter().filter(|(_, r)| r.shares_model()).map(|(&n, _)| n).collect()
    }

    pub fn node_config(
        &self,
        cfg: &ScenarioConfig,
        id: NodeId,
        address: PeerAddress,
        controller_addr: PeerAddress,
        sample_resources: bool,
    ) -> NodeConfig {
        let (train_data, test_data) = self.data[&id].clone();
        let t = &self.timing;
        NodeConfig {
            id,
            role: self.roles[&id],
            security: cfg.scenario.security,
            seed: cfg.scenario.seed,
            initial_params: self.initial.clone(),
            train_data,
            test_data,
            train: cfg.train_config(),
            compute: cfg.compute,
            receive_timeout_us: t.receive_timeout_us,
            pull_after_us: t.pull_after_us,
            renewal: RenewalPolicy {
                interval_rounds: cfg.security.renewal_interval,
            },
            mtd: cfg.scenario.security.uses_mtd().then(|| MtdSettings {
                sample_size: cfg.mtd.sample_size,
                rotation_interval: cfg.mtd.rotation_interval,
                grace_us: t.grace_us,
                pool: self.pool.clone(),
            }),
            controller_addr,
            address,
            auth_retry_us: t.auth_retry_us,
            sample_resources,
        }
    }

    pub fn controller_config(&self, cfg: &ScenarioConfig, address: PeerAddress) -> ControllerConfig {
        let t = &self.timing;
        ControllerConfig {
            seed: cfg.scenario.seed,
            address,
            security: cfg.scenario.security,
            expected: self.roles.clone(),
            topology: self.topology.clone(),
            rounds: cfg.scenario.rounds,
            round_period_us: t.round_period_us,
            start_delay_us: t.start_delay_us,
            auth_deadline_us: t.auth_deadline_us,
            key_update_wait_us: t.key_update_wait_us,
            token_ttl_ms: t.token_ttl_ms,
            finish_grace_us: t.finish_grace_us,
        }
    }
}

/// Budgets each phase of a round from the latency bound, serialization
/// delay of the largest bursts and the modelled compute cost. On TCP the
/// compute estimate is inflated and a fixed margin is added, since real
/// training and scheduling jitter are not modelled.
fn derive_timing(
    cfg: &ScenarioConfig,
    arch: &ModelArchitecture,
    max_train: usize,
    min_train: usize,
    max_test: usize,
    backend: Backend,
) -> Timing {
    let s = &cfg.scenario;
    let nodes = s.nodes as usize;
    let lat = cfg.fabric.latency();
    let mean = ms_to_micros(lat.mean_ms);
    let upper = ms_to_micros(lat.upper_bound_ms()).max(1);
    let bw = cfg.fabric.bandwidth_mbps;
    let epochs = cfg.train.local_epochs;
    let (compute_scale, margin) = match backend {
        Backend::Sim => (1, 2_000),
        Backend::Tcp => (8, 50_000),
    };
    let train_max = cfg.compute.train_us(max_train, epochs) * compute_scale;
    let skew = (cfg.compute.train_us(max_train, epochs) - cfg.compute.train_us(min_train, epochs)) * compute_scale;
    let eval_max = cfg.compute.eval_us(max_test) * compute_scale;

    let model_bytes = arch.num_params() * 8 + ENVELOPE_OVERHEAD;
    let send_burst = tx_us(model_bytes, bw) * (nodes as Micros - 1);
    let dir_burst = tx_us(DIRECTORY_ENTRY_BYTES * nodes + 256, bw) * nodes as Micros;
    let notice_burst = tx_us(NOTICE_BYTES, bw) * nodes as Micros;

    let floor = 4 * upper + 2 * send_burst + skew + 2 * margin;
    let receive_timeout_us = match s.receive_timeout_ms {
        Some(ms) => ms_to_micros(ms),
        None => (5 * mean * nodes as Micros).max(floor),
    };
    let pull_after_us = 2 * upper + send_burst + skew + margin;
    let grace_us = match cfg.mtd.grace_ms {
        Some(ms) => ms_to_micros(ms),
        None => 2 * upper + notice_burst,
    };
    let key_update_wait_us = upper + skew + margin;
    let gap = 2 * upper + key_update_wait_us + dir_burst + notice_burst + grace_us + margin;
    let round_period_us = train_max + receive_timeout_us + eval_max + gap;
    let start_delay_us = dir_burst + upper + margin;
    let auth_retry_us = 10 * upper + 50_000;
    let auth_deadline_us = match backend {
        Backend::Sim => 8 * auth_retry_us,
        Backend::Tcp => 10_000_000,
    };
    let token_ttl_ms = (s.token_ttl_rounds as u64 * round_period_us).div_ceil(1000).max(1);
    Timing {
        receive_timeout_us,
        pull_after_us,
        round_period_us,
        start_delay_us,
        auth_retry_us,
        auth_deadline_us,
        key_update_wait_us,
        grace_us,
        token_ttl_ms,
        finish_grace_us: round_period_us,
    }
}
