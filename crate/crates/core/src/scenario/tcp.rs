use std::net::{Ipv4Addr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::deploy::Deployment;
use super::run::{assemble, Collected, NodeSummary, RunOutput};
use super::{ScenarioConfig, ScenarioError};
use crate::controller::Controller;
use crate::driver::{run_realtime, Actor};
use crate::fabric::{Backend, PeerAddress, StatsSnapshot, TcpFabric};
use crate::ids::NodeId;
use crate::node::Node;

/// What a node needs to join a TCP run besides the scenario itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLaunch {
    pub id: NodeId,
    pub address: PeerAddress,
    pub controller: PeerAddress,
    /// Time to keep serving peers after the last round.
    pub linger_ms: u64,
}

/// What a finished node hands back to the supervisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeResult {
    pub summary: NodeSummary,
    pub stats: StatsSnapshot,
}

pub trait NodeHandle: Send {
    /// Waits for the node, stopping it once `deadline` passes.
    fn join(self: Box<Self>, deadline: Instant) -> Result<NodeResult, ScenarioError>;
}

/// Starts participant nodes for a TCP run.
pub trait NodeLauncher {
    fn launch(
        &self,
        cfg: &ScenarioConfig,
        base: Option<&Path>,
        launch: NodeLaunch,
    ) -> Result<Box<dyn NodeHandle>, ScenarioError>;
}

/// Runs one participant over TCP until it finishes or `stop` is raised.
pub fn run_tcp_node(
    cfg: &ScenarioConfig,
    base: Option<&Path>,
    launch: &NodeLaunch,
    stop: &AtomicBool,
) -> Result<NodeResult, ScenarioError> {
    let dep = Deployment::plan(cfg, base, Backend::Tcp)?;
    let fabric = TcpFabric::new(cfg.fabric.max_frame);
    let ep = fabric.endpoint(launch.id);
    let nc = dep.node_config(cfg, launch.id, launch.address, launch.controller, true);
    let mut node = Node::new(nc, Box::new(ep)).map_err(ScenarioError::runtime)?;
    run_realtime(&mut node, stop, Duration::from_millis(launch.linger_ms));
    let summary = NodeSummary::from_node(&node);
    node.into_transport().close();
    Ok(NodeResult {
        summary,
        stats: fabric.stats().snapshot(),
    })
}

/// Runs every node on a thread of the supervising process.
#[derive(Debug, Default)]
pub struct ThreadLauncher;

struct ThreadHandle {
    stop: Arc<AtomicBool>,
    thread: thread::JoinHandle<Result<NodeResult, ScenarioError>>,
}

impl NodeHandle for ThreadHandle {
    fn join(self: Box<Self>, deadline: Instant) -> Result<NodeResult, ScenarioError> {
        while !self.thread.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
        self.stop.store(true, Ordering::SeqCst);
        self.thread
            .join()
            .map_err(|_| ScenarioError::Runtime("node thread panicked".into()))?
    }
}

impl NodeLauncher for ThreadLauncher {
    fn launch(
        &self,
        cfg: &ScenarioConfig,
        base: Option<&Path>,
        launch: NodeLaunch,
    ) -> Result<Box<dyn NodeHandle>, ScenarioError> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let cfg = cfg.clone();
        let base: Option<PathBuf> = base.map(Path::to_path_buf);
        let thread = thread::Builder::new()
            .name(format!("node-{}", launch.id))
            .spawn(move || run_tcp_node(&cfg, base.as_deref(), &launch, &flag))
            .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
        Ok(Box::new(ThreadHandle { stop, thread }))
    }
}

/// A currently unused loopback port.
pub fn free_port() -> Result<u16, ScenarioError> {
    let l = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).map_err(|e| ScenarioError::Io(e.to_string()))?;
    l.local_addr()
        .map(|a| a.port())
        .map_err(|e| ScenarioError::Io(e.to_string()))
}

fn loopback() -> Result<PeerAddress, ScenarioError> {
    PeerAddress::new(Ipv4Addr::LOCALHOST, free_port()?).map_err(ScenarioError::runtime)
}

/// Runs a scenario over loopback TCP with the controller in this process
/// and participants started by `launcher`.
pub fn run_tcp(
    cfg: &ScenarioConfig,
    base: Option<&Path>,
    launcher: &dyn NodeLauncher,
) -> Result<RunOutput, ScenarioError> {
    if cfg.attack.is_some() {
        return Err(ScenarioError::invalid(
            "attack",
            "attacks need the simulated backend",
        ));
    }
    let dep = Deployment::plan(cfg, base, Backend::Tcp)?;
    let period = Duration::from_micros(dep.timing.round_period_us);
    let ctl_addr = loopback()?;
    let ctl_fabric = TcpFabric::new(cfg.fabric.max_frame);
    let mut controller = Controller::new(
        dep.controller_config(cfg, ctl_addr),
        Box::new(ctl_fabric.endpoint(NodeId::CONTROLLER)),
    )
    .map_err(ScenarioError::runtime)?;

    let mut handles = Vec::new();
    for id in cfg.node_ids() {
        let launch = NodeLaunch {
            id,
            address: loopback()?,
            controller: ctl_addr,
            linger_ms: period.as_millis() as u64,
        };
        handles.push(launcher.launch(cfg, base, launch)?);
    }

    let stop = AtomicBool::new(false);
    run_realtime(&mut controller, &stop, period);
    let deadline = Instant::now() + 2 * period + Duration::from_secs(5);
    let mut snapshots = vec![ctl_fabric.stats().snapshot()];
    let mut nodes = Vec::new();
    for h in handles {
        let r = h.join(deadline)?;
        snapshots.push(r.stats);
        nodes.push(r.summary);
    }
    controller.transport().close();
    let collected = Collected {
        expected_reports: controller.expected_reports(),
        directory_pushes: controller.directory_pushes(),
        controller_phase: controller.phase().clone(),
        topology: controller.topology().clone(),
        ledger: controller.into_ledger(),
        nodes,
        stats: StatsSnapshot::merge_all(snapshots.iter()),
    };
    Ok(assemble(cfg, &dep, Backend::Tcp, collected, None, None, None))
}
