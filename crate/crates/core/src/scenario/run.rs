use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::deploy::{sim_attacker_address, sim_controller_address, sim_node_address, Deployment, Timing};
use super::{ScenarioConfig, ScenarioError};
use crate::adversary::{
    eclipse_success, isolated_rounds, isolation_probability, monte_carlo_isolation, run_network_map,
    topology_recall, AttackKind, AttackOutcome, AttackPlan, CaptureLog, EclipseAttacker, EclipseInterceptor,
    TapInterceptor,
};
use crate::controller::{collect_metrics, report_rows, Controller, ControllerPhase, F1Stats, ReportRow, RunLedger, Topology};
use crate::driver::SimDriver;
use crate::fabric::{Backend, FrameLogEntry, Micros, SimFabric, StatsSnapshot};
use crate::ids::{NodeId, Role, SecuritySetting};
use crate::mtd::default_sample_size;
use crate::node::{node_stream_seed, Node, NodeEvent, Phase, RoundRecord};

const STREAM_MONTE_CARLO: u64 = 4;

/// Per-node artifact, `node-<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeId,
    pub role: Role,
    pub phase: String,
    pub activity_ratio: f64,
    pub auth_requests: u32,
    pub auth_responses: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_f1: Option<f64>,
    pub records: Vec<RoundRecord>,
    pub events: Vec<NodeEvent>,
}

impl NodeSummary {
    pub fn from_node(n: &Node) -> Self {
        let (auth_requests, auth_responses) = n.auth_exchanges();
        NodeSummary {
            node: n.id(),
            role: n.role(),
            phase: match n.phase() {
                Phase::Failed(r) => format!("failed: {r}"),
                p => format!("{p:?}").to_lowercase(),
            },
            activity_ratio: n.activity_ratio(),
            auth_requests,
            auth_responses,
            final_f1: n.records().last().and_then(|r| r.eval.as_ref()).map(|e| e.f1_macro),
            records: n.records().to_vec(),
            events: n.events().to_vec(),
        }
    }

    pub fn failure(&self) -> Option<&str> {
        self.phase.strip_prefix("failed: ")
    }

    pub fn starved_rounds(&self) -> usize {
        self.records.iter().filter(|r| r.starved).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// No round produced a report.
    Empty,
    Aborted { reason: String },
}

/// `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub security: SecuritySetting,
    pub seed: u64,
    pub backend: Backend,
    pub nodes: u32,
    pub rounds: u32,
    #[serde(flatten)]
    pub status: RunStatus,
    pub reports: usize,
    pub expected_reports: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_f1: Option<F1Stats>,
    pub f1_per_round: Vec<F1Stats>,
    pub total_bytes: u64,
    pub control_bytes: u64,
    pub ctrl_overhead_pct: f64,
    pub routing_errors: u64,
    pub starved_rounds: usize,
    pub directory_pushes: u32,
    pub timing: Timing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackOutcome>,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub rows: Vec<ReportRow>,
    pub ledger: RunLedger,
    pub nodes: Vec<NodeSummary>,
    pub stats: StatsSnapshot,
    pub topology: Topology,
    /// Simulated backend only.
    pub frames: Option<Vec<FrameLogEntry>>,
    pub attack: Option<AttackOutcome>,
    pub capture: Option<CaptureLog>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn status(&self) -> &RunStatus {
        &self.summary.status
    }

    pub fn label(&self) -> &'static str {
        self.config.scenario.security.as_str()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSummary> {
        self.nodes.iter().find(|n| n.node == id)
    }

    pub fn final_f1_mean(&self) -> Option<f64> {
        self.summary.final_f1.map(|s| s.mean)
    }
}

pub(crate) struct Collected {
    pub ledger: RunLedger,
    pub nodes: Vec<NodeSummary>,
    pub stats: StatsSnapshot,
    pub topology: Topology,
    pub controller_phase: ControllerPhase,
    pub directory_pushes: u32,
    pub expected_reports: usize,
}

pub(crate) fn assemble(
    cfg: &ScenarioConfig,
    dep: &Deployment,
    backend: Backend,
    c: Collected,
    frames: Option<Vec<FrameLogEntry>>,
    attack: Option<AttackOutcome>,
    capture: Option<CaptureLog>,
) -> RunOutput {
    let label = cfg.scenario.security.as_str();
    let rows = report_rows(label, &c.ledger);
    let metrics = collect_metrics(&c.ledger);
    let status = if let ControllerPhase::Aborted(r) = &c.controller_phase {
        RunStatus::Aborted { reason: r.clone() }
    } else if let Some(n) = c.nodes.iter().find(|n| n.failure().is_some()) {
        RunStatus::Aborted {
            reason: format!("node {}: {}", n.node, n.failure().unwrap_or_default()),
        }
    } else if c.ledger.is_empty() {
        RunStatus::Empty
    } else {
        RunStatus::Completed
    };
    let totals = c.stats.totals;
    let summary = RunSummary {
        name: cfg.scenario.name.clone(),
        security: cfg.scenario.security,
        seed: cfg.scenario.seed,
        backend,
        nodes: cfg.scenario.nodes,
        rounds: cfg.scenario.rounds,
        status,
        reports: c.ledger.len(),
        expected_reports: c.expected_reports,
        final_f1: metrics.final_f1,
        f1_per_round: metrics.per_round,
        total_bytes: totals.bytes_sent,
        control_bytes: totals.control_bytes,
        ctrl_overhead_pct: totals.ctrl_overhead_pct(),
        routing_errors: c.stats.routing_errors,
        starved_rounds: c.nodes.iter().map(NodeSummary::starved_rounds).sum(),
        directory_pushes: c.directory_pushes,
        timing: dep.timing,
        attack: attack.clone(),
    };
    RunOutput {
        config: cfg.clone(),
        rows,
        ledger: c.ledger,
        nodes: c.nodes,
        stats: c.stats,
        topology: c.topology,
        frames,
        attack,
        capture,
        summary,
    }
}

struct AttackRig {
    plan: AttackPlan,
    tap: Option<Arc<TapInterceptor>>,
    eclipse: Option<Arc<EclipseInterceptor>>,
    attackers: Vec<EclipseAttacker>,
}

impl AttackRig {
    fn install(cfg: &ScenarioConfig, dep: &Deployment, fabric: &SimFabric) -> Result<Option<Self>, ScenarioError> {
        let Some(plan) = cfg.attack.clone() else {
            return Ok(None);
        };
        let target = plan.target_id();
        let window = plan.window(cfg.scenario.rounds);
        let mut rig = AttackRig {
            plan: plan.clone(),
            tap: None,
            eclipse: None,
            attackers: Vec::new(),
        };
        match plan.kind {
            AttackKind::Eavesdrop | AttackKind::NetworkMap => {
                let tap = TapInterceptor::new(plan.tap.clone(), target);
                fabric.add_interceptor(tap.clone());
                rig.tap = Some(tap);
            }
            AttackKind::Eclipse => {
                let neighbors = dep.topology.neighbors(target);
                let ids = plan.attacker_ids();
                let addrs: Vec<_> = (0..plan.attackers).map(sim_attacker_address).collect();
                let hook = EclipseInterceptor::new(target, neighbors.clone(), addrs.clone(), window);
                fabric.add_interceptor(hook.clone());
                rig.eclipse = Some(hook);
                for (k, (&id, &addr)) in ids.iter().zip(&addrs).enumerate() {
                    let impersonate = neighbors
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % ids.len() == k)
                        .map(|(_, &n)| n)
                        .collect();
                    let ep = fabric.endpoint(id).map_err(ScenarioError::runtime)?;
                    let a = EclipseAttacker::new(
                        id,
                        Box::new(ep),
                        addr,
                        target,
                        impersonate,
                        dep.initial.clone(),
                        cfg.scenario.security.encrypts(),
                        node_stream_seed(cfg.scenario.seed, id, 1),
                    )
                    .map_err(ScenarioError::runtime)?;
                    rig.attackers.push(a);
                }
            }
        }
        Ok(Some(rig))
    }

    fn outcome(
        &self,
        cfg: &ScenarioConfig,
        dep: &Deployment,
        nodes: &[NodeSummary],
        frames: &[FrameLogEntry],
    ) -> (AttackOutcome, CaptureLog) {
        let plan = &self.plan;
        let rounds = cfg.scenario.rounds;
        let window = plan.window(rounds);
        let target = plan.target_id();
        let security = cfg.scenario.security;
        let records: &[RoundRecord] = nodes
            .iter()
            .find(|n| n.node == target)
            .map(|n| n.records.as_slice())
            .unwrap_or_default();
        let mut outcome = AttackOutcome {
            attack: plan.kind,
            target,
            window_rounds: plan.window_len(rounds),
            isolated_rounds: 0,
            control_established: false,
            plaintext_param_sets_recovered: 0,
            topology_recall: None,
            sample_rate: None,
            sample_rate_expected: None,
            success: false,
        };
        let capture = match plan.kind {
            AttackKind::Eclipse => {
                let captured = self.attackers.iter().flat_map(|a| a.captured().iter().cloned()).collect();
                CaptureLog::from_frames(captured)
            }
            _ => self.tap.as_ref().map(|t| t.capture()).unwrap_or_default(),
        };
        let recovered = capture
            .recovered_params
            .iter()
            .filter(|p| window.contains(&p.round))
            .count() as u32;
        outcome.plaintext_param_sets_recovered = recovered;
        match plan.kind {
            AttackKind::Eclipse => {
                outcome.isolated_rounds = isolated_rounds(target, records, window.clone(), frames);
                outcome.control_established = records
                    .iter()
                    .filter(|r| window.contains(&r.round))
                    .any(|r| r.accepted_sources.iter().any(|s| s.is_attacker()));
                if security.uses_mtd() {
                    let m = dep.sharing_nodes().len() - 1;
                    let a = dep.topology.degree(target);
                    let n = cfg.mtd.sample_size.unwrap_or_else(|| default_sample_size(m));
                    let seed = node_stream_seed(cfg.scenario.seed, target, STREAM_MONTE_CARLO);
                    outcome.sample_rate = Some(monte_carlo_isolation(m, a, n, plan.monte_carlo_rounds, seed));
                    outcome.sample_rate_expected = Some(isolation_probability(m, a, n));
                }
                outcome.success = eclipse_success(
                    security,
                    outcome.window_rounds,
                    outcome.isolated_rounds,
                    outcome.control_established,
                    recovered,
                );
            }
            AttackKind::Eavesdrop => {
                outcome.success = recovered > 0;
            }
            AttackKind::NetworkMap => {
                let map = run_network_map(&capture, window);
                let recall = topology_recall(&map.edges, map_truth(security, dep));
                outcome.topology_recall = Some(recall);
                outcome.success = recall >= 1.0;
            }
        }
        (outcome, capture)
    }
}

/// Edges the mapping attacker tries to learn: the declared overlay, or
/// under MTD every pair that may exchange models.
pub fn map_truth(security: SecuritySetting, dep: &Deployment) -> Vec<(NodeId, NodeId)> {
    if security.uses_mtd() {
        let nodes = dep.sharing_nodes();
        let mut e = Vec::new();
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                e.push((a, b));
            }
        }
        e
    } else {
        dep.topology.edges()
    }
}

/// Runs a scenario on the simulated fabric. `base` resolves relative
/// dataset paths.
pub fn run_sim(cfg: &ScenarioConfig, base: Option<&Path>) -> Result<RunOutput, ScenarioError> {
    let dep = Deployment::plan(cfg, base, Backend::Sim)?;
    let fabric = SimFabric::new(cfg.fabric.clone(), cfg.scenario.seed).map_err(ScenarioError::runtime)?;
    let mut rig = AttackRig::install(cfg, &dep, &fabric)?;

    let ctl_addr = sim_controller_address();
    let ctl_ep = fabric.endpoint(NodeId::CONTROLLER).map_err(ScenarioError::runtime)?;
    let mut controller =
        Controller::new(dep.controller_config(cfg, ctl_addr), Box::new(ctl_ep)).map_err(ScenarioError::runtime)?;
    let mut nodes = Vec::new();
    for id in cfg.node_ids() {
        let ep = fabric.endpoint(id).map_err(ScenarioError::runtime)?;
        let nc = dep.node_config(cfg, id, sim_node_address(id), ctl_addr, false);
        nodes.push(Node::new(nc, Box::new(ep)).map_err(ScenarioError::runtime)?);
    }

    let stop = {
        let mut driver = SimDriver::new(fabric.clone());
        driver.add(&mut controller);
        for n in nodes.iter_mut() {
            driver.add(n);
        }
        if let Some(r) = rig.as_mut() {
            for a in r.attackers.iter_mut() {
                driver.add(a);
            }
        }
        driver.run(Micros::MAX)
    };
    log::debug!("simulation stopped: {stop:?}");

    let frames = fabric.frame_log();
    let summaries: Vec<NodeSummary> = nodes.iter().map(NodeSummary::from_node).collect();
    let (attack, capture) = match &rig {
        Some(r) => {
            let (o, c) = r.outcome(cfg, &dep, &summaries, &frames);
            (Some(o), Some(c))
        }
        None => (None, None),
    };
    let collected = Collected {
        expected_reports: controller.expected_reports(),
        directory_pushes: controller.directory_pushes(),
        controller_phase: controller.phase().clone(),
        topology: controller.topology().clone(),
        ledger: controller.into_ledger(),
        nodes: summaries,
        stats: fabric.stats().snapshot(),
    };
    Ok(assemble(cfg, &dep, Backend::Sim, collected, Some(frames), attack, capture))
}

/// Participants of a run that take part in model exchange.
pub fn sharing_set(out: &RunOutput) -> BTreeSet<NodeId> {
    out.nodes.iter().filter(|n| n.role.shares_model()).map(|n| n.node).collect()
}
