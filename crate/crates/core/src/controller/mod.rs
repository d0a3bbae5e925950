//! Controller: authenticates participants, builds the topology, publishes
//! the signed key and address directory, and collects per-round metrics.

mod ledger;
mod report;
mod topology;

pub use ledger::{collect_metrics, distribute_keys, F1Stats, MetricsSummary, Registry, RegistryEntry, RunLedger};
pub use report::{read_report_csv, report_rows, write_report_csv, ReportRow, REPORT_HEADER};
pub use topology::{build_topology, Topology, TopologySpec};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{
    self, issue_token, CryptoError, KemKeyPair, KemPublicKey, KeyCertificate, ReplayCache,
    SecureEnvelope, SigningKeyPair, VerifyingKey,
};
use crate::driver::Actor;
use crate::fabric::{Delivery, FabricError, Frame, FrameKind, Micros, PeerAddress, Transport};
use crate::ids::{Millis, NodeId, Role, SecuritySetting};
use crate::mtd::RendezvousNotice;
use crate::protocol::{
    credential_for, json_frame, AuthRequest, AuthResponse, ControlMessage, Directory,
    DirectoryEntry, MetricsReport, Schedule, SignedDirectory,
};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub seed: u64,
    pub address: PeerAddress,
    pub security: SecuritySetting,
    /// Every participant the controller will admit, with its role.
    pub expected: BTreeMap<NodeId, Role>,
    /// Graph over the model-sharing participants.
    pub topology: Topology,
    pub rounds: u32,
    pub round_period_us: Micros,
    /// Gap between the first directory and round 0.
    pub start_delay_us: Micros,
    /// Stop waiting for missing participants after this long.
    pub auth_deadline_us: Micros,
    /// How long to wait for the remaining key updates of one renewal wave.
    pub key_update_wait_us: Micros,
    pub token_ttl_ms: Millis,
    /// Extra time after the last scheduled round before giving up on reports.
    pub finish_grace_us: Micros,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.round_period_us == 0 || self.token_ttl_ms == 0 {
            return Err(ControllerError::Config(
                "round period and token lifetime must be positive".into(),
            ));
        }
        if self.expected.keys().any(|n| n.is_controller() || n.is_attacker()) {
            return Err(ControllerError::Config("participant ids collide with reserved ids".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerPhase {
    Admitting,
    Running,
    Done,
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CtlTimer {
    AuthDeadline,
    KeyWait,
    GiveUp,
}

pub struct Controller {
    cfg: ControllerConfig,
    transport: Box<dyn Transport>,
    rng: ChaCha8Rng,
    signer: SigningKeyPair,
    kem: KemKeyPair,
    replay: ReplayCache,
    phase: ControllerPhase,
    timers: Vec<(Micros, CtlTimer)>,
    registry: Registry,
    topology: Topology,
    schedule: Option<Schedule>,
    directory_epoch: u32,
    directory_pushes: u32,
    key_updates: BTreeSet<NodeId>,
    ledger: RunLedger,
    rejected_auth: u32,
    rejected_reports: u32,
    auth_requests: u32,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, transport: Box<dyn Transport>) -> Result<Self, ControllerError> {
        cfg.validate()?;
        transport.bind(cfg.address)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0_17_20_11_E5);
        let now = transport.now();
        let signer = SigningKeyPair::generate(&mut rng, now / 1000);
        let kem = KemKeyPair::generate(&mut rng, now / 1000, 0);
        Ok(Controller {
            topology: cfg.topology.clone(),
            timers: vec![(now + cfg.auth_deadline_us, CtlTimer::AuthDeadline)],
            rng,
            signer,
            kem,
            replay: ReplayCache::new(),
            phase: ControllerPhase::Admitting,
            registry: Registry::default(),
            schedule: None,
            directory_epoch: 0,
            directory_pushes: 0,
            key_updates: BTreeSet::new(),
            ledger: RunLedger::default(),
            rejected_auth: 0,
            rejected_reports: 0,
            auth_requests: 0,
            cfg,
            transport,
        })
    }

    pub fn phase(&self) -> &ControllerPhase {
        &self.phase
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn schedule(&self) -> Option<Schedule> {
        self.schedule
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> RunLedger {
        self.ledger
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signer.verifying_key()
    }

    pub fn kem_public(&self) -> KemPublicKey {
        self.kem.public_key()
    }

    pub fn directory_pushes(&self) -> u32 {
        self.directory_pushes
    }

    pub fn auth_requests(&self) -> u32 {
        self.auth_requests
    }

    /// `(rejected authentications, rejected metrics reports)`.
    pub fn rejections(&self) -> (u32, u32) {
        (self.rejected_auth, self.rejected_reports)
    }

    /// Reports expected from the admitted model-sharing participants.
    pub fn expected_reports(&self) -> usize {
        let sharing = self.registry.iter().filter(|(_, e)| e.role.shares_model()).count();
        sharing * self.cfg.rounds as usize
    }

    fn now_ms(&self) -> Millis {
        self.transport.now() / 1000
    }

    fn send(&self, to: PeerAddress, frame: &Frame) {
        if let Err(e) = self.transport.send_frame(to, frame) {
            log::debug!("controller send to {to} failed: {e}");
        }
    }

    fn respond(&mut self, req: &AuthRequest, result: Result<crypto::AuthToken, String>) {
        let (accepted, token, reason) = match result {
            Ok(t) => (true, Some(t), None),
            Err(r) => {
                self.rejected_auth += 1;
                (false, None, Some(r))
            }
        };
        let resp = AuthResponse {
            node_id: req.node_id,
            accepted,
            token,
            reason,
            controller_key: self.signer.verifying_key().to_base64(),
            controller_kem: self.kem.public_key(),
        };
        let frame = json_frame(FrameKind::AuthResponse, req.node_id.0, &resp);
        self.send(req.address, &frame);
    }

    fn on_auth_request(&mut self, body: &[u8]) {
        let Ok(req) = serde_json::from_slice::<AuthRequest>(body) else {
            self.rejected_auth += 1;
            return;
        };
        self.auth_requests += 1;
        let check = match self.cfg.expected.get(&req.node_id) {
            None => Err(format!("node {} is not part of this run", req.node_id)),
            Some(_) if req.credential != credential_for(self.cfg.seed, req.node_id) => {
                Err("bad credential".to_string())
            }
            Some(&role) if role != req.role => Err(format!("expected role {role}")),
            Some(_) if self.cfg.security.encrypts() && req.public_key.is_none() => {
                Err("public key required".to_string())
            }
            Some(_) if self.phase != ControllerPhase::Admitting && !self.registry.contains(req.node_id) => {
                Err("admission closed".to_string())
            }
            Some(_) => Ok(()),
        };
        if let Err(reason) = check {
            self.respond(&req, Err(reason));
            return;
        }
        let now = self.now_ms();
        let token = match issue_token(
            req.node_id,
            req.role,
            vec!["model:exchange".into(), "metrics:report".into()],
            now,
            self.cfg.token_ttl_ms,
            &self.signer,
        ) {
            Ok(t) => t,
            Err(e) => {
                self.respond(&req, Err(e.to_string()));
                return;
            }
        };
        let expires = token.expires_at();
        if let Some(e) = self.registry.get_mut(req.node_id) {
            // re-authentication only extends the lease
            e.token_expires_at = expires;
        } else {
            let cert = req
                .public_key
                .map(|pk| KeyCertificate::issue(&self.signer, req.node_id, pk, req.key_epoch, now));
            self.registry.insert(
                req.node_id,
                RegistryEntry {
                    role: req.role,
                    address: req.address,
                    address_epoch: 0,
                    public_key: req.public_key,
                    previous_key: None,
                    key_epoch: req.key_epoch,
                    cert,
                    token_expires_at: expires,
                },
            );
        }
        self.respond(&req, Ok(token));
        if self.phase == ControllerPhase::Admitting && self.registry.len() == self.cfg.expected.len() {
            self.start_run();
        }
    }

    fn start_run(&mut self) {
        let sharing: BTreeSet<NodeId> = self
            .registry
            .iter()
            .filter(|(_, e)| e.role.shares_model())
            .map(|(n, _)| n)
            .collect();
        if sharing.len() < 2 {
            self.abort(format!("only {} model-sharing participants authenticated", sharing.len()));
            return;
        }
        let expected_sharing = self.cfg.expected.values().filter(|r| r.shares_model()).count();
        if sharing.len() < expected_sharing {
            self.topology = self.topology.restrict(&sharing, &mut self.rng);
        }
        let now = self.transport.now();
        let schedule = Schedule {
            start_at_us: now + self.cfg.start_delay_us,
            round_period_us: self.cfg.round_period_us,
            rounds: self.cfg.rounds,
        };
        self.schedule = Some(schedule);
        self.phase = ControllerPhase::Running;
        self.timers.retain(|(_, t)| *t != CtlTimer::AuthDeadline);
        let give_up = schedule.round_start(schedule.rounds) + self.cfg.finish_grace_us;
        self.timers.push((give_up, CtlTimer::GiveUp));
        if schedule.rounds == 0 {
            self.phase = ControllerPhase::Done;
        }
        self.push_directory();
    }

    /// Signs the current registry into a directory and sends it to every
    /// registered node.
    pub fn push_directory(&mut self) {
        self.directory_epoch += 1;
        let entries: Vec<DirectoryEntry> = self
            .registry
            .iter()
            .map(|(n, e)| DirectoryEntry {
                node_id: n,
                role: e.role,
                address: e.address,
                address_epoch: e.address_epoch,
                cert: e.cert.clone(),
                neighbors: self.topology.neighbors(n),
            })
            .collect();
        let dir = Directory {
            epoch: self.directory_epoch,
            issued_at: self.now_ms(),
            schedule: self.schedule,
            entries,
        };
        let signed = SignedDirectory::sign(dir, &self.signer);
        let frame = json_frame(
            FrameKind::Control,
            self.directory_epoch,
            &ControlMessage::KeyDirectory(signed),
        );
        for (_, e) in self.registry.iter() {
            self.send(e.address, &frame);
        }
        self.directory_pushes += 1;
        self.key_updates.clear();
        self.timers.retain(|(_, t)| *t != CtlTimer::KeyWait);
    }

    /// Tells every registered node to stop.
    pub fn abort(&mut self, reason: String) {
        log::warn!("controller aborts the run: {reason}");
        let frame = json_frame(
            FrameKind::Control,
            0,
            &ControlMessage::Abort {
                reason: reason.clone(),
            },
        );
        for (_, e) in self.registry.iter() {
            self.send(e.address, &frame);
        }
        self.timers.clear();
        self.phase = ControllerPhase::Aborted(reason);
    }

    fn on_control(&mut self, body: &[u8]) {
        let Ok(ControlMessage::KeyUpdate {
            node_id,
            key_epoch,
            public_key,
        }) = serde_json::from_slice::<ControlMessage>(body)
        else {
            return;
        };
        let now = self.now_ms();
        if !self.registry.token_valid(node_id, now) {
            self.rejected_reports += 1;
            return;
        }
        let cert = KeyCertificate::issue(&self.signer, node_id, public_key, key_epoch, now);
        let Some(e) = self.registry.get_mut(node_id) else {
            return;
        };
        if key_epoch <= e.key_epoch {
            return;
        }
        e.previous_key = e.public_key;
        e.public_key = Some(public_key);
        e.key_epoch = key_epoch;
        e.cert = Some(cert);
        self.key_updates.insert(node_id);
        let waiting: BTreeSet<NodeId> = self
            .registry
            .iter()
            .filter(|(_, e)| e.role.shares_model() && e.public_key.is_some())
            .map(|(n, _)| n)
            .collect();
        if waiting.is_subset(&self.key_updates) {
            self.push_directory();
        } else if !self.timers.iter().any(|(_, t)| *t == CtlTimer::KeyWait) {
            let at = self.transport.now() + self.cfg.key_update_wait_us;
            self.timers.push((at, CtlTimer::KeyWait));
        }
    }

    fn on_rendezvous(&mut self, body: &[u8]) {
        let Ok(env) = SecureEnvelope::decode(body) else {
            return;
        };
        let Some(entry) = self.registry.get(env.sender_id) else {
            return;
        };
        let keys: Vec<KemPublicKey> = entry.public_key.into_iter().chain(entry.previous_key).collect();
        let Some(plain) = keys.iter().find_map(|k| crypto::open(&env, &self.kem, k).ok()) else {
            return;
        };
        if self
            .replay
            .check_and_record(env.sender_id, env.epoch, &env.nonce)
            .is_err()
        {
            return;
        }
        let Ok(notice) = RendezvousNotice::from_bytes(&plain) else {
            return;
        };
        if notice.node_id == env.sender_id {
            self.registry
                .update_address(notice.node_id, notice.new_address, notice.effective_epoch);
        }
    }

    fn on_metrics(&mut self, body: &[u8]) {
        let Ok(report) = serde_json::from_slice::<MetricsReport>(body) else {
            self.rejected_reports += 1;
            return;
        };
        if !self.registry.token_valid(report.node_id, self.now_ms()) || report.round >= self.cfg.rounds {
            self.rejected_reports += 1;
            return;
        }
        if !self.ledger.insert(report) {
            self.rejected_reports += 1;
        }
        if self.phase == ControllerPhase::Running && self.ledger.len() >= self.expected_reports() {
            self.phase = ControllerPhase::Done;
            self.timers.clear();
        }
    }
}

impl Actor for Controller {
    fn id(&self) -> NodeId {
        NodeId::CONTROLLER
    }

    fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }

    fn next_timer(&self) -> Option<Micros> {
        self.timers.iter().map(|(t, _)| *t).min()
    }

    fn on_timer(&mut self, now: Micros) {
        let Some(pos) = self
            .timers
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t <= now)
            .min_by_key(|(i, (t, _))| (*t, *i))
            .map(|(i, _)| i)
        else {
            return;
        };
        let (_, timer) = self.timers.remove(pos);
        match timer {
            CtlTimer::AuthDeadline => {
                if self.phase == ControllerPhase::Admitting {
                    self.start_run();
                }
            }
            CtlTimer::KeyWait => {
                if !self.key_updates.is_empty() {
                    self.push_directory();
                }
            }
            CtlTimer::GiveUp => {
                if self.phase == ControllerPhase::Running {
                    log::warn!(
                        "controller stops with {} of {} reports",
                        self.ledger.len(),
                        self.expected_reports()
                    );
                    self.phase = ControllerPhase::Done;
                    self.timers.clear();
                }
            }
        }
    }

    fn on_frame(&mut self, d: Delivery) {
        if matches!(self.phase, ControllerPhase::Aborted(_)) {
            return;
        }
        match d.frame.kind {
            FrameKind::AuthRequest => self.on_auth_request(&d.frame.body),
            FrameKind::Control => self.on_control(&d.frame.body),
            FrameKind::RendezvousNotice => self.on_rendezvous(&d.frame.body),
            FrameKind::MetricsReport => self.on_metrics(&d.frame.body),
            FrameKind::ModelExchange | FrameKind::AuthResponse => {}
        }
    }

    fn finished(&self) -> bool {
        matches!(self.phase, ControllerPhase::Done | ControllerPhase::Aborted(_))
    }
}
