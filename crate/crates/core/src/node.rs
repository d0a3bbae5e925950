//! Participant runtime: authentication, the per-round train / exchange /
//! aggregate cycle, key renewal and address rotation.
//!
//! A [`Node`] is an event-driven [`Actor`]. Rounds follow the schedule
//! carried in the controller's directory, so every participant starts
//! round `r` at the same fabric time regardless of local delays.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, renew_session, verify_token, AuthToken, CryptoError, KemKeyPair, KemPublicKey,
    RenewalPolicy, ReplayCache, SecureEnvelope, SessionKey, VerifyingKey,
};
use crate::driver::Actor;
use crate::fabric::{
    AddressPool, Delivery, FabricError, Frame, FrameKind, Micros, NodeTotals, PeerAddress,
    Received, Transport,
};
use crate::ids::{Millis, NodeId, Role, SecuritySetting};
use crate::model::{aggregate_fedavg, evaluate, train_local, Dataset, EvalReport, ModelError};
use crate::model::{ModelParams, TrainConfig};
use crate::mtd::{
    default_sample_size, mtd_select_neighbors, rotate_and_bind, AddressBook, NeighborPool,
    RendezvousNotice, RendezvousOutcome, Rotation,
};
use crate::protocol::{
    credential_for, json_frame, AuthRequest, AuthResponse, ControlMessage, MetricsReport,
    ModelMessage, Schedule, SignedDirectory,
};
use crate::resources::ResourceSampler;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid node configuration: {0}")]
    Config(String),
    #[error("authentication rejected: {0}")]
    Rejected(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("timed out waiting for round {0}")]
    Timeout(u32),
}

/// Modelled compute cost, charged to the virtual clock in simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    pub train_us_per_sample: f64,
    pub eval_us_per_sample: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel {
            train_us_per_sample: 25.0,
            eval_us_per_sample: 5.0,
        }
    }
}

impl ComputeModel {
    pub fn train_us(&self, samples: usize, epochs: usize) -> Micros {
        (self.train_us_per_sample * (samples * epochs) as f64).ceil() as Micros
    }

    pub fn eval_us(&self, samples: usize) -> Micros {
        (self.eval_us_per_sample * samples as f64).ceil() as Micros
    }
}

/// Address rotation settings as seen by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct MtdSettings {
    /// `None` selects `⌈|N_all| / 2⌉` once the directory is known.
    pub sample_size: Option<usize>,
    /// Rotate after every `rotation_interval` rounds.
    pub rotation_interval: u32,
    /// How long a released address keeps receiving.
    pub grace_us: Micros,
    pub pool: AddressPool,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: NodeId,
    pub role: Role,
    pub security: SecuritySetting,
    /// Scenario seed; the node derives its own streams from it.
    pub seed: u64,
    pub initial_params: ModelParams,
    pub train_data: Dataset,
    pub test_data: Dataset,
    pub train: TrainConfig,
    pub compute: ComputeModel,
    pub receive_timeout_us: Micros,
    /// Delay after sending before a node that received nothing asks its
    /// targets for their model.
    pub pull_after_us: Micros,
    pub renewal: RenewalPolicy,
    pub mtd: Option<MtdSettings>,
    pub controller_addr: PeerAddress,
    pub address: PeerAddress,
    pub auth_retry_us: Micros,
    pub sample_resources: bool,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        if self.receive_timeout_us == 0 {
            return Err(NodeError::Config("receive timeout must be positive".into()));
        }
        if self.security.uses_mtd() != self.mtd.is_some() {
            return Err(NodeError::Config(
                "rotation settings must be present exactly under encryption-mtd".into(),
            ));
        }
        if let Some(m) = &self.mtd {
            if m.rotation_interval == 0 {
                return Err(NodeError::Config("rotation interval must be at least 1".into()));
            }
            m.pool.validate()?;
        }
        if self.role.trains() && self.train_data.is_empty() {
            return Err(NodeError::Config(format!("node {} has no training data", self.id)));
        }
        self.train.validate()?;
        self.initial_params.check_shape()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCounters {
    pub decrypt_failures: u32,
    pub replays: u32,
    pub stale: u32,
    pub impersonations: u32,
    pub send_errors: u32,
    pub pulls_sent: u32,
    pub pulls_answered: u32,
}

/// Everything a node observed during one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Peers this node pushed its model to.
    pub neighbors_used: Vec<NodeId>,
    pub params_sent: usize,
    pub params_received: usize,
    /// Claimed senders of the models aggregated this round.
    pub received_from: Vec<NodeId>,
    /// Fabric endpoints the accepted model frames actually came from.
    pub accepted_sources: Vec<NodeId>,
    pub eval: Option<EvalReport>,
    pub start_us: Micros,
    pub end_us: Micros,
    pub active_intervals: Vec<(Micros, Micros)>,
    pub starved: bool,
    pub counters: RoundCounters,
    pub traffic: NodeTotals,
    pub cpu_pct: Option<f64>,
    pub ram_pct: Option<f64>,
    pub renewed: bool,
    pub rotated_to: Option<PeerAddress>,
}

impl RoundRecord {
    pub fn active_us(&self) -> Micros {
        self.active_intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn wall_us(&self) -> Micros {
        self.end_us - self.start_us
    }
}

/// `Σ active / Σ wall` over the given rounds; 0 when no time elapsed.
pub fn compute_activity_ratio(records: &[RoundRecord]) -> f64 {
    let active: Micros = records.iter().map(RoundRecord::active_us).sum();
    let wall: Micros = records.iter().map(RoundRecord::wall_us).sum();
    if wall == 0 {
        0.0
    } else {
        active as f64 / wall as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NodeEventKind {
    AuthRequested,
    Authenticated { expires_at: Millis },
    DirectoryApplied { epoch: u32 },
    KeysRenewed { epoch: u32 },
    AddressRotated { address: PeerAddress },
    AddressReleased { address: PeerAddress },
    RendezvousApplied { peer: NodeId },
    Starved { round: u32 },
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEvent {
    pub at_us: Micros,
    #[serde(flatten)]
    pub kind: NodeEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Authenticating,
    AwaitingDirectory,
    Running,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timer {
    Auth,
    RoundStart(u32),
    Send(u32),
    PullCheck(u32),
    Deadline(u32),
    Finish(u32),
    Release(PeerAddress),
}

#[derive(Debug, Clone)]
struct PeerKeys {
    current: KemPublicKey,
    epoch: u32,
    previous: Option<KemPublicKey>,
}

struct RoundState {
    round: u32,
    start_us: Micros,
    targets: Option<BTreeSet<NodeId>>,
    outgoing: Option<ModelParams>,
    sent: usize,
    replied: BTreeSet<NodeId>,
    active: Vec<(Micros, Micros)>,
    eval: Option<EvalReport>,
    starved: bool,
    aggregated_from: Vec<NodeId>,
}

const MAX_AUTH_ATTEMPTS: u32 = 8;

pub struct Node {
    cfg: NodeConfig,
    transport: Box<dyn Transport>,
    rng: ChaCha8Rng,
    phase: Phase,
    timers: Vec<(Micros, Timer)>,
    events: Vec<NodeEvent>,

    token: Option<AuthToken>,
    controller_key: Option<VerifyingKey>,
    controller_kem: Option<KemPublicKey>,
    auth_attempts: u32,
    auth_requests: u32,
    auth_responses: u32,
    reauth_pending: bool,

    kem: Option<KemKeyPair>,
    kem_prev: Option<KemKeyPair>,
    published_epoch: u32,
    session: Option<SessionKey>,
    replay: ReplayCache,
    peer_keys: BTreeMap<NodeId, PeerKeys>,

    book: AddressBook,
    directory_epoch: Option<u32>,
    schedule: Option<Schedule>,
    participants: BTreeSet<NodeId>,
    roles: BTreeMap<NodeId, Role>,
    topology: BTreeSet<NodeId>,

    theta: ModelParams,
    current: Option<RoundState>,
    deadlines_passed: u32,
    inbox: BTreeMap<u32, BTreeMap<NodeId, ModelParams>>,
    sources: BTreeMap<u32, BTreeSet<NodeId>>,
    pending_replies: BTreeMap<u32, BTreeSet<NodeId>>,
    counters: RoundCounters,
    records: Vec<RoundRecord>,
    /// Node traffic up to the previous round's end.
    traffic_mark: NodeTotals,
    sampler: Option<ResourceSampler>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.rotate_left(32) ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Node {
    /// Binds the configured address and queues the first authentication.
    pub fn new(cfg: NodeConfig, transport: Box<dyn Transport>) -> Result<Self, NodeError> {
        cfg.validate()?;
        transport.bind(cfg.address)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, cfg.id.0 as u64, 1));
        let now = transport.now();
        let (kem, session) = if cfg.security.encrypts() {
            (
                Some(KemKeyPair::generate(&mut rng, now / 1000, 0)),
                Some(SessionKey::generate(&mut rng, 0)?),
            )
        } else {
            (None, None)
        };
        let sampler = if cfg.sample_resources && !transport.virtual_time() {
            ResourceSampler::new()
        } else {
            None
        };
        Ok(Node {
            theta: cfg.initial_params.clone(),
            book: AddressBook::new(cfg.address),
            rng,
            phase: Phase::Authenticating,
            timers: vec![(now, Timer::Auth)],
            events: Vec::new(),
            token: None,
            controller_key: None,
            controller_kem: None,
            auth_attempts: 0,
            auth_requests: 0,
            auth_responses: 0,
            reauth_pending: false,
            kem,
            kem_prev: None,
            published_epoch: 0,
            session,
            replay: ReplayCache::new(),
            peer_keys: BTreeMap::new(),
            directory_epoch: None,
            schedule: None,
            participants: BTreeSet::new(),
            roles: BTreeMap::new(),
            topology: BTreeSet::new(),
            current: None,
            deadlines_passed: 0,
            inbox: BTreeMap::new(),
            sources: BTreeMap::new(),
            pending_replies: BTreeMap::new(),
            traffic_mark: NodeTotals::default(),
            counters: RoundCounters::default(),
            records: Vec::new(),
            sampler,
            cfg,
            transport,
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn role(&self) -> Role {
        self.cfg.role
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn params(&self) -> &ModelParams {
        &self.theta
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn events(&self) -> &[NodeEvent] {
        &self.events
    }

    pub fn token(&self) -> Option<&AuthToken> {
        self.token.as_ref()
    }

    /// `(requests sent, responses accepted)` over the whole run.
    pub fn auth_exchanges(&self) -> (u32, u32) {
        (self.auth_requests, self.auth_responses)
    }

    pub fn key_epoch(&self) -> Option<u32> {
        self.kem.as_ref().map(|k| k.epoch)
    }

    pub fn session_epoch(&self) -> Option<u32> {
        self.session.as_ref().map(SessionKey::epoch)
    }

    pub fn address_book(&self) -> &AddressBook {
        &self.book
    }

    pub fn schedule(&self) -> Option<Schedule> {
        self.schedule
    }

    /// Other model-sharing participants, `N_all` minus this node.
    pub fn participants(&self) -> &BTreeSet<NodeId> {
        &self.participants
    }

    pub fn topology_neighbors(&self) -> &BTreeSet<NodeId> {
        &self.topology
    }

    pub fn activity_ratio(&self) -> f64 {
        compute_activity_ratio(&self.records)
    }

    pub fn into_transport(self) -> Box<dyn Transport> {
        self.transport
    }

    fn now(&self) -> Micros {
        self.transport.now()
    }

    fn now_ms(&self) -> Millis {
        self.now() / 1000
    }

    fn log(&mut self, kind: NodeEventKind) {
        let at_us = self.now();
        self.events.push(NodeEvent { at_us, kind });
    }

    fn schedule_timer(&mut self, at: Micros, t: Timer) {
        self.timers.push((at, t));
    }

    fn fail(&mut self, reason: String) {
        log::warn!("node {} stops: {reason}", self.cfg.id);
        self.log(NodeEventKind::Aborted {
            reason: reason.clone(),
        });
        self.phase = Phase::Failed(reason);
        self.timers.retain(|(_, t)| matches!(t, Timer::Release(_)));
    }

    fn send(&mut self, to: PeerAddress, frame: &Frame) -> bool {
        match self.transport.send_frame(to, frame) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("node {} send to {to} failed: {e}", self.cfg.id);
                self.counters.send_errors += 1;
                false
            }
        }
    }

    /// Blocks on the transport until round `r` is finished or the node
    /// stops. Meant for wall-clock transports driving a single node.
    pub fn run_round(&mut self, r: u32, timeout_us: Micros) -> Result<&RoundRecord, NodeError> {
        let give_up = self.now().saturating_add(timeout_us);
        while !self.records.iter().any(|x| x.round == r) {
            if let Phase::Failed(reason) = &self.phase {
                return Err(NodeError::Aborted(reason.clone()));
            }
            let now = self.now();
            if now >= give_up || self.phase == Phase::Done {
                return Err(NodeError::Timeout(r));
            }
            let wait = match self.next_timer() {
                Some(t) if t <= now => {
                    self.on_timer(now);
                    continue;
                }
                Some(t) => (t - now).min(give_up - now),
                None => give_up - now,
            };
            match self.transport.recv_frame(wait)? {
                Received::Frame(d) => self.on_frame(d),
                Received::Timeout => {}
            }
        }
        Ok(self.records.iter().find(|x| x.round == r).expect("present"))
    }

    // ---- authentication -------------------------------------------------

    fn send_auth_request(&mut self) {
        let address = self.book.self_binding().address;
        let req = AuthRequest {
            node_id: self.cfg.id,
            credential: credential_for(self.cfg.seed, self.cfg.id),
            role: self.cfg.role,
            address,
            public_key: self.kem.as_ref().map(KemKeyPair::public_key),
            key_epoch: self.kem.as_ref().map_or(0, |k| k.epoch),
        };
        let frame = json_frame(FrameKind::AuthRequest, self.cfg.id.0, &req);
        self.auth_requests += 1;
        self.log(NodeEventKind::AuthRequested);
        let to = self.cfg.controller_addr;
        self.send(to, &frame);
    }

    fn on_auth_timer(&mut self) {
        if self.phase != Phase::Authenticating {
            return;
        }
        if self.auth_attempts >= MAX_AUTH_ATTEMPTS {
            self.fail("controller unreachable".into());
            return;
        }
        self.auth_attempts += 1;
        self.send_auth_request();
        let at = self.now() + self.cfg.auth_retry_us;
        self.schedule_timer(at, Timer::Auth);
    }

    fn on_auth_response(&mut self, body: &[u8]) {
        let Ok(resp) = serde_json::from_slice::<AuthResponse>(body) else {
            return;
        };
        if resp.node_id != self.cfg.id {
            return;
        }
        if !resp.accepted {
            let reason = resp.reason.unwrap_or_else(|| "rejected".into());
            self.fail(format!("authentication rejected: {reason}"));
            return;
        }
        // the first response pins the controller key; later ones must match
        let Some(key) = resp.controller_verifying_key() else {
            return;
        };
        match &self.controller_key {
            Some(k) if *k != key => return,
            _ => {}
        }
        let Some(token) = resp.token else {
            return;
        };
        if verify_token(token.as_str(), &key, self.now_ms()).is_err() || token.subject() != self.cfg.id
        {
            return;
        }
        self.controller_key = Some(key);
        self.controller_kem = Some(resp.controller_kem);
        self.auth_responses += 1;
        self.reauth_pending = false;
        let expires_at = token.expires_at();
        self.token = Some(token);
        self.log(NodeEventKind::Authenticated { expires_at });
        if self.phase == Phase::Authenticating {
            self.phase = Phase::AwaitingDirectory;
            self.timers.retain(|(_, t)| *t != Timer::Auth);
        }
    }

    fn maybe_reauthenticate(&mut self) {
        let due = self
            .token
            .as_ref()
            .is_some_and(|t| self.now_ms() >= t.refresh_at());
        if due && !self.reauth_pending {
            self.reauth_pending = true;
            self.send_auth_request();
        }
    }

    // ---- directory ------------------------------------------------------

    fn on_control(&mut self, body: &[u8]) {
        let Ok(msg) = serde_json::from_slice::<ControlMessage>(body) else {
            return;
        };
        match msg {
            ControlMessage::KeyDirectory(signed) => self.apply_directory(signed),
            ControlMessage::Abort { reason } => {
                if !matches!(self.phase, Phase::Done | Phase::Failed(_)) {
                    self.fail(format!("controller aborted the run: {reason}"));
                }
            }
            ControlMessage::Pull { node_id, round } => self.on_pull(node_id, round),
            ControlMessage::KeyUpdate { .. } => {}
        }
    }

    fn apply_directory(&mut self, signed: SignedDirectory) {
        let Some(ck) = self.controller_key else {
            return;
        };
        if !signed.verify(&ck) {
            log::warn!("node {} ignores a directory with a bad signature", self.cfg.id);
            return;
        }
        let dir = signed.directory;
        if self.directory_epoch.is_some_and(|e| dir.epoch <= e) {
            return;
        }
        self.directory_epoch = Some(dir.epoch);
        let me = self.cfg.id;
        self.participants.clear();
        self.roles.clear();
        for entry in &dir.entries {
            self.roles.insert(entry.node_id, entry.role);
            if entry.node_id == me {
                self.topology = entry.neighbors.iter().copied().filter(|&n| n != me).collect();
                if let (Some(cert), Some(kem)) = (&entry.cert, &self.kem) {
                    if cert.public_key == kem.public_key() && cert.verify(&ck).is_ok() {
                        self.published_epoch = kem.epoch;
                    }
                }
                continue;
            }
            if entry.role.shares_model() {
                self.participants.insert(entry.node_id);
            }
            self.book.upsert(entry.node_id, entry.address, entry.address_epoch);
            if let Some(cert) = &entry.cert {
                if cert.node_id != entry.node_id || cert.verify(&ck).is_err() {
                    continue;
                }
                let keys = self.peer_keys.entry(entry.node_id).or_insert(PeerKeys {
                    current: cert.public_key,
                    epoch: cert.key_epoch,
                    previous: None,
                });
                if cert.key_epoch > keys.epoch {
                    keys.previous = Some(keys.current);
                    keys.current = cert.public_key;
                    keys.epoch = cert.key_epoch;
                }
            }
        }
        self.log(NodeEventKind::DirectoryApplied { epoch: dir.epoch });
        if self.schedule.is_none() {
            if let Some(s) = dir.schedule {
                self.schedule = Some(s);
                if self.phase == Phase::AwaitingDirectory {
                    self.phase = Phase::Running;
                    if s.rounds == 0 {
                        self.phase = Phase::Done;
                    } else {
                        self.schedule_timer(s.round_start(0), Timer::RoundStart(0));
                    }
                }
            }
        }
    }

    // ---- sealing --------------------------------------------------------

    fn sealing_key(&self) -> Option<&KemKeyPair> {
        match (&self.kem, &self.kem_prev) {
            (Some(k), _) if k.epoch <= self.published_epoch => Some(k),
            (Some(_), Some(p)) => Some(p),
            (k, _) => k.as_ref(),
        }
    }

    fn seal_for(&mut self, recipient: &KemPublicKey, payload: &[u8]) -> Option<Vec<u8>> {
        let own: KemKeyPair = self.sealing_key()?.clone();
        let mut session = self.session.take()?;
        let r = crypto::seal(payload, self.cfg.id, &own, recipient, &mut session, &mut self.rng);
        self.session = Some(session);
        match r {
            Ok(env) => Some(env.encode()),
            Err(e) => {
                log::warn!("node {} cannot seal: {e}", self.cfg.id);
                self.counters.send_errors += 1;
                None
            }
        }
    }

    /// Opens an envelope from a directory participant (or the controller),
    /// trying both retained key generations on either side.
    fn open_envelope(&mut self, body: &[u8]) -> Result<(NodeId, Vec<u8>), CryptoError> {
        let env = SecureEnvelope::decode(body)?;
        let sender_keys: Vec<KemPublicKey> = if env.sender_id.is_controller() {
            self.controller_kem.into_iter().collect()
        } else {
            let k = self
                .peer_keys
                .get(&env.sender_id)
                .ok_or(CryptoError::UnknownSender(env.sender_id))?;
            std::iter::once(k.current).chain(k.previous).collect()
        };
        let own: Vec<&KemKeyPair> = self.kem.iter().chain(self.kem_prev.iter()).collect();
        let mut last = CryptoError::KeyUnwrap;
        for o in &own {
            for s in &sender_keys {
                match crypto::open(&env, o, s) {
                    Ok(plain) => {
                        self.replay
                            .check_and_record(env.sender_id, env.epoch, &env.nonce)?;
                        return Ok((env.sender_id, plain));
                    }
                    Err(e) => last = e,
                }
            }
        }
        Err(last)
    }

    fn count_crypto_failure(&mut self, e: &CryptoError) {
        match e {
            CryptoError::Replay { .. } => self.counters.replays += 1,
            _ => self.counters.decrypt_failures += 1,
        }
    }

    // ---- model exchange -------------------------------------------------

    fn encode_model(&mut self, to: NodeId, msg: &ModelMessage) -> Option<Frame> {
        let plain = msg.to_bytes();
        let body = if self.cfg.security.encrypts() {
            let key = self.peer_keys.get(&to)?.current;
            self.seal_for(&key, &plain)?
        } else {
            plain
        };
        Some(Frame::new(FrameKind::ModelExchange, msg.round, body))
    }

    fn push_model(&mut self, to: NodeId, round: u32, reply: bool) -> bool {
        let Some(params) = self.current.as_ref().and_then(|c| c.outgoing.clone()) else {
            return false;
        };
        let msg = ModelMessage {
            sender: self.cfg.id,
            round,
            reply,
            params,
        };
        let Some(addr) = self.book.lookup(to) else {
            self.counters.send_errors += 1;
            return false;
        };
        let Some(frame) = self.encode_model(to, &msg) else {
            self.counters.send_errors += 1;
            return false;
        };
        self.send(addr, &frame)
    }

    fn on_model(&mut self, d: &Delivery) {
        if !self.cfg.role.shares_model() || self.schedule.is_none() {
            return;
        }
        let msg = if self.cfg.security.encrypts() {
            let (sender, plain) = match self.open_envelope(&d.frame.body) {
                Ok(x) => x,
                Err(e) => {
                    self.count_crypto_failure(&e);
                    return;
                }
            };
            match ModelMessage::from_bytes(&plain) {
                Ok(m) if m.sender == sender => m,
                Ok(_) => {
                    self.counters.impersonations += 1;
                    return;
                }
                Err(_) => {
                    self.counters.decrypt_failures += 1;
                    return;
                }
            }
        } else {
            match ModelMessage::from_bytes(&d.frame.body) {
                Ok(m) => m,
                Err(_) => return,
            }
        };
        let rounds = self.schedule.map_or(0, |s| s.rounds);
        if !self.participants.contains(&msg.sender) || msg.round >= rounds {
            self.counters.impersonations += 1;
            return;
        }
        if msg.round < self.deadlines_passed {
            self.counters.stale += 1;
            return;
        }
        if !msg.params.same_shape(&self.theta) || msg.params.check_finite().is_err() {
            self.counters.decrypt_failures += 1;
            return;
        }
        let (sender, round) = (msg.sender, msg.round);
        self.inbox.entry(round).or_default().insert(sender, msg.params);
        self.sources.entry(round).or_default().insert(d.src_node);
    }

    /// Answers a peer that received nothing this round with this node's
    /// model, once that model exists.
    fn on_pull(&mut self, peer: NodeId, round: u32) {
        if !self.cfg.role.shares_model() || !self.participants.contains(&peer) || round < self.deadlines_passed {
            return;
        }
        let ready = matches!(&self.current, Some(c) if c.round == round && c.targets.is_some());
        if !ready {
            self.pending_replies.entry(round).or_default().insert(peer);
            return;
        }
        let already = self.current.as_ref().is_some_and(|c| c.replied.contains(&peer));
        if !already && self.push_model(peer, round, true) {
            self.counters.pulls_answered += 1;
            if let Some(c) = self.current.as_mut() {
                c.replied.insert(peer);
                c.sent += 1;
            }
        }
    }

    fn on_pull_check(&mut self, r: u32) {
        if !self.cfg.role.aggregates() {
            return;
        }
        let received = self.inbox.get(&r).is_some_and(|m| !m.is_empty());
        let targets = match &self.current {
            Some(c) if c.round == r => c.targets.clone().unwrap_or_default(),
            _ => return,
        };
        if received || targets.is_empty() {
            return;
        }
        let pull = ControlMessage::Pull {
            node_id: self.cfg.id,
            round: r,
        };
        let frame = json_frame(FrameKind::Control, r, &pull);
        for t in targets {
            if let Some(addr) = self.book.lookup(t) {
                if self.send(addr, &frame) {
                    self.counters.pulls_sent += 1;
                }
            }
        }
    }

    fn on_rendezvous(&mut self, body: &[u8]) {
        let (sender, plain) = match self.open_envelope(body) {
            Ok(x) => x,
            Err(e) => {
                self.count_crypto_failure(&e);
                return;
            }
        };
        let Ok(notice) = RendezvousNotice::from_bytes(&plain) else {
            self.counters.decrypt_failures += 1;
            return;
        };
        if notice.node_id != sender {
            self.counters.impersonations += 1;
            return;
        }
        if self.book.apply_rendezvous(&notice) == RendezvousOutcome::Applied {
            self.log(NodeEventKind::RendezvousApplied { peer: sender });
        }
    }

    // ---- round phases ---------------------------------------------------

    fn timed<T>(&self, modelled: Micros, f: impl FnOnce() -> T) -> (T, Micros, Micros) {
        let start = self.now();
        if self.transport.virtual_time() {
            let out = f();
            (out, start, start + modelled)
        } else {
            let clock = Instant::now();
            let out = f();
            (out, start, start + clock.elapsed().as_micros() as Micros)
        }
    }

    fn on_round_start(&mut self, r: u32) {
        let now = self.now();
        self.maybe_reauthenticate();
        let mut state = RoundState {
            round: r,
            start_us: now,
            targets: None,
            outgoing: None,
            sent: 0,
            replied: BTreeSet::new(),
            active: Vec::new(),
            eval: None,
            starved: false,
            aggregated_from: Vec::new(),
        };
        let mut send_at = now;
        if self.cfg.role.trains() {
            let seed = mix(self.cfg.seed, self.cfg.id.0 as u64, 1_000 + r as u64);
            let cost = self
                .cfg
                .compute
                .train_us(self.cfg.train_data.len(), self.cfg.train.local_epochs);
            let (res, a, b) = self.timed(cost, || {
                train_local(&self.theta, &self.cfg.train_data, &self.cfg.train, seed)
            });
            match res {
                Ok(p) => state.outgoing = Some(p),
                Err(e) => {
                    self.fail(format!("local training failed: {e}"));
                    return;
                }
            }
            state.active.push((a, b));
            send_at = b;
        } else if self.cfg.role.shares_model() {
            state.outgoing = Some(self.theta.clone());
        }
        self.current = Some(state);
        self.schedule_timer(send_at.max(now), Timer::Send(r));
    }

    fn select_targets(&mut self) -> BTreeSet<NodeId> {
        if !self.cfg.role.shares_model() {
            return BTreeSet::new();
        }
        match &self.cfg.mtd {
            Some(m) => {
                let n = m
                    .sample_size
                    .unwrap_or_else(|| default_sample_size(self.participants.len()))
                    .min(self.participants.len());
                match NeighborPool::new(self.participants.iter().copied(), n) {
                    Ok(pool) => mtd_select_neighbors(&pool, &mut self.rng),
                    Err(_) => BTreeSet::new(),
                }
            }
            None => self
                .topology
                .iter()
                .copied()
                .filter(|n| self.participants.contains(n))
                .collect(),
        }
    }

    fn on_send(&mut self, r: u32) {
        let targets = self.select_targets();
        let mut sent = 0;
        for &t in &targets {
            if self.push_model(t, r, false) {
                sent += 1;
            }
        }
        if let Some(c) = self.current.as_mut() {
            c.targets = Some(targets.clone());
            c.sent += sent;
        }
        for peer in self.pending_replies.remove(&r).unwrap_or_default() {
            self.on_pull(peer, r);
        }
        let now = self.now();
        if self.cfg.pull_after_us < self.cfg.receive_timeout_us {
            self.schedule_timer(now + self.cfg.pull_after_us, Timer::PullCheck(r));
        }
        self.schedule_timer(now + self.cfg.receive_timeout_us, Timer::Deadline(r));
    }

    fn on_deadline(&mut self, r: u32) {
        self.deadlines_passed = r + 1;
        let received = self.inbox.remove(&r).unwrap_or_default();
        let Some(mut state) = self.current.take() else {
            return;
        };
        let targets = state.targets.clone().unwrap_or_default();
        state.aggregated_from = received.keys().copied().collect();
        if self.cfg.role.aggregates() {
            state.starved = !targets.is_empty() && received.is_empty();
            let own = state.outgoing.clone().unwrap_or_else(|| self.theta.clone());
            let models: Vec<ModelParams> = received.into_values().collect();
            match aggregate_fedavg(&own, &models) {
                Ok(p) => self.theta = p,
                Err(e) => {
                    self.fail(format!("aggregation failed: {e}"));
                    return;
                }
            }
        } else if let Some(p) = state.outgoing.clone() {
            if self.cfg.role.trains() {
                self.theta = p;
            }
        }
        if state.starved {
            self.log(NodeEventKind::Starved { round: r });
        }
        let mut finish_at = self.now();
        if self.cfg.role.shares_model() && !self.cfg.test_data.is_empty() {
            let cost = self.cfg.compute.eval_us(self.cfg.test_data.len());
            let (res, a, b) = self.timed(cost, || evaluate(&self.theta, &self.cfg.test_data));
            match res {
                Ok(ev) => state.eval = Some(ev),
                Err(e) => {
                    self.fail(format!("evaluation failed: {e}"));
                    return;
                }
            }
            state.active.push((a, b));
            finish_at = b;
        }
        self.current = Some(state);
        self.schedule_timer(finish_at, Timer::Finish(r));
    }

    fn rotate_address(&mut self) -> Option<PeerAddress> {
        let m = self.cfg.mtd.clone()?;
        let old = self.book.self_binding();
        let switch_at = self.now_ms();
        let transport = &self.transport;
        let rotation = rotate_and_bind(&self.book, self.cfg.id, &m.pool, switch_at, &mut self.rng, |a| {
            transport.bind(a)
        });
        match rotation {
            Ok(Rotation::Moved { address, notice }) => {
                let payload = notice.to_bytes();
                let mut recipients: Vec<(PeerAddress, KemPublicKey)> = Vec::new();
                for p in self.participants.clone() {
                    if let (Some(addr), Some(k)) = (self.book.lookup(p), self.peer_keys.get(&p)) {
                        recipients.push((addr, k.current));
                    }
                }
                if let Some(ck) = self.controller_kem {
                    recipients.push((self.cfg.controller_addr, ck));
                }
                for (addr, key) in recipients {
                    if let Some(body) = self.seal_for(&key, &payload) {
                        let frame = Frame::new(FrameKind::RendezvousNotice, notice.effective_epoch, body);
                        self.send(addr, &frame);
                    }
                }
                self.book.set_self_binding(address, notice.effective_epoch);
                self.schedule_timer(self.now() + m.grace_us, Timer::Release(old.address));
                self.log(NodeEventKind::AddressRotated { address });
                Some(address)
            }
            Ok(Rotation::Skipped) => None,
            Err(e) => {
                log::warn!("node {} could not rotate: {e}", self.cfg.id);
                None
            }
        }
    }

    fn renew_keys(&mut self) -> bool {
        let (Some(kem), Some(session)) = (self.kem.take(), self.session.take()) else {
            return false;
        };
        let now_ms = self.now_ms();
        let next = KemKeyPair::generate(&mut self.rng, now_ms, kem.epoch + 1);
        let renewed = match renew_session(&session, &mut self.rng) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("node {} could not renew its session: {e}", self.cfg.id);
                self.kem = Some(kem);
                self.session = Some(session);
                return false;
            }
        };
        let update = ControlMessage::KeyUpdate {
            node_id: self.cfg.id,
            key_epoch: next.epoch,
            public_key: next.public_key(),
        };
        // keep sealing with the published generation until the directory catches up
        if kem.epoch <= self.published_epoch {
            self.kem_prev = Some(kem);
        }
        let epoch = next.epoch;
        self.kem = Some(next);
        self.session = Some(renewed);
        let frame = json_frame(FrameKind::Control, self.cfg.id.0, &update);
        let to = self.cfg.controller_addr;
        self.send(to, &frame);
        self.log(NodeEventKind::KeysRenewed { epoch });
        true
    }

    fn on_finish(&mut self, r: u32) {
        let Some(state) = self.current.take() else {
            return;
        };
        let rotated_to = match &self.cfg.mtd {
            Some(m) if (r + 1).is_multiple_of(m.rotation_interval) => self.rotate_address(),
            _ => None,
        };
        let renewed = self.cfg.security.encrypts() && self.cfg.renewal.due_after(r) && self.renew_keys();
        let sample = self.sampler.as_mut().and_then(ResourceSampler::sample);
        let end = self.now();
        let totals = self.transport.stats().node_totals(self.cfg.id);
        let traffic = totals.since(&self.traffic_mark);
        self.traffic_mark = totals;
        let counters = std::mem::take(&mut self.counters);
        let record = RoundRecord {
            round: r,
            neighbors_used: state.targets.clone().unwrap_or_default().into_iter().collect(),
            params_sent: state.sent,
            params_received: state.aggregated_from.len(),
            received_from: state.aggregated_from.clone(),
            accepted_sources: self.sources.remove(&r).unwrap_or_default().into_iter().collect(),
            eval: state.eval.clone(),
            start_us: state.start_us,
            end_us: end,
            active_intervals: state.active.clone(),
            starved: state.starved,
            counters,
            traffic,
            cpu_pct: sample.map(|s| s.cpu_pct),
            ram_pct: sample.map(|s| s.ram_pct),
            renewed,
            rotated_to,
        };
        if let Some(ev) = &record.eval {
            let report = MetricsReport {
                node_id: self.cfg.id,
                round: r,
                f1: ev.f1_macro,
                loss: ev.loss,
                bytes_sent: traffic.bytes_sent,
                bytes_recv: traffic.bytes_received,
                active_ms: record.active_us() as f64 / 1000.0,
                wall_ms: Some(record.wall_us() as f64 / 1000.0),
                ctrl_bytes: Some(traffic.control_bytes),
                frames_sent: Some(traffic.frames_sent),
                frames_lost: Some(traffic.frames_lost),
                latency_ms: Some(traffic.mean_latency_ms()),
                cpu_pct: record.cpu_pct,
                ram_pct: record.ram_pct,
                starved: record.starved,
            };
            let frame = json_frame(FrameKind::MetricsReport, r, &report);
            let to = self.cfg.controller_addr;
            self.send(to, &frame);
        }
        self.records.push(record);
        self.inbox.retain(|&k, _| k > r);
        self.sources.retain(|&k, _| k > r);
        self.pending_replies.retain(|&k, _| k > r);
        let schedule = self.schedule.expect("running nodes hold a schedule");
        if r + 1 >= schedule.rounds {
            self.phase = Phase::Done;
        } else {
            let at = schedule.round_start(r + 1).max(self.now());
            self.schedule_timer(at, Timer::RoundStart(r + 1));
        }
    }

    fn on_release(&mut self, addr: PeerAddress) {
        if self.book.self_binding().address != addr && self.transport.release(addr).is_ok() {
            self.log(NodeEventKind::AddressReleased { address: addr });
        }
    }
}

impl Actor for Node {
    fn id(&self) -> NodeId {
        self.cfg.id
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
            Timer::Auth => self.on_auth_timer(),
            Timer::RoundStart(r) => self.on_round_start(r),
            Timer::Send(r) => self.on_send(r),
            Timer::PullCheck(r) => self.on_pull_check(r),
            Timer::Deadline(r) => self.on_deadline(r),
            Timer::Finish(r) => self.on_finish(r),
            Timer::Release(a) => self.on_release(a),
        }
    }

    fn on_frame(&mut self, d: Delivery) {
        if matches!(self.phase, Phase::Failed(_)) {
            return;
        }
        match d.frame.kind {
            FrameKind::AuthResponse => self.on_auth_response(&d.frame.body),
            FrameKind::Control => self.on_control(&d.frame.body),
            FrameKind::ModelExchange => self.on_model(&d),
            FrameKind::RendezvousNotice => self.on_rendezvous(&d.frame.body),
            FrameKind::AuthRequest | FrameKind::MetricsReport => {}
        }
    }

    fn finished(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Failed(_))
    }
}

/// Seed for a node's local streams, exposed so tests can reproduce them.
pub fn node_stream_seed(seed: u64, node: NodeId, stream: u64) -> u64 {
    mix(seed, node.0 as u64, stream)
}

