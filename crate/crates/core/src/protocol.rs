//! Frame bodies exchanged between nodes, the controller and attackers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{AuthToken, KemPublicKey, KeyCertificate, SigningKeyPair, VerifyingKey};
use crate::fabric::{Frame, FrameKind, PeerAddress};
use crate::ids::{Millis, NodeId, Role};
use crate::model::{ModelError, ModelParams};

const FLAG_REPLY: u8 = 0x01;

/// Model payload: `sender u32 | round u32 | flags u8 | parameter blob`.
///
/// Sent as the frame body in plaintext mode, or sealed inside an envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMessage {
    pub sender: NodeId,
    pub round: u32,
    /// Answer to a pull from a peer that received nothing.
    pub reply: bool,
    pub params: ModelParams,
}

impl ModelMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = self.params.to_bytes();
        let mut out = Vec::with_capacity(9 + blob.len());
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.push(if self.reply { FLAG_REPLY } else { 0 });
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ModelError> {
        if b.len() < 9 {
            return Err(ModelError::Format("truncated model message".into()));
        }
        Ok(ModelMessage {
            sender: NodeId(u32::from_be_bytes(b[..4].try_into().expect("4"))),
            round: u32::from_be_bytes(b[4..8].try_into().expect("4")),
            reply: b[8] & FLAG_REPLY != 0,
            params: ModelParams::from_bytes(&b[9..])?,
        })
    }
}

/// Credential a node presents to the controller. Derived from the scenario
/// seed so separate node processes agree with the controller.
pub fn credential_for(seed: u64, node: NodeId) -> String {
    let mut h = Sha256::new();
    h.update(b"dflshield/credential/v1");
    h.update(seed.to_be_bytes());
    h.update(node.0.to_be_bytes());
    base64::Engine::encode(&base64::engine::general_purpose::URL_SAFE_NO_PAD, h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthRequest {
    pub node_id: NodeId,
    pub credential: String,
    pub role: Role,
    pub address: PeerAddress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_key: Option<KemPublicKey>,
    #[serde(default)]
    pub key_epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthResponse {
    pub node_id: NodeId,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<AuthToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub controller_key: String,
    pub controller_kem: KemPublicKey,
}

impl AuthResponse {
    pub fn controller_verifying_key(&self) -> Option<VerifyingKey> {
        VerifyingKey::from_base64(&self.controller_key).ok()
    }
}

/// `{node_id, round, f1, loss, bytes_sent, bytes_recv, active_ms}` plus
/// optional transport detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub node_id: NodeId,
    pub round: u32,
    pub f1: f64,
    pub loss: f64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub active_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrl_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_sent: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_lost: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ram_pct: Option<f64>,
    #[serde(default)]
    pub starved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub node_id: NodeId,
    pub role: Role,
    pub address: PeerAddress,
    pub address_epoch: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert: Option<KeyCertificate>,
    #[serde(default)]
    pub neighbors: Vec<NodeId>,
}

/// Round timetable shared by every participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub start_at_us: u64,
    pub round_period_us: u64,
    pub rounds: u32,
}

impl Schedule {
    pub fn round_start(&self, r: u32) -> u64 {
        self.start_at_us + r as u64 * self.round_period_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directory {
    pub epoch: u32,
    pub issued_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    pub entries: Vec<DirectoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedDirectory {
    pub directory: Directory,
    #[serde(with = "crate::crypto::b64")]
    pub signature: Vec<u8>,
}

impl SignedDirectory {
    fn signing_input(d: &Directory) -> Vec<u8> {
        let mut m = b"dflshield/directory/v1".to_vec();
        m.extend_from_slice(&serde_json::to_vec(d).expect("directory serializes"));
        m
    }

    pub fn sign(directory: Directory, signer: &SigningKeyPair) -> Self {
        let signature = signer.sign(&Self::signing_input(&directory));
        SignedDirectory {
            directory,
            signature,
        }
    }

    pub fn verify(&self, controller: &VerifyingKey) -> bool {
        controller
            .verify(&Self::signing_input(&self.directory), &self.signature)
            .is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    KeyUpdate {
        node_id: NodeId,
        key_epoch: u32,
        public_key: KemPublicKey,
    },
    KeyDirectory(SignedDirectory),
    /// Sent by a node that received no model for `round` to its targets.
    Pull {
        node_id: NodeId,
        round: u32,
    },
    Abort {
        reason: String,
    },
}

pub fn json_frame<T: Serialize>(kind: FrameKind, correlation_id: u32, body: &T) -> Frame {
    Frame::new(
        kind,
        correlation_id,
        serde_json::to_vec(body).expect("protocol message serializes"),
    )
}
