//! Identifiers and enumerations shared by every subsystem.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Participant identifier. Participants are numbered `0..nodes`; the
/// controller and attacker endpoints use reserved ranges.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const CONTROLLER: NodeId = NodeId(u32::MAX);
    /// First id handed to attacker endpoints.
    pub const ATTACKER_BASE: u32 = 1_000_000;

    pub fn attacker(index: u32) -> NodeId {
        NodeId(Self::ATTACKER_BASE + index)
    }

    pub fn is_controller(self) -> bool {
        self == Self::CONTROLLER
    }

    pub fn is_attacker(self) -> bool {
        !self.is_controller() && self.0 >= Self::ATTACKER_BASE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_controller() {
            f.write_str("controller")
        } else if self.is_attacker() {
            write!(f, "attacker-{}", self.0 - Self::ATTACKER_BASE)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Participant role, `R: V -> {idle, trainer, aggregator, proxy}`.
///
/// * `Aggregator` runs the whole cycle: train, exchange, aggregate.
/// * `Trainer` trains and shares its model but keeps its own parameters.
/// * `Proxy` relays the mean of what it receives without training.
/// * `Idle` only authenticates and follows rendezvous traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Idle,
    Trainer,
    #[default]
    Aggregator,
    Proxy,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Idle => "idle",
            Role::Trainer => "trainer",
            Role::Aggregator => "aggregator",
            Role::Proxy => "proxy",
        }
    }

    pub fn trains(self) -> bool {
        matches!(self, Role::Trainer | Role::Aggregator)
    }

    pub fn shares_model(self) -> bool {
        !matches!(self, Role::Idle)
    }

    pub fn aggregates(self) -> bool {
        matches!(self, Role::Aggregator | Role::Proxy)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Ok(Role::Idle),
            "trainer" => Ok(Role::Trainer),
            "aggregator" => Ok(Role::Aggregator),
            "proxy" => Ok(Role::Proxy),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// The three security configurations under comparison.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub enum SecuritySetting {
    #[default]
    #[serde(alias = "baseline")]
    Baseline,
    #[serde(alias = "encryption")]
    Encryption,
    #[serde(alias = "encryption-mtd", alias = "encryption_mtd")]
    EncryptionMtd,
}

impl SecuritySetting {
    pub const ALL: [SecuritySetting; 3] = [
        SecuritySetting::Baseline,
        SecuritySetting::Encryption,
        SecuritySetting::EncryptionMtd,
    ];

    pub fn encrypts(self) -> bool {
        !matches!(self, SecuritySetting::Baseline)
    }

    pub fn uses_mtd(self) -> bool {
        matches!(self, SecuritySetting::EncryptionMtd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SecuritySetting::Baseline => "Baseline",
            SecuritySetting::Encryption => "Encryption",
            SecuritySetting::EncryptionMtd => "EncryptionMtd",
        }
    }

    /// Position in the canonical Baseline, Encryption, EncryptionMtd order.
    pub fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SecuritySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SecuritySetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "baseline" => Ok(SecuritySetting::Baseline),
            "encryption" => Ok(SecuritySetting::Encryption),
            "encryptionmtd" => Ok(SecuritySetting::EncryptionMtd),
            other => Err(format!("unknown security setting `{other}`")),
        }
    }
}

/// Milliseconds on the fabric clock. Simulated fabrics start at zero; the TCP
/// backend counts from the UNIX epoch.
pub type Millis = u64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_disjoint() {
        assert!(NodeId::CONTROLLER.is_controller());
        assert!(!NodeId::CONTROLLER.is_attacker());
        assert!(NodeId::attacker(0).is_attacker());
        assert!(!NodeId(7).is_attacker());
        assert_eq!(NodeId::attacker(2).to_string(), "attacker-2");
    }

    #[test]
    fn security_setting_parses_loose_spellings() {
        assert_eq!(
            "encryption-mtd".parse::<SecuritySetting>().unwrap(),
            SecuritySetting::EncryptionMtd
        );
        assert_eq!(
            "EncryptionMtd".parse::<SecuritySetting>().unwrap(),
            SecuritySetting::EncryptionMtd
        );
        assert!("tls".parse::<SecuritySetting>().is_err());
    }

    #[test]
    fn role_capabilities() {
        assert!(Role::Aggregator.trains() && Role::Aggregator.aggregates());
        assert!(!Role::Proxy.trains() && Role::Proxy.aggregates());
        assert!(!Role::Idle.shares_model());
    }
}
