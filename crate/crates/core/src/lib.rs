//! Decentralized federated learning testbed with hybrid encryption, moving
//! target defense, a simulated or TCP network fabric and adversary models.
//!
//! The commonly used types are re-exported at the crate root.

pub mod adversary;
pub mod controller;
pub mod crypto;
pub mod driver;
pub mod fabric;
pub mod ids;
pub mod model;
pub mod mtd;
pub mod node;
pub mod protocol;
pub mod resources;
pub mod scenario;

pub use adversary::{AttackKind, AttackOutcome, AttackPlan, Threat};
pub use controller::{Controller, ControllerConfig, RunLedger, Topology};
pub use crypto::{AuthToken, CryptoError, KemKeyPair, KemPublicKey, SecureEnvelope, SessionKey};
pub use fabric::{Backend, Frame, FrameKind, PeerAddress, SimFabric, StatsSnapshot, TcpFabric};
pub use ids::{NodeId, Role, SecuritySetting};
pub use model::{Dataset, ModelArchitecture, ModelParams, TrainConfig};
pub use node::{Node, NodeConfig};
pub use scenario::{RunOutput, RunStatus, RunSummary, ScenarioConfig, ScenarioError};
