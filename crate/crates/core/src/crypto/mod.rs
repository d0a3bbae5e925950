//! Hybrid message protection, key renewal, certificates and auth tokens.

mod envelope;
mod keys;
mod replay;
mod session;
mod token;

pub use envelope::{
    open, seal, unwrap_session_key, wrap_session_key, SecureEnvelope, ENVELOPE_MAGIC,
    ENVELOPE_VERSION, WRAPPED_KEY_LEN,
};
pub(crate) use keys::b64;
pub use keys::{KemKeyPair, KemPublicKey, KeyCertificate, SigningKeyPair, VerifyingKey};
pub use replay::ReplayCache;
pub use session::{renew_session, RenewalPolicy, SessionKey, NONCE_LEN, SESSION_KEY_LEN};
pub use token::{issue_token, verify_token, AuthToken, TokenClaims, TokenRejection};

use thiserror::Error;

use crate::ids::NodeId;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("session key could not be unwrapped")]
    KeyUnwrap,
    #[error("payload failed authentication")]
    Integrity,
    #[error("replayed envelope from {sender} in epoch {epoch}")]
    Replay { sender: NodeId, epoch: u32 },
    #[error("nonce space exhausted for session epoch {epoch}")]
    NonceExhausted { epoch: u32 },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("empty payload")]
    EmptyPayload,
    #[error("signature verification failed")]
    BadSignature,
    #[error("no public key known for {0}")]
    UnknownSender(NodeId),
    #[error("token rejected: {0}")]
    Token(TokenRejection),
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error("invalid crypto configuration: {0}")]
    Config(String),
}
