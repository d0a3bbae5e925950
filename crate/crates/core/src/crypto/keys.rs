use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::Signer;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use x25519_dalek::{PublicKey, StaticSecret};

use super::CryptoError;
use crate::ids::{Millis, NodeId};

/// X25519 public key used to wrap session keys for its owner.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KemPublicKey(pub [u8; 32]);

impl KemPublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub(crate) fn to_dalek(self) -> PublicKey {
        PublicKey::from(self.0)
    }
}

impl fmt::Debug for KemPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KemPublicKey({})", &URL_SAFE_NO_PAD.encode(self.0)[..8])
    }
}

impl Serialize for KemPublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(self.0))
    }
}

impl<'de> Deserialize<'de> for KemPublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = URL_SAFE_NO_PAD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("public key must be 32 bytes"))?;
        Ok(KemPublicKey(arr))
    }
}

/// Key-encapsulation key pair (`K_pub`, `K_priv`).
///
/// The private half has no serializer; it never leaves the owning node.
#[derive(Clone)]
pub struct KemKeyPair {
    secret: StaticSecret,
    public: KemPublicKey,
    pub created_at: Millis,
    pub epoch: u32,
}

impl KemKeyPair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R, created_at: Millis, epoch: u32) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        let secret = StaticSecret::from(bytes);
        let public = KemPublicKey(PublicKey::from(&secret).to_bytes());
        KemKeyPair {
            secret,
            public,
            created_at,
            epoch,
        }
    }

    pub fn public_key(&self) -> KemPublicKey {
        self.public
    }

    pub(crate) fn secret(&self) -> &StaticSecret {
        &self.secret
    }
}

impl fmt::Debug for KemKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KemKeyPair")
            .field("public", &self.public)
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

/// Ed25519 verifying key of the controller.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyingKey(pub [u8; 32]);

impl VerifyingKey {
    pub fn verify(&self, message: &[u8], signature: &[u8]) -> Result<(), CryptoError> {
        let key = ed25519_dalek::VerifyingKey::from_bytes(&self.0)
            .map_err(|_| CryptoError::BadSignature)?;
        let sig = ed25519_dalek::Signature::from_slice(signature)
            .map_err(|_| CryptoError::BadSignature)?;
        // strict: rejects small-order keys and non-canonical signatures
        key.verify_strict(message, &sig)
            .map_err(|_| CryptoError::BadSignature)
    }

    pub fn to_base64(&self) -> String {
        URL_SAFE_NO_PAD.encode(self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
        let bytes = URL_SAFE_NO_PAD
            .decode(s.as_bytes())
            .map_err(|_| CryptoError::Malformed("verifying key encoding".into()))?;
        Ok(VerifyingKey(bytes.try_into().map_err(|_| {
            CryptoError::Malformed("verifying key must be 32 bytes".into())
        })?))
    }
}

impl fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyingKey({})", &self.to_base64()[..8])
    }
}

/// Controller signing key pair (tokens, key certificates, directories).
pub struct SigningKeyPair {
    signing: ed25519_dalek::SigningKey,
    pub created_at: Millis,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R, created_at: Millis) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        SigningKeyPair {
            signing: ed25519_dalek::SigningKey::from_bytes(&seed),
            created_at,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing.sign(message).to_bytes().to_vec()
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("verifying", &self.verifying_key())
            .finish_non_exhaustive()
    }
}

/// Controller-signed binding of a node to its current public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCertificate {
    pub node_id: NodeId,
    pub public_key: KemPublicKey,
    pub key_epoch: u32,
    pub issued_at: Millis,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

impl KeyCertificate {
    fn signing_input(node_id: NodeId, key: &KemPublicKey, epoch: u32, issued_at: Millis) -> Vec<u8> {
        let mut m = Vec::with_capacity(52);
        m.extend_from_slice(b"dflshield/cert/v1");
        m.extend_from_slice(&node_id.0.to_be_bytes());
        m.extend_from_slice(key.as_bytes());
        m.extend_from_slice(&epoch.to_be_bytes());
        m.extend_from_slice(&issued_at.to_be_bytes());
        m
    }

    pub fn issue(
        signer: &SigningKeyPair,
        node_id: NodeId,
        public_key: KemPublicKey,
        key_epoch: u32,
        issued_at: Millis,
    ) -> Self {
        let signature =
            signer.sign(&Self::signing_input(node_id, &public_key, key_epoch, issued_at));
        KeyCertificate {
            node_id,
            public_key,
            key_epoch,
            issued_at,
            signature,
        }
    }

    pub fn verify(&self, controller: &VerifyingKey) -> Result<(), CryptoError> {
        controller.verify(
            &Self::signing_input(self.node_id, &self.public_key, self.key_epoch, self.issued_at),
            &self.signature,
        )
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::URL_SAFE_NO_PAD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        URL_SAFE_NO_PAD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}
