//! Hybrid envelope: payload under AES-256-GCM with a per-epoch session key,
//! session key wrapped for the recipient with an authenticated X25519 KEM.
//!
//! Wire layout (big-endian):
//!
//! ```text
//! magic 0xDF5E (2) | version u8 | sender_id u32 | epoch u32
//! | nonce_len u8 | nonce | wrapped_len u16 | wrapped_key | ct_len u32 | ciphertext
//! ```
//!
//! The wrapped key is `ephemeral_pub (32) | AES-256-GCM(kek, session_key)`,
//! where the KEK is derived from both `DH(ephemeral, recipient)` and
//! `DH(sender_static, recipient)`; only the claimed sender can produce it.
//! Every header byte is bound into the payload AEAD as associated data.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use super::keys::{KemKeyPair, KemPublicKey};
use super::session::{SessionKey, NONCE_LEN, SESSION_KEY_LEN};
use super::CryptoError;
use crate::ids::NodeId;

pub const ENVELOPE_MAGIC: u16 = 0xDF5E;
pub const ENVELOPE_VERSION: u8 = 1;
const TAG_LEN: usize = 16;
pub const WRAPPED_KEY_LEN: usize = 32 + SESSION_KEY_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureEnvelope {
    pub sender_id: NodeId,
    pub epoch: u32,
    pub nonce: Vec<u8>,
    pub wrapped_key: Vec<u8>,
    pub ciphertext: Vec<u8>,
}

impl SecureEnvelope {
    fn header(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(16 + self.nonce.len() + self.wrapped_key.len());
        h.extend_from_slice(&ENVELOPE_MAGIC.to_be_bytes());
        h.push(ENVELOPE_VERSION);
        h.extend_from_slice(&self.sender_id.0.to_be_bytes());
        h.extend_from_slice(&self.epoch.to_be_bytes());
        h.push(self.nonce.len() as u8);
        h.extend_from_slice(&self.nonce);
        h.extend_from_slice(&(self.wrapped_key.len() as u16).to_be_bytes());
        h.extend_from_slice(&self.wrapped_key);
        h
    }

    pub fn encoded_len(&self) -> usize {
        2 + 1 + 4 + 4 + 1 + self.nonce.len() + 2 + self.wrapped_key.len() + 4 + self.ciphertext.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header();
        out.reserve(4 + self.ciphertext.len());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.u16()? != ENVELOPE_MAGIC {
            return Err(CryptoError::Malformed("bad envelope magic".into()));
        }
        if r.u8()? != ENVELOPE_VERSION {
            return Err(CryptoError::Malformed("unsupported envelope version".into()));
        }
        let sender_id = NodeId(r.u32()?);
        let epoch = r.u32()?;
        let nonce_len = r.u8()? as usize;
        let nonce = r.take(nonce_len)?.to_vec();
        let wk_len = r.u16()? as usize;
        let wrapped_key = r.take(wk_len)?.to_vec();
        let ct_len = r.u32()? as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(CryptoError::Malformed("trailing bytes after envelope".into()));
        }
        if nonce.len() != NONCE_LEN {
            return Err(CryptoError::Malformed("nonce must be 12 bytes".into()));
        }
        Ok(SecureEnvelope {
            sender_id,
            epoch,
            nonce,
            wrapped_key,
            ciphertext,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CryptoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CryptoError::Malformed("truncated envelope".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CryptoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CryptoError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, CryptoError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn derive_kek(
    dh_ephemeral: &[u8; 32],
    dh_static: &[u8; 32],
    ephemeral_pub: &[u8; 32],
    recipient: &KemPublicKey,
    sender: &KemPublicKey,
) -> [u8; 32] {
    let mut ikm = [0u8; 64];
    ikm[..32].copy_from_slice(dh_ephemeral);
    ikm[32..].copy_from_slice(dh_static);
    let mut info = Vec::with_capacity(96);
    info.extend_from_slice(ephemeral_pub);
    info.extend_from_slice(recipient.as_bytes());
    info.extend_from_slice(sender.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(b"dflshield/kem/v1"), &ikm);
    let mut kek = [0u8; 32];
    hk.expand(&info, &mut kek).expect("32 bytes is a valid HKDF length");
    kek
}

const WRAP_AAD: &[u8] = b"dflshield/wrap/v1";

/// `K_sym_enc ← E_asym(K_sym, K_j_pub)`, authenticated by the sender's static key.
pub fn wrap_session_key<R: RngCore + ?Sized>(
    session: &SessionKey,
    sender: &KemKeyPair,
    recipient: &KemPublicKey,
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    let mut eph_bytes = [0u8; 32];
    rng.try_fill_bytes(&mut eph_bytes)
        .map_err(|e| CryptoError::Entropy(e.to_string()))?;
    let eph = StaticSecret::from(eph_bytes);
    let eph_pub = PublicKey::from(&eph).to_bytes();
    let dh1 = eph.diffie_hellman(&recipient.to_dalek());
    let dh2 = sender.secret().diffie_hellman(&recipient.to_dalek());
    if !dh1.was_contributory() || !dh2.was_contributory() {
        return Err(CryptoError::KeyUnwrap);
    }
    let kek = derive_kek(
        dh1.as_bytes(),
        dh2.as_bytes(),
        &eph_pub,
        recipient,
        &sender.public_key(),
    );
    let cipher = Aes256Gcm::new_from_slice(&kek).expect("32-byte key");
    // The KEK is unique per ephemeral key, so a fixed nonce is safe here.
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(&[0u8; NONCE_LEN]),
            Payload {
                msg: session.key_bytes(),
                aad: WRAP_AAD,
            },
        )
        .map_err(|_| CryptoError::KeyUnwrap)?;
    let mut out = Vec::with_capacity(WRAPPED_KEY_LEN);
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&sealed);
    Ok(out)
}

/// `K_j_sym ← D_asym(K_j_sym_enc, K_priv)`.
pub fn unwrap_session_key(
    wrapped: &[u8],
    own: &KemKeyPair,
    sender: &KemPublicKey,
) -> Result<[u8; SESSION_KEY_LEN], CryptoError> {
    if wrapped.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::KeyUnwrap);
    }
    let eph_pub: [u8; 32] = wrapped[..32].try_into().expect("32 bytes");
    let dh1 = own.secret().diffie_hellman(&PublicKey::from(eph_pub));
    let dh2 = own.secret().diffie_hellman(&sender.to_dalek());
    if !dh1.was_contributory() || !dh2.was_contributory() {
        return Err(CryptoError::KeyUnwrap);
    }
    let kek = derive_kek(
        dh1.as_bytes(),
        dh2.as_bytes(),
        &eph_pub,
        &own.public_key(),
        sender,
    );
    let cipher = Aes256Gcm::new_from_slice(&kek).expect("32-byte key");
    let key = cipher
        .decrypt(
            Nonce::from_slice(&[0u8; NONCE_LEN]),
            Payload {
                msg: &wrapped[32..],
                aad: WRAP_AAD,
            },
        )
        .map_err(|_| CryptoError::KeyUnwrap)?;
    key.try_into().map_err(|_| CryptoError::KeyUnwrap)
}

/// Encrypts `payload` for `recipient` under the sender's current session key.
///
/// Fails with [`CryptoError::NonceExhausted`] once the session key has sealed
/// its budget of messages; the caller renews the session and retries.
pub fn seal<R: RngCore + ?Sized>(
    payload: &[u8],
    sender_id: NodeId,
    sender: &KemKeyPair,
    recipient: &KemPublicKey,
    session: &mut SessionKey,
    rng: &mut R,
) -> Result<SecureEnvelope, CryptoError> {
    if payload.is_empty() {
        return Err(CryptoError::EmptyPayload);
    }
    let nonce = session.next_nonce()?;
    let wrapped_key = wrap_session_key(session, sender, recipient, rng)?;
    let mut env = SecureEnvelope {
        sender_id,
        epoch: session.epoch(),
        nonce: nonce.to_vec(),
        wrapped_key,
        ciphertext: Vec::new(),
    };
    let aad = env.header();
    let cipher = Aes256Gcm::new_from_slice(session.key_bytes()).expect("32-byte key");
    env.ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: payload,
                aad: &aad,
            },
        )
        .map_err(|_| CryptoError::Integrity)?;
    Ok(env)
}

/// Recovers the payload, verifying the wrapped key and the payload tag.
///
/// Replay detection is stateful and lives in [`super::ReplayCache`].
pub fn open(
    env: &SecureEnvelope,
    own: &KemKeyPair,
    sender_public: &KemPublicKey,
) -> Result<Vec<u8>, CryptoError> {
    if env.nonce.len() != NONCE_LEN {
        return Err(CryptoError::Malformed("nonce must be 12 bytes".into()));
    }
    let key = unwrap_session_key(&env.wrapped_key, own, sender_public)?;
    let cipher = Aes256Gcm::new_from_slice(&key).expect("32-byte key");
    cipher
        .decrypt(
            Nonce::from_slice(&env.nonce),
            Payload {
                msg: &env.ciphertext,
                aad: &env.header(),
            },
        )
        .map_err(|_| CryptoError::Integrity)
}
