use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::CryptoError;

pub const SESSION_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;

/// Symmetric key `K_sym` for one sender epoch.
///
/// Nonces are a per-key random salt followed by a message counter, so they
/// never repeat under one key; the counter is capped by `max_messages`.
#[derive(Clone)]
pub struct SessionKey {
    key: [u8; SESSION_KEY_LEN],
    salt: [u8; 4],
    epoch: u32,
    sent: u64,
    max_messages: u64,
}

impl SessionKey {
    pub const DEFAULT_MAX_MESSAGES: u64 = 1 << 32;

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R, epoch: u32) -> Result<Self, CryptoError> {
        Self::generate_with_limit(rng, epoch, Self::DEFAULT_MAX_MESSAGES)
    }

    pub fn generate_with_limit<R: RngCore + ?Sized>(
        rng: &mut R,
        epoch: u32,
        max_messages: u64,
    ) -> Result<Self, CryptoError> {
        let mut key = [0u8; SESSION_KEY_LEN];
        let mut salt = [0u8; 4];
        rng.try_fill_bytes(&mut key)
            .and_then(|_| rng.try_fill_bytes(&mut salt))
            .map_err(|e| CryptoError::Entropy(e.to_string()))?;
        Ok(SessionKey {
            key,
            salt,
            epoch,
            sent: 0,
            max_messages,
        })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn messages_sent(&self) -> u64 {
        self.sent
    }

    pub fn key_bytes(&self) -> &[u8; SESSION_KEY_LEN] {
        &self.key
    }

    /// Reserves the next nonce, or fails once the key's budget is spent.
    pub(crate) fn next_nonce(&mut self) -> Result<[u8; NONCE_LEN], CryptoError> {
        if self.sent >= self.max_messages {
            return Err(CryptoError::NonceExhausted { epoch: self.epoch });
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.salt);
        nonce[4..].copy_from_slice(&self.sent.to_be_bytes());
        self.sent += 1;
        Ok(nonce)
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("epoch", &self.epoch)
            .field("sent", &self.sent)
            .finish_non_exhaustive()
    }
}

/// Fresh key bytes with the epoch advanced by one.
pub fn renew_session<R: RngCore + ?Sized>(
    current: &SessionKey,
    rng: &mut R,
) -> Result<SessionKey, CryptoError> {
    SessionKey::generate_with_limit(rng, current.epoch + 1, current.max_messages)
}

/// Renew every `interval_rounds` completed rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenewalPolicy {
    pub interval_rounds: u32,
}

impl Default for RenewalPolicy {
    fn default() -> Self {
        RenewalPolicy { interval_rounds: 1 }
    }
}

impl RenewalPolicy {
    pub fn new(interval_rounds: u32) -> Result<Self, CryptoError> {
        if interval_rounds == 0 {
            return Err(CryptoError::Config(
                "key renewal interval must be at least 1 round".into(),
            ));
        }
        Ok(RenewalPolicy { interval_rounds })
    }

    /// True when renewal follows the round with zero-based index `round`.
    pub fn due_after(&self, round: u32) -> bool {
        (round + 1).is_multiple_of(self.interval_rounds.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn renewal_bumps_epoch_and_changes_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let k0 = SessionKey::generate(&mut rng, 0).unwrap();
        let k1 = renew_session(&k0, &mut rng).unwrap();
        let k2 = renew_session(&k1, &mut rng).unwrap();
        assert_eq!(k1.epoch(), 1);
        assert_eq!(k2.epoch(), 2);
        assert_ne!(k1.key_bytes(), k2.key_bytes());
        assert_ne!(k0.key_bytes(), k1.key_bytes());
    }

    #[test]
    fn nonces_are_unique_until_exhausted() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut k = SessionKey::generate_with_limit(&mut rng, 0, 3).unwrap();
        let a = k.next_nonce().unwrap();
        let b = k.next_nonce().unwrap();
        let c = k.next_nonce().unwrap();
        assert!(a != b && b != c && a != c);
        assert!(matches!(
            k.next_nonce(),
            Err(CryptoError::NonceExhausted { epoch: 0 })
        ));
    }

    #[test]
    fn policy_zero_is_rejected() {
        assert!(RenewalPolicy::new(0).is_err());
        let p = RenewalPolicy::new(3).unwrap();
        let due: Vec<u32> = (0..9).filter(|&r| p.due_after(r)).collect();
        assert_eq!(due, vec![2, 5, 8]);
    }

    struct BrokenRng;
    impl RngCore for BrokenRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, _: &mut [u8]) {}
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
            Err(rand::Error::new(std::io::Error::other("no entropy")))
        }
    }

    #[test]
    fn entropy_failure_is_reported() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let k = SessionKey::generate(&mut rng, 0).unwrap();
        assert!(matches!(
            renew_session(&k, &mut BrokenRng),
            Err(CryptoError::Entropy(_))
        ));
    }
}
