use dflshield_core::crypto::{
    issue_token, open, renew_session, seal, verify_token, CryptoError, KemKeyPair, ReplayCache,
    SecureEnvelope, SessionKey, SigningKeyPair, TokenRejection,
};
use dflshield_core::ids::{NodeId, Role};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Link {
    rng: ChaCha20Rng,
    sender: KemKeyPair,
    recipient: KemKeyPair,
    session: SessionKey,
}

impl Link {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sender = KemKeyPair::generate(&mut rng, 0, 0);
        let recipient = KemKeyPair::generate(&mut rng, 0, 0);
        let session = SessionKey::generate(&mut rng, 0).unwrap();
        Link {
            rng,
            sender,
            recipient,
            session,
        }
    }

    fn seal(&mut self, payload: &[u8]) -> SecureEnvelope {
        loop {
            match seal(
                payload,
                NodeId(1),
                &self.sender,
                &self.recipient.public_key(),
                &mut self.session,
                &mut self.rng,
            ) {
                Ok(env) => return env,
                Err(CryptoError::NonceExhausted { .. }) => {
                    self.session = renew_session(&self.session, &mut self.rng).unwrap();
                }
                Err(e) => panic!("seal failed: {e}"),
            }
        }
    }

    /// Receiver pipeline: decode, open, then the replay check.
    fn accept(&self, wire: &[u8], cache: &ReplayCache) -> Option<Vec<u8>> {
        let env = SecureEnvelope::decode(wire).ok()?;
        let plain = open(&env, &self.recipient, &self.sender.public_key()).ok()?;
        cache.check_and_record(env.sender_id, env.epoch, &env.nonce).ok()?;
        Some(plain)
    }
}

fn payload(rng: &mut ChaCha20Rng) -> Vec<u8> {
    let len = rng.gen_range(1..2048);
    (0..len).map(|_| rng.gen()).collect()
}

#[test]
fn ten_thousand_round_trips() {
    let mut link = Link::new(1);
    let cache = ReplayCache::new();
    let mut data = ChaCha20Rng::seed_from_u64(2);
    for i in 0..10_000 {
        let p = payload(&mut data);
        let wire = link.seal(&p).encode();
        assert_eq!(link.accept(&wire, &cache).as_deref(), Some(&p[..]), "round trip {i}");
    }
}

#[test]
fn single_bit_flips_in_envelopes_are_rejected() {
    let mut link = Link::new(3);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut accepted = 0;
    for _ in 0..1000 {
        let p = payload(&mut rng);
        let mut wire = link.seal(&p).encode();
        let bit = rng.gen_range(0..wire.len() * 8);
        wire[bit / 8] ^= 1 << (bit % 8);
        if link.accept(&wire, &ReplayCache::new()).is_some() {
            accepted += 1;
        }
    }
    assert_eq!(accepted, 0);
}

#[test]
fn single_bit_flips_in_tokens_are_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let signer = SigningKeyPair::generate(&mut rng, 0);
    let vk = signer.verifying_key();
    let mut accepted = 0;
    for i in 0..1000u32 {
        let t = issue_token(NodeId(i % 50), Role::Trainer, vec!["share".into()], 1_000, 60_000, &signer)
            .unwrap();
        let mut bytes = t.as_str().as_bytes().to_vec();
        let bit = rng.gen_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        let Ok(s) = String::from_utf8(bytes) else { continue };
        if verify_token(&s, &vk, 2_000).is_ok() {
            accepted += 1;
        }
    }
    assert_eq!(accepted, 0);
}

#[test]
fn replayed_envelopes_are_rejected() {
    let mut link = Link::new(6);
    let cache = ReplayCache::new();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut accepted = 0;
    for _ in 0..1000 {
        let wire = link.seal(&payload(&mut rng)).encode();
        assert!(link.accept(&wire, &cache).is_some());
        if link.accept(&wire, &cache).is_some() {
            accepted += 1;
        }
    }
    assert_eq!(accepted, 0);
}

#[test]
fn foreign_recipient_cannot_open() {
    let mut link = Link::new(8);
    let eve = KemKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(9), 0, 0);
    let env = link.seal(b"parameters");
    assert!(open(&env, &eve, &link.sender.public_key()).is_err());
}

#[test]
fn tokens_from_another_signer_are_rejected() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let real = SigningKeyPair::generate(&mut rng, 0);
    let forger = SigningKeyPair::generate(&mut rng, 0);
    let t = issue_token(NodeId(3), Role::Trainer, vec![], 0, 100, &forger).unwrap();
    assert_eq!(
        verify_token(t.as_str(), &real.verifying_key(), 10),
        Err(TokenRejection::BadSignature)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_payload_round_trips(seed in any::<u64>(), p in proptest::collection::vec(any::<u8>(), 1..4096)) {
        let mut link = Link::new(seed);
        let wire = link.seal(&p).encode();
        prop_assert_eq!(link.accept(&wire, &ReplayCache::new()), Some(p));
    }

    #[test]
    fn token_expiry_is_strict(iat in 0u64..1_000_000, ttl in 1u64..1_000_000, probe in 0u64..2_000_000) {
        let signer = SigningKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(11), 0);
        let t = issue_token(NodeId(1), Role::Proxy, vec![], iat, ttl, &signer).unwrap();
        let ok = verify_token(t.as_str(), &signer.verifying_key(), probe).is_ok();
        prop_assert_eq!(ok, probe < iat + ttl);
    }
}
