//! Deterministic inputs shared by the benchmarks.

use dflshield_core::crypto::{KemKeyPair, SessionKey};
use dflshield_core::model::{Activation, BlobSpec, Dataset, ModelArchitecture, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// The default scenario model: 4 features, one hidden layer of 16, 3 classes.
pub fn architecture() -> ModelArchitecture {
    ModelArchitecture::new(vec![4, 16, 3], Activation::default()).expect("valid architecture")
}

/// `count` independently initialized parameter sets.
pub fn param_sets(count: usize, seed: u64) -> Vec<ModelParams> {
    let arch = architecture();
    let mut r = rng(seed);
    (0..count)
        .map(|_| ModelParams::init(&arch, &mut r).expect("valid init"))
        .collect()
}

/// One node's shard of the default blob dataset.
pub fn shard(samples: usize) -> Dataset {
    Dataset::gaussian_blobs(BlobSpec {
        samples,
        classes: 3,
        dims: 4,
        spread: 1.6,
        center_box: 5.0,
        seed: 42,
    })
}

pub struct CryptoFixture {
    pub rng: ChaCha20Rng,
    pub sender: KemKeyPair,
    pub recipient: KemKeyPair,
    pub session: SessionKey,
}

pub fn crypto_fixture() -> CryptoFixture {
    let mut r = rng(5);
    let sender = KemKeyPair::generate(&mut r, 0, 0);
    let recipient = KemKeyPair::generate(&mut r, 0, 0);
    let session = SessionKey::generate_with_limit(&mut r, 0, u64::MAX).expect("session key");
    CryptoFixture {
        rng: r,
        sender,
        recipient,
        session,
    }
}
