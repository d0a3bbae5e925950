use std::collections::{BTreeMap, HashMap, HashSet};

use parking_lot::Mutex;

use super::CryptoError;
use crate::ids::NodeId;

/// Nonces seen per epoch.
type EpochNonces = BTreeMap<u32, HashSet<Vec<u8>>>;

/// Per-sender record of accepted nonces, kept for the newest two epochs.
///
/// Envelopes older than the retained window are rejected as replays too.
#[derive(Debug, Default)]
pub struct ReplayCache {
    inner: Mutex<HashMap<NodeId, EpochNonces>>,
}

impl ReplayCache {
    pub const RETAINED_EPOCHS: u32 = 2;

    pub fn new() -> Self {
        Self::default()
    }

    /// Records `(sender, epoch, nonce)`; errors if it was seen before or is
    /// older than the retained window.
    pub fn check_and_record(
        &self,
        sender: NodeId,
        epoch: u32,
        nonce: &[u8],
    ) -> Result<(), CryptoError> {
        let mut guard = self.inner.lock();
        let epochs = guard.entry(sender).or_default();
        let newest = epochs.keys().next_back().copied().unwrap_or(epoch).max(epoch);
        let floor = newest.saturating_sub(Self::RETAINED_EPOCHS - 1);
        if epoch < floor {
            return Err(CryptoError::Replay { sender, epoch });
        }
        if !epochs.entry(epoch).or_default().insert(nonce.to_vec()) {
            return Err(CryptoError::Replay { sender, epoch });
        }
        epochs.retain(|&e, _| e >= floor);
        Ok(())
    }

    pub fn retained_epochs(&self, sender: NodeId) -> Vec<u32> {
        self.inner
            .lock()
            .get(&sender)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }
}
