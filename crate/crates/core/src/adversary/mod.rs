//! Threat model and attack implementations: eclipse isolation with
//! mimicry, passive eavesdropping and network mapping.

mod capture;
mod eclipse;
mod plan;
mod threat;

pub use capture::{
    infer_network, topology_recall, CaptureLog, CapturedFrame, NetworkMap, RecoveredParams,
    TapInterceptor,
};
pub use eclipse::{
    isolated_rounds, isolation_probability, monte_carlo_isolation, EclipseAttacker,
    EclipseInterceptor,
};
pub use plan::{write_outcome_csv, AttackKind, AttackOutcome, AttackPlan, TapSpec, OUTCOME_HEADER};
pub use threat::{
    components, mitigated_by, mitigates, write_threat_matrix, InfoAtRisk, SecurityComponent,
    Severity, Threat, ThreatProfile,
};

use thiserror::Error;

use crate::fabric::FrameKind;
use crate::ids::{NodeId, SecuritySetting};

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("invalid attack plan: {0}")]
    Plan(String),
}

/// Eclipse success: isolation for at least 80% of the window, the target
/// accepted attacker frames, and under Baseline at least one plaintext
/// parameter set was recovered.
pub fn eclipse_success(
    security: SecuritySetting,
    window_rounds: u32,
    isolated: u32,
    control: bool,
    recovered: u32,
) -> bool {
    let isolated_enough = isolated as f64 >= 0.8 * window_rounds as f64 && window_rounds > 0;
    let extracted = security != SecuritySetting::Baseline || recovered >= 1;
    isolated_enough && control && extracted
}

/// Network map over the model frames of the given rounds.
pub fn run_network_map(
    capture: &CaptureLog,
    rounds: std::ops::RangeInclusive<u32>,
) -> NetworkMap {
    let frames: Vec<CapturedFrame> = capture
        .frames
        .iter()
        .filter(|f| f.kind != FrameKind::ModelExchange || rounds.contains(&f.correlation_id))
        .cloned()
        .collect();
    infer_network(&frames)
}

pub fn is_participant(n: NodeId) -> bool {
    !n.is_attacker() && !n.is_controller()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_requires_recovery_only_in_baseline() {
        assert!(eclipse_success(SecuritySetting::Baseline, 10, 10, true, 3));
        assert!(!eclipse_success(SecuritySetting::Baseline, 10, 10, true, 0));
        assert!(!eclipse_success(SecuritySetting::Baseline, 10, 7, true, 3));
        assert!(!eclipse_success(SecuritySetting::Encryption, 10, 10, false, 0));
        assert!(eclipse_success(SecuritySetting::Encryption, 10, 8, true, 0));
    }
}
