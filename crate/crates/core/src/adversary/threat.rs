use serde::{Deserialize, Serialize};

use crate::ids::SecuritySetting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threat {
    Eavesdropping,
    Mitm,
    NetworkMapping,
    Eclipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    High,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoAtRisk {
    ModelParameters,
    Topology,
    Roles,
    CommunicationPatterns,
    ModelArchitecture,
    ActivityPeriods,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityComponent {
    Encryption,
    Mtd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThreatProfile {
    pub threat: Threat,
    pub goal: &'static str,
    pub severity: Severity,
    pub at_risk: &'static [InfoAtRisk],
}

impl Threat {
    pub const ALL: [Threat; 4] = [
        Threat::Eavesdropping,
        Threat::Mitm,
        Threat::NetworkMapping,
        Threat::Eclipse,
    ];

    pub fn profile(self) -> ThreatProfile {
        use InfoAtRisk::*;
        let (goal, severity, at_risk): (&str, Severity, &[InfoAtRisk]) = match self {
            Threat::Eavesdropping => (
                "extract sensitive information to undermine participant integrity",
                Severity::High,
                &[ModelParameters, Topology, Roles],
            ),
            Threat::Mitm => (
                "manipulate or inject data to disrupt federation operations",
                Severity::Critical,
                &[CommunicationPatterns, Roles],
            ),
            Threat::NetworkMapping => (
                "learn the network structure for later targeted attacks",
                Severity::Low,
                &[Topology, ModelArchitecture],
            ),
            Threat::Eclipse => (
                "isolate nodes to extract information or disrupt communications",
                Severity::Critical,
                &[ActivityPeriods, Topology, Roles, CommunicationPatterns],
            ),
        };
        ThreatProfile {
            threat: self,
            goal,
            severity,
            at_risk,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Threat::Eavesdropping => "eavesdropping",
            Threat::Mitm => "mitm",
            Threat::NetworkMapping => "network_mapping",
            Threat::Eclipse => "eclipse",
        }
    }
}

/// Mitigation matrix: which component counters which threat.
pub fn mitigates(component: SecurityComponent, threat: Threat) -> bool {
    match component {
        SecurityComponent::Encryption => threat != Threat::NetworkMapping,
        SecurityComponent::Mtd => threat != Threat::Eavesdropping,
    }
}

pub fn components(setting: SecuritySetting) -> Vec<SecurityComponent> {
    let mut c = Vec::new();
    if setting.encrypts() {
        c.push(SecurityComponent::Encryption);
    }
    if setting.uses_mtd() {
        c.push(SecurityComponent::Mtd);
    }
    c
}

/// True when at least one active component of `setting` counters `threat`.
pub fn mitigated_by(setting: SecuritySetting, threat: Threat) -> bool {
    components(setting).into_iter().any(|c| mitigates(c, threat))
}

/// `setting,threat,severity,mitigated` rows for every threat and setting.
pub fn write_threat_matrix<W: std::io::Write>(out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "threat", "severity", "mitigated"])?;
    for s in SecuritySetting::ALL {
        for t in Threat::ALL {
            let sev = match t.profile().severity {
                Severity::Low => "low",
                Severity::High => "high",
                Severity::Critical => "critical",
            };
            let m = mitigated_by(s, t).to_string();
            w.write_record([s.as_str(), t.as_str(), sev, m.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_mitigates_nothing() {
        assert!(Threat::ALL.iter().all(|&t| !mitigated_by(SecuritySetting::Baseline, t)));
    }

    #[test]
    fn combined_setting_covers_every_threat() {
        assert!(Threat::ALL.iter().all(|&t| mitigated_by(SecuritySetting::EncryptionMtd, t)));
        assert!(!mitigated_by(SecuritySetting::Encryption, Threat::NetworkMapping));
    }

    #[test]
    fn matrix_has_one_row_per_pair() {
        let mut buf = Vec::new();
        write_threat_matrix(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 12);
    }
}
