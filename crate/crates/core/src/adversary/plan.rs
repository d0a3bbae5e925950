use std::io;

use serde::{Deserialize, Serialize};

use super::AdversaryError;
use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Eclipse,
    Eavesdrop,
    NetworkMap,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Eclipse => "eclipse",
            AttackKind::Eavesdrop => "eavesdrop",
            AttackKind::NetworkMap => "network_map",
        }
    }
}

/// Links a passive tap observes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSpec {
    /// Every participant link.
    #[default]
    All,
    /// Every link touching the plan's target.
    Target,
    /// Explicit directed links `[src, dst]`.
    Links(Vec<[u32; 2]>),
}

impl TapSpec {
    pub fn covers(&self, target: NodeId, src: NodeId, dst: NodeId) -> bool {
        match self {
            TapSpec::All => true,
            TapSpec::Target => src == target || dst == target,
            TapSpec::Links(l) => l.iter().any(|[a, b]| NodeId(*a) == src && NodeId(*b) == dst),
        }
    }
}

fn one() -> u32 {
    1
}

fn default_mc() -> u32 {
    10_000
}

/// `A` attacking `T` over rounds `start_round..=end_round`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub target: u32,
    /// Number of external attacker endpoints.
    #[serde(default = "one")]
    pub attackers: u32,
    #[serde(default)]
    pub start_round: u32,
    /// Defaults to the last round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_round: Option<u32>,
    #[serde(default)]
    pub tap: TapSpec,
    /// Sampled rounds for the isolation-probability estimate under MTD.
    #[serde(default = "default_mc")]
    pub monte_carlo_rounds: u32,
}

impl AttackPlan {
    pub fn target_id(&self) -> NodeId {
        NodeId(self.target)
    }

    pub fn attacker_ids(&self) -> Vec<NodeId> {
        (0..self.attackers).map(NodeId::attacker).collect()
    }

    pub fn end(&self, rounds: u32) -> u32 {
        self.end_round.unwrap_or(rounds.saturating_sub(1))
    }

    pub fn window(&self, rounds: u32) -> std::ops::RangeInclusive<u32> {
        self.start_round..=self.end(rounds)
    }

    pub fn window_len(&self, rounds: u32) -> u32 {
        self.end(rounds) + 1 - self.start_round
    }

    pub fn validate(&self, nodes: u32, rounds: u32) -> Result<(), AdversaryError> {
        if self.target >= nodes {
            return Err(AdversaryError::Plan(format!(
                "target {} is outside 0..{nodes}",
                self.target
            )));
        }
        if self.attackers == 0 {
            return Err(AdversaryError::Plan("at least one attacker is required".into()));
        }
        if rounds == 0 || self.start_round > self.end(rounds) || self.end(rounds) >= rounds {
            return Err(AdversaryError::Plan(format!(
                "attack window {}..={} does not fit {rounds} rounds",
                self.start_round,
                self.end(rounds)
            )));
        }
        if let TapSpec::Links(l) = &self.tap {
            if l.iter().flatten().any(|&n| n >= nodes) {
                return Err(AdversaryError::Plan("tapped link names an unknown node".into()));
            }
        }
        Ok(())
    }
}

/// Result of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: AttackKind,
    pub target: NodeId,
    pub window_rounds: u32,
    pub isolated_rounds: u32,
    pub control_established: bool,
    pub plaintext_param_sets_recovered: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology_recall: Option<f64>,
    /// Empirical all-attacker sample rate and its closed form, under MTD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_expected: Option<f64>,
    pub success: bool,
}

pub const OUTCOME_HEADER: [&str; 5] = ["attack", "target", "isolated_rounds", "recovered", "success"];

pub fn write_outcome_csv<W: io::Write>(outcomes: &[AttackOutcome], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OUTCOME_HEADER)?;
    for o in outcomes {
        w.write_record([
            o.attack.as_str().to_string(),
            o.target.to_string(),
            o.isolated_rounds.to_string(),
            o.plaintext_param_sets_recovered.to_string(),
            o.success.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> AttackPlan {
        AttackPlan {
            kind: AttackKind::Eclipse,
            target: 3,
            attackers: 2,
            start_round: 2,
            end_round: None,
            tap: TapSpec::All,
            monte_carlo_rounds: 10_000,
        }
    }

    #[test]
    fn window_defaults_to_last_round() {
        let p = plan();
        assert_eq!(p.window(10), 2..=9);
        assert_eq!(p.window_len(10), 8);
        p.validate(8, 10).unwrap();
        assert!(p.validate(3, 10).is_err());
        assert!(p.validate(8, 2).is_err());
    }

    #[test]
    fn attackers_use_reserved_ids() {
        assert!(plan().attacker_ids().iter().all(|a| a.is_attacker()));
    }

    #[test]
    fn tap_coverage() {
        let t = NodeId(3);
        assert!(TapSpec::Target.covers(t, NodeId(3), NodeId(1)));
        assert!(!TapSpec::Target.covers(t, NodeId(0), NodeId(1)));
        let l = TapSpec::Links(vec![[0, 1]]);
        assert!(l.covers(t, NodeId(0), NodeId(1)));
        assert!(!l.covers(t, NodeId(1), NodeId(0)));
    }

    #[test]
    fn outcome_csv_header() {
        let mut buf = Vec::new();
        write_outcome_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), OUTCOME_HEADER.join(","));
    }
}
