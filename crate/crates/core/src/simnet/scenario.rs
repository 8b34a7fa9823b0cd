//! Scenario files.
//!
//! ```json
//! {
//!   "patch_size": 16,
//!   "nodes": [
//!     {"id": "vault", "role": "vault", "latency_ms": 5},
//!     {"id": "inst-0", "role": "institution", "latency_ms": 5},
//!     {"id": "ws-0", "role": "workstation", "latency_ms": 5,
//!      "profile": {"compute_rate": 10.0, "bandwidth": 1e7}},
//!     {"id": "orchestrator", "role": "orchestrator"},
//!     {"id": "client", "role": "client"}
//!   ],
//!   "links": [{"a": "inst-0", "b": "ws-0", "latency_ms": 3}],
//!   "subjects": [{"id": 1, "allow": ["lab"]}],
//!   "script": [
//!     {"t": 0.0, "event": {"type": "train", "requester": "lab", "subjects": [1]}},
//!     {"t": 1.0, "event": {"type": "fault", "node": "inst-0", "fault": {"kind": "offline"}, "until": 4.0}},
//!     {"t": 2.0, "event": {"type": "rtbf", "subject": 1}},
//!     {"t": 3.0, "event": {"type": "gc"}}
//!   ]
//! }
//! ```
//!
//! Subjects may be written as small integers or UUID strings. The
//! `subjects` list is prepared before the clock starts: random patches,
//! shares, vault registration with the listed requesters, and placement
//! over the institutions in node order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Fault, FaultWindow, NodeId, SimError};
use crate::orchestrator::RoundConfig;
use crate::vss::SubjectId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRole {
    Vault,
    Institution,
    Workstation,
    Orchestrator,
    Client,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub compute_rate: f64,
    pub bandwidth: f64,
    #[serde(default = "infinite")]
    pub energy_budget: f64,
    #[serde(default = "one")]
    pub availability_p: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

fn one() -> f64 {
    1.0
}

fn default_latency() -> u64 {
    5
}

fn default_service() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: SimRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSpec>,
    #[serde(default = "default_latency")]
    pub latency_ms: u64,
    #[serde(default = "default_service")]
    pub service_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub latency_ms: u64,
}

/// A subject written as an integer alias or a UUID string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubjectRef(pub SubjectId);

impl Serialize for SubjectRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SubjectRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(SubjectRef(SubjectId::from_u128(n as u128))),
            Raw::Text(t) => t.parse().map(SubjectRef).map_err(serde::de::Error::custom),
        }
    }
}

impl fmt::Display for SubjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub id: SubjectRef,
    #[serde(default)]
    pub allow: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScriptEvent {
    Train {
        requester: String,
        subjects: Vec<SubjectRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<NodeId>,
    },
    Rtbf {
        subject: SubjectRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<NodeId>,
    },
    Gc,
    Fault {
        node: NodeId,
        fault: Fault,
        until: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        peer: Option<NodeId>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub t: f64,
    pub event: ScriptEvent,
}

fn default_patch_size() -> u16 {
    96
}

fn default_timeout() -> u64 {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_patch_size")]
    pub patch_size: u16,
    /// Silence after which a request counts as lost.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub round: RoundConfig,
    /// Period of the vault's automatic collection pass, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gc_period_s: Option<f64>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub subjects: Vec<SubjectSpec>,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    /// Simulated-time horizon in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time_s: Option<f64>,
}

pub(crate) fn to_ms(t: f64) -> u64 {
    (t * 1000.0).round().max(0.0) as u64
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn ids_with(&self, role: SimRole) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.role == role)
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn faults(&self) -> Vec<FaultWindow> {
        self.script
            .iter()
            .filter_map(|e| match &e.event {
                ScriptEvent::Fault {
                    node,
                    fault,
                    until,
                    peer,
                } => Some(FaultWindow {
                    node: node.clone(),
                    fault: fault.clone(),
                    peer: peer.clone(),
                    from_s: e.t,
                    until_s: *until,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(SimError::Config(format!("duplicate node id {:?}", n.id)));
            }
            if n.role == SimRole::Workstation {
                match &n.profile {
                    Some(p) if p.compute_rate > 0.0 && p.bandwidth > 0.0 => {}
                    _ => {
                        return Err(SimError::Config(format!(
                            "workstation {:?} needs a positive profile",
                            n.id
                        )))
                    }
                }
            }
        }
        for role in [SimRole::Vault, SimRole::Orchestrator] {
            if self.ids_with(role).len() != 1 {
                return Err(SimError::Config(format!(
                    "exactly one {role:?} node required"
                )));
            }
        }
        if self.ids_with(SimRole::Institution).is_empty() {
            return Err(SimError::Config("at least one institution required".into()));
        }
        if self.patch_size == 0 {
            return Err(SimError::Config("patch_size must be positive".into()));
        }
        self.round
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let known = |id: &str| -> Result<(), SimError> {
            if ids.contains(id) {
                Ok(())
            } else {
                Err(SimError::UnknownNode(id.to_string()))
            }
        };
        for l in &self.links {
            known(&l.a)?;
            known(&l.b)?;
        }
        let has_client = !self.ids_with(SimRole::Client).is_empty();
        for e in &self.script {
            if !(e.t >= 0.0) {
                return Err(SimError::Config(format!("negative event time {}", e.t)));
            }
            match &e.event {
                ScriptEvent::Train { from, .. } | ScriptEvent::Rtbf { from, .. } => match from {
                    Some(f) => {
                        known(f)?;
                        if self.node(f).map(|n| n.role) != Some(SimRole::Client) {
                            return Err(SimError::Config(format!("{f:?} is not a client")));
                        }
                    }
                    None if !has_client => {
                        return Err(SimError::Config("script needs a client node".into()))
                    }
                    None => {}
                },
                ScriptEvent::Fault {
                    node,
                    fault,
                    until,
                    peer,
                } => {
                    known(node)?;
                    if let Some(peer) = peer {
                        known(peer)?;
                    }
                    if !(*until > e.t) {
                        return Err(SimError::Config(format!("empty fault window on {node}")));
                    }
                    match fault {
                        Fault::Slow { factor } if !(*factor >= 1.0) => {
                            return Err(SimError::Config("slow factor must be at least 1".into()))
                        }
                        Fault::DropMessages { p } if !(0.0..=1.0).contains(p) => {
                            return Err(SimError::Config(
                                "drop probability must lie in [0, 1]".into(),
                            ))
                        }
                        _ => {}
                    }
                }
                ScriptEvent::Gc => {}
            }
        }
        check_fault_overlaps(&self.faults())
    }
}

/// Overlapping windows on one node must describe the same fault.
fn check_fault_overlaps(faults: &[FaultWindow]) -> Result<(), SimError> {
    let mut by_node: BTreeMap<&str, Vec<&FaultWindow>> = BTreeMap::new();
    for f in faults {
        by_node.entry(f.node.as_str()).or_default().push(f);
    }
    for (node, windows) in by_node {
        for (i, a) in windows.iter().enumerate() {
            for b in &windows[i + 1..] {
                let overlap = a.from_s < b.until_s && b.from_s < a.until_s;
                if overlap && (&a.fault, &a.peer) != (&b.fault, &b.peer) {
                    return Err(SimError::ConflictingFaults(node.to_string()));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "patch_size": 8,
        "nodes": [
            {"id": "vault", "role": "vault"},
            {"id": "inst-0", "role": "institution"},
            {"id": "orch", "role": "orchestrator"},
            {"id": "c", "role": "client"}
        ]
    }"#;

    fn with_script(script: &str) -> String {
        MINIMAL.replacen(
            "\"patch_size\": 8,",
            &format!("\"patch_size\": 8, \"script\": {script},"),
            1,
        )
    }

    #[test]
    fn parses_minimal() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.nodes[0].latency_ms, 5);
        assert_eq!(s.round.n_p, 6);
        assert_eq!(s.timeout_ms, 2000);
    }

    #[test]
    fn subject_aliases() {
        let s: SubjectSpec = serde_json::from_str(r#"{"id": 7}"#).unwrap();
        assert_eq!(s.id.0, SubjectId::from_u128(7));
        let u: SubjectSpec =
            serde_json::from_str(r#"{"id": "00000000-0000-0000-0000-000000000007"}"#).unwrap();
        assert_eq!(u.id, s.id);
    }

    #[test]
    fn rejects_unknown_nodes() {
        let bad = with_script(
            r#"[{"t": 0, "event": {"type": "fault", "node": "ghost", "fault": {"kind": "offline"}, "until": 1}}]"#,
        );
        assert!(matches!(
            Scenario::from_json(&bad),
            Err(SimError::UnknownNode(_))
        ));
    }

    #[test]
    fn rejects_contradictory_faults() {
        let bad = with_script(
            r#"[{"t": 0, "event": {"type": "fault", "node": "inst-0", "fault": {"kind": "offline"}, "until": 5}},
                {"t": 2, "event": {"type": "fault", "node": "inst-0", "fault": {"kind": "slow", "factor": 3}, "until": 6}}]"#,
        );
        assert!(matches!(
            Scenario::from_json(&bad),
            Err(SimError::ConflictingFaults(_))
        ));
        let ok = with_script(
            r#"[{"t": 0, "event": {"type": "fault", "node": "inst-0", "fault": {"kind": "offline"}, "until": 5}},
                {"t": 5, "event": {"type": "fault", "node": "inst-0", "fault": {"kind": "slow", "factor": 3}, "until": 6}}]"#,
        );
        Scenario::from_json(&ok).unwrap();
    }
}
