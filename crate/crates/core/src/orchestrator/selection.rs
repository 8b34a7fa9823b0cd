//! Deadline-greedy workstation selection and exponential-score straggler
//! removal.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::OrchestrationError;
use crate::vss::SubjectId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Institution,
    Workstation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: String,
    /// Work units per second.
    pub compute_rate: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Work units the node can spend in one round.
    pub energy_budget: f64,
    pub availability_p: f64,
    pub role: NodeRole,
}

impl NodeProfile {
    pub fn workstation(node_id: impl Into<String>, compute_rate: f64, bandwidth: f64) -> Self {
        NodeProfile {
            node_id: node_id.into(),
            compute_rate,
            bandwidth,
            energy_budget: f64::INFINITY,
            availability_p: 1.0,
            role: NodeRole::Workstation,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestrationError> {
        let positive = |v: f64| v > 0.0 && !v.is_nan();
        if !(positive(self.compute_rate)
            && positive(self.bandwidth)
            && positive(self.energy_budget))
            || !(0.0..=1.0).contains(&self.availability_p)
        {
            return Err(OrchestrationError::InvalidProfile(self.node_id.clone()));
        }
        Ok(())
    }
}

/// Per-round workload: one work unit and one share transfer per subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundWorkload {
    pub work_units: f64,
    pub bytes: f64,
}

impl RoundWorkload {
    pub fn for_subjects(n_subjects: usize, share_bytes: usize) -> Self {
        RoundWorkload {
            work_units: n_subjects as f64,
            bytes: (n_subjects * share_bytes) as f64,
        }
    }
}

/// `work / compute_rate + bytes / bandwidth`, in seconds.
pub fn estimate_completion(node: &NodeProfile, workload: RoundWorkload) -> f64 {
    workload.work_units / node.compute_rate + workload.bytes / node.bandwidth
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub patch_index: u8,
    pub node_id: String,
    pub estimate_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearMiss {
    pub node_id: String,
    pub estimate_s: f64,
    pub reason: String,
}

/// Skip counts of nodes removed in earlier rounds. A higher count lowers
/// a node's priority among deadline-compliant candidates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessLedger {
    skips: BTreeMap<String, u32>,
}

impl FairnessLedger {
    pub fn skip_count(&self, node: &str) -> u32 {
        self.skips.get(node).copied().unwrap_or(0)
    }

    pub fn record_skip(&mut self, node: &str) {
        *self.skips.entry(node.to_string()).or_default() += 1;
    }
}

struct Ranked<'a> {
    node: &'a NodeProfile,
    estimate: f64,
    skips: u32,
}

fn rank<'a>(
    candidates: &'a [NodeProfile],
    workload: RoundWorkload,
    deadline_s: f64,
    ledger: &FairnessLedger,
) -> Result<(Vec<Ranked<'a>>, Vec<NearMiss>), OrchestrationError> {
    let mut compliant = Vec::new();
    let mut misses = Vec::new();
    for node in candidates
        .iter()
        .filter(|n| n.role == NodeRole::Workstation)
    {
        node.validate()?;
        let estimate = estimate_completion(node, workload);
        let reason = if estimate > deadline_s {
            Some(format!(
                "estimate {estimate:.3}s exceeds deadline {deadline_s:.3}s"
            ))
        } else if node.energy_budget < workload.work_units {
            Some(format!(
                "energy budget {} below workload {}",
                node.energy_budget, workload.work_units
            ))
        } else {
            None
        };
        match reason {
            Some(reason) => misses.push(NearMiss {
                node_id: node.node_id.clone(),
                estimate_s: estimate,
                reason,
            }),
            None => compliant.push(Ranked {
                node,
                estimate,
                skips: ledger.skip_count(&node.node_id),
            }),
        }
    }
    compliant.sort_by(|a, b| {
        a.skips
            .cmp(&b.skips)
            .then(a.estimate.total_cmp(&b.estimate))
            .then_with(|| a.node.node_id.cmp(&b.node.node_id))
    });
    misses.sort_by(|a, b| {
        a.estimate_s
            .total_cmp(&b.estimate_s)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    Ok((compliant, misses))
}

/// Picks the `n_p` fastest deadline-compliant workstations and assigns
/// patch indices `0..n_p` in ranked order.
pub fn select_nodes(
    candidates: &[NodeProfile],
    n_p: usize,
    workload: RoundWorkload,
    deadline_s: f64,
    ledger: &FairnessLedger,
) -> Result<Vec<Assignment>, OrchestrationError> {
    let (compliant, near_misses) = rank(candidates, workload, deadline_s, ledger)?;
    if compliant.len() < n_p {
        return Err(OrchestrationError::InsufficientCapacity {
            needed: n_p,
            available: compliant.len(),
            near_misses,
        });
    }
    Ok(compliant
        .iter()
        .take(n_p)
        .enumerate()
        .map(|(i, r)| Assignment {
            patch_index: i as u8,
            node_id: r.node.node_id.clone(),
            estimate_s: r.estimate,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StragglerPolicy {
    pub lambda: f64,
    pub theta: f64,
    pub heartbeat_s: f64,
    /// Heartbeat intervals of silence before a node counts as lost.
    pub missed_heartbeats: f64,
}

impl Default for StragglerPolicy {
    fn default() -> Self {
        StragglerPolicy {
            lambda: 1.0,
            theta: 0.5,
            heartbeat_s: 5.0,
            missed_heartbeats: 2.0,
        }
    }
}

/// `exp(-lambda * max(0, elapsed / expected - 1))`.
pub fn straggler_score(elapsed_s: f64, expected_s: f64, lambda: f64) -> f64 {
    let lateness = (elapsed_s / expected_s - 1.0).max(0.0);
    (-lambda * lateness).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeObservation {
    pub elapsed_s: f64,
    pub expected_s: f64,
    pub last_heartbeat_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    Heartbeat { silent_s: f64 },
    Score { score: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedNode {
    pub node_id: String,
    pub patch_index: u8,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RoundStatus {
    Planned,
    InProgress,
    Completed,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRound {
    pub round_id: u64,
    pub subjects: Vec<SubjectId>,
    pub assignment: Vec<Assignment>,
    pub deadline_s: f64,
    pub dropped: Vec<DroppedNode>,
    pub status: RoundStatus,
    /// Compliant candidates not yet used, best first.
    pub standby: Vec<Assignment>,
}

impl TrainingRound {
    /// Selects workstations and keeps the remaining compliant candidates
    /// as replacements.
    pub fn plan(
        round_id: u64,
        subjects: Vec<SubjectId>,
        candidates: &[NodeProfile],
        n_p: usize,
        workload: RoundWorkload,
        deadline_s: f64,
        ledger: &FairnessLedger,
    ) -> Result<Self, OrchestrationError> {
        let assignment = select_nodes(candidates, n_p, workload, deadline_s, ledger)?;
        let (compliant, _) = rank(candidates, workload, deadline_s, ledger)?;
        let standby = compliant
            .iter()
            .skip(n_p)
            .map(|r| Assignment {
                patch_index: u8::MAX,
                node_id: r.node.node_id.clone(),
                estimate_s: r.estimate,
            })
            .collect();
        Ok(TrainingRound {
            round_id,
            subjects,
            assignment,
            deadline_s,
            dropped: Vec::new(),
            status: RoundStatus::Planned,
            standby,
        })
    }

    pub fn node_for(&self, patch_index: u8) -> Option<&str> {
        self.assignment
            .iter()
            .find(|a| a.patch_index == patch_index)
            .map(|a| a.node_id.as_str())
    }

    pub fn node_ids(&self) -> BTreeSet<&str> {
        self.assignment.iter().map(|a| a.node_id.as_str()).collect()
    }
}

/// Removes silent or late workstations and hands their patches to the
/// next standby candidates. Standby nodes with equal estimates are taken
/// in an order shuffled by `rng`. With no replacement left the round is
/// marked aborted and an error carries the partial report.
pub fn drop_stragglers<R: RngCore + ?Sized>(
    round: &mut TrainingRound,
    observed: &BTreeMap<String, NodeObservation>,
    now_s: f64,
    policy: &StragglerPolicy,
    ledger: &mut FairnessLedger,
    rng: &mut R,
) -> Result<Vec<DroppedNode>, OrchestrationError> {
    if round.status == RoundStatus::Planned {
        round.status = RoundStatus::InProgress;
    }
    let mut removed = Vec::new();
    for a in &round.assignment {
        let Some(obs) = observed.get(&a.node_id) else {
            continue;
        };
        let silent_s = now_s - obs.last_heartbeat_s;
        let reason = if silent_s > policy.missed_heartbeats * policy.heartbeat_s {
            Some(DropReason::Heartbeat { silent_s })
        } else {
            let score = straggler_score(obs.elapsed_s, obs.expected_s, policy.lambda);
            (score < policy.theta).then_some(DropReason::Score { score })
        };
        if let Some(reason) = reason {
            removed.push(DroppedNode {
                node_id: a.node_id.clone(),
                patch_index: a.patch_index,
                reason,
            });
        }
    }
    if removed.is_empty() {
        return Ok(removed);
    }

    shuffle_ties(&mut round.standby, rng);
    for d in &removed {
        ledger.record_skip(&d.node_id);
        round.assignment.retain(|a| a.node_id != d.node_id);
        round.dropped.push(d.clone());
        let replacement = (!round.standby.is_empty()).then(|| round.standby.remove(0));
        match replacement {
            Some(mut r) => {
                r.patch_index = d.patch_index;
                round.assignment.push(r);
            }
            None => {
                let reason = format!(
                    "no replacement for patch {} after dropping {}",
                    d.patch_index, d.node_id
                );
                round.status = RoundStatus::Aborted {
                    reason: reason.clone(),
                };
                return Err(OrchestrationError::RoundAborted {
                    reason,
                    dropped: round.dropped.clone(),
                });
            }
        }
    }
    round.assignment.sort_by_key(|a| a.patch_index);
    Ok(removed)
}

fn shuffle_ties<R: RngCore + ?Sized>(standby: &mut [Assignment], rng: &mut R) {
    let mut start = 0;
    while start < standby.len() {
        let mut end = start + 1;
        while end < standby.len() && standby[end].estimate_s == standby[start].estimate_s {
            end += 1;
        }
        standby[start..end].shuffle(rng);
        start = end;
    }
}
