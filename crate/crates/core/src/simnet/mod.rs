//! Deterministic discrete-event simulation of the vault, storage
//! institutions, training workstations, the orchestrator and clients.
//!
//! A single virtual clock (milliseconds) drives an ordered event queue.
//! Every delivered or dropped message is appended to the trace; the same
//! scenario and seed always produce a byte-identical trace.

mod engine;
mod nodes;
pub mod scenario;
pub mod wiretap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distribution::PlacementPlan;
use crate::orchestrator::DroppedNode;
use crate::share_file;
use crate::vault::Exclusion;
use crate::vss::{ShareGrid, SubjectId};

pub use engine::{SimOutcome, Simulation, SubjectScan};
pub use scenario::Scenario;
pub use wiretap::{single_link_sweep, wiretap_audit, Link, PatchVerdict, WiretapObservation};

pub type NodeId = String;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario references unknown node {0:?}")]
    UnknownNode(String),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("contradictory faults on {0}")]
    ConflictingFaults(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    TrainRequest,
    AsValidate,
    AsDispatch,
    PsFetch,
    PsResponse,
    RtbfRequest,
    GcScan,
    GcDelete,
    TrainPatch,
    TrainResult,
    Ack,
    Error,
}

impl MsgType {
    /// Types whose loss is reported back to the sender as a timeout ERROR.
    pub fn expects_reply(self) -> bool {
        matches!(
            self,
            MsgType::TrainRequest
                | MsgType::AsValidate
                | MsgType::AsDispatch
                | MsgType::PsFetch
                | MsgType::RtbfRequest
                | MsgType::GcScan
                | MsgType::GcDelete
                | MsgType::TrainPatch
        )
    }
}

/// A share grid on the wire: base64 of its share-file encoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WireGrid(pub String);

impl WireGrid {
    pub fn encode(grid: &ShareGrid) -> Self {
        WireGrid(B64.encode(share_file::encode(grid)))
    }

    pub fn decode(&self) -> Option<ShareGrid> {
        share_file::decode(&B64.decode(&self.0).ok()?).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ack", rename_all = "snake_case")]
pub enum AckBody {
    Validated {
        round_id: u64,
        assignment: Vec<(u8, NodeId)>,
        authorized: Vec<SubjectId>,
        excluded: Vec<Exclusion>,
    },
    Heartbeat {
        round_id: u64,
    },
    Revoked {
        subject_id: SubjectId,
        already_revoked: bool,
    },
    Held {
        subjects: Vec<SubjectId>,
    },
    Deleted {
        subject_id: SubjectId,
        grids: usize,
    },
    RoundComplete {
        round_id: u64,
        status: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum Payload {
    TrainRequest {
        requester: String,
        subjects: Vec<SubjectId>,
    },
    AsValidate {
        round_id: u64,
        requester: String,
        subjects: Vec<SubjectId>,
        assignment: Vec<(u8, NodeId)>,
    },
    AsDispatch {
        round_id: u64,
        subject_id: SubjectId,
        patch_index: u8,
        placement: Option<PlacementPlan>,
        share: WireGrid,
    },
    PsFetch {
        round_id: u64,
        subject_id: SubjectId,
        patch_index: u8,
    },
    PsResponse {
        round_id: u64,
        subject_id: SubjectId,
        patch_index: u8,
        grids: Vec<WireGrid>,
    },
    RtbfRequest {
        subject_id: SubjectId,
    },
    GcScan {
        subjects: Vec<SubjectId>,
    },
    GcDelete {
        subject_id: SubjectId,
    },
    TrainPatch {
        round_id: u64,
        patch_index: u8,
        subjects: Vec<SubjectId>,
        expected_s: f64,
    },
    TrainResult {
        round_id: u64,
        subject_id: SubjectId,
        patch_index: u8,
        /// Base64 of 512 little-endian f32 values.
        #[serde(skip_serializing_if = "Option::is_none")]
        vector: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Ack(AckBody),
    Error {
        reason: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        failed_type: Option<MsgType>,
        #[serde(skip_serializing_if = "Option::is_none")]
        round_id: Option<u64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        subject_id: Option<SubjectId>,
        #[serde(skip_serializing_if = "Option::is_none")]
        patch_index: Option<u8>,
    },
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::TrainRequest { .. } => MsgType::TrainRequest,
            Payload::AsValidate { .. } => MsgType::AsValidate,
            Payload::AsDispatch { .. } => MsgType::AsDispatch,
            Payload::PsFetch { .. } => MsgType::PsFetch,
            Payload::PsResponse { .. } => MsgType::PsResponse,
            Payload::RtbfRequest { .. } => MsgType::RtbfRequest,
            Payload::GcScan { .. } => MsgType::GcScan,
            Payload::GcDelete { .. } => MsgType::GcDelete,
            Payload::TrainPatch { .. } => MsgType::TrainPatch,
            Payload::TrainResult { .. } => MsgType::TrainResult,
            Payload::Ack(_) => MsgType::Ack,
            Payload::Error { .. } => MsgType::Error,
        }
    }

    fn round_id(&self) -> Option<u64> {
        match self {
            Payload::AsValidate { round_id, .. }
            | Payload::AsDispatch { round_id, .. }
            | Payload::PsFetch { round_id, .. }
            | Payload::PsResponse { round_id, .. }
            | Payload::TrainPatch { round_id, .. }
            | Payload::TrainResult { round_id, .. } => Some(*round_id),
            _ => None,
        }
    }

    fn subject_id(&self) -> Option<SubjectId> {
        match self {
            Payload::AsDispatch { subject_id, .. }
            | Payload::PsFetch { subject_id, .. }
            | Payload::PsResponse { subject_id, .. }
            | Payload::RtbfRequest { subject_id }
            | Payload::GcDelete { subject_id }
            | Payload::TrainResult { subject_id, .. } => Some(*subject_id),
            _ => None,
        }
    }

    fn patch_index(&self) -> Option<u8> {
        match self {
            Payload::AsDispatch { patch_index, .. }
            | Payload::PsFetch { patch_index, .. }
            | Payload::PsResponse { patch_index, .. }
            | Payload::TrainPatch { patch_index, .. }
            | Payload::TrainResult { patch_index, .. } => Some(*patch_index),
            _ => None,
        }
    }

    /// Share grids carried by this message.
    pub fn grids(&self) -> Vec<ShareGrid> {
        match self {
            Payload::AsDispatch { share, .. } => share.decode().into_iter().collect(),
            Payload::PsResponse { grids, .. } => {
                grids.iter().filter_map(WireGrid::decode).collect()
            }
            _ => Vec::new(),
        }
    }

    fn timeout_for(&self) -> Payload {
        Payload::Error {
            reason: "timeout".into(),
            failed_type: Some(self.msg_type()),
            round_id: self.round_id(),
            subject_id: self.subject_id(),
            patch_index: self.patch_index(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Delivered,
    Dropped,
    /// Produced by the network on behalf of an unreachable peer.
    Synthetic,
}

/// One line of the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMessage {
    pub msg_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "type")]
    pub msg_type: MsgType,
    /// Seconds of simulated time.
    pub sent_at: f64,
    pub delivered_at: f64,
    pub delivery: Delivery,
    pub payload: Payload,
}

/// Serializes a trace as JSON lines.
pub fn trace_jsonl(trace: &[SimMessage]) -> String {
    let mut out = String::new();
    for m in trace {
        out.push_str(&serde_json::to_string(m).expect("trace serializes"));
        out.push('\n');
    }
    out
}

pub fn trace_hash(trace: &[SimMessage]) -> String {
    hex::encode(Sha256::digest(trace_jsonl(trace).as_bytes()))
}

pub fn parse_trace(jsonl: &str) -> Result<Vec<SimMessage>, serde_json::Error> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    Offline,
    Slow { factor: f64 },
    DropMessages { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultWindow {
    pub node: NodeId,
    pub fault: Fault,
    /// Restricts the fault to traffic exchanged with this node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<NodeId>,
    /// Seconds; the window is `[from_s, until_s)`.
    pub from_s: f64,
    pub until_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundState {
    Completed,
    NoData,
    Aborted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedResult {
    pub subject_id: SubjectId,
    pub patch_index: u8,
    pub reason: String,
}

/// Orchestrator's record of one training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_id: u64,
    pub requester: String,
    pub status: RoundState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub assignment: Vec<(u8, NodeId)>,
    pub authorized: Vec<SubjectId>,
    pub excluded: Vec<Exclusion>,
    pub dropped: Vec<DroppedNode>,
    pub flagged: Vec<FlaggedResult>,
    pub embedding_digest: Option<String>,
    pub started_at: f64,
    pub finished_at: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_type_tags() {
        let p = Payload::PsFetch {
            round_id: 1,
            subject_id: SubjectId::nil(),
            patch_index: 2,
        };
        assert_eq!(p.msg_type(), MsgType::PsFetch);
        let t = p.timeout_for();
        assert_eq!(t.msg_type(), MsgType::Error);
        let Payload::Error {
            failed_type,
            round_id,
            patch_index,
            ..
        } = t
        else {
            unreachable!()
        };
        assert_eq!(
            (failed_type, round_id, patch_index),
            (Some(MsgType::PsFetch), Some(1), Some(2))
        );
        let m = SimMessage {
            msg_id: 1,
            in_reply_to: None,
            src: "a".into(),
            dst: "b".into(),
            msg_type: MsgType::PsFetch,
            sent_at: 0.0,
            delivered_at: 0.01,
            delivery: Delivery::Delivered,
            payload: p,
        };
        let line = trace_jsonl(std::slice::from_ref(&m));
        assert!(line.contains(r#""type":"PS_FETCH""#));
        assert_eq!(parse_trace(&line).unwrap(), vec![m]);
    }
}
