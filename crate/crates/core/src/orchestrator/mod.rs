//! Training rounds: workstation selection, share dispatch, in-memory patch
//! reconstruction, and the embedding trainer.

pub mod selection;
pub mod trainer;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distribution::{locate_shares, InstitutionId};
use crate::hygiene::{BufferKind, BufferRegistry, Ticket};
use crate::parallel::{map_slice, Exec};
use crate::vault::AsHandle;
use crate::vss::{reconstruct_patch, PatchImage, ShareGrid, SubjectId};

pub use selection::{
    drop_stragglers, estimate_completion, select_nodes, straggler_score, Assignment, DropReason,
    DroppedNode, FairnessLedger, NearMiss, NodeObservation, NodeProfile, NodeRole, RoundStatus,
    RoundWorkload, StragglerPolicy, TrainingRound,
};
pub use trainer::{
    BundleEmbedding, EmbeddingTrainer, ExternalTrainer, StubTrainer, TrainerError, EMBEDDING_DIM,
};

pub const VAULT_NODE: &str = "vault";

pub fn institution_node(id: InstitutionId) -> String {
    format!("institution-{id}")
}

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("invalid node profile for {0}")]
    InvalidProfile(String),
    #[error("only {available} of {needed} workstations can meet the deadline")]
    InsufficientCapacity {
        needed: usize,
        available: usize,
        near_misses: Vec<NearMiss>,
    },
    #[error("round aborted: {reason}")]
    RoundAborted {
        reason: String,
        dropped: Vec<DroppedNode>,
    },
    #[error("no subjects to train")]
    NoData,
    #[error("invalid round config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    #[default]
    Stub,
    External,
}

/// Round configuration as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub n_p: usize,
    pub deadline_s: f64,
    pub lambda: f64,
    pub theta: f64,
    pub heartbeat_s: f64,
    pub trainer: TrainerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainer_addr: Option<String>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        let p = StragglerPolicy::default();
        RoundConfig {
            n_p: 6,
            deadline_s: 60.0,
            lambda: p.lambda,
            theta: p.theta,
            heartbeat_s: p.heartbeat_s,
            trainer: TrainerKind::Stub,
            trainer_addr: None,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), OrchestrationError> {
        let bad = |m: &str| Err(OrchestrationError::Config(m.to_string()));
        if self.n_p == 0 || self.n_p > 6 {
            return bad("n_p must be between 1 and 6");
        }
        if !(self.deadline_s > 0.0 && self.lambda > 0.0 && self.heartbeat_s > 0.0) {
            return bad("deadline, lambda and heartbeat must be positive");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must lie in [0, 1]");
        }
        if self.trainer == TrainerKind::External && self.trainer_addr.is_none() {
            return bad("external trainer needs trainer_addr");
        }
        Ok(())
    }

    pub fn policy(&self) -> StragglerPolicy {
        StragglerPolicy {
            lambda: self.lambda,
            theta: self.theta,
            heartbeat_s: self.heartbeat_s,
            ..Default::default()
        }
    }

    pub fn build_trainer(&self) -> Result<Box<dyn EmbeddingTrainer>, OrchestrationError> {
        match self.trainer {
            TrainerKind::Stub => Ok(Box::new(StubTrainer::default())),
            TrainerKind::External => {
                let addr = self
                    .trainer_addr
                    .as_deref()
                    .ok_or_else(|| OrchestrationError::Config("no trainer_addr".into()))?;
                Ok(Box::new(
                    ExternalTrainer::new(addr)
                        .map_err(|e| OrchestrationError::Config(e.to_string()))?,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("institution {0} unreachable")]
pub struct FetchError(pub InstitutionId);

/// Where workstations fetch private shares from.
pub trait ShareSource: Sync {
    /// Grids of `subject` for `patch_index` held at `institution`.
    fn fetch(
        &self,
        institution: InstitutionId,
        subject: SubjectId,
        patch_index: u8,
    ) -> Result<Vec<ShareGrid>, FetchError>;
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum PatchFailure {
    #[error("patch not available in the placement")]
    Unavailable,
    #[error("institution {0} unreachable")]
    Unreachable(InstitutionId),
    #[error("incomplete share: {0}")]
    Incomplete(String),
    #[error("trainer: {0}")]
    Trainer(String),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub src: String,
    pub dst: String,
    pub kind: String,
    pub subject_id: SubjectId,
    pub patch_index: Option<u8>,
}

/// Messages exchanged during dispatch, for non-communication audits.
#[derive(Debug, Default)]
pub struct TrafficLog {
    records: Mutex<Vec<TrafficRecord>>,
}

impl TrafficLog {
    fn push(
        &self,
        src: &str,
        dst: &str,
        kind: &str,
        subject_id: SubjectId,
        patch_index: Option<u8>,
    ) {
        self.records
            .lock()
            .expect("traffic lock")
            .push(TrafficRecord {
                src: src.to_string(),
                dst: dst.to_string(),
                kind: kind.to_string(),
                subject_id,
                patch_index,
            });
    }

    /// All records in a canonical order.
    pub fn records(&self) -> Vec<TrafficRecord> {
        let mut r = self.records.lock().expect("traffic lock").clone();
        r.sort();
        r
    }

    /// Messages whose endpoints are both in `nodes`.
    pub fn between(&self, nodes: &BTreeSet<&str>) -> Vec<TrafficRecord> {
        self.records()
            .into_iter()
            .filter(|r| nodes.contains(r.src.as_str()) && nodes.contains(r.dst.as_str()))
            .collect()
    }
}

/// A patch rebuilt on a workstation; zeroized and unregistered on drop.
pub struct ReconstructedPatch {
    pub subject_id: SubjectId,
    pub patch: PatchImage,
    _ticket: Ticket,
}

impl std::fmt::Debug for ReconstructedPatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReconstructedPatch")
            .field("subject_id", &self.subject_id)
            .field("patch", &self.patch)
            .finish()
    }
}

#[derive(Debug)]
pub struct WorkstationOutput {
    pub node_id: String,
    pub patch_index: u8,
    pub patches: Vec<(SubjectId, Result<ReconstructedPatch, PatchFailure>)>,
}

fn reconstruct_one(
    a: &Assignment,
    handle: &AsHandle,
    source: &dyn ShareSource,
    registry: &BufferRegistry,
    traffic: &TrafficLog,
) -> Result<ReconstructedPatch, PatchFailure> {
    let subject = handle.subject_id;
    let ws = a.node_id.as_str();
    traffic.push(VAULT_NODE, ws, "AS_DISPATCH", subject, None);
    let _as_ticket = registry.register(
        BufferKind::AuthenticationShare,
        ws,
        handle.grid.shape().len(),
    );
    let plan = handle.placement.as_ref().ok_or(PatchFailure::Unavailable)?;
    let institutions = locate_shares(plan, a.patch_index).map_err(|_| PatchFailure::Unavailable)?;
    if institutions.is_empty() {
        return Err(PatchFailure::Unavailable);
    }
    let mut parts = Vec::new();
    for inst in institutions {
        let node = institution_node(inst);
        traffic.push(ws, &node, "PS_FETCH", subject, Some(a.patch_index));
        match source.fetch(inst, subject, a.patch_index) {
            Ok(grids) => {
                traffic.push(&node, ws, "PS_RESPONSE", subject, Some(a.patch_index));
                parts.extend(
                    grids
                        .into_iter()
                        .filter(|g| g.subject_id() == subject && g.patch_index() == a.patch_index),
                );
            }
            Err(FetchError(i)) => {
                traffic.push(&node, ws, "ERROR", subject, Some(a.patch_index));
                return Err(PatchFailure::Unreachable(i));
            }
        }
    }
    let patch = reconstruct_patch(&handle.grid, &parts)
        .map_err(|e| PatchFailure::Incomplete(e.to_string()))?;
    let ticket = registry.register(BufferKind::ReconstructedPatch, ws, patch.pixels().len());
    Ok(ReconstructedPatch {
        subject_id: subject,
        patch,
        _ticket: ticket,
    })
}

/// Every workstation independently receives the authentication shares,
/// fetches its own private share from the institutions, and rebuilds its
/// patch for each subject. Workstations never talk to each other.
pub fn dispatch_and_reconstruct(
    round: &TrainingRound,
    handles: &[AsHandle],
    source: &dyn ShareSource,
    registry: &BufferRegistry,
    traffic: &TrafficLog,
    exec: Exec,
) -> Vec<WorkstationOutput> {
    map_slice(exec, &round.assignment, |a| WorkstationOutput {
        node_id: a.node_id.clone(),
        patch_index: a.patch_index,
        patches: handles
            .iter()
            .map(|h| {
                (
                    h.subject_id,
                    reconstruct_one(a, h, source, registry, traffic),
                )
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedPatch {
    pub subject_id: SubjectId,
    /// `None` when the whole bundle failed to aggregate.
    pub patch_index: Option<u8>,
    pub reason: PatchFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub trainer: String,
    pub subjects: usize,
    pub patches_reconstructed: usize,
    pub patches_trained: usize,
    pub flagged: Vec<FlaggedPatch>,
    /// SHA-256 over subject ids and embedding bytes; identifies the model state.
    pub model_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutput {
    pub embeddings: BTreeMap<SubjectId, Vec<f32>>,
    pub metrics: RoundMetrics,
}

/// Runs the trainer over every subject's patches. The reconstructed
/// patches are consumed and wiped before this returns.
pub fn train_round(
    outputs: Vec<WorkstationOutput>,
    n_p: usize,
    trainer: &dyn EmbeddingTrainer,
    exec: Exec,
) -> Result<RoundOutput, OrchestrationError> {
    let mut flagged = Vec::new();
    let mut slots: BTreeMap<SubjectId, Vec<Option<&PatchImage>>> = BTreeMap::new();
    let mut reconstructed = 0;
    for out in &outputs {
        for (subject, result) in &out.patches {
            let entry = slots.entry(*subject).or_insert_with(|| vec![None; n_p]);
            match result {
                Ok(r) => {
                    reconstructed += 1;
                    if let Some(slot) = entry.get_mut(out.patch_index as usize) {
                        *slot = Some(&r.patch);
                    }
                }
                Err(e) => flagged.push(FlaggedPatch {
                    subject_id: *subject,
                    patch_index: Some(out.patch_index),
                    reason: e.clone(),
                }),
            }
        }
    }
    if slots.is_empty() {
        return Err(OrchestrationError::NoData);
    }

    let subjects: Vec<(SubjectId, Vec<Option<&PatchImage>>)> = slots.into_iter().collect();
    let bundles = map_slice(exec, &subjects, |(subject, patches)| {
        trainer.embed_bundle(*subject, patches)
    });

    let mut embeddings = BTreeMap::new();
    let mut trained = 0;
    let mut hasher = Sha256::new();
    for ((subject, _), bundle) in subjects.iter().zip(bundles) {
        for (i, v) in bundle.patch_vectors.iter().enumerate() {
            match v {
                Some(Ok(_)) => trained += 1,
                Some(Err(e)) => flagged.push(FlaggedPatch {
                    subject_id: *subject,
                    patch_index: Some(i as u8),
                    reason: PatchFailure::Trainer(e.to_string()),
                }),
                None => {}
            }
        }
        match bundle.embedding {
            Ok(e) => {
                hasher.update(subject.as_bytes());
                for v in &e {
                    hasher.update(v.to_le_bytes());
                }
                embeddings.insert(*subject, e);
            }
            Err(e) => flagged.push(FlaggedPatch {
                subject_id: *subject,
                patch_index: None,
                reason: PatchFailure::Trainer(e.to_string()),
            }),
        }
    }
    let metrics = RoundMetrics {
        trainer: trainer.name().to_string(),
        subjects: subjects.len(),
        patches_reconstructed: reconstructed,
        patches_trained: trained,
        flagged,
        model_digest: hex::encode(hasher.finalize()),
    };
    drop(subjects);
    drop(outputs);
    Ok(RoundOutput {
        embeddings,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{plan_distribution, Distribution};
    use crate::rng::seeded;
    use crate::vss::{share_patches, GridShape, PatchKind};
    use rand::RngCore;

    struct Stores {
        held: BTreeMap<InstitutionId, Vec<ShareGrid>>,
        offline: BTreeSet<InstitutionId>,
    }

    impl ShareSource for Stores {
        fn fetch(
            &self,
            institution: InstitutionId,
            subject: SubjectId,
            patch_index: u8,
        ) -> Result<Vec<ShareGrid>, FetchError> {
            if self.offline.contains(&institution) {
                return Err(FetchError(institution));
            }
            Ok(self
                .held
                .get(&institution)
                .map(|g| {
                    g.iter()
                        .filter(|g| g.subject_id() == subject && g.patch_index() == patch_index)
                        .cloned()
                        .collect()
                })
                .unwrap_or_default())
        }
    }

    struct Fixture {
        originals: BTreeMap<SubjectId, Vec<PatchImage>>,
        handles: Vec<AsHandle>,
        stores: Stores,
    }

    fn fixture(subjects: u128, patches: usize, institutions: usize) -> Fixture {
        let shape = GridShape::new(8, 8, 3).unwrap();
        let mut rng = seeded(42);
        let mut f = Fixture {
            originals: BTreeMap::new(),
            handles: Vec::new(),
            stores: Stores {
                held: BTreeMap::new(),
                offline: BTreeSet::new(),
            },
        };
        for s in 0..subjects {
            let subject = SubjectId::from_u128(s + 1);
            let originals: Vec<PatchImage> = PatchKind::ALL[..patches]
                .iter()
                .map(|&k| {
                    let mut px = vec![0u8; shape.len()];
                    rng.fill_bytes(&mut px);
                    PatchImage::new(k, shape, px).unwrap()
                })
                .collect();
            let (auth, ps) = share_patches(subject, &originals, &mut rng).unwrap();
            let Distribution { plan, grids } =
                plan_distribution(&ps, institutions, &mut rng).unwrap();
            for (k, g) in grids.into_iter().enumerate() {
                f.stores.held.entry(k as InstitutionId).or_default().push(g);
            }
            f.handles.push(AsHandle {
                subject_id: subject,
                grid: auth,
                placement: Some(plan),
            });
            f.originals.insert(subject, originals);
        }
        f
    }

    fn round(n_p: usize) -> TrainingRound {
        let nodes: Vec<_> = (0..n_p)
            .map(|i| NodeProfile::workstation(format!("ws-{i}"), 10.0, 1e6))
            .collect();
        TrainingRound::plan(
            1,
            vec![],
            &nodes,
            n_p,
            RoundWorkload {
                work_units: 1.0,
                bytes: 0.0,
            },
            60.0,
            &FairnessLedger::default(),
        )
        .unwrap()
    }

    #[test]
    fn healthy_round_reconstructs_exactly() {
        let f = fixture(3, 6, 9);
        let registry = BufferRegistry::new();
        let traffic = TrafficLog::default();
        let r = round(6);
        let outs = dispatch_and_reconstruct(
            &r,
            &f.handles,
            &f.stores,
            &registry,
            &traffic,
            Exec::Parallel,
        );
        for out in &outs {
            for (subject, res) in &out.patches {
                let rebuilt = res.as_ref().unwrap();
                assert_eq!(
                    &rebuilt.patch,
                    &f.originals[subject][out.patch_index as usize]
                );
            }
        }
        assert_eq!(registry.live_of(BufferKind::ReconstructedPatch).len(), 18);
        assert!(registry.live_of(BufferKind::AuthenticationShare).is_empty());
        assert!(traffic.between(&r.node_ids()).is_empty());

        let out = train_round(outs, 6, &StubTrainer::default(), Exec::Parallel).unwrap();
        assert_eq!(out.embeddings.len(), 3);
        assert_eq!(out.metrics.patches_trained, 18);
        assert!(out.metrics.flagged.is_empty());
        assert_eq!(registry.live_count(), 0);
    }

    #[test]
    fn training_is_reproducible() {
        let f = fixture(2, 6, 6);
        let run = |exec| {
            let outs = dispatch_and_reconstruct(
                &round(6),
                &f.handles,
                &f.stores,
                &BufferRegistry::new(),
                &TrafficLog::default(),
                exec,
            );
            train_round(outs, 6, &StubTrainer::default(), exec).unwrap()
        };
        let a = run(Exec::Sequential);
        let b = run(Exec::Parallel);
        assert_eq!(a.metrics.model_digest, b.metrics.model_digest);
        assert_eq!(a, b);
    }

    #[test]
    fn dropped_patch_reported_unavailable() {
        let f = fixture(1, 6, 5);
        let outs = dispatch_and_reconstruct(
            &round(6),
            &f.handles,
            &f.stores,
            &BufferRegistry::new(),
            &TrafficLog::default(),
            Exec::Sequential,
        );
        let failed: Vec<_> = outs.iter().filter(|o| o.patches[0].1.is_err()).collect();
        assert_eq!(failed.len(), 1);
        assert!(
            matches!(failed[0].patches[0].1, Err(PatchFailure::Unavailable)),
            "{:?}",
            failed[0].patches[0].1
        );
        let out = train_round(outs, 6, &StubTrainer::default(), Exec::Sequential).unwrap();
        assert_eq!(out.metrics.patches_trained, 5);
        assert_eq!(out.metrics.flagged.len(), 1);
        assert_eq!(out.embeddings.len(), 1);
    }

    #[test]
    fn missing_subgrid_is_incomplete() {
        let mut f = fixture(1, 6, 12);
        let victim = f.handles[0]
            .placement
            .as_ref()
            .unwrap()
            .assignments
            .iter()
            .find(|a| a.subgrid_total > 1)
            .unwrap()
            .institution;
        f.stores.held.remove(&victim);
        let outs = dispatch_and_reconstruct(
            &round(6),
            &f.handles,
            &f.stores,
            &BufferRegistry::new(),
            &TrafficLog::default(),
            Exec::Sequential,
        );
        let errs: Vec<_> = outs
            .iter()
            .filter_map(|o| o.patches[0].1.as_ref().err())
            .collect();
        assert_eq!(errs.len(), 1);
        assert!(matches!(errs[0], PatchFailure::Incomplete(_)));
    }

    #[test]
    fn offline_institution_is_unreachable() {
        let mut f = fixture(1, 6, 6);
        f.stores.offline.insert(2);
        let traffic = TrafficLog::default();
        let outs = dispatch_and_reconstruct(
            &round(6),
            &f.handles,
            &f.stores,
            &BufferRegistry::new(),
            &traffic,
            Exec::Sequential,
        );
        assert_eq!(
            outs.iter()
                .filter(|o| matches!(o.patches[0].1, Err(PatchFailure::Unreachable(2))))
                .count(),
            1
        );
        let fetches = traffic
            .records()
            .iter()
            .filter(|r| r.kind == "PS_FETCH")
            .count();
        let answers = traffic
            .records()
            .iter()
            .filter(|r| r.kind == "PS_RESPONSE" || r.kind == "ERROR")
            .count();
        assert_eq!(fetches, answers);
    }

    #[test]
    fn zero_subjects_is_no_data() {
        assert!(matches!(
            train_round(Vec::new(), 6, &StubTrainer::default(), Exec::Sequential),
            Err(OrchestrationError::NoData)
        ));
    }

    #[test]
    fn round_config_json() {
        let c: RoundConfig =
            serde_json::from_str(r#"{"n_p": 6, "deadline_s": 30, "trainer": "stub"}"#).unwrap();
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.theta, 0.5);
        assert_eq!(c.heartbeat_s, 5.0);
        c.validate().unwrap();
        let ext: RoundConfig = serde_json::from_str(r#"{"trainer": "external"}"#).unwrap();
        assert!(ext.validate().is_err());
    }
}
