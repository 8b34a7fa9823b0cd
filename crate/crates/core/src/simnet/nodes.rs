//! Node state machines. Each handler maps (state, input) to outbound
//! messages and timers; the engine owns time and the network.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use sha2::{Digest, Sha256};

use super::scenario::ScriptEvent;
use super::{
    AckBody, Delivery, FlaggedResult, MsgType, NodeId, Payload, RoundState, RoundSummary,
    SimMessage, WireGrid,
};
use crate::distribution::{locate_shares, InstitutionId};
use crate::orchestrator::trainer::{EmbeddingTrainer, StubTrainer, EMBEDDING_DIM};
use crate::orchestrator::{
    drop_stragglers, FairnessLedger, NodeObservation, NodeProfile, OrchestrationError, RoundConfig,
    RoundWorkload, TrainingRound,
};
use crate::rng::DeterministicRng;
use crate::vault::{Exclusion, GcAck, GcReport, GcTarget, Vault, VaultError};
use crate::vss::{reconstruct_patch, ShareGrid, SubjectId};

pub(crate) struct Topology {
    pub vault: NodeId,
    pub orchestrator: NodeId,
    pub institutions: Vec<NodeId>,
    pub workstations: Vec<NodeProfile>,
    pub round: RoundConfig,
    pub share_bytes: usize,
    pub gc_period_ms: Option<u64>,
}

impl Topology {
    fn institution_index(&self, node: &str) -> Option<InstitutionId> {
        self.institutions
            .iter()
            .position(|n| n == node)
            .map(|i| i as InstitutionId)
    }

    fn heartbeat_ms(&self) -> u64 {
        secs_to_ms(self.round.heartbeat_s).max(1)
    }
}

fn secs_to_ms(s: f64) -> u64 {
    (s * 1000.0).round().max(0.0) as u64
}

pub(crate) struct Ctx<'a> {
    pub now_ms: u64,
    pub me: &'a str,
    /// Current slow-down factor of this node.
    pub slow: f64,
}

impl Ctx<'_> {
    fn now_s(&self) -> f64 {
        self.now_ms as f64 / 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Timer {
    Gc {
        periodic: bool,
    },
    Heartbeat {
        round_id: u64,
    },
    Compute {
        round_id: u64,
        subject_id: SubjectId,
    },
    Check {
        round_id: u64,
    },
}

pub(crate) enum Out {
    Send {
        dst: NodeId,
        payload: Payload,
        in_reply_to: Option<u64>,
        delay_ms: u64,
    },
    /// Idle timers alone do not keep the simulation running.
    Timer {
        delay_ms: u64,
        timer: Timer,
        idle: bool,
    },
}

fn send(dst: &str, payload: Payload) -> Out {
    Out::Send {
        dst: dst.to_string(),
        payload,
        in_reply_to: None,
        delay_ms: 0,
    }
}

fn reply(m: &SimMessage, payload: Payload) -> Out {
    Out::Send {
        dst: m.src.clone(),
        payload,
        in_reply_to: Some(m.msg_id),
        delay_ms: 0,
    }
}

fn error(reason: &str, round_id: Option<u64>) -> Payload {
    Payload::Error {
        reason: reason.into(),
        failed_type: None,
        round_id,
        subject_id: None,
        patch_index: None,
    }
}

pub(crate) enum Node {
    Vault(VaultNode),
    Institution(InstitutionNode),
    Workstation(WorkstationNode),
    Orchestrator(OrchestratorNode),
    Client,
}

impl Node {
    pub fn on_message(&mut self, ctx: &Ctx, m: &SimMessage) -> Vec<Out> {
        match self {
            Node::Vault(n) => n.on_message(ctx, m),
            Node::Institution(n) => n.on_message(m),
            Node::Workstation(n) => n.on_message(ctx, m),
            Node::Orchestrator(n) => n.on_message(ctx, m),
            Node::Client => Vec::new(),
        }
    }

    pub fn on_timer(&mut self, ctx: &Ctx, timer: Timer) -> Vec<Out> {
        match self {
            Node::Vault(n) => n.on_timer(timer),
            Node::Workstation(n) => n.on_timer(ctx, timer),
            Node::Orchestrator(n) => n.on_timer(ctx, timer),
            _ => Vec::new(),
        }
    }

    pub fn on_script(&mut self, topo: &Topology, event: &ScriptEvent) -> Vec<Out> {
        match (self, event) {
            (
                Node::Client,
                ScriptEvent::Train {
                    requester,
                    subjects,
                    ..
                },
            ) => vec![send(
                &topo.orchestrator,
                Payload::TrainRequest {
                    requester: requester.clone(),
                    subjects: subjects.iter().map(|s| s.0).collect(),
                },
            )],
            (Node::Client, ScriptEvent::Rtbf { subject, .. }) => {
                vec![send(
                    &topo.vault,
                    Payload::RtbfRequest {
                        subject_id: subject.0,
                    },
                )]
            }
            (Node::Vault(n), ScriptEvent::Gc) => n.start_gc(),
            _ => Vec::new(),
        }
    }

    /// Share bytes this node holds, per subject.
    pub fn held_bytes(&self) -> BTreeMap<SubjectId, usize> {
        let mut out = BTreeMap::new();
        match self {
            Node::Vault(n) => {
                for r in n.vault.records() {
                    if n.vault.holds_share(r.subject_id) {
                        out.insert(r.subject_id, n.topo.share_bytes);
                    }
                }
            }
            Node::Institution(n) => {
                for (s, grids) in &n.holdings {
                    let bytes: usize = grids.iter().map(|g| g.bytes().len()).sum();
                    if bytes > 0 {
                        out.insert(*s, bytes);
                    }
                }
            }
            Node::Workstation(n) => {
                for ((_, s), job) in &n.jobs {
                    let bytes = job
                        .auth
                        .iter()
                        .chain(&job.parts)
                        .map(|g| g.bytes().len())
                        .sum::<usize>();
                    if bytes > 0 {
                        *out.entry(*s).or_default() += bytes;
                    }
                }
            }
            _ => {}
        }
        out
    }
}

struct GcPass {
    targets: BTreeMap<InstitutionId, Vec<SubjectId>>,
    scans: BTreeSet<InstitutionId>,
    deletes: BTreeSet<(InstitutionId, SubjectId)>,
    acks: Vec<GcAck>,
    queued: Vec<GcTarget>,
}

pub(crate) struct VaultNode {
    pub vault: Vault,
    topo: Arc<Topology>,
    rounds: BTreeMap<u64, NodeId>,
    gc: Option<GcPass>,
    pub reports: Vec<GcReport>,
}

impl VaultNode {
    pub fn new(vault: Vault, topo: Arc<Topology>) -> Self {
        VaultNode {
            vault,
            topo,
            rounds: BTreeMap::new(),
            gc: None,
            reports: Vec::new(),
        }
    }

    pub fn gc_timer(&self) -> Option<Out> {
        self.topo.gc_period_ms.map(|delay_ms| Out::Timer {
            delay_ms,
            timer: Timer::Gc { periodic: true },
            idle: self.vault.gc_plan().is_empty(),
        })
    }

    fn on_timer(&mut self, timer: Timer) -> Vec<Out> {
        let Timer::Gc { periodic } = timer else {
            return Vec::new();
        };
        let mut out = self.start_gc();
        if periodic {
            out.extend(self.gc_timer());
        }
        out
    }

    fn start_gc(&mut self) -> Vec<Out> {
        if self.gc.is_some() {
            return Vec::new();
        }
        let plan = self.vault.gc_plan();
        if plan.is_empty() {
            return Vec::new();
        }
        let mut pass = GcPass {
            targets: BTreeMap::new(),
            scans: BTreeSet::new(),
            deletes: BTreeSet::new(),
            acks: Vec::new(),
            queued: Vec::new(),
        };
        for t in plan {
            pass.targets
                .entry(t.institution)
                .or_default()
                .push(t.subject_id);
        }
        let mut out = Vec::new();
        for (&inst, subjects) in &pass.targets {
            match self.topo.institutions.get(inst as usize) {
                Some(node) => {
                    pass.scans.insert(inst);
                    out.push(send(
                        node,
                        Payload::GcScan {
                            subjects: subjects.clone(),
                        },
                    ));
                }
                None => pass
                    .queued
                    .extend(subjects.iter().map(|&subject_id| GcTarget {
                        subject_id,
                        institution: inst,
                    })),
            }
        }
        self.gc = Some(pass);
        out.extend(self.finish_gc());
        out
    }

    fn finish_gc(&mut self) -> Vec<Out> {
        if self
            .gc
            .as_ref()
            .is_some_and(|p| p.scans.is_empty() && p.deletes.is_empty())
        {
            let mut pass = self.gc.take().expect("pass in progress");
            pass.acks.sort_by_key(|a| (a.institution, a.subject_id));
            pass.queued.sort_by_key(|q| (q.institution, q.subject_id));
            match self.vault.record_gc_pass(pass.acks, pass.queued) {
                Ok(report) => self.reports.push(report),
                Err(e) => log::error!("gc pass not recorded: {e}"),
            }
        }
        Vec::new()
    }

    fn on_message(&mut self, ctx: &Ctx, m: &SimMessage) -> Vec<Out> {
        let mut out = Vec::new();
        match &m.payload {
            Payload::AsValidate {
                round_id,
                requester,
                subjects,
                assignment,
            } => {
                self.rounds.insert(*round_id, m.src.clone());
                let round_id = *round_id;
                let ack = |authorized, excluded| {
                    Payload::Ack(AckBody::Validated {
                        round_id,
                        assignment: assignment.clone(),
                        authorized,
                        excluded,
                    })
                };
                match self.vault.validate_training_request(requester, subjects) {
                    Ok(outcome) => {
                        for h in &outcome.authorized {
                            let share = WireGrid::encode(&h.grid);
                            for (patch_index, ws) in assignment {
                                out.push(send(
                                    ws,
                                    Payload::AsDispatch {
                                        round_id,
                                        subject_id: h.subject_id,
                                        patch_index: *patch_index,
                                        placement: h.placement.clone(),
                                        share: share.clone(),
                                    },
                                ));
                            }
                        }
                        out.push(reply(m, ack(outcome.authorized_ids(), outcome.excluded)));
                    }
                    Err(VaultError::NoData { excluded }) => {
                        out.push(reply(m, ack(Vec::new(), excluded)))
                    }
                    Err(e) => out.push(reply(
                        m,
                        Payload::Error {
                            reason: e.to_string(),
                            failed_type: Some(MsgType::AsValidate),
                            round_id: Some(round_id),
                            subject_id: None,
                            patch_index: None,
                        },
                    )),
                }
            }
            Payload::RtbfRequest { subject_id } => match self.vault.rtbf_revoke(*subject_id) {
                Ok(c) => out.push(reply(
                    m,
                    Payload::Ack(AckBody::Revoked {
                        subject_id: *subject_id,
                        already_revoked: c.already_revoked,
                    }),
                )),
                Err(e) => out.push(reply(m, error(&e.to_string(), None))),
            },
            Payload::Ack(AckBody::Held { subjects }) => {
                let inst = self.topo.institution_index(&m.src);
                if let (Some(inst), Some(pass)) = (inst, self.gc.as_mut()) {
                    if pass.scans.remove(&inst) {
                        for &s in pass.targets.get(&inst).into_iter().flatten() {
                            if subjects.contains(&s) {
                                pass.deletes.insert((inst, s));
                                out.push(send(&m.src, Payload::GcDelete { subject_id: s }));
                            } else {
                                pass.acks.push(GcAck {
                                    subject_id: s,
                                    institution: inst,
                                    grids_deleted: 0,
                                });
                            }
                        }
                    }
                }
                out.extend(self.finish_gc());
            }
            Payload::Ack(AckBody::Deleted { subject_id, grids }) => {
                let inst = self.topo.institution_index(&m.src);
                if let (Some(inst), Some(pass)) = (inst, self.gc.as_mut()) {
                    if pass.deletes.remove(&(inst, *subject_id)) {
                        pass.acks.push(GcAck {
                            subject_id: *subject_id,
                            institution: inst,
                            grids_deleted: *grids,
                        });
                    }
                }
                out.extend(self.finish_gc());
            }
            Payload::Error {
                failed_type: Some(failed),
                round_id,
                subject_id,
                patch_index,
                ..
            } if m.delivery == Delivery::Synthetic => match failed {
                MsgType::AsDispatch => {
                    if let Some(orch) = round_id.and_then(|r| self.rounds.get(&r)) {
                        out.push(send(
                            orch,
                            Payload::Error {
                                reason: "dispatch-timeout".into(),
                                failed_type: Some(MsgType::AsDispatch),
                                round_id: *round_id,
                                subject_id: *subject_id,
                                patch_index: *patch_index,
                            },
                        ));
                    }
                }
                MsgType::GcScan | MsgType::GcDelete => {
                    let inst = self.topo.institution_index(&m.src);
                    if let (Some(inst), Some(pass)) = (inst, self.gc.as_mut()) {
                        if *failed == MsgType::GcScan && pass.scans.remove(&inst) {
                            for &s in pass.targets.get(&inst).into_iter().flatten() {
                                pass.queued.push(GcTarget {
                                    subject_id: s,
                                    institution: inst,
                                });
                            }
                        }
                        if let Some(s) = subject_id {
                            if *failed == MsgType::GcDelete && pass.deletes.remove(&(inst, *s)) {
                                pass.queued.push(GcTarget {
                                    subject_id: *s,
                                    institution: inst,
                                });
                            }
                        }
                    }
                    out.extend(self.finish_gc());
                }
                _ => {}
            },
            _ => log::debug!("{} ignores {:?} at {}", ctx.me, m.msg_type, ctx.now_ms),
        }
        out
    }
}

pub(crate) struct InstitutionNode {
    pub holdings: BTreeMap<SubjectId, Vec<ShareGrid>>,
}

impl InstitutionNode {
    fn on_message(&mut self, m: &SimMessage) -> Vec<Out> {
        match &m.payload {
            Payload::PsFetch {
                round_id,
                subject_id,
                patch_index,
            } => {
                let grids = self
                    .holdings
                    .get(subject_id)
                    .into_iter()
                    .flatten()
                    .filter(|g| g.patch_index() == *patch_index)
                    .map(WireGrid::encode)
                    .collect();
                vec![reply(
                    m,
                    Payload::PsResponse {
                        round_id: *round_id,
                        subject_id: *subject_id,
                        patch_index: *patch_index,
                        grids,
                    },
                )]
            }
            Payload::GcScan { subjects } => {
                let held = subjects
                    .iter()
                    .copied()
                    .filter(|s| self.holdings.contains_key(s))
                    .collect();
                vec![reply(m, Payload::Ack(AckBody::Held { subjects: held }))]
            }
            Payload::GcDelete { subject_id } => {
                let grids = self.holdings.remove(subject_id).map_or(0, |g| g.len());
                vec![reply(
                    m,
                    Payload::Ack(AckBody::Deleted {
                        subject_id: *subject_id,
                        grids,
                    }),
                )]
            }
            _ => Vec::new(),
        }
    }
}

struct Job {
    auth: Option<ShareGrid>,
    parts: Vec<ShareGrid>,
    pending: BTreeSet<InstitutionId>,
    failure: Option<String>,
    scheduled: bool,
}

struct Task {
    orchestrator: NodeId,
    patch_index: u8,
    remaining: BTreeSet<SubjectId>,
    started_ms: u64,
}

pub(crate) struct WorkstationNode {
    topo: Arc<Topology>,
    /// Milliseconds of compute per subject.
    compute_ms: f64,
    trainer: StubTrainer,
    jobs: BTreeMap<(u64, SubjectId), Job>,
    tasks: BTreeMap<u64, Task>,
    busy_until: u64,
}

impl WorkstationNode {
    pub fn new(topo: Arc<Topology>, compute_rate: f64) -> Self {
        WorkstationNode {
            topo,
            compute_ms: 1000.0 / compute_rate,
            trainer: StubTrainer::default(),
            jobs: BTreeMap::new(),
            tasks: BTreeMap::new(),
            busy_until: 0,
        }
    }

    /// Tasks are abandoned after twice the round deadline.
    fn lease_ms(&self) -> u64 {
        secs_to_ms(2.0 * self.topo.round.deadline_s)
    }

    fn purge(&mut self, round_id: u64) {
        self.jobs.retain(|(r, _), _| *r != round_id);
        self.tasks.remove(&round_id);
    }

    fn on_message(&mut self, ctx: &Ctx, m: &SimMessage) -> Vec<Out> {
        let mut out = Vec::new();
        match &m.payload {
            Payload::AsDispatch {
                round_id,
                subject_id,
                patch_index,
                placement,
                share,
            } => {
                let key = (*round_id, *subject_id);
                if self.jobs.contains_key(&key) {
                    return out;
                }
                let mut job = Job {
                    auth: share.decode(),
                    parts: Vec::new(),
                    pending: BTreeSet::new(),
                    failure: None,
                    scheduled: false,
                };
                if job.auth.is_none() {
                    job.failure = Some("malformed authentication share".into());
                }
                match placement.as_ref().map(|p| locate_shares(p, *patch_index)) {
                    Some(Ok(insts)) if !insts.is_empty() => {
                        for inst in insts {
                            match self.topo.institutions.get(inst as usize) {
                                Some(node) if job.pending.insert(inst) => out.push(send(
                                    node,
                                    Payload::PsFetch {
                                        round_id: *round_id,
                                        subject_id: *subject_id,
                                        patch_index: *patch_index,
                                    },
                                )),
                                Some(_) => {}
                                None => job.failure = Some(format!("unknown institution {inst}")),
                            }
                        }
                    }
                    _ => job.failure = Some(format!("unavailable: patch {patch_index} not stored")),
                }
                self.jobs.insert(key, job);
                out.extend(self.try_schedule(ctx, key));
            }
            Payload::PsResponse {
                round_id,
                subject_id,
                grids,
                ..
            } => {
                let key = (*round_id, *subject_id);
                let inst = self.topo.institution_index(&m.src);
                if let (Some(job), Some(inst)) = (self.jobs.get_mut(&key), inst) {
                    if job.pending.remove(&inst) {
                        job.parts.extend(grids.iter().filter_map(WireGrid::decode));
                    }
                }
                out.extend(self.try_schedule(ctx, key));
            }
            Payload::TrainPatch {
                round_id,
                patch_index,
                subjects,
                ..
            } => {
                let fresh = !self.tasks.contains_key(round_id);
                self.tasks.insert(
                    *round_id,
                    Task {
                        orchestrator: m.src.clone(),
                        patch_index: *patch_index,
                        remaining: subjects.iter().copied().collect(),
                        started_ms: ctx.now_ms,
                    },
                );
                for s in subjects {
                    out.extend(self.try_schedule(ctx, (*round_id, *s)));
                }
                if fresh {
                    out.push(Out::Timer {
                        delay_ms: self.topo.heartbeat_ms(),
                        timer: Timer::Heartbeat {
                            round_id: *round_id,
                        },
                        idle: false,
                    });
                }
            }
            Payload::Error {
                failed_type: Some(MsgType::PsFetch),
                round_id: Some(r),
                subject_id: Some(s),
                ..
            } => {
                let inst = self.topo.institution_index(&m.src);
                if let (Some(job), Some(inst)) = (self.jobs.get_mut(&(*r, *s)), inst) {
                    if job.pending.remove(&inst) {
                        job.failure = Some(format!("unreachable: {}", m.src));
                    }
                }
                out.extend(self.try_schedule(ctx, (*r, *s)));
            }
            Payload::Error {
                round_id: Some(r),
                failed_type: None,
                ..
            } => self.purge(*r),
            _ => {}
        }
        out
    }

    fn try_schedule(&mut self, ctx: &Ctx, key: (u64, SubjectId)) -> Vec<Out> {
        let (round_id, subject_id) = key;
        let Some(task) = self.tasks.get_mut(&round_id) else {
            return Vec::new();
        };
        if !task.remaining.contains(&subject_id) {
            return Vec::new();
        }
        let Some(job) = self.jobs.get_mut(&key) else {
            return Vec::new();
        };
        if job.scheduled || !job.pending.is_empty() {
            return Vec::new();
        }
        job.scheduled = true;
        if let Some(reason) = job.failure.clone() {
            self.jobs.remove(&key);
            task.remaining.remove(&subject_id);
            let result = Payload::TrainResult {
                round_id,
                subject_id,
                patch_index: task.patch_index,
                vector: None,
                error: Some(reason),
            };
            return vec![send(&task.orchestrator.clone(), result)];
        }
        let start = self.busy_until.max(ctx.now_ms);
        let done = start + (self.compute_ms * ctx.slow).round() as u64;
        self.busy_until = done;
        vec![Out::Timer {
            delay_ms: done - ctx.now_ms,
            timer: Timer::Compute {
                round_id,
                subject_id,
            },
            idle: false,
        }]
    }

    fn on_timer(&mut self, ctx: &Ctx, timer: Timer) -> Vec<Out> {
        match timer {
            Timer::Compute {
                round_id,
                subject_id,
            } => {
                let Some(job) = self.jobs.remove(&(round_id, subject_id)) else {
                    return Vec::new();
                };
                let Some(task) = self.tasks.get_mut(&round_id) else {
                    return Vec::new();
                };
                task.remaining.remove(&subject_id);
                let auth = job.auth.as_ref().expect("scheduled jobs carry a share");
                let (vector, error) = match reconstruct_patch(auth, &job.parts) {
                    Ok(patch) => match self.trainer.extract(&patch) {
                        Ok(v) => (Some(encode_vector(&v)), None),
                        Err(e) => (None, Some(format!("trainer: {e}"))),
                    },
                    Err(e) => (None, Some(format!("incomplete: {e}"))),
                };
                let result = Payload::TrainResult {
                    round_id,
                    subject_id,
                    patch_index: task.patch_index,
                    vector,
                    error,
                };
                vec![send(&task.orchestrator, result)]
            }
            Timer::Heartbeat { round_id } => {
                let lease = self.lease_ms();
                let Some(task) = self.tasks.get(&round_id) else {
                    return Vec::new();
                };
                if task.remaining.is_empty() {
                    self.tasks.remove(&round_id);
                    return Vec::new();
                }
                if ctx.now_ms.saturating_sub(task.started_ms) > lease {
                    self.purge(round_id);
                    return Vec::new();
                }
                vec![
                    send(
                        &task.orchestrator,
                        Payload::Ack(AckBody::Heartbeat { round_id }),
                    ),
                    Out::Timer {
                        delay_ms: self.topo.heartbeat_ms(),
                        timer: Timer::Heartbeat { round_id },
                        idle: false,
                    },
                ]
            }
            _ => Vec::new(),
        }
    }
}

pub(crate) fn encode_vector(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_vector(s: &str) -> Option<Vec<f32>> {
    let bytes = B64.decode(s).ok()?;
    if bytes.len() != EMBEDDING_DIM * 4 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

struct RoundRun {
    round: TrainingRound,
    requester: String,
    client: NodeId,
    started_ms: u64,
    validated: bool,
    authorized: Vec<SubjectId>,
    excluded: Vec<Exclusion>,
    dispatched: BTreeMap<NodeId, u64>,
    last_heartbeat: BTreeMap<NodeId, u64>,
    results: BTreeMap<u8, BTreeMap<SubjectId, Result<Vec<f32>, String>>>,
}

impl RoundRun {
    fn patch_done(&self, patch_index: u8) -> bool {
        self.results
            .get(&patch_index)
            .is_some_and(|r| self.authorized.iter().all(|s| r.contains_key(s)))
    }
}

pub(crate) struct OrchestratorNode {
    topo: Arc<Topology>,
    ledger: FairnessLedger,
    rng: DeterministicRng,
    trainer: StubTrainer,
    next_round: u64,
    active: BTreeMap<u64, RoundRun>,
    pub summaries: Vec<RoundSummary>,
}

impl OrchestratorNode {
    pub fn new(topo: Arc<Topology>, rng: DeterministicRng) -> Self {
        OrchestratorNode {
            topo,
            ledger: FairnessLedger::default(),
            rng,
            trainer: StubTrainer::default(),
            next_round: 1,
            active: BTreeMap::new(),
            summaries: Vec::new(),
        }
    }

    fn summary(
        &self,
        run: &RoundRun,
        ctx: &Ctx,
        status: RoundState,
        reason: Option<String>,
    ) -> RoundSummary {
        RoundSummary {
            round_id: run.round.round_id,
            requester: run.requester.clone(),
            status,
            reason,
            assignment: assignment_pairs(&run.round),
            authorized: run.authorized.clone(),
            excluded: run.excluded.clone(),
            dropped: run.round.dropped.clone(),
            flagged: Vec::new(),
            embedding_digest: None,
            started_at: run.started_ms as f64 / 1000.0,
            finished_at: ctx.now_s(),
        }
    }

    fn close(
        &mut self,
        ctx: &Ctx,
        round_id: u64,
        status: RoundState,
        reason: Option<String>,
    ) -> Vec<Out> {
        let Some(run) = self.active.remove(&round_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut summary = self.summary(&run, ctx, status.clone(), reason);
        match status {
            RoundState::Completed => {
                let n_p = self.topo.round.n_p;
                let mut digest = Sha256::new();
                for s in &run.authorized {
                    let mut features = Vec::with_capacity(n_p);
                    for p in 0..n_p as u8 {
                        match run.results.get(&p).and_then(|r| r.get(s)) {
                            Some(Ok(v)) => features.push(v.clone()),
                            other => {
                                let reason = match other {
                                    Some(Err(e)) => e.clone(),
                                    _ => "missing".into(),
                                };
                                summary.flagged.push(FlaggedResult {
                                    subject_id: *s,
                                    patch_index: p,
                                    reason,
                                });
                                features.push(vec![0.0; EMBEDDING_DIM]);
                            }
                        }
                    }
                    match self.trainer.aggregate(&features) {
                        Ok(e) => e.iter().for_each(|x| digest.update(x.to_le_bytes())),
                        Err(e) => log::error!("aggregation failed for {s}: {e}"),
                    }
                }
                summary.embedding_digest = Some(hex::encode(digest.finalize()));
            }
            RoundState::Aborted => {
                for ws in run.dispatched.keys() {
                    out.push(send(ws, error("round-aborted", Some(round_id))));
                }
            }
            _ => {}
        }
        let status = serde_json::to_value(&summary.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        out.push(send(
            &run.client,
            Payload::Ack(AckBody::RoundComplete { round_id, status }),
        ));
        self.summaries.push(summary);
        out
    }

    fn train_patches(
        &mut self,
        ctx: &Ctx,
        round_id: u64,
        assignment: &[(u8, NodeId)],
        authorized: &[SubjectId],
    ) -> Vec<Out> {
        let Some(run) = self.active.get_mut(&round_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (p, ws) in assignment {
            let Some(a) = run
                .round
                .assignment
                .iter()
                .find(|a| a.patch_index == *p && &a.node_id == ws)
            else {
                continue;
            };
            let expected_s = a.estimate_s;
            let results = run.results.entry(*p).or_default();
            let mut subjects = Vec::new();
            for s in &run.authorized {
                if authorized.contains(s) {
                    subjects.push(*s);
                } else {
                    results.insert(*s, Err("revoked during round".into()));
                }
            }
            if subjects.is_empty() {
                continue;
            }
            run.dispatched.insert(ws.clone(), ctx.now_ms);
            run.last_heartbeat.insert(ws.clone(), ctx.now_ms);
            out.push(send(
                ws,
                Payload::TrainPatch {
                    round_id,
                    patch_index: *p,
                    subjects,
                    expected_s,
                },
            ));
        }
        out.extend(self.maybe_complete(ctx, round_id));
        out
    }

    fn maybe_complete(&mut self, ctx: &Ctx, round_id: u64) -> Vec<Out> {
        let n_p = self.topo.round.n_p as u8;
        let done = self
            .active
            .get(&round_id)
            .is_some_and(|r| r.validated && (0..n_p).all(|p| r.patch_done(p)));
        if done {
            self.close(ctx, round_id, RoundState::Completed, None)
        } else {
            Vec::new()
        }
    }

    fn on_message(&mut self, ctx: &Ctx, m: &SimMessage) -> Vec<Out> {
        match &m.payload {
            Payload::TrainRequest {
                requester,
                subjects,
            } => {
                let round_id = self.next_round;
                self.next_round += 1;
                let workload = RoundWorkload::for_subjects(subjects.len(), self.topo.share_bytes);
                let cfg = &self.topo.round;
                let planned = TrainingRound::plan(
                    round_id,
                    subjects.clone(),
                    &self.topo.workstations,
                    cfg.n_p,
                    workload,
                    cfg.deadline_s,
                    &self.ledger,
                );
                match planned {
                    Ok(round) => {
                        let assignment = assignment_pairs(&round);
                        let run = RoundRun {
                            round,
                            requester: requester.clone(),
                            client: m.src.clone(),
                            started_ms: ctx.now_ms,
                            validated: false,
                            authorized: Vec::new(),
                            excluded: Vec::new(),
                            dispatched: BTreeMap::new(),
                            last_heartbeat: BTreeMap::new(),
                            results: BTreeMap::new(),
                        };
                        self.active.insert(round_id, run);
                        vec![send(
                            &self.topo.vault,
                            Payload::AsValidate {
                                round_id,
                                requester: requester.clone(),
                                subjects: subjects.clone(),
                                assignment,
                            },
                        )]
                    }
                    Err(e) => {
                        self.summaries.push(RoundSummary {
                            round_id,
                            requester: requester.clone(),
                            status: RoundState::Rejected,
                            reason: Some(e.to_string()),
                            assignment: Vec::new(),
                            authorized: Vec::new(),
                            excluded: Vec::new(),
                            dropped: Vec::new(),
                            flagged: Vec::new(),
                            embedding_digest: None,
                            started_at: ctx.now_s(),
                            finished_at: ctx.now_s(),
                        });
                        vec![reply(
                            m,
                            Payload::Error {
                                reason: e.to_string(),
                                failed_type: Some(MsgType::TrainRequest),
                                round_id: Some(round_id),
                                subject_id: None,
                                patch_index: None,
                            },
                        )]
                    }
                }
            }
            Payload::Ack(AckBody::Validated {
                round_id,
                assignment,
                authorized,
                excluded,
            }) => {
                let Some(run) = self.active.get_mut(round_id) else {
                    return Vec::new();
                };
                let mut out = Vec::new();
                if !run.validated {
                    run.validated = true;
                    run.authorized = authorized.clone();
                    run.excluded = excluded.clone();
                    if authorized.is_empty() {
                        return self.close(
                            ctx,
                            *round_id,
                            RoundState::NoData,
                            Some("no authorized subjects".into()),
                        );
                    }
                    out.push(Out::Timer {
                        delay_ms: self.topo.heartbeat_ms(),
                        timer: Timer::Check {
                            round_id: *round_id,
                        },
                        idle: false,
                    });
                }
                out.extend(self.train_patches(ctx, *round_id, assignment, authorized));
                out
            }
            Payload::Ack(AckBody::Heartbeat { round_id }) => {
                if let Some(run) = self.active.get_mut(round_id) {
                    if run.dispatched.contains_key(&m.src) {
                        run.last_heartbeat.insert(m.src.clone(), ctx.now_ms);
                    }
                }
                Vec::new()
            }
            Payload::TrainResult {
                round_id,
                subject_id,
                patch_index,
                vector,
                error,
            } => {
                let Some(run) = self.active.get_mut(round_id) else {
                    return Vec::new();
                };
                if run.round.node_for(*patch_index) != Some(m.src.as_str())
                    || !run.authorized.contains(subject_id)
                {
                    return Vec::new();
                }
                let result = match (vector.as_deref().map(decode_vector), error) {
                    (Some(Some(v)), _) => Ok(v),
                    (Some(None), _) => Err("malformed vector".into()),
                    (None, Some(e)) => Err(e.clone()),
                    (None, None) => Err("empty result".into()),
                };
                run.results
                    .entry(*patch_index)
                    .or_default()
                    .insert(*subject_id, result);
                run.last_heartbeat.insert(m.src.clone(), ctx.now_ms);
                self.maybe_complete(ctx, *round_id)
            }
            Payload::Error {
                reason,
                failed_type,
                round_id: Some(round_id),
                ..
            } => {
                if !self.active.contains_key(round_id) {
                    return Vec::new();
                }
                match failed_type {
                    Some(MsgType::AsDispatch) => self.close(
                        ctx,
                        *round_id,
                        RoundState::Aborted,
                        Some("dispatch-timeout".into()),
                    ),
                    Some(MsgType::AsValidate) if m.delivery == Delivery::Synthetic => self.close(
                        ctx,
                        *round_id,
                        RoundState::Aborted,
                        Some("validate-timeout".into()),
                    ),
                    Some(MsgType::AsValidate) => {
                        self.close(ctx, *round_id, RoundState::Rejected, Some(reason.clone()))
                    }
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        }
    }

    fn on_timer(&mut self, ctx: &Ctx, timer: Timer) -> Vec<Out> {
        let Timer::Check { round_id } = timer else {
            return Vec::new();
        };
        let Some(run) = self.active.get_mut(&round_id) else {
            return Vec::new();
        };
        let mut observed = BTreeMap::new();
        for a in &run.round.assignment {
            if run.patch_done(a.patch_index) {
                continue;
            }
            let Some(&sent) = run.dispatched.get(&a.node_id) else {
                continue;
            };
            observed.insert(
                a.node_id.clone(),
                NodeObservation {
                    elapsed_s: (ctx.now_ms - sent) as f64 / 1000.0,
                    expected_s: a.estimate_s,
                    last_heartbeat_s: run.last_heartbeat.get(&a.node_id).copied().unwrap_or(sent)
                        as f64
                        / 1000.0,
                },
            );
        }
        let policy = self.topo.round.policy();
        let outcome = drop_stragglers(
            &mut run.round,
            &observed,
            ctx.now_s(),
            &policy,
            &mut self.ledger,
            &mut self.rng,
        );
        let mut out = Vec::new();
        match outcome {
            Ok(removed) => {
                for d in &removed {
                    run.dispatched.remove(&d.node_id);
                    run.results.remove(&d.patch_index);
                    out.push(send(&d.node_id, error("dropped", Some(round_id))));
                    if let Some(replacement) = run.round.node_for(d.patch_index) {
                        out.push(send(
                            &self.topo.vault,
                            Payload::AsValidate {
                                round_id,
                                requester: run.requester.clone(),
                                subjects: run.authorized.clone(),
                                assignment: vec![(d.patch_index, replacement.to_string())],
                            },
                        ));
                    }
                }
                out.push(Out::Timer {
                    delay_ms: self.topo.heartbeat_ms(),
                    timer: Timer::Check { round_id },
                    idle: false,
                });
            }
            Err(OrchestrationError::RoundAborted { reason, .. }) => {
                let dropped: Vec<NodeId> = run
                    .round
                    .dropped
                    .iter()
                    .map(|d| d.node_id.clone())
                    .collect();
                for ws in dropped {
                    if run.dispatched.remove(&ws).is_some() {
                        out.push(send(&ws, error("dropped", Some(round_id))));
                    }
                }
                out.extend(self.close(ctx, round_id, RoundState::Aborted, Some(reason)));
            }
            Err(e) => {
                out.extend(self.close(ctx, round_id, RoundState::Aborted, Some(e.to_string())))
            }
        }
        out
    }
}

fn assignment_pairs(round: &TrainingRound) -> Vec<(u8, NodeId)> {
    round
        .assignment
        .iter()
        .map(|a| (a.patch_index, a.node_id.clone()))
        .collect()
}
