use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::nodes::{
    Ctx, InstitutionNode, Node, OrchestratorNode, Out, Timer, Topology, VaultNode, WorkstationNode,
};
use super::scenario::{to_ms, ScriptEvent, SimRole};
use super::{
    trace_hash, Delivery, Fault, FaultWindow, MsgType, NodeId, Payload, RoundSummary, Scenario,
    SimError, SimMessage,
};
use crate::distribution::plan_distribution;
use crate::orchestrator::{NodeProfile, NodeRole};
use crate::rng::{seeded, DeterministicRng};
use crate::vault::{GcReport, Vault};
use crate::vss::{share_patches, GridShape, PatchImage, PatchKind, SubjectId};

/// Horizon added after the last scripted instant when none is given.
const DEFAULT_TAIL_S: f64 = 86_400.0;

// Independent streams of the scenario seed.
const STREAM_SETUP: u64 = 1;
const STREAM_FAULTS: u64 = 2;
const STREAM_ORCHESTRATOR: u64 = 3;

/// A validated scenario bound to a seed.
#[derive(Clone, Debug)]
pub struct Simulation {
    scenario: Scenario,
    seed: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let seed = scenario.seed.unwrap_or(0);
        Ok(Simulation { scenario, seed })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn run(&self) -> Result<SimOutcome, SimError> {
        let mut engine = Engine::new(&self.scenario, self.seed)?;
        engine.run();
        Ok(engine.finish(self.seed))
    }
}

/// Share bytes still held for one subject after a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectScan {
    pub subject_id: SubjectId,
    pub vault_bytes: usize,
    pub institution_bytes: BTreeMap<NodeId, usize>,
    pub workstation_bytes: BTreeMap<NodeId, usize>,
}

impl SubjectScan {
    pub fn total_bytes(&self) -> usize {
        self.vault_bytes
            + self.institution_bytes.values().sum::<usize>()
            + self.workstation_bytes.values().sum::<usize>()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimOutcome {
    pub seed: u64,
    pub trace: Vec<SimMessage>,
    pub trace_hash: String,
    pub rounds: Vec<RoundSummary>,
    pub gc_reports: Vec<GcReport>,
    /// Share bytes held at the end, per node and subject.
    pub holdings: BTreeMap<NodeId, BTreeMap<SubjectId, usize>>,
    pub roles: BTreeMap<NodeId, SimRole>,
    pub end_time_s: f64,
    /// Patches the synthetic subjects were built from.
    #[serde(skip)]
    pub originals: BTreeMap<SubjectId, Vec<PatchImage>>,
}

impl SimOutcome {
    pub fn scan(&self, subject: SubjectId) -> SubjectScan {
        let mut scan = SubjectScan {
            subject_id: subject,
            vault_bytes: 0,
            institution_bytes: BTreeMap::new(),
            workstation_bytes: BTreeMap::new(),
        };
        for (node, held) in &self.holdings {
            let Some(&bytes) = held.get(&subject) else {
                continue;
            };
            match self.roles.get(node) {
                Some(SimRole::Vault) => scan.vault_bytes += bytes,
                Some(SimRole::Institution) => {
                    scan.institution_bytes.insert(node.clone(), bytes);
                }
                Some(SimRole::Workstation) => {
                    scan.workstation_bytes.insert(node.clone(), bytes);
                }
                _ => {}
            }
        }
        scan
    }

    pub fn trace_jsonl(&self) -> String {
        super::trace_jsonl(&self.trace)
    }

    /// Messages whose endpoints are both workstations.
    pub fn workstation_pairs(&self) -> Vec<(NodeId, NodeId)> {
        let ws = |n: &str| self.roles.get(n) == Some(&SimRole::Workstation);
        self.trace
            .iter()
            .filter(|m| ws(&m.src) && ws(&m.dst))
            .map(|m| (m.src.clone(), m.dst.clone()))
            .collect()
    }
}

enum Event {
    Deliver(SimMessage),
    Timer { node: NodeId, timer: Timer },
    Script(usize),
}

struct Queued {
    event: Event,
    idle: bool,
}

struct Engine<'s> {
    sc: &'s Scenario,
    topo: Arc<Topology>,
    now_ms: u64,
    clock: Arc<AtomicU64>,
    queue: BTreeMap<(u64, u64), Queued>,
    seq: u64,
    busy: usize,
    next_msg_id: u64,
    horizon_ms: u64,
    trace: Vec<SimMessage>,
    faults: Vec<FaultWindow>,
    fault_rng: DeterministicRng,
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<(NodeId, NodeId), u64>,
    originals: BTreeMap<SubjectId, Vec<PatchImage>>,
}

fn rng_stream(seed: u64, stream: u64) -> DeterministicRng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

fn link_key(a: &str, b: &str) -> (NodeId, NodeId) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl<'s> Engine<'s> {
    fn new(sc: &'s Scenario, seed: u64) -> Result<Self, SimError> {
        let workstations: Vec<NodeProfile> = sc
            .nodes
            .iter()
            .filter(|n| n.role == SimRole::Workstation)
            .map(|n| {
                let p = n.profile.as_ref().expect("validated workstation profile");
                NodeProfile {
                    node_id: n.id.clone(),
                    compute_rate: p.compute_rate,
                    bandwidth: p.bandwidth,
                    energy_budget: p.energy_budget,
                    availability_p: p.availability_p,
                    role: NodeRole::Workstation,
                }
            })
            .collect();
        let size = sc.patch_size;
        let shape = GridShape::new(size, size, 3).map_err(|e| SimError::Config(e.to_string()))?;
        let topo = Arc::new(Topology {
            vault: sc.ids_with(SimRole::Vault).remove(0),
            orchestrator: sc.ids_with(SimRole::Orchestrator).remove(0),
            institutions: sc.ids_with(SimRole::Institution),
            workstations,
            round: sc.round.clone(),
            share_bytes: shape.len(),
            gc_period_ms: sc.gc_period_s.map(to_ms).map(|ms| ms.max(1)),
        });

        let clock = Arc::new(AtomicU64::new(0));
        let vault_clock = clock.clone();
        let vault = Vault::in_memory().with_clock(Arc::new(move || {
            DateTime::<Utc>::UNIX_EPOCH
                + TimeDelta::milliseconds(vault_clock.load(Ordering::Relaxed) as i64)
        }));
        let mut vault = VaultNode::new(vault, topo.clone());
        let mut institutions: Vec<InstitutionNode> = topo
            .institutions
            .iter()
            .map(|_| InstitutionNode {
                holdings: BTreeMap::new(),
            })
            .collect();

        let mut rng = rng_stream(seed, STREAM_SETUP);
        let mut originals = BTreeMap::new();
        for spec in &sc.subjects {
            let subject = spec.id.0;
            if originals.contains_key(&subject) {
                return Err(SimError::Config(format!("duplicate subject {subject}")));
            }
            let patches: Vec<PatchImage> = PatchKind::ALL
                .iter()
                .map(|&kind| {
                    let mut px = vec![0u8; shape.len()];
                    rng.fill_bytes(&mut px);
                    PatchImage::new(kind, shape, px).expect("sized to shape")
                })
                .collect();
            let (auth, private) = share_patches(subject, &patches, &mut rng)
                .map_err(|e| SimError::Config(e.to_string()))?;
            let dist = plan_distribution(&private, institutions.len(), &mut rng)
                .map_err(|e| SimError::Config(e.to_string()))?;
            let setup = |e: crate::vault::VaultError| SimError::Config(e.to_string());
            vault
                .vault
                .register_subject(subject, auth, Some(dist.plan.clone()))
                .map_err(setup)?;
            for requester in &spec.allow {
                vault
                    .vault
                    .grant_requester(subject, requester)
                    .map_err(setup)?;
            }
            for (a, grid) in dist.plan.assignments.iter().zip(dist.grids) {
                institutions[a.institution as usize]
                    .holdings
                    .entry(subject)
                    .or_default()
                    .push(grid);
            }
            originals.insert(subject, patches);
        }

        let mut nodes = BTreeMap::new();
        let mut institutions = institutions.into_iter();
        let mut vault = Some(vault);
        for n in &sc.nodes {
            let node = match n.role {
                SimRole::Vault => Node::Vault(vault.take().expect("one vault")),
                SimRole::Institution => {
                    Node::Institution(institutions.next().expect("one per institution"))
                }
                SimRole::Workstation => {
                    let rate = n
                        .profile
                        .as_ref()
                        .expect("validated workstation profile")
                        .compute_rate;
                    Node::Workstation(WorkstationNode::new(topo.clone(), rate))
                }
                SimRole::Orchestrator => Node::Orchestrator(OrchestratorNode::new(
                    topo.clone(),
                    rng_stream(seed, STREAM_ORCHESTRATOR),
                )),
                SimRole::Client => Node::Client,
            };
            nodes.insert(n.id.clone(), node);
        }

        let faults = sc.faults();
        let last_s = sc
            .script
            .iter()
            .map(|e| e.t)
            .chain(faults.iter().map(|f| f.until_s))
            .fold(0.0, f64::max);
        let horizon_ms = to_ms(sc.max_time_s.unwrap_or(last_s + DEFAULT_TAIL_S));

        let mut engine = Engine {
            sc,
            topo: topo.clone(),
            now_ms: 0,
            clock,
            queue: BTreeMap::new(),
            seq: 0,
            busy: 0,
            next_msg_id: 1,
            horizon_ms,
            trace: Vec::new(),
            faults,
            fault_rng: rng_stream(seed, STREAM_FAULTS),
            nodes,
            links: sc
                .links
                .iter()
                .map(|l| (link_key(&l.a, &l.b), l.latency_ms))
                .collect(),
            originals,
        };
        for (i, entry) in sc.script.iter().enumerate() {
            if !matches!(entry.event, ScriptEvent::Fault { .. }) {
                engine.push(to_ms(entry.t), Event::Script(i), false);
            }
        }
        if let Some(Node::Vault(v)) = engine.nodes.get(&topo.vault) {
            if let Some(timer) = v.gc_timer() {
                engine.apply(&topo.vault.clone(), vec![timer], 0);
            }
        }
        Ok(engine)
    }

    fn push(&mut self, at_ms: u64, event: Event, idle: bool) {
        self.seq += 1;
        if !idle {
            self.busy += 1;
        }
        self.queue.insert((at_ms, self.seq), Queued { event, idle });
    }

    fn latency_ms(&self, a: &str, b: &str) -> u64 {
        if let Some(&l) = self.links.get(&link_key(a, b)) {
            return l;
        }
        let own = |id: &str| self.sc.node(id).map_or(0, |n| n.latency_ms);
        own(a) + own(b)
    }

    fn window_applies(f: &FaultWindow, node: &str, peer: &str, at_ms: u64) -> bool {
        f.node == node
            && f.peer.as_deref().is_none_or(|p| p == peer)
            && to_ms(f.from_s) <= at_ms
            && at_ms < to_ms(f.until_s)
    }

    fn offline(&self, node: &str, peer: &str, at_ms: u64) -> bool {
        self.faults
            .iter()
            .any(|f| f.fault == Fault::Offline && Self::window_applies(f, node, peer, at_ms))
    }

    fn slow_factor(&self, node: &str, at_ms: u64) -> f64 {
        self.faults
            .iter()
            .filter(|f| f.node == node && to_ms(f.from_s) <= at_ms && at_ms < to_ms(f.until_s))
            .filter_map(|f| match f.fault {
                Fault::Slow { factor } => Some(factor),
                _ => None,
            })
            .fold(1.0, f64::max)
    }

    fn drop_roll(&mut self, node: &str, peer: &str, at_ms: u64) -> bool {
        let p = self
            .faults
            .iter()
            .filter(|f| Self::window_applies(f, node, peer, at_ms))
            .filter_map(|f| match f.fault {
                Fault::DropMessages { p } => Some(p),
                _ => None,
            })
            .fold(0.0, f64::max);
        p > 0.0 && self.fault_rng.random::<f64>() < p
    }

    fn send(
        &mut self,
        src: &str,
        dst: &str,
        payload: Payload,
        in_reply_to: Option<u64>,
        at_ms: u64,
    ) {
        debug_assert!(
            self.nodes.contains_key(dst),
            "handler addressed unknown node {dst}"
        );
        debug_assert_ne!(src, dst);
        let delivered = at_ms + self.latency_ms(src, dst);
        let msg = SimMessage {
            msg_id: self.next_msg_id,
            in_reply_to,
            src: src.to_string(),
            dst: dst.to_string(),
            msg_type: payload.msg_type(),
            sent_at: at_ms as f64 / 1000.0,
            delivered_at: delivered as f64 / 1000.0,
            delivery: Delivery::Delivered,
            payload,
        };
        self.next_msg_id += 1;
        self.push(delivered, Event::Deliver(msg), false);
    }

    fn apply(&mut self, from: &str, outs: Vec<Out>, service_ms: u64) {
        for o in outs {
            match o {
                Out::Send {
                    dst,
                    payload,
                    in_reply_to,
                    delay_ms,
                } => self.send(
                    from,
                    &dst,
                    payload,
                    in_reply_to,
                    self.now_ms + service_ms + delay_ms,
                ),
                Out::Timer {
                    delay_ms,
                    timer,
                    idle,
                } => self.push(
                    self.now_ms + delay_ms,
                    Event::Timer {
                        node: from.to_string(),
                        timer,
                    },
                    idle,
                ),
            }
        }
    }

    fn service_ms(&self, node: &str) -> u64 {
        let base = self.sc.node(node).map_or(0, |n| n.service_ms) as f64;
        (base * self.slow_factor(node, self.now_ms)).round() as u64
    }

    fn ctx_slow(&self, node: &str) -> f64 {
        self.slow_factor(node, self.now_ms)
    }

    fn run(&mut self) {
        while let Some(((at, _), q)) = self.queue.pop_first() {
            if !q.idle {
                self.busy -= 1;
            } else if self.busy == 0 {
                break;
            }
            if at > self.horizon_ms {
                break;
            }
            self.now_ms = at;
            self.clock.store(at, Ordering::Relaxed);
            match q.event {
                Event::Deliver(m) => self.deliver(m),
                Event::Timer { node, timer } => {
                    let slow = self.ctx_slow(&node);
                    let Some(n) = self.nodes.get_mut(&node) else {
                        continue;
                    };
                    let outs = n.on_timer(
                        &Ctx {
                            now_ms: at,
                            me: &node,
                            slow,
                        },
                        timer,
                    );
                    self.apply(&node, outs, 0);
                }
                Event::Script(i) => self.script(i),
            }
        }
    }

    fn script(&mut self, i: usize) {
        let event = &self.sc.script[i].event;
        let target = match event {
            ScriptEvent::Train { from, .. } | ScriptEvent::Rtbf { from, .. } => from
                .clone()
                .unwrap_or_else(|| self.sc.ids_with(SimRole::Client).remove(0)),
            ScriptEvent::Gc => self.topo.vault.clone(),
            ScriptEvent::Fault { .. } => return,
        };
        let topo = self.topo.clone();
        let service = self.service_ms(&target);
        let Some(n) = self.nodes.get_mut(&target) else {
            return;
        };
        let outs = n.on_script(&topo, event);
        self.apply(&target, outs, service);
    }

    fn deliver(&mut self, mut m: SimMessage) {
        let now = self.now_ms;
        if m.delivery != Delivery::Synthetic {
            let sent = to_ms(m.sent_at);
            let lost = self.offline(&m.src, &m.dst, sent)
                || self.offline(&m.dst, &m.src, now)
                || (m.msg_type != MsgType::Error
                    && (self.drop_roll(&m.src, &m.dst, sent)
                        || self.drop_roll(&m.dst, &m.src, now)));
            if lost {
                m.delivery = Delivery::Dropped;
                if m.msg_type.expects_reply() {
                    let at = (sent + self.sc.timeout_ms).max(now);
                    let timeout = SimMessage {
                        msg_id: self.next_msg_id,
                        in_reply_to: Some(m.msg_id),
                        src: m.dst.clone(),
                        dst: m.src.clone(),
                        msg_type: MsgType::Error,
                        sent_at: at as f64 / 1000.0,
                        delivered_at: at as f64 / 1000.0,
                        delivery: Delivery::Synthetic,
                        payload: m.payload.timeout_for(),
                    };
                    self.next_msg_id += 1;
                    self.push(at, Event::Deliver(timeout), false);
                }
                self.trace.push(m);
                return;
            }
        }
        self.trace.push(m.clone());
        let dst = m.dst.clone();
        let slow = self.ctx_slow(&dst);
        let service = self.service_ms(&dst);
        let Some(n) = self.nodes.get_mut(&dst) else {
            return;
        };
        let outs = n.on_message(
            &Ctx {
                now_ms: now,
                me: &dst,
                slow,
            },
            &m,
        );
        self.apply(&dst, outs, service);
    }

    fn finish(self, seed: u64) -> SimOutcome {
        let mut rounds = Vec::new();
        let mut gc_reports = Vec::new();
        let mut holdings = BTreeMap::new();
        for (id, node) in &self.nodes {
            match node {
                Node::Orchestrator(o) => rounds.extend(o.summaries.iter().cloned()),
                Node::Vault(v) => gc_reports.extend(v.reports.iter().cloned()),
                _ => {}
            }
            let held = node.held_bytes();
            if !held.is_empty() {
                holdings.insert(id.clone(), held);
            }
        }
        rounds.sort_by_key(|r| r.round_id);
        let roles = self
            .sc
            .nodes
            .iter()
            .map(|n| (n.id.clone(), n.role))
            .collect();
        SimOutcome {
            seed,
            trace_hash: trace_hash(&self.trace),
            trace: self.trace,
            rounds,
            gc_reports,
            holdings,
            roles,
            end_time_s: self.now_ms as f64 / 1000.0,
            originals: self.originals,
        }
    }
}
