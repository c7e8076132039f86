//! The event-driven network simulation.
//!
//! [`Simulation`] owns the per-node state, the link controllers, the QTCP
//! flows and the switch PI controllers of one run, and reacts to scheduled
//! events until the configured duration. Cross-node effects are always
//! scheduled events carrying the classical propagation delay.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use crate::aqm::PiController;
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::ids::{DatagramKey, FlowId, LinkId, NodeId};
use crate::link::{LinkController, LinkLevelLabel, LinkRequest, RequestOutcome};
use crate::memory::{SlotRole, StoredQubit};
use crate::metrics::{regime_summary, DeliveryRecord, DropRecord, Regime, RunSummary};
use crate::network::Node;
use crate::network::{BufferedDatagram, DropNotice, DropReason, NodeKind, QDatagram, Topology};
use crate::physics::{decohere, pauli_accumulate, swap, PauliFrame, WernerParam};
use crate::sim::{Component, RngStream, Scheduler, SimTime, StreamId};
use crate::transport::{DemandModel, Flow, FlowCounters, FlowPhase, Phase, QtcpAck};

/// How many recent events a protocol error reports.
const RECENT_EVENTS: usize = 32;

#[derive(Clone, Debug)]
enum Ev {
    FlowOpen(FlowId),
    HandshakeReply(FlowId),
    FlowClosed(FlowId),
    RequestArrival {
        flow: FlowId,
        token: u64,
    },
    RegimeStart(usize),
    /// A pair request reaches the link controller at the midpoint.
    LinkRequest {
        link: LinkId,
        request: LinkRequest,
    },
    GenerationSuccess(LinkId),
    /// Heralding message from the midpoint reaches one endpoint.
    PairReady {
        node: NodeId,
        label: LinkLevelLabel,
        served: Option<(NodeId, DatagramKey)>,
    },
    /// A cached pair was assigned to a request.
    CacheAssign {
        node: NodeId,
        label: LinkLevelLabel,
        served: (NodeId, DatagramKey),
    },
    Datagram {
        node: NodeId,
        dgram: Box<QDatagram>,
    },
    ReleaseHalf {
        node: NodeId,
        label: LinkLevelLabel,
    },
    DropNotice(DropNotice),
    Ack(QtcpAck),
    PiTick(NodeId),
    Cutoff {
        node: NodeId,
        key: DatagramKey,
        since: SimTime,
    },
}

/// Compact, copyable description of an event for error context.
#[derive(Clone, Copy, Debug)]
struct Brief {
    kind: &'static str,
    node: Option<NodeId>,
    link: Option<LinkId>,
    key: Option<DatagramKey>,
}

impl Ev {
    fn brief(&self) -> Brief {
        let b = |kind, node, link, key| Brief {
            kind,
            node,
            link,
            key,
        };
        match self {
            Ev::FlowOpen(_) => b("flow-open", None, None, None),
            Ev::HandshakeReply(_) => b("handshake-reply", None, None, None),
            Ev::FlowClosed(_) => b("flow-closed", None, None, None),
            Ev::RequestArrival { .. } => b("request-arrival", None, None, None),
            Ev::RegimeStart(_) => b("regime-start", None, None, None),
            Ev::LinkRequest { link, request } => b(
                "link-request",
                Some(request.requester),
                Some(*link),
                Some(request.seq),
            ),
            Ev::GenerationSuccess(l) => b("generation-success", None, Some(*l), None),
            Ev::PairReady {
                node,
                label,
                served,
            } => b(
                "pair-ready",
                Some(*node),
                Some(label.link),
                served.map(|s| s.1),
            ),
            Ev::CacheAssign {
                node,
                label,
                served,
            } => b(
                "cache-assign",
                Some(*node),
                Some(label.link),
                Some(served.1),
            ),
            Ev::Datagram { node, dgram } => b(
                "datagram",
                Some(*node),
                Some(dgram.link_label.link),
                Some(dgram.key),
            ),
            Ev::ReleaseHalf { node, label } => {
                b("release-half", Some(*node), Some(label.link), None)
            }
            Ev::DropNotice(n) => b(
                "drop-notice",
                Some(n.source),
                None,
                Some(DatagramKey {
                    flow: n.flow_id,
                    seq: n.seq,
                }),
            ),
            Ev::Ack(a) => b(
                "ack",
                None,
                None,
                Some(DatagramKey {
                    flow: a.flow_id,
                    seq: a.seq,
                }),
            ),
            Ev::PiTick(n) => b("pi-tick", Some(*n), None, None),
            Ev::Cutoff { node, key, .. } => b("cutoff", Some(*node), None, Some(*key)),
        }
    }
}

impl fmt::Display for Brief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind)?;
        if let Some(n) = self.node {
            write!(f, " at {n}")?;
        }
        if let Some(l) = self.link {
            write!(f, " on {l}")?;
        }
        if let Some(k) = self.key {
            write!(f, " for {k}")?;
        }
        Ok(())
    }
}

/// Lifecycle of a q-datagram as seen by the whole network.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Status {
    AwaitingFirstPair {
        injected_at: SimTime,
    },
    InNetwork {
        source_label: LinkLevelLabel,
    },
    /// `source_label` is `None` once the source half has been released.
    Dropped {
        source_label: Option<LinkLevelLabel>,
    },
    Delivered,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSample {
    pub time: f64,
    pub flow_id: FlowId,
    pub window: u32,
    pub ssthresh: u32,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AqmSample {
    pub time: f64,
    pub node: NodeId,
    pub p: f64,
    pub avg_buffering_s: f64,
    pub completed: u64,
}

/// Totals used to check that no q-datagram disappears.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Conservation {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.injected == self.delivered + self.dropped + self.in_flight
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Check memory bookkeeping after every event (slow).
    pub check_invariants: bool,
    /// Keep a full textual trace of every fired event.
    pub record_trace: bool,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub deliveries: Vec<DeliveryRecord>,
    pub drops: Vec<DropRecord>,
    pub window_trace: Vec<WindowSample>,
    pub aqm_trace: Vec<AqmSample>,
    pub flow_counters: Vec<(FlowId, FlowCounters)>,
    pub conservation: Conservation,
    pub events_fired: u64,
    pub regimes: Vec<Regime>,
    pub summary: RunSummary,
    pub trace: Option<Vec<String>>,
}

impl RunOutput {
    /// Mean of the per-period average buffering time reported by each
    /// switch controller over periods ending at or after `from_s`.
    pub fn mean_buffering_since(&self, from_s: f64) -> Vec<(NodeId, f64)> {
        let mut acc: std::collections::BTreeMap<NodeId, (f64, u64)> = Default::default();
        for s in self.aqm_trace.iter().filter(|s| s.time >= from_s) {
            let e = acc.entry(s.node).or_default();
            e.0 += s.avg_buffering_s;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(n, (sum, k))| (n, sum / k as f64))
            .collect()
    }
}

/// State of one running scenario.
pub struct Simulation<'a> {
    sc: &'a Scenario,
    sched: Scheduler<Ev>,
    nodes: Vec<Node>,
    links: Vec<LinkController>,
    link_delay: Vec<f64>,
    flows: Vec<Flow>,
    arrival_rng: Vec<RngStream>,
    arrival_rate: Vec<f64>,
    arrival_token: Vec<u64>,
    arrivals_open: Vec<bool>,
    bsm_rng: Vec<RngStream>,
    pi: Vec<Option<PiController>>,
    status: HashMap<DatagramKey, Status>,
    w0: WernerParam,
    deliveries: Vec<DeliveryRecord>,
    drops: Vec<DropRecord>,
    window_trace: Vec<WindowSample>,
    aqm_trace: Vec<AqmSample>,
    injected: u64,
    recent: VecDeque<(SimTime, Brief)>,
    trace: Option<Vec<String>>,
    check: bool,
}

fn topology_nodes(topology: &Topology) -> Vec<Node> {
    topology
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let id = NodeId(i as u32);
            Node::new(id, n.kind, topology.interfaces(id), n.memory_per_interface)
        })
        .collect()
}

impl<'a> Simulation<'a> {
    pub fn new(sc: &'a Scenario, options: RunOptions) -> Result<Self> {
        let seed = sc.seed;
        let c = sc.light_speed_km_s;
        let links = sc
            .topology
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                LinkController::new(
                    LinkId(i as u32),
                    l.endpoints,
                    &l.params,
                    c,
                    sc.link_mode,
                    sc.link_policy,
                    RngStream::new(seed, StreamId::new(Component::Lleg, i as u32)),
                )
            })
            .collect();
        let link_delay = sc
            .topology
            .links
            .iter()
            .map(|l| l.params.end_to_end_delay(c))
            .collect();
        let flows = sc
            .flows
            .iter()
            .map(|spec| {
                let rtt = 2.0 * sc.path_delay(spec.source, spec.destination);
                Flow::new(spec.clone(), rtt)
            })
            .collect();
        let n_flows = sc.flows.len();
        let pi = sc
            .topology
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match (n.kind, sc.aqm) {
                (NodeKind::Switch, Some(params)) => Some(PiController::new(
                    params,
                    RngStream::new(seed, StreamId::new(Component::Marking, i as u32)),
                )),
                _ => None,
            })
            .collect();
        Ok(Simulation {
            sc,
            sched: Scheduler::new(),
            nodes: topology_nodes(&sc.topology),
            links,
            link_delay,
            flows,
            arrival_rng: (0..n_flows)
                .map(|i| RngStream::new(seed, StreamId::new(Component::Arrivals, i as u32)))
                .collect(),
            arrival_rate: sc
                .flows
                .iter()
                .map(|f| match f.demand {
                    DemandModel::Poisson { rate_hz } => rate_hz,
                    _ => 0.0,
                })
                .collect(),
            arrival_token: vec![0; n_flows],
            arrivals_open: vec![false; n_flows],
            bsm_rng: (0..sc.topology.nodes.len())
                .map(|i| RngStream::new(seed, StreamId::new(Component::Bsm, i as u32)))
                .collect(),
            pi,
            status: HashMap::new(),
            w0: sc.noise.initial_werner()?,
            deliveries: Vec::new(),
            drops: Vec::new(),
            window_trace: Vec::new(),
            aqm_trace: Vec::new(),
            injected: 0,
            recent: VecDeque::with_capacity(RECENT_EVENTS),
            trace: options.record_trace.then(Vec::new),
            check: options.check_invariants,
        })
    }

    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn protocol<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Protocol {
            time: self.now(),
            message: message.into(),
            trace: self
                .recent
                .iter()
                .map(|(t, b)| format!("t={t} {b}"))
                .collect(),
        })
    }

    fn at(&mut self, delay: f64, ev: Ev) {
        self.sched.schedule_in(delay, ev);
    }

    fn is_warmup(&self) -> bool {
        self.now().secs() < self.sc.warmup_s
    }

    /// Run to the configured duration and collect the results.
    pub fn run(mut self) -> Result<RunOutput> {
        self.bootstrap();
        let end = SimTime::from_secs(self.sc.duration_s);
        while let Some(ev) = self.sched.pop_until(end) {
            if self.recent.len() == RECENT_EVENTS {
                self.recent.pop_front();
            }
            self.recent.push_back((ev.fire_time, ev.payload.brief()));
            if let Some(trace) = self.trace.as_mut() {
                trace.push(format!(
                    "{} {} {:?}",
                    ev.fire_time, ev.sequence_tag, ev.payload
                ));
            }
            self.handle(ev.payload)?;
            if self.check {
                self.check_invariants()?;
            }
        }
        self.sched.advance_to(end);
        self.finish()
    }

    fn bootstrap(&mut self) {
        let sc = self.sc;
        for (i, f) in sc.flows.iter().enumerate() {
            self.sched
                .schedule(f.start_time, Ev::FlowOpen(FlowId(i as u32)));
        }
        for (i, r) in sc.regimes.iter().enumerate() {
            self.sched
                .schedule(SimTime::from_secs(r.start_s), Ev::RegimeStart(i));
        }
        if let Some(params) = sc.aqm {
            for n in 0..self.nodes.len() {
                if self.pi[n].is_some() {
                    self.at(params.sample_period_s, Ev::PiTick(NodeId(n as u32)));
                }
            }
        }
        for l in 0..self.links.len() {
            if self.links[l].mode() == crate::link::ServiceMode::Continuous && self.links[l].start()
            {
                let dt = self.links[l].sample_interval();
                self.at(dt, Ev::GenerationSuccess(LinkId(l as u32)));
            }
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::FlowOpen(f) => self.on_flow_open(f),
            Ev::HandshakeReply(f) => {
                self.flows[f.0 as usize].set_phase(FlowPhase::Transmitting);
                self.admit(f);
                Ok(())
            }
            Ev::FlowClosed(f) => {
                self.flows[f.0 as usize].set_phase(FlowPhase::Closed);
                Ok(())
            }
            Ev::RequestArrival { flow, token } => {
                let i = flow.0 as usize;
                if token == self.arrival_token[i] {
                    let now = self.now();
                    self.flows[i].on_request_arrival(now);
                    self.admit(flow);
                    self.schedule_arrival(flow);
                }
                Ok(())
            }
            Ev::RegimeStart(r) => {
                let sc = self.sc;
                for (i, rate) in sc.regimes[r].flow_rates.iter().enumerate() {
                    if let Some(rate) = *rate {
                        self.arrival_rate[i] = rate;
                        self.arrival_token[i] += 1;
                        if self.arrivals_open[i] {
                            self.schedule_arrival(FlowId(i as u32));
                        }
                    }
                }
                Ok(())
            }
            Ev::LinkRequest { link, request } => self.on_link_request(link, request),
            Ev::GenerationSuccess(link) => self.on_generation_success(link),
            Ev::PairReady {
                node,
                label,
                served,
            } => self.on_pair_ready(node, label, served),
            Ev::CacheAssign {
                node,
                label,
                served,
            } => self.on_cache_assign(node, label, served),
            Ev::Datagram { node, dgram } => self.receive_qdatagram(node, *dgram),
            Ev::ReleaseHalf { node, label } => {
                self.release_half(node, label);
                Ok(())
            }
            Ev::DropNotice(n) => self.on_drop_notice(n),
            Ev::Ack(a) => self.on_ack(a),
            Ev::PiTick(node) => {
                let now = self.now().secs();
                let pi = self.pi[node.0 as usize]
                    .as_mut()
                    .expect("tick only for switches");
                let s = pi.update();
                let period = pi.params().sample_period_s;
                self.aqm_trace.push(AqmSample {
                    time: now,
                    node,
                    p: s.p,
                    avg_buffering_s: s.avg_buffering_s,
                    completed: s.completed,
                });
                self.at(period, Ev::PiTick(node));
                Ok(())
            }
            Ev::Cutoff { node, key, since } => self.on_cutoff(node, key, since),
        }
    }

    // ---- transport -------------------------------------------------------

    fn record_window(&mut self, f: FlowId) {
        let flow = &self.flows[f.0 as usize];
        let w = flow.window();
        self.window_trace.push(WindowSample {
            time: self.sched.now().secs(),
            flow_id: f,
            window: w.size(),
            ssthresh: w.ssthresh(),
            phase: w.phase(),
        });
    }

    fn on_flow_open(&mut self, f: FlowId) -> Result<()> {
        let i = f.0 as usize;
        let now = self.now();
        self.flows[i].set_phase(FlowPhase::Opening);
        self.record_window(f);
        match self.flows[i].spec().demand {
            DemandModel::Poisson { .. } => {
                self.arrivals_open[i] = true;
                self.schedule_arrival(f);
            }
            DemandModel::Batch { count } => {
                for _ in 0..count {
                    self.flows[i].on_request_arrival(now);
                }
            }
            DemandModel::Infinite => {}
        }
        let spec = self.flows[i].spec();
        let rtt = 2.0 * self.sc.path_delay(spec.source, spec.destination);
        self.at(rtt, Ev::HandshakeReply(f));
        Ok(())
    }

    fn schedule_arrival(&mut self, f: FlowId) {
        let i = f.0 as usize;
        let rate = self.arrival_rate[i];
        if rate > 0.0 {
            let dt = self.arrival_rng[i].exponential(rate);
            let token = self.arrival_token[i];
            self.at(dt, Ev::RequestArrival { flow: f, token });
        }
    }

    fn admit(&mut self, f: FlowId) {
        let now = self.now();
        let admitted = self.flows[f.0 as usize].admit_requests(now);
        for (seq, _) in admitted {
            self.inject_qdatagram(DatagramKey { flow: f, seq });
        }
    }

    fn on_ack(&mut self, ack: QtcpAck) -> Result<()> {
        let i = ack.flow_id.0 as usize;
        let now = self.now();
        let effect = match self.flows[i].on_ack(now, &ack) {
            Ok(e) => e,
            Err(e) => return self.protocol(e.to_string()),
        };
        if effect.window_changed {
            self.record_window(ack.flow_id);
        }
        self.admit(ack.flow_id);
        if self.flows[i].is_complete() && self.flows[i].phase() == FlowPhase::Transmitting {
            self.flows[i].set_phase(FlowPhase::Closing);
            let spec = self.flows[i].spec();
            let rtt = 2.0 * self.sc.path_delay(spec.source, spec.destination);
            self.at(rtt, Ev::FlowClosed(ack.flow_id));
        }
        Ok(())
    }

    fn on_drop_notice(&mut self, notice: DropNotice) -> Result<()> {
        let key = DatagramKey {
            flow: notice.flow_id,
            seq: notice.seq,
        };
        if let Some(Status::Dropped { source_label }) = self.status.get_mut(&key) {
            if let Some(label) = source_label.take() {
                let node = &mut self.nodes[notice.source.0 as usize];
                node.bank_mut(label.link).remove(&label);
            }
        } else {
            return self.protocol(format!("drop notice for {key} which is not dropped"));
        }
        let i = notice.flow_id.0 as usize;
        let now = self.now();
        let effect = match self.flows[i].on_drop_notice(now, notice.seq) {
            Ok(e) => e,
            Err(e) => return self.protocol(e.to_string()),
        };
        if effect.window_changed {
            self.record_window(notice.flow_id);
        }
        self.admit(notice.flow_id);
        Ok(())
    }

    // ---- network layer ----------------------------------------------------

    fn peer(&self, link: LinkId, node: NodeId) -> NodeId {
        self.links[link.0 as usize].peer_of(node)
    }

    fn request_link_pair(&mut self, link: LinkId, requester: NodeId, key: DatagramKey) {
        let mid = self.links[link.0 as usize].midpoint_delay();
        let request = LinkRequest {
            requester,
            seq: key,
            arrival_time: self.now() + mid,
        };
        self.at(mid, Ev::LinkRequest { link, request });
    }

    fn inject_qdatagram(&mut self, key: DatagramKey) {
        let spec = self.flows[key.flow.0 as usize].spec();
        let (src, dst) = (spec.source, spec.destination);
        let (_, first_link) = self
            .sc
            .routing
            .next_hop(src, dst)
            .expect("flow endpoints are routable");
        self.injected += 1;
        self.status.insert(
            key,
            Status::AwaitingFirstPair {
                injected_at: self.now(),
            },
        );
        self.request_link_pair(first_link, src, key);
    }

    fn on_link_request(&mut self, link: LinkId, mut request: LinkRequest) -> Result<()> {
        request.arrival_time = self.now();
        let ctrl = &mut self.links[link.0 as usize];
        match ctrl.request_pair(request) {
            Ok(RequestOutcome::Queued) => {}
            Ok(RequestOutcome::StartGeneration) => {
                let dt = ctrl.sample_interval();
                self.at(dt, Ev::GenerationSuccess(link));
            }
            Ok(RequestOutcome::ServedFromCache { label, request }) => {
                let mid = ctrl.midpoint_delay();
                let served = (request.requester, request.seq);
                for node in ctrl.endpoints() {
                    self.at(
                        mid,
                        Ev::CacheAssign {
                            node,
                            label,
                            served,
                        },
                    );
                }
            }
            Err(e) => return self.protocol(e.to_string()),
        }
        Ok(())
    }

    fn on_generation_success(&mut self, link: LinkId) -> Result<()> {
        let ctrl = &mut self.links[link.0 as usize];
        let outcome = ctrl.on_generation_success();
        let next = outcome.keep_generating.then(|| ctrl.sample_interval());
        let served = outcome.served.map(|r| (r.requester, r.seq));
        if served.is_none() {
            ctrl.push_cached(outcome.label);
        }
        let mid = ctrl.midpoint_delay();
        let endpoints = ctrl.endpoints();
        if let Some(dt) = next {
            self.at(dt, Ev::GenerationSuccess(link));
        }
        for node in endpoints {
            self.at(
                mid,
                Ev::PairReady {
                    node,
                    label: outcome.label,
                    served,
                },
            );
        }
        Ok(())
    }

    /// Store a qubit, applying the overflow policy if the bank is full.
    fn qmmu_insert(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        werner: WernerParam,
        birth: SimTime,
        role: SlotRole,
    ) -> Result<()> {
        let bank = self.nodes[node.0 as usize].bank_mut(label.link);
        match bank.insert(label, werner, birth, role) {
            Ok(Some(victim)) => self.on_evicted(node, victim),
            Ok(None) => Ok(()),
            Err(e) => self.protocol(e.to_string()),
        }
    }

    fn on_evicted(&mut self, node: NodeId, victim: StoredQubit) -> Result<()> {
        let label = victim.label;
        match victim.role {
            SlotRole::Cached => {
                self.links[label.link.0 as usize].remove_cached(label);
                let peer = self.peer(label.link, node);
                let d = self.link_delay[label.link.0 as usize];
                self.at(d, Ev::ReleaseHalf { node: peer, label });
            }
            SlotRole::Awaiting => {
                self.nodes[node.0 as usize].evicted_awaiting.insert(label);
            }
            SlotRole::Buffered(key) => {
                self.nodes[node.0 as usize].buffered.remove(&key);
                self.drop_datagram(key, node, DropReason::Overflow);
            }
            SlotRole::Source(key) => match self.status.get(&key).copied() {
                Some(Status::InNetwork { .. }) => {
                    self.status
                        .insert(key, Status::Dropped { source_label: None });
                    self.record_drop(key, node, DropReason::Overflow);
                    self.send_drop_notice(key, node, DropReason::Overflow, true);
                }
                Some(Status::Dropped { .. }) => {
                    self.status
                        .insert(key, Status::Dropped { source_label: None });
                }
                other => {
                    return self.protocol(format!(
                        "source half of {key} evicted in unexpected state {other:?}"
                    ))
                }
            },
        }
        Ok(())
    }

    fn record_drop(&mut self, key: DatagramKey, node: NodeId, reason: DropReason) {
        let warmup = self.is_warmup();
        self.drops.push(DropRecord {
            flow_id: key.flow,
            seq: key.seq,
            node,
            reason,
            dropped_at: self.now().secs(),
            warmup,
        });
    }

    fn send_drop_notice(
        &mut self,
        key: DatagramKey,
        at: NodeId,
        reason: DropReason,
        released: bool,
    ) {
        let source = self.flows[key.flow.0 as usize].spec().source;
        let notice = DropNotice {
            flow_id: key.flow,
            seq: key.seq,
            source,
            dropping_node: at,
            reason,
            source_released: released,
        };
        let d = self.sc.path_delay(at, source);
        self.at(d, Ev::DropNotice(notice));
    }

    /// Discard an in-network q-datagram at `node` and notify its source.
    /// Does nothing if it was already dropped.
    fn drop_datagram(&mut self, key: DatagramKey, node: NodeId, reason: DropReason) {
        if let Some(Status::InNetwork { source_label }) = self.status.get(&key).copied() {
            self.status.insert(
                key,
                Status::Dropped {
                    source_label: Some(source_label),
                },
            );
            self.record_drop(key, node, reason);
            self.send_drop_notice(key, node, reason, false);
        }
    }

    fn release_half(&mut self, node: NodeId, label: LinkLevelLabel) {
        let n = &mut self.nodes[node.0 as usize];
        match n.bank_mut(label.link).remove(&label) {
            // A q-datagram may still be travelling toward this half.
            Some(slot) if slot.role == SlotRole::Awaiting => {
                n.evicted_awaiting.insert(label);
            }
            Some(_) => {}
            None => {
                n.evicted_awaiting.remove(&label);
            }
        }
    }

    fn on_pair_ready(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        served: Option<(NodeId, DatagramKey)>,
    ) -> Result<()> {
        let now = self.now();
        let w = self.w0;
        match served {
            None => {
                let bank = self.nodes[node.0 as usize].bank(label.link);
                let has_cached = bank.count_role(|r| r == SlotRole::Cached) > 0;
                if bank.is_full() && !has_cached {
                    self.links[label.link.0 as usize].remove_cached(label);
                    let peer = self.peer(label.link, node);
                    let d = self.link_delay[label.link.0 as usize];
                    self.at(d, Ev::ReleaseHalf { node: peer, label });
                    Ok(())
                } else {
                    self.qmmu_insert(node, label, w, now, SlotRole::Cached)
                }
            }
            Some((requester, key)) if requester == node => {
                self.on_requested_pair(node, label, w, now, key)
            }
            Some(_) => self.qmmu_insert(node, label, w, now, SlotRole::Awaiting),
        }
    }

    fn on_cache_assign(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        (requester, key): (NodeId, DatagramKey),
    ) -> Result<()> {
        let slot = self.nodes[node.0 as usize]
            .bank(label.link)
            .get(&label)
            .copied()
            .filter(|s| s.role == SlotRole::Cached);
        if node == requester {
            match slot {
                Some(s) => {
                    self.nodes[node.0 as usize]
                        .bank_mut(label.link)
                        .remove(&label);
                    self.on_requested_pair(node, label, s.werner, s.birth, key)
                }
                None => {
                    // Lost while the assignment was in flight: ask again.
                    let peer = self.peer(label.link, node);
                    let d = self.link_delay[label.link.0 as usize];
                    self.at(d, Ev::ReleaseHalf { node: peer, label });
                    self.request_link_pair(label.link, node, key);
                    Ok(())
                }
            }
        } else {
            match slot {
                Some(s) => {
                    let bank = self.nodes[node.0 as usize].bank_mut(label.link);
                    bank.assign(&label, SlotRole::Awaiting, s.buffering_start)
                        .expect("slot exists");
                }
                None => {
                    self.nodes[node.0 as usize].evicted_awaiting.insert(label);
                }
            }
            Ok(())
        }
    }

    /// The requesting side of a pair: either a flow source starting a new
    /// q-datagram or a switch continuing one.
    fn on_requested_pair(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        w: WernerParam,
        birth: SimTime,
        key: DatagramKey,
    ) -> Result<()> {
        let source = self.flows[key.flow.0 as usize].spec().source;
        if node == source {
            self.start_datagram(node, label, w, birth, key)
        } else {
            self.on_next_pair_ready(node, label, w, birth, key)
        }
    }

    fn start_datagram(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        w: WernerParam,
        birth: SimTime,
        key: DatagramKey,
    ) -> Result<()> {
        let injected_at = match self.status.get(&key) {
            Some(Status::AwaitingFirstPair { injected_at }) => *injected_at,
            other => {
                return self.protocol(format!("first pair for {key} arrived in state {other:?}"))
            }
        };
        self.status.insert(
            key,
            Status::InNetwork {
                source_label: label,
            },
        );
        self.qmmu_insert(node, label, w, birth, SlotRole::Source(key))?;
        // The insert may have evicted this very q-datagram's predecessor but
        // never the new slot itself.
        let destination = self.flows[key.flow.0 as usize].spec().destination;
        let dgram = QDatagram {
            source: node,
            destination,
            key,
            link_label: label,
            pauli_frame: PauliFrame::default(),
            congestion_mark: false,
            injected_at,
            created_at: birth,
            source_label: label,
            werner: w,
            per_hop_buffering: Vec::new(),
        };
        let peer = self.peer(label.link, node);
        let d = self.link_delay[label.link.0 as usize];
        self.at(
            d,
            Ev::Datagram {
                node: peer,
                dgram: Box::new(dgram),
            },
        );
        Ok(())
    }

    fn receive_qdatagram(&mut self, node: NodeId, mut dgram: QDatagram) -> Result<()> {
        let key = dgram.key;
        let label = dgram.link_label;
        let ni = node.0 as usize;
        if matches!(self.status.get(&key), Some(Status::Dropped { .. })) {
            self.release_half(node, label);
            self.nodes[ni].evicted_awaiting.remove(&label);
            return Ok(());
        }
        if self.nodes[ni].evicted_awaiting.remove(&label) {
            self.drop_datagram(key, node, DropReason::Overflow);
            return Ok(());
        }
        match self.nodes[ni].bank(label.link).get(&label) {
            Some(s) if s.role == SlotRole::Awaiting => {}
            other => {
                return self.protocol(format!(
                    "{key} arrived at {node} but label {label} resolves to {other:?}"
                ))
            }
        }
        if node == dgram.destination {
            return self.deliver(node, dgram);
        }

        let now = self.now();
        if let Some(pi) = self.pi[ni].as_mut() {
            if pi.mark_decision() {
                dgram.congestion_mark = true;
            }
        }
        let (_, next_link) = match self.sc.routing.next_hop(node, dgram.destination) {
            Some(h) => h,
            None => return self.protocol(format!("no route from {node} to {}", dgram.destination)),
        };
        self.nodes[ni]
            .bank_mut(label.link)
            .assign(&label, SlotRole::Buffered(key), now)
            .expect("slot checked above");
        self.nodes[ni].buffered.insert(
            key,
            BufferedDatagram {
                dgram,
                buffering_start: now,
                next_link,
            },
        );
        self.request_link_pair(next_link, node, key);
        if let Some(cutoff) = self.sc.cutoff_s {
            self.at(
                cutoff,
                Ev::Cutoff {
                    node,
                    key,
                    since: now,
                },
            );
        }
        Ok(())
    }

    fn on_next_pair_ready(
        &mut self,
        node: NodeId,
        label: LinkLevelLabel,
        w_link: WernerParam,
        birth: SimTime,
        key: DatagramKey,
    ) -> Result<()> {
        let ni = node.0 as usize;
        let now = self.now();
        let buffered = self.nodes[ni].buffered.remove(&key);
        let alive = matches!(self.status.get(&key), Some(Status::InNetwork { .. }));
        let buffered = match buffered {
            Some(b) if alive => b,
            stale => {
                // The q-datagram was dropped while this pair was generated.
                if let Some(b) = stale {
                    let old = b.dgram.link_label;
                    self.nodes[ni].bank_mut(old.link).remove(&old);
                }
                let peer = self.peer(label.link, node);
                let d = self.link_delay[label.link.0 as usize];
                self.at(d, Ev::ReleaseHalf { node: peer, label });
                return Ok(());
            }
        };
        self.qmmu_insert(node, label, w_link, birth, SlotRole::Awaiting)?;
        let new_half = self.nodes[ni].bank_mut(label.link).remove(&label);
        let BufferedDatagram {
            mut dgram,
            buffering_start,
            next_link,
        } = buffered;
        if next_link != label.link {
            return self.protocol(format!("{key} expected a pair on {next_link}, got {label}"));
        }
        let old = dgram.link_label;
        let old_half = self.nodes[ni].bank_mut(old.link).remove(&old);
        let (old_half, new_half) = match (old_half, new_half) {
            (Some(o), Some(n)) if o.role == SlotRole::Buffered(key) => (o, n),
            other => {
                return self.protocol(format!("swap at {node} for {key} lacks a qubit: {other:?}"))
            }
        };

        let buffering = now - buffering_start;
        if let Some(pi) = self.pi[ni].as_mut() {
            pi.record_buffering(buffering);
        }
        let t_coh = self.sc.noise.coherence_time_s;
        let w_a = decohere(dgram.werner, now - old_half.birth, t_coh);
        let w_b = decohere(new_half.werner, now - new_half.birth, t_coh);
        let (w, outcome) = swap(w_a, w_b, &mut self.bsm_rng[ni]);
        dgram.werner = w;
        dgram.pauli_frame = pauli_accumulate(dgram.pauli_frame, outcome);
        dgram.link_label = label;
        dgram.per_hop_buffering.push((node, buffering));

        let peer = self.peer(label.link, node);
        let d = self.link_delay[label.link.0 as usize];
        self.at(
            d,
            Ev::Datagram {
                node: peer,
                dgram: Box::new(dgram),
            },
        );
        Ok(())
    }

    fn deliver(&mut self, node: NodeId, dgram: QDatagram) -> Result<()> {
        let now = self.now();
        let key = dgram.key;
        let far = self.nodes[node.0 as usize]
            .bank_mut(dgram.link_label.link)
            .remove(&dgram.link_label)
            .expect("slot checked by caller");
        match self.status.get(&key).copied() {
            Some(Status::InNetwork { source_label }) => {
                let src = &mut self.nodes[dgram.source.0 as usize];
                if src
                    .bank_mut(source_label.link)
                    .remove(&source_label)
                    .is_none()
                {
                    return self.protocol(format!("source half of {key} missing at delivery"));
                }
            }
            other => return self.protocol(format!("delivering {key} in state {other:?}")),
        }
        self.status.insert(key, Status::Delivered);

        let t_coh = self.sc.noise.coherence_time_s;
        let w = decohere(dgram.werner, now - far.birth, t_coh);
        let w_final = decohere(w, now - dgram.created_at, t_coh);
        let warmup = self.is_warmup();
        self.deliveries.push(DeliveryRecord {
            flow_id: key.flow,
            seq: key.seq,
            source: dgram.source,
            destination: node,
            injected_at: dgram.injected_at.secs(),
            delivered_at: now.secs(),
            e2e_latency: now - dgram.injected_at,
            w_final,
            hops: dgram.hops(),
            congestion_mark: dgram.congestion_mark,
            pauli_frame: dgram.pauli_frame,
            per_hop_buffering: dgram.per_hop_buffering,
            warmup,
        });
        let ack = QtcpAck {
            flow_id: key.flow,
            seq: key.seq,
            congestion_mark: dgram.congestion_mark,
            delivery_time: now,
        };
        let d = self.sc.path_delay(node, dgram.source);
        self.at(d, Ev::Ack(ack));
        Ok(())
    }

    fn on_cutoff(&mut self, node: NodeId, key: DatagramKey, since: SimTime) -> Result<()> {
        let ni = node.0 as usize;
        let expired = matches!(
            self.nodes[ni].buffered.get(&key),
            Some(b) if b.buffering_start == since
        );
        if expired {
            let b = self.nodes[ni].buffered.remove(&key).expect("checked");
            let old = b.dgram.link_label;
            self.nodes[ni].bank_mut(old.link).remove(&old);
            self.drop_datagram(key, node, DropReason::Cutoff);
        }
        Ok(())
    }

    // ---- bookkeeping ------------------------------------------------------

    fn check_invariants(&self) -> Result<()> {
        for node in &self.nodes {
            let mut buffered_slots = 0;
            for (link, bank) in node.interfaces().iter().zip(node.banks()) {
                if bank.len() > bank.capacity() {
                    return self.protocol(format!(
                        "{} bank on {link} holds {} > {}",
                        node.id,
                        bank.len(),
                        bank.capacity()
                    ));
                }
                let roles = bank.count_role(|r| matches!(r, SlotRole::Buffered(_)))
                    + bank.count_role(|r| matches!(r, SlotRole::Source(_)))
                    + bank.count_role(|r| r == SlotRole::Awaiting)
                    + bank.count_role(|r| r == SlotRole::Cached);
                if roles != bank.len() {
                    return self.protocol(format!("{} bank on {link} has untyped slots", node.id));
                }
                buffered_slots += bank.count_role(|r| matches!(r, SlotRole::Buffered(_)));
            }
            if buffered_slots != node.buffered.len() {
                return self.protocol(format!(
                    "{} has {} buffered slots but {} buffered q-datagrams",
                    node.id,
                    buffered_slots,
                    node.buffered.len()
                ));
            }
            for (key, b) in &node.buffered {
                let l = b.dgram.link_label;
                match node.bank(l.link).get(&l) {
                    Some(s) if s.role == SlotRole::Buffered(*key) => {}
                    other => {
                        return self.protocol(format!(
                            "{key} buffered at {} but its label resolves to {other:?}",
                            node.id
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<RunOutput> {
        let in_flight = self
            .status
            .values()
            .filter(|s| {
                matches!(
                    s,
                    Status::AwaitingFirstPair { .. } | Status::InNetwork { .. }
                )
            })
            .count() as u64;
        let conservation = Conservation {
            injected: self.injected,
            delivered: self.deliveries.len() as u64,
            dropped: self.drops.len() as u64,
            in_flight,
        };
        if !conservation.holds() {
            return self.protocol(format!("conservation violated: {conservation:?}"));
        }
        let sc = self.sc;
        let regimes: Vec<Regime> = sc
            .regimes
            .iter()
            .map(|r| Regime {
                name: r.name.clone(),
                start: r.start_s,
                end: r.end_s,
            })
            .collect();
        let summary = regime_summary(
            &self.deliveries,
            &self.drops,
            &regimes,
            sc.warmup_s,
            sc.duration_s,
        );
        Ok(RunOutput {
            seed: sc.seed,
            duration_s: sc.duration_s,
            warmup_s: sc.warmup_s,
            flow_counters: self.flows.iter().map(|f| (f.id(), f.counters())).collect(),
            deliveries: self.deliveries,
            drops: self.drops,
            window_trace: self.window_trace,
            aqm_trace: self.aqm_trace,
            conservation,
            events_fired: self.sched.fired(),
            regimes,
            summary,
            trace: self.trace,
        })
    }
}

/// Build and run one scenario.
pub fn simulate(scenario: &Scenario, options: RunOptions) -> Result<RunOutput> {
    Simulation::new(scenario, options)?.run()
}
