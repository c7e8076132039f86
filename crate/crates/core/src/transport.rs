//! QTCP: end-to-end flows of q-datagrams with window-based AIMD congestion
//! control. Acknowledgments carry the congestion mark set by switches; drop
//! notices come straight from the switch that discarded a q-datagram.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ids::{DatagramKey, FlowId, NodeId};
use crate::sim::SimTime;

pub const INITIAL_WINDOW: u32 = 1;
pub const INITIAL_SSTHRESH: u32 = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CcMode {
    /// Inject every request on arrival; no retries.
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "aimd")]
    Aimd,
    /// AIMD at the sources plus PI marking at the switches.
    #[default]
    #[serde(rename = "aimd+aqm")]
    AimdAqm,
}

impl CcMode {
    pub fn controls_window(self) -> bool {
        !matches!(self, CcMode::Off)
    }

    pub fn uses_aqm(self) -> bool {
        matches!(self, CcMode::AimdAqm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CcMode::Off => "off",
            CcMode::Aimd => "aimd",
            CcMode::AimdAqm => "aimd+aqm",
        }
    }
}

/// How a flow's requests are generated, after load has been resolved to a rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DemandModel {
    Poisson { rate_hz: f64 },
    Infinite,
    Batch { count: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSpec {
    pub flow_id: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub demand: DemandModel,
    pub start_time: SimTime,
    pub cc: CcMode,
    /// Upper bound on the window (receiver window); `None` for unbounded.
    pub max_window: Option<u32>,
    /// Bound on requests waiting for admission; `None` for unbounded.
    pub admission_bound: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SlowStart,
    CongestionAvoidance,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SlowStart => "slow-start",
            Phase::CongestionAvoidance => "congestion-avoidance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CongestionCause {
    DropNotice,
    MarkedAck,
}

/// AIMD window state.
#[derive(Clone, Debug, PartialEq)]
pub struct CongestionWindow {
    w: u32,
    ssthresh: u32,
    phase: Phase,
    ack_counter: u32,
    max_window: Option<u32>,
    last_decrease: Option<SimTime>,
}

impl CongestionWindow {
    pub fn new(max_window: Option<u32>) -> Self {
        CongestionWindow {
            w: INITIAL_WINDOW,
            ssthresh: INITIAL_SSTHRESH,
            phase: Phase::SlowStart,
            ack_counter: 0,
            max_window,
            last_decrease: None,
        }
    }

    pub fn size(&self) -> u32 {
        self.w
    }

    pub fn ssthresh(&self) -> u32 {
        self.ssthresh
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn ack_counter(&self) -> u32 {
        self.ack_counter
    }

    fn grow(&mut self) {
        let next = self.w.saturating_add(1);
        self.w = self.max_window.map_or(next, |cap| next.min(cap));
    }

    /// Window reaction to an unmarked acknowledgment. Returns whether `w` changed.
    pub fn on_clean_ack(&mut self) -> bool {
        let before = self.w;
        match self.phase {
            Phase::SlowStart => {
                self.grow();
                if self.w >= self.ssthresh {
                    self.phase = Phase::CongestionAvoidance;
                    self.ack_counter = 0;
                }
            }
            Phase::CongestionAvoidance => {
                self.ack_counter += 1;
                if self.ack_counter >= self.w {
                    self.grow();
                    self.ack_counter = 0;
                }
            }
        }
        self.w != before
    }

    /// Multiplicative decrease. Signals closer than `guard_s` to the previous
    /// decrease are absorbed into it. Returns whether the window was halved.
    pub fn on_congestion(&mut self, now: SimTime, guard_s: f64) -> bool {
        if let Some(last) = self.last_decrease {
            if now - last < guard_s {
                return false;
            }
        }
        self.w = (self.w / 2).max(1);
        self.ssthresh = self.w;
        self.phase = Phase::CongestionAvoidance;
        self.ack_counter = 0;
        self.last_decrease = Some(now);
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PendingRequest {
    pub id: u64,
    pub arrival: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QtcpAck {
    pub flow_id: FlowId,
    pub seq: u64,
    pub congestion_mark: bool,
    pub delivery_time: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowPhase {
    Opening,
    Transmitting,
    Closing,
    Closed,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("acknowledgment for unknown seq {0}")]
    UnknownAck(DatagramKey),
    #[error("drop notice for unknown seq {0}")]
    UnknownDrop(DatagramKey),
}

/// Effect of an ack or a drop notice on the sender.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignalEffect {
    pub window_changed: bool,
    /// The dropped request went back to the admission queue.
    pub retried: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub arrived: u64,
    pub discarded_at_edge: u64,
    pub injected: u64,
    pub acked: u64,
    pub dropped: u64,
    pub retried: u64,
}

/// Sender-side state of one flow.
#[derive(Debug, Clone)]
pub struct Flow {
    spec: FlowSpec,
    window: CongestionWindow,
    pending: VecDeque<PendingRequest>,
    in_flight: BTreeMap<u64, PendingRequest>,
    next_seq: u64,
    next_request_id: u64,
    phase: FlowPhase,
    /// Source -> destination -> source classical delay.
    rtt_s: f64,
    counters: FlowCounters,
}

impl Flow {
    pub fn new(spec: FlowSpec, rtt_s: f64) -> Self {
        let window = CongestionWindow::new(spec.max_window);
        Flow {
            spec,
            window,
            pending: VecDeque::new(),
            in_flight: BTreeMap::new(),
            next_seq: 0,
            next_request_id: 0,
            phase: FlowPhase::Opening,
            rtt_s,
            counters: FlowCounters::default(),
        }
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn id(&self) -> FlowId {
        self.spec.flow_id
    }

    pub fn window(&self) -> &CongestionWindow {
        &self.window
    }

    pub fn phase(&self) -> FlowPhase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: FlowPhase) {
        self.phase = phase;
    }

    pub fn counters(&self) -> FlowCounters {
        self.counters
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_in_flight(&self, seq: u64) -> bool {
        self.in_flight.contains_key(&seq)
    }

    /// Seqs currently in the network, ascending.
    pub fn in_flight_seqs(&self) -> impl Iterator<Item = u64> + '_ {
        self.in_flight.keys().copied()
    }

    /// True when a finite batch has been fully delivered.
    pub fn is_complete(&self) -> bool {
        match self.spec.demand {
            DemandModel::Batch { count } => {
                self.counters.acked >= count && self.pending.is_empty() && self.in_flight.is_empty()
            }
            _ => false,
        }
    }

    /// A new request arrives from the application. Returns false if the
    /// admission queue is full and the request was discarded.
    pub fn on_request_arrival(&mut self, now: SimTime) -> bool {
        self.counters.arrived += 1;
        if let Some(bound) = self.spec.admission_bound {
            if self.pending.len() >= bound {
                self.counters.discarded_at_edge += 1;
                return false;
            }
        }
        let id = self.next_request_id;
        self.next_request_id += 1;
        self.pending.push_back(PendingRequest { id, arrival: now });
        true
    }

    fn window_open(&self) -> bool {
        !self.spec.cc.controls_window() || self.in_flight.len() < self.window.size() as usize
    }

    /// Move requests into the network while the window allows. Returns the
    /// `(seq, request)` pairs to inject, in order.
    pub fn admit_requests(&mut self, now: SimTime) -> Vec<(u64, PendingRequest)> {
        let mut admitted = Vec::new();
        if self.phase != FlowPhase::Transmitting {
            return admitted;
        }
        while self.window_open() {
            let request = match self.pending.pop_front() {
                Some(r) => r,
                None if self.spec.demand == DemandModel::Infinite => {
                    let id = self.next_request_id;
                    self.next_request_id += 1;
                    self.counters.arrived += 1;
                    PendingRequest { id, arrival: now }
                }
                None => break,
            };
            let seq = self.next_seq;
            self.next_seq += 1;
            self.in_flight.insert(seq, request);
            self.counters.injected += 1;
            admitted.push((seq, request));
        }
        admitted
    }

    fn key(&self, seq: u64) -> DatagramKey {
        DatagramKey {
            flow: self.spec.flow_id,
            seq,
        }
    }

    pub fn on_ack(&mut self, now: SimTime, ack: &QtcpAck) -> Result<SignalEffect, TransportError> {
        if self.in_flight.remove(&ack.seq).is_none() {
            return Err(TransportError::UnknownAck(self.key(ack.seq)));
        }
        self.counters.acked += 1;
        let window_changed = if !self.spec.cc.controls_window() {
            false
        } else if ack.congestion_mark && self.spec.cc.uses_aqm() {
            self.on_congestion(now, CongestionCause::MarkedAck)
        } else {
            self.window.on_clean_ack()
        };
        Ok(SignalEffect {
            window_changed,
            retried: false,
        })
    }

    pub fn on_drop_notice(
        &mut self,
        now: SimTime,
        seq: u64,
    ) -> Result<SignalEffect, TransportError> {
        let request = self
            .in_flight
            .remove(&seq)
            .ok_or(TransportError::UnknownDrop(self.key(seq)))?;
        self.counters.dropped += 1;
        if !self.spec.cc.controls_window() {
            return Ok(SignalEffect {
                window_changed: false,
                retried: false,
            });
        }
        let window_changed = self.on_congestion(now, CongestionCause::DropNotice);
        self.pending.push_front(request);
        self.counters.retried += 1;
        Ok(SignalEffect {
            window_changed,
            retried: true,
        })
    }

    /// Halve the window; bursts within one round trip count once.
    pub fn on_congestion(&mut self, now: SimTime, _cause: CongestionCause) -> bool {
        self.window.on_congestion(now, self.rtt_s)
    }
}
