//! Link controllers.
//!
//! A controller sits at the midpoint of its link, collects pair requests from
//! both endpoints, drives the generation process and decides which pending
//! request each new pair serves.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{DatagramKey, LinkId, NodeId};
use crate::physics::{sample_lleg_interval, LinkParams};
use crate::sim::{RngStream, SimTime};

/// When the controller runs the generation process.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceMode {
    /// Generate only while at least one request is pending.
    #[default]
    OnDemand,
    /// Generate all the time and cache pairs nobody asked for yet.
    Continuous,
}

/// Which pending request a fresh pair is assigned to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Most recent request of the endpoint with the largest backlog.
    #[default]
    YoungestLargestBacklog,
    /// Earliest request of the endpoint with the largest backlog.
    OldestLargestBacklog,
}

/// Identifies one link-level pair. Never reused within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkLevelLabel {
    pub link: LinkId,
    pub pair_counter: u64,
}

impl fmt::Display for LinkLevelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.link, self.pair_counter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkRequest {
    pub requester: NodeId,
    pub seq: DatagramKey,
    pub arrival_time: SimTime,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("duplicate request {seq} from {requester} on {link}")]
    DuplicateRequest {
        link: LinkId,
        requester: NodeId,
        seq: DatagramKey,
    },
    #[error("{requester} is not an endpoint of {link}")]
    NotAnEndpoint { link: LinkId, requester: NodeId },
}

/// What the caller must do after a request reaches the controller.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestOutcome {
    /// The request waits for a future pair.
    Queued,
    /// The link was idle: schedule a generation success after
    /// [`LinkController::sample_interval`].
    StartGeneration,
    /// A cached pair was assigned immediately.
    ServedFromCache {
        label: LinkLevelLabel,
        request: LinkRequest,
    },
}

/// Result of one successful generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub label: LinkLevelLabel,
    /// `None` when nothing was pending (continuous mode only).
    pub served: Option<LinkRequest>,
    /// Whether another generation should be scheduled right away.
    pub keep_generating: bool,
}

#[derive(Debug)]
pub struct LinkController {
    id: LinkId,
    /// Endpoints sorted by address; index 0 wins backlog ties.
    endpoints: [NodeId; 2],
    pending: [VecDeque<LinkRequest>; 2],
    outstanding: HashSet<(NodeId, DatagramKey)>,
    mode: ServiceMode,
    policy: SelectionPolicy,
    generation_active: bool,
    pair_counter: u64,
    cached: Vec<LinkLevelLabel>,
    q: f64,
    attempt_freq_hz: f64,
    midpoint_delay_s: f64,
    rng: RngStream,
}

impl LinkController {
    pub fn new(
        id: LinkId,
        endpoints: (NodeId, NodeId),
        params: &LinkParams,
        light_speed_km_s: f64,
        mode: ServiceMode,
        policy: SelectionPolicy,
        rng: RngStream,
    ) -> Self {
        let (a, b) = endpoints;
        let endpoints = if a <= b { [a, b] } else { [b, a] };
        LinkController {
            id,
            endpoints,
            pending: [VecDeque::new(), VecDeque::new()],
            outstanding: HashSet::new(),
            mode,
            policy,
            generation_active: false,
            pair_counter: 0,
            cached: Vec::new(),
            q: params.success_prob(),
            attempt_freq_hz: params.attempt_freq_hz,
            midpoint_delay_s: params.midpoint_delay(light_speed_km_s),
            rng,
        }
    }

    pub fn id(&self) -> LinkId {
        self.id
    }

    pub fn endpoints(&self) -> [NodeId; 2] {
        self.endpoints
    }

    pub fn mode(&self) -> ServiceMode {
        self.mode
    }

    pub fn midpoint_delay(&self) -> f64 {
        self.midpoint_delay_s
    }

    pub fn is_generating(&self) -> bool {
        self.generation_active
    }

    pub fn pending_len(&self) -> usize {
        self.pending[0].len() + self.pending[1].len()
    }

    pub fn backlog(&self, node: NodeId) -> usize {
        self.endpoint_index(node)
            .map(|i| self.pending[i].len())
            .unwrap_or(0)
    }

    pub fn cached_len(&self) -> usize {
        self.cached.len()
    }

    /// The other endpoint of this link.
    pub fn peer_of(&self, node: NodeId) -> NodeId {
        if node == self.endpoints[0] {
            self.endpoints[1]
        } else {
            self.endpoints[0]
        }
    }

    fn endpoint_index(&self, node: NodeId) -> Option<usize> {
        self.endpoints.iter().position(|&n| n == node)
    }

    /// Time from the start of a generation to its success.
    pub fn sample_interval(&mut self) -> f64 {
        sample_lleg_interval(self.q, self.attempt_freq_hz, &mut self.rng)
    }

    /// Mark the generation process as running (continuous mode start-up).
    pub fn start(&mut self) -> bool {
        let was_idle = !self.generation_active;
        self.generation_active = true;
        was_idle
    }

    /// A request has reached the controller.
    pub fn request_pair(&mut self, request: LinkRequest) -> Result<RequestOutcome, LinkError> {
        let idx = self
            .endpoint_index(request.requester)
            .ok_or(LinkError::NotAnEndpoint {
                link: self.id,
                requester: request.requester,
            })?;
        if !self.outstanding.insert((request.requester, request.seq)) {
            return Err(LinkError::DuplicateRequest {
                link: self.id,
                requester: request.requester,
                seq: request.seq,
            });
        }

        if let Some(label) = self.cached.pop() {
            self.outstanding.remove(&(request.requester, request.seq));
            return Ok(RequestOutcome::ServedFromCache { label, request });
        }

        self.pending[idx].push_back(request);
        match self.mode {
            ServiceMode::OnDemand if !self.generation_active => {
                self.generation_active = true;
                Ok(RequestOutcome::StartGeneration)
            }
            _ => Ok(RequestOutcome::Queued),
        }
    }

    /// Pick and remove the request a fresh pair will serve.
    pub fn select_request(&mut self) -> Option<LinkRequest> {
        let idx = match (self.pending[0].len(), self.pending[1].len()) {
            (0, 0) => return None,
            (a, b) if a >= b => 0,
            _ => 1,
        };
        let queue = &mut self.pending[idx];
        let request = match self.policy {
            SelectionPolicy::YoungestLargestBacklog => queue.pop_back(),
            SelectionPolicy::OldestLargestBacklog => queue.pop_front(),
        }?;
        self.outstanding.remove(&(request.requester, request.seq));
        Some(request)
    }

    /// A generation completed at the midpoint.
    pub fn on_generation_success(&mut self) -> GenerationOutcome {
        let label = LinkLevelLabel {
            link: self.id,
            pair_counter: self.pair_counter,
        };
        self.pair_counter += 1;
        let served = self.select_request();
        let keep_generating = match self.mode {
            ServiceMode::Continuous => true,
            ServiceMode::OnDemand => self.pending_len() > 0,
        };
        self.generation_active = keep_generating;
        GenerationOutcome {
            label,
            served,
            keep_generating,
        }
    }

    /// Record a pair that was stored at both endpoints without a request.
    pub fn push_cached(&mut self, label: LinkLevelLabel) {
        self.cached.push(label);
    }

    /// Forget a cached pair that one of the endpoints had to discard.
    pub fn remove_cached(&mut self, label: LinkLevelLabel) -> bool {
        match self.cached.iter().position(|&l| l == label) {
            Some(i) => {
                self.cached.remove(i);
                true
            }
            None => false,
        }
    }
}
