//! Network layer data model: q-datagrams, topology, static routing and the
//! per-node state that the switching procedure operates on.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use crate::error::{config_err, Result};
use crate::ids::{DatagramKey, FlowId, LinkId, NodeId};
use crate::link::LinkLevelLabel;
use crate::memory::MemoryBank;
use crate::physics::{LinkParams, PauliFrame, WernerParam};
use crate::sim::SimTime;

/// Classical part of an in-flight Bell pair, forwarded hop by hop.
#[derive(Clone, Debug, PartialEq)]
pub struct QDatagram {
    pub source: NodeId,
    pub destination: NodeId,
    pub key: DatagramKey,
    /// Current link-level pair; resolves to a slot at the holding node.
    pub link_label: LinkLevelLabel,
    pub pauli_frame: PauliFrame,
    pub congestion_mark: bool,
    /// When the transport layer admitted the request.
    pub injected_at: SimTime,
    /// When the source half was written into memory.
    pub created_at: SimTime,
    /// Slot of the source half at the source node.
    pub source_label: LinkLevelLabel,
    /// Werner parameter of the pair, excluding the noise still accruing on
    /// the two qubits currently stored at the end points.
    pub werner: WernerParam,
    pub per_hop_buffering: Vec<(NodeId, f64)>,
}

impl QDatagram {
    pub fn flow_id(&self) -> FlowId {
        self.key.flow
    }

    pub fn seq(&self) -> u64 {
        self.key.seq
    }

    /// Number of links traversed so far.
    pub fn hops(&self) -> usize {
        self.per_hop_buffering.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropReason {
    Overflow,
    Cutoff,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Overflow => "overflow",
            DropReason::Cutoff => "cutoff",
        }
    }
}

/// Sent by the node that discarded a q-datagram to the flow source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropNotice {
    pub flow_id: FlowId,
    pub seq: u64,
    pub source: NodeId,
    pub dropping_node: NodeId,
    pub reason: DropReason,
    /// Set when the source-side half has already been released.
    pub source_released: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    EndNode,
    Switch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyNode {
    pub name: String,
    pub kind: NodeKind,
    pub memory_per_interface: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyLink {
    pub endpoints: (NodeId, NodeId),
    pub params: LinkParams,
}

/// Static description of nodes and links.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub nodes: Vec<TopologyNode>,
    pub links: Vec<TopologyLink>,
}

impl Topology {
    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn node(&self, id: NodeId) -> &TopologyNode {
        &self.nodes[id.0 as usize]
    }

    pub fn link(&self, id: LinkId) -> &TopologyLink {
        &self.links[id.0 as usize]
    }

    /// Links attached to `node`, in link-id order.
    pub fn interfaces(&self, node: NodeId) -> Vec<LinkId> {
        self.links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.endpoints.0 == node || l.endpoints.1 == node)
            .map(|(i, _)| LinkId(i as u32))
            .collect()
    }

    pub fn end_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::EndNode)
            .map(|(i, _)| NodeId(i as u32))
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return config_err("topology has no nodes");
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.name.as_str()) {
                return config_err(format!("duplicate node name {:?}", n.name));
            }
            if n.memory_per_interface < 1 {
                return config_err(format!(
                    "node {:?} needs at least one memory qubit per interface",
                    n.name
                ));
            }
        }
        let mut pairs = HashSet::new();
        for (i, l) in self.links.iter().enumerate() {
            let (a, b) = l.endpoints;
            if a == b {
                return config_err(format!("link {i} connects a node to itself"));
            }
            let key = (a.min(b), a.max(b));
            if !pairs.insert(key) {
                return config_err(format!(
                    "parallel links between {} and {}",
                    self.node(a).name,
                    self.node(b).name
                ));
            }
            l.params
                .validate()
                .map_err(|e| crate::Error::Config(format!("link {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Static next-hop tables, shortest path by fiber length.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTable {
    /// `next[node][dest] = (next hop, link to use)`.
    next: Vec<BTreeMap<NodeId, (NodeId, LinkId)>>,
    /// Fiber length of the routed path between every pair of nodes.
    distance_km: Vec<Vec<f64>>,
}

impl RoutingTable {
    /// Runs Dijkstra from every destination. Ties go to the lower node address.
    pub fn compute(topology: &Topology) -> Result<Self> {
        let n = topology.nodes.len();
        let mut adj: Vec<Vec<(NodeId, LinkId, f64)>> = vec![Vec::new(); n];
        for (i, l) in topology.links.iter().enumerate() {
            let (a, b) = l.endpoints;
            let id = LinkId(i as u32);
            adj[a.0 as usize].push((b, id, l.params.length_km));
            adj[b.0 as usize].push((a, id, l.params.length_km));
        }
        for list in &mut adj {
            list.sort_by_key(|(peer, _, _)| *peer);
        }

        let mut next = vec![BTreeMap::new(); n];
        let mut distance_km = vec![vec![f64::INFINITY; n]; n];
        for dest in 0..n {
            let mut dist = vec![f64::INFINITY; n];
            let mut hop: Vec<Option<(NodeId, LinkId)>> = vec![None; n];
            dist[dest] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(Reverse((ordered(0.0), dest)));
            while let Some(Reverse((d, u))) = heap.pop() {
                let d = d.0;
                if d > dist[u] {
                    continue;
                }
                for &(v, link, len) in &adj[u] {
                    let nd = d + len;
                    let vi = v.0 as usize;
                    // Equal-length alternatives keep the first (lowest address) parent.
                    if nd < dist[vi] {
                        dist[vi] = nd;
                        hop[vi] = Some((NodeId(u as u32), link));
                        heap.push(Reverse((ordered(nd), vi)));
                    }
                }
            }
            for src in 0..n {
                distance_km[src][dest] = dist[src];
                if let Some(h) = hop[src] {
                    next[src].insert(NodeId(dest as u32), h);
                }
            }
        }

        let table = RoutingTable { next, distance_km };
        let ends: Vec<NodeId> = topology.end_nodes().collect();
        for from in 0..n {
            for &to in &ends {
                if from != to.0 as usize && table.next_hop(NodeId(from as u32), to).is_none() {
                    return config_err(format!(
                        "end node {:?} unreachable from {:?}",
                        topology.node(to).name,
                        topology.nodes[from].name
                    ));
                }
            }
        }
        Ok(table)
    }

    pub fn next_hop(&self, from: NodeId, to: NodeId) -> Option<(NodeId, LinkId)> {
        self.next.get(from.0 as usize)?.get(&to).copied()
    }

    pub fn distance_km(&self, from: NodeId, to: NodeId) -> f64 {
        self.distance_km[from.0 as usize][to.0 as usize]
    }

    /// Node sequence of the routed path, both ends included.
    pub fn path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let (nh, _) = self.next_hop(cur, to)?;
            path.push(nh);
            cur = nh;
            if path.len() > self.next.len() {
                return None;
            }
        }
        Some(path)
    }
}

#[derive(Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn ordered(x: f64) -> OrdF64 {
    OrdF64(x)
}

/// A q-datagram waiting at a switch for its next link-level pair.
#[derive(Clone, Debug)]
pub struct BufferedDatagram {
    pub dgram: QDatagram,
    pub buffering_start: SimTime,
    pub next_link: LinkId,
}

/// Mutable state of one node.
#[derive(Debug)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    interfaces: Vec<LinkId>,
    banks: Vec<MemoryBank>,
    pub buffered: BTreeMap<DatagramKey, BufferedDatagram>,
    /// Awaiting halves evicted before their q-datagram arrived.
    pub evicted_awaiting: HashSet<LinkLevelLabel>,
}

impl Node {
    pub fn new(id: NodeId, kind: NodeKind, interfaces: Vec<LinkId>, capacity: usize) -> Self {
        let banks = interfaces
            .iter()
            .map(|_| MemoryBank::new(capacity))
            .collect();
        Node {
            id,
            kind,
            interfaces,
            banks,
            buffered: BTreeMap::new(),
            evicted_awaiting: HashSet::new(),
        }
    }

    pub fn interfaces(&self) -> &[LinkId] {
        &self.interfaces
    }

    pub fn banks(&self) -> &[MemoryBank] {
        &self.banks
    }

    pub fn bank(&self, link: LinkId) -> &MemoryBank {
        let i = self.iface(link);
        &self.banks[i]
    }

    pub fn bank_mut(&mut self, link: LinkId) -> &mut MemoryBank {
        let i = self.iface(link);
        &mut self.banks[i]
    }

    fn iface(&self, link: LinkId) -> usize {
        self.interfaces
            .iter()
            .position(|&l| l == link)
            .unwrap_or_else(|| panic!("{} has no interface on {}", self.id, link))
    }

    pub fn occupied(&self) -> usize {
        self.banks.iter().map(MemoryBank::len).sum()
    }
}
