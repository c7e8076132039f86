//! Declarative scenario files (TOML) and their resolution into a runnable
//! [`Scenario`].
//!
//! Every field has a default, so the smallest valid file is empty: a 5-node
//! chain of 40 km links with a single Poisson flow from `A` to `B`. The
//! effective configuration, with defaults filled in, serializes back to TOML
//! and reproduces the same run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::aqm::PiParams;
use crate::error::{config_err, Error, Result};
use crate::ids::{FlowId, NodeId};
use crate::link::{SelectionPolicy, ServiceMode};
use crate::network::{NodeKind, RoutingTable, Topology, TopologyLink, TopologyNode};
use crate::physics::{
    LinkParams, NoiseParams, DEFAULT_ATTENUATION_LENGTH_KM, FIBER_LIGHT_SPEED_KM_S,
};
use crate::sim::SimTime;
use crate::transport::{CcMode, DemandModel, FlowSpec};

/// PI gains shipped as defaults, in probability per second of buffering error.
pub const DEFAULT_PI_ALPHA: f64 = 2.5;
pub const DEFAULT_PI_BETA: f64 = 2.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub link_layer: LinkLayerConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub aqm: AqmConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regimes: Vec<RegimeConfig>,
    #[serde(default = "default_flows")]
    pub flows: Vec<FlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_flows() -> Vec<FlowConfig> {
    vec![FlowConfig::default()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub duration_s: f64,
    pub seed: u64,
    /// Records before this time are flagged and left out of summaries.
    pub warmup_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            duration_s: 1.0,
            seed: 1,
            warmup_s: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub eta: f64,
    pub attempt_freq_hz: f64,
    pub coherence_time_s: f64,
    pub initial_fidelity: f64,
    pub attenuation_length_km: f64,
    pub light_speed_km_s: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            eta: 0.4,
            attempt_freq_hz: 1e5,
            coherence_time_s: 0.1,
            initial_fidelity: 0.99,
            attenuation_length_km: DEFAULT_ATTENUATION_LENGTH_KM,
            light_speed_km_s: FIBER_LIGHT_SPEED_KM_S,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkLayerConfig {
    pub mode: ServiceMode,
    pub policy: SelectionPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Total number of nodes including both end nodes.
    pub nodes: usize,
    pub link_length_km: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKindConfig {
    EndNode,
    Switch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub kind: NodeKindConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_per_interface: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt_freq_hz: Option<f64>,
}

/// Either a chain shorthand (`A`, `s1`, ..., `B`) or explicit nodes and links.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub memory_per_interface: usize,
    /// Maximum time a q-datagram may stay buffered at a switch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainConfig>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeConfig>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkConfig>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            memory_per_interface: 50,
            cutoff_s: None,
            chain: None,
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AqmConfig {
    /// Run the switch controllers even when no flow is in `aimd+aqm` mode.
    pub enabled: bool,
    pub target_buffering_s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sample_period_s: f64,
}

impl Default for AqmConfig {
    fn default() -> Self {
        AqmConfig {
            enabled: false,
            target_buffering_s: 5e-4,
            alpha: DEFAULT_PI_ALPHA,
            beta: DEFAULT_PI_BETA,
            sample_period_s: 1e-3,
        }
    }
}

impl AqmConfig {
    pub fn pi_params(&self) -> PiParams {
        PiParams {
            alpha: self.alpha,
            beta: self.beta,
            target_buffering_s: self.target_buffering_s,
            sample_period_s: self.sample_period_s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub cc: CcMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admission_bound: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_window: Option<u32>,
}

/// A load level that applies from `start_s` until the next regime begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub name: String,
    pub start_s: f64,
    pub load: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DemandConfig {
    /// Either `load` (fraction of the bottleneck generation rate, shared by
    /// the flows of this entry) or an explicit per-flow `rate_hz`.
    Poisson {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_hz: Option<f64>,
    },
    Infinite,
    Batch {
        count: u64,
    },
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig::Poisson {
            load: Some(0.85),
            rate_hz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub source: String,
    pub destination: String,
    /// Number of identical flows this entry expands to.
    pub count: u32,
    pub start_s: f64,
    /// Overrides `transport.cc` for these flows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cc: Option<CcMode>,
    pub demand: DemandConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            source: "A".into(),
            destination: "B".into(),
            count: 1,
            start_s: 0.0,
            cc: None,
            demand: DemandConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParameter {
    /// Dotted path into the scenario, e.g. `aqm.target_buffering_s` or
    /// `flows.0.count`.
    pub name: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Seeds per point: `run.seed`, `run.seed + 1`, ...
    #[serde(default = "default_sweep_seeds")]
    pub seeds: u32,
    #[serde(default)]
    pub parameters: Vec<SweepParameter>,
}

fn default_sweep_seeds() -> u32 {
    16
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(p) => Error::Config(format!("{}: {}", path.display(), p)),
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    /// The effective configuration as TOML.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable in TOML")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self
    }

    /// Whether any switch runs a PI controller.
    pub fn aqm_active(&self) -> bool {
        self.aqm.enabled
            || self
                .flows
                .iter()
                .any(|f| f.cc.unwrap_or(self.transport.cc).uses_aqm())
    }

    /// Check everything that can be checked without building the network.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    fn build_topology(&self) -> Result<Topology> {
        let t = &self.topology;
        let p = &self.physics;
        if t.memory_per_interface < 1 {
            return config_err("topology.memory_per_interface must be at least 1");
        }
        let link_params = |length_km: f64, eta: Option<f64>, freq: Option<f64>, at: &str| {
            let mut params = LinkParams::new(
                length_km,
                eta.unwrap_or(p.eta),
                freq.unwrap_or(p.attempt_freq_hz),
            )
            .map_err(|e| Error::Config(format!("{at}: {}", strip_prefix(&e))))?;
            params.attenuation_length_km = p.attenuation_length_km;
            params
                .validate()
                .map_err(|e| Error::Config(format!("{at}: {}", strip_prefix(&e))))?;
            Ok::<_, Error>(params)
        };

        let explicit = !t.nodes.is_empty() || !t.links.is_empty();
        if explicit && t.chain.is_some() {
            return config_err(
                "topology: give either `chain` or explicit `nodes`/`links`, not both",
            );
        }
        if !explicit {
            let chain = t.chain.clone().unwrap_or(ChainConfig {
                nodes: 5,
                link_length_km: 40.0,
            });
            if chain.nodes < 2 {
                return config_err("topology.chain.nodes must be at least 2");
            }
            let nodes = (0..chain.nodes)
                .map(|i| {
                    let (name, kind) = if i == 0 {
                        ("A".to_string(), NodeKind::EndNode)
                    } else if i == chain.nodes - 1 {
                        ("B".to_string(), NodeKind::EndNode)
                    } else {
                        (format!("s{i}"), NodeKind::Switch)
                    };
                    TopologyNode {
                        name,
                        kind,
                        memory_per_interface: t.memory_per_interface,
                    }
                })
                .collect();
            let links = (0..chain.nodes - 1)
                .map(|i| {
                    Ok(TopologyLink {
                        endpoints: (NodeId(i as u32), NodeId(i as u32 + 1)),
                        params: link_params(
                            chain.link_length_km,
                            None,
                            None,
                            "topology.chain.link_length_km",
                        )?,
                    })
                })
                .collect::<Result<_>>()?;
            let topo = Topology { nodes, links };
            topo.validate()?;
            return Ok(topo);
        }

        let mut seen = BTreeSet::new();
        let nodes: Vec<TopologyNode> = t
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if !seen.insert(n.name.as_str()) {
                    return config_err(format!("topology.nodes[{i}]: duplicate name '{}'", n.name));
                }
                let memory = n.memory_per_interface.unwrap_or(t.memory_per_interface);
                if memory < 1 {
                    return config_err(format!(
                        "topology.nodes[{i}].memory_per_interface must be at least 1"
                    ));
                }
                Ok(TopologyNode {
                    name: n.name.clone(),
                    kind: match n.kind {
                        NodeKindConfig::EndNode => NodeKind::EndNode,
                        NodeKindConfig::Switch => NodeKind::Switch,
                    },
                    memory_per_interface: memory,
                })
            })
            .collect::<Result<_>>()?;
        let lookup = |name: &str, at: String| {
            nodes
                .iter()
                .position(|n| n.name == name)
                .map(|i| NodeId(i as u32))
                .ok_or_else(|| Error::Config(format!("{at}: unknown node '{name}'")))
        };
        let links = t
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let a = lookup(&l.a, format!("topology.links[{i}].a"))?;
                let b = lookup(&l.b, format!("topology.links[{i}].b"))?;
                Ok(TopologyLink {
                    endpoints: (a, b),
                    params: link_params(
                        l.length_km,
                        l.eta,
                        l.attempt_freq_hz,
                        &format!("topology.links[{i}]"),
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        let topo = Topology { nodes, links };
        topo.validate()?;
        Ok(topo)
    }

    /// Build the runnable scenario. All semantic validation happens here.
    pub fn resolve(&self) -> Result<Scenario> {
        let run = &self.run;
        if !(run.duration_s > 0.0 && run.duration_s.is_finite()) {
            return config_err("run.duration_s must be positive and finite");
        }
        if !(run.warmup_s >= 0.0 && run.warmup_s < run.duration_s) {
            return config_err("run.warmup_s must be in [0, run.duration_s)");
        }
        let p = &self.physics;
        if p.light_speed_km_s.is_nan() || p.light_speed_km_s <= 0.0 {
            return config_err("physics.light_speed_km_s must be positive");
        }
        let noise = NoiseParams {
            coherence_time_s: p.coherence_time_s,
            initial_fidelity: p.initial_fidelity,
        };
        noise
            .validate()
            .map_err(|e| Error::Config(format!("physics: {}", strip_prefix(&e))))?;
        if let Some(c) = self.topology.cutoff_s {
            if c.is_nan() || c <= 0.0 {
                return config_err("topology.cutoff_s must be positive");
            }
        }

        let topology = self.build_topology()?;
        let routing = RoutingTable::compute(&topology)?;

        let aqm = if self.aqm_active() {
            let params = self.aqm.pi_params();
            params
                .validate()
                .map_err(|e| Error::Config(format!("aqm: {}", strip_prefix(&e))))?;
            Some(params)
        } else {
            None
        };

        if let Some(0) = self.transport.max_window {
            return config_err("transport.max_window must be at least 1");
        }

        let mut regimes = Vec::new();
        for (i, r) in self.regimes.iter().enumerate() {
            if !(r.load >= 0.0 && r.load.is_finite()) {
                return config_err(format!("regimes[{i}].load must be non-negative"));
            }
            if !(r.start_s >= 0.0 && r.start_s < run.duration_s) {
                return config_err(format!(
                    "regimes[{i}].start_s must be in [0, run.duration_s)"
                ));
            }
            if i > 0 && r.start_s <= self.regimes[i - 1].start_s {
                return config_err(format!("regimes[{i}].start_s must increase"));
            }
        }

        let mut flows = Vec::new();
        // Per flow: `Some(load share)` when the rate follows the regimes.
        let mut load_driven: Vec<Option<(f64, f64)>> = Vec::new();
        for (i, f) in self.flows.iter().enumerate() {
            let at = format!("flows[{i}]");
            let src = topology.node_by_name(&f.source).ok_or_else(|| {
                Error::Config(format!("{at}.source: unknown node '{}'", f.source))
            })?;
            let dst = topology.node_by_name(&f.destination).ok_or_else(|| {
                Error::Config(format!(
                    "{at}.destination: unknown node '{}'",
                    f.destination
                ))
            })?;
            if src == dst {
                return config_err(format!("{at}: source and destination must differ"));
            }
            for (role, n) in [("source", src), ("destination", dst)] {
                if topology.node(n).kind != NodeKind::EndNode {
                    return config_err(format!(
                        "{at}.{role}: '{}' is not an end node",
                        topology.node(n).name
                    ));
                }
            }
            if f.count == 0 {
                return config_err(format!("{at}.count must be at least 1"));
            }
            if !(f.start_s >= 0.0 && f.start_s.is_finite()) {
                return config_err(format!("{at}.start_s must be non-negative"));
            }
            let path = routing
                .path(src, dst)
                .expect("routing covers all end nodes");
            let bottleneck = path
                .windows(2)
                .map(|w| {
                    let (_, link) = routing.next_hop(w[0], w[1]).expect("adjacent on path");
                    topology.link(link).params.mean_rate()
                })
                .fold(f64::INFINITY, f64::min);

            let (demand, share) = match f.demand {
                DemandConfig::Poisson { load, rate_hz } => match (load, rate_hz) {
                    (Some(load), None) => {
                        if !(load >= 0.0 && load.is_finite()) {
                            return config_err(format!("{at}.demand.load must be non-negative"));
                        }
                        let per_flow_mu = bottleneck / f.count as f64;
                        (
                            DemandModel::Poisson {
                                rate_hz: load * per_flow_mu,
                            },
                            Some((load, per_flow_mu)),
                        )
                    }
                    (None, Some(rate)) => {
                        if !(rate >= 0.0 && rate.is_finite()) {
                            return config_err(format!("{at}.demand.rate_hz must be non-negative"));
                        }
                        (DemandModel::Poisson { rate_hz: rate }, None)
                    }
                    _ => {
                        return config_err(format!(
                            "{at}.demand: poisson demand needs exactly one of `load` or `rate_hz`"
                        ))
                    }
                },
                DemandConfig::Infinite => (DemandModel::Infinite, None),
                DemandConfig::Batch { count } => (DemandModel::Batch { count }, None),
            };
            for _ in 0..f.count {
                let flow_id = FlowId(flows.len() as u32);
                flows.push(FlowSpec {
                    flow_id,
                    source: src,
                    destination: dst,
                    demand,
                    start_time: SimTime::from_secs(f.start_s),
                    cc: f.cc.unwrap_or(self.transport.cc),
                    max_window: self.transport.max_window,
                    admission_bound: self.transport.admission_bound,
                });
                load_driven.push(share);
            }
        }

        let resolved_regimes = self
            .regimes
            .iter()
            .enumerate()
            .map(|(i, r)| ResolvedRegime {
                name: r.name.clone(),
                start_s: r.start_s,
                end_s: self
                    .regimes
                    .get(i + 1)
                    .map_or(run.duration_s, |n| n.start_s),
                flow_rates: load_driven
                    .iter()
                    .map(|s| s.map(|(_, per_flow_mu)| r.load * per_flow_mu))
                    .collect(),
            })
            .collect::<Vec<_>>();
        regimes.extend(resolved_regimes);

        Ok(Scenario {
            topology,
            routing,
            noise,
            light_speed_km_s: p.light_speed_km_s,
            link_mode: self.link_layer.mode,
            link_policy: self.link_layer.policy,
            flows,
            regimes,
            aqm,
            cutoff_s: self.topology.cutoff_s,
            duration_s: run.duration_s,
            warmup_s: run.warmup_s,
            seed: run.seed,
        })
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// A load regime with per-flow Poisson rates; `None` keeps the flow's rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRegime {
    pub name: String,
    pub start_s: f64,
    pub end_s: f64,
    pub flow_rates: Vec<Option<f64>>,
}

/// Everything the engine needs, validated.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub topology: Topology,
    pub routing: RoutingTable,
    pub noise: NoiseParams,
    pub light_speed_km_s: f64,
    pub link_mode: ServiceMode,
    pub link_policy: SelectionPolicy,
    pub flows: Vec<FlowSpec>,
    pub regimes: Vec<ResolvedRegime>,
    pub aqm: Option<PiParams>,
    pub cutoff_s: Option<f64>,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub seed: u64,
}

impl Scenario {
    /// One-way classical delay between two nodes along the routed path.
    pub fn path_delay(&self, from: NodeId, to: NodeId) -> f64 {
        self.routing.distance_km(from, to) / self.light_speed_km_s
    }
}

/// Set a value at a dotted path inside a parsed TOML document. Numeric
/// segments index into arrays; missing tables are created.
pub fn set_dotted(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return config_err(format!("sweep parameter '{path}': empty path segment"));
    }
    let mut root = toml::Value::Table(std::mem::take(doc));
    let outcome = set_in(&mut root, &segments, path, value);
    if let toml::Value::Table(t) = root {
        *doc = t;
    }
    outcome
}

fn set_in(node: &mut toml::Value, segments: &[&str], path: &str, value: toml::Value) -> Result<()> {
    let (seg, rest) = segments.split_first().expect("non-empty path");
    let child = match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(seg.to_string(), value);
                return Ok(());
            }
            t.entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let idx: usize = seg.parse().map_err(|_| {
                Error::Config(format!(
                    "sweep parameter '{path}': '{seg}' is not an array index"
                ))
            })?;
            let len = a.len();
            let slot = a.get_mut(idx).ok_or_else(|| {
                Error::Config(format!(
                    "sweep parameter '{path}': index {idx} out of range (length {len})"
                ))
            })?;
            if rest.is_empty() {
                *slot = value;
                return Ok(());
            }
            slot
        }
        _ => {
            return config_err(format!(
                "sweep parameter '{path}': cannot descend into '{seg}'"
            ))
        }
    };
    set_in(child, rest, path, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_chain() {
        let cfg = ScenarioConfig::from_toml_str("").unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.topology.nodes.len(), 5);
        assert_eq!(s.topology.links.len(), 4);
        assert_eq!(s.topology.nodes[2].name, "s2");
        assert_eq!(s.flows.len(), 1);
        assert!(s.aqm.is_some());
        let mu = s.topology.links[0].params.mean_rate();
        match s.flows[0].demand {
            DemandModel::Poisson { rate_hz } => assert!((rate_hz - 0.85 * mu).abs() < 1e-9),
            _ => panic!("default demand is poisson"),
        }
    }

    #[test]
    fn twelve_flows_share_the_load() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            [[flows]]
            count = 12
            demand = { kind = "poisson", load = 0.85 }
            "#,
        )
        .unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.flows.len(), 12);
        match s.flows[11].demand {
            DemandModel::Poisson { rate_hz } => {
                assert!((rate_hz - 459.908).abs() < 0.01, "{rate_hz}")
            }
            _ => panic!(),
        }
    }

    #[test]
    fn regimes_resolve_rates_and_bounds() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            [run]
            duration_s = 1.0
            [[regimes]]
            name = "low"
            start_s = 0.0
            load = 0.85
            [[regimes]]
            name = "high"
            start_s = 0.25
            load = 0.995
            [[flows]]
            count = 2
            [[flows]]
            demand = { kind = "poisson", rate_hz = 10.0 }
            "#,
        )
        .unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.regimes[0].end_s, 0.25);
        assert_eq!(s.regimes[1].end_s, 1.0);
        let mu = s.topology.links[0].params.mean_rate();
        assert!((s.regimes[1].flow_rates[0].unwrap() - 0.995 * mu / 2.0).abs() < 1e-9);
        assert_eq!(s.regimes[1].flow_rates[2], None);
    }

    #[test]
    fn zero_length_link_is_rejected() {
        let err = ScenarioConfig::from_toml_str(
            r#"
            [topology.chain]
            nodes = 3
            link_length_km = 0.0
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("link_length_km"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let err =
            ScenarioConfig::from_toml_str("[run]\nduration_s = 1.0\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn unknown_node_is_rejected() {
        let err = ScenarioConfig::from_toml_str("[[flows]]\nsource = \"C\"\n").unwrap_err();
        assert!(err.to_string().contains("flows[0].source"), "{err}");
    }

    #[test]
    fn switch_cannot_terminate_a_flow() {
        let err = ScenarioConfig::from_toml_str("[[flows]]\ndestination = \"s2\"\n").unwrap_err();
        assert!(err.to_string().contains("not an end node"), "{err}");
    }

    #[test]
    fn pi_gains_are_checked_only_when_aqm_runs() {
        let text = "[transport]\ncc = \"aimd\"\n[aqm]\nalpha = 1.0\nbeta = 2.0\n";
        assert!(ScenarioConfig::from_toml_str(text).is_ok());
        let text = "[transport]\ncc = \"aimd+aqm\"\n[aqm]\nalpha = 1.0\nbeta = 2.0\n";
        assert!(ScenarioConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn explicit_topology() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            [[topology.nodes]]
            name = "alice"
            kind = "end-node"
            [[topology.nodes]]
            name = "hub"
            kind = "switch"
            memory_per_interface = 4
            [[topology.nodes]]
            name = "bob"
            kind = "end-node"
            [[topology.links]]
            a = "alice"
            b = "hub"
            length_km = 10.0
            [[topology.links]]
            a = "hub"
            b = "bob"
            length_km = 30.0
            eta = 0.8
            [[flows]]
            source = "alice"
            destination = "bob"
            demand = { kind = "batch", count = 5 }
            "#,
        )
        .unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.topology.nodes[1].memory_per_interface, 4);
        assert_eq!(s.topology.links[1].params.eta, 0.8);
        assert!((s.path_delay(NodeId(0), NodeId(2)) - 40.0 / 2e5).abs() < 1e-15);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ScenarioConfig::from_toml_str(
            r#"
            [transport]
            cc = "off"
            max_window = 3
            [[regimes]]
            name = "only"
            start_s = 0.0
            load = 0.5
            [[flows]]
            count = 3
            cc = "aimd"
            [sweep]
            seeds = 2
            [[sweep.parameters]]
            name = "aqm.target_buffering_s"
            values = [1e-4, 2e-4]
            "#,
        )
        .unwrap();
        let echoed = cfg.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_paths_reach_tables_and_arrays() {
        let mut doc: toml::Table = toml::from_str("[[flows]]\ncount = 1\n").unwrap();
        set_dotted(&mut doc, "aqm.target_buffering_s", toml::Value::Float(1e-3)).unwrap();
        set_dotted(&mut doc, "flows.0.count", toml::Value::Integer(6)).unwrap();
        let cfg: ScenarioConfig = doc.clone().try_into().unwrap();
        assert_eq!(cfg.aqm.target_buffering_s, 1e-3);
        assert_eq!(cfg.flows[0].count, 6);
        assert!(set_dotted(&mut doc, "flows.4.count", toml::Value::Integer(1)).is_err());
        assert!(set_dotted(&mut doc, "flows.x", toml::Value::Integer(1)).is_err());
    }
}
