//! Discrete-event simulator of a packet-switched quantum entanglement
//! distribution network.
//!
//! Bell pairs are produced link by link, stitched end to end by sequential
//! entanglement swapping as q-datagrams travel hop by hop, and admitted by
//! QTCP flows under AIMD congestion control, optionally with PI active queue
//! management at the switches. Pair quality is tracked analytically as a
//! Werner parameter.
//!
//! The usual entry points are [`ScenarioConfig`] to load a scenario,
//! [`simulate`] to run it, and [`run_scenario`] / [`run_sweep`] to run and
//! write CSV bundles.

pub mod aqm;
pub mod config;
pub mod engine;
pub mod error;
pub mod ids;
pub mod link;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod output;
pub mod physics;
pub mod sim;
pub mod sweep;
pub mod transport;

pub use aqm::{PiController, PiParams, PiSample};
pub use config::{Scenario, ScenarioConfig};
pub use engine::{
    simulate, AqmSample, Conservation, RunOptions, RunOutput, Simulation, WindowSample,
};
pub use error::{Error, Result};
pub use ids::{DatagramKey, FlowId, LinkId, NodeId};
pub use link::{LinkController, LinkLevelLabel, LinkRequest, SelectionPolicy, ServiceMode};
pub use memory::{MemoryBank, SlotRole};
pub use metrics::{DeliveryRecord, DropRecord, RunSummary, SummaryRow};
pub use network::{DropNotice, DropReason, QDatagram, RoutingTable, Topology};
pub use output::{read_deliveries, read_summary, write_bundle};
pub use physics::{BsmOutcome, LinkParams, NoiseParams, PauliFrame, WernerParam};
pub use sim::{RngStream, Scheduler, SimTime};
pub use sweep::{run_scenario, run_sweep, SweepOutcome, SweepPlan};
pub use transport::{CcMode, CongestionWindow, DemandModel, Flow, FlowSpec};
