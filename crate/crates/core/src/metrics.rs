//! Delivery records and the quantities derived from them: fidelity
//! statistics, sliding-window throughput, BB84 secret-key rate and a
//! negativity-based utility.

use std::collections::BTreeMap;

use crate::ids::{FlowId, NodeId};
use crate::network::DropReason;
use crate::physics::{fidelity_to_werner, PauliFrame, WernerParam};

/// Default sliding window for throughput series, seconds.
pub const THROUGHPUT_WINDOW_S: f64 = 10e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct DeliveryRecord {
    pub flow_id: FlowId,
    pub seq: u64,
    pub source: NodeId,
    pub destination: NodeId,
    pub injected_at: f64,
    pub delivered_at: f64,
    pub e2e_latency: f64,
    pub w_final: WernerParam,
    pub hops: usize,
    pub congestion_mark: bool,
    pub pauli_frame: PauliFrame,
    pub per_hop_buffering: Vec<(NodeId, f64)>,
    pub warmup: bool,
}

impl DeliveryRecord {
    pub fn fidelity(&self) -> f64 {
        self.w_final.fidelity()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropRecord {
    pub flow_id: FlowId,
    pub seq: u64,
    pub node: NodeId,
    pub reason: DropReason,
    pub dropped_at: f64,
    pub warmup: bool,
}

/// Samples of `count in (t - window, t] / window` at each of `sample_times`.
///
/// `delivery_times` must be sorted ascending.
pub fn throughput_series(delivery_times: &[f64], window: f64, sample_times: &[f64]) -> Vec<f64> {
    debug_assert!(delivery_times.windows(2).all(|w| w[0] <= w[1]));
    sample_times
        .iter()
        .map(|&t| {
            let hi = delivery_times.partition_point(|&d| d <= t);
            let lo = delivery_times.partition_point(|&d| d <= t - window);
            (hi - lo) as f64 / window
        })
        .collect()
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Quantum bit error rate of a Werner pair with fidelity `F`: `2(1 - F)/3`.
pub fn werner_qber(fidelity: f64) -> f64 {
    2.0 * (1.0 - fidelity) / 3.0
}

/// BB84 secret key rate `R * max(0, 1 - 2 h(Q))`, bits per second.
pub fn skr_bb84(mean_fidelity: f64, rate: f64) -> f64 {
    let q = werner_qber(mean_fidelity);
    rate.max(0.0) * (1.0 - 2.0 * binary_entropy(q)).max(0.0)
}

/// Negativity of a Werner state, `max(0, (3w - 1)/4)`.
pub fn werner_negativity(w: f64) -> f64 {
    ((3.0 * w - 1.0) / 4.0).max(0.0)
}

/// `R * log2(1 + 2N)`.
pub fn negativity_utility(mean_w: f64, rate: f64) -> f64 {
    rate.max(0.0) * (1.0 + 2.0 * werner_negativity(mean_w)).log2()
}

/// Time span a summary row covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Regime {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

/// Aggregates over one scope (whole run, a regime, or a flow).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub scope: String,
    pub start: f64,
    pub end: f64,
    pub deliveries: u64,
    pub drops: u64,
    /// `None` when the scope saw no deliveries and no drops.
    pub loss_fraction: Option<f64>,
    /// `None` when the scope saw no deliveries.
    pub mean_fidelity: Option<f64>,
    pub fidelity_variance: Option<f64>,
    pub throughput: f64,
    pub skr: Option<f64>,
    pub negativity_utility: Option<f64>,
}

impl SummaryRow {
    pub fn is_absent(&self) -> bool {
        self.deliveries == 0 && self.drops == 0
    }
}

/// Per-run reduction of the record stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub overall: SummaryRow,
    pub regimes: Vec<SummaryRow>,
    pub flows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn rows(&self) -> impl Iterator<Item = &SummaryRow> {
        std::iter::once(&self.overall)
            .chain(self.regimes.iter())
            .chain(self.flows.iter())
    }

    pub fn regime(&self, name: &str) -> Option<&SummaryRow> {
        self.regimes
            .iter()
            .find(|r| r.scope == format!("regime:{name}"))
    }
}

fn mean_var(xs: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    // Welford.
    let mut n = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    (n > 0).then(|| (mean, if n > 1 { m2 / (n - 1) as f64 } else { 0.0 }))
}

/// `span` is the time actually covered, which is less than `end - start`
/// when the scope is a union of disjoint intervals.
fn summarize<'a>(
    scope: String,
    (start, end, span): (f64, f64, f64),
    deliveries: impl Iterator<Item = &'a DeliveryRecord>,
    drops: u64,
) -> SummaryRow {
    let fids: Vec<f64> = deliveries.map(DeliveryRecord::fidelity).collect();
    let n = fids.len() as u64;
    let throughput = if span > 0.0 { n as f64 / span } else { 0.0 };
    let stats = mean_var(fids.iter().copied());
    let mean_fidelity = stats.map(|s| s.0);
    let utilities = mean_fidelity.map(|f| {
        let w = fidelity_to_werner(f.clamp(0.25, 1.0))
            .expect("clamped")
            .value();
        (skr_bb84(f, throughput), negativity_utility(w, throughput))
    });
    SummaryRow {
        scope,
        start,
        end,
        deliveries: n,
        drops,
        loss_fraction: (n + drops > 0).then(|| drops as f64 / (n + drops) as f64),
        mean_fidelity,
        fidelity_variance: stats.map(|s| s.1),
        throughput,
        skr: utilities.map(|u| u.0),
        negativity_utility: utilities.map(|u| u.1),
    }
}

/// Summaries for the whole post-warmup run, each regime and each flow.
/// Records flagged as warmup are excluded; scopes are clipped at `warmup_end`.
pub fn regime_summary(
    deliveries: &[DeliveryRecord],
    drops: &[DropRecord],
    regimes: &[Regime],
    warmup_end: f64,
    run_end: f64,
) -> RunSummary {
    let live: Vec<&DeliveryRecord> = deliveries.iter().filter(|d| !d.warmup).collect();
    let live_drops: Vec<&DropRecord> = drops.iter().filter(|d| !d.warmup).collect();

    let whole = (warmup_end, run_end, run_end - warmup_end);
    let overall = summarize(
        "overall".into(),
        whole,
        live.iter().copied(),
        live_drops.len() as u64,
    );

    // Regimes sharing a name are reported as one row over the union of
    // their intervals, in order of first appearance.
    let mut names: Vec<&str> = Vec::new();
    for r in regimes {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let regimes = names
        .into_iter()
        .map(|name| {
            let intervals: Vec<(f64, f64)> = regimes
                .iter()
                .filter(|r| r.name == name)
                .map(|r| {
                    let start = r.start.max(warmup_end);
                    (start, r.end.max(start))
                })
                .collect();
            let inside = |t: f64| {
                intervals
                    .iter()
                    .any(|&(a, b)| t >= a && t < b || (b == run_end && t == b))
            };
            let bounds = (
                intervals.iter().map(|i| i.0).fold(f64::INFINITY, f64::min),
                intervals
                    .iter()
                    .map(|i| i.1)
                    .fold(f64::NEG_INFINITY, f64::max),
                intervals.iter().map(|i| i.1 - i.0).sum(),
            );
            summarize(
                format!("regime:{name}"),
                bounds,
                live.iter().copied().filter(|d| inside(d.delivered_at)),
                live_drops.iter().filter(|d| inside(d.dropped_at)).count() as u64,
            )
        })
        .collect();

    let mut by_flow: BTreeMap<FlowId, (Vec<&DeliveryRecord>, u64)> = BTreeMap::new();
    for d in &live {
        by_flow.entry(d.flow_id).or_default().0.push(d);
    }
    for d in &live_drops {
        by_flow.entry(d.flow_id).or_default().1 += 1;
    }
    let flows = by_flow
        .into_iter()
        .map(|(f, (recs, nd))| summarize(format!("flow:{}", f.0), whole, recs.into_iter(), nd))
        .collect();

    RunSummary {
        overall,
        regimes,
        flows,
    }
}
