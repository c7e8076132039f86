//! CSV output bundles.
//!
//! A bundle is a directory holding `deliveries.csv`, `drops.csv`,
//! `window_trace.csv`, `aqm_trace.csv`, `summary.csv`, the effective
//! `config.toml` and a `manifest.toml`. Every CSV always has its header row.
//! Floats are written in shortest round-trip form so that reading a file back
//! reproduces the in-memory values exactly.

use std::fs;
use std::path::Path;

use crate::config::ScenarioConfig;
use crate::engine::RunOutput;
use crate::error::{Error, Result};
use crate::ids::{FlowId, NodeId};
use crate::metrics::{DeliveryRecord, SummaryRow};
use crate::physics::{PauliFrame, WernerParam};

/// Bumped whenever a column is added, removed or reinterpreted.
pub const SCHEMA_VERSION: u32 = 1;

pub const DELIVERIES_HEADER: [&str; 14] = [
    "flow_id",
    "seq",
    "source",
    "destination",
    "injected_at_s",
    "delivered_at_s",
    "e2e_latency_s",
    "w_final",
    "fidelity",
    "hops",
    "congestion_mark",
    "pauli_frame",
    "per_hop_buffering_s",
    "warmup",
];

pub const DROPS_HEADER: [&str; 6] = ["flow_id", "seq", "node", "reason", "dropped_at_s", "warmup"];

pub const WINDOW_HEADER: [&str; 5] = ["time_s", "flow_id", "window", "ssthresh", "phase"];

pub const AQM_HEADER: [&str; 5] = ["time_s", "node", "p", "avg_buffering_s", "completed"];

pub const SUMMARY_HEADER: [&str; 12] = [
    "scope",
    "start_s",
    "end_s",
    "deliveries",
    "drops",
    "loss_fraction",
    "mean_fidelity",
    "fidelity_variance",
    "throughput_per_s",
    "skr_bits_per_s",
    "negativity_utility_per_s",
    "absent",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn hops_field(hops: &[(NodeId, f64)]) -> String {
    hops.iter()
        .map(|(n, d)| format!("{}:{}", n.0, d))
        .collect::<Vec<_>>()
        .join(";")
}

fn writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    Ok(w)
}

pub fn summary_record(row: &SummaryRow) -> Vec<String> {
    vec![
        row.scope.clone(),
        row.start.to_string(),
        row.end.to_string(),
        row.deliveries.to_string(),
        row.drops.to_string(),
        opt(row.loss_fraction),
        opt(row.mean_fidelity),
        opt(row.fidelity_variance),
        row.throughput.to_string(),
        opt(row.skr),
        opt(row.negativity_utility),
        row.is_absent().to_string(),
    ]
}

/// Write a full bundle for one run into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, config: &ScenarioConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut w = writer(dir, "deliveries.csv", &DELIVERIES_HEADER)?;
    for d in &out.deliveries {
        w.write_record([
            d.flow_id.0.to_string(),
            d.seq.to_string(),
            d.source.0.to_string(),
            d.destination.0.to_string(),
            d.injected_at.to_string(),
            d.delivered_at.to_string(),
            d.e2e_latency.to_string(),
            d.w_final.value().to_string(),
            d.fidelity().to_string(),
            d.hops.to_string(),
            d.congestion_mark.to_string(),
            d.pauli_frame.bits().to_string(),
            hops_field(&d.per_hop_buffering),
            d.warmup.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "drops.csv", &DROPS_HEADER)?;
    for d in &out.drops {
        w.write_record([
            d.flow_id.0.to_string(),
            d.seq.to_string(),
            d.node.0.to_string(),
            d.reason.as_str().to_string(),
            d.dropped_at.to_string(),
            d.warmup.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "window_trace.csv", &WINDOW_HEADER)?;
    for s in &out.window_trace {
        w.write_record([
            s.time.to_string(),
            s.flow_id.0.to_string(),
            s.window.to_string(),
            s.ssthresh.to_string(),
            s.phase.as_str().to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "aqm_trace.csv", &AQM_HEADER)?;
    for s in &out.aqm_trace {
        w.write_record([
            s.time.to_string(),
            s.node.0.to_string(),
            s.p.to_string(),
            s.avg_buffering_s.to_string(),
            s.completed.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "summary.csv", &SUMMARY_HEADER)?;
    for row in out.summary.rows() {
        w.write_record(summary_record(row))?;
    }
    w.flush()?;

    let mut echo = config.clone();
    echo.sweep = None;
    echo.run.seed = out.seed;
    fs::write(dir.join("config.toml"), echo.to_toml_string())?;

    let c = out.conservation;
    let manifest = format!(
        "schema_version = {SCHEMA_VERSION}\n\
         seed = {}\n\
         duration_s = {}\n\
         events_fired = {}\n\
         injected = {}\n\
         delivered = {}\n\
         dropped = {}\n\
         in_flight = {}\n\
         files = [\"deliveries.csv\", \"drops.csv\", \"window_trace.csv\", \"aqm_trace.csv\", \"summary.csv\", \"config.toml\"]\n",
        out.seed, out.duration_s, out.events_fired, c.injected, c.delivered, c.dropped, c.in_flight
    );
    fs::write(dir.join("manifest.toml"), manifest)?;
    Ok(())
}

fn bad(file: &Path, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}:{}: {}", file.display(), line, msg))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec
        .get(i)
        .ok_or_else(|| bad(file, line, format!("missing column {i}")))?;
    raw.parse()
        .map_err(|e| bad(file, line, format!("column {i} ('{raw}'): {e}")))
}

fn check_header(r: &mut csv::Reader<fs::File>, expected: &[&str], file: &Path) -> Result<()> {
    let header = r.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(bad(file, 1, "unexpected header"));
    }
    Ok(())
}

/// Read `deliveries.csv` back into records.
pub fn read_deliveries(path: &Path) -> Result<Vec<DeliveryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(&mut r, &DELIVERIES_HEADER, path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let hops_raw = rec.get(12).unwrap_or_default();
        let per_hop_buffering = if hops_raw.is_empty() {
            Vec::new()
        } else {
            hops_raw
                .split(';')
                .map(|h| {
                    let (n, d) = h
                        .split_once(':')
                        .ok_or_else(|| bad(path, line, format!("malformed hop '{h}'")))?;
                    Ok((
                        NodeId(n.parse().map_err(|e| bad(path, line, e))?),
                        d.parse().map_err(|e| bad(path, line, e))?,
                    ))
                })
                .collect::<Result<_>>()?
        };
        let frame: u8 = field(&rec, 11, path)?;
        if frame > 3 {
            return Err(bad(path, line, "pauli frame out of range"));
        }
        out.push(DeliveryRecord {
            flow_id: FlowId(field(&rec, 0, path)?),
            seq: field(&rec, 1, path)?,
            source: NodeId(field(&rec, 2, path)?),
            destination: NodeId(field(&rec, 3, path)?),
            injected_at: field(&rec, 4, path)?,
            delivered_at: field(&rec, 5, path)?,
            e2e_latency: field(&rec, 6, path)?,
            w_final: WernerParam::new(field(&rec, 7, path)?).map_err(|e| bad(path, line, e))?,
            hops: field(&rec, 9, path)?,
            congestion_mark: field(&rec, 10, path)?,
            pauli_frame: PauliFrame::from_bits(frame),
            per_hop_buffering,
            warmup: field(&rec, 13, path)?,
        });
    }
    Ok(out)
}

/// Read `summary.csv` back into rows.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(&mut r, &SUMMARY_HEADER, path)?;
    let optf = |rec: &csv::StringRecord, i: usize| -> Result<Option<f64>> {
        match rec.get(i) {
            Some("") | None => Ok(None),
            Some(_) => field(rec, i, path).map(Some),
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(SummaryRow {
            scope: rec.get(0).unwrap_or_default().to_string(),
            start: field(&rec, 1, path)?,
            end: field(&rec, 2, path)?,
            deliveries: field(&rec, 3, path)?,
            drops: field(&rec, 4, path)?,
            loss_fraction: optf(&rec, 5)?,
            mean_fidelity: optf(&rec, 6)?,
            fidelity_variance: optf(&rec, 7)?,
            throughput: field(&rec, 8, path)?,
            skr: optf(&rec, 9)?,
            negativity_utility: optf(&rec, 10)?,
        });
    }
    Ok(out)
}
