//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits with a failure status if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use qnet_core::engine::RunOptions;
use qnet_core::link::{LinkController, LinkRequest, SelectionPolicy, ServiceMode};
use qnet_core::physics::{pauli_accumulate, BsmOutcome, LinkParams, PauliFrame};
use qnet_core::sim::{Component, RngStream, SimTime, StreamId};
use qnet_core::sweep::{run_sweep, SweepOutcome, SweepPlan};
use qnet_core::transport::INITIAL_WINDOW;
use qnet_core::{run_scenario, DatagramKey, FlowId, LinkId, NodeId, ScenarioConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Verdict = Result<String, String>;

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name)
}

fn within_time(label: &str, started: Instant, limit_s: f64) -> Result<f64, String> {
    let took = started.elapsed().as_secs_f64();
    if took < limit_s {
        Ok(took)
    } else {
        Err(format!("{label} took {took:.2} s, limit {limit_s} s"))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------

fn fidelity_oracle() -> Verdict {
    let started = Instant::now();
    let cfg = ScenarioConfig::from_toml_str(
        r#"
        [run]
        duration_s = 1.0
        [physics]
        initial_fidelity = 0.99
        coherence_time_s = 1e9
        [transport]
        cc = "aimd"
        max_window = 1
        [[flows]]
        source = "A"
        destination = "B"
        demand = { kind = "batch", count = 100 }
        "#,
    )
    .map_err(|e| e.to_string())?;
    let out = run_scenario(&cfg, None, RunOptions::default()).map_err(|e| e.to_string())?;

    let w0 = (4.0 * 0.99 - 1.0) / 3.0;
    let expected = (3.0 * f64::powi(w0, 4) + 1.0) / 4.0;
    if out.deliveries.len() != 100 {
        return Err(format!("{} of 100 pairs delivered", out.deliveries.len()));
    }
    let worst = out
        .deliveries
        .iter()
        .map(|d| (d.fidelity() - expected).abs())
        .fold(0.0, f64::max);
    if worst > 1e-9 {
        return Err(format!("max |F - {expected:.12}| = {worst:e}"));
    }
    if out.window_trace.iter().any(|s| s.window != INITIAL_WINDOW) {
        return Err("window left 1".into());
    }
    let took = within_time("run", started, 1.0)?;
    Ok(format!(
        "100 pairs, F = {expected:.12}, max error {worst:.1e}, {took:.2} s"
    ))
}

// ---------------------------------------------------------------------------

fn lleg_statistics() -> Verdict {
    const PAIRS: usize = 100_000;
    let started = Instant::now();
    let params = LinkParams::new(40.0, 0.4, 1e5).map_err(|e| e.to_string())?;
    let q = params.success_prob();
    let mut link = LinkController::new(
        LinkId(0),
        (NodeId(0), NodeId(1)),
        &params,
        2e5,
        ServiceMode::OnDemand,
        SelectionPolicy::YoungestLargestBacklog,
        RngStream::new(7, StreamId::new(Component::Lleg, 0)),
    );
    for seq in 0..PAIRS as u64 {
        link.request_pair(LinkRequest {
            requester: NodeId((seq % 2) as u32),
            seq: DatagramKey {
                flow: FlowId(0),
                seq,
            },
            arrival_time: SimTime::ZERO,
        })
        .map_err(|e| e.to_string())?;
    }

    let mut attempts = Vec::with_capacity(PAIRS);
    for _ in 0..PAIRS {
        let k = (link.sample_interval() * params.attempt_freq_hz).round() as u64;
        let outcome = link.on_generation_success();
        if outcome.served.is_none() {
            return Err("saturated link produced an unassigned pair".into());
        }
        attempts.push(k);
    }
    if link.pending_len() != 0 || link.is_generating() {
        return Err("link still busy after serving every request".into());
    }

    let m = attempts.iter().sum::<u64>() as f64 / PAIRS as f64;
    let rel = (m - 1.0 / q).abs() * q;
    if rel > 0.01 {
        return Err(format!("mean attempts {m:.3}, 1/q = {:.3}", 1.0 / q));
    }

    // Chi-squared goodness of fit with an open tail bin; bins hold at least
    // five expected counts.
    let n = PAIRS as f64;
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    let mut k = 1u64;
    loop {
        let e = n * q * (1.0 - q).powi(k as i32 - 1);
        let tail = n * (1.0 - q).powi(k as i32);
        if tail < 5.0 || e < 5.0 {
            observed.push(attempts.iter().filter(|&&a| a >= k).count() as f64);
            expected.push(n * (1.0 - q).powi(k as i32 - 1));
            break;
        }
        observed.push(attempts.iter().filter(|&&a| a == k).count() as f64);
        expected.push(e);
        k += 1;
    }
    let stat: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let dof = (observed.len() - 1) as f64;
    let p = ChiSquared::new(dof).map_err(|e| e.to_string())?.sf(stat);
    if p <= 0.01 {
        return Err(format!("chi-squared {stat:.1} on {dof} dof, p = {p:.4}"));
    }
    let took = within_time("sampling", started, 5.0)?;
    Ok(format!(
        "mean {m:.3} vs 1/q {:.3} ({:.2}%), chi-squared p = {p:.3}, {took:.2} s",
        1.0 / q,
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------

/// High-load regime rows for one transport mode of the load-regime preset.
struct HighLoad {
    loss: Vec<f64>,
    fidelity: Vec<f64>,
    variance: Vec<f64>,
    throughput: Vec<f64>,
}

fn load_regime_sweep() -> Result<Vec<(String, HighLoad)>, String> {
    let plan = SweepPlan::from_path(&preset("fig4_chain.toml")).map_err(|e| e.to_string())?;
    if plan.seeds.len() < 8 {
        return Err(format!("preset runs only {} seeds", plan.seeds.len()));
    }
    let outcome = run_sweep(&plan, None).map_err(|e| e.to_string())?;
    outcome
        .points
        .iter()
        .map(|p| {
            if !p.failures.is_empty() {
                return Err(format!("runs failed: {:?}", p.failures));
            }
            let mut h = HighLoad {
                loss: vec![],
                fidelity: vec![],
                variance: vec![],
                throughput: vec![],
            };
            for r in &p.runs {
                let row = r.summary.regime("high").ok_or("no high-load regime row")?;
                h.loss.push(row.loss_fraction.unwrap_or(0.0));
                h.fidelity
                    .push(row.mean_fidelity.ok_or("no deliveries under high load")?);
                h.variance.push(row.fidelity_variance.unwrap_or(0.0));
                h.throughput.push(row.throughput);
            }
            let mode = p.point.config.transport.cc;
            Ok((format!("{mode:?}"), h))
        })
        .collect()
}

fn find<'a>(modes: &'a [(String, HighLoad)], name: &str) -> Result<&'a HighLoad, String> {
    modes
        .iter()
        .find(|(m, _)| m == name)
        .map(|(_, h)| h)
        .ok_or_else(|| format!("no {name} point in the preset sweep"))
}

fn baseline_loss(modes: &[(String, HighLoad)]) -> Verdict {
    let off = find(modes, "Off")?;
    let loss = mean(&off.loss);
    if (0.02..=0.10).contains(&loss) {
        Ok(format!(
            "no congestion control loses {:.2}% under high load ({} seeds)",
            loss * 100.0,
            off.loss.len()
        ))
    } else {
        Err(format!(
            "loss fraction {:.2}% outside [2%, 10%]",
            loss * 100.0
        ))
    }
}

fn aqm_fidelity(modes: &[(String, HighLoad)]) -> Verdict {
    let aimd = find(modes, "Aimd")?;
    let aqm = find(modes, "AimdAqm")?;
    let loss = mean(&aqm.loss);
    if loss >= 0.001 {
        return Err(format!("AQM loss fraction {:.3}%", loss * 100.0));
    }
    let diffs: Vec<f64> = aqm
        .fidelity
        .iter()
        .zip(&aimd.fidelity)
        .map(|(a, b)| a - b)
        .collect();
    let gain = mean(&diffs);
    let sd =
        (diffs.iter().map(|d| (d - gain).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let t = gain / (sd / (diffs.len() as f64).sqrt());
    if !(0.01..=0.07).contains(&gain) {
        return Err(format!("fidelity gain {gain:.4} outside [0.01, 0.07]"));
    }
    if t < 3.0 {
        return Err(format!(
            "fidelity gain {gain:.4} not significant (paired t = {t:.2})"
        ));
    }
    let (va, vb) = (mean(&aqm.variance), mean(&aimd.variance));
    if va >= vb {
        return Err(format!("fidelity variance {va:.2e} not below {vb:.2e}"));
    }
    Ok(format!(
        "loss {:.3}%, fidelity +{gain:.4} (paired t = {t:.1}), variance {va:.2e} < {vb:.2e}",
        loss * 100.0
    ))
}

fn aqm_throughput(modes: &[(String, HighLoad)]) -> Verdict {
    let aimd = find(modes, "Aimd")?;
    let aqm = find(modes, "AimdAqm")?;
    let cost = 1.0 - mean(&aqm.throughput) / mean(&aimd.throughput);
    if (0.05..=0.20).contains(&cost) {
        Ok(format!(
            "throughput {:.0}/s vs {:.0}/s, {:.1}% lower",
            mean(&aqm.throughput),
            mean(&aimd.throughput),
            cost * 100.0
        ))
    } else {
        Err(format!(
            "throughput cost {:.1}% outside [5%, 20%]",
            cost * 100.0
        ))
    }
}

// ---------------------------------------------------------------------------

struct CurvePoint {
    target: f64,
    fidelity: f64,
    fidelity_se: f64,
    throughput: f64,
    throughput_se: f64,
    skr: f64,
    utility: f64,
}

struct Curve {
    flows: i64,
    points: Vec<CurvePoint>,
}

fn curves(outcome: &SweepOutcome) -> Vec<Curve> {
    let mut out: Vec<Curve> = Vec::new();
    for (p, agg) in outcome.points.iter().zip(&outcome.aggregate) {
        let flows = p.point.config.flows[0].count as i64;
        let target = p.point.config.aqm.target_buffering_s;
        let row = CurvePoint {
            target,
            fidelity: agg.fidelity.mean,
            fidelity_se: agg.fidelity.se,
            throughput: agg.throughput.mean,
            throughput_se: agg.throughput.se,
            skr: agg.skr.mean,
            utility: agg.negativity_utility.mean,
        };
        match out.iter_mut().find(|c| c.flows == flows) {
            Some(c) => c.points.push(row),
            None => out.push(Curve {
                flows,
                points: vec![row],
            }),
        }
    }
    for c in &mut out {
        c.points.sort_by(|a, b| a.target.total_cmp(&b.target));
    }
    out
}

/// Count adjacent steps against `direction` (+1 rising, -1 falling) and
/// whether every such step is smaller than the standard error of the
/// difference.
fn inversions(values: &[(f64, f64)], direction: f64) -> (usize, bool) {
    let mut count = 0;
    let mut all_small = true;
    for pair in values.windows(2) {
        let (a, sa) = pair[0];
        let (b, sb) = pair[1];
        if (b - a) * direction < 0.0 {
            count += 1;
            if (b - a).abs() > (sa * sa + sb * sb).sqrt() {
                all_small = false;
            }
        }
    }
    (count, all_small)
}

fn target_sweep_trends(outcome: &SweepOutcome) -> Verdict {
    let curves = curves(outcome);
    let twelve = curves
        .iter()
        .find(|c| c.flows == 12)
        .ok_or("no 12-flow curve in the preset sweep")?;
    let mut problems = Vec::new();

    let fid: Vec<(f64, f64)> = twelve
        .points
        .iter()
        .map(|p| (p.fidelity, p.fidelity_se))
        .collect();
    let (n, small) = inversions(&fid, -1.0);
    if n > 1 || !small {
        problems.push(format!("fidelity not non-increasing ({n} inversions)"));
    }
    let thr: Vec<(f64, f64)> = twelve
        .points
        .iter()
        .map(|p| (p.throughput, p.throughput_se))
        .collect();
    let (n, small) = inversions(&thr, 1.0);
    if n > 1 || !small {
        problems.push(format!("throughput not non-decreasing ({n} inversions)"));
    }

    let argmax = |f: fn(&CurvePoint) -> f64, c: &Curve| {
        c.points
            .iter()
            .enumerate()
            .max_by(|a, b| f(a.1).total_cmp(&f(b.1)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let skr_best = argmax(|p| p.skr, twelve);
    if skr_best != 0 {
        problems.push(format!(
            "SKR peaks at {:.2} ms, not at the shortest target",
            twelve.points[skr_best].target * 1e3
        ));
    }
    let interior: Vec<i64> = curves
        .iter()
        .filter(|c| {
            let i = argmax(|p| p.utility, c);
            i > 0 && i + 1 < c.points.len()
        })
        .map(|c| c.flows)
        .collect();
    if interior.is_empty() {
        let peaks: Vec<String> = curves
            .iter()
            .map(|c| {
                format!(
                    "{} flows at {:.2} ms",
                    c.flows,
                    c.points[argmax(|p| p.utility, c)].target * 1e3
                )
            })
            .collect();
        problems.push(format!(
            "negativity utility never peaks inside the range ({})",
            peaks.join(", ")
        ));
    }

    let shape = twelve
        .points
        .iter()
        .map(|p| {
            format!(
                "{:.2}ms F={:.4} R={:.0} skr={:.0} u={:.0}",
                p.target * 1e3,
                p.fidelity,
                p.throughput,
                p.skr,
                p.utility
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    if problems.is_empty() {
        Ok(format!(
            "12 flows: {shape}; interior utility peak for {interior:?} flows"
        ))
    } else {
        Err(format!("{} [12 flows: {shape}]", problems.join("; ")))
    }
}

fn pi_regulation(outcome: &SweepOutcome) -> Verdict {
    let mut checked = 0;
    let mut off: Vec<String> = Vec::new();
    let mut worst_by_target: Vec<(f64, f64)> = Vec::new();
    for p in &outcome.points {
        let target = p.point.config.aqm.target_buffering_s;
        for r in &p.runs {
            for &(_, avg) in &r.late_buffering {
                checked += 1;
                let ratio = avg / target;
                match worst_by_target.iter_mut().find(|w| w.0 == target) {
                    Some(w) if (ratio - 1.0).abs() > (w.1 - 1.0).abs() => w.1 = ratio,
                    Some(_) => {}
                    None => worst_by_target.push((target, ratio)),
                }
                if (ratio - 1.0).abs() > 0.25 {
                    off.push(format!("{:.2}", target * 1e3));
                }
            }
        }
    }
    if checked == 0 {
        return Err("no switch reported buffering times".into());
    }
    let summary = worst_by_target
        .iter()
        .map(|(t, r)| format!("{:.2}ms worst {:.2}x", t * 1e3, r))
        .collect::<Vec<_>>()
        .join(", ");
    if off.is_empty() {
        Ok(format!("{checked} switch-runs within 25% ({summary})"))
    } else {
        Err(format!(
            "{} of {checked} switch-runs outside 25% of target ({summary})",
            off.len()
        ))
    }
}

// ---------------------------------------------------------------------------

fn invariant_suites() -> Verdict {
    let started = Instant::now();

    // Frame accumulation is order independent.
    let mut sequences = 0;
    for len in 1..=4u32 {
        for code in 0..4u32.pow(len) {
            let outcomes: Vec<BsmOutcome> = (0..len)
                .map(|i| BsmOutcome::new(((code >> (2 * i)) & 3) as u8))
                .collect();
            let reference = outcomes
                .iter()
                .fold(PauliFrame::default(), |f, &o| pauli_accumulate(f, o));
            for perm in permutations(len as usize) {
                let frame = perm.iter().fold(PauliFrame::default(), |f, &i| {
                    pauli_accumulate(f, outcomes[i])
                });
                if frame != reference {
                    return Err(format!("frame depends on order for {outcomes:?}"));
                }
            }
            sequences += 1;
        }
    }

    // Memory bookkeeping checked after every event, with evictions forced by
    // small memories, in both link-layer service modes.
    let mut checked_events = 0;
    for (mode, memory) in [("on-demand", 6), ("continuous", 4)] {
        for cc in ["off", "aimd", "aimd+aqm"] {
            let cfg = ScenarioConfig::from_toml_str(&format!(
                r#"
                [run]
                duration_s = 0.2
                seed = 11
                [link_layer]
                mode = "{mode}"
                [topology]
                memory_per_interface = {memory}
                [transport]
                cc = "{cc}"
                [[flows]]
                count = 6
                demand = {{ kind = "poisson", load = 0.995 }}
                "#
            ))
            .map_err(|e| e.to_string())?;
            let out = run_scenario(
                &cfg,
                None,
                RunOptions {
                    check_invariants: true,
                    record_trace: false,
                },
            )
            .map_err(|e| format!("{mode}/{cc}: {e}"))?;
            if !out.conservation.holds() {
                return Err(format!("{mode}/{cc}: {:?}", out.conservation));
            }
            check_aimd_trace(&out.window_trace).map_err(|e| format!("{mode}/{cc}: {e}"))?;
            checked_events += out.events_fired;
        }
    }

    // Identical seeds give identical bundles and event traces.
    let dirs = [tempfile::tempdir(), tempfile::tempdir()];
    let mut traces = Vec::new();
    let cfg = ScenarioConfig::from_path(&preset("fig4_chain.toml"))
        .map_err(|e| e.to_string())?
        .with_seed(5);
    for d in &dirs {
        let d = d.as_ref().map_err(|e| e.to_string())?;
        let out = run_scenario(
            &cfg,
            Some(d.path()),
            RunOptions {
                check_invariants: false,
                record_trace: true,
            },
        )
        .map_err(|e| e.to_string())?;
        traces.push(out.trace.unwrap_or_default());
    }
    if traces[0] != traces[1] {
        return Err("event traces differ between identical runs".into());
    }
    let mut files = 0;
    let a = dirs[0].as_ref().map_err(|e| e.to_string())?.path();
    let b = dirs[1].as_ref().map_err(|e| e.to_string())?.path();
    for entry in std::fs::read_dir(a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let x = std::fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&name)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!(
                "{} differs between identical runs",
                name.to_string_lossy()
            ));
        }
        files += 1;
    }

    let took = within_time("invariant suites", started, 10.0)?;
    Ok(format!(
        "{sequences} frame sequences, {checked_events} events checked, {files} files and {} trace lines identical, {took:.2} s",
        traces[0].len()
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn check_aimd_trace(trace: &[qnet_core::WindowSample]) -> Result<(), String> {
    let mut last: std::collections::HashMap<FlowId, u32> = Default::default();
    for s in trace {
        if s.window < 1 {
            return Err(format!("window {} at t={}", s.window, s.time));
        }
        if let Some(&prev) = last.get(&s.flow_id) {
            let halved = (prev / 2).max(1);
            if s.window != prev + 1 && s.window != halved && s.window != prev {
                return Err(format!(
                    "flow {} window {prev} -> {} at t={}",
                    s.flow_id.0, s.window, s.time
                ));
            }
        }
        last.insert(s.flow_id, s.window);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn report(results: &mut Vec<bool>, number: u32, title: &str, verdict: Verdict) {
    match verdict {
        Ok(detail) => {
            println!("criterion {number} ({title}): PASS - {detail}");
            results.push(true);
        }
        Err(detail) => {
            println!("criterion {number} ({title}): FAIL - {detail}");
            results.push(false);
        }
    }
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "fidelity oracle", fidelity_oracle());
    report(
        &mut results,
        2,
        "link generation statistics",
        lleg_statistics(),
    );

    match load_regime_sweep() {
        Ok(modes) => {
            report(&mut results, 3, "baseline loss", baseline_loss(&modes));
            report(&mut results, 4, "AQM fidelity", aqm_fidelity(&modes));
            report(
                &mut results,
                5,
                "AQM throughput cost",
                aqm_throughput(&modes),
            );
        }
        Err(e) => {
            for (n, t) in [
                (3, "baseline loss"),
                (4, "AQM fidelity"),
                (5, "AQM throughput cost"),
            ] {
                report(&mut results, n, t, Err(e.clone()));
            }
        }
    }

    let sweep = SweepPlan::from_path(&preset("fig5_sweep.toml"))
        .and_then(|plan| run_sweep(&plan, None))
        .map_err(|e| e.to_string());
    match sweep {
        Ok(outcome) => {
            let failed: usize = outcome.points.iter().map(|p| p.failures.len()).sum();
            if failed > 0 {
                report(
                    &mut results,
                    6,
                    "target sweep trends",
                    Err(format!("{failed} runs failed")),
                );
                report(
                    &mut results,
                    7,
                    "PI regulation",
                    Err(format!("{failed} runs failed")),
                );
            } else {
                report(
                    &mut results,
                    6,
                    "target sweep trends",
                    target_sweep_trends(&outcome),
                );
                report(&mut results, 7, "PI regulation", pi_regulation(&outcome));
            }
        }
        Err(e) => {
            report(&mut results, 6, "target sweep trends", Err(e.clone()));
            report(&mut results, 7, "PI regulation", Err(e));
        }
    }

    report(&mut results, 8, "invariant suites", invariant_suites());

    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed} of {} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
