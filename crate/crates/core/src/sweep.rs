//! Single runs and parameter sweeps.
//!
//! A sweep is the cartesian product of its parameter value lists, each point
//! run once per seed. Runs are independent and execute on a rayon pool; the
//! result of each run depends only on its configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{set_dotted, ScenarioConfig};
use crate::engine::{simulate, Conservation, RunOptions, RunOutput};
use crate::error::{config_err, Error, Result};
use crate::ids::NodeId;
use crate::metrics::{RunSummary, SummaryRow};
use crate::output::write_bundle;

/// Resolve, run and optionally write a bundle to `out_dir`.
pub fn run_scenario(
    config: &ScenarioConfig,
    out_dir: Option<&Path>,
    options: RunOptions,
) -> Result<RunOutput> {
    let scenario = config.resolve()?;
    let out = simulate(&scenario, options)?;
    if let Some(dir) = out_dir {
        write_bundle(dir, config, &out)?;
    }
    Ok(out)
}

/// One grid point: the parameter assignments and the resulting scenario.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub config: ScenarioConfig,
}

#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub parameter_names: Vec<String>,
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let base = ScenarioConfig::from_toml_str(text)?;
        let doc: toml::Table = toml::from_str(text)?;
        Self::from_parts(&base, doc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            Error::Parse(p) => Error::Config(format!("{}: {p}", path.display())),
            other => other,
        })
    }

    fn from_parts(base: &ScenarioConfig, mut doc: toml::Table) -> Result<Self> {
        let sweep = match &base.sweep {
            Some(s) => s.clone(),
            None => return config_err("no [sweep] section"),
        };
        if sweep.seeds == 0 {
            return config_err("sweep.seeds must be at least 1");
        }
        doc.remove("sweep");
        for (i, p) in sweep.parameters.iter().enumerate() {
            if p.values.is_empty() {
                return config_err(format!(
                    "sweep.parameters[{i}] ('{}') has no values",
                    p.name
                ));
            }
        }

        let mut grid: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for p in &sweep.parameters {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    p.values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((p.name.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }

        let points = grid
            .into_iter()
            .enumerate()
            .map(|(index, assignments)| {
                let mut d = doc.clone();
                for (name, value) in &assignments {
                    set_dotted(&mut d, name, value.clone())?;
                }
                let config: ScenarioConfig = d.try_into().map_err(|e: toml::de::Error| {
                    Error::Config(format!("sweep point {index}: {e}"))
                })?;
                config
                    .validate()
                    .map_err(|e| Error::Config(format!("sweep point {index}: {e}")))?;
                Ok(SweepPoint {
                    index,
                    assignments,
                    config,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(SweepPlan {
            parameter_names: sweep.parameters.iter().map(|p| p.name.clone()).collect(),
            points,
            seeds: (0..sweep.seeds as u64).map(|i| base.run.seed + i).collect(),
        })
    }

    pub fn run_count(&self) -> usize {
        self.points.len() * self.seeds.len()
    }
}

/// What a sweep keeps from each run.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub seed: u64,
    pub summary: RunSummary,
    /// Per switch: mean PI-measured buffering time over the second half.
    pub late_buffering: Vec<(NodeId, f64)>,
    pub conservation: Conservation,
}

#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub point: SweepPoint,
    pub runs: Vec<SweepRun>,
    pub failures: Vec<(u64, String)>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub parameter_names: Vec<String>,
    pub points: Vec<PointOutcome>,
    pub aggregate: Vec<AggregateRow>,
}

/// Mean and standard error over the seeds of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// NaN with fewer than two samples.
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            f64::NAN
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Estimate { mean, se, n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub point: usize,
    pub assignments: Vec<String>,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub fidelity: Estimate,
    pub throughput: Estimate,
    pub skr: Estimate,
    pub negativity_utility: Estimate,
    pub loss_fraction: Estimate,
}

pub const AGGREGATE_METRICS: [&str; 5] = [
    "mean_fidelity",
    "throughput_per_s",
    "skr_bits_per_s",
    "negativity_utility_per_s",
    "loss_fraction",
];

/// Aggregate the whole-run summary rows of one point.
pub fn aggregate_point(
    point: usize,
    assignments: Vec<String>,
    overall: &[SummaryRow],
    runs_failed: usize,
) -> AggregateRow {
    let col = |f: fn(&SummaryRow) -> Option<f64>| {
        Estimate::of(&overall.iter().filter_map(f).collect::<Vec<_>>())
    };
    AggregateRow {
        point,
        assignments,
        runs_ok: overall.len(),
        runs_failed,
        fidelity: col(|r| r.mean_fidelity),
        throughput: col(|r| Some(r.throughput)),
        skr: col(|r| r.skr),
        negativity_utility: col(|r| r.negativity_utility),
        loss_fraction: col(|r| r.loss_fraction),
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn point_dir(root: &Path, point: usize, seed: u64) -> PathBuf {
    root.join(format!("point_{point:03}"))
        .join(format!("seed_{seed}"))
}

/// Run every (point, seed) pair. Failed runs are reported per point and left
/// out of the aggregate. Bundles and `aggregate.csv` go to `out_dir` if given.
pub fn run_sweep(plan: &SweepPlan, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    let jobs: Vec<(usize, u64)> = plan
        .points
        .iter()
        .flat_map(|p| plan.seeds.iter().map(move |&s| (p.index, s)))
        .collect();

    let results: Vec<std::result::Result<SweepRun, String>> = jobs
        .par_iter()
        .map(|&(pi, seed)| {
            let cfg = plan.points[pi].config.clone().with_seed(seed);
            let dir = out_dir.map(|d| point_dir(d, pi, seed));
            let out = run_scenario(&cfg, dir.as_deref(), RunOptions::default())
                .map_err(|e| e.to_string())?;
            Ok(SweepRun {
                seed,
                late_buffering: out.mean_buffering_since(out.duration_s / 2.0),
                conservation: out.conservation,
                summary: out.summary,
            })
        })
        .collect();

    let mut points: Vec<PointOutcome> = plan
        .points
        .iter()
        .map(|p| PointOutcome {
            point: p.clone(),
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (&(pi, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(run) => points[pi].runs.push(run),
            Err(msg) => points[pi].failures.push((seed, msg)),
        }
    }

    let aggregate: Vec<AggregateRow> = points
        .iter()
        .map(|p| {
            let overall: Vec<SummaryRow> =
                p.runs.iter().map(|r| r.summary.overall.clone()).collect();
            aggregate_point(
                p.point.index,
                p.point
                    .assignments
                    .iter()
                    .map(|(_, v)| value_label(v))
                    .collect(),
                &overall,
                p.failures.len(),
            )
        })
        .collect();

    if let Some(dir) = out_dir {
        write_aggregate(
            &dir.join("aggregate.csv"),
            &plan.parameter_names,
            &aggregate,
        )?;
    }
    Ok(SweepOutcome {
        parameter_names: plan.parameter_names.clone(),
        points,
        aggregate,
    })
}

pub fn write_aggregate(path: &Path, names: &[String], rows: &[AggregateRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(names.iter().cloned());
    header.extend(["runs_ok".into(), "runs_failed".into()]);
    for m in AGGREGATE_METRICS {
        header.push(m.to_string());
        header.push(format!("{m}_se"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.point.to_string()];
        rec.extend(r.assignments.iter().cloned());
        rec.push(r.runs_ok.to_string());
        rec.push(r.runs_failed.to_string());
        for e in [
            r.fidelity,
            r.throughput,
            r.skr,
            r.negativity_utility,
            r.loss_fraction,
        ] {
            rec.push(e.mean.to_string());
            rec.push(e.se.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_needs_two_samples() {
        let e = Estimate::of(&[3.0]);
        assert_eq!(e.mean, 3.0);
        assert!(e.se.is_nan());
        let e = Estimate::of(&[1.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        assert!((e.se - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_is_cartesian() {
        let plan = SweepPlan::from_toml_str(
            r#"
            [[flows]]
            count = 2
            [sweep]
            seeds = 3
            [[sweep.parameters]]
            name = "flows.0.count"
            values = [6, 12]
            [[sweep.parameters]]
            name = "aqm.target_buffering_s"
            values = [1e-4, 2e-4, 3e-4]
            "#,
        )
        .unwrap();
        assert_eq!(plan.points.len(), 6);
        assert_eq!(plan.run_count(), 18);
        assert_eq!(plan.seeds, vec![1, 2, 3]);
        assert_eq!(plan.points[4].config.flows[0].count, 12);
        assert_eq!(plan.points[4].config.aqm.target_buffering_s, 2e-4);
        assert!(plan.points.iter().all(|p| p.config.sweep.is_none()));
    }

    #[test]
    fn bad_point_is_reported_with_its_index() {
        let err = SweepPlan::from_toml_str(
            r#"
            [sweep]
            [[sweep.parameters]]
            name = "run.duration_s"
            values = [1.0, -1.0]
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sweep point 1"), "{err}");
    }

    #[test]
    fn missing_sweep_section() {
        assert!(SweepPlan::from_toml_str("").is_err());
    }
}
