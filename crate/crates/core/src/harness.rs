//! Seeded multi-replicate experiments and their CSV/manifest output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{SchedulerKind, SystemConfig};
use crate::engine::{replicate_seed, Scenario, Simulation};
use crate::error::{Error, Result};
use crate::types::RoundMetrics;

/// Distances of `n` points drawn uniformly over a disk of radius `radius`.
pub fn place_clients<R: Rng + ?Sized>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    // 1 - U lies in (0, 1], so no client sits on the base station
    (0..n).map(|_| radius * (1.0 - rng.random::<f64>()).sqrt()).collect()
}

pub const COLUMNS: [&str; 15] = [
    "round",
    "scheduler",
    "V",
    "d",
    "sigma_size",
    "replicate",
    "loss",
    "accuracy",
    "bound",
    "J",
    "tau",
    "num_participants",
    "round_energy_J",
    "cum_energy_J",
    "max_Z",
];

/// One cell of the sweep product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub v: f64,
    pub d: f64,
    pub sigma_size: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub base: SystemConfig,
    pub scheduler: SchedulerKind,
    pub v_values: Vec<f64>,
    pub d_values: Vec<f64>,
    pub sigma_values: Vec<f64>,
    pub replicates: usize,
    pub out_dir: PathBuf,
    /// Adds per-client columns to the per-run files.
    pub wide: bool,
}

impl ExperimentSpec {
    /// Spec taken from the config's experiment section; empty sweep axes
    /// fall back to the base value.
    pub fn from_config(base: SystemConfig, out_dir: impl Into<PathBuf>) -> Self {
        let e = &base.raw.experiment;
        Self {
            scheduler: e.scheduler,
            v_values: e.v_values.clone(),
            d_values: e.d_values.clone(),
            sigma_values: e.sigma_values.clone(),
            replicates: e.replicates,
            base,
            out_dir: out_dir.into(),
            wide: false,
        }
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let or = |v: &[f64], x: f64| if v.is_empty() { vec![x] } else { v.to_vec() };
        let vs = or(&self.v_values, self.base.v);
        let ds = or(&self.d_values, self.base.data.non_iid_degree);
        let ss = or(&self.sigma_values, self.base.data.sigma_size);
        let mut out = Vec::new();
        for &v in &vs {
            for &d in &ds {
                for &sigma_size in &ss {
                    out.push(SweepPoint { v, d, sigma_size });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidExperiment("replicates must be at least 1".into()));
        }
        Ok(())
    }

    /// Config of one replicate at one sweep point.
    pub fn replicate_config(&self, point: SweepPoint, replicate: usize) -> Result<SystemConfig> {
        let seed = replicate_seed(self.base.seed, replicate);
        self.base.with_raw(|r| {
            r.seed = seed;
            r.solver.v = point.v;
            r.data.non_iid_degree = point.d;
            r.data.sigma_size = point.sigma_size;
        })
    }
}

/// Runs one configured simulation to completion.
pub fn run_single(cfg: &SystemConfig, scheduler: SchedulerKind) -> Result<Vec<RoundMetrics>> {
    Simulation::new(cfg.clone(), scheduler)?.run()
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub point: SweepPoint,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub scheduler: &'static str,
    pub base_seed: u64,
    pub replicate_seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    pub files: Vec<String>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub aggregate_path: PathBuf,
    /// Successful runs by sweep point, then replicate.
    pub runs: Vec<(SweepPoint, usize, Vec<RoundMetrics>)>,
}

fn run_file_name(scheduler: SchedulerKind, p: &SweepPoint, r: usize) -> String {
    format!(
        "{}_V{}_d{}_sigma{}_rep{}.csv",
        scheduler.name(),
        p.v,
        p.d,
        p.sigma_size,
        r
    )
}

fn header(wide: bool, num_clients: usize) -> Vec<String> {
    let mut h: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    if wide {
        for i in 0..num_clients {
            for col in ["a", "channel", "p", "energy_J", "Z"] {
                h.push(format!("{col}_{i}"));
            }
        }
    }
    h
}

fn metric_row(m: &RoundMetrics) -> [f64; 9] {
    [
        m.global_loss,
        m.test_accuracy,
        m.bound_value,
        m.objective_j,
        m.tau as f64,
        m.num_participants() as f64,
        m.round_energy(),
        m.cumulative_energy,
        m.max_queue(),
    ]
}

fn write_run(
    path: &Path,
    scheduler: SchedulerKind,
    p: &SweepPoint,
    r: usize,
    rows: &[RoundMetrics],
    wide: bool,
    num_clients: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(wide, num_clients))?;
    for m in rows {
        let mut rec = vec![
            m.round.to_string(),
            scheduler.name().to_string(),
            p.v.to_string(),
            p.d.to_string(),
            p.sigma_size.to_string(),
            r.to_string(),
        ];
        rec.extend(metric_row(m).iter().map(f64::to_string));
        if wide {
            for i in 0..num_clients {
                rec.push(u8::from(m.participants[i]).to_string());
                rec.push(m.channels[i].map_or(String::new(), |c| c.to_string()));
                rec.push(m.powers[i].to_string());
                rec.push(m.client_energy[i].to_string());
                rec.push(m.queues[i].to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-round means across the replicates of each sweep point.
fn write_aggregate(
    path: &Path,
    scheduler: SchedulerKind,
    points: &[SweepPoint],
    runs: &[(SweepPoint, usize, Vec<RoundMetrics>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLUMNS)?;
    for p in points {
        let reps: Vec<&Vec<RoundMetrics>> = runs.iter().filter(|(q, _, _)| q == p).map(|(_, _, m)| m).collect();
        let Some(first) = reps.first() else { continue };
        for n in 0..first.len() {
            let mut sums = [0.0; 9];
            for rep in &reps {
                for (s, v) in sums.iter_mut().zip(metric_row(&rep[n])) {
                    *s += v;
                }
            }
            let k = reps.len() as f64;
            let mut rec = vec![
                first[n].round.to_string(),
                scheduler.name().to_string(),
                p.v.to_string(),
                p.d.to_string(),
                p.sigma_size.to_string(),
                "mean".to_string(),
            ];
            rec.extend(sums.iter().map(|s| (s / k).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs every (sweep point, replicate) pair in parallel, then writes one CSV
/// per run, `aggregate.csv` and `manifest.json`. A failing replicate is
/// logged and left out of the aggregate.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let points = spec.points();
    // V does not enter the scenario, so each (d, sigma, replicate) cell
    // generates its data and optimum once and runs every V on it
    let mut cells: Vec<(f64, f64, usize)> = Vec::new();
    for p in &points {
        for r in 0..spec.replicates {
            if !cells.contains(&(p.d, p.sigma_size, r)) {
                cells.push((p.d, p.sigma_size, r));
            }
        }
    }
    let per_cell: Vec<Vec<(SweepPoint, usize, Result<Vec<RoundMetrics>>)>> = cells
        .par_iter()
        .map(|&(d, sigma, r)| {
            let members: Vec<SweepPoint> =
                points.iter().copied().filter(|p| p.d == d && p.sigma_size == sigma).collect();
            let scenario = spec
                .replicate_config(members[0], r)
                .and_then(|cfg| Scenario::generate(&cfg));
            members
                .into_iter()
                .map(|p| {
                    let out = match &scenario {
                        Ok(sc) => spec.replicate_config(p, r).and_then(|cfg| {
                            Simulation::from_scenario(cfg, spec.scheduler, sc.clone()).run()
                        }),
                        Err(e) => Err(Error::InvalidExperiment(format!("scenario: {e}"))),
                    };
                    (p, r, out)
                })
                .collect()
        })
        .collect();
    let mut results: Vec<(SweepPoint, usize, Result<Vec<RoundMetrics>>)> =
        per_cell.into_iter().flatten().collect();
    let order = |p: &SweepPoint| points.iter().position(|q| q == p).unwrap_or(usize::MAX);
    results.sort_by_key(|(p, r, _)| (order(p), *r));

    let u = spec.base.num_clients;
    let mut files = Vec::new();
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    for (p, r, out) in results {
        match out {
            Ok(rows) => {
                let name = run_file_name(spec.scheduler, &p, r);
                write_run(&spec.out_dir.join(&name), spec.scheduler, &p, r, &rows, spec.wide, u)?;
                files.push(name);
                runs.push((p, r, rows));
            }
            Err(e) => {
                log::error!("V={} d={} sigma={} replicate {r} failed: {e}", p.v, p.d, p.sigma_size);
                failures.push(Failure {
                    point: p,
                    replicate: r,
                    error: e.to_string(),
                });
            }
        }
    }
    let aggregate_path = spec.out_dir.join("aggregate.csv");
    write_aggregate(&aggregate_path, spec.scheduler, &points, &runs)?;
    files.push("aggregate.csv".into());

    let manifest = Manifest {
        version: format!("fedcre {}", env!("CARGO_PKG_VERSION")),
        config_sha256: hex::encode(Sha256::digest(spec.base.raw.to_toml_string().as_bytes())),
        scheduler: spec.scheduler.name(),
        base_seed: spec.base.seed,
        replicate_seeds: (0..spec.replicates).map(|r| replicate_seed(spec.base.seed, r)).collect(),
        points,
        files,
        failures,
    };
    fs::write(spec.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentReport {
        manifest,
        aggregate_path,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn placements_stay_in_the_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = place_clients(&mut rng, 1000, 500.0);
        assert!(d.iter().all(|&x| x > 0.0 && x <= 500.0));
        let again = place_clients(&mut ChaCha8Rng::seed_from_u64(1), 1000, 500.0);
        assert_eq!(d, again);
    }

    #[test]
    fn mean_radius_is_two_thirds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = place_clients(&mut rng, 1_000_000, 500.0);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let expect = 2.0 * 500.0 / 3.0;
        assert!((mean - expect).abs() / expect < 0.01, "{mean}");
    }

    #[test]
    fn sweep_product_and_defaults() {
        let base = SystemConfig::reference();
        let mut spec = ExperimentSpec::from_config(base.clone(), "unused");
        assert_eq!(spec.points().len(), 1);
        assert_eq!(spec.points()[0].v, base.v);
        spec.v_values = vec![0.1, 1.0];
        spec.d_values = vec![0.2, 0.4, 0.6];
        assert_eq!(spec.points().len(), 6);
        spec.replicates = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn wide_header_has_per_client_columns() {
        assert_eq!(header(false, 4).len(), 15);
        assert_eq!(header(true, 4).len(), 35);
        assert_eq!(header(true, 4)[15], "a_0");
    }
}
