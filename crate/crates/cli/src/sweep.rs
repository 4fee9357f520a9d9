//! Parameter sweeps over a cartesian grid of points.
//!
//! The spec is a `key = value` file. `task` selects the per-point computation (`phase`, `lse`,
//! `complexity` or `instance`); `p`, `delta2` and `deltap` give fixed values; each
//! `axis.<name> = min:max:count[:log]` (count ≥ 2) varies one of `p`, `delta2` or `deltap`.
//! `workers` and `resume` mirror the command-line flags, which take precedence; the remaining
//! keys are task options. Every finished point is stored as `points/<index>.json`,
//! so `--resume` recomputes only missing points, and `results.csv` is assembled in index order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use spiked_core::analysis::relaxation_time;
use spiked_core::instance_sim::{amp_default_init, amp_nishimori_init, amp_run, bethe_free_entropy};
use spiked_core::lse_dyngrid::{integrate_dyngrid_partial, DEFAULT_DT0, DEFAULT_NC, DEFAULT_NT};
use spiked_core::lse_fixed::{integrate_fixed, AnnealSchedule, FixedGridConfig, DEFAULT_CBAR0, DEFAULT_DT};
use spiked_core::replica_1rsb::{default_x_grid, has_stable_glassy_states, threshold_states};
use spiked_core::rs_landscape::{se_fixed_point, EPS_INIT};
use spiked_core::ModelParams;

use crate::commands::{build_instance, dyn_config, linspace, parse_x_grid, phase_row, usage};
use crate::config;
use crate::manifest::{write_atomic, Prepared, Run, Status};
use crate::table::{num, opt, Table};
use crate::SweepArgs;

/// Environment variable consulted when `--workers` is absent.
pub const WORKERS_ENV: &str = "SPIKED_WORKERS";

const AXES: [&str; 3] = ["p", "delta2", "deltap"];

/// Keys that change how a sweep runs but not what it computes; excluded from the run id.
const RUN_KEYS: [&str; 2] = ["workers", "resume"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Phase,
    Lse,
    Complexity,
    Instance,
}

impl Task {
    fn options(self) -> &'static [&'static str] {
        match self {
            Task::Phase => &[],
            Task::Lse => &["scheme", "cbar0", "dt", "tmax", "nt", "dt0", "nc", "doublings"],
            Task::Complexity => &["x-grid"],
            Task::Instance => &["n", "seed", "iters", "m0", "implicit"],
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            Task::Phase => &["phase", "m_amp", "m_star", "mmse", "error"],
            Task::Lse => &["t_end", "cbar_end", "e_total_end", "tau_half", "interrupted_at", "error"],
            Task::Complexity => &["q_th", "x_th", "e_th", "stable_glass", "error"],
            Task::Instance => &["final_overlap", "m_amp", "bethe_free_entropy", "error"],
        }
    }
}

/// A parsed spec: the task, the axes in key order and the remaining options.
struct Spec {
    task: Task,
    entries: BTreeMap<String, String>,
    axes: Vec<(&'static str, Vec<f64>)>,
}

fn parse_axis(name: &str, text: &str) -> Result<Vec<f64>> {
    let bad = || usage(format!("axis.{name} = {text:?}: expected min:max:count[:log]"));
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let count: usize = parts[2].parse().map_err(|_| bad())?;
    if count < 2 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    let values = match parts.get(3) {
        None => linspace(lo, hi, count),
        Some(&"log") if lo > 0.0 && hi > 0.0 => linspace(lo.ln(), hi.ln(), count).into_iter().map(f64::exp).collect(),
        Some(_) => return Err(bad()),
    };
    if name == "p" && values.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(usage("axis.p must take non-negative integer values"));
    }
    Ok(values)
}

impl Spec {
    fn parse(text: &str) -> Result<Spec> {
        let entries = config::parse(text).map_err(|e| usage(format!("{e:#}")))?;
        let task = match entries.get("task").map(String::as_str) {
            Some("phase") => Task::Phase,
            Some("lse") => Task::Lse,
            Some("complexity") => Task::Complexity,
            Some("instance") => Task::Instance,
            other => return Err(usage(format!("task must be phase, lse, complexity or instance, got {other:?}"))),
        };
        let mut axes = Vec::new();
        for (key, value) in &entries {
            if let Some(name) = key.strip_prefix("axis.") {
                let Some(&name) = AXES.iter().find(|&&a| a == name) else {
                    return Err(usage(format!("unknown axis {name:?}; axes are p, delta2, deltap")));
                };
                axes.push((name, parse_axis(name, value)?));
            } else if key != "task"
                && !RUN_KEYS.contains(&key.as_str())
                && !AXES.contains(&key.as_str())
                && !task.options().contains(&key.as_str())
            {
                return Err(usage(format!("unknown key {key:?} for this task")));
            }
        }
        let spec = Spec { task, entries, axes };
        for name in ["delta2", "deltap"] {
            if spec.axis(name).is_none() && !spec.entries.contains_key(name) {
                return Err(usage(format!("{name} needs a value or an axis")));
            }
        }
        Ok(spec)
    }

    fn axis(&self, name: &str) -> Option<&[f64]> {
        self.axes.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| usage(format!("cannot parse {key} = {v:?}"))),
        }
    }

    fn number_of_points(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Axis values of point `index`; the last axis varies fastest.
    fn coordinates(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, (_, values)) in self.axes.iter().enumerate().rev() {
            out[k] = values[index % values.len()];
            index /= values.len();
        }
        out
    }

    /// Value of `name` at a point: the axis value if `name` is an axis, the fixed value otherwise.
    fn value(&self, name: &str, coords: &[f64], default: f64) -> Result<f64> {
        match self.axes.iter().position(|(n, _)| *n == name) {
            Some(k) => Ok(coords[k]),
            None => self.get(name, default),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    index: usize,
    coordinates: Vec<f64>,
    fields: Vec<String>,
}

fn err_fields(n: usize, e: impl std::fmt::Display) -> Vec<String> {
    let mut v = vec![String::new(); n - 1];
    v.push(e.to_string());
    v
}

fn evaluate(spec: &Spec, coords: &[f64]) -> Result<Vec<String>> {
    let p = spec.value("p", coords, 3.0)? as u32;
    let delta2 = spec.value("delta2", coords, f64::NAN)?;
    let deltap = spec.value("deltap", coords, f64::NAN)?;
    let ncols = spec.task.columns().len();
    if spec.task == Task::Phase {
        return Ok(phase_row(p, delta2, deltap));
    }
    let params = match ModelParams::new(p, delta2, deltap) {
        Ok(params) => params,
        Err(e) => return Ok(err_fields(ncols, e)),
    };
    Ok(match spec.task {
        Task::Phase => unreachable!(),
        Task::Lse => match lse_point(spec, &params) {
            Ok(fields) => fields,
            Err(e) if e.is::<crate::UsageError>() => return Err(e),
            Err(e) => err_fields(ncols, format!("{e:#}")),
        },
        Task::Complexity => {
            let grid = match spec.entries.get("x-grid") {
                Some(s) => parse_x_grid(s)?,
                None => default_x_grid(),
            };
            let th = threshold_states(&params);
            vec![opt(th.q_th), opt(th.x_th), opt(th.e_th), has_stable_glassy_states(&params, &grid).to_string(), String::new()]
        }
        Task::Instance => {
            let n: usize = spec.get("n", 0)?;
            if n == 0 {
                return Err(usage("instance sweeps need n"));
            }
            let seed = spec.get("seed", 0u64)?;
            let iters = spec.get("iters", 20)?;
            let m0: Option<f64> = spec.entries.get("m0").map(|s| s.parse()).transpose().map_err(|_| usage("cannot parse m0"))?;
            let implicit = spec.get("implicit", false)?;
            let run = || -> Result<Vec<String>> {
                let inst = build_instance(&params, n, seed, implicit)?;
                let init = match m0 {
                    Some(m0) => amp_nishimori_init(&inst, m0, seed)?,
                    None => amp_default_init(n, seed),
                };
                let out = amp_run(&inst, iters, &init)?;
                let last = *out.overlaps.last().context("empty AMP trajectory")?;
                Ok(vec![num(last), num(se_fixed_point(EPS_INIT, &params)), num(bethe_free_entropy(&out.state, &inst)), String::new()])
            };
            run().unwrap_or_else(|e| err_fields(ncols, format!("{e:#}")))
        }
    })
}

fn lse_point(spec: &Spec, params: &ModelParams) -> Result<Vec<String>> {
    let cbar0 = spec.get("cbar0", DEFAULT_CBAR0)?;
    let tmax = spec.get("tmax", 100.0)?;
    let (rows, interrupted) = match spec.get("scheme", "dyn".to_string())?.as_str() {
        "fixed" => {
            let config = FixedGridConfig { dt: spec.get("dt", DEFAULT_DT)?, t_max: tmax, cbar0, ..FixedGridConfig::default() };
            let field = integrate_fixed(params, &AnnealSchedule::constant(), &config)?;
            let rows = (0..field.len()).map(|i| (field.time(i), field.cbar[i], field.energy_total(i))).collect::<Vec<_>>();
            (rows, None)
        }
        "dyn" => {
            let doublings: Option<usize> =
                spec.entries.get("doublings").map(|s| s.parse()).transpose().map_err(|_| usage("cannot parse doublings"))?;
            let config = dyn_config(
                spec.get("nt", DEFAULT_NT)?,
                spec.get("dt0", DEFAULT_DT0)?,
                tmax,
                doublings,
                spec.get("nc", DEFAULT_NC)?,
                cbar0,
                &[],
            );
            let run = integrate_dyngrid_partial(params, &config)?;
            let rows = run.trajectory.iter().map(|r| (r.t, r.cbar, r.e_total)).collect::<Vec<_>>();
            (rows, run.interrupted.map(|i| i.time))
        }
        other => return Err(usage(format!("scheme must be fixed or dyn, got {other:?}"))),
    };
    let &(t_end, cbar_end, e_end) = rows.last().context("empty trajectory")?;
    let samples: Vec<(f64, f64)> = rows.iter().map(|&(t, c, _)| (t, c)).collect();
    let tau = relaxation_time(&samples, Some(cbar_end)).ok().and_then(|r| r.tau());
    Ok(vec![num(t_end), num(cbar_end), num(e_end), opt(tau), opt(interrupted), String::new()])
}

fn workers(requested: Option<usize>) -> Result<usize> {
    let n = match requested {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| usage(format!("{WORKERS_ENV}={v:?} is not a worker count")))?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(usage("worker count must be positive"));
    }
    Ok(n)
}

fn point_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("{index}.json"))
}

pub fn run(a: &SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading sweep spec {}", a.spec.display()))?;
    let spec = Spec::parse(&text)?;
    let from_spec = spec.entries.get("workers").map(|s| s.parse()).transpose().map_err(|_| usage("cannot parse workers"))?;
    let workers = workers(a.workers.or(from_spec))?;
    let resume = a.resume || spec.get("resume", false)?;
    let total = spec.number_of_points();
    let mut params = spec.entries.clone();
    params.retain(|k, _| !RUN_KEYS.contains(&k.as_str()));
    let params = json!(params);
    let grid =
        json!(spec.axes.iter().map(|(n, v)| (n.to_string(), v.iter().map(|&x| num(x)).collect::<Vec<_>>())).collect::<BTreeMap<_, _>>());
    let mut run = match Run::prepare(&a.out.out, "sweep", params, vec![], grid, a.out.force)? {
        Prepared::AlreadyComplete(dir) => {
            println!("{} is complete; nothing to do (use --force to recompute)", dir.display());
            return Ok(());
        }
        Prepared::Fresh(run) => run,
    };
    let points = run.dir.join("points");
    if !resume && points.exists() {
        fs::remove_dir_all(&points).with_context(|| format!("clearing {}", points.display()))?;
    }
    fs::create_dir_all(&points)?;

    let body = |run: &mut Run| -> Result<()> {
        let todo: Vec<usize> = (0..total).filter(|&i| !point_path(&points, i).exists()).collect();
        eprintln!("sweep: {} of {total} points to compute with {workers} workers", todo.len());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        pool.install(|| {
            todo.par_iter().try_for_each(|&index| -> Result<()> {
                let coordinates = spec.coordinates(index);
                let fields = evaluate(&spec, &coordinates)?;
                let record = PointRecord { index, coordinates, fields };
                write_atomic(&point_path(&points, index), &serde_json::to_vec(&record)?)
            })
        })?;

        let mut columns: Vec<&str> = spec.axes.iter().map(|(n, _)| *n).collect();
        columns.extend(spec.task.columns());
        let mut t = Table::bare(&run.output("results.csv"), &run.id, &columns)?;
        for index in 0..total {
            let path = point_path(&points, index);
            let record: PointRecord = serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?;
            let mut fields: Vec<String> = record.coordinates.iter().map(|&x| num(x)).collect();
            fields.extend(record.fields);
            t.row(&fields)?;
        }
        t.finish()
    };
    match body(&mut run) {
        Ok(()) => {
            let dir = run.dir.clone();
            run.finish(Status::Complete, None)?;
            println!("{}", dir.display());
            Ok(())
        }
        Err(e) => {
            run.finish(Status::Failed, Some(format!("{e:#}")))?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_and_coordinates() {
        let spec = Spec::parse("task = phase\naxis.p = 3:5:3\ndeltap = 1\naxis.delta2 = 0.5:2:4\n").unwrap();
        assert_eq!(spec.number_of_points(), 12);
        assert_eq!(spec.coordinates(0), vec![0.5, 3.0]);
        assert_eq!(spec.coordinates(5), vec![1.0, 5.0]);
        assert_eq!(spec.coordinates(11), vec![2.0, 5.0]);
        let log = parse_axis("delta2", "0.1:10:3:log").unwrap();
        assert!((log[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_specs_are_usage_errors() {
        for text in [
            "task = nope\ndelta2 = 1\ndeltap = 1",
            "task = phase\ndeltap = 1",
            "task = phase\ndelta2 = 1\ndeltap = 1\naxis.p = 2.5:3:2",
            "task = phase\ndelta2 = 1\naxis.deltap = 1:2:1",
            "task = instance\ndelta2 = 1\ndeltap = 1\naxis.seed = 0:3:4",
            "task = phase\ndelta2 = 1\ndeltap = 1\ntmax = 3",
            "task = phase\ndelta2 = 1\naxis.deltap = 1:2",
        ] {
            let e = Spec::parse(text).err().expect(text);
            assert!(e.downcast_ref::<crate::UsageError>().is_some(), "{text}: {e}");
        }
    }
}
