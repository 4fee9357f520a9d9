//! Single-run subcommands. Each writes its tables into a run directory and finishes with the
//! manifest; a numerical failure still leaves the partial outputs and a `failed` manifest.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};
use spiked_core::analysis::{fdt_curve, pane_from_fixed};
use spiked_core::instance_sim::{
    amp_default_init, amp_nishimori_init, amp_run, bethe_free_entropy, generate_instance, generate_instance_implicit, langevin_run,
    Instance, LangevinConfig,
};
use spiked_core::lse_dyngrid::{integrate_dyngrid_partial, DynGridConfig, DynRun, Pane};
use spiked_core::lse_fixed::{integrate_fixed, AnnealSchedule, FixedGridConfig, TrajectoryRow, TwoTimeField};
use spiked_core::replica_1rsb::{complexity_curve, default_x_grid, log_grid, threshold_states};
use spiked_core::rs_landscape::{
    algorithmic_spinodal, classify_phase, dynamical_spinodal, it_threshold, langevin_threshold, se_fixed_point, se_two_param_iterate,
    SEState, EPS_INIT,
};
use spiked_core::ModelParams;

use crate::manifest::{write_atomic, Prepared, Run, Status};
use crate::table::{num, opt, Table};
use crate::{AnnealArgs, ComplexityArgs, FdtArgs, InstanceArgs, LseArgs, ModelArgs, OutArgs, PhaseArgs, Scheme, UsageError};

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn model(m: &ModelArgs) -> Result<ModelParams> {
    Ok(ModelParams::new(m.p, m.delta2, m.deltap)?)
}

fn model_json(params: &ModelParams) -> Value {
    json!({ "p": params.p, "delta2": num(params.delta2), "deltap": num(params.deltap) })
}

/// `count` evenly spaced values from `lo` to `hi`; a single value is `lo`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect(),
    }
}

/// Opens the run directory, or reports that an identical complete run exists.
fn open(out: &OutArgs, command: &str, params: Value, seeds: Vec<u64>, grid: Value) -> Result<Option<Run>> {
    match Run::prepare(&out.out, command, params, seeds, grid, out.force)? {
        Prepared::AlreadyComplete(dir) => {
            println!("{} is complete; nothing to do (use --force to recompute)", dir.display());
            Ok(None)
        }
        Prepared::Fresh(run) => Ok(Some(run)),
    }
}

/// Runs `body`, then writes the manifest with the outcome.
fn execute(mut run: Run, body: impl FnOnce(&mut Run) -> Result<()>) -> Result<()> {
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

const TRAJECTORY_COLUMNS: [&str; 6] = ["t", "cbar", "mu", "e2", "ep", "e_total"];

fn write_trajectory(path: &Path, run_id: &str, params: &ModelParams, rows: &[TrajectoryRow]) -> Result<()> {
    let mut t = Table::create(path, run_id, params, &TRAJECTORY_COLUMNS)?;
    for r in rows {
        t.nums(&[r.t, r.cbar, r.mu, r.e2, r.ep, r.e_total])?;
    }
    t.finish()
}

fn fixed_rows(field: &TwoTimeField) -> Vec<TrajectoryRow> {
    (0..field.len())
        .map(|i| TrajectoryRow {
            t: field.time(i),
            cbar: field.cbar[i],
            mu: field.mu[i],
            e2: field.e2[i],
            ep: field.ep[i],
            e_total: field.energy_total(i),
        })
        .collect()
}

fn write_panes(run: &mut Run, params: &ModelParams, panes: &[Pane]) -> Result<()> {
    for pane in panes {
        let path = run.output(&pane.file_name());
        let mut t = Table::create(&path, &run.id, params, &["t_w", "t", "C", "Q"])?;
        for &(time, c, q) in &pane.points {
            t.nums(&[pane.t_w, time, c, q])?;
        }
        t.finish()?;
    }
    Ok(())
}

fn write_json(run: &mut Run, name: &str, mut value: Value) -> Result<()> {
    if let Value::Object(map) = &mut value {
        map.insert("run_id".into(), Value::String(run.id.clone()));
    }
    write_atomic(&run.output(name), &serde_json::to_vec_pretty(&value)?)
}

pub fn phase(a: &PhaseArgs) -> Result<()> {
    if a.deltap_count == 0 || a.inv_delta2_count == 0 {
        return Err(usage("grid counts must be positive"));
    }
    if !(a.deltap_min > 0.0 && a.inv_delta2_min > 0.0) {
        return Err(usage("grid lower bounds must be positive"));
    }
    ModelParams::new(a.p, 1.0, 1.0)?;
    let params = json!({
        "p": a.p,
        "deltap": [num(a.deltap_min), num(a.deltap_max), a.deltap_count],
        "inv_delta2": [num(a.inv_delta2_min), num(a.inv_delta2_max), a.inv_delta2_count],
    });
    let Some(run) = open(&a.out, "phase", params.clone(), vec![], params)? else {
        return Ok(());
    };
    execute(run, |run| {
        let dps = linspace(a.deltap_min, a.deltap_max, a.deltap_count);
        let invs = linspace(a.inv_delta2_min, a.inv_delta2_max, a.inv_delta2_count);
        let cells: Vec<(f64, f64)> = dps.iter().flat_map(|&dp| invs.iter().map(move |&inv| (dp, inv))).collect();
        let rows: Vec<Vec<String>> = cells.par_iter().map(|&(dp, inv)| phase_row(a.p, 1.0 / inv, dp)).collect();
        let mut t = Table::bare(
            &run.output("phase.csv"),
            &run.id,
            &["p", "deltap", "delta2", "inv_delta2", "phase", "m_amp", "m_star", "mmse", "error"],
        )?;
        for ((dp, inv), row) in cells.iter().zip(rows) {
            let mut fields = vec![a.p.to_string(), num(*dp), num(1.0 / inv), num(*inv)];
            fields.extend(row);
            t.row(&fields)?;
        }
        t.finish()?;

        let mut b = Table::bare(&run.output("boundaries.csv"), &run.id, &["p", "curve", "deltap", "inv_delta2"])?;
        for (curve, dp, inv) in boundaries(a.p, &dps, &invs) {
            b.row(&[a.p.to_string(), curve.to_string(), num(dp), num(inv)])?;
        }
        b.finish()
    })
}

/// `phase, m_amp, m_star, mmse, error` for one cell.
pub fn phase_row(p: u32, delta2: f64, deltap: f64) -> Vec<String> {
    match ModelParams::new(p, delta2, deltap) {
        Ok(params) => {
            let pt = classify_phase(&params);
            vec![pt.phase.to_string(), num(pt.m_amp), num(pt.m_star), num(pt.mmse), String::new()]
        }
        Err(e) => vec![String::new(), String::new(), String::new(), String::new(), e.to_string()],
    }
}

/// Boundary polylines `(curve, Δₚ, 1/Δ₂)` sampled on the grid axes.
fn boundaries(p: u32, dps: &[f64], invs: &[f64]) -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();
    for &dp in dps {
        out.push(("stability", dp, 1.0));
    }
    for &inv in invs {
        let Ok(params) = ModelParams::new(p, 1.0 / inv, 1.0) else { continue };
        if let Some(dp) = algorithmic_spinodal(&params) {
            out.push(("algorithmic", dp, inv));
        }
    }
    for &inv in invs {
        if inv < 1.0 {
            if let Ok(Some(dp)) = it_threshold(p, 1.0 / inv) {
                out.push(("it", dp, inv));
            }
        }
    }
    for &inv in invs {
        let Ok(params) = ModelParams::new(p, 1.0 / inv, 1.0) else { continue };
        if let Some(dp) = dynamical_spinodal(&params) {
            out.push(("dynamical", dp, inv));
        }
    }
    for &dp in dps {
        let Ok(params) = ModelParams::new(p, 1.0, dp) else { continue };
        out.push(("langevin", dp, 1.0 / langevin_threshold(&params).effective));
    }
    out
}

pub fn dyn_config(nt: usize, dt0: f64, tmax: f64, doublings: Option<usize>, nc: usize, cbar0: f64, waiting_times: &[f64]) -> DynGridConfig {
    DynGridConfig {
        nt,
        n_doublings: doublings.unwrap_or_else(|| DynGridConfig::doublings_for(nt, dt0, tmax)),
        dt0,
        nc,
        cbar0,
        waiting_times: waiting_times.to_vec(),
        ..DynGridConfig::default()
    }
}

fn interruption(run: &DynRun) -> Result<()> {
    match &run.interrupted {
        Some(int) => Err(anyhow::Error::new(int.error.clone()).context(format!("dynamic grid stopped at t = {}", int.time))),
        None => Ok(()),
    }
}

pub fn lse(a: &LseArgs) -> Result<()> {
    let params = model(&a.model)?;
    let mut p = model_json(&params);
    p["scheme"] = json!(a.scheme);
    p["cbar0"] = json!(num(a.cbar0));
    p["tmax"] = json!(num(a.tmax));
    p["waiting_times"] = json!(a.waiting_times.iter().map(|&t| num(t)).collect::<Vec<_>>());
    let grid = match a.scheme {
        Scheme::Fixed => json!({ "dt": num(a.dt), "steps": (a.tmax / a.dt).round() as u64 }),
        Scheme::Dyn => {
            let c = dyn_config(a.nt, a.dt0, a.tmax, a.doublings, a.nc, a.cbar0, &a.waiting_times);
            json!({ "nt": c.nt, "dt0": num(c.dt0), "nc": c.nc, "doublings": c.n_doublings, "horizon": num(c.horizon()) })
        }
    };
    p["grid"] = grid.clone();
    let Some(run) = open(&a.out, "lse", p, vec![], grid)? else {
        return Ok(());
    };
    execute(run, |run| match a.scheme {
        Scheme::Fixed => {
            let config = FixedGridConfig { dt: a.dt, t_max: a.tmax, cbar0: a.cbar0, ..FixedGridConfig::default() };
            let field = integrate_fixed(&params, &AnnealSchedule::constant(), &config)?;
            write_trajectory(&run.output("trajectory.csv"), &run.id, &params, &fixed_rows(&field))?;
            let panes: Vec<Pane> = a.waiting_times.iter().map(|&tw| pane_from_fixed(&field, tw)).collect();
            write_panes(run, &params, &panes)
        }
        Scheme::Dyn => {
            let config = dyn_config(a.nt, a.dt0, a.tmax, a.doublings, a.nc, a.cbar0, &a.waiting_times);
            let out = integrate_dyngrid_partial(&params, &config)?;
            write_trajectory(&run.output("trajectory.csv"), &run.id, &params, &out.trajectory)?;
            write_panes(run, &params, &out.panes)?;
            write_json(
                run,
                "summary.json",
                json!({
                    "max_sweeps": out.max_sweeps,
                    "horizon": config.horizon(),
                    "interrupted_at": out.interrupted.as_ref().map(|i| i.time),
                }),
            )?;
            interruption(&out)
        }
    })
}

pub fn anneal(a: &AnnealArgs) -> Result<()> {
    let params = model(&a.model)?;
    if a.tau_ann.is_empty() || a.tau_ann.iter().any(|&t| t.is_nan() || t <= 0.0) {
        return Err(usage("--tau-ann needs positive annealing times"));
    }
    let mut p = model_json(&params);
    p["c_amp"] = json!(num(a.c_amp));
    p["tau_ann"] = json!(a.tau_ann.iter().map(|&t| num(t)).collect::<Vec<_>>());
    p["cbar0"] = json!(num(a.cbar0));
    p["tmax"] = json!(num(a.tmax));
    let grid = json!({ "dt": num(a.dt), "steps": (a.tmax / a.dt).round() as u64 });
    p["grid"] = grid.clone();
    let Some(run) = open(&a.out, "anneal", p, vec![], grid)? else {
        return Ok(());
    };
    let m_amp = se_fixed_point(EPS_INIT, &params);
    execute(run, |run| {
        let config = FixedGridConfig { dt: a.dt, t_max: a.tmax, cbar0: a.cbar0, ..FixedGridConfig::default() };
        let mut summary = Table::create(
            &run.output("anneal_summary.csv"),
            &run.id,
            &params,
            &["c_amp", "tau_ann", "t_end", "cbar_end", "m_amp", "magnetized"],
        )?;
        for &tau in &a.tau_ann {
            let schedule = AnnealSchedule::tensor_exponential(a.c_amp, tau);
            let field = integrate_fixed(&params, &schedule, &config)?;
            let rows = fixed_rows(&field);
            write_trajectory(&run.output(&format!("anneal_tau{}.csv", num(tau))), &run.id, &params, &rows)?;
            let last = rows.last().context("empty trajectory")?;
            let magnetized = last.cbar >= 0.5 * m_amp;
            summary.row(&[num(a.c_amp), num(tau), num(last.t), num(last.cbar), num(m_amp), magnetized.to_string()])?;
        }
        summary.finish()
    })
}

pub fn fdt(a: &FdtArgs) -> Result<()> {
    let params = model(&a.model)?;
    let mut p = model_json(&params);
    p["waiting_times"] = json!(a.waiting_times.iter().map(|&t| num(t)).collect::<Vec<_>>());
    p["cbar0"] = json!(num(a.cbar0));
    p["tmax"] = json!(num(a.tmax));
    let config = dyn_config(a.nt, a.dt0, a.tmax, None, spiked_core::lse_dyngrid::DEFAULT_NC, a.cbar0, &a.waiting_times);
    let grid = json!({ "nt": config.nt, "dt0": num(config.dt0), "doublings": config.n_doublings });
    p["grid"] = grid.clone();
    let Some(run) = open(&a.out, "fdt", p, vec![], grid)? else {
        return Ok(());
    };
    execute(run, |run| {
        let out = integrate_dyngrid_partial(&params, &config)?;
        write_trajectory(&run.output("trajectory.csv"), &run.id, &params, &out.trajectory)?;
        write_panes(run, &params, &out.panes)?;
        let (lines, fit) = fdt_curve(&out.panes)?;
        let mut t = Table::create(&run.output("fdt_polylines.csv"), &run.id, &params, &["t_w", "C", "F"])?;
        for l in &lines {
            for &(c, f) in &l.points {
                t.nums(&[l.t_w, c, f])?;
            }
        }
        t.finish()?;
        write_json(
            run,
            "fdt_fit.json",
            json!({
                "x_hat": fit.x_hat,
                "q_ea_hat": fit.q_ea_hat,
                "short_slope": fit.short_slope,
                "rms": fit.rms,
                "waiting_times": fit.waiting_times,
            }),
        )?;
        interruption(&out)
    })
}

/// `lo:hi:count` (log-spaced) or `a,b,c`.
pub fn parse_x_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || usage(format!("cannot parse x grid {spec:?}; use lo:hi:count or a comma list"));
    let grid = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [lo, hi, n] = parts[..] else { return Err(bad()) };
        let (lo, hi, n): (f64, f64, usize) =
            (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?);
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            return Err(bad());
        }
        log_grid(lo, hi, n)
    } else {
        spec.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() || grid.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(usage(format!("Parisi parameters must lie in (0, 1], got {spec:?}")));
    }
    Ok(grid)
}

pub fn complexity(a: &ComplexityArgs) -> Result<()> {
    let params = model(&a.model)?;
    let x_grid = match &a.x_grid {
        Some(s) => parse_x_grid(s)?,
        None => default_x_grid(),
    };
    let mut p = model_json(&params);
    let grid = json!(x_grid.iter().map(|&x| num(x)).collect::<Vec<_>>());
    p["x_grid"] = grid.clone();
    let Some(run) = open(&a.out, "complexity", p, vec![], grid)? else {
        return Ok(());
    };
    execute(run, |run| {
        let curve = complexity_curve(&params, &x_grid)?;
        let mut t = Table::create(
            &run.output("complexity.csv"),
            &run.id,
            &params,
            &["x", "q_big", "q_small", "m", "action", "sigma", "free_energy", "energy", "lambda_i", "lambda_ii", "stable"],
        )?;
        for pt in &curve {
            let mut fields = vec![num(pt.x)];
            match &pt.saddle {
                Some(s) => {
                    fields.extend([s.q_big, s.q_small, s.m, s.action, s.sigma, s.free_energy, s.energy, s.lambda_i, s.lambda_ii].map(num));
                    fields.push(pt.stable().to_string());
                }
                None => fields.extend(std::iter::repeat_n(String::new(), 10)),
            }
            t.row(&fields)?;
        }
        t.finish()?;
        let th = threshold_states(&params);
        write_json(run, "threshold.json", json!({ "exists": th.exists, "q_th": th.q_th, "x_th": th.x_th, "e_th": th.e_th }))
    })
}

pub fn build_instance(params: &ModelParams, n: usize, seed: u64, implicit: bool) -> Result<Instance> {
    let inst = if implicit { generate_instance_implicit(n, params, seed, false) } else { generate_instance(n, params, seed, false) };
    inst.context("generating the instance (pass --implicit to regenerate the tensor instead of storing it)")
}

/// SE overlaps from the measured starting point, `None` once outside the SE domain.
pub fn se_reference(m0: f64, q0: f64, params: &ModelParams, iters: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(iters + 1);
    let mut state = Some(SEState { m: m0, q: q0 });
    for _ in 0..=iters {
        out.push(state.map(|s| s.m));
        state = state.and_then(|s| se_two_param_iterate(s, params).ok());
    }
    out
}

pub fn instance(a: &InstanceArgs) -> Result<()> {
    let params = model(&a.model)?;
    let mut p = model_json(&params);
    p["n"] = json!(a.n);
    p["algo"] = json!(a.algo);
    match a.algo {
        crate::Algo::Amp => {
            p["iters"] = json!(a.iters);
            p["m0"] = json!(a.m0.map(num));
        }
        crate::Algo::Langevin => {
            p["dt"] = json!(num(a.dt));
            p["tmax"] = json!(num(a.tmax));
            p["cbar0"] = json!(a.cbar0.map(num));
            p["record_every"] = json!(a.record_every);
        }
    }
    p["implicit"] = json!(a.implicit);
    let Some(run) = open(&a.out, "instance", p, vec![a.seed], Value::Null)? else {
        return Ok(());
    };
    execute(run, |run| {
        let inst = build_instance(&params, a.n, a.seed, a.implicit)?;
        if a.save_instance {
            inst.write(&run.output("instance.bin"))?;
        }
        let nf = a.n as f64;
        match a.algo {
            crate::Algo::Amp => {
                let init = match a.m0 {
                    Some(m0) => amp_nishimori_init(&inst, m0, a.seed)?,
                    None => amp_default_init(a.n, a.seed),
                };
                let q0 = init.iter().map(|v| v * v).sum::<f64>() / nf;
                let out = amp_run(&inst, a.iters, &init)?;
                let se = se_reference(out.overlaps[0], q0, &params, a.iters);
                let mut t = Table::create(&run.output("amp.csv"), &run.id, &params, &["seed", "iter", "overlap", "se_overlap"])?;
                for (k, (&m, s)) in out.overlaps.iter().zip(&se).enumerate() {
                    t.row(&[a.seed.to_string(), k.to_string(), num(m), opt(*s)])?;
                }
                t.finish()?;
                let final_m = *out.overlaps.last().context("empty AMP trajectory")?;
                write_json(
                    run,
                    "summary.json",
                    json!({
                        "seed": a.seed,
                        "final_overlap": final_m,
                        "m_amp": se_fixed_point(EPS_INIT, &params),
                        "bethe_free_entropy": bethe_free_entropy(&out.state, &inst),
                    }),
                )
            }
            crate::Algo::Langevin => {
                let config = LangevinConfig {
                    dt: a.dt,
                    t_max: a.tmax,
                    seed: a.seed,
                    cbar0: a.cbar0,
                    record_every: a.record_every,
                    ..LangevinConfig::default()
                };
                let out = langevin_run(&inst, &config)?;
                let mut t = Table::create(&run.output("langevin.csv"), &run.id, &params, &["seed", "t", "overlap", "energy"])?;
                for s in &out.samples {
                    t.row(&[a.seed.to_string(), num(s.t), num(s.overlap), num(s.energy)])?;
                }
                t.finish()
            }
        }
    })
}
