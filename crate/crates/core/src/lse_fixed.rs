//! Langevin state evolution on a uniform time grid.
//!
//! Forward differences in time and trapezoidal memory integrals, following the causal
//! order μ(t) → C̄(t+dt) → C(t+dt, ·) → R(t+dt, ·). Channel temperatures may depend on
//! time, which is how annealing protocols are expressed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{powi, ModelParams};

pub const DEFAULT_DT: f64 = 6.25e-3;
pub const DEFAULT_CBAR0: f64 = 1e-4;
/// Initial overlap used for threshold extrapolation runs.
pub const THRESHOLD_CBAR0: f64 = 1e-40;
pub const DEFAULT_MEMORY_BUDGET: u64 = 3_000_000_000;

/// Lower-triangular matrix (diagonal included) stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMatrix {
    rows: usize,
    data: Vec<f64>,
}

impl TriMatrix {
    pub fn zeros(rows: usize) -> Self {
        Self { rows, data: vec![0.0; rows * (rows + 1) / 2] }
    }

    pub fn bytes_for(rows: usize) -> u64 {
        (rows as u64) * (rows as u64 + 1) / 2 * 8
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    fn offset(i: usize) -> usize {
        i * (i + 1) / 2
    }

    /// Entries `(i, 0..=i)`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[Self::offset(i)..Self::offset(i + 1)]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[Self::offset(i)..Self::offset(i + 1)]
    }

    /// Entry `(i, j)` for `j ≤ i`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        self.data[Self::offset(i) + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i);
        self.data[Self::offset(i) + j] = v;
    }
}

/// Time dependence of one channel temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TempMode {
    Constant,
    /// `T(t) = 1 + (amplitude/Δ)·e^{−t/tau}`, i.e. an effective variance `Δ + amplitude·e^{−t/tau}`.
    Exponential {
        amplitude: f64,
        tau: f64,
    },
}

impl TempMode {
    pub fn temperature(&self, t: f64, delta: f64) -> f64 {
        match *self {
            TempMode::Constant => 1.0,
            TempMode::Exponential { amplitude, tau } => 1.0 + amplitude / delta * (-t / tau).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TempMode::Constant => Ok(()),
            TempMode::Exponential { amplitude, tau } if amplitude >= 0.0 && tau > 0.0 => Ok(()),
            TempMode::Exponential { amplitude, tau } => {
                Err(Error::InvalidParams(format!("annealing needs amplitude ≥ 0 and tau > 0, got amplitude = {amplitude}, tau = {tau}")))
            }
        }
    }
}

/// Temperatures of the matrix and tensor channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub matrix: TempMode,
    pub tensor: TempMode,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::constant()
    }
}

impl AnnealSchedule {
    pub fn constant() -> Self {
        Self { matrix: TempMode::Constant, tensor: TempMode::Constant }
    }

    /// Exponential annealing of the tensor channel only.
    pub fn tensor_exponential(amplitude: f64, tau: f64) -> Self {
        Self { matrix: TempMode::Constant, tensor: TempMode::Exponential { amplitude, tau } }
    }

    pub fn is_constant(&self) -> bool {
        self.matrix == TempMode::Constant && self.tensor == TempMode::Constant
    }

    pub fn t2(&self, t: f64, params: &ModelParams) -> f64 {
        self.matrix.temperature(t, params.delta2)
    }

    pub fn tp(&self, t: f64, params: &ModelParams) -> f64 {
        self.tensor.temperature(t, params.deltap)
    }
}

/// Effective tensor variance `T_p(t)·Δₚ`.
pub fn anneal_effective_delta(schedule: &AnnealSchedule, t: f64, params: &ModelParams) -> f64 {
    schedule.tp(t, params) * params.deltap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedGridConfig {
    pub dt: f64,
    pub t_max: f64,
    pub cbar0: f64,
    pub memory_budget: u64,
}

impl Default for FixedGridConfig {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, t_max: 100.0, cbar0: DEFAULT_CBAR0, memory_budget: DEFAULT_MEMORY_BUDGET }
    }
}

impl FixedGridConfig {
    pub fn steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }

    /// Bytes held by the two triangular arrays.
    pub fn memory_estimate(&self) -> u64 {
        2 * TriMatrix::bytes_for(self.steps() + 1)
    }
}

/// Solution of the LSE on a uniform grid `t_i = i·dt`, `i = 0..=steps`.
#[derive(Debug, Clone)]
pub struct TwoTimeField {
    pub params: ModelParams,
    pub schedule: AnnealSchedule,
    pub dt: f64,
    /// `C(t_i, t_j)` for `j ≤ i`.
    pub c: TriMatrix,
    /// `R(t_i, t_j)` for `j ≤ i`; `R(t_i, t_i) = 0`, `R(t_i, t_{i−1}) = 1`.
    pub r: TriMatrix,
    pub cbar: Vec<f64>,
    pub mu: Vec<f64>,
    pub e2: Vec<f64>,
    pub ep: Vec<f64>,
}

impl TwoTimeField {
    pub fn len(&self) -> usize {
        self.cbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cbar.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// `C(t_i, t_j)`, symmetric.
    pub fn corr(&self, i: usize, j: usize) -> f64 {
        if j <= i {
            self.c.get(i, j)
        } else {
            self.c.get(j, i)
        }
    }

    /// `R(t_i, t_j)`, zero for `j ≥ i`.
    pub fn resp(&self, i: usize, j: usize) -> f64 {
        if j < i {
            self.r.get(i, j)
        } else {
            0.0
        }
    }

    /// Integrated response `∫_{t_j}^{t_i} R(t_i, s) ds` (trapezoid).
    pub fn integrated_response(&self, i: usize, j: usize) -> f64 {
        if j >= i {
            return 0.0;
        }
        let row = self.r.row(i);
        let inner: f64 = row[j..=i].iter().sum();
        self.dt * (inner - 0.5 * (row[j] + row[i]))
    }

    pub fn energy_total(&self, i: usize) -> f64 {
        self.e2[i] + self.ep[i]
    }

    /// Grid index closest to time `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.len().saturating_sub(1))
    }

    /// Rows `(t, C(t, t_w), R(t, t_w))` for `t ≥ t_w`, with `t_w` snapped to the grid.
    pub fn slice(&self, t_w: f64) -> Vec<(f64, f64, f64)> {
        let j = self.index_of(t_w);
        (j..self.len()).map(|i| (self.time(i), self.corr(i, j), self.resp(i, j))).collect()
    }

    /// CSV with columns `t, Cbar, mu, e2, ep, E_total`.
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let rows = (0..self.len()).map(|i| TrajectoryRow {
            t: self.time(i),
            cbar: self.cbar[i],
            mu: self.mu[i],
            e2: self.e2[i],
            ep: self.ep[i],
            e_total: self.energy_total(i),
        });
        write_trajectory_rows(path, rows)
    }

    /// CSV with columns `t, C, R` at waiting time `t_w`.
    pub fn write_slice_csv(&self, path: &Path, t_w: f64) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "C", "R"])?;
        for (t, c, r) in self.slice(t_w) {
            w.write_record([fmt(t), fmt(c), fmt(r)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of the one-time trajectory table shared by both integrators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub cbar: f64,
    pub mu: f64,
    pub e2: f64,
    pub ep: f64,
    pub e_total: f64,
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_trajectory_rows(path: &Path, rows: impl IntoIterator<Item = TrajectoryRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "Cbar", "mu", "e2", "ep", "E_total"])?;
    for r in rows {
        w.write_record([fmt(r.t), fmt(r.cbar), fmt(r.mu), fmt(r.e2), fmt(r.ep), fmt(r.e_total)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a table written by [`write_trajectory_rows`].
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> =
            rec.iter().map(|s| s.parse::<f64>().map_err(|e| Error::Io(format!("bad number {s:?}: {e}")))).collect::<Result<_>>()?;
        if v.len() != 6 {
            return Err(Error::Io(format!("expected 6 columns, found {}", v.len())));
        }
        out.push(TrajectoryRow { t: v[0], cbar: v[1], mu: v[2], e2: v[3], ep: v[4], e_total: v[5] });
    }
    Ok(out)
}

/// Integrates the LSE from `C̄(0) = cbar0` up to `t_max`.
pub fn integrate_fixed(params: &ModelParams, schedule: &AnnealSchedule, config: &FixedGridConfig) -> Result<TwoTimeField> {
    let FixedGridConfig { dt, t_max, cbar0, memory_budget } = *config;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParams(format!("dt = {dt} must be positive")));
    }
    if !(t_max >= 0.0) {
        return Err(Error::InvalidParams(format!("t_max = {t_max} must be non-negative")));
    }
    if !(-1.0..=1.0).contains(&cbar0) {
        return Err(Error::InvalidParams(format!("cbar0 = {cbar0} outside [-1, 1]")));
    }
    schedule.matrix.validate()?;
    schedule.tensor.validate()?;
    let needed = config.memory_estimate();
    if needed > memory_budget {
        return Err(Error::MemoryBudget { needed, budget: memory_budget });
    }

    let steps = config.steps();
    let len = steps + 1;
    let p = params.p;
    let pf = params.pf();
    let inv_d2 = 1.0 / params.delta2;
    let inv_dp = 1.0 / params.deltap;
    let t2: Vec<f64> = (0..len).map(|i| schedule.t2(i as f64 * dt, params)).collect();
    let tp: Vec<f64> = (0..len).map(|i| schedule.tp(i as f64 * dt, params)).collect();

    let mut c = TriMatrix::zeros(len);
    let mut r = TriMatrix::zeros(len);
    let mut cbar = vec![0.0; len];
    let mut mu = vec![0.0; len];
    let mut e2 = vec![0.0; len];
    let mut ep = vec![0.0; len];
    c.set(0, 0, 1.0);
    cbar[0] = cbar0;

    let mut a = vec![0.0; len];
    let mut b = vec![0.0; len];
    let mut wa = vec![0.0; len];
    let mut i1 = vec![0.0; len];
    let mut i2 = vec![0.0; len];
    let mut ir = vec![0.0; len];

    for n in 0..len {
        let t = n as f64 * dt;
        let i2_now = inv_d2 / t2[n];
        let ip_now = inv_dp / tp[n];
        let c_row = c.row(n);
        let r_row = r.row(n);

        // Memory kernels along the current row and the observables at time t_n.
        let mut mu_int = 0.0;
        let mut e2_int = 0.0;
        let mut ep_int = 0.0;
        for s in 0..=n {
            let cs = c_row[s];
            let rs = r_row[s];
            let w2 = i2_now / t2[s];
            let wp = ip_now / tp[s];
            let cp2 = powi(cs, p - 2);
            let cp1 = cp2 * cs;
            a[s] = rs * ((pf - 1.0) * cp2 * wp + w2);
            b[s] = cp1 * wp + cs * w2;
            let wt = if s == 0 || s == n { 0.5 * dt } else { dt };
            wa[s] = wt * a[s];
            let rc = wt * rs * cs * w2;
            let rcp = wt * rs * cp1 * wp;
            mu_int += 2.0 * rc + pf * rcp;
            e2_int += rc;
            ep_int += rcp;
        }
        if n == 0 {
            mu_int = 0.0;
            e2_int = 0.0;
            ep_int = 0.0;
        }
        let cb = cbar[n];
        let drive = cb * i2_now + powi(cb, p - 1) * ip_now;
        mu[n] = 1.0 + drive * cb + mu_int;
        e2[n] = -(e2_int + 0.5 * cb * cb * i2_now);
        ep[n] = -(ep_int + powi(cb, p) * ip_now / pf);
        if !mu[n].is_finite() || !cb.is_finite() {
            return Err(Error::Numerical { time: t, reason: format!("non-finite state (mu = {}, Cbar = {cb})", mu[n]) });
        }
        if n == steps {
            break;
        }

        // Row passes: I1 and IR accumulate over rows, I2 is a dot product per row.
        i1[..=n].fill(0.0);
        ir[..=n].fill(0.0);
        let mut cbar_int = 0.0;
        for row in 0..=n {
            let cr = c.row(row);
            let rr = r.row(row);
            let dot_c = dot(&wa[..=row], cr);
            let dot_r = dot(&b[..=row], rr);
            i1[row] += dot_c;
            i2[row] = if row == 0 { 0.0 } else { dt * (dot_r - 0.5 * rr[0] * b[0]) };
            let (war, ar) = (wa[row], dt * a[row]);
            if row > 0 && (war != 0.0 || ar != 0.0) {
                axpy(&mut i1[..row], war, &cr[..row]);
                axpy(&mut ir[..row], ar, &rr[..row]);
            }
            cbar_int += wa[row] * cbar[row];
        }

        cbar[n + 1] = cb + dt * (-mu[n] * cb + drive + cbar_int);
        let mu_n = mu[n];
        let mut new_c = vec![0.0; n + 2];
        let mut new_r = vec![0.0; n + 2];
        {
            let c_row = c.row(n);
            let r_row = r.row(n);
            for j in 0..=n {
                new_c[j] = c_row[j] + dt * (-mu_n * c_row[j] + cbar[j] * drive + i1[j] + i2[j]);
                if j < n {
                    new_r[j] = r_row[j] + dt * (-mu_n * r_row[j] + ir[j]);
                }
            }
        }
        new_c[n + 1] = 1.0;
        new_r[n] = 1.0;
        new_r[n + 1] = 0.0;
        if new_c.iter().any(|v| !v.is_finite()) || new_r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { time: t + dt, reason: "non-finite two-time entries".into() });
        }
        c.row_mut(n + 1).copy_from_slice(&new_c);
        r.row_mut(n + 1).copy_from_slice(&new_r);
    }

    Ok(TwoTimeField { params: *params, schedule: *schedule, dt, c, r, cbar, mu, e2, ep })
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for k in 0..chunks {
        let (x, y) = (&a[8 * k..8 * k + 8], &b[8 * k..8 * k + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for k in 8 * chunks..n {
        tail += a[k] * b[k];
    }
    acc.iter().sum::<f64>() + tail
}

/// `y += alpha·x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Per-time channel energies `(e₂, e_p, e₂ + e_p)` of an integrated field.
pub fn energy_observables(field: &TwoTimeField) -> Vec<(f64, f64, f64)> {
    (0..field.len()).map(|i| (field.e2[i], field.ep[i], field.energy_total(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free() -> ModelParams {
        ModelParams::new(3, f64::INFINITY, f64::INFINITY).unwrap()
    }

    #[test]
    fn trimatrix_layout() {
        let mut m = TriMatrix::zeros(4);
        m.set(3, 2, 5.0);
        assert_eq!(m.row(3), &[0.0, 0.0, 5.0, 0.0]);
        assert_eq!(m.get(3, 2), 5.0);
        assert_eq!(TriMatrix::bytes_for(4), 80);
    }

    #[test]
    fn free_diffusion() {
        let cfg = FixedGridConfig { dt: 1e-3, t_max: 2.0, cbar0: 0.5, ..Default::default() };
        let f = integrate_fixed(&free(), &AnnealSchedule::constant(), &cfg).unwrap();
        for i in (0..f.len()).step_by(97) {
            for j in (0..=i).step_by(53) {
                let want = (-(f.time(i) - f.time(j))).exp();
                assert!((f.corr(i, j) - want).abs() < 1e-3);
                if j < i {
                    assert!((f.resp(i, j) - want).abs() < 1e-3);
                }
            }
            assert!((f.cbar[i] - 0.5 * (-f.time(i)).exp()).abs() < 1e-3);
            assert!((f.mu[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let p = free();
        let s = AnnealSchedule::constant();
        let bad_dt = FixedGridConfig { dt: 0.0, ..Default::default() };
        assert!(integrate_fixed(&p, &s, &bad_dt).is_err());
        let huge = FixedGridConfig { dt: 1e-4, t_max: 100.0, ..Default::default() };
        assert!(matches!(integrate_fixed(&p, &s, &huge), Err(Error::MemoryBudget { .. })));
    }

    #[test]
    fn mu_identity() {
        let params = ModelParams::new(3, 0.8, 0.6).unwrap();
        let cfg = FixedGridConfig { dt: 0.01, t_max: 5.0, cbar0: 0.2, ..Default::default() };
        let f = integrate_fixed(&params, &AnnealSchedule::constant(), &cfg).unwrap();
        for i in 0..f.len() {
            let recon = 1.0 - 2.0 * f.e2[i] - 3.0 * f.ep[i];
            assert!((recon - f.mu[i]).abs() < 1e-12);
            assert_eq!(f.corr(i, i), 1.0);
        }
    }

    #[test]
    fn energies_vanish_at_start_without_overlap() {
        let params = ModelParams::new(3, 0.8, 0.6).unwrap();
        let cfg = FixedGridConfig { dt: 0.01, t_max: 0.1, cbar0: 0.0, ..Default::default() };
        let f = integrate_fixed(&params, &AnnealSchedule::constant(), &cfg).unwrap();
        assert_eq!((f.e2[0], f.ep[0]), (0.0, 0.0));
        let short = f.corr(1, 0);
        assert!((short - (1.0 - 0.01)).abs() < 1e-14);
    }

    #[test]
    fn effective_delta() {
        let params = ModelParams::new(3, 0.5, 0.2).unwrap();
        let s = AnnealSchedule::tensor_exponential(100.0, 10.0);
        assert!((anneal_effective_delta(&s, 0.0, &params) - 100.2).abs() < 1e-12);
        let at_tau = anneal_effective_delta(&s, 10.0, &params);
        assert!((at_tau - (0.2 + 100.0 / std::f64::consts::E)).abs() < 1e-12);
        assert!((anneal_effective_delta(&s, 1e6, &params) - 0.2).abs() < 1e-12);
        assert_eq!(anneal_effective_delta(&AnnealSchedule::constant(), 3.0, &params), 0.2);
    }
}
