//! Langevin state evolution on a self-similar time grid.
//!
//! The unknowns are `C(t,t′)`, the FDT-violation field `Q(t,t′) = 1 − C(t,t′) − ∫_{t′}^t R(t,s) ds`,
//! the overlap `C̄(t)` and the shifted multiplier `μ′(t) = μ(t) − Q′(1)`. A square grid of
//! `Nt + 1` times is filled row by row with a BDF2 time derivative and the six discretized
//! memory integrals; every new row is solved self-consistently. When the grid is full it is
//! decimated to every second time and the step doubles, so each doubling costs the same
//! while the horizon grows geometrically. Temperatures are constant (`β = 1`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lse_fixed::{fmt, write_trajectory_rows, TrajectoryRow};
use crate::model::{powi, Kernel, ModelParams};

pub const DEFAULT_NT: usize = 1024;
pub const DEFAULT_DT0: f64 = 1e-7;
pub const DEFAULT_NC: usize = 2;
pub const DEFAULT_SC_TOL: f64 = 1e-9;
pub const DEFAULT_SC_MAX_ITER: usize = 200;
pub const DEFAULT_MU_DAMPING: f64 = 0.5;
/// History length of the Anderson mixing used in the self-consistent row solve.
const ANDERSON_DEPTH: usize = 10;

/// A two-time field on the grid together with its cell averages.
///
/// `dv(i, l)` is the average of `A(t_i, s)` over `s ∈ [t_{l−1}, t_l]` and `dh(l, j)` the
/// average of `A(s, t_j)` over the same cell in the first argument. Values are kept in both
/// row-major and column-major order because the memory integrals walk both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    n: usize,
    v: Vec<f64>,
    vt: Vec<f64>,
    dv: Vec<f64>,
    dh: Vec<f64>,
}

impl Field2 {
    /// Zero field on `n` grid times.
    pub fn zeros(n: usize) -> Self {
        Self { n, v: vec![0.0; n * n], vt: vec![0.0; n * n], dv: vec![0.0; n * n], dh: vec![0.0; n * n] }
    }

    /// Fills the lower triangle of an `n`-time grid with `f(i, j)` and trapezoidal cell averages.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                out.set(i, j, f(i, j));
            }
        }
        for i in 0..n {
            for l in 1..=i {
                out.dv[i * n + l] = 0.5 * (out.at(i, l) + out.at(i, l - 1));
            }
            for j in 0..i {
                out.dh[j * n + i] = 0.5 * (out.at(i, j) + out.at(i - 1, j));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.n + j] = x;
        self.vt[j * self.n + i] = x;
    }

    #[inline]
    pub fn dv(&self, i: usize, l: usize) -> f64 {
        self.dv[i * self.n + l]
    }

    #[inline]
    pub fn dh(&self, l: usize, j: usize) -> f64 {
        self.dh[j * self.n + l]
    }

    pub fn set_dv(&mut self, i: usize, l: usize, x: f64) {
        self.dv[i * self.n + l] = x;
    }

    pub fn set_dh(&mut self, l: usize, j: usize, x: f64) {
        self.dh[j * self.n + l] = x;
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.n..i * self.n + i + 1]
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.vt[j * self.n..(j + 1) * self.n]
    }

    fn dv_row(&self, i: usize) -> &[f64] {
        &self.dv[i * self.n..i * self.n + i + 1]
    }

    fn dh_col(&self, j: usize) -> &[f64] {
        &self.dh[j * self.n..(j + 1) * self.n]
    }

    /// Keeps every second time: `A′(i,j) = A(2i,2j)`, cell averages of merged cells are averaged.
    pub fn decimate(&self) -> Field2 {
        let n = self.n;
        let half = (n - 1) / 2;
        let mut out = Field2::zeros(n);
        for i in 0..=half {
            for j in 0..=i {
                out.set(i, j, self.at(2 * i, 2 * j));
            }
            for l in 1..=i {
                out.set_dv(i, l, 0.5 * (self.dv(2 * i, 2 * l) + self.dv(2 * i, 2 * l - 1)));
            }
            for j in 0..i {
                out.set_dh(i, j, 0.5 * (self.dh(2 * i, 2 * j) + self.dh(2 * i - 1, 2 * j)));
            }
        }
        out
    }
}

/// A one-time field on the grid with its cell averages `d(l)` over `[t_{l−1}, t_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field1 {
    pub v: Vec<f64>,
    pub d: Vec<f64>,
}

impl Field1 {
    pub fn zeros(n: usize) -> Self {
        Self { v: vec![0.0; n], d: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize) -> f64) -> Self {
        let v: Vec<f64> = (0..n).map(f).collect();
        let mut d = vec![0.0; n];
        for l in 1..n {
            d[l] = 0.5 * (v[l] + v[l - 1]);
        }
        Self { v, d }
    }

    pub fn decimate(&self) -> Field1 {
        let n = self.v.len();
        let half = (n - 1) / 2;
        let mut out = Field1::zeros(n);
        for i in 0..=half {
            out.v[i] = self.v[2 * i];
            if i > 0 {
                out.d[i] = 0.5 * (self.d[2 * i] + self.d[2 * i - 1]);
            }
        }
        out
    }
}

/// The six memory integrals of the dynamical equations, by argument structure.
///
/// With `∂` acting on the marked argument:
/// 1. `∫_{t_j}^{t_i} A(t_i,s) ∂_s B(s,t_j) ds`
/// 2. `∫_{t_j}^{t_i} A(t_i,s) ∂_s B(t_i,s) C(s,t_j) ds`
/// 3. `∫_0^{t_j} A(t_i,s) ∂_s B(t_j,s) ds`
/// 4. `∫_0^{t_j} A(t_i,s) ∂_s B(t_i,s) C(t_j,s) ds`
/// 5. `∫_0^{t_i} A(t_i,s) ∂_s B(s) ds`
/// 6. `∫_0^{t_i} A(t_i,s) ∂_s B(t_i,s) C(s) ds`
#[derive(Debug, Clone, Copy)]
pub enum Integral<'a> {
    One { a: &'a Field2, b: &'a Field2 },
    Two { a: &'a Field2, b: &'a Field2, c: &'a Field2 },
    Three { a: &'a Field2, b: &'a Field2 },
    Four { a: &'a Field2, b: &'a Field2, c: &'a Field2 },
    Five { a: &'a Field2, b: &'a Field1 },
    Six { a: &'a Field2, b: &'a Field2, c: &'a Field1 },
}

impl Integral<'_> {
    pub fn kind(&self) -> u8 {
        match self {
            Integral::One { .. } => 1,
            Integral::Two { .. } => 2,
            Integral::Three { .. } => 3,
            Integral::Four { .. } => 4,
            Integral::Five { .. } => 5,
            Integral::Six { .. } => 6,
        }
    }
}

/// Evaluates one discretized memory integral at `(i, j)` with split index `m`.
///
/// Between `t_m` and `t_i` the fast variation of `A(t_i, ·)` is captured by its cell averages,
/// between `t_j` and `t_m` that of the `t_j`-anchored field. Kinds 5 and 6 ignore `j` and `m`.
pub fn discretized_integral(integral: Integral<'_>, i: usize, j: usize, m: usize) -> f64 {
    match integral {
        Integral::One { a, b } | Integral::Two { a, b, .. } | Integral::Three { a, b } | Integral::Four { a, b, .. } => {
            assert!(i < a.len() && i < b.len(), "row {i} outside the grid");
            let kind = integral.kind();
            if kind <= 2 {
                assert!(j <= m && m <= i, "split index must satisfy j ≤ m ≤ i (j={j}, m={m}, i={i})");
            } else {
                assert!(j <= i, "j = {j} beyond row {i}");
            }
        }
        Integral::Five { a, b } => assert!(i < a.len() && i < b.v.len(), "row {i} outside the grid"),
        Integral::Six { a, b, c } => {
            assert!(i < a.len() && i < b.len() && i < c.v.len(), "row {i} outside the grid")
        }
    }
    match integral {
        Integral::One { a, b } => {
            let mut s = a.at(i, m) * b.at(m, j) - a.at(i, j) * b.at(j, j);
            for l in m + 1..=i {
                s += a.dv(i, l) * (b.at(l, j) - b.at(l - 1, j));
            }
            for l in j + 1..=m {
                s -= (a.at(i, l) - a.at(i, l - 1)) * b.dh(l, j);
            }
            s
        }
        Integral::Two { a, b, c } => {
            let mut s = 0.0;
            for l in m + 1..=i {
                s += a.dv(i, l) * (b.at(i, l) - b.at(i, l - 1)) * 0.5 * (c.at(l, j) + c.at(l - 1, j));
            }
            for l in j + 1..=m {
                s += 0.5 * (a.at(i, l) + a.at(i, l - 1)) * (b.at(i, l) - b.at(i, l - 1)) * c.dh(l, j);
            }
            s
        }
        Integral::Three { a, b } => {
            let mut s = a.at(i, j) * b.at(j, j) - a.at(i, 0) * b.at(j, 0);
            for l in 1..=j {
                s -= (a.at(i, l) - a.at(i, l - 1)) * b.dv(j, l);
            }
            s
        }
        Integral::Four { a, b, c } => {
            let mut s = 0.0;
            for l in 1..=j {
                s += 0.5 * (a.at(i, l) + a.at(i, l - 1)) * (b.at(i, l) - b.at(i, l - 1)) * c.dv(j, l);
            }
            s
        }
        Integral::Five { a, b } => {
            let mut s = 0.0;
            for l in 1..=i {
                s += a.dv(i, l) * (b.v[l] - b.v[l - 1]);
            }
            s
        }
        Integral::Six { a, b, c } => {
            let mut s = 0.0;
            for l in 1..=i {
                s += 0.5 * (a.at(i, l) + a.at(i, l - 1)) * (b.at(i, l) - b.at(i, l - 1)) * c.d[l];
            }
            s
        }
    }
}

/// Settings of a dynamic-grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynGridConfig {
    /// Number of grid intervals, even.
    pub nt: usize,
    pub n_doublings: usize,
    pub dt0: f64,
    /// Near-diagonal entries per row obtained by translation of the previous row.
    pub nc: usize,
    pub sc_tol: f64,
    pub sc_max_iter: usize,
    /// Relaxation weight of the new μ′ in each self-consistent sweep.
    pub mu_damping: f64,
    pub cbar0: f64,
    /// Waiting times at which `C(t, t_w)` and `Q(t, t_w)` are recorded.
    pub waiting_times: Vec<f64>,
}

impl Default for DynGridConfig {
    fn default() -> Self {
        Self {
            nt: DEFAULT_NT,
            n_doublings: 0,
            dt0: DEFAULT_DT0,
            nc: DEFAULT_NC,
            sc_tol: DEFAULT_SC_TOL,
            sc_max_iter: DEFAULT_SC_MAX_ITER,
            mu_damping: DEFAULT_MU_DAMPING,
            cbar0: 1.0,
            waiting_times: Vec::new(),
        }
    }
}

impl DynGridConfig {
    /// Time covered after all doublings, `Nt·dt0·2^n_doublings`.
    pub fn horizon(&self) -> f64 {
        self.nt as f64 * self.dt0 * 2f64.powi(self.n_doublings as i32)
    }

    /// Smallest number of doublings whose horizon reaches `t_max`.
    pub fn doublings_for(nt: usize, dt0: f64, t_max: f64) -> usize {
        let mut k = 0;
        while (nt as f64) * dt0 * 2f64.powi(k as i32) < t_max {
            k += 1;
        }
        k
    }

    fn validate(&self) -> Result<()> {
        if self.nt < 8 || !self.nt.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!("Nt = {} must be even and at least 8", self.nt)));
        }
        if self.nc == 0 || self.nc >= self.nt / 4 {
            return Err(Error::InvalidParams(format!("Nc = {} must be in [1, Nt/4)", self.nc)));
        }
        if !(self.dt0 > 0.0) || !self.dt0.is_finite() {
            return Err(Error::InvalidParams(format!("dt0 = {} must be positive", self.dt0)));
        }
        if !(self.sc_tol > 0.0) || self.sc_max_iter == 0 {
            return Err(Error::InvalidParams("sc_tol must be positive and sc_max_iter nonzero".into()));
        }
        if !(self.mu_damping > 0.0 && self.mu_damping <= 1.0) {
            return Err(Error::InvalidParams(format!("mu_damping = {} must be in (0, 1]", self.mu_damping)));
        }
        if !self.cbar0.is_finite() || self.cbar0.abs() > 1.0 {
            return Err(Error::InvalidParams(format!("cbar0 = {} must lie in [-1, 1]", self.cbar0)));
        }
        Ok(())
    }
}

/// Grid state: fields on `Nt + 1` times `t_i = i·dt`, rows `0..=filled` solved.
#[derive(Debug, Clone)]
pub struct DynGrid {
    pub params: ModelParams,
    pub nt: usize,
    pub dt: f64,
    pub nc: usize,
    pub filled: usize,
    pub c: Field2,
    pub q: Field2,
    /// `Q′(C)` on the grid.
    pub m: Field2,
    /// `Q″(C)` on the grid.
    pub nn: Field2,
    pub cbar: Field1,
    pub mu_prime: Vec<f64>,
}

impl DynGrid {
    /// Step 1: linear propagation of the short-time expansion over the first `Nt/2` times.
    pub fn linear_fill(params: &ModelParams, nt: usize, dt0: f64, nc: usize, cbar0: f64) -> Result<Self> {
        if params.beta != 1.0 {
            return Err(Error::Unsupported("the dynamic grid integrates the constant-temperature equations at beta = 1".into()));
        }
        let n = nt + 1;
        let k = params.kernel();
        let half = nt / 2;
        let slope = k.q1(cbar0) * (1.0 - cbar0 * cbar0) - cbar0;
        let cfun = |i: usize, j: usize| if i <= half { 1.0 - (i - j) as f64 * dt0 } else { 0.0 };
        let c = Field2::from_fn(n, cfun);
        let q = Field2::zeros(n);
        let m = Field2::from_fn(n, |i, j| if i <= half { k.q1(cfun(i, j)) } else { 0.0 });
        let nn = Field2::from_fn(n, |i, j| if i <= half { k.q2(cfun(i, j)) } else { 0.0 });
        let cbar = Field1::from_fn(n, |i| if i <= half { cbar0 + slope * i as f64 * dt0 } else { 0.0 });
        let mut grid = Self { params: *params, nt, dt: dt0, nc, filled: half, c, q, m, nn, cbar, mu_prime: vec![0.0; n] };
        for i in 0..=half {
            grid.mu_prime[i] = grid.row_observables(i).mu_prime;
        }
        Ok(grid)
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    fn kernel(&self) -> Kernel {
        self.params.kernel()
    }

    /// μ′, μ and the channel energies of a solved row.
    ///
    /// The memory integral `∫ Q′_k(C(t_i,s)) ∂_s Q(t_i,s) ds` uses Simpson increments on the
    /// bulk of the row and the stored cell averages on the near-diagonal cells, where `C`
    /// varies on scales shorter than the grid step.
    pub fn row_observables(&self, i: usize) -> RowObservables {
        let k = self.kernel();
        let (inv2, invp, p) = (k.inv_delta2(), k.inv_deltap(), self.params.p);
        let row_c = self.c.row(i);
        let row_q = self.q.row(i);
        let bulk = i.saturating_sub(self.nc);
        let g2 = |x: f64| x * inv2;
        let gp = |x: f64| powi(x, p - 1) * invp;
        let mut s2 = simpson_stieltjes(&row_c[..=bulk], &row_q[..=bulk], g2);
        let mut sp = simpson_stieltjes(&row_c[..=bulk], &row_q[..=bulk], gp);
        for l in bulk + 1..=i {
            let dq = row_q[l] - row_q[l - 1];
            let avg2 = self.c.dv(i, l) * inv2;
            s2 += avg2 * dq;
            sp += (self.m.dv(i, l) - avg2) * dq;
        }
        let cb = self.cbar.v[i];
        let c0 = row_c[0];
        let q2 = |x: f64| 0.5 * x * x * inv2;
        let qp = |x: f64| powi(x, p) * invp / p as f64;
        let e2 = -q2(cb) - q2(1.0) + q2(c0) - s2;
        let ep = -qp(cb) - qp(1.0) + qp(c0) - sp;
        let mu_prime = 1.0 + cb * k.q1(cb) - k.xq1(c0) + 2.0 * s2 + p as f64 * sp;
        RowObservables { mu_prime, mu: mu_prime + k.q1(1.0), e2, ep }
    }

    fn trajectory_row(&self, i: usize) -> TrajectoryRow {
        let o = self.row_observables(i);
        TrajectoryRow { t: self.time(i), cbar: self.cbar.v[i], mu: o.mu, e2: o.e2, ep: o.ep, e_total: o.e2 + o.ep }
    }

    /// Step 4: keep every second time and double the step.
    pub fn decimate(&self) -> DynGrid {
        let mut mu_prime = vec![0.0; self.nt + 1];
        for i in 0..=self.nt / 2 {
            mu_prime[i] = self.mu_prime[2 * i];
        }
        DynGrid {
            params: self.params,
            nt: self.nt,
            dt: 2.0 * self.dt,
            nc: self.nc,
            filled: self.filled / 2,
            c: self.c.decimate(),
            q: self.q.decimate(),
            m: self.m.decimate(),
            nn: self.nn.decimate(),
            cbar: self.cbar.decimate(),
            mu_prime,
        }
    }

    /// Steps 2 and 3 for row `filled + 1`: translated near-diagonal strip, then the
    /// self-consistent solution of the remaining entries, `C̄` and `μ′`.
    pub fn advance(&mut self, sc_tol: f64, sc_max_iter: usize, mu_damping: f64) -> Result<usize> {
        let i = self.filled + 1;
        assert!(i <= self.nt, "grid is full, decimate first");
        let nc = self.nc;
        let h = self.dt;
        let k = self.kernel();
        let solved = i - nc; // columns 0..solved are solved, solved..i translated, i diagonal

        // Initial guess: previous row; near-diagonal strip and its cell averages translated.
        for f in [&mut self.c, &mut self.q, &mut self.m, &mut self.nn] {
            for j in 0..solved {
                let x = f.at(i - 1, j);
                f.set(i, j, x);
            }
            for j in solved..i {
                let x = f.at(i - 1, j - 1);
                f.set(i, j, x);
            }
            for l in solved + 1..=i {
                let x = f.dv(i - 1, l - 1);
                f.set_dv(i, l, x);
            }
        }
        self.c.set(i, i, 1.0);
        self.q.set(i, i, 0.0);
        self.m.set(i, i, k.q1(1.0));
        self.nn.set(i, i, k.q2(1.0));
        self.cbar.v[i] = self.cbar.v[i - 1];
        self.mu_prime[i] = self.mu_prime[i - 1];

        let mut new_c = vec![0.0; solved];
        let mut new_q = vec![0.0; solved];
        let mut dm = vec![0.0; i + 1];
        let mut a = vec![0.0; i + 1];
        let mut b = vec![0.0; i + 1];
        let mut a_pre = vec![0.0; i + 1];
        let mut b_pre = vec![0.0; i + 1];
        let mut x = Vec::with_capacity(2 * solved + 2);
        let mut g = Vec::with_capacity(2 * solved + 2);
        let mut mixer = Anderson::new(ANDERSON_DEPTH);
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        while iterations < sc_max_iter {
            iterations += 1;
            self.refresh_row_kernel(i, solved);
            let row_m = self.m.row(i);
            let row_n = self.nn.row(i);
            let row_q = self.q.row(i);
            let dmv = self.m.dv_row(i);
            let dnv = self.nn.dv_row(i);
            for l in 1..=i {
                let dq = row_q[l] - row_q[l - 1];
                dm[l] = row_m[l] - row_m[l - 1];
                a[l] = dnv[l] * dq;
                b[l] = 0.5 * (row_n[l] + row_n[l - 1]) * dq;
                a_pre[l] = a_pre[l - 1] + a[l];
                b_pre[l] = b_pre[l - 1] + b[l];
            }
            let mu = self.mu_prime[i];
            let cb_i = self.cbar.v[i];
            let drive = k.q1(cb_i);
            let m_i0 = row_m[0];
            let diag = 1.5 / h + mu + dmv[i];

            for j in 0..solved {
                let mid = (i + j) / 2;
                let col_c = self.c.col(j);
                let col_q = self.q.col(j);
                let dch = self.c.dh_col(j);
                let dqh = self.q.dh_col(j);
                // Kinds 1 and 2, upper part [t_m, t_i].
                let (mut i1c, mut i1q, mut i2c, mut i2q) = (0.0, 0.0, 0.0, 0.0);
                for l in mid + 1..=i {
                    let (dc, dq) = (col_c[l] - col_c[l - 1], col_q[l] - col_q[l - 1]);
                    i1c += dmv[l] * dc;
                    i1q += dmv[l] * dq;
                    i2c += a[l] * (col_c[l] + col_c[l - 1]);
                    i2q += a[l] * (col_q[l] + col_q[l - 1]);
                }
                i2c *= 0.5;
                i2q *= 0.5;
                // Lower part [t_j, t_m].
                for l in j + 1..=mid {
                    i1c -= dm[l] * dch[l];
                    i1q -= dm[l] * dqh[l];
                    i2c += b[l] * dch[l];
                    i2q += b[l] * dqh[l];
                }
                i1c += row_m[mid] * col_c[mid] - row_m[j];
                i1q += row_m[mid] * col_q[mid];
                // The unknown enters kind 1 through the last cell; it is moved to the left side.
                i1c -= dmv[i] * col_c[i];
                i1q -= dmv[i] * col_q[i];
                let i2_one = (a_pre[i] - a_pre[mid]) + (b_pre[mid] - b_pre[j]);
                // Kinds 3 and 4 over [0, t_j].
                let dqv = self.q.dv_row(j);
                let dcv = self.c.dv_row(j);
                let mut i3 = -m_i0 * self.q.at(j, 0);
                let mut i4 = 0.0;
                for l in 1..=j {
                    i3 -= dm[l] * dqv[l];
                    i4 += b[l] * dcv[l];
                }
                let source = self.cbar.v[j] * drive - m_i0 * self.c.at(j, 0);
                let c_rhs = (2.0 * col_c[i - 1] - 0.5 * col_c[i - 2]) / h + source - i1c + i2c + i3 + i4;
                let q_rhs = mu - 1.0 + (2.0 * col_q[i - 1] - 0.5 * col_q[i - 2]) / h - source - i1q + (i2q - i2_one) - i3 - i4;
                new_c[j] = c_rhs / diag;
                new_q[j] = q_rhs / diag;
            }

            // Overlap equation, kinds 5 and 6.
            let cb = &self.cbar.v;
            let mut i5 = 0.0;
            for l in 1..i {
                i5 += dmv[l] * (cb[l] - cb[l - 1]);
            }
            i5 -= dmv[i] * cb[i - 1];
            let mut i6 = 0.0;
            for l in 1..i {
                i6 += b[l] * self.cbar.d[l];
            }
            i6 += b[i] * 0.5 * (cb[i] + cb[i - 1]);
            let cb_new = ((2.0 * cb[i - 1] - 0.5 * cb[i - 2]) / h + drive - m_i0 * cb[0] - i5 + i6) / diag;

            let mu_new = mu + mu_damping * (self.row_observables(i).mu_prime - mu);
            if !cb_new.is_finite() || !mu_new.is_finite() || new_c.iter().chain(&new_q).any(|v| !v.is_finite()) {
                return Err(Error::Numerical { time: self.time(i), reason: "non-finite value in the self-consistent sweep".into() });
            }

            x.clear();
            g.clear();
            for j in 0..solved {
                x.push(self.c.at(i, j));
                g.push(new_c[j]);
            }
            for j in 0..solved {
                x.push(self.q.at(i, j));
                g.push(new_q[j]);
            }
            x.extend([self.cbar.v[i], mu]);
            g.extend([cb_new, mu_new]);
            residual = x.iter().zip(&g).map(|(&o, &n)| rel_change(o, n)).fold(0.0, f64::max);
            let next = if residual < sc_tol { g.clone() } else { mixer.next(&x, &g) };
            for j in 0..solved {
                self.c.set(i, j, next[j]);
                self.q.set(i, j, next[solved + j]);
            }
            self.cbar.v[i] = next[2 * solved];
            self.cbar.d[i] = 0.5 * (next[2 * solved] + self.cbar.v[i - 1]);
            self.mu_prime[i] = next[2 * solved + 1];
            if residual < sc_tol {
                break;
            }
        }
        if residual >= sc_tol {
            return Err(Error::NoConvergence { iterations, residual });
        }
        self.refresh_row_kernel(i, solved);
        self.finalize_row(i, solved);
        self.filled = i;
        Ok(iterations)
    }

    /// Kernel values and their row cell averages for the solved part of row `i`.
    fn refresh_row_kernel(&mut self, i: usize, solved: usize) {
        let k = self.kernel();
        for j in 0..solved {
            let x = self.c.at(i, j);
            self.m.set(i, j, k.q1(x));
            self.nn.set(i, j, k.q2(x));
        }
        for f in [&mut self.m, &mut self.nn, &mut self.c] {
            for l in 1..=solved.min(i) {
                let avg = 0.5 * (f.at(i, l) + f.at(i, l - 1));
                f.set_dv(i, l, avg);
            }
        }
    }

    /// Row cell averages of `C`, `Q` and the new horizontal cells of every column.
    fn finalize_row(&mut self, i: usize, solved: usize) {
        for f in [&mut self.c, &mut self.q, &mut self.m, &mut self.nn] {
            for l in 1..=solved {
                let avg = 0.5 * (f.at(i, l) + f.at(i, l - 1));
                f.set_dv(i, l, avg);
            }
            for j in 0..solved {
                let avg = 0.5 * (f.at(i, j) + f.at(i - 1, j));
                f.set_dh(i, j, avg);
            }
            for j in solved..i {
                let x = f.dh(i - 1, j - 1);
                f.set_dh(i, j, x);
            }
        }
    }

    /// Largest deviation of the diagonal from `C = 1`, `Q = 0` over the solved rows.
    pub fn diagonal_defect(&self) -> f64 {
        (0..=self.filled).map(|i| (self.c.at(i, i) - 1.0).abs().max(self.q.at(i, i).abs())).fold(0.0, f64::max)
    }

    /// Linear interpolation of `(C, Q)(t_i, t_w)` in the second argument, `None` if `t_w > t_i`.
    pub fn at_waiting_time(&self, i: usize, t_w: f64) -> Option<(f64, f64)> {
        let x = t_w / self.dt;
        let j0 = x.floor() as usize;
        if x > i as f64 + 1e-9 {
            return None;
        }
        if j0 >= i {
            return Some((self.c.at(i, i), self.q.at(i, i)));
        }
        let w = x - j0 as f64;
        let lerp = |f: &Field2| (1.0 - w) * f.at(i, j0) + w * f.at(i, j0 + 1);
        Some((lerp(&self.c), lerp(&self.q)))
    }
}

/// Anderson acceleration of a fixed-point iteration `x ← G(x)`.
struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    df: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, prev: None, df: Vec::new(), dg: Vec::new() }
    }

    /// Next iterate from the current point `x` and its image `g = G(x)`.
    fn next(&mut self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = g.iter().zip(x).map(|(a, b)| a - b).collect();
        if let Some((f_old, g_old)) = self.prev.take() {
            self.df.push(f.iter().zip(&f_old).map(|(a, b)| a - b).collect());
            self.dg.push(g.iter().zip(&g_old).map(|(a, b)| a - b).collect());
            if self.df.len() > self.depth {
                self.df.remove(0);
                self.dg.remove(0);
            }
        }
        self.prev = Some((f.clone(), g.to_vec()));
        let k = self.df.len();
        if k == 0 {
            return g.to_vec();
        }
        let mut a = vec![vec![0.0; k + 1]; k];
        for r in 0..k {
            for c in 0..k {
                a[r][c] = dot_slices(&self.df[r], &self.df[c]);
            }
            a[r][k] = dot_slices(&self.df[r], &f);
        }
        let scale = (0..k).map(|r| a[r][r]).fold(0.0, f64::max);
        for (r, row) in a.iter_mut().enumerate() {
            row[r] += 1e-12 * scale;
        }
        match solve_dense(a) {
            Some(gamma) => {
                let mut out = g.to_vec();
                for (gm, dgv) in gamma.iter().zip(&self.dg) {
                    for (o, d) in out.iter_mut().zip(dgv) {
                        *o -= gm * d;
                    }
                }
                out
            }
            None => {
                self.df.clear();
                self.dg.clear();
                g.to_vec()
            }
        }
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting on an augmented `k × (k+1)` system.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if !(a[piv][col].abs() > 0.0) {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..k {
            let factor = a[r][col] / a[col][col];
            for c in col..=k {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut sol = vec![0.0; k];
    for r in (0..k).rev() {
        let mut v = a[r][k];
        for c in r + 1..k {
            v -= a[r][c] * sol[c];
        }
        sol[r] = v / a[r][r];
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

fn rel_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(1.0)
}

/// `∫ g(C(t_i,s)) ∂_s Q(t_i,s) ds` along a row with quadratic interpolation of `g` on each cell.
fn simpson_stieltjes(row_c: &[f64], row_q: &[f64], g: impl Fn(f64) -> f64) -> f64 {
    let n = row_c.len();
    if n < 2 {
        return 0.0;
    }
    let gv: Vec<f64> = row_c.iter().map(|&x| g(x)).collect();
    if n == 2 {
        return 0.5 * (gv[0] + gv[1]) * (row_q[1] - row_q[0]);
    }
    let mut s = 0.0;
    for l in 1..n {
        let dq = row_q[l] - row_q[l - 1];
        let w = if l + 1 < n {
            (-gv[l + 1] + 8.0 * gv[l] + 5.0 * gv[l - 1]) / 12.0
        } else {
            (5.0 * gv[l] + 8.0 * gv[l - 1] - gv[l - 2]) / 12.0
        };
        s += w * dq;
    }
    s
}

/// One-time observables of a solved row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowObservables {
    pub mu_prime: f64,
    pub mu: f64,
    pub e2: f64,
    pub ep: f64,
}

/// `C(t, t_w)` and `Q(t, t_w)` sampled for `t ≥ t_w` across all grid stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pane {
    pub t_w: f64,
    /// `(t, C(t, t_w), Q(t, t_w))` in increasing `t`.
    pub points: Vec<(f64, f64, f64)>,
}

impl Pane {
    pub fn file_name(&self) -> String {
        format!("fdt_pane_{}.csv", self.t_w)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "C", "Q"])?;
        for &(t, c, q) in &self.points {
            w.write_record([fmt(t), fmt(c), fmt(q)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> =
                rec.iter().map(|s| s.parse::<f64>().map_err(|e| Error::Io(format!("bad number {s:?}: {e}")))).collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(Error::Io(format!("expected 3 columns, found {}", v.len())));
            }
            out.push((v[0], v[1], v[2]));
        }
        Ok(out)
    }
}

/// Result of [`integrate_dyngrid`].
#[derive(Debug, Clone)]
pub struct DynRun {
    /// One row per solved grid time, in increasing time.
    pub trajectory: Vec<TrajectoryRow>,
    pub panes: Vec<Pane>,
    /// Largest number of self-consistent sweeps any row needed.
    pub max_sweeps: usize,
    /// Grid after the last stage.
    pub grid: DynGrid,
    /// Set when a row failed to converge; everything before `time` is kept.
    pub interrupted: Option<Interruption>,
}

/// Where and why a dynamic-grid run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Interruption {
    pub time: f64,
    pub error: Error,
}

impl DynRun {
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        write_trajectory_rows(path, self.trajectory.iter().copied())
    }

    /// Writes every pane as `fdt_pane_<t_w>.csv` into `dir`.
    pub fn write_panes(&self, dir: &Path) -> Result<()> {
        for pane in &self.panes {
            pane.write_csv(&dir.join(pane.file_name()))?;
        }
        Ok(())
    }

    /// Overlap at time `t` by linear interpolation of the trajectory.
    pub fn cbar_at(&self, t: f64) -> Option<f64> {
        interpolate(&self.trajectory, t, |r| r.cbar)
    }
}

/// Linear interpolation of a trajectory column at time `t`.
pub fn interpolate(rows: &[TrajectoryRow], t: f64, col: impl Fn(&TrajectoryRow) -> f64) -> Option<f64> {
    let k = rows.partition_point(|r| r.t < t);
    if k == rows.len() {
        return None;
    }
    if rows[k].t == t || k == 0 {
        return (rows[k].t == t).then(|| col(&rows[k]));
    }
    let (r0, r1) = (&rows[k - 1], &rows[k]);
    let w = (t - r0.t) / (r1.t - r0.t);
    Some((1.0 - w) * col(r0) + w * col(r1))
}

/// Runs the five-step dynamic-grid scheme: linear fill, then `n_doublings + 1` stages of
/// self-consistent row solutions separated by decimations. Fails if any row does not converge.
pub fn integrate_dyngrid(params: &ModelParams, config: &DynGridConfig) -> Result<DynRun> {
    let run = integrate_dyngrid_partial(params, config)?;
    match run.interrupted {
        Some(Interruption { error, .. }) => Err(error),
        None => Ok(run),
    }
}

/// Like [`integrate_dyngrid`] but a row that fails to converge ends the run instead of
/// discarding it; the failure is reported in [`DynRun::interrupted`].
pub fn integrate_dyngrid_partial(params: &ModelParams, config: &DynGridConfig) -> Result<DynRun> {
    config.validate()?;
    let nt = config.nt;
    let mut grid = DynGrid::linear_fill(params, nt, config.dt0, config.nc, config.cbar0)?;
    let mut trajectory: Vec<TrajectoryRow> = (0..=grid.filled).map(|i| grid.trajectory_row(i)).collect();
    let mut panes: Vec<Pane> = config.waiting_times.iter().map(|&t_w| Pane { t_w, points: Vec::new() }).collect();
    let mut max_sweeps = 0;
    let mut first_new = 0;
    let mut interrupted = None;
    for stage in 0..=config.n_doublings {
        if stage > 0 {
            grid = grid.decimate();
            first_new = grid.filled + 1;
        }
        while grid.filled < nt {
            match grid.advance(config.sc_tol, config.sc_max_iter, config.mu_damping) {
                Ok(sweeps) => {
                    max_sweeps = max_sweeps.max(sweeps);
                    trajectory.push(grid.trajectory_row(grid.filled));
                }
                Err(error) => {
                    interrupted = Some(Interruption { time: grid.time(grid.filled + 1), error });
                    break;
                }
            }
        }
        for pane in &mut panes {
            for i in first_new..=grid.filled {
                if let Some((c, q)) = grid.at_waiting_time(i, pane.t_w) {
                    pane.points.push((grid.time(i), c, q));
                }
            }
        }
        if interrupted.is_some() {
            break;
        }
    }
    Ok(DynRun { trajectory, panes, max_sweeps, grid, interrupted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free() -> ModelParams {
        ModelParams::new(3, f64::INFINITY, f64::INFINITY).unwrap()
    }

    #[test]
    fn telescoping_integrals() {
        let n = 12;
        let h = 0.1;
        let one = Field2::from_fn(n, |_, _| 1.0);
        let lin = Field2::from_fn(n, |i, _| i as f64 * h);
        let lin1 = Field1::from_fn(n, |i| i as f64 * h);
        for (i, j) in [(11, 0), (11, 4), (7, 7), (9, 2)] {
            let m = (i + j) / 2;
            let v = discretized_integral(Integral::One { a: &one, b: &lin }, i, j, m);
            assert!((v - (i - j) as f64 * h).abs() < 1e-14);
        }
        let v = discretized_integral(Integral::Five { a: &one, b: &lin1 }, 11, 0, 0);
        assert!((v - 1.1).abs() < 1e-14);
    }

    #[test]
    fn free_diffusion_keeps_fdt() {
        let config = DynGridConfig { nt: 128, n_doublings: 10, dt0: 1e-4, ..Default::default() };
        let run = integrate_dyngrid(&free(), &config).unwrap();
        let g = &run.grid;
        for i in 0..=g.nt {
            for j in 0..=i {
                assert!(g.q.at(i, j).abs() < 1e-12);
                let exact = (-(g.time(i) - g.time(j))).exp();
                assert!((g.c.at(i, j) - exact).abs() < 1e-2, "C({i},{j}) = {} vs {exact}", g.c.at(i, j));
            }
        }
        assert_eq!(g.diagonal_defect(), 0.0);
    }

    #[test]
    fn mu_energy_identity() {
        let params = ModelParams::new(3, 1.5, 0.6).unwrap();
        let config = DynGridConfig { nt: 32, n_doublings: 2, dt0: 0.01, cbar0: 0.3, ..Default::default() };
        let run = integrate_dyngrid(&params, &config).unwrap();
        for r in &run.trajectory {
            assert!((r.mu - (1.0 - 2.0 * r.e2 - 3.0 * r.ep)).abs() < 1e-12);
        }
    }

    #[test]
    fn decimation_keeps_linear_fields() {
        let n = 33;
        let once = Field2::from_fn(n, |i, j| (i + j) as f64).decimate();
        let twice = once.decimate();
        let expect1 = Field2::from_fn(n, |i, j| 2.0 * (i + j) as f64);
        let expect2 = Field2::from_fn(n, |i, j| 4.0 * (i + j) as f64);
        for (got, want, rows) in [(&once, &expect1, 16), (&twice, &expect2, 8)] {
            for i in 0..=rows {
                for j in 0..=i {
                    assert_eq!(got.at(i, j), want.at(i, j));
                    assert_eq!(got.at(i, j), got.vt[j * n + i]);
                }
                for l in 1..=i {
                    assert_eq!(got.dv(i, l), want.dv(i, l));
                }
                for j in 0..i {
                    assert_eq!(got.dh(i, j), want.dh(i, j));
                }
            }
        }
        let f = Field1::from_fn(n, |i| 3.0 * i as f64).decimate();
        for i in 1..=16 {
            assert_eq!(f.v[i], 6.0 * i as f64);
            assert_eq!(f.d[i], 6.0 * i as f64 - 3.0);
        }
    }

    #[test]
    fn solved_row_satisfies_reference_equations() {
        let params = ModelParams::new(3, 1.5, 0.6).unwrap();
        let k = params.kernel();
        let mut grid = DynGrid::linear_fill(&params, 32, 0.01, 2, 0.3).unwrap();
        while grid.filled < 32 {
            grid.advance(1e-13, 500, 0.5).unwrap();
        }
        grid = grid.decimate();
        for _ in 0..3 {
            grid.advance(1e-13, 500, 0.5).unwrap();
        }
        let g = &grid;
        let i = g.filled;
        let h = g.dt;
        let mu = g.mu_prime[i];
        let ones = Field2::from_fn(g.c.len(), |_, _| 1.0);
        let bdf = |f: &Field2, j: usize| (3.0 * f.at(i, j) - 4.0 * f.at(i - 1, j) + f.at(i - 2, j)) / (2.0 * h);
        let drive = k.q1(g.cbar.v[i]);
        let m_i0 = g.m.at(i, 0);
        for j in 0..i - g.nc {
            let m = (i + j) / 2;
            let source = g.cbar.v[j] * drive - m_i0 * g.c.at(j, 0);
            let i3 = discretized_integral(Integral::Three { a: &g.m, b: &g.q }, i, j, m);
            let i4 = discretized_integral(Integral::Four { a: &g.nn, b: &g.q, c: &g.c }, i, j, m);
            let lhs_c = bdf(&g.c, j) + mu * g.c.at(i, j);
            let rhs_c = source - discretized_integral(Integral::One { a: &g.m, b: &g.c }, i, j, m)
                + discretized_integral(Integral::Two { a: &g.nn, b: &g.q, c: &g.c }, i, j, m)
                + i3
                + i4;
            assert!((lhs_c - rhs_c).abs() < 1e-8, "C row {i} col {j}: {lhs_c} vs {rhs_c}");
            let lhs_q = bdf(&g.q, j) + mu * g.q.at(i, j);
            let rhs_q = mu - 1.0 - source - discretized_integral(Integral::One { a: &g.m, b: &g.q }, i, j, m)
                + discretized_integral(Integral::Two { a: &g.nn, b: &g.q, c: &g.q }, i, j, m)
                - discretized_integral(Integral::Two { a: &g.nn, b: &g.q, c: &ones }, i, j, m)
                - i3
                - i4;
            assert!((lhs_q - rhs_q).abs() < 1e-8, "Q row {i} col {j}: {lhs_q} vs {rhs_q}");
        }
        let cb = &g.cbar.v;
        let lhs = (3.0 * cb[i] - 4.0 * cb[i - 1] + cb[i - 2]) / (2.0 * h) + mu * cb[i];
        let rhs = drive - m_i0 * cb[0] - discretized_integral(Integral::Five { a: &g.m, b: &g.cbar }, i, 0, 0)
            + discretized_integral(Integral::Six { a: &g.nn, b: &g.q, c: &g.cbar }, i, 0, 0);
        assert!((lhs - rhs).abs() < 1e-8, "overlap: {lhs} vs {rhs}");
        assert!((g.row_observables(i).mu_prime - mu).abs() < 1e-10);
    }
}
