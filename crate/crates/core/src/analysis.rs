//! Post-processing of integrator output: relaxation times, power-law extrapolation of
//! their divergence, and parametric fluctuation-dissipation plots with a two-slope fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lse_dyngrid::Pane;
use crate::lse_fixed::TwoTimeField;

/// Fraction of trailing samples averaged when no plateau is supplied.
pub const PLATEAU_TAIL: f64 = 0.05;
/// Smallest `max t/t′` over the panes for which an FDT fit is attempted.
pub const MIN_AGING_RATIO: f64 = 4.0;
/// RMS orthogonal distance below which a single straight line is accepted as the FDT plot.
pub const SINGLE_LINE_RMS: f64 = 1e-3;
/// Fewest points allowed on either branch of the two-segment fit.
const MIN_BRANCH_POINTS: usize = 3;

/// Outcome of [`relaxation_time`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Relaxation {
    /// First time the overlap reaches half the plateau.
    Crossed { tau: f64, plateau: f64 },
    /// The overlap never reaches half the plateau within the trajectory.
    NotRelaxed { plateau: f64 },
}

impl Relaxation {
    pub fn tau(&self) -> Option<f64> {
        match *self {
            Relaxation::Crossed { tau, .. } => Some(tau),
            Relaxation::NotRelaxed { .. } => None,
        }
    }
}

/// Mean of the last [`PLATEAU_TAIL`] of the samples (at least one).
pub fn tail_plateau(samples: &[(f64, f64)]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let k = ((samples.len() as f64 * PLATEAU_TAIL).ceil() as usize).clamp(1, samples.len());
    Some(samples[samples.len() - k..].iter().map(|s| s.1).sum::<f64>() / k as f64)
}

/// First time at which `C̄(t)` reaches `plateau / 2`, linearly interpolated between the
/// bracketing samples. `samples` are `(t, C̄)` pairs in increasing `t`; without a plateau the
/// tail mean is used.
pub fn relaxation_time(samples: &[(f64, f64)], plateau: Option<f64>) -> Result<Relaxation> {
    if samples.is_empty() {
        return Err(Error::Domain("empty trajectory".into()));
    }
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Domain("sample times must be strictly increasing".into()));
    }
    let plateau = match plateau {
        Some(p) => p,
        None => tail_plateau(samples).unwrap_or(0.0),
    };
    if !(plateau > 0.0) {
        return Err(Error::Domain(format!("plateau {plateau} must be positive")));
    }
    let half = 0.5 * plateau;
    if samples[0].1 >= half {
        return Ok(Relaxation::Crossed { tau: samples[0].0, plateau });
    }
    for w in samples.windows(2) {
        let ((t0, c0), (t1, c1)) = (w[0], w[1]);
        if c1 >= half {
            let tau = t0 + (half - c0) / (c1 - c0) * (t1 - t0);
            return Ok(Relaxation::Crossed { tau, plateau });
        }
    }
    Ok(Relaxation::NotRelaxed { plateau })
}

/// Parameter along which relaxation times are scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Delta2,
    Deltap,
}

/// Power-law fit `τ = A |1/Δ − 1/Δ*|^{−γ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxFit {
    pub axis: Axis,
    pub samples: Vec<(f64, f64)>,
    pub delta_star: f64,
    pub gamma: f64,
    /// `ln A`; zero for a pure power law.
    pub log_amplitude: f64,
    /// RMS deviation in `ln τ`.
    pub residual: f64,
    /// Range of `Δ*` searched: between the sample closest to the divergence and the far end.
    pub bracket: (f64, f64),
}

/// Record written next to the fit data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxFitSummary {
    pub delta_star: f64,
    pub gamma: f64,
    pub residual: f64,
    pub n_samples: usize,
}

impl RelaxFit {
    pub fn summary(&self) -> RelaxFitSummary {
        RelaxFitSummary { delta_star: self.delta_star, gamma: self.gamma, residual: self.residual, n_samples: self.samples.len() }
    }
}

/// Least squares of `ln τ` against `ln|1/Δ − 1/Δ*|`, with `Δ*` found by a one-dimensional
/// search beyond the sample where `τ` is largest. Needs at least four samples with `τ`
/// strictly monotone in `Δ`.
pub fn powerlaw_extrapolate(samples: &[(f64, f64)], axis: Axis) -> Result<RelaxFit> {
    if samples.len() < 4 {
        return Err(Error::FitRejected(format!("need at least 4 samples, got {}", samples.len())));
    }
    if samples.iter().any(|&(d, t)| !(d > 0.0) || !(t > 0.0) || !d.is_finite() || !t.is_finite()) {
        return Err(Error::FitRejected("samples need finite positive Δ and τ".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::FitRejected("repeated Δ value".into()));
    }
    let rising = sorted.windows(2).all(|w| w[1].1 > w[0].1);
    let falling = sorted.windows(2).all(|w| w[1].1 < w[0].1);
    if !rising && !falling {
        let taus: Vec<String> = sorted.iter().map(|s| format!("({}, {})", s.0, s.1)).collect();
        return Err(Error::FitRejected(format!("τ is not monotone in Δ: {}", taus.join(", "))));
    }
    // In u = 1/Δ the divergence lies beyond u_near, on the side away from the other samples.
    let u: Vec<f64> = sorted.iter().map(|s| 1.0 / s.0).collect();
    let ln_tau: Vec<f64> = sorted.iter().map(|s| s.1.ln()).collect();
    let (u_near, u_far) = if falling { (u[0], u[u.len() - 1]) } else { (u[u.len() - 1], u[0]) };
    let side = (u_near - u_far).signum();
    let span = (u_near - u_far).abs();

    let fit_at = |s: f64| {
        let x: Vec<f64> = u.iter().map(|&ui| (u_near + side * s - ui).abs().ln()).collect();
        linear_fit(&x, &ln_tau)
    };
    // Δ* must stay positive, so u* cannot cross zero when the search runs toward smaller u.
    let s_max = if side < 0.0 { u_near * (1.0 - 1e-9) } else { span * 1e3 };
    let (lo, hi) = ((span * 1e-9).ln(), s_max.ln());
    if !(hi > lo) {
        return Err(Error::FitRejected("no room for a divergence beyond the samples".into()));
    }
    let n_scan = 400;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..=n_scan {
        let ls = lo + (hi - lo) * k as f64 / n_scan as f64;
        let r = fit_at(ls.exp()).2;
        if r < best.0 {
            best = (r, k);
        }
    }
    let step = (hi - lo) / n_scan as f64;
    let mut a = lo + step * best.1.saturating_sub(1) as f64;
    let mut b = (lo + step * (best.1 + 1) as f64).min(hi);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let obj = |ls: f64| fit_at(ls.exp()).2;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (obj(c), obj(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = obj(d);
        }
    }
    let s = (0.5 * (a + b)).exp();
    let (slope, intercept, sse) = fit_at(s);
    let gamma = -slope;
    if !(gamma > 0.0) {
        return Err(Error::FitRejected(format!("fitted exponent {gamma} is not positive")));
    }
    let u_star = u_near + side * s;
    let bracket_u = (u_near + side * span * 1e-9, u_near + side * s_max);
    let bracket = {
        let (d1, d2) = (1.0 / bracket_u.0, 1.0 / bracket_u.1);
        (d1.min(d2), d1.max(d2))
    };
    Ok(RelaxFit {
        axis,
        samples: samples.to_vec(),
        delta_star: 1.0 / u_star,
        gamma,
        log_amplitude: intercept,
        residual: (sse / samples.len() as f64).sqrt(),
        bracket,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, sum of squared residuals)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let sse = x.iter().zip(y).map(|(&xi, &yi)| (yi - a * xi - b).powi(2)).sum();
    (a, b, sse)
}

/// Parametric plot `(C(t,t′), F(t,t′))` at one waiting time, `F = 1 − C − Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdtPolyline {
    pub t_w: f64,
    pub points: Vec<(f64, f64)>,
}

/// Straight-line fit of the FDT plot: slope `−x̂` below the kink at `C = q̂_EA`, or a single
/// line when no kink is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdtFit {
    pub x_hat: f64,
    /// `None` when the plot is one straight line.
    pub q_ea_hat: Option<f64>,
    /// Slope of the short-time branch (`−1` under FDT).
    pub short_slope: f64,
    pub waiting_times: Vec<f64>,
    /// RMS orthogonal distance of the points to the fitted lines.
    pub rms: f64,
}

/// Record written next to the FDT polylines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdtFitSummary {
    pub x_hat: f64,
    pub q_ea_hat: Option<f64>,
}

impl FdtFit {
    pub fn summary(&self) -> FdtFitSummary {
        FdtFitSummary { x_hat: self.x_hat, q_ea_hat: self.q_ea_hat }
    }
}

/// Builds a pane `(t, C(t,t_w), Q(t,t_w))` from a fixed-grid field, using the trapezoidal
/// integrated response. `t_w` is snapped to the grid.
pub fn pane_from_fixed(field: &TwoTimeField, t_w: f64) -> Pane {
    let j = field.index_of(t_w);
    let points = (j..field.len())
        .map(|i| {
            let c = field.corr(i, j);
            (field.time(i), c, 1.0 - c - field.integrated_response(i, j))
        })
        .collect();
    Pane { t_w: field.time(j), points }
}

/// FDT polylines for every pane and the two-segment fit over all their points.
pub fn fdt_curve(panes: &[Pane]) -> Result<(Vec<FdtPolyline>, FdtFit)> {
    let lines: Vec<FdtPolyline> =
        panes.iter().map(|p| FdtPolyline { t_w: p.t_w, points: p.points.iter().map(|&(_, c, q)| (c, 1.0 - c - q)).collect() }).collect();
    let ratio = panes
        .iter()
        .filter_map(|p| p.points.last().map(|&(t, _, _)| if p.t_w > 0.0 { t / p.t_w } else { f64::INFINITY }))
        .fold(0.0, f64::max);
    if ratio < MIN_AGING_RATIO {
        return Err(Error::FitRejected(format!("aging window too short: largest t/t′ is {ratio:.3}, need {MIN_AGING_RATIO}")));
    }
    let mut pts: Vec<(f64, f64)> = lines.iter().flat_map(|l| l.points.iter().copied()).collect();
    pts.retain(|p| p.0.is_finite() && p.1.is_finite());
    if pts.len() < 2 * MIN_BRANCH_POINTS {
        return Err(Error::FitRejected(format!("only {} finite points in the panes", pts.len())));
    }
    let waiting_times = panes.iter().map(|p| p.t_w).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = pts.len();
    let all = Moments::over(&pts);
    let single = all.tls();
    let single_rms = (single.sse / n as f64).sqrt();
    if single_rms < SINGLE_LINE_RMS {
        let slope = single.slope();
        return Ok((lines, FdtFit { x_hat: -slope, q_ea_hat: None, short_slope: slope, waiting_times, rms: single_rms }));
    }

    // Points sorted by C: the aging branch is the prefix [0, k), the short-time branch the rest.
    let mut prefix = vec![Moments::default(); n + 1];
    for (k, &p) in pts.iter().enumerate() {
        prefix[k + 1] = prefix[k].add(p);
    }
    let mut best: Option<(f64, usize)> = None;
    for k in MIN_BRANCH_POINTS..=n - MIN_BRANCH_POINTS {
        if pts[k - 1].0 == pts[k].0 {
            continue;
        }
        let sse = prefix[k].tls().sse + all.sub(&prefix[k]).tls().sse;
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, k));
        }
    }
    let Some((sse, k)) = best else {
        return Err(Error::FitRejected("no admissible breakpoint on the C grid".into()));
    };
    let aging = prefix[k].tls();
    let short = all.sub(&prefix[k]).tls();
    // Nearly parallel branches can intersect far outside the data; use the breakpoint then.
    let (c_lo, c_hi) = (pts[0].0, pts[n - 1].0);
    let kink = aging.intersect(&short).map(|(c, _)| c).filter(|c| (c_lo..=c_hi).contains(c)).unwrap_or(0.5 * (pts[k - 1].0 + pts[k].0));
    Ok((
        lines,
        FdtFit { x_hat: -aging.slope(), q_ea_hat: Some(kink), short_slope: short.slope(), waiting_times, rms: (sse / n as f64).sqrt() },
    ))
}

/// Running sums for total-least-squares line fits.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

/// Line through `(cx, cy)` with unit normal `(nx, ny)`.
struct Line {
    cx: f64,
    cy: f64,
    nx: f64,
    ny: f64,
    sse: f64,
}

impl Moments {
    fn over(pts: &[(f64, f64)]) -> Self {
        pts.iter().fold(Moments::default(), |m, &p| m.add(p))
    }

    fn add(&self, (x, y): (f64, f64)) -> Self {
        Moments { n: self.n + 1.0, sx: self.sx + x, sy: self.sy + y, sxx: self.sxx + x * x, syy: self.syy + y * y, sxy: self.sxy + x * y }
    }

    fn sub(&self, o: &Moments) -> Self {
        Moments {
            n: self.n - o.n,
            sx: self.sx - o.sx,
            sy: self.sy - o.sy,
            sxx: self.sxx - o.sxx,
            syy: self.syy - o.syy,
            sxy: self.sxy - o.sxy,
        }
    }

    fn tls(&self) -> Line {
        let (cx, cy) = (self.sx / self.n, self.sy / self.n);
        let a = (self.sxx / self.n - cx * cx).max(0.0);
        let d = (self.syy / self.n - cy * cy).max(0.0);
        let b = self.sxy / self.n - cx * cy;
        // Smallest eigenvalue of the covariance [[a, b], [b, d]] and its eigenvector.
        let half_tr = 0.5 * (a + d);
        let lam = half_tr - (0.25 * (a - d).powi(2) + b * b).sqrt();
        let (nx, ny) = if b.abs() > 1e-300 {
            (b, lam - a)
        } else if a <= d {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let norm = nx.hypot(ny);
        Line { cx, cy, nx: nx / norm, ny: ny / norm, sse: lam.max(0.0) * self.n }
    }
}

impl Line {
    fn slope(&self) -> f64 {
        -self.nx / self.ny
    }

    fn intersect(&self, o: &Line) -> Option<(f64, f64)> {
        let det = self.nx * o.ny - self.ny * o.nx;
        if det.abs() < 1e-12 {
            return None;
        }
        let r1 = self.nx * self.cx + self.ny * self.cy;
        let r2 = o.nx * o.cx + o.ny * o.cy;
        Some(((r1 * o.ny - self.ny * r2) / det, (self.nx * r2 - r1 * o.nx) / det))
    }
}
