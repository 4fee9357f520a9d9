//! One-step replica symmetry breaking: action, metastable saddle points, complexity,
//! replicon stability, threshold states and the TAP Hessian spectrum.
//!
//! Conventions. `S` is the replicated action with `log Z^x = N β x S`, so the
//! replicated free energy is `Φ(x) = −xS` and the complexity is
//! `Σ = xΦ′ − Φ = −x² ∂S/∂x`. The free energy of the states counted by `Σ` is
//! `f* = Φ′(x) = −S + Σ/x`, which makes `dΣ/df* = x`. Energies use the sign of the
//! Hamiltonian, `E = −∂(βS)/∂β` at `β = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{powi, ModelParams};
use crate::roots::scan_roots;

/// Saddle points with `λ_II` above this value are reported as stable.
pub const STABILITY_TOL: f64 = -1e-10;

/// `1 − q_M + x(q_M − q_m)`
#[inline]
fn det_factor(q_big: f64, q_small: f64, x: f64) -> f64 {
    1.0 - q_big + x * (q_big - q_small)
}

fn check_domain(q_big: f64, q_small: f64, m: f64, x: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q_big) || q_small < 0.0 || q_small > q_big || !(x > 0.0) || !(0.0..1.0).contains(&m) {
        return Err(Error::Domain(format!(
            "1RSB point (qM, qm, m, x) = ({q_big}, {q_small}, {m}, {x}) outside 0 ≤ qm ≤ qM < 1, 0 ≤ m < 1, x > 0"
        )));
    }
    let d = det_factor(q_big, q_small, x);
    if !(d > 0.0) {
        return Err(Error::Domain(format!("determinant factor {d} is not positive")));
    }
    Ok(d)
}

/// The 1RSB action `βS(q_M, q_m, m, x)` at the temperature stored in `params`.
pub fn action_1rsb(q_big: f64, q_small: f64, m: f64, x: f64, params: &ModelParams) -> Result<f64> {
    let d = check_domain(q_big, q_small, m, x)?;
    let beta = params.beta;
    let pf = params.pf();
    let p = params.p;
    let one_m = 1.0 - q_big;
    let tensor = beta * beta / (2.0 * pf * params.deltap)
        * (1.0 - powi(q_big, p) + x * (powi(q_big, p) - powi(q_small, p)) + 2.0 / beta * powi(m, p));
    let matrix = beta * beta / (4.0 * params.delta2) * (1.0 - q_big * q_big + x * (q_big * q_big - q_small * q_small) + 2.0 / beta * m * m);
    Ok(0.5 * one_m.ln() + (d / one_m).ln() / (2.0 * x) + 0.5 * (q_small - m * m) / d + tensor + matrix)
}

/// Replica-symmetric action at overlap `q` and magnetization `m` (the `q_M = q_m` face
/// of the 1RSB action, where the Parisi parameter drops out).
pub fn rs_action(q: f64, m: f64, params: &ModelParams) -> f64 {
    let beta = params.beta;
    let p = params.p;
    0.5 * (1.0 - q).ln()
        + 0.5 * (q - m * m) / (1.0 - q)
        + beta * beta / (2.0 * params.pf() * params.deltap) * (1.0 - powi(q, p) + 2.0 / beta * powi(m, p))
        + beta * beta / (4.0 * params.delta2) * (1.0 - q * q + 2.0 / beta * m * m)
}

/// Residuals `(2∂S/∂q_M, 2∂S/∂q_m, ∂S/∂m)` of the three saddle-point equations.
pub fn saddle_residuals(q_big: f64, q_small: f64, m: f64, x: f64, params: &ModelParams) -> Result<[f64; 3]> {
    let d = check_domain(q_big, q_small, m, x)?;
    let b2 = params.beta * params.beta;
    let p = params.p;
    let k = |q: f64| powi(q, p - 1) / params.deltap + q / params.delta2;
    let r_big = (x - 1.0) * ((1.0 / d - 1.0 / (1.0 - q_big)) / x - (q_small - m * m) / (d * d) + b2 * k(q_big));
    let r_small = x * ((q_small - m * m) / (d * d) - b2 * k(q_small));
    let r_m = -m / d + b2 * k(m);
    Ok([r_big, r_small, r_m])
}

/// Left-hand side of the `q_M` equation at `q_m = m = 0`, `β = 1`, with the `(x − 1)`
/// prefactor removed.
pub fn metastable_equation(q_big: f64, x: f64, params: &ModelParams) -> f64 {
    let d = det_factor(q_big, 0.0, x);
    (1.0 / d - 1.0 / (1.0 - q_big)) / x + powi(q_big, params.p - 1) / params.deltap + q_big / params.delta2
}

/// Complexity from its closed-form expression at a saddle point.
pub fn complexity_closed_form(q_big: f64, q_small: f64, m: f64, x: f64, params: &ModelParams) -> Result<f64> {
    let d = check_domain(q_big, q_small, m, x)?;
    let p = params.p;
    let dq = q_big - q_small;
    let minus_sigma = -0.5 * (d / (1.0 - q_big)).ln() + 0.5 * x * dq / d - 0.5 * x * x * (q_small - m * m) * dq / (d * d)
        + 0.5 * x * x * (powi(q_big, p) - powi(q_small, p)) / (params.pf() * params.deltap)
        + 0.5 * x * x * (q_big * q_big - q_small * q_small) / (2.0 * params.delta2);
    Ok(-minus_sigma)
}

/// Energy density of the states described by a 1RSB point, in the Hamiltonian sign
/// convention (`E = −∂(βS)/∂β` at `β = 1`).
pub fn energy_1rsb(q_big: f64, q_small: f64, m: f64, x: f64, params: &ModelParams) -> f64 {
    let p = params.p;
    let tensor = (1.0 - powi(q_big, p) + x * (powi(q_big, p) - powi(q_small, p)) + powi(m, p)) / (params.pf() * params.deltap);
    let matrix = (1.0 - q_big * q_big + x * (q_big * q_big - q_small * q_small) + m * m) / (2.0 * params.delta2);
    -(tensor + matrix)
}

/// The two replicon eigenvalues `(λ_I, λ_II)`.
pub fn replicon(q_big: f64, q_small: f64, x: f64, params: &ModelParams) -> (f64, f64) {
    let d = det_factor(q_big, q_small, x);
    let p = params.p;
    let pf = params.pf();
    let lam1 = 1.0 - d * d * ((pf - 1.0) * powi(q_small, p - 2) / params.deltap + 1.0 / params.delta2);
    let lam2 = 1.0 - (1.0 - q_big).powi(2) * ((pf - 1.0) * powi(q_big, p - 2) / params.deltap + 1.0 / params.delta2);
    (lam1, lam2)
}

/// A 1RSB saddle point together with its derived observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saddle1RSB {
    pub q_big: f64,
    pub q_small: f64,
    pub m: f64,
    pub x: f64,
    /// Action `S` at the saddle.
    pub action: f64,
    pub sigma: f64,
    pub lambda_i: f64,
    pub lambda_ii: f64,
    /// Free energy `f* = −S + Σ/x` of the states counted by `sigma`.
    pub free_energy: f64,
    pub energy: f64,
    /// Smaller roots of the `q_M` equation at the same `x`.
    pub other_roots: Vec<f64>,
}

impl Saddle1RSB {
    pub fn is_stable(&self) -> bool {
        self.lambda_ii >= STABILITY_TOL
    }
}

/// Nonzero roots of the metastable `q_M` equation at Parisi parameter `x`, ascending.
pub fn metastable_roots(x: f64, params: &ModelParams) -> Vec<f64> {
    scan_roots(|q| metastable_equation(q, x, params), 1e-6, 1.0 - 1e-6, 1000, 1e-15)
}

/// Metastable saddle (`q_m = m = 0`, `β = 1`) at Parisi parameter `x`, taking the largest
/// `q_M` root. `Ok(None)` when no glassy root exists.
pub fn saddle_metastable(x: f64, params: &ModelParams) -> Result<Option<Saddle1RSB>> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::Domain(format!("Parisi parameter {x} outside (0, 1]")));
    }
    let params = ModelParams { beta: 1.0, ..*params };
    let mut roots = metastable_roots(x, &params);
    let Some(q_big) = roots.pop() else {
        return Ok(None);
    };
    build_saddle(q_big, x, roots, &params).map(Some)
}

fn build_saddle(q_big: f64, x: f64, other_roots: Vec<f64>, params: &ModelParams) -> Result<Saddle1RSB> {
    let action = action_1rsb(q_big, 0.0, 0.0, x, params)?;
    let sigma = complexity_closed_form(q_big, 0.0, 0.0, x, params)?;
    let (lambda_i, lambda_ii) = replicon(q_big, 0.0, x, params);
    Ok(Saddle1RSB {
        q_big,
        q_small: 0.0,
        m: 0.0,
        x,
        action,
        sigma,
        lambda_i,
        lambda_ii,
        free_energy: -action + sigma / x,
        energy: energy_1rsb(q_big, 0.0, 0.0, x, params),
        other_roots,
    })
}

/// Complexity from finite differences of the action along the saddle branch,
/// `Σ = −x² dS/dx`. Used to validate [`complexity_closed_form`].
pub fn complexity_from_action(x: f64, h: f64, params: &ModelParams) -> Result<Option<f64>> {
    let s = |xx: f64| -> Result<Option<f64>> { Ok(saddle_metastable(xx, params)?.map(|sd| sd.action)) };
    let (Some(sp), Some(sm)) = (s(x + h)?, s(x - h)?) else {
        return Ok(None);
    };
    Ok(Some(-x * x * (sp - sm) / (2.0 * h)))
}

/// 200 log-spaced Parisi parameters on `[0.01, 1]`.
pub fn default_x_grid() -> Vec<f64> {
    log_grid(0.01, 1.0, 200)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityPoint {
    pub x: f64,
    /// `None` where the metastable branch does not exist.
    pub saddle: Option<Saddle1RSB>,
}

impl ComplexityPoint {
    pub fn stable(&self) -> bool {
        self.saddle.as_ref().is_some_and(Saddle1RSB::is_stable)
    }
}

/// Metastable saddles over a grid of Parisi parameters. Each point carries the
/// Legendre pair `(free_energy, sigma)` and its stability.
pub fn complexity_curve(params: &ModelParams, x_grid: &[f64]) -> Result<Vec<ComplexityPoint>> {
    x_grid.iter().map(|&x| Ok(ComplexityPoint { x, saddle: saddle_metastable(x, params)? })).collect()
}

/// `σ_F(q)² = (p−1)q^{p−2}/Δₚ + 1/Δ₂`
pub fn sigma_f_sq(q: f64, params: &ModelParams) -> f64 {
    (params.pf() - 1.0) * powi(q, params.p - 2) / params.deltap + 1.0 / params.delta2
}

/// `1/(1−q) − σ_F(q)`; its roots are the marginal overlaps.
fn threshold_equation(q: f64, params: &ModelParams) -> f64 {
    1.0 / (1.0 - q) - sigma_f_sq(q, params).sqrt()
}

/// All roots of `1/(1−q) = σ_F(q)` in `(0, 1)`, ascending.
pub fn threshold_roots(params: &ModelParams) -> Vec<f64> {
    scan_roots(|q| threshold_equation(q, params), 1e-6, 1.0 - 1e-6, 1000, 1e-15)
}

/// Largest root of the marginality condition, if any.
pub fn threshold_overlap(params: &ModelParams) -> Option<f64> {
    threshold_roots(params).last().copied()
}

fn require_threshold(params: &ModelParams) -> Result<f64> {
    threshold_overlap(params).ok_or_else(|| Error::Domain("no threshold states for these parameters".into()))
}

/// Parisi parameter `x(q)` that makes `q` a metastable saddle.
pub fn parisi_x_at(q: f64, params: &ModelParams) -> f64 {
    1.0 / ((1.0 - q) * params.kernel().q1(q)) - 1.0 / q + 1.0
}

pub fn parisi_x_threshold(params: &ModelParams) -> Result<f64> {
    Ok(parisi_x_at(require_threshold(params)?, params))
}

/// Threshold energy `−Q(1) − [1/((1−q)Q′(q)) − 1/q]·Q(q)` at `q = q_th`.
pub fn threshold_energy(params: &ModelParams) -> Result<f64> {
    let q = require_threshold(params)?;
    let k = params.kernel();
    Ok(-k.q(1.0) - (1.0 / ((1.0 - q) * k.q1(q)) - 1.0 / q) * k.q(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStates {
    pub exists: bool,
    pub q_th: Option<f64>,
    pub x_th: Option<f64>,
    pub e_th: Option<f64>,
}

pub fn threshold_states(params: &ModelParams) -> ThresholdStates {
    match threshold_overlap(params) {
        None => ThresholdStates { exists: false, q_th: None, x_th: None, e_th: None },
        Some(q) => ThresholdStates { exists: true, q_th: Some(q), x_th: Some(parisi_x_at(q, params)), e_th: threshold_energy(params).ok() },
    }
}

/// Whether the metastable branch has a stable point of positive complexity on `x_grid`.
pub fn has_stable_glassy_states(params: &ModelParams, x_grid: &[f64]) -> bool {
    x_grid.iter().any(|&x| matches!(saddle_metastable(x, params), Ok(Some(s)) if s.sigma > 0.0 && s.is_stable()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub deltap: f64,
    /// Smallest `Δ₂` with stable positive-complexity states, refined by bisection
    /// between grid points. `None` when the scanned window has no such crossing.
    pub delta2: Option<f64>,
}

/// For each `Δₚ`, the smallest `Δ₂` of the scanned window at which marginally stable
/// states of positive complexity still exist.
pub fn rsb_region_boundary(p: u32, deltap_grid: &[f64], delta2_grid: &[f64], x_grid: &[f64]) -> Result<Vec<BoundaryPoint>> {
    let mut d2 = delta2_grid.to_vec();
    d2.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(deltap_grid.len());
    for &deltap in deltap_grid {
        let glassy = |delta2: f64| -> Result<bool> { Ok(has_stable_glassy_states(&ModelParams::new(p, delta2, deltap)?, x_grid)) };
        let mut boundary = None;
        let mut prev: Option<(f64, bool)> = None;
        for &delta2 in &d2 {
            let g = glassy(delta2)?;
            if let Some((lo, false)) = prev {
                if g {
                    let (mut a, mut b) = (lo, delta2);
                    for _ in 0..30 {
                        let mid = 0.5 * (a + b);
                        if glassy(mid)? {
                            b = mid;
                        } else {
                            a = mid;
                        }
                    }
                    boundary = Some(0.5 * (a + b));
                    break;
                }
            }
            prev = Some((delta2, g));
        }
        out.push(BoundaryPoint { deltap, delta2: boundary });
    }
    Ok(out)
}

/// Spectrum of the TAP free-energy Hessian at overlap `q`: a semicircle of radius `2σ_F`
/// centred on `f′(q) = 1/(1−q) + (1−q)σ_F²`, plus the BBP outlier criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianSpectrum {
    pub q: f64,
    pub sigma_f: f64,
    pub edge_left: f64,
    pub edge_right: f64,
    pub bbp_unstable: bool,
}

pub fn hessian_spectrum(q: f64, params: &ModelParams) -> Result<HessianSpectrum> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("overlap {q} outside (0, 1)")));
    }
    let s2 = sigma_f_sq(q, params);
    let sigma_f = s2.sqrt();
    let centre = 1.0 / (1.0 - q) + (1.0 - q) * s2;
    Ok(HessianSpectrum {
        q,
        sigma_f,
        edge_left: centre - 2.0 * sigma_f,
        edge_right: centre + 2.0 * sigma_f,
        bbp_unstable: 1.0 / params.delta2 > sigma_f,
    })
}

/// On-site term of the TAP free energy whose derivative centres the Hessian bulk.
pub fn tap_onsite(q: f64, params: &ModelParams) -> f64 {
    let pf = params.pf();
    let p = params.p;
    -(1.0 - q).ln()
        - (1.0 + (pf - 1.0) * powi(q, p) - pf * powi(q, p - 1)) / (pf * params.deltap)
        - (1.0 - q).powi(2) / (2.0 * params.delta2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pr(p: u32, d2: f64, dp: f64) -> ModelParams {
        ModelParams::new(p, d2, dp).unwrap()
    }

    #[test]
    fn action_at_origin() {
        let params = ModelParams::with_beta(3, 0.8, 0.2, 1.7).unwrap();
        let s = action_1rsb(0.0, 0.0, 0.0, 0.4, &params).unwrap();
        let want = 1.7f64.powi(2) / (2.0 * 3.0 * 0.2) + 1.7f64.powi(2) / (4.0 * 0.8);
        assert!((s - want).abs() < 1e-13);
    }

    #[test]
    fn action_reduces_to_rs() {
        let params = pr(3, 0.9, 0.6);
        for q in [0.1, 0.3] {
            for x in [0.3, 1.0 - 1e-9, 1.0] {
                let s = action_1rsb(q, q, 0.0, x, &params).unwrap();
                assert!((s - rs_action(q, 0.0, &params)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn action_domain() {
        let params = pr(3, 0.9, 0.6);
        assert!(action_1rsb(1.0, 0.0, 0.0, 0.5, &params).is_err());
        assert!(action_1rsb(0.5, 0.6, 0.0, 0.5, &params).is_err());
        assert!(action_1rsb(0.5, 0.0, 0.0, 0.0, &params).is_err());
    }

    #[test]
    fn gradient_matches_first_saddle_equation() {
        let params = pr(3, 0.8, 0.2);
        let (qb, qs, m, x) = (0.55, 0.1, 0.05, 0.4);
        let r = saddle_residuals(qb, qs, m, x, &params).unwrap();
        for h in [1e-4, 1e-5] {
            let ds = |dqb: f64, dqs: f64, dm: f64| {
                (action_1rsb(qb + dqb, qs + dqs, m + dm, x, &params).unwrap()
                    - action_1rsb(qb - dqb, qs - dqs, m - dm, x, &params).unwrap())
                    / (2.0 * h)
            };
            assert!((2.0 * ds(h, 0.0, 0.0) - r[0]).abs() < 1e-6);
            assert!((2.0 * ds(0.0, h, 0.0) - r[1]).abs() < 1e-6);
            assert!((ds(0.0, 0.0, h) - r[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn threshold_anchor() {
        let params = pr(3, 0.8, 0.2);
        let t = threshold_states(&params);
        assert!(t.exists);
        assert!((t.q_th.unwrap() - 0.6379681324627725).abs() < 1e-10);
        assert!((t.x_th.unwrap() - 0.40770817589267927).abs() < 1e-9);
        assert!((t.e_th.unwrap() - -1.8846818181533418).abs() < 1e-9);
        let (_, l2) = replicon(t.q_th.unwrap(), 0.0, t.x_th.unwrap(), &params);
        assert!(l2.abs() < 1e-8);
    }

    #[test]
    fn threshold_limits_and_absence() {
        let params = pr(3, 0.25, f64::INFINITY);
        let q = threshold_overlap(&params).unwrap();
        assert!((q - 0.5).abs() < 1e-12);
        assert!(parisi_x_threshold(&params).unwrap().abs() < 1e-12);
        assert!((threshold_energy(&params).unwrap() - -1.5).abs() < 1e-12);
        let none = pr(3, 2.0, 1.0);
        assert!(!threshold_states(&none).exists);
        assert!(parisi_x_threshold(&none).is_err());
        assert!(threshold_energy(&none).is_err());
    }

    #[test]
    fn second_root_branch() {
        let params = pr(3, 1.4, 0.2);
        let roots = threshold_roots(&params);
        assert_eq!(roots.len(), 2);
        assert!((roots[1] - 0.6195861138397283).abs() < 1e-10);
        let q = pr(3, 0.7, 1.0);
        assert!((threshold_overlap(&q).unwrap() - 0.29676982984284034).abs() < 1e-10);
        assert!((threshold_energy(&q).unwrap() - -1.0051898558631245).abs() < 1e-9);
    }

    #[test]
    fn metastable_saddle_at_threshold_x() {
        let params = pr(3, 0.8, 0.2);
        let t = threshold_states(&params);
        let s = saddle_metastable(t.x_th.unwrap(), &params).unwrap().unwrap();
        assert!((s.q_big - t.q_th.unwrap()).abs() < 1e-8);
        let r = saddle_residuals(s.q_big, 0.0, 0.0, s.x, &params).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-9));
        assert!((s.energy - t.e_th.unwrap()).abs() < 1e-8);
    }

    #[test]
    fn energy_is_beta_derivative() {
        let base = pr(3, 0.8, 0.2);
        let (qb, qs, m, x) = (0.6, 0.2, 0.1, 0.45);
        let h = 1e-5;
        let bs = |b: f64| action_1rsb(qb, qs, m, x, &ModelParams { beta: b, ..base }).unwrap();
        let fd = -(bs(1.0 + h) - bs(1.0 - h)) / (2.0 * h);
        assert!((fd - energy_1rsb(qb, qs, m, x, &base)).abs() < 1e-8);
    }

    #[test]
    fn closed_form_complexity_matches_action() {
        let params = pr(3, 0.9, 0.5);
        for x in [0.3, 0.5, 0.8] {
            let s = saddle_metastable(x, &params).unwrap().unwrap();
            let fd = complexity_from_action(x, 1e-5, &params).unwrap().unwrap();
            assert!((fd - s.sigma).abs() < 1e-6, "x={x}: {fd} vs {}", s.sigma);
        }
    }

    #[test]
    fn replicon_at_origin() {
        let params = pr(4, 0.7, 0.3);
        let (a, b) = replicon(0.0, 0.0, 0.5, &params);
        assert!((a - (1.0 - 1.0 / 0.7)).abs() < 1e-14 && (b - a).abs() < 1e-14);
    }

    #[test]
    fn hessian_marginal_at_threshold() {
        let params = pr(3, 0.8, 0.2);
        let q = threshold_overlap(&params).unwrap();
        let h = hessian_spectrum(q, &params).unwrap();
        assert!(h.edge_left.abs() < 1e-8);
        // bulk centre is the derivative of the on-site TAP term
        let d = 1e-6;
        let fp = (tap_onsite(q + d, &params) - tap_onsite(q - d, &params)) / (2.0 * d);
        assert!((fp - 0.5 * (h.edge_left + h.edge_right)).abs() < 1e-7);
        for q in [0.1, 0.5, 0.9] {
            assert!(!hessian_spectrum(q, &pr(3, 1.2, 0.5)).unwrap().bbp_unstable);
        }
    }
}
