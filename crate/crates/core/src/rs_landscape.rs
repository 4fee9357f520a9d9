//! Replica-symmetric free entropy, AMP state evolution and the resulting phase
//! diagram: fixed points, spinodals, tricritical point, information-theoretic
//! threshold, phase labels and the landscape-based Langevin threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{powi, ModelParams};
use crate::roots::{bisect, scan_roots};

/// Initial overlap used to probe the uninformative basin.
pub const EPS_INIT: f64 = 1e-8;
/// Initial overlap used to probe the informative branch.
pub const INFORMATIVE_INIT: f64 = 1.0 - 1e-8;
/// Overlaps below this value are treated as the uninformative fixed point.
pub const ZERO_OVERLAP: f64 = 1e-6;
/// Free-entropy differences below this value count as ties (resolved to larger m).
pub const PHI_TIE: f64 = 1e-12;

const SE_TOL: f64 = 1e-14;
const SE_MAX_ITER: usize = 2_000_000;

/// Effective field `m/Δ₂ + m^{p-1}/Δₚ` entering the scalar denoiser.
#[inline]
pub fn se_field(m: f64, params: &ModelParams) -> f64 {
    m / params.delta2 + powi(m, params.p - 1) / params.deltap
}

/// One step of the Bayes-optimal state evolution `m ← 1 − 1/(1 + m/Δ₂ + m^{p−1}/Δₚ)`.
#[inline]
pub fn se_map(m: f64, params: &ModelParams) -> f64 {
    let g = se_field(m, params);
    g / (1.0 + g)
}

/// `m − F(m)`; zero exactly at SE fixed points.
pub fn se_residual(m: f64, params: &ModelParams) -> f64 {
    m - se_map(m, params)
}

/// Compact replica-symmetric free entropy, valid at SE fixed points.
pub fn rs_free_entropy(m: f64, params: &ModelParams) -> Result<f64> {
    if !(m < 1.0) || m.is_nan() {
        return Err(Error::Domain(format!("free entropy needs m < 1, got {m}")));
    }
    Ok(0.5 * (1.0 - m).ln() + 0.5 * m + m * m / (4.0 * params.delta2) + powi(m, params.p) / (2.0 * params.pf() * params.deltap))
}

/// Variational form of the Gaussian-prior free entropy, defined for every `m ≥ 0`.
/// Its stationary points are the SE fixed points, where it equals [`rs_free_entropy`].
pub fn rs_free_entropy_variational(m: f64, params: &ModelParams) -> f64 {
    let g = se_field(m, params);
    -0.5 * (1.0 + g).ln() + 0.5 * g
        - m * m / (4.0 * params.delta2)
        - (params.pf() - 1.0) * powi(m, params.p) / (2.0 * params.pf() * params.deltap)
}

/// Result of iterating the state evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRun {
    pub trajectory: Vec<f64>,
    pub fixed_point: f64,
    pub converged: bool,
}

/// Iterates the state evolution from `m0` until `|Δm| < tol` or `max_iter` steps.
/// The trajectory includes `m0`.
pub fn se_iterate(m0: f64, params: &ModelParams, tol: f64, max_iter: usize) -> Result<SeRun> {
    if !(0.0..1.0).contains(&m0) {
        return Err(Error::Domain(format!("initial overlap {m0} outside [0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let mut traj = vec![m0];
    let mut m = m0;
    for _ in 0..max_iter {
        let next = se_map(m, params);
        traj.push(next);
        let done = (next - m).abs() < tol;
        m = next;
        if done {
            return Ok(SeRun { trajectory: traj, fixed_point: m, converged: true });
        }
    }
    Ok(SeRun { trajectory: traj, fixed_point: m, converged: false })
}

/// Fixed point reached from `m0` without storing the trajectory.
pub fn se_fixed_point(m0: f64, params: &ModelParams) -> f64 {
    let mut m = m0;
    for _ in 0..SE_MAX_ITER {
        let next = se_map(m, params);
        if (next - m).abs() < SE_TOL {
            return next;
        }
        m = next;
    }
    m
}

/// Overlap with the signal and self-overlap of the AMP estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SEState {
    pub m: f64,
    pub q: f64,
}

/// Two-parameter state evolution step, valid off the Nishimori line.
pub fn se_two_param_iterate(state: SEState, params: &ModelParams) -> Result<SEState> {
    let SEState { m, q } = state;
    if !(0.0..1.0).contains(&m) || !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("state (m, q) = ({m}, {q}) outside [0, 1)²")));
    }
    let gm = se_field(m, params);
    let gq = se_field(q, params);
    let a = gm * gm + gq;
    // q'/(1-q')² = a  ⇔  a q'² − (2a+1) q' + a = 0, smaller root lies in [0, 1).
    let q_new = if a == 0.0 {
        0.0
    } else {
        let disc = 4.0 * a + 1.0;
        2.0 * a / ((2.0 * a + 1.0) + disc.sqrt())
    };
    if !(0.0..1.0).contains(&q_new) || !q_new.is_finite() {
        return Err(Error::Domain(format!("no root of the q' equation in [0, 1) for a = {a}")));
    }
    Ok(SEState { m: (1.0 - q_new) * gm, q: q_new })
}

/// Closed-form fixed points for `p = 3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointsP3 {
    pub m0: f64,
    /// `(m₋, m₊)`, absent when the discriminant is negative.
    pub pair: Option<(f64, f64)>,
}

pub fn fixed_points_p3(params: &ModelParams) -> Result<FixedPointsP3> {
    if params.p != 3 {
        return Err(Error::Unsupported(format!("closed-form fixed points need p = 3, got p = {}; use se_iterate", params.p)));
    }
    let r = params.deltap / params.delta2;
    let disc = (1.0 + r) * (1.0 + r) - 4.0 * params.deltap;
    if disc < 0.0 {
        return Ok(FixedPointsP3 { m0: 0.0, pair: None });
    }
    let s = disc.sqrt();
    let minus = 0.5 * (1.0 - r - s);
    let plus = 0.5 * (1.0 - r + s);
    for m in [minus, plus] {
        let res = se_residual(m, params);
        if !(res.abs() < 1e-12) {
            return Err(Error::Numerical { time: 0.0, reason: format!("closed-form fixed point {m} has SE residual {res:e}") });
        }
    }
    Ok(FixedPointsP3 { m0: 0.0, pair: Some((minus, plus)) })
}

/// `Δₚ` on the spinodal parameterized by the field `x` at fixed `Δ₂`.
fn spinodal_deltap(x: f64, p: u32, delta2: f64) -> Option<f64> {
    if !(x > 0.0) {
        return None;
    }
    let f = x / (1.0 + x);
    let den = x - f / delta2;
    if !(den > 0.0) {
        return None;
    }
    Some(powi(f, p - 1) / den)
}

fn spinodal_fields(p: u32, delta2: f64) -> Option<(f64, f64)> {
    let pf = p as f64;
    let disc = (pf - 1.0) * (pf - 1.0) - 4.0 * (pf - 2.0) / delta2;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((0.5 * (pf - 3.0 - s), 0.5 * (pf - 3.0 + s)))
}

/// `Δₚ` at which the informative branch disappears, at fixed `Δ₂` (`params.deltap` is ignored).
/// `None` past the tricritical point or when the spinodal is unphysical.
pub fn dynamical_spinodal(params: &ModelParams) -> Option<f64> {
    let (_, x_plus) = spinodal_fields(params.p, params.delta2)?;
    spinodal_deltap(x_plus, params.p, params.delta2)
}

/// Second spinodal branch `Δₚ(x₋)`; exists only for `p ≥ 4` and `x₋ > 0`.
/// For `p = 3` the algorithmic spinodal is the vertical line `Δ₂ = 1` and this returns `None`.
pub fn algorithmic_spinodal(params: &ModelParams) -> Option<f64> {
    let (x_minus, _) = spinodal_fields(params.p, params.delta2)?;
    spinodal_deltap(x_minus, params.p, params.delta2)
}

/// Closed form `Δ₂^dyn = Δ₃/(2√Δ₃ − 1)` of the `p = 3` dynamical spinodal.
pub fn dynamical_spinodal_delta2_p3(delta3: f64) -> Option<f64> {
    let den = 2.0 * delta3.sqrt() - 1.0;
    (den > 0.0).then(|| delta3 / den)
}

/// Point where the two spinodals merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tricritical {
    pub deltap: f64,
    pub delta2: f64,
    /// Set for `p = 3`, where the closed form is singular and the corner `(1, 1)` of the
    /// continuous transition is returned instead.
    pub special_case: bool,
}

pub fn tricritical_point(p: u32) -> Result<Tricritical> {
    if p < 3 {
        return Err(Error::InvalidParams(format!("tensor order p = {p} must be at least 3")));
    }
    if p == 3 {
        return Ok(Tricritical { deltap: 1.0, delta2: 1.0, special_case: true });
    }
    let pf = p as f64;
    let deltap = 4.0 * (pf - 2.0) * ((pf - 3.0) / (pf - 1.0)).powi(p as i32 - 1) / ((pf - 3.0) * (pf - 3.0));
    let inv_delta2 = (pf - 1.0) * (pf - 1.0) / (4.0 * (pf - 2.0));
    Ok(Tricritical { deltap, delta2: 1.0 / inv_delta2, special_case: false })
}

/// All SE fixed points in `[0, 1)`: zero plus the sign changes of `m − F(m)` on a fine scan.
pub fn se_fixed_points(params: &ModelParams) -> Vec<f64> {
    let mut pts = vec![0.0];
    let roots = scan_roots(|m| se_residual(m, params), 1e-9, 1.0 - 1e-12, 20_000, 1e-15);
    pts.extend(roots.into_iter().filter(|&m| m > ZERO_OVERLAP));
    pts
}

/// Largest positive SE fixed point, if any.
pub fn largest_fixed_point(params: &ModelParams) -> Option<f64> {
    se_fixed_points(params).into_iter().rfind(|&m| m > ZERO_OVERLAP)
}

/// Information-theoretic threshold `Δₚ^IT` at fixed `Δ₂ > 1` (`params.deltap` is ignored):
/// the `Δₚ` where the informative fixed point overtakes the uninformative one.
pub fn it_threshold(p: u32, delta2: f64) -> Result<Option<f64>> {
    if !(delta2 > 1.0) {
        return Err(Error::Domain(format!("the IT threshold is defined for Δ₂ > 1, got {delta2}")));
    }
    let base = ModelParams::new(p, delta2, 1.0)?;
    let Some(dyn_sp) = dynamical_spinodal(&base) else {
        return Ok(None);
    };
    let phi_plus = |deltap: f64| -> f64 {
        let params = ModelParams { deltap, ..base };
        match largest_fixed_point(&params) {
            Some(m) => rs_free_entropy(m, &params).unwrap_or(f64::NEG_INFINITY),
            None => f64::NEG_INFINITY,
        }
    };
    // Step inside the spinodal until the scan resolves the informative branch.
    let mut hi = dyn_sp * (1.0 - 1e-9);
    let mut tries = 0;
    while !phi_plus(hi).is_finite() {
        hi *= 1.0 - 1e-4;
        tries += 1;
        if tries > 1000 {
            return Ok(None);
        }
    }
    if phi_plus(hi) >= 0.0 {
        return Ok(Some(hi));
    }
    let mut lo = hi;
    for _ in 0..60 {
        lo *= 0.5;
        if phi_plus(lo) > 0.0 {
            return Ok(bisect(phi_plus, lo, hi, 1e-14 * hi));
        }
    }
    Ok(None)
}

/// Phase labels of the Bayes-optimal phase diagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Easy,
    Hard,
    HybridHard,
    Impossible,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Easy => "easy",
            Phase::Hard => "hard",
            Phase::HybridHard => "hybrid_hard",
            Phase::Impossible => "impossible",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub params: ModelParams,
    pub m_amp: f64,
    pub m_star: f64,
    pub mmse: f64,
    pub phase: Phase,
}

/// Runs SE from both ends, picks the free-entropy maximizer and labels the phase.
pub fn classify_phase(params: &ModelParams) -> PhasePoint {
    let clean = |m: f64| if m < ZERO_OVERLAP { 0.0 } else { m };
    let m_amp = clean(se_fixed_point(EPS_INIT, params));
    let m_inf = clean(se_fixed_point(INFORMATIVE_INIT, params));
    let phi = |m: f64| rs_free_entropy(m, params).unwrap_or(f64::NEG_INFINITY);
    let mut m_star = 0.0;
    let mut best = 0.0;
    for m in [m_amp, m_inf] {
        let v = phi(m);
        if v > best + PHI_TIE || ((v - best).abs() <= PHI_TIE && m > m_star) {
            best = v;
            m_star = m;
        }
    }
    let same = (m_star - m_amp).abs() < ZERO_OVERLAP;
    let phase = match (same, m_amp > 0.0) {
        (true, true) => Phase::Easy,
        (true, false) => Phase::Impossible,
        (false, false) => Phase::Hard,
        (false, true) => Phase::HybridHard,
    };
    let m_star = if same { m_amp } else { m_star };
    PhasePoint { params: *params, m_amp, m_star, mmse: 1.0 - m_star, phase }
}

/// Roots of the landscape-based Langevin threshold `Δₚ = (p−1)s²(1−s)^{p−3}` in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinThreshold {
    /// All roots `Δ₂*` in increasing order.
    pub roots: Vec<f64>,
    /// `min(1, smallest root)`; equals 1 when there is no root.
    pub effective: f64,
}

pub fn langevin_threshold(params: &ModelParams) -> LangevinThreshold {
    let dp = params.deltap;
    let roots = if params.p == 3 {
        let s = (dp / 2.0).sqrt();
        if s > 0.0 && s < 1.0 {
            vec![s]
        } else {
            Vec::new()
        }
    } else {
        let pf = params.pf();
        let curve = |s: f64| (pf - 1.0) * s * s * powi(1.0 - s, params.p - 3) - dp;
        scan_roots(curve, 1e-12, 1.0 - 1e-12, 10_000, 1e-15)
    };
    let effective = roots.first().map_or(1.0, |&r| r.min(1.0));
    LangevinThreshold { roots, effective }
}

/// Overlap after one step of the linearized evolution near a threshold state.
pub fn threshold_m_evolution(m: f64, q_th: f64, params: &ModelParams) -> f64 {
    (1.0 - q_th) * (powi(m, params.p - 1) / params.deltap + m / params.delta2)
}

/// Threshold states are unstable toward the signal when `(1 − q_th)/Δ₂ > 1`.
pub fn threshold_is_unstable(q_th: f64, params: &ModelParams) -> bool {
    (1.0 - q_th) / params.delta2 > 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pr(p: u32, d2: f64, dp: f64) -> ModelParams {
        ModelParams::new(p, d2, dp).unwrap()
    }

    #[test]
    fn free_entropy_values() {
        let p = pr(3, 2.0, 0.3);
        assert_eq!(rs_free_entropy(0.0, &p).unwrap(), 0.0);
        assert!((rs_free_entropy(0.6, &p).unwrap() - 0.006854634062922485).abs() < 1e-15);
        assert!(rs_free_entropy(1.0, &p).is_err());
        let near = rs_free_entropy(1.0 - 1e-12, &p).unwrap();
        let nearer = rs_free_entropy(1.0 - 1e-14, &p).unwrap();
        assert!(nearer < near && near < -10.0);
    }

    #[test]
    fn se_examples() {
        let p = pr(3, 2.0, 0.3);
        let zero = se_iterate(0.0, &p, 1e-12, 100).unwrap();
        assert!(zero.converged && zero.fixed_point == 0.0);
        let low = se_iterate(1e-8, &p, 1e-14, 10_000).unwrap();
        assert!(low.converged && low.fixed_point < 1e-12);
        let high = se_iterate(0.99, &p, 1e-14, 10_000).unwrap();
        assert!(high.converged && (high.fixed_point - 0.6).abs() < 1e-9);
        let capped = se_iterate(0.99, &p, 1e-14, 3).unwrap();
        assert!(!capped.converged && capped.trajectory.len() == 4);
        assert!(se_iterate(1.0, &p, 1e-9, 10).is_err());
    }

    #[test]
    fn closed_form_fixed_points() {
        let fp = fixed_points_p3(&pr(3, 2.0, 0.3)).unwrap();
        let (minus, plus) = fp.pair.unwrap();
        assert!((plus - 0.6).abs() < 1e-12 && (minus - 0.25).abs() < 1e-12);
        assert!(fixed_points_p3(&pr(3, 2.0, 1.0)).unwrap().pair.is_none());
        let (a, b) = fixed_points_p3(&pr(3, 1.0, 1.0)).unwrap().pair.unwrap();
        assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
        assert!(matches!(fixed_points_p3(&pr(4, 1.0, 1.0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn two_param_step() {
        let p = pr(3, 2.0, 0.3);
        let s = se_two_param_iterate(SEState { m: 0.0, q: 0.0 }, &p).unwrap();
        assert_eq!(s, SEState { m: 0.0, q: 0.0 });
        let s = se_two_param_iterate(SEState { m: 0.6, q: 0.6 }, &p).unwrap();
        assert!((s.m - 0.6).abs() < 1e-12 && (s.q - 0.6).abs() < 1e-12);
    }

    #[test]
    fn spinodal_values() {
        let cases = [
            (1.01, 0.8271925124533593),
            (1.05, 0.6738295520296365),
            (1.10, 0.5903425461218118),
            (2.0, 0.34314575050761986),
            (4.0 / 3.0, 0.4444444444444444),
        ];
        for (d2, want) in cases {
            let got = dynamical_spinodal(&pr(3, d2, 1.0)).unwrap();
            assert!((got - want).abs() < 1e-12, "{d2}: {got} vs {want}");
            let back = dynamical_spinodal_delta2_p3(got).unwrap();
            assert!((back - d2).abs() < 1e-10);
        }
        assert!(algorithmic_spinodal(&pr(3, 2.0, 1.0)).is_none());
        // below 1/Δ₂ = (p−1)²/(4(p−2)) no spinodal for p = 4
        assert!(dynamical_spinodal(&pr(4, 0.5, 1.0)).is_none());
    }

    #[test]
    fn tricritical_values() {
        let t4 = tricritical_point(4).unwrap();
        assert!((t4.deltap - 8.0 / 27.0).abs() < 1e-14 && (t4.delta2 - 8.0 / 9.0).abs() < 1e-14);
        let t5 = tricritical_point(5).unwrap();
        assert!((t5.deltap - 0.1875).abs() < 1e-14 && (t5.delta2 - 0.75).abs() < 1e-14);
        let t3 = tricritical_point(3).unwrap();
        assert!(t3.special_case && t3.deltap == 1.0 && t3.delta2 == 1.0);
        // spinodals meet at the tricritical point
        let p = ModelParams::new(4, t4.delta2, 1.0).unwrap();
        let (a, b) = (dynamical_spinodal(&p).unwrap(), algorithmic_spinodal(&p).unwrap());
        assert!((a - t4.deltap).abs() < 1e-6 && (b - t4.deltap).abs() < 1e-6);
    }

    #[test]
    fn it_threshold_values() {
        for (d2, want) in [(1.05, 0.6576301196072731), (2.0, 0.32080310513787863)] {
            let it = it_threshold(3, d2).unwrap().unwrap();
            assert!((it - want).abs() < 1e-9, "{it} vs {want}");
            let dyn_sp = dynamical_spinodal(&pr(3, d2, 1.0)).unwrap();
            assert!(it > 0.0 && it < dyn_sp);
            let params = pr(3, d2, it);
            let m = largest_fixed_point(&params).unwrap();
            assert!(rs_free_entropy(m, &params).unwrap().abs() < 1e-8);
        }
        assert!(it_threshold(3, 0.9).is_err());
    }

    #[test]
    fn phase_examples() {
        assert_eq!(classify_phase(&pr(3, 0.7, 1.0)).phase, Phase::Easy);
        let hard = classify_phase(&pr(3, 2.0, 0.3));
        assert_eq!(hard.phase, Phase::Hard);
        assert!((hard.m_star - 0.6).abs() < 1e-9 && hard.m_amp == 0.0);
        assert!((hard.mmse - 0.4).abs() < 1e-9);
        assert_eq!(classify_phase(&pr(3, 2.0, 1.0)).phase, Phase::Impossible);
    }

    #[test]
    fn langevin_threshold_values() {
        let t = langevin_threshold(&pr(3, 1.0, 0.9));
        assert!((1.0 / t.roots[0] - 1.4907119849998598).abs() < 1e-12);
        let t = langevin_threshold(&pr(3, 1.0, 1.0));
        assert!((t.effective - 0.5f64.sqrt()).abs() < 1e-14);
        let t = langevin_threshold(&pr(4, 1.0, 0.25));
        assert_eq!(t.roots.len(), 2);
        assert!((t.roots[0] - 0.3611758622321891).abs() < 1e-10);
        assert!((t.roots[1] - 0.8962586069871424).abs() < 1e-10);
        // curve maximum for p = 4 is 3·(2/3)²·(1/3) = 4/9
        let t = langevin_threshold(&pr(4, 1.0, 0.5));
        assert!(t.roots.is_empty() && t.effective == 1.0);
    }

    #[test]
    fn threshold_evolution() {
        let p = pr(3, 0.5, 1.0);
        assert_eq!(threshold_m_evolution(0.0, 0.3, &p), 0.0);
        let q = 1.0 - p.delta2;
        assert!(((1.0 - q) / p.delta2 - 1.0).abs() < 1e-15);
        assert!(!threshold_is_unstable(q, &p));
        assert!(threshold_is_unstable(q - 1e-3, &p));
    }
}
