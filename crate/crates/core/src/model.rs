//! Model parameters and the mixed 2+p covariance kernel.
//!
//! The kernel is `Q(x) = x²/(2Δ₂) + x^p/(pΔₚ)`. An infinite variance switches the
//! corresponding channel off, which is how the free spherical diffusion limit is
//! expressed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor order, channel variances and inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p: u32,
    pub delta2: f64,
    pub deltap: f64,
    pub beta: f64,
}

impl ModelParams {
    /// Parameters at the Bayes-optimal temperature `β = 1`.
    pub fn new(p: u32, delta2: f64, deltap: f64) -> Result<Self> {
        Self::with_beta(p, delta2, deltap, 1.0)
    }

    pub fn with_beta(p: u32, delta2: f64, deltap: f64, beta: f64) -> Result<Self> {
        if p < 3 {
            return Err(Error::InvalidParams(format!("tensor order p = {p} must be at least 3")));
        }
        // NaN fails every comparison, so `!(x > 0)` also rejects it.
        if !(delta2 > 0.0) {
            return Err(Error::InvalidParams(format!("delta2 = {delta2} must be positive")));
        }
        if !(deltap > 0.0) {
            return Err(Error::InvalidParams(format!("deltap = {deltap} must be positive")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParams(format!("beta = {beta} must be positive and finite")));
        }
        Ok(Self { p, delta2, deltap, beta })
    }

    pub fn pf(&self) -> f64 {
        self.p as f64
    }

    pub fn kernel(&self) -> Kernel {
        Kernel::new(self)
    }

    /// The two channels `(k = 2, Δ₂)` and `(k = p, Δₚ)`.
    pub fn channels(&self) -> [Channel; 2] {
        [Channel::new(2, self.delta2), Channel::new(self.p, self.deltap)]
    }
}

/// Integer power that keeps `0^0 = 1`, which the kernels rely on for `p = 3`.
#[inline]
pub fn powi(x: f64, n: u32) -> f64 {
    x.powi(n as i32)
}

/// One channel `k` with variance `Δ_k`, kernel contribution `x^k/(kΔ_k)`.
///
/// The per-channel functions follow the `f_k(x) = x^k/2` convention with weight
/// `r_k = 2/(kΔ_k)`, so that `r_k f_k(x) = x^k/(kΔ_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub k: u32,
    pub delta: f64,
    inv_delta: f64,
}

impl Channel {
    pub fn new(k: u32, delta: f64) -> Self {
        Self { k, delta, inv_delta: 1.0 / delta }
    }

    pub fn inv_delta(&self) -> f64 {
        self.inv_delta
    }

    /// Weight `r_k = 2/(kΔ_k)`.
    pub fn weight(&self) -> f64 {
        2.0 * self.inv_delta / self.k as f64
    }

    pub fn f(&self, x: f64) -> f64 {
        0.5 * powi(x, self.k)
    }

    pub fn f1(&self, x: f64) -> f64 {
        0.5 * self.k as f64 * powi(x, self.k - 1)
    }

    pub fn f2(&self, x: f64) -> f64 {
        0.5 * (self.k * (self.k - 1)) as f64 * powi(x, self.k - 2)
    }

    /// `x^k/(kΔ_k)`
    pub fn q(&self, x: f64) -> f64 {
        self.weight() * self.f(x)
    }

    /// `x^{k-1}/Δ_k`
    pub fn q1(&self, x: f64) -> f64 {
        self.inv_delta * powi(x, self.k - 1)
    }

    /// `(k-1) x^{k-2}/Δ_k`
    pub fn q2(&self, x: f64) -> f64 {
        self.inv_delta * (self.k - 1) as f64 * powi(x, self.k - 2)
    }
}

/// Evaluator for `Q`, `Q′`, `Q″` of a fixed parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    p: u32,
    inv_d2: f64,
    inv_dp: f64,
}

impl Kernel {
    pub fn new(params: &ModelParams) -> Self {
        Self { p: params.p, inv_d2: 1.0 / params.delta2, inv_dp: 1.0 / params.deltap }
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn inv_delta2(&self) -> f64 {
        self.inv_d2
    }

    pub fn inv_deltap(&self) -> f64 {
        self.inv_dp
    }

    /// `Q(x) = x²/(2Δ₂) + x^p/(pΔₚ)`
    #[inline]
    pub fn q(&self, x: f64) -> f64 {
        0.5 * x * x * self.inv_d2 + powi(x, self.p) * self.inv_dp / self.p as f64
    }

    /// `Q′(x) = x/Δ₂ + x^{p-1}/Δₚ`
    #[inline]
    pub fn q1(&self, x: f64) -> f64 {
        x * self.inv_d2 + powi(x, self.p - 1) * self.inv_dp
    }

    /// `Q″(x) = 1/Δ₂ + (p-1)x^{p-2}/Δₚ`
    #[inline]
    pub fn q2(&self, x: f64) -> f64 {
        self.inv_d2 + (self.p - 1) as f64 * powi(x, self.p - 2) * self.inv_dp
    }

    /// `x Q′(x) = x²/Δ₂ + x^p/Δₚ`
    #[inline]
    pub fn xq1(&self, x: f64) -> f64 {
        x * self.q1(x)
    }

    /// Derivative of `x Q′(x)`: `2x/Δ₂ + p x^{p-1}/Δₚ`.
    #[inline]
    pub fn xq1_prime(&self, x: f64) -> f64 {
        2.0 * x * self.inv_d2 + self.p as f64 * powi(x, self.p - 1) * self.inv_dp
    }
}

/// Evaluates `Q`, `Q′` or `Q″` at `x` depending on `order`.
pub fn eval_kernel(x: f64, params: &ModelParams, order: u8) -> Result<f64> {
    let k = params.kernel();
    match order {
        0 => Ok(k.q(x)),
        1 => Ok(k.q1(x)),
        2 => Ok(k.q2(x)),
        _ => Err(Error::Domain(format!("kernel derivative order {order} is not in {{0, 1, 2}}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_params() {
        assert!(ModelParams::new(2, 1.0, 1.0).is_err());
        assert!(ModelParams::new(3, 0.0, 1.0).is_err());
        assert!(ModelParams::new(3, 1.0, -1.0).is_err());
        assert!(ModelParams::new(3, f64::NAN, 1.0).is_err());
        assert!(ModelParams::with_beta(3, 1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(3, f64::INFINITY, f64::INFINITY).is_ok());
    }

    #[test]
    fn kernel_values() {
        let p = ModelParams::new(3, 2.0, 0.3).unwrap();
        assert_eq!(eval_kernel(0.0, &p, 0).unwrap(), 0.0);
        assert!((eval_kernel(1.0, &p, 0).unwrap() - 1.3611111111111112).abs() < 1e-15);
        assert!((eval_kernel(1.0, &p, 1).unwrap() - (0.5 + 1.0 / 0.3)).abs() < 1e-15);
        assert!(eval_kernel(0.5, &p, 3).is_err());
    }

    #[test]
    fn channels_sum_to_kernel() {
        let p = ModelParams::new(4, 0.7, 1.3).unwrap();
        let k = p.kernel();
        for &x in &[-0.8, -0.1, 0.0, 0.3, 0.9] {
            let [a, b] = p.channels();
            assert!((a.q(x) + b.q(x) - k.q(x)).abs() < 1e-15);
            assert!((a.q1(x) + b.q1(x) - k.q1(x)).abs() < 1e-15);
            assert!((a.q2(x) + b.q2(x) - k.q2(x)).abs() < 1e-15);
            assert!((a.weight() * a.f1(x) - a.q1(x)).abs() < 1e-15);
            assert!((b.weight() * b.f2(x) - b.q2(x)).abs() < 1e-14);
        }
    }

    #[test]
    fn infinite_variance_switches_channel_off() {
        let p = ModelParams::new(3, f64::INFINITY, f64::INFINITY).unwrap();
        let k = p.kernel();
        assert_eq!(k.q(0.7), 0.0);
        assert_eq!(k.q1(0.7), 0.0);
        assert_eq!(k.q2(0.7), 0.0);
    }
}
