//! Finite-N instances of the spiked matrix-tensor model: generation, AMP, the Bethe free
//! entropy, the Hamiltonian and Langevin dynamics on the sphere.
//!
//! The matrix is stored as its upper triangle `i < j` and the tensor as its entries
//! `i₁ < … < i_p` in lexicographic order, or regenerated from the seed on every contraction
//! when it does not fit in memory. A channel with infinite variance carries no information and
//! is stored empty.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{powi, ModelParams};

/// Default ceiling on the bytes held by an instance.
pub const DEFAULT_INSTANCE_BUDGET: u64 = 3_000_000_000;
/// Standard deviation of the default AMP initialization (variance `1e−8`).
pub const AMP_INIT_STD: f64 = 1e-4;
/// AMP aborts once `|x̂|` exceeds this multiple of `√N`.
pub const AMP_DIVERGENCE: f64 = 10.0;

const STREAM_SPIKE: u64 = 0;
const STREAM_MATRIX: u64 = 1;
const STREAM_TENSOR: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_NOISE: u64 = 4;

/// `n choose k` as a float-free integer; saturates at `u64::MAX`.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Bytes needed for the spike, the matrix triangle and the packed tensor.
pub fn instance_bytes(n: usize, p: u32) -> u64 {
    let n = n as u64;
    8u64.saturating_mul(n.saturating_add(binomial(n, 2)).saturating_add(binomial(n, p as u64)))
}

/// One realization of the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub n: usize,
    pub params: ModelParams,
    pub seed: u64,
    /// Spike on the sphere, `|x*|² = N`.
    pub x_star: Vec<f64>,
    /// `Y_ij` for `i < j`, row by row; empty when `Δ₂ = ∞`.
    pub y: Vec<f64>,
    pub tensor: Tensor,
}

/// Storage of the order-p observation.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    /// No tensor channel (`Δₚ = ∞`).
    Empty,
    /// `T_{i₁…i_p}` for `i₁ < … < i_p` in lexicographic order.
    Packed(Vec<f64>),
    /// Same entries, redrawn from the instance seed in the same order at every use.
    Implicit { noiseless: bool },
}

/// Draws an instance; see [`generate_instance_with_budget`].
pub fn generate_instance(n: usize, params: &ModelParams, seed: u64, noiseless: bool) -> Result<Instance> {
    generate_instance_with_budget(n, params, seed, noiseless, DEFAULT_INSTANCE_BUDGET)
}

/// Like [`generate_instance`] but never stores the tensor: every contraction regenerates it
/// from the seed, trading one pass of noise generation for `O(N^p)` memory. Entries are
/// bitwise identical to the packed instance with the same seed.
pub fn generate_instance_implicit(n: usize, params: &ModelParams, seed: u64, noiseless: bool) -> Result<Instance> {
    let mut inst = generate_instance_with_budget(n, &ModelParams { deltap: f64::INFINITY, ..*params }, seed, noiseless, u64::MAX)?;
    inst.params = *params;
    if params.deltap.is_finite() {
        inst.tensor = Tensor::Implicit { noiseless };
    }
    Ok(inst)
}

/// Draws `x*` uniformly on the sphere, then `Y = x*x*ᵀ/√N + ξ` and
/// `T = √((p−1)!) x*^{⊗p} / N^{(p−1)/2} + ξ` with Gaussian noise of variance `Δ₂`, `Δₚ`.
/// The spike, matrix noise and tensor noise come from separate ChaCha8 streams of `seed`,
/// so `noiseless` changes only the noise.
pub fn generate_instance_with_budget(n: usize, params: &ModelParams, seed: u64, noiseless: bool, budget: u64) -> Result<Instance> {
    if n < 8 {
        return Err(Error::InvalidParams(format!("N = {n} must be at least 8")));
    }
    let needed = instance_bytes(n, params.p);
    if needed > budget {
        return Err(Error::MemoryBudget { needed, budget });
    }
    let x_star = sphere_point(n, &mut stream(seed, STREAM_SPIKE));
    let sqrt_n = (n as f64).sqrt();

    let mut y = Vec::new();
    if params.delta2.is_finite() {
        let sd = params.delta2.sqrt();
        let mut rng = stream(seed, STREAM_MATRIX);
        y.reserve_exact(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let noise = if noiseless { 0.0 } else { sd * rng.sample::<f64, _>(StandardNormal) };
                y.push(x_star[i] * x_star[j] / sqrt_n + noise);
            }
        }
    }

    let mut inst = Instance { n, params: *params, seed, x_star, y, tensor: Tensor::Empty };
    if params.deltap.is_finite() {
        let mut t = Vec::with_capacity(binomial(n as u64, params.p as u64) as usize);
        {
            let mut source = inst.entry_source(noiseless);
            for_each_combination(n, params.p as usize, |idx| t.push(source(idx)));
        }
        inst.tensor = Tensor::Packed(t);
    }
    Ok(inst)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Standard Gaussian vector rescaled to `|x|² = N`.
fn sphere_point(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut x);
    x
}

fn normalize(x: &mut [f64]) {
    let s = ((x.len() as f64) / dot(x, x)).sqrt();
    x.iter_mut().for_each(|v| *v *= s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `√((p−1)!) / N^{(p−1)/2}`.
fn tensor_scale(n: usize, p: u32) -> f64 {
    let fact: f64 = (1..p).map(|k| k as f64).product();
    fact.sqrt() / (n as f64).powf(0.5 * (p - 1) as f64)
}

/// Calls `f` on every `i₁ < … < i_k` below `n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(pos) = (0..k).rev().find(|&q| idx[q] < n - k + q) else {
            return;
        };
        idx[pos] += 1;
        for q in pos + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

impl Instance {
    /// Draws tensor entries in lexicographic order from the tensor stream of the seed.
    fn entry_source(&self, noiseless: bool) -> impl FnMut(&[usize]) -> f64 + '_ {
        let sd = self.params.deltap.sqrt();
        let scale = tensor_scale(self.n, self.params.p);
        let mut rng = stream(self.seed, STREAM_TENSOR);
        move |idx: &[usize]| {
            let spike: f64 = idx.iter().map(|&i| self.x_star[i]).product();
            let noise = if noiseless { 0.0 } else { sd * rng.sample::<f64, _>(StandardNormal) };
            scale * spike + noise
        }
    }

    /// Number of stored tensor entries (zero unless packed).
    pub fn packed_len(&self) -> usize {
        match &self.tensor {
            Tensor::Packed(t) => t.len(),
            _ => 0,
        }
    }

    /// `Y_ij` for `i ≠ j` (symmetric), zero on the diagonal or when the channel is empty.
    pub fn y_entry(&self, i: usize, j: usize) -> f64 {
        if i == j || self.y.is_empty() {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.y[a * (2 * self.n - a - 1) / 2 + (b - a - 1)]
    }

    /// Tensor entry for any ordering of distinct indices; zero with repeated indices.
    /// Implicit storage replays the stream up to the entry.
    pub fn t_entry(&self, indices: &[usize]) -> f64 {
        let p = self.params.p as usize;
        assert_eq!(indices.len(), p, "expected {p} indices");
        let mut c = indices.to_vec();
        c.sort_unstable();
        if c.windows(2).any(|w| w[0] == w[1]) {
            return 0.0;
        }
        let n = self.n as u64;
        let total = binomial(n, p as u64);
        let before: u64 = c.iter().enumerate().map(|(k, &ck)| binomial(n - 1 - ck as u64, (p - k) as u64)).sum();
        let rank = total - 1 - before;
        match &self.tensor {
            Tensor::Empty => 0.0,
            Tensor::Packed(t) => t[rank as usize],
            &Tensor::Implicit { noiseless } => {
                let mut source = self.entry_source(noiseless);
                let mut k = 0;
                let mut found = 0.0;
                for_each_combination(self.n, p, |idx| {
                    if k <= rank {
                        let v = source(idx);
                        if k == rank {
                            found = v;
                        }
                    }
                    k += 1;
                });
                found
            }
        }
    }

    /// `Σ_{j≠i} Y_ij x_j` for every `i`.
    fn matrix_apply(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.y.is_empty() {
            return;
        }
        let n = self.n;
        let mut base = 0;
        for i in 0..n {
            let row = &self.y[base..base + n - i - 1];
            let mut acc = 0.0;
            for (k, &yij) in row.iter().enumerate() {
                let j = i + 1 + k;
                acc += yij * x[j];
                out[j] += yij * x[i];
            }
            out[i] += acc;
            base += n - i - 1;
        }
    }

    /// `V = Σ_{i₁<…<i_p} T x_{i₁}⋯x_{i_p}`; `grad` receives `∂V/∂x`.
    fn tensor_form(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let n = self.n;
        let p = self.params.p as usize;
        match &self.tensor {
            Tensor::Empty => 0.0,
            Tensor::Packed(t) if p == 3 => {
                let mut value = 0.0;
                let mut pos = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        let len = n - j - 1;
                        value += cubic_row(&t[pos..pos + len], i, j, x, grad);
                        pos += len;
                    }
                }
                value
            }
            Tensor::Packed(t) => {
                let mut pos = 0;
                general_form(n, p, x, grad, |_| {
                    pos += 1;
                    t[pos - 1]
                })
            }
            &Tensor::Implicit { noiseless } if p == 3 => {
                let mut source = self.entry_source(noiseless);
                let mut row = Vec::with_capacity(n);
                let mut value = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        row.clear();
                        row.extend((j + 1..n).map(|k| source(&[i, j, k])));
                        value += cubic_row(&row, i, j, x, grad);
                    }
                }
                value
            }
            &Tensor::Implicit { noiseless } => general_form(n, p, x, grad, self.entry_source(noiseless)),
        }
    }

    /// `H/N` and `∇H` at `x`, without checking the sphere.
    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64], scratch: &mut [f64]) -> f64 {
        let n = self.n as f64;
        let c2 = 1.0 / (self.params.delta2 * n.sqrt());
        let cp = tensor_scale(self.n, self.params.p) / self.params.deltap;
        self.matrix_apply(x, scratch);
        let v = self.tensor_form(x, grad);
        // Σ_{i<j} Y_ij x_i x_j = ½ xᵀ(Yx).
        let quad = 0.5 * dot(x, scratch);
        for (g, &s) in grad.iter_mut().zip(scratch.iter()) {
            *g = -c2 * s - cp * *g;
        }
        (-c2 * quad - cp * v) / n
    }

    /// Bytes written by [`Instance::write`].
    pub fn serialized_len(&self) -> usize {
        let nt = match self.tensor {
            Tensor::Empty => 0,
            _ => binomial(self.n as u64, self.params.p as u64) as usize,
        };
        8 * (5 + self.x_star.len() + self.y.len() + nt)
    }

    /// Flat little-endian container: `N, p, Δ₂, Δₚ, seed`, then `x*`, the matrix triangle and
    /// the packed tensor as 64-bit floats. Implicit tensors are streamed out entry by entry.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.params.p as u64).to_le_bytes())?;
        w.write_all(&self.params.delta2.to_le_bytes())?;
        w.write_all(&self.params.deltap.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in self.x_star.iter().chain(&self.y) {
            w.write_all(&v.to_le_bytes())?;
        }
        match &self.tensor {
            Tensor::Empty => {}
            Tensor::Packed(t) => {
                for v in t {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            &Tensor::Implicit { noiseless } => {
                let mut source = self.entry_source(noiseless);
                let mut res = Ok(());
                for_each_combination(self.n, self.params.p as usize, |idx| {
                    if res.is_ok() {
                        res = w.write_all(&source(idx).to_le_bytes());
                    }
                });
                res?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a container written by [`Instance::write`]; the tensor is loaded packed and must
    /// fit in `budget` bytes.
    pub fn read(path: &Path, budget: u64) -> Result<Instance> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let mut word = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let p = u64::from_le_bytes(next(&mut r)?);
        let delta2 = f64::from_le_bytes(next(&mut r)?);
        let deltap = f64::from_le_bytes(next(&mut r)?);
        let seed = u64::from_le_bytes(next(&mut r)?);
        let p = u32::try_from(p).map_err(|_| Error::Io(format!("tensor order {p} out of range")))?;
        let params = ModelParams::new(p, delta2, deltap)?;
        let ny = if delta2.is_finite() { n * (n - 1) / 2 } else { 0 };
        let nt = if deltap.is_finite() { binomial(n as u64, p as u64) as usize } else { 0 };
        let expected = 8 * (5 + n + ny + nt) as u64;
        if len != expected {
            return Err(Error::Io(format!("instance file has {len} bytes, header implies {expected}")));
        }
        if len > budget {
            return Err(Error::MemoryBudget { needed: len, budget });
        }
        let mut floats =
            |count: usize, r: &mut BufReader<File>| -> Result<Vec<f64>> { (0..count).map(|_| Ok(f64::from_le_bytes(next(r)?))).collect() };
        let x_star = floats(n, &mut r)?;
        let y = floats(ny, &mut r)?;
        let tensor = if deltap.is_finite() { Tensor::Packed(floats(nt, &mut r)?) } else { Tensor::Empty };
        Ok(Instance { n, params, seed, x_star, y, tensor })
    }
}

/// Adds the contributions of `T_{ijk}`, `k > j`, to `grad`; returns their part of the form.
#[inline]
fn cubic_row(row: &[f64], i: usize, j: usize, x: &[f64], grad: &mut [f64]) -> f64 {
    let xij = x[i] * x[j];
    let tail = &x[j + 1..];
    let mut s = 0.0;
    for ((&tv, &xk), g) in row.iter().zip(tail).zip(&mut grad[j + 1..]) {
        s += tv * xk;
        *g += tv * xij;
    }
    grad[i] += x[j] * s;
    grad[j] += x[i] * s;
    xij * s
}

/// Any order `p`, entries supplied in lexicographic order.
fn general_form(n: usize, p: usize, x: &[f64], grad: &mut [f64], mut entry: impl FnMut(&[usize]) -> f64) -> f64 {
    let mut value = 0.0;
    let mut prefix = vec![1.0; p + 1];
    let mut suffix = vec![1.0; p + 1];
    for_each_combination(n, p, |idx| {
        let tv = entry(idx);
        for q in 0..p {
            prefix[q + 1] = prefix[q] * x[idx[q]];
        }
        for q in (0..p).rev() {
            suffix[q] = suffix[q + 1] * x[idx[q]];
        }
        value += tv * prefix[p];
        for q in 0..p {
            grad[idx[q]] += tv * prefix[q] * suffix[q + 1];
        }
    });
    value
}

/// Energy density `H/N` of a configuration on the sphere `|x|² = N`, with
/// `H = −(1/(Δ₂√N)) Σ_{i<j} Y_ij x_i x_j − (√((p−1)!)/(Δₚ N^{(p−1)/2})) Σ_{i₁<…<i_p} T x_{i₁}⋯x_{i_p}`.
pub fn hamiltonian(inst: &Instance, x: &[f64]) -> Result<f64> {
    check_sphere(inst, x)?;
    let mut grad = vec![0.0; inst.n];
    let mut scratch = vec![0.0; inst.n];
    Ok(inst.energy_and_gradient(x, &mut grad, &mut scratch))
}

fn check_sphere(inst: &Instance, x: &[f64]) -> Result<()> {
    if x.len() != inst.n {
        return Err(Error::Domain(format!("configuration has {} entries, N = {}", x.len(), inst.n)));
    }
    let r = dot(x, x) / inst.n as f64;
    if (r - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("|x|²/N = {r} is off the sphere")));
    }
    Ok(())
}

/// Messages and estimates after an AMP iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AMPState {
    pub xhat: Vec<f64>,
    pub xhat_prev: Vec<f64>,
    /// `(1/N) Σ σ_i`; every `σ_i = 1/(1 + A)` for the Gaussian prior.
    pub sigma: f64,
    pub a2: f64,
    pub ap: f64,
    pub b2: Vec<f64>,
    pub bp: Vec<f64>,
}

/// Overlaps `m̂_t = x̂ᵗ·x*/N` for `t = 0..=iters` and the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpRun {
    pub overlaps: Vec<f64>,
    pub state: AMPState,
}

/// Default AMP start: i.i.d. `N(0, 1e−8)` entries.
pub fn amp_default_init(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, STREAM_INIT);
    (0..n).map(|_| AMP_INIT_STD * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// AMP start on the Nishimori line: `m₀ x* + √(m₀(1 − m₀)) z`, so that overlap and
/// self-overlap both equal `m₀` up to `O(N^{−1/2})`.
pub fn amp_nishimori_init(inst: &Instance, m0: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&m0) {
        return Err(Error::Domain(format!("initial overlap {m0} outside [0, 1]")));
    }
    let mut rng = stream(seed, STREAM_INIT);
    let s = (m0 * (1.0 - m0)).sqrt();
    Ok(inst.x_star.iter().map(|&v| m0 * v + s * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Runs `iters` AMP iterations with the Onsager terms of both channels and the Gaussian-prior
/// denoiser `f(A, B) = B/(1 + A)`. The first iteration has no Onsager term.
pub fn amp_run(inst: &Instance, iters: usize, init: &[f64]) -> Result<AmpRun> {
    let n = inst.n;
    if init.len() != n {
        return Err(Error::Domain(format!("initial vector has {} entries, N = {n}", init.len())));
    }
    if iters == 0 {
        return Err(Error::Domain("AMP needs at least one iteration".into()));
    }
    let nf = n as f64;
    let params = &inst.params;
    let p = params.p;
    let (inv2, invp) = (1.0 / params.delta2, 1.0 / params.deltap);
    let c2 = inv2 / nf.sqrt();
    let cp = tensor_scale(n, p) * invp;
    let mut state =
        AMPState { xhat: init.to_vec(), xhat_prev: vec![0.0; n], sigma: 1.0, a2: 0.0, ap: 0.0, b2: vec![0.0; n], bp: vec![0.0; n] };
    let mut overlaps = vec![dot(init, &inst.x_star) / nf];
    let mut grad = vec![0.0; n];
    for it in 0..iters {
        let x = &state.xhat;
        let q = dot(x, x) / nf;
        let cross = dot(x, &state.xhat_prev) / nf;
        inst.matrix_apply(x, &mut state.b2);
        inst.tensor_form(x, &mut grad);
        let ons2 = inv2 * state.sigma;
        let onsp = (p - 1) as f64 * invp * state.sigma * powi(cross, p - 2);
        for i in 0..n {
            state.b2[i] = c2 * state.b2[i] - ons2 * state.xhat_prev[i];
            state.bp[i] = cp * grad[i] - onsp * state.xhat_prev[i];
        }
        state.a2 = inv2 * q;
        state.ap = invp * powi(q, p - 1);
        let a = state.a2 + state.ap;
        let next: Vec<f64> = state.b2.iter().zip(&state.bp).map(|(b2, bp)| (b2 + bp) / (1.0 + a)).collect();
        let norm = dot(&next, &next).sqrt();
        if !norm.is_finite() || norm > AMP_DIVERGENCE * nf.sqrt() {
            return Err(Error::Numerical { time: (it + 1) as f64, reason: format!("AMP diverged, |x̂| = {norm:e}") });
        }
        state.xhat_prev = std::mem::replace(&mut state.xhat, next);
        state.sigma = 1.0 / (1.0 + a);
        overlaps.push(dot(&state.xhat, &inst.x_star) / nf);
    }
    Ok(AmpRun { overlaps, state })
}

/// `log 𝒵(A, B)` for the standard Gaussian prior.
pub fn log_z_gauss(a: f64, b: f64) -> f64 {
    -0.5 * (1.0 + a).ln() + b * b / (2.0 * (1.0 + a))
}

/// Bethe free entropy density of an AMP state, using its messages `A`, `B` and estimates `x̂`.
pub fn bethe_free_entropy(state: &AMPState, inst: &Instance) -> f64 {
    let nf = inst.n as f64;
    let params = &inst.params;
    let pf = params.pf();
    let a = state.a2 + state.ap;
    let q = dot(&state.xhat, &state.xhat) / nf;
    let s = state.sigma;
    let mut log_z = 0.0;
    let mut tp = 0.0;
    let mut t2 = 0.0;
    for i in 0..inst.n {
        let x = state.xhat[i];
        log_z += log_z_gauss(a, state.b2[i] + state.bp[i]);
        tp += -state.bp[i] * x + state.ap * (x * x + s) / 2.0;
        t2 += -state.b2[i] * x + state.a2 * (x * x + s) / 2.0;
    }
    log_z / nf
        + (pf - 1.0) / pf * tp / nf
        + (pf - 1.0) / (2.0 * pf * params.deltap) * powi(q, params.p - 1) * s
        + t2 / (2.0 * nf)
        + q * s / (4.0 * params.delta2)
}

/// Settings of a finite-N Langevin run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    /// Overlap given to the random start by projection; `None` keeps the uniform draw.
    pub cbar0: Option<f64>,
    /// Noise temperature; `1` samples the posterior, `0` is gradient descent on the sphere.
    pub temperature: f64,
    /// Record every this many steps (the first and last steps are always recorded).
    pub record_every: usize,
    /// Times at which the full configuration is kept.
    pub snapshot_times: Vec<f64>,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self { dt: 1e-2, t_max: 10.0, seed: 0, cbar0: None, temperature: 1.0, record_every: 1, snapshot_times: Vec::new() }
    }
}

/// Observables recorded along a Langevin run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinSample {
    pub t: f64,
    pub overlap: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinRun {
    pub samples: Vec<LangevinSample>,
    /// `(t, x(t))` at the grid times nearest to the requested snapshot times.
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

/// Euler–Maruyama integration of `ẋ = −μx − ∇H + η`, `⟨η_i η_j⟩ = 2T δ_ij δ(t − t′)`, with
/// the sphere enforced by rescaling to `|x|² = N` after every step.
pub fn langevin_run(inst: &Instance, config: &LangevinConfig) -> Result<LangevinRun> {
    let LangevinConfig { dt, t_max, seed, cbar0, temperature, record_every, ref snapshot_times } = *config;
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(Error::Domain(format!("time step {dt} must lie in (0, 1e-2]")));
    }
    if !(t_max >= 0.0) || !(temperature >= 0.0) || record_every == 0 {
        return Err(Error::Domain("t_max and temperature must be non-negative, record_every positive".into()));
    }
    let n = inst.n;
    let nf = n as f64;
    let mut rng = stream(seed, STREAM_INIT);
    let mut x = sphere_point(n, &mut rng);
    if let Some(c) = cbar0 {
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("initial overlap {c} outside [−1, 1]")));
        }
        let proj = dot(&x, &inst.x_star) / nf;
        x.iter_mut().zip(&inst.x_star).for_each(|(v, s)| *v -= proj * s);
        normalize(&mut x);
        let perp = (1.0 - c * c).sqrt();
        x.iter_mut().zip(&inst.x_star).for_each(|(v, s)| *v = c * s + perp * *v);
        normalize(&mut x);
    }
    let mut noise = stream(seed, STREAM_NOISE);
    let amp = (2.0 * temperature * dt).sqrt();
    let steps = (t_max / dt).round() as usize;
    let snap_steps: Vec<usize> = snapshot_times.iter().map(|&t| ((t / dt).round() as usize).min(steps)).collect();
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut samples = Vec::with_capacity(steps / record_every + 2);
    let mut snapshots = Vec::new();
    for step in 0..=steps {
        let t = step as f64 * dt;
        let energy = inst.energy_and_gradient(&x, &mut grad, &mut scratch);
        if !energy.is_finite() {
            return Err(Error::Numerical { time: t, reason: "non-finite energy".into() });
        }
        if step % record_every == 0 || step == steps {
            samples.push(LangevinSample { t, overlap: dot(&x, &inst.x_star) / nf, energy });
        }
        for _ in snap_steps.iter().filter(|&&s| s == step) {
            snapshots.push((t, x.clone()));
        }
        if step == steps {
            break;
        }
        for (v, g) in x.iter_mut().zip(&grad) {
            let eta: f64 = if amp > 0.0 { noise.sample(StandardNormal) } else { 0.0 };
            *v += -dt * g + amp * eta;
        }
        let r = dot(&x, &x);
        if !r.is_finite() || r == 0.0 {
            return Err(Error::Numerical { time: t + dt, reason: "configuration left the sphere".into() });
        }
        normalize(&mut x);
    }
    Ok(LangevinRun { samples, snapshots })
}
