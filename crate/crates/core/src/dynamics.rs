//! Subordinator paths, the drift `a` and two pathwise solvers for
//! `dPsi_t = a(t, Psi_{t-}) dt + b(t, Psi_{t-}) dM_t`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::codebook::{integrate_piecewise_linear, CodebookSurface, GridSpec, Parametrisation};
use crate::error::{Error, Result};
use crate::levy::{CharExponent, JointExponent, JumpSpec};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const TIME_EPS: f64 = 1e-12;

/// Jumps below this size are replaced by their mean when sampling gamma subordinators.
pub const GAMMA_TRUNCATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubordinatorPath {
    pub horizon: f64,
    pub drift_rate: f64,
    /// `(time, size)`, strictly increasing times in `(0, horizon]`.
    pub jumps: Vec<(f64, f64)>,
}

impl SubordinatorPath {
    pub fn new(horizon: f64, drift_rate: f64, mut jumps: Vec<(f64, f64)>) -> Result<Self> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(Error::InvalidSpec(format!("horizon must be >= 0, got {horizon}")));
        }
        if !(drift_rate.is_finite() && drift_rate >= 0.0) {
            return Err(Error::InvalidSpec(format!("drift rate must be >= 0, got {drift_rate}")));
        }
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in jumps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidSpec(format!("duplicate jump time {}", w[0].0)));
            }
        }
        for &(t, x) in &jumps {
            if !(t > 0.0 && t <= horizon) {
                return Err(Error::InvalidSpec(format!("jump time {t} outside (0, {horizon}]")));
            }
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidSpec(format!("jump size must be > 0, got {x}")));
            }
        }
        Ok(Self { horizon, drift_rate, jumps })
    }

    /// A path without jumps or drift.
    pub fn constant(horizon: f64) -> Self {
        Self { horizon, drift_rate: 0.0, jumps: Vec::new() }
    }

    /// `M_t`.
    pub fn value_at(&self, t: f64) -> f64 {
        self.drift_rate * t + self.jumps.iter().take_while(|j| j.0 <= t).map(|j| j.1).sum::<f64>()
    }

    /// Jumps with times in `(a, b]`.
    pub fn jumps_in(&self, a: f64, b: f64) -> impl Iterator<Item = &(f64, f64)> {
        self.jumps.iter().filter(move |j| j.0 > a && j.0 <= b)
    }

    /// Jump of size `x` at `t`, if any.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        self.jumps.iter().find(|j| (j.0 - t).abs() <= TIME_EPS).map(|j| j.1)
    }

    /// The same path with every jump scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            horizon: self.horizon,
            drift_rate: self.drift_rate,
            jumps: self.jumps.iter().map(|&(t, x)| (t, x * factor)).collect(),
        }
    }
}

/// Samples a subordinator path on `[0, horizon]` from `seed`.
pub fn simulate_subordinator(jumps: &JumpSpec, horizon: f64, seed: u64) -> Result<SubordinatorPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_subordinator_with(jumps, horizon, &mut rng)
}

/// As [`simulate_subordinator`], drawing from a caller-supplied generator.
pub fn simulate_subordinator_with<R: Rng + ?Sized>(jumps: &JumpSpec, horizon: f64, rng: &mut R) -> Result<SubordinatorPath> {
    jumps.validate()?;
    if !jumps.is_positive() {
        return Err(Error::InvalidSpec("subordinator paths need positive jumps".into()));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::InvalidSpec(format!("horizon must be >= 0, got {horizon}")));
    }
    let (intensity, drift_rate) = match jumps {
        JumpSpec::None => (0.0, 0.0),
        JumpSpec::CompoundPoissonExp { rate, .. } | JumpSpec::CompoundPoissonDiscrete { rate, .. } => (*rate, 0.0),
        JumpSpec::Gamma { shape, rate } => (
            shape * exp_integral_e1(rate * GAMMA_TRUNCATION),
            shape * (-(rate * GAMMA_TRUNCATION)).exp_m1().abs() / rate,
        ),
    };
    let mean = intensity * horizon;
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|e| Error::Internal(e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = horizon * (1.0 - rng.random::<f64>());
        let x = match jumps {
            JumpSpec::CompoundPoissonExp { theta, .. } => {
                Exp::new(*theta).map_err(|e| Error::Internal(e.to_string()))?.sample(rng)
            }
            JumpSpec::CompoundPoissonDiscrete { atoms, .. } => {
                let mut r = rng.random::<f64>();
                let mut pick = atoms[atoms.len() - 1].0;
                for &(size, p) in atoms {
                    if r < p {
                        pick = size;
                        break;
                    }
                    r -= p;
                }
                pick
            }
            JumpSpec::Gamma { rate, .. } => sample_gamma_jump(*rate, rng) / rate,
            JumpSpec::None => unreachable!(),
        };
        out.push((t, x));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.dedup_by(|b, a| {
        // merge coincident times (probability zero)
        if b.0 == a.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    SubordinatorPath::new(horizon, drift_rate, out)
}

/// Draws `y` from the density proportional to `e^{-y} / y` on `(rate ε, ∞)`.
fn sample_gamma_jump<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let a = rate * GAMMA_TRUNCATION;
    let split = a.max(1.0);
    let w_low = if a < 1.0 { exp_integral_e1(a) - exp_integral_e1(1.0) } else { 0.0 };
    let w_high = exp_integral_e1(split);
    loop {
        if rng.random::<f64>() * (w_low + w_high) < w_low {
            // proposal ∝ 1/y on (a, 1), accept with e^{-y}
            let y = a * (1.0 / a).powf(rng.random::<f64>());
            if rng.random::<f64>() < (-y).exp() {
                return y;
            }
        } else {
            // proposal ∝ e^{-y} on (split, ∞), accept with split / y
            let y = split - (1.0 - rng.random::<f64>()).ln();
            if rng.random::<f64>() < split / y {
                return y;
            }
        }
    }
}

/// Exponential integral `E_1(x) = ∫_x^∞ e^{-t} / t dt`, `x > 0`.
pub fn exp_integral_e1(x: f64) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        -EULER - x.ln() + sum
    } else {
        // modified Lentz continued fraction
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

/// `(Re z ∧ 0) + i Im z`.
pub fn truncate_b(z: Complex64) -> Complex64 {
    Complex64::new(z.re.min(0.0), z.im)
}

/// State-dependent kernel: returns `b(t, psi)(T_j, u_k)` on the full grid, row-major.
pub type StateKernelFn = dyn Fn(f64, &CodebookSurface) -> Result<Vec<Complex64>> + Send + Sync;

/// Volatility kernel `b(t, psi)(T, u)`, zero for `T < t`.
#[derive(Clone)]
pub enum VolKernel {
    Zero,
    /// `b(t)(T, u) = phi(u) e^{-lambda (T - t)}`.
    DeterministicExp { phi: CharExponent, lambda: f64 },
    /// `b(t)(T, u) = table(T - t, u)`, linear in the first argument.
    DeterministicTable(CodebookSurface),
    StateDependent(Arc<StateKernelFn>),
}

impl fmt::Debug for VolKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolKernel::Zero => write!(f, "Zero"),
            VolKernel::DeterministicExp { phi, lambda } => {
                f.debug_struct("DeterministicExp").field("phi", phi).field("lambda", lambda).finish()
            }
            VolKernel::DeterministicTable(t) => f.debug_tuple("DeterministicTable").field(t.grid()).finish(),
            VolKernel::StateDependent(_) => write!(f, "StateDependent(..)"),
        }
    }
}

impl VolKernel {
    pub fn deterministic_exp(phi: CharExponent, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidSpec(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(VolKernel::DeterministicExp { phi, lambda })
    }

    /// Table kernel; rows are times to maturity starting at 0.
    pub fn table(table: CodebookSurface) -> Result<Self> {
        if table.grid().maturity_start != 0.0 {
            return Err(Error::InvalidSpec("kernel table rows must start at time to maturity 0".into()));
        }
        Ok(VolKernel::DeterministicTable(table))
    }

    pub fn state_dependent<F>(f: F) -> Self
    where
        F: Fn(f64, &CodebookSurface) -> Result<Vec<Complex64>> + Send + Sync + 'static,
    {
        VolKernel::StateDependent(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VolKernel::Zero)
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, VolKernel::StateDependent(_))
    }

    fn table_value(table: &CodebookSurface, x: f64, u: f64) -> Result<Complex64> {
        let g = table.grid();
        if x > g.last_maturity() + TIME_EPS {
            return Err(Error::OutOfRange { what: "time to maturity in kernel table", value: x, min: 0.0, max: g.last_maturity() });
        }
        let k = g.frequency_index(u)?;
        Ok(table.interpolate(x.max(0.0), k))
    }

    /// `b(t, psi)(T_j, u_k)` on `grid` (row-major).
    pub fn values(&self, t: f64, psi: &CodebookSurface) -> Result<Vec<Complex64>> {
        let g = psi.grid();
        let nu = g.n_frequencies();
        let mut out = vec![ZERO; g.n_maturities() * nu];
        match self {
            VolKernel::Zero => {}
            VolKernel::DeterministicExp { phi, lambda } => {
                let ph: Vec<Complex64> = (0..nu).map(|k| phi.eval_real(g.frequency(k))).collect();
                for j in 0..g.n_maturities() {
                    let tj = g.maturity(j);
                    if tj >= t - TIME_EPS {
                        let e = (-lambda * (tj - t).max(0.0)).exp();
                        for k in 0..nu {
                            out[j * nu + k] = ph[k] * e;
                        }
                    }
                }
            }
            VolKernel::DeterministicTable(table) => {
                for j in 0..g.n_maturities() {
                    let tj = g.maturity(j);
                    if tj >= t - TIME_EPS {
                        for k in 0..nu {
                            out[j * nu + k] = Self::table_value(table, tj - t, g.frequency(k))?;
                        }
                    }
                }
            }
            VolKernel::StateDependent(f) => {
                let v = f(t, psi)?;
                if v.len() != out.len() {
                    return Err(Error::InvalidSpec(format!("kernel returned {} values, expected {}", v.len(), out.len())));
                }
                for j in 0..g.n_maturities() {
                    if g.maturity(j) >= t - TIME_EPS {
                        out[j * nu..(j + 1) * nu].copy_from_slice(&v[j * nu..(j + 1) * nu]);
                    }
                }
            }
        }
        let z = g.zero_column();
        for j in 0..g.n_maturities() {
            out[j * nu + z] = ZERO;
        }
        Ok(out)
    }

    /// `(b̃(t)(T_j, u_k), ∫_t^{T_j} b̃(t)(r, u_k) dr)` for truncated `b̃`.
    fn truncated_with_integral(&self, t: f64, psi: &CodebookSurface) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let g = *psi.grid();
        let nu = g.n_frequencies();
        let n = g.n_maturities() * nu;
        let mut bt = self.values(t, psi)?;
        bt.iter_mut().for_each(|v| *v = truncate_b(*v));
        let mut integral = vec![ZERO; n];
        match self {
            VolKernel::Zero => {}
            VolKernel::DeterministicExp { phi, lambda } => {
                let ph: Vec<Complex64> = (0..nu).map(|k| truncate_b(phi.eval_real(g.frequency(k)))).collect();
                for j in 0..g.n_maturities() {
                    let tau = g.maturity(j) - t;
                    if tau > 0.0 {
                        let w = -(-lambda * tau).exp_m1() / lambda;
                        for k in 0..nu {
                            integral[j * nu + k] = ph[k] * w;
                        }
                    }
                }
            }
            VolKernel::DeterministicTable(table) => {
                let tg = *table.grid();
                for j in 0..g.n_maturities() {
                    let tau = g.maturity(j) - t;
                    if tau > 0.0 {
                        for k in 0..nu {
                            let kt = tg.frequency_index(g.frequency(k))?;
                            integral[j * nu + k] =
                                integrate_piecewise_linear(&tg, 0.0, tau, |r| truncate_b(table.get(r, kt)));
                        }
                    }
                }
            }
            VolKernel::StateDependent(_) => {
                // trapezoid on the grid, with b̃ at r = t taken from the first node at or after t
                for k in 0..nu {
                    let mut acc = ZERO;
                    let mut prev: Option<(f64, Complex64)> = None;
                    for j in 0..g.n_maturities() {
                        let tj = g.maturity(j);
                        if tj < t - TIME_EPS {
                            continue;
                        }
                        let v = bt[j * nu + k];
                        let (r0, v0) = prev.unwrap_or((t, v));
                        acc += 0.5 * (tj - r0) * (v0 + v);
                        integral[j * nu + k] = acc;
                        prev = Some((tj, v));
                    }
                }
            }
        }
        Ok((bt, integral))
    }
}

/// `(x0, psi0, b, gamma)`.
#[derive(Debug, Clone)]
pub struct BuildingBlocks {
    pub x0: f64,
    pub psi0: CodebookSurface,
    pub vol: VolKernel,
    pub gamma: JointExponent,
}

impl BuildingBlocks {
    pub fn new(x0: f64, psi0: CodebookSurface, vol: VolKernel, gamma: JointExponent) -> Result<Self> {
        if psi0.mode() != Parametrisation::Maturity || psi0.grid().maturity_start != 0.0 {
            return Err(Error::InvalidSpec("psi0 must be a maturity-form codebook starting at T = 0".into()));
        }
        Ok(Self { x0, psi0, vol, gamma })
    }

    pub fn grid(&self) -> &GridSpec {
        self.psi0.grid()
    }
}

/// Writes `a(t, psi)(T_j, u_k)` into `out`.
fn drift_into(blocks: &BuildingBlocks, t: f64, psi: &CodebookSurface, out: &mut [Complex64]) -> Result<()> {
    out.iter_mut().for_each(|v| *v = ZERO);
    if blocks.vol.is_zero() || blocks.gamma.is_zero() {
        return Ok(());
    }
    let g = psi.grid();
    let nu = g.n_frequencies();
    let (bt, integral) = blocks.vol.truncated_with_integral(t, psi)?;
    for j in 0..g.n_maturities() {
        if g.maturity(j) < t - TIME_EPS {
            continue;
        }
        for k in 0..nu {
            let idx = j * nu + k;
            let b = bt[idx];
            if b == ZERO {
                continue;
            }
            let d2 = blocks.gamma.d2(g.frequency(k), -I * integral[idx])?;
            out[idx] = I * d2 * b;
        }
    }
    Ok(())
}

/// Drift `a(t, psi)(T, u) = i ∂_2 gamma(u, -i ∫_t^T b̃(t, psi)(r, u) dr) b̃(t, psi)(T, u) 1{T >= t}`.
pub fn drift_a(blocks: &BuildingBlocks, t: f64, psi: &CodebookSurface) -> Result<CodebookSurface> {
    let g = *psi.grid();
    if t > g.last_maturity() + TIME_EPS {
        return Err(Error::OutOfRange { what: "drift time", value: t, min: 0.0, max: g.last_maturity() });
    }
    let mut out = CodebookSurface::zeros(g, t)?;
    drift_into(blocks, t, psi, out.values_mut())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub surfaces: Vec<CodebookSurface>,
    /// Picard residuals, one per iteration (empty for the event-driven solver).
    pub residuals: Vec<f64>,
}

impl Trajectory {
    pub fn at(&self, t: f64) -> Option<&CodebookSurface> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-9).map(|i| &self.surfaces[i])
    }

    /// Largest cell-wise difference over common checkpoints.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.times
            .iter()
            .zip(&self.surfaces)
            .filter_map(|(t, s)| other.at(*t).map(|o| s.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Largest time step.
    pub step: f64,
    /// Picard: residual tolerance. Event-driven: local error tolerance per step.
    pub tol: f64,
    pub max_iter: usize,
    /// Gauss-Legendre nodes per Picard step.
    pub quad_nodes: usize,
    /// Output times; grid maturities up to `t_end` plus `t_end` if empty.
    pub checkpoints: Vec<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { step: 0.01, tol: 1e-12, max_iter: 50, quad_nodes: 4, checkpoints: Vec::new() }
    }
}

fn checkpoints(grid: &GridSpec, t_end: f64, opts: &SolverOptions) -> Vec<f64> {
    let mut c: Vec<f64> = if opts.checkpoints.is_empty() {
        grid.maturities().into_iter().filter(|&t| t <= t_end + TIME_EPS).chain(std::iter::once(t_end)).collect()
    } else {
        opts.checkpoints.iter().copied().filter(|&t| t >= 0.0 && t <= t_end + TIME_EPS).collect()
    };
    c.sort_by(f64::total_cmp);
    c.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);
    c
}

fn check_inputs(blocks: &BuildingBlocks, path: &SubordinatorPath, t_end: f64, opts: &SolverOptions) -> Result<()> {
    if !(t_end >= 0.0 && t_end <= path.horizon + TIME_EPS) {
        return Err(Error::OutOfRange { what: "t_end (must lie within the path horizon)", value: t_end, min: 0.0, max: path.horizon });
    }
    if t_end > blocks.grid().last_maturity() + TIME_EPS {
        return Err(Error::OutOfRange { what: "t_end (must lie within the maturity grid)", value: t_end, min: 0.0, max: blocks.grid().last_maturity() });
    }
    if !(opts.step > 0.0) {
        return Err(Error::InvalidSpec("solver step must be > 0".into()));
    }
    if path.drift_rate > 0.0 && !blocks.vol.is_deterministic() {
        // handled through a_eff = a + drift_rate b below; nothing to reject
    }
    Ok(())
}

/// Breakpoints: uniform steps, jump times, grid maturities and checkpoints.
fn time_grid(grid: &GridSpec, path: &SubordinatorPath, t_end: f64, step: f64, extra: &[f64]) -> Vec<f64> {
    let n = (t_end / step).ceil() as usize;
    let mut ts: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(t_end)).collect();
    ts.extend(path.jumps_in(0.0, t_end).map(|j| j.0));
    ts.extend(grid.maturities().into_iter().filter(|&t| t > 0.0 && t < t_end));
    ts.extend(extra.iter().copied());
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-10);
    // keep exact jump times
    for j in path.jumps_in(0.0, t_end) {
        if let Some(p) = ts.iter_mut().find(|s| (**s - j.0).abs() <= 1e-10) {
            *p = j.0;
        }
    }
    ts
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton on P_n, nodes on [-1, 1]
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let (pn, pn1) = if n == 1 { (z, 1.0) } else { (p1, p0) };
            let dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let (qn, qn1) = if n == 1 { (z, 1.0) } else { (q1, q0) };
                let dq = n as f64 * (z * qn - qn1) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

pub(crate) fn gauss_legendre_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_legendre(n.max(1))
}

/// `a + drift_rate b`, the drift seen by a path whose subordinator has a linear part.
fn effective_drift(
    blocks: &BuildingBlocks,
    t: f64,
    psi: &CodebookSurface,
    drift_rate: f64,
    cutoff: Option<f64>,
    out: &mut [Complex64],
) -> Result<()> {
    drift_into(blocks, t, psi, out)?;
    if drift_rate > 0.0 && !blocks.vol.is_zero() {
        let b = blocks.vol.values(t, psi)?;
        for (o, bv) in out.iter_mut().zip(b) {
            *o += drift_rate * bv;
        }
    }
    if let Some(c) = cutoff {
        // right limit: maturities reached at the start of the step are frozen
        let g = psi.grid();
        let nu = g.n_frequencies();
        for j in 0..g.n_maturities() {
            if g.maturity(j) <= c + TIME_EPS {
                out[j * nu..(j + 1) * nu].iter_mut().for_each(|v| *v = ZERO);
            }
        }
    }
    Ok(())
}

fn lerp_surface(a: &CodebookSurface, b: &CodebookSurface, w: f64, out: &mut CodebookSurface) {
    for ((o, x), y) in out.values_mut().iter_mut().zip(a.values()).zip(b.values()) {
        *o = *x * (1.0 - w) + *y * w;
    }
}

/// Largest-grid seminorm `‖x - y‖_{T_N, u_M}`.
fn distance(x: &CodebookSurface, y: &CodebookSurface) -> f64 {
    let mut d = x.clone();
    for (a, b) in d.values_mut().iter_mut().zip(y.values()) {
        *a -= b;
    }
    let g = x.grid();
    d.seminorm(g.last_maturity(), g.frequency_max).unwrap_or(f64::INFINITY)
}

/// Picard iteration for the codebook SDE along a fixed subordinator path.
pub fn evolve_picard(blocks: &BuildingBlocks, path: &SubordinatorPath, t_end: f64, opts: &SolverOptions) -> Result<Trajectory> {
    check_inputs(blocks, path, t_end, opts)?;
    let grid = *blocks.grid();
    let cps = checkpoints(&grid, t_end, opts);
    let ts = time_grid(&grid, path, t_end, opts.step, &cps);
    let nt = ts.len();
    let (gx, gw) = gauss_legendre_nodes(opts.quad_nodes);
    let ncell = blocks.psi0.values().len();
    let deterministic = blocks.vol.is_deterministic();

    // V_{t_i} (post-jump) and V_{t_i -} (pre-jump), initialised at psi0
    let mut post: Vec<CodebookSurface> = vec![blocks.psi0.clone(); nt];
    let mut pre: Vec<CodebookSurface> = vec![blocks.psi0.clone(); nt];
    let mut residuals = Vec::new();
    let mut cache_drift: Option<Vec<Vec<Complex64>>> = None;
    let mut cache_jump: Option<Vec<Vec<Complex64>>> = None;
    let mut scratch = blocks.psi0.clone();
    let mut a_buf = vec![ZERO; ncell];

    for _iter in 0..opts.max_iter.max(1) {
        let mut new_post = Vec::with_capacity(nt);
        let mut new_pre = Vec::with_capacity(nt);
        let mut cur = blocks.psi0.clone();
        cur.set_time(0.0);
        let mut drift_incs: Vec<Vec<Complex64>> = Vec::new();
        let mut jump_incs: Vec<Vec<Complex64>> = Vec::new();
        for i in 0..nt {
            if i > 0 {
                let (t0, t1) = (ts[i - 1], ts[i]);
                let h = t1 - t0;
                let inc = if let Some(c) = &cache_drift {
                    c[i - 1].clone()
                } else {
                    let mut inc = vec![ZERO; ncell];
                    for (xq, wq) in gx.iter().zip(&gw) {
                        let w = 0.5 * (xq + 1.0);
                        let s = t0 + w * h;
                        lerp_surface(&post[i - 1], &pre[i], w, &mut scratch);
                        effective_drift(blocks, s, &scratch, path.drift_rate, None, &mut a_buf)?;
                        for (acc, a) in inc.iter_mut().zip(&a_buf) {
                            *acc += 0.5 * h * wq * a;
                        }
                    }
                    inc
                };
                for (v, d) in cur.values_mut().iter_mut().zip(&inc) {
                    *v += d;
                }
                drift_incs.push(inc);
            }
            cur.set_time(ts[i]);
            new_pre.push(cur.clone());
            let jump = if let Some(c) = &cache_jump {
                c[i].clone()
            } else {
                match path.jump_at(ts[i]).filter(|_| ts[i] > 0.0) {
                    Some(dm) if !blocks.vol.is_zero() => {
                        blocks.vol.values(ts[i], &pre[i])?.into_iter().map(|b| b * dm).collect()
                    }
                    _ => Vec::new(),
                }
            };
            for (v, d) in cur.values_mut().iter_mut().zip(&jump) {
                *v += d;
            }
            jump_incs.push(jump);
            new_post.push(cur.clone());
        }
        let residual = new_post.iter().zip(&post).map(|(a, b)| distance(a, b)).fold(0.0, f64::max);
        residuals.push(residual);
        post = new_post;
        pre = new_pre;
        if deterministic {
            cache_drift = Some(drift_incs);
            cache_jump = Some(jump_incs);
        }
        if residual < opts.tol {
            let surfaces = cps
                .iter()
                .map(|&c| {
                    let i = ts.iter().position(|t| (t - c).abs() <= 1e-9).expect("checkpoint on time grid");
                    post[i].clone()
                })
                .collect();
            return Ok(Trajectory { times: cps, surfaces, residuals });
        }
    }
    Err(Error::NonConvergence { iterations: residuals.len(), residual: *residuals.last().unwrap_or(&f64::NAN) })
}

/// Drift values already computed for a deterministic kernel, keyed by time and the number of
/// maturities frozen at the step start.
#[derive(Default)]
struct DriftMemo {
    entries: Vec<(u64, usize, Vec<Complex64>)>,
}

impl DriftMemo {
    const CAPACITY: usize = 8;
}

fn memo_drift(
    blocks: &BuildingBlocks,
    s: f64,
    y: &CodebookSurface,
    drift_rate: f64,
    cutoff: f64,
    memo: &mut Option<DriftMemo>,
    out: &mut [Complex64],
) -> Result<()> {
    let Some(m) = memo else {
        return effective_drift(blocks, s, y, drift_rate, Some(cutoff), out);
    };
    let g = y.grid();
    let frozen = (0..g.n_maturities()).take_while(|&j| g.maturity(j) <= cutoff + TIME_EPS).count();
    let key = s.to_bits();
    if let Some(e) = m.entries.iter().find(|e| e.0 == key && e.1 == frozen) {
        out.copy_from_slice(&e.2);
        return Ok(());
    }
    effective_drift(blocks, s, y, drift_rate, Some(cutoff), out)?;
    if m.entries.len() == DriftMemo::CAPACITY {
        m.entries.remove(0);
    }
    m.entries.push((key, frozen, out.to_vec()));
    Ok(())
}

fn rk4_step(
    blocks: &BuildingBlocks,
    t: f64,
    h: f64,
    y: &CodebookSurface,
    drift_rate: f64,
    memo: &mut Option<DriftMemo>,
    out: &mut CodebookSurface,
) -> Result<()> {
    let n = y.values().len();
    let mut k = [vec![ZERO; n], vec![ZERO; n], vec![ZERO; n], vec![ZERO; n]];
    let mut tmp = y.clone();
    memo_drift(blocks, t, y, drift_rate, t, memo, &mut k[0])?;
    for (stage, (c, w)) in [(0.5, 0.5), (0.5, 0.5), (1.0, 1.0)].iter().enumerate() {
        let (prev, rest) = k.split_at_mut(stage + 1);
        for ((v, y0), kp) in tmp.values_mut().iter_mut().zip(y.values()).zip(&prev[stage]) {
            *v = y0 + w * h * kp;
        }
        tmp.set_time(t + c * h);
        memo_drift(blocks, t + c * h, &tmp, drift_rate, t, memo, &mut rest[0])?;
    }
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        *v = y.values()[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
    out.set_time(t + h);
    Ok(())
}

/// Integrates the drift with an adaptive four-stage scheme between jumps and applies
/// `Psi <- Psi + b(t, Psi_-) dM` at every jump.
pub fn evolve_event_driven(blocks: &BuildingBlocks, path: &SubordinatorPath, t_end: f64, opts: &SolverOptions) -> Result<Trajectory> {
    check_inputs(blocks, path, t_end, opts)?;
    let grid = *blocks.grid();
    let cps = checkpoints(&grid, t_end, opts);
    let mut breaks: Vec<f64> = path.jumps_in(0.0, t_end).map(|j| j.0).collect();
    breaks.extend(grid.maturities().into_iter().filter(|&t| t > 0.0 && t < t_end));
    breaks.extend(cps.iter().copied());
    breaks.push(t_end);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-10);

    let h_min = 1e-10;
    let mut memo = blocks.vol.is_deterministic().then(DriftMemo::default);
    let mut y = blocks.psi0.clone();
    y.set_time(0.0);
    let mut full = y.clone();
    let mut half = y.clone();
    let mut two = y.clone();
    let mut times = Vec::new();
    let mut surfaces = Vec::new();
    let mut t = 0.0;
    let mut h = opts.step;
    let record = |t: f64, y: &CodebookSurface, times: &mut Vec<f64>, surfaces: &mut Vec<CodebookSurface>| {
        if let Some(c) = cps.iter().find(|c| (**c - t).abs() <= 1e-9) {
            if times.last().map_or(true, |l: &f64| (l - c).abs() > 1e-9) {
                times.push(*c);
                surfaces.push(y.clone());
            }
        }
    };
    record(0.0, &y, &mut times, &mut surfaces);
    for &bp in &breaks {
        while t < bp - 1e-12 {
            let proposal = h.min(opts.step);
            let step = proposal.min(bp - t);
            rk4_step(blocks, t, step, &y, path.drift_rate, &mut memo, &mut full)?;
            rk4_step(blocks, t, 0.5 * step, &y, path.drift_rate, &mut memo, &mut half)?;
            rk4_step(blocks, t + 0.5 * step, 0.5 * step, &half, path.drift_rate, &mut memo, &mut two)?;
            let scale = y.values().iter().map(|v| v.norm()).fold(1.0, f64::max);
            let err = two.max_abs_diff(&full) / scale;
            if err <= opts.tol.max(1e-300) || step <= h_min {
                if err > opts.tol && step <= h_min {
                    return Err(Error::StepUnderflow { time: t, step });
                }
                // local extrapolation of the step-doubling pair
                for (v, (a, b)) in y.values_mut().iter_mut().zip(two.values().iter().zip(full.values())) {
                    *v = a + (a - b) / 15.0;
                }
                t = if bp - (t + step) <= 1e-12 { bp } else { t + step };
                y.set_time(t);
                // a step cut short by a breakpoint keeps the proposal
                h = if err < opts.tol / 32.0 { (2.0 * proposal).min(opts.step) } else { proposal };
            } else {
                h = 0.5 * step;
                if h < h_min {
                    return Err(Error::StepUnderflow { time: t, step: h });
                }
            }
        }
        t = bp;
        y.set_time(t);
        if let Some(dm) = path.jump_at(t) {
            if !blocks.vol.is_zero() {
                let b = blocks.vol.values(t, &y)?;
                for (v, bv) in y.values_mut().iter_mut().zip(b) {
                    *v += bv * dm;
                }
            }
        }
        record(t, &y, &mut times, &mut surfaces);
    }
    Ok(Trajectory { times, surfaces, residuals: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::bns_gamma;
    use approx::assert_abs_diff_eq;

    fn grid() -> GridSpec {
        GridSpec::new(0.1, 11, 0.5, 3.0).unwrap()
    }

    fn bs(g: GridSpec) -> CodebookSurface {
        CodebookSurface::from_fn(g, 0.0, |_, u| -0.02 * Complex64::new(u * u, u)).unwrap()
    }

    fn bns_blocks(g: GridSpec) -> BuildingBlocks {
        let eta = CharExponent::subordinator(JumpSpec::CompoundPoissonExp { rate: 1.0, theta: 2.0 }, 0.0).unwrap();
        let gamma = bns_gamma(eta, -0.5).unwrap();
        let vol = VolKernel::deterministic_exp(CharExponent::black_scholes(1.0).unwrap(), 1.0).unwrap();
        BuildingBlocks::new(0.0, bs(g), vol, gamma).unwrap()
    }

    #[test]
    fn truncate_b_examples() {
        assert_eq!(truncate_b(Complex64::new(-1.0, 2.0)), Complex64::new(-1.0, 2.0));
        assert_eq!(truncate_b(Complex64::new(3.0, 2.0)), Complex64::new(0.0, 2.0));
        assert_eq!(truncate_b(ZERO), ZERO);
        let z = Complex64::new(0.7, -0.2);
        assert_eq!(truncate_b(truncate_b(z)), truncate_b(z));
    }

    #[test]
    fn e1_values() {
        assert_abs_diff_eq!(exp_integral_e1(1.0), 0.219_383_934_395_520_27, epsilon = 1e-14);
        assert_abs_diff_eq!(exp_integral_e1(0.1), 1.822_923_958_419_390_7, epsilon = 1e-13);
        assert_abs_diff_eq!(exp_integral_e1(5.0), 0.001_148_295_591_275_325_8, epsilon = 1e-16);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_nodes(4);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert_abs_diff_eq!(s, 2.0 / 7.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_rate_path_is_empty() {
        let p = simulate_subordinator(&JumpSpec::CompoundPoissonExp { rate: 0.0, theta: 2.0 }, 1.0, 7).unwrap();
        assert!(p.jumps.is_empty());
        assert!(simulate_subordinator(&JumpSpec::CompoundPoissonDiscrete { rate: 1.0, atoms: vec![(-1.0, 1.0)] }, 1.0, 1).is_err());
    }

    #[test]
    fn subordinator_paths_are_reproducible() {
        let spec = JumpSpec::Gamma { shape: 2.0, rate: 3.0 };
        let a = simulate_subordinator(&spec, 2.0, 42).unwrap();
        let b = simulate_subordinator(&spec, 2.0, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.drift_rate > 0.0 && a.drift_rate < 1e-5);
    }

    #[test]
    fn drift_vanishes_for_zero_kernel() {
        let g = grid();
        let blocks = BuildingBlocks::new(0.0, bs(g), VolKernel::Zero, JointExponent::BrownianSanity).unwrap();
        let a = drift_a(&blocks, 0.3, &blocks.psi0).unwrap();
        assert!(a.values().iter().all(|v| *v == ZERO));
    }

    #[test]
    fn drift_is_local_in_maturity() {
        let g = grid();
        let blocks = bns_blocks(g);
        let a = drift_a(&blocks, 0.35, &blocks.psi0).unwrap();
        for j in 0..4 {
            assert!(a.row(j).iter().all(|v| *v == ZERO));
        }
        assert!(a.row(4).iter().any(|v| *v != ZERO));
    }

    #[test]
    fn brownian_sanity_drift() {
        let g = grid();
        let blocks = BuildingBlocks::new(
            0.0,
            bs(g),
            VolKernel::deterministic_exp(CharExponent::black_scholes(1.0).unwrap(), 0.5).unwrap(),
            JointExponent::BrownianSanity,
        )
        .unwrap();
        let t = 0.2;
        let a = drift_a(&blocks, t, &blocks.psi0).unwrap();
        for j in 2..11 {
            for k in 0..g.n_frequencies() {
                let u = g.frequency(k);
                let phi = -0.5 * Complex64::new(u * u, u);
                let tau = g.maturity(j) - t;
                let b = phi * (-0.5 * tau).exp();
                let ib = phi * (1.0 - (-0.5 * tau).exp()) / 0.5;
                assert_abs_diff_eq!((a.get(j, k) - (-b * ib)).norm(), 0.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn zero_kernel_keeps_psi0() {
        let g = grid();
        let blocks = BuildingBlocks::new(0.0, bs(g), VolKernel::Zero, JointExponent::Zero).unwrap();
        let path = simulate_subordinator(&JumpSpec::CompoundPoissonExp { rate: 3.0, theta: 2.0 }, 1.0, 3).unwrap();
        for traj in [
            evolve_picard(&blocks, &path, 1.0, &SolverOptions::default()).unwrap(),
            evolve_event_driven(&blocks, &path, 1.0, &SolverOptions::default()).unwrap(),
        ] {
            for s in &traj.surfaces {
                assert_eq!(s.values(), blocks.psi0.values());
            }
        }
    }

    #[test]
    fn no_jump_path_is_pure_drift() {
        let g = grid();
        let blocks = bns_blocks(g);
        let path = SubordinatorPath::constant(1.0);
        let traj = evolve_picard(&blocks, &path, 1.0, &SolverOptions::default()).unwrap();
        let ev = evolve_event_driven(&blocks, &path, 1.0, &SolverOptions::default()).unwrap();
        assert!(traj.max_abs_diff(&ev) < 1e-10);
        // closed form of ∫_0^t a(s) ds
        let t = 0.6;
        let s = traj.at(t).unwrap();
        let JointExponent::Bns(gm) = &blocks.gamma else { unreachable!() };
        for j in 6..11 {
            for k in 0..g.n_frequencies() {
                let u = g.frequency(k);
                let phi = -0.5 * Complex64::new(u * u, u);
                let tt = g.maturity(j);
                let arg = |tau: f64| gm.delta() * u - I * phi * (1.0 - (-tau).exp());
                let want = blocks.psi0.get(j, k) + gm.eta().eval(arg(tt - t)).unwrap() - gm.eta().eval(arg(tt)).unwrap();
                assert_abs_diff_eq!((s.get(j, k) - want).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jump_increment_is_linear_in_size() {
        let g = grid();
        let blocks = bns_blocks(g);
        let p1 = SubordinatorPath::new(1.0, 0.0, vec![(0.45, 0.3)]).unwrap();
        let p2 = p1.scaled(2.0);
        let opts = SolverOptions { checkpoints: vec![0.44, 0.45], step: 0.01, ..Default::default() };
        let base = evolve_picard(&blocks, &SubordinatorPath::constant(1.0), 1.0, &opts).unwrap();
        let a = evolve_picard(&blocks, &p1, 1.0, &opts).unwrap();
        let b = evolve_picard(&blocks, &p2, 1.0, &opts).unwrap();
        let d1: Vec<Complex64> = a.surfaces[1].values().iter().zip(base.surfaces[1].values()).map(|(x, y)| x - y).collect();
        let d2: Vec<Complex64> = b.surfaces[1].values().iter().zip(base.surfaces[1].values()).map(|(x, y)| x - y).collect();
        for (x, y) in d1.iter().zip(&d2) {
            assert_abs_diff_eq!((2.0 * x - y).norm(), 0.0, epsilon = 1e-13);
        }
        assert!(d1.iter().any(|v| v.norm() > 1e-3));
    }

    #[test]
    fn state_dependent_kernel_picard_converges() {
        let g = grid();
        let mut blocks = bns_blocks(g);
        // b(t, psi) = 0.1 * psi, Lipschitz
        blocks.vol = VolKernel::state_dependent(|_, psi| Ok(psi.values().iter().map(|v| 0.1 * v).collect()));
        let path = SubordinatorPath::new(1.0, 0.0, vec![(0.3, 0.5), (0.7, 0.2)]).unwrap();
        let opts = SolverOptions { step: 0.05, tol: 1e-10, ..Default::default() };
        let pic = evolve_picard(&blocks, &path, 1.0, &opts).unwrap();
        assert!(pic.residuals.len() > 2);
        let ev = evolve_event_driven(&blocks, &path, 1.0, &SolverOptions { step: 0.01, tol: 1e-12, ..Default::default() }).unwrap();
        assert!(pic.max_abs_diff(&ev) < 1e-4, "{}", pic.max_abs_diff(&ev));
    }

    #[test]
    fn picard_reports_non_convergence() {
        let g = grid();
        let mut blocks = bns_blocks(g);
        blocks.vol = VolKernel::state_dependent(|_, psi| Ok(psi.values().iter().map(|v| 0.1 * v).collect()));
        let path = SubordinatorPath::new(1.0, 0.0, vec![(0.3, 0.5)]).unwrap();
        let opts = SolverOptions { max_iter: 2, tol: 1e-14, ..Default::default() };
        assert!(matches!(evolve_picard(&blocks, &path, 1.0, &opts), Err(Error::NonConvergence { iterations: 2, .. })));
    }
}
