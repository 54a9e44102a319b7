//! Monte Carlo risk-neutrality checks, static-arbitrage audit and the breakdown monitor.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::codebook::{pi_necessary_check, CodebookSurface, DEFAULT_PI_TOL};
use crate::dynamics::{simulate_subordinator_with, Trajectory};
use crate::error::{Error, Result};
use crate::levy::{CharExponent, JointExponent, JumpSpec};
use crate::models::BnsModel;
use crate::pricing::PriceSurface;

/// Sampled `(X, Z, M)` at the recorded times, row-major per path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPaths {
    pub n_paths: usize,
    pub seed: u64,
    pub steps: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub m: Vec<f64>,
}

impl McPaths {
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-9)
    }

    /// Values of `X` at recorded index `i` across paths.
    pub fn x_at(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let nt = self.times.len();
        (0..self.n_paths).map(move |p| self.x[p * nt + i])
    }

    fn require(&self, t: f64) -> Result<usize> {
        self.time_index(t)
            .ok_or_else(|| Error::Data(format!("time {t} is not among the recorded path times")))
    }
}

const STREAM_W: u64 = 0;
const STREAM_L: u64 = 1;
const STREAM_M: u64 = 2;

fn stream(seed: u64, path: usize, component: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(path as u64 * 4 + component);
    r
}

/// Increment over `dt` of a jump part with law `jumps` (no compensation).
fn jump_increment<R: Rng + ?Sized>(jumps: &JumpSpec, dt: f64, rng: &mut R) -> Result<f64> {
    let poisson = |mean: f64, rng: &mut R| -> Result<usize> {
        if mean <= 0.0 {
            return Ok(0);
        }
        Ok(Poisson::new(mean).map_err(|e| Error::Internal(e.to_string()))?.sample(rng) as usize)
    };
    Ok(match jumps {
        JumpSpec::None => 0.0,
        JumpSpec::CompoundPoissonExp { rate, theta } => {
            let n = poisson(rate * dt, rng)?;
            let e = Exp::new(*theta).map_err(|e| Error::Internal(e.to_string()))?;
            (0..n).map(|_| e.sample(rng)).sum()
        }
        JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
            let n = poisson(rate * dt, rng)?;
            let mut s = 0.0;
            for _ in 0..n {
                let mut r = rng.random::<f64>();
                let mut pick = atoms[atoms.len() - 1].0;
                for &(x, p) in atoms {
                    if r < p {
                        pick = x;
                        break;
                    }
                    r -= p;
                }
                s += pick;
            }
            s
        }
        JumpSpec::Gamma { shape, rate } => {
            Gamma::new(shape * dt, 1.0 / rate).map_err(|e| Error::Internal(e.to_string()))?.sample(rng)
        }
    })
}

/// Increment over `dt` of the PII `L` with exponent `psi` in Pi.
fn pii_increment<R: Rng + ?Sized>(psi: &CharExponent, dt: f64, rng: &mut R) -> Result<f64> {
    let c = psi.triplet().diffusion;
    let comp = psi.jumps().exp_compensator()?;
    let normal: f64 = StandardNormal.sample(rng);
    Ok(-0.5 * c * dt + (c * dt).sqrt() * normal + jump_increment(psi.jumps(), dt, rng)? - comp * dt)
}

/// Euler-type scheme for `(X, Z, M)` with exact subordinator jumps and the exact
/// interval integral of `Z` in both the drift and the Brownian term.
pub fn simulate_bns(
    model: &BnsModel,
    n_paths: usize,
    steps: usize,
    horizon: f64,
    record_every: usize,
    seed: u64,
) -> Result<McPaths> {
    if n_paths == 0 || steps == 0 || !(horizon > 0.0) || record_every == 0 {
        return Err(Error::InvalidSpec("need n_paths >= 1, steps >= 1, horizon > 0 and record_every >= 1".into()));
    }
    let dt = horizon / steps as f64;
    let lambda = model.lambda();
    let delta = model.params().delta;
    let shift = match model.gamma() {
        JointExponent::Bns(g) => g.eta_shift(),
        _ => 0.0,
    };
    let mut times: Vec<f64> = (0..=steps).step_by(record_every).map(|i| i as f64 * dt).collect();
    if steps % record_every != 0 {
        times.push(horizon);
    }
    let nt = times.len();
    let x0 = model.params().x0;
    let eta = model.params().eta.clone();

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mut rw = stream(seed, p, STREAM_W);
            let mut rl = stream(seed, p, STREAM_L);
            let mut rm = stream(seed, p, STREAM_M);
            let path = simulate_subordinator_with(&eta, horizon, &mut rm)?;
            let mut xs = Vec::with_capacity(nt);
            let mut zs = Vec::with_capacity(nt);
            let mut ms = Vec::with_capacity(nt);
            let (mut x, mut z, mut m) = (x0, 0.0, 0.0);
            xs.push(x);
            zs.push(z);
            ms.push(m);
            let decay = (-lambda * dt).exp();
            let w = -(-lambda * dt).exp_m1() / lambda;
            for i in 0..steps {
                let t0 = i as f64 * dt;
                let t1 = if i + 1 == steps { horizon } else { (i + 1) as f64 * dt };
                // ∫_{t0}^{t1} Z ds and Z_{t1}
                let mut iz = z * w;
                let mut z1 = z * decay;
                let mut dm = path.drift_rate * (t1 - t0);
                if path.drift_rate > 0.0 {
                    iz += path.drift_rate * ((t1 - t0) - w) / lambda;
                    z1 += path.drift_rate * w;
                }
                for &(tj, size) in path.jumps_in(t0, t1) {
                    iz += size * (-(-lambda * (t1 - tj)).exp_m1()) / lambda;
                    z1 += size * (-lambda * (t1 - tj)).exp();
                    dm += size;
                }
                let n: f64 = StandardNormal.sample(&mut rw);
                let dl = pii_increment(model.psi_l(), t1 - t0, &mut rl)?;
                x += dl - 0.5 * iz - shift * (t1 - t0) + iz.max(0.0).sqrt() * n + delta * dm;
                z = z1;
                m += dm;
                if (i + 1) % record_every == 0 || i + 1 == steps {
                    xs.push(x);
                    zs.push(z);
                    ms.push(m);
                }
            }
            Ok((xs, zs, ms))
        })
        .collect::<Result<_>>()?;
    let mut out = McPaths {
        n_paths,
        seed,
        steps,
        horizon,
        times,
        x: Vec::with_capacity(n_paths * nt),
        z: Vec::with_capacity(n_paths * nt),
        m: Vec::with_capacity(n_paths * nt),
    };
    for (x, z, m) in rows {
        out.x.extend(x);
        out.z.extend(z);
        out.m.extend(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub statistic: f64,
    pub standard_error: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<CheckItem>,
    /// Individual failed conditions, one line each.
    pub violations: Vec<String>,
    pub passed: bool,
}

impl CheckReport {
    pub fn new() -> Self {
        Self { checks: Vec::new(), violations: Vec::new(), passed: true }
    }

    /// Adds a check that passes iff `statistic <= threshold`.
    pub fn push(&mut self, name: String, statistic: f64, standard_error: Option<f64>, threshold: f64) {
        let passed = statistic <= threshold;
        self.passed &= passed;
        self.checks.push(CheckItem { name, statistic, standard_error, threshold, passed });
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.passed &= other.passed;
        self.checks.extend(other.checks);
        self.violations.extend(other.violations);
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<44} {:>13} {:>13} {:>13}  result", "check", "statistic", "std.err", "threshold");
        for c in &self.checks {
            let se = c.standard_error.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
            let _ = writeln!(
                s,
                "{:<44} {:>13.3e} {:>13} {:>13.3e}  {}",
                c.name,
                c.statistic,
                se,
                c.threshold,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        for v in &self.violations {
            let _ = writeln!(s, "violation: {v}");
        }
        let _ = writeln!(s, "overall: {}", if self.passed { "pass" } else { "FAIL" });
        s
    }
}

/// Mean and standard error.
fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    let var = if n > 1.0 { m2 / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

pub const SE_MULTIPLIER: f64 = 3.0;

/// Sample mean of `e^{iu(X_T - x0)}` against `exp(∫_0^T Psi_0(r, u) dr)`, real and imaginary parts.
pub fn check_conditional_expectation(
    paths: &McPaths,
    s: &CodebookSurface,
    x0: f64,
    u_list: &[f64],
    big_t: f64,
) -> Result<CheckReport> {
    let i = paths.require(big_t)?;
    if s.grid().last_maturity() < big_t - 1e-12 {
        return Err(Error::Data(format!("codebook ends before T = {big_t}")));
    }
    let mut r = CheckReport::new();
    for &u in u_list {
        let target = s.integrate_maturity(s.time(), big_t, u)?.exp();
        let (re, se_re) = mean_se(paths.x_at(i).map(|x| (u * (x - x0)).cos()));
        let (im, se_im) = mean_se(paths.x_at(i).map(|x| (u * (x - x0)).sin()));
        r.push(format!("cf re u={u} T={big_t}"), (re - target.re).abs(), Some(se_re), SE_MULTIPLIER * se_re);
        r.push(format!("cf im u={u} T={big_t}"), (im - target.im).abs(), Some(se_im), SE_MULTIPLIER * se_im);
    }
    Ok(r)
}

/// `E e^{X_T} = e^{x0}` at every call maturity, and call payoff means against prices `(T, K, C)`.
pub fn check_martingale(paths: &McPaths, x0: f64, calls: &[(f64, f64, f64)]) -> Result<CheckReport> {
    let mut r = CheckReport::new();
    let mut ts: Vec<f64> = calls.iter().map(|c| c.0).collect();
    ts.push(paths.horizon);
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);
    for &t in &ts {
        let i = paths.require(t)?;
        let (m, se) = mean_se(paths.x_at(i).map(f64::exp));
        r.push(format!("martingale exp(X) T={t}"), (m - x0.exp()).abs(), Some(se), SE_MULTIPLIER * se);
    }
    for &(t, k, c) in calls {
        let i = paths.require(t)?;
        let (m, se) = mean_se(paths.x_at(i).map(|x| (x.exp() - k).max(0.0)));
        r.push(format!("call T={t} K={k}"), (m - c).abs(), Some(se), SE_MULTIPLIER * se);
    }
    Ok(r)
}

/// Default tolerance of [`static_arbitrage_report`], relative to spot.
pub const STATIC_ARB_TOL: f64 = 1e-8;

/// Monotonicity and convexity in `K`, price bounds, and monotonicity in `T`.
pub fn static_arbitrage_report(p: &PriceSurface, tol_rel: f64) -> Result<CheckReport> {
    p.validate()?;
    let tol = tol_rel * p.spot;
    let s = p.spot;
    let ks = &p.strikes;
    let mut r = CheckReport::new();
    for (i, &t) in p.maturities.iter().enumerate() {
        let row = p.row(i);
        let (mut worst_mono, mut worst_conv, mut worst_bound) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..ks.len() {
            let lower = (s - ks[j]).max(0.0);
            let excess = (lower - row[j]).max(row[j] - s);
            worst_bound = worst_bound.max(excess);
            if excess > tol {
                r.violations.push(format!("bounds at T={t} K={}: C={} outside [{lower}, {s}]", ks[j], row[j]));
            }
            if j + 1 < ks.len() {
                let inc = row[j + 1] - row[j];
                worst_mono = worst_mono.max(inc);
                if inc > tol {
                    r.violations.push(format!("strike monotonicity at T={t} K={}..{}: increase {inc:e}", ks[j], ks[j + 1]));
                }
            }
            if j > 0 && j + 1 < ks.len() {
                let (h0, h1) = (ks[j] - ks[j - 1], ks[j + 1] - ks[j]);
                // butterfly scaled to a uniform-grid second difference
                let bf = (h1 * row[j - 1] - (h0 + h1) * row[j] + h0 * row[j + 1]) * 2.0 / (h0 + h1);
                worst_conv = worst_conv.max(-bf);
                if -bf > tol {
                    r.violations.push(format!("strike convexity at T={t} K={}: butterfly {bf:e}", ks[j]));
                }
            }
        }
        r.push(format!("strike monotonicity T={t}"), worst_mono.max(0.0), None, tol);
        r.push(format!("strike convexity T={t}"), worst_conv.max(0.0), None, tol);
        r.push(format!("price bounds T={t}"), worst_bound.max(0.0), None, tol);
    }
    for i in 0..p.maturities.len().saturating_sub(1) {
        let mut worst = 0.0f64;
        for j in 0..ks.len() {
            let dec = p.price(i, j) - p.price(i + 1, j);
            worst = worst.max(dec);
            if dec > tol {
                r.violations.push(format!(
                    "calendar at K={} T={}..{}: decrease {dec:e}",
                    ks[j],
                    p.maturities[i],
                    p.maturities[i + 1]
                ));
            }
        }
        r.push(format!("calendar T={}..{}", p.maturities[i], p.maturities[i + 1]), worst, None, tol);
    }
    Ok(r)
}

/// First checkpoint at which `eta_t = Psi_t - gamma(u, 0) 1{T <= t}` fails the necessary Pi
/// conditions, or `None`.
pub fn tau_monitor(traj: &Trajectory, gamma: &JointExponent, tol: f64) -> Result<Option<f64>> {
    for (t, s) in traj.times.iter().zip(&traj.surfaces) {
        let g = *s.grid();
        let mut eta = s.clone();
        for j in 0..g.n_maturities() {
            if g.maturity(j) <= t + 1e-12 {
                for k in 0..g.n_frequencies() {
                    let shift = gamma.eval(g.frequency(k), Complex64::new(0.0, 0.0))?;
                    eta.set(j, k, s.get(j, k) - shift);
                }
            }
        }
        if !pi_necessary_check(&eta, 0.0, tol).passed() {
            return Ok(Some(*t));
        }
    }
    Ok(None)
}

/// [`tau_monitor`] with the default tolerance.
pub fn tau_monitor_default(traj: &Trajectory, gamma: &JointExponent) -> Result<Option<f64>> {
    tau_monitor(traj, gamma, DEFAULT_PI_TOL)
}
