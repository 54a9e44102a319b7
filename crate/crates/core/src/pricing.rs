//! Fourier maps between codebooks, modified option prices and call surfaces.
//!
//! The modified price `O(T, x)` at log-moneyness `x = log(K/S)` satisfies
//! `C(T, K) = (S - K)^+ + K O(T, log K/S)` and
//! `∫ e^{iux} O(T, x) dx = (1 - exp(c(u))) / (u^2 + iu)` for the cumulant
//! `c(u) = ∫_t^T Psi_t(r, u) dr`.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

use crate::codebook::{pi_necessary_check_range, CodebookSurface, GridSpec, Parametrisation, DEFAULT_PI_TOL};
use crate::error::{Error, Result};


/// Damping exponent of the closed-form route.
pub const DAMPING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedPriceSlice {
    pub maturity: f64,
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    /// Number of negative values set to zero.
    pub clipped: usize,
    /// Clipped mass relative to `∫ |O| dx`.
    pub clipped_fraction: f64,
}

impl ModifiedPriceSlice {
    pub fn zero(maturity: f64, x: Vec<f64>) -> Self {
        let values = vec![0.0; x.len()];
        Self { maturity, x, values, clipped: 0, clipped_fraction: 0.0 }
    }

    /// `O` at `x` by monotone cubic interpolation; `x` must lie inside the slice.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        let (lo, hi) = (self.x[0], self.x[self.x.len() - 1]);
        if !(x >= lo - 1e-12 && x <= hi + 1e-12) {
            return Err(Error::Extrapolation { strike: f64::NAN, x, min: lo, max: hi });
        }
        let smooth: Vec<f64> = self.x.iter().zip(&self.values).map(|(&x, &o)| o + intrinsic_part(x)).collect();
        let p = Pchip::new(&self.x, &smooth)?;
        Ok(p.eval(x.clamp(lo, hi)) - intrinsic_part(x))
    }
}

/// Call prices on a maturity × strike grid, row-major in `T` then `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSurface {
    pub spot: f64,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub prices: Vec<f64>,
}

impl PriceSurface {
    pub fn new(spot: f64, strikes: Vec<f64>, maturities: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        let s = Self { spot, strikes, maturities, prices };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot.is_finite() && self.spot > 0.0) {
            return Err(Error::Data(format!("spot must be > 0, got {}", self.spot)));
        }
        if self.strikes.is_empty() || self.maturities.is_empty() {
            return Err(Error::Data("price surface needs at least one strike and one maturity".into()));
        }
        if self.strikes.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::Data("strikes must be positive".into()));
        }
        if self.strikes.windows(2).any(|w| w[1] <= w[0]) || self.maturities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("strikes and maturities must be strictly increasing".into()));
        }
        if self.prices.len() != self.strikes.len() * self.maturities.len() {
            return Err(Error::Data(format!(
                "expected {} prices, got {}",
                self.strikes.len() * self.maturities.len(),
                self.prices.len()
            )));
        }
        if self.prices.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data("prices must be finite".into()));
        }
        Ok(())
    }

    pub fn price(&self, i: usize, j: usize) -> f64 {
        self.prices[i * self.strikes.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.strikes.len();
        &self.prices[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingOptions {
    /// Damping exponent of the closed-form route, in `(0, 1)`.
    pub alpha: f64,
    /// Frequency step of the closed-form route.
    pub frequency_step: f64,
    /// Largest admissible log-moneyness spacing.
    pub dx_max: f64,
    /// Largest admissible `O` at the edges of the slice.
    pub decay_tol: f64,
    /// Largest admissible clipped fraction.
    pub clip_limit: f64,
    /// Half-width of the log-moneyness range; `max(2, 6 sqrt(v))` if unset.
    pub half_width: Option<f64>,
    pub pi_tol: f64,
    /// Subtract a Gaussian reference before summing (closed-form route).
    pub control_variate: bool,
}

impl Default for PricingOptions {
    fn default() -> Self {
        Self {
            alpha: DAMPING,
            frequency_step: 0.05,
            dx_max: 0.01,
            decay_tol: 1e-4,
            clip_limit: 1e-3,
            half_width: None,
            pi_tol: DEFAULT_PI_TOL,
            control_variate: true,
        }
    }
}

impl PricingOptions {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("damping must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.frequency_step > 0.0 && self.dx_max > 0.0) {
            return Err(Error::InvalidSpec("frequency step and dx_max must be > 0".into()));
        }
        Ok(())
    }
}

/// `Φ(x)`, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn norm_inv(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Modified price of a Gaussian log-return with variance `v` and `E e^Y = 1`.
pub fn bs_modified(x: f64, v: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let sv = v.sqrt();
    let d1 = (-x + 0.5 * v) / sv;
    let d2 = d1 - sv;
    if x >= 0.0 {
        (-x).exp() * norm_cdf(d1) - norm_cdf(d2)
    } else {
        norm_cdf(-d2) - (-x).exp() * norm_cdf(-d1)
    }
}

/// `(e^{-x} - 1)^+`, the kink that `O` carries at `x = 0`.
fn intrinsic_part(x: f64) -> f64 {
    if x < 0.0 {
        (-x).exp_m1()
    } else {
        0.0
    }
}

fn bs_cumulant(u: f64, v: f64) -> Complex64 {
    -0.5 * v * Complex64::new(u * u, u)
}

/// Calls on `maturities × strikes` and the modified slices behind them, from the codebook at
/// its own time `t`. Rows with `T = t` are intrinsic.
pub fn price_codebook(
    s: &CodebookSurface,
    spot: f64,
    maturities: &[f64],
    strikes: &[f64],
    opts: &PricingOptions,
) -> Result<(PriceSurface, Vec<ModifiedPriceSlice>)> {
    let t = s.time();
    let rows: Vec<(Vec<f64>, ModifiedPriceSlice)> = maturities
        .par_iter()
        .map(|&big_t| {
            if (big_t - t).abs() <= 1e-12 {
                let x: Vec<f64> = strikes.iter().map(|k| (k / spot).ln()).collect();
                let calls = strikes.iter().map(|k| (spot - k).max(0.0)).collect();
                return Ok((calls, ModifiedPriceSlice::zero(big_t, x)));
            }
            let o = codebook_to_modified(s, t, big_t, opts)?;
            Ok((modified_to_calls(&o, spot, strikes)?, o))
        })
        .collect::<Result<_>>()?;
    let (calls, slices): (Vec<Vec<f64>>, Vec<ModifiedPriceSlice>) = rows.into_iter().unzip();
    let p = PriceSurface::new(spot, strikes.to_vec(), maturities.to_vec(), calls.concat())?;
    Ok((p, slices))
}

#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub prices: PriceSurface,
    pub recovered: CodebookSurface,
    /// Largest `|Psi_recovered - Psi_0|` over cells off the grid boundary.
    pub max_interior_error: f64,
    /// `(T, u)` of that cell.
    pub worst_cell: (f64, f64),
}

/// Codebook at time 0 -> calls on the common `x`-lattice -> codebook, on the frequency grid of `psi0`.
pub fn codebook_round_trip(
    psi0: &CodebookSurface,
    spot: f64,
    pricing: &PricingOptions,
    inversion: &InversionOptions,
) -> Result<RoundTrip> {
    let g = *psi0.grid();
    if g.n_maturities() < 4 {
        return Err(Error::InvalidSpec("round trip needs at least 4 maturities".into()));
    }
    let last = codebook_to_modified(psi0, psi0.time(), g.last_maturity(), pricing)?;
    let half_width = pricing.half_width.unwrap_or(last.x[last.x.len() - 1]);
    let opts = PricingOptions { half_width: Some(half_width), ..*pricing };
    // strikes on the lattice nodes, inside the window of every slice
    let strikes: Vec<f64> = last.x.iter().filter(|x| x.abs() <= 0.875 * half_width).map(|x| spot * x.exp()).collect();
    let mats: Vec<f64> = (1..g.n_maturities()).map(|j| g.maturity(j)).collect();
    let (prices, _) = price_codebook(psi0, spot, &mats, &strikes, &opts)?;
    let inv = InversionOptions { frequency_step: g.frequency_step, frequency_max: g.frequency_max, ..*inversion };
    let recovered = surface_to_codebook(&prices, psi0.time(), &inv)?;
    let rg = *recovered.grid();
    let mut err = 0.0f64;
    let mut worst_cell = (f64::NAN, f64::NAN);
    for j in 1..rg.n_maturities() - 1 {
        let jj = g.maturity_index(rg.maturity(j)).ok_or_else(|| Error::Internal("maturity grids disagree".into()))?;
        for k in 1..rg.n_frequencies() - 1 {
            let e = (recovered.get(j, k) - psi0.get(jj, k)).norm();
            if e > err {
                err = e;
                worst_cell = (rg.maturity(j), rg.frequency(k));
            }
        }
    }
    Ok(RoundTrip { prices, recovered, max_interior_error: err, worst_cell })
}

// ---------------------------------------------------------------------------
// closed-form (damped) route

/// Damped remainder samples `(E(kh) - E_ref(kh)) / (w^2 - w)`, `w = alpha + ikh`, `k = 0, 1, ..`,
/// until they are negligible. `E_ref` is the Gaussian with variance `v`, or zero for `None`.
fn damped_samples<F>(cum: &F, alpha: f64, h: f64, v: Option<f64>) -> Result<Vec<Complex64>>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    const MIN_TERMS: usize = 64;
    const MAX_U: f64 = 1e4;
    let mut out = Vec::with_capacity(4096);
    let mut small = 0;
    let mut k = 0usize;
    loop {
        let u = k as f64 * h;
        let w = Complex64::new(alpha, u);
        let z = Complex64::new(u, -alpha);
        let e = cum(z)?.exp();
        if !(e.re.is_finite() && e.im.is_finite()) {
            return Err(Error::Internal(format!("cumulant is not finite at u = {u} - {alpha}i")));
        }
        let e_ref = match v {
            Some(v) => (-0.5 * v * (z * z + Complex64::new(0.0, 1.0) * z)).exp(),
            None => Complex64::new(0.0, 0.0),
        };
        let d = (e - e_ref) / (w * w - w);
        out.push(d);
        // tail beyond u is bounded by |D| u for algebraic decay
        let scale = (e.norm() + e_ref.norm()) / (w * w - w).norm();
        if scale * u.max(1.0) < 1e-16 || d.norm() == 0.0 && u > 1.0 {
            small += 1;
        } else {
            small = 0;
        }
        k += 1;
        if (k >= MIN_TERMS && small >= 8) || u > MAX_U {
            break;
        }
    }
    Ok(out)
}

/// `O(x)` from the remainder samples plus the closed form of the reference.
fn damped_value(d: &[Complex64], h: f64, alpha: f64, v: Option<f64>, x: f64) -> f64 {
    let mut acc = 0.5 * d[0].re;
    let step = Complex64::from_polar(1.0, -h * x);
    let mut rot = Complex64::new(1.0, 0.0);
    for (k, dk) in d.iter().enumerate().skip(1) {
        // re-anchor the rotation now and then to stop drift
        rot = if k % 64 == 0 { Complex64::from_polar(1.0, -(k as f64) * h * x) } else { rot * step };
        acc += (rot * dk).re;
    }
    (-alpha * x).exp() / PI * h * acc + reference_value(x, v)
}

fn reference_value(x: f64, v: Option<f64>) -> f64 {
    match v {
        Some(v) => bs_modified(x, v),
        // -e^{-alpha x} / 2pi ∫ e^{-iux} / (w^2 - w) du
        None => (-x.max(0.0)).exp(),
    }
}

/// Curvature of the cumulant at the origin, `-2 Re c(h) / h^2`, floored at zero.
fn reference_variance<F>(cum: &F, h: f64) -> f64
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    match cum(Complex64::new(h, 0.0)) {
        Ok(c) if c.re.is_finite() => (-2.0 * c.re / (h * h)).max(0.0),
        _ => 0.0,
    }
}

/// Call prices for a cumulant `c(z) = log E e^{izY}` that can be evaluated on `Im z = -alpha`.
pub fn price_from_cumulant<F>(cum: F, spot: f64, strikes: &[f64], opts: &PricingOptions) -> Result<Vec<f64>>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    opts.validate()?;
    if !(spot > 0.0) {
        return Err(Error::Data(format!("spot must be > 0, got {spot}")));
    }
    let h = opts.frequency_step;
    let v = opts.control_variate.then(|| reference_variance(&cum, h));
    let d = damped_samples(&cum, opts.alpha, h, v)?;
    strikes
        .iter()
        .map(|&k| {
            if !(k > 0.0) {
                return Err(Error::Data(format!("strike must be > 0, got {k}")));
            }
            let x = (k / spot).ln();
            let o = damped_value(&d, h, opts.alpha, v, x).max(0.0);
            Ok((spot - k).max(0.0) + k * o)
        })
        .collect()
}

/// `h [v_0 / 2 + Σ_{k>=1} Re(v_k e^{-i k h x_j})]` on the lattice `x_j = j dx`, `dx = 2π / (n h)`,
/// for `j = -n/2 .. n/2 - 1`.
fn lattice_sum(v: &[Complex64], h: f64, n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (k, vk) in v.iter().enumerate() {
        buf[k % n] += if k == 0 { 0.5 * vk } else { *vk };
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    (0..n)
        .map(|i| {
            let j = i as isize - half as isize;
            h * buf[j.rem_euclid(n as isize) as usize].re
        })
        .collect()
}

fn lattice_size(h: f64, dx_max: f64, terms: usize) -> usize {
    let need = (2.0 * PI / (h * dx_max)).ceil() as usize;
    need.max(2 * terms + 2).next_power_of_two()
}

/// Clips negative values, checks decay at the edges and packages the slice.
fn finish_slice(maturity: f64, x: Vec<f64>, mut values: Vec<f64>, opts: &PricingOptions) -> Result<ModifiedPriceSlice> {
    let edge = values[0].abs().max(values[values.len() - 1].abs());
    if edge > opts.decay_tol {
        return Err(Error::Resolution { edge_value: edge, tolerance: opts.decay_tol });
    }
    let total: f64 = values.iter().map(|v| v.abs()).sum();
    let mut neg = 0.0;
    let mut clipped = 0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            neg += -*v;
            clipped += 1;
            *v = 0.0;
        }
    }
    let fraction = if total > 0.0 { neg / total } else { 0.0 };
    if fraction > opts.clip_limit {
        return Err(Error::ClipExceeded { fraction, limit: opts.clip_limit });
    }
    Ok(ModifiedPriceSlice { maturity, x, values, clipped, clipped_fraction: fraction })
}

fn select_window(n: usize, dx: f64, half_width: f64) -> Result<(usize, usize)> {
    let half = n / 2;
    let m = (half_width / dx).ceil() as usize;
    if m + 1 >= half {
        return Err(Error::InvalidSpec(format!(
            "log-moneyness half-width {half_width} exceeds the transform range {}",
            (half - 1) as f64 * dx
        )));
    }
    Ok((half - m, half + m))
}

fn default_half_width(v: f64) -> f64 {
    (6.0 * v.max(0.0).sqrt()).max(2.0)
}

/// Modified price slice from a cumulant on the damped line, on a uniform `x`-lattice.
pub fn modified_from_cumulant<F>(cum: F, maturity: f64, opts: &PricingOptions) -> Result<ModifiedPriceSlice>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    opts.validate()?;
    let h = opts.frequency_step;
    let curvature = reference_variance(&cum, h);
    let v = opts.control_variate.then_some(curvature);
    let d = damped_samples(&cum, opts.alpha, h, v)?;
    let n = lattice_size(h, opts.dx_max, 0);
    let dx = 2.0 * PI / (n as f64 * h);
    let sums = lattice_sum(&d, h, n);
    let (lo, hi) = select_window(n, dx, opts.half_width.unwrap_or_else(|| default_half_width(curvature)))?;
    let half = (n / 2) as f64;
    let x: Vec<f64> = (lo..=hi).map(|i| (i as f64 - half) * dx).collect();
    let values = x
        .iter()
        .zip(&sums[lo..=hi])
        .map(|(&x, &s)| (-opts.alpha * x).exp() / PI * s + reference_value(x, v))
        .collect();
    finish_slice(maturity, x, values, opts)
}

// ---------------------------------------------------------------------------
// grid route

/// Modified price slice `O_t(T, .)` from a codebook on the real frequency grid.
///
/// The cumulant is only known on real `u`; a Gaussian reference with matched curvature at
/// `u = 0` absorbs the `1/u^2` tail, and the remainder is summed by the trapezoid rule.
pub fn codebook_to_modified(s: &CodebookSurface, t: f64, big_t: f64, opts: &PricingOptions) -> Result<ModifiedPriceSlice> {
    opts.validate()?;
    if s.mode() != Parametrisation::Maturity {
        return Err(Error::InvalidSpec("pricing needs a codebook in maturity form".into()));
    }
    if t > big_t + 1e-12 {
        return Err(Error::OutOfRange { what: "pricing time (must be <= T)", value: t, min: 0.0, max: big_t });
    }
    let g = s.grid();
    pi_necessary_check_range(s, t, big_t, opts.pi_tol).into_result()?;
    let du = g.frequency_step;
    let m = g.half_width();
    let zero = g.zero_column();
    let c: Vec<Complex64> = (0..=m).map(|k| s.integrate_maturity_index(t, big_t, zero + k)).collect::<Result<_>>()?;
    let v = (-2.0 * c[1].re / (du * du)).max(0.0);
    let mut r = Vec::with_capacity(m + 1);
    r.push(Complex64::new(-(0.5 * v + c[1].im / du), 0.0));
    for (k, ck) in c.iter().enumerate().skip(1) {
        let u = k as f64 * du;
        let rk = (bs_cumulant(u, v).exp() - ck.exp()) / Complex64::new(u * u, u);
        r.push(if k == m { 0.5 * rk } else { rk });
    }
    let n = lattice_size(du, opts.dx_max, m);
    let dx = 2.0 * PI / (n as f64 * du);
    let sums = lattice_sum(&r, du, n);
    let (lo, hi) = select_window(n, dx, opts.half_width.unwrap_or_else(|| default_half_width(v)))?;
    let half = (n / 2) as f64;
    let x: Vec<f64> = (lo..=hi).map(|i| (i as f64 - half) * dx).collect();
    let values = x.iter().zip(&sums[lo..=hi]).map(|(&x, &sm)| bs_modified(x, v) + sm / PI).collect();
    finish_slice(big_t, x, values, opts)
}

/// `C = (S - K)^+ + K O(log K/S)`, interpolating `O` monotonically in `x`.
pub fn modified_to_calls(o: &ModifiedPriceSlice, spot: f64, strikes: &[f64]) -> Result<Vec<f64>> {
    if !(spot > 0.0) {
        return Err(Error::Data(format!("spot must be > 0, got {spot}")));
    }
    let (lo, hi) = (o.x[0], o.x[o.x.len() - 1]);
    // interpolate the smooth part O + (e^{-x} - 1)^+, which carries no kink at 0
    let smooth: Vec<f64> = o.x.iter().zip(&o.values).map(|(&x, &v)| v + intrinsic_part(x)).collect();
    let p = Pchip::new(&o.x, &smooth)?;
    strikes
        .iter()
        .map(|&k| {
            if !(k > 0.0) {
                return Err(Error::Data(format!("strike must be > 0, got {k}")));
            }
            let x = (k / spot).ln();
            if x < lo - 1e-12 || x > hi + 1e-12 {
                return Err(Error::Extrapolation { strike: k, x, min: lo, max: hi });
            }
            let ov = (p.eval(x.clamp(lo, hi)) - intrinsic_part(x)).max(0.0);
            Ok((spot - k).max(0.0) + k * ov)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionOptions {
    pub frequency_step: f64,
    pub frequency_max: f64,
    /// Smallest `|1 - (u^2 + iu) F O(u)|` for which the logarithm is trusted.
    pub branch_floor: f64,
    /// Tolerance (relative to spot) below which a negative time value is treated as rounding.
    pub time_value_tol: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self { frequency_step: 0.05, frequency_max: 40.0, branch_floor: 1e-12, time_value_tol: 1e-12 }
    }
}

fn wrap_phase(d: f64) -> f64 {
    let two_pi = 2.0 * PI;
    d - two_pi * (d / two_pi).round()
}

/// Codebook `Psi_t(T, u) = ∂_T log(1 - (u^2 + iu) F O_t(T, .)(u))` recovered from call prices.
pub fn surface_to_codebook(p: &PriceSurface, time: f64, opts: &InversionOptions) -> Result<CodebookSurface> {
    p.validate()?;
    let nt = p.maturities.len();
    if nt < 3 {
        return Err(Error::Data(format!("need at least 3 maturities to difference in T, got {nt}")));
    }
    let dt = p.maturities[1] - p.maturities[0];
    if p.maturities.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0)) {
        return Err(Error::Data("maturities must be uniformly spaced".into()));
    }
    if p.maturities[0] < time - 1e-12 {
        return Err(Error::Data(format!("maturity {} lies before the pricing time {time}", p.maturities[0])));
    }
    let grid = GridSpec {
        maturity_start: p.maturities[0],
        maturity_step: dt,
        maturity_count: nt,
        frequency_step: opts.frequency_step,
        frequency_max: opts.frequency_max,
    };
    grid.validate()?;
    let spot = p.spot;
    let xs: Vec<f64> = p.strikes.iter().map(|k| (k / spot).ln()).collect();
    let (x_lo, x_hi) = (xs[0], xs[xs.len() - 1]);
    if !(x_lo < 0.0 && x_hi > 0.0) || xs.len() < 3 {
        return Err(Error::Data("strikes must bracket the spot".into()));
    }
    let uniform = {
        let d = xs[1] - xs[0];
        xs.windows(2).all(|w| ((w[1] - w[0]) - d).abs() <= 1e-9 * d)
    };
    let (xg, dx) = if uniform {
        (xs.clone(), xs[1] - xs[0])
    } else {
        let dmin = xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let n = ((x_hi - x_lo) / dmin).ceil() as usize;
        let d = (x_hi - x_lo) / n as f64;
        ((0..=n).map(|i| x_lo + i as f64 * d).collect(), d)
    };
    let m = grid.half_width();
    let nu = grid.n_frequencies();
    let du = grid.frequency_step;

    // per maturity: log of exp(cumulant) on u >= 0
    let logs: Vec<Vec<Complex64>> = (0..nt)
        .into_par_iter()
        .map(|i| -> Result<Vec<Complex64>> {
            let big_t = p.maturities[i];
            let mut o = Vec::with_capacity(xs.len());
            for (j, &k) in p.strikes.iter().enumerate() {
                let tv = p.price(i, j) - (spot - k).max(0.0);
                if tv < -opts.time_value_tol * spot {
                    return Err(Error::Data(format!("negative time value {tv:e} at T = {big_t}, K = {k}")));
                }
                o.push(tv.max(0.0) / k);
            }
            let smooth: Vec<f64> = xs.iter().zip(&o).map(|(&x, &v)| v + intrinsic_part(x)).collect();
            let interp = Pchip::new(&xs, &smooth)?;
            let og: Vec<f64> = if uniform {
                o
            } else {
                xg.iter().map(|&x| (interp.eval(x) - intrinsic_part(x)).max(0.0)).collect()
            };
            let atm = (interp.eval(0.0) - intrinsic_part(0.0)).max(0.0);
            let v = if atm > 0.0 {
                let s = 2.0 * norm_inv(((1.0 + atm) / 2.0).min(1.0 - 1e-16));
                s * s
            } else {
                0.0
            };
            let diff: Vec<f64> = xg.iter().zip(&og).map(|(&x, &ov)| ov - bs_modified(x, v)).collect();
            let last = diff.len() - 1;
            let mut out = vec![Complex64::new(0.0, 0.0); m + 1];
            let mut phase = 0.0;
            let mut prev_arg = 0.0;
            for (k, slot) in out.iter_mut().enumerate().skip(1) {
                let u = k as f64 * du;
                let mut f = Complex64::new(0.0, 0.0);
                for (q, (&x, &dv)) in xg.iter().zip(&diff).enumerate() {
                    let w = if q == 0 || q == last { 0.5 } else { 1.0 };
                    f += w * dv * Complex64::from_polar(1.0, u * x);
                }
                f *= dx;
                let z = bs_cumulant(u, v).exp() - Complex64::new(u * u, u) * f;
                let modulus = z.norm();
                if !(modulus > opts.branch_floor) {
                    return Err(Error::BranchFailure { maturity: big_t, frequency: u, modulus });
                }
                let arg = z.arg();
                phase += wrap_phase(arg - prev_arg);
                prev_arg = arg;
                *slot = Complex64::new(modulus.ln(), phase);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut s = CodebookSurface::zeros(grid, time)?;
    for i in 0..nt {
        for k in 1..=m {
            let d = if i == 0 {
                (-3.0 * logs[0][k] + 4.0 * logs[1][k] - logs[2][k]) / (2.0 * dt)
            } else if i == nt - 1 {
                (3.0 * logs[i][k] - 4.0 * logs[i - 1][k] + logs[i - 2][k]) / (2.0 * dt)
            } else {
                (logs[i + 1][k] - logs[i - 1][k]) / (2.0 * dt)
            };
            s.set(i, m + k, d);
            s.set(i, m - k, d.conj());
        }
    }
    debug_assert_eq!(nu, 2 * m + 1);
    Ok(s)
}

// ---------------------------------------------------------------------------

/// Fritsch-Carlson monotone cubic interpolant.
pub(crate) struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub(crate) fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Data("interpolation needs at least two points".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("interpolation nodes must be increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x: x.to_vec(), y: y.to_vec(), d })
    }

    pub(crate) fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.y[i],
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

    fn bs_cum(sigma: f64, tau: f64) -> impl Fn(Complex64) -> Result<Complex64> {
        move |z: Complex64| Ok(-0.5 * sigma * sigma * tau * (z * z + I * z))
    }

    fn bs_call(s: f64, k: f64, tau: f64, sigma: f64) -> f64 {
        let sv = sigma * tau.sqrt();
        let d1 = ((s / k).ln() + 0.5 * sv * sv) / sv;
        s * norm_cdf(d1) - k * norm_cdf(d1 - sv)
    }

    #[test]
    fn bs_modified_atm() {
        let want = 2.0 * norm_cdf(0.1) - 1.0;
        assert_abs_diff_eq!(bs_modified(0.0, 0.04), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.0797, epsilon = 5e-5);
    }

    #[test]
    fn zero_cumulant_gives_intrinsic() {
        let strikes = [0.5, 0.9, 1.0, 1.3, 2.0];
        let c = price_from_cumulant(|_| Ok(Complex64::new(0.0, 0.0)), 1.0, &strikes, &PricingOptions::default()).unwrap();
        for (k, c) in strikes.iter().zip(c) {
            assert_abs_diff_eq!(c, (1.0f64 - k).max(0.0), epsilon = 1e-13);
        }
    }

    #[test]
    fn damped_bs_atm() {
        let c = price_from_cumulant(bs_cum(0.2, 1.0), 1.0, &[1.0], &PricingOptions::default()).unwrap()[0];
        assert_abs_diff_eq!(c, bs_call(1.0, 1.0, 1.0, 0.2), epsilon = 1e-12);
    }

    #[test]
    fn damped_slice_matches_oracle() {
        let o = modified_from_cumulant(bs_cum(0.2, 1.0), 1.0, &PricingOptions::default()).unwrap();
        for (x, v) in o.x.iter().zip(&o.values) {
            assert_abs_diff_eq!(*v, bs_modified(*x, 0.04), epsilon = 1e-12);
        }
        assert!(o.x[0] <= -2.0 && o.x[o.x.len() - 1] >= 2.0);
    }

    #[test]
    fn grid_route_bs() {
        let g = GridSpec::new(0.05, 21, 0.05, 40.0).unwrap();
        let s = CodebookSurface::from_fn(g, 0.0, |_, u| bs_cumulant(u, 0.04)).unwrap();
        let o = codebook_to_modified(&s, 0.0, 1.0, &PricingOptions::default()).unwrap();
        let i0 = o.x.iter().position(|x| x.abs() < 1e-12).unwrap();
        assert_abs_diff_eq!(o.values[i0], 2.0 * norm_cdf(0.1) - 1.0, epsilon = 1e-12);
        assert!(o.values[0] < 1e-4 && o.values[o.values.len() - 1] < 1e-4);
        let c = modified_to_calls(&o, 1.0, &[0.8, 1.0, 1.25]).unwrap();
        for (k, c) in [0.8, 1.0, 1.25].iter().zip(c) {
            assert_abs_diff_eq!(c, bs_call(1.0, *k, 1.0, 0.2), epsilon = 1e-6);
        }
    }

    #[test]
    fn grid_route_zero_horizon() {
        let g = GridSpec::new(0.05, 21, 0.05, 40.0).unwrap();
        let s = CodebookSurface::from_fn(g, 0.0, |_, u| bs_cumulant(u, 0.04)).unwrap();
        let o = codebook_to_modified(&s, 0.5, 0.5, &PricingOptions::default()).unwrap();
        assert!(o.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grid_route_refuses_bad_codebook() {
        let g = GridSpec::new(0.05, 21, 0.05, 40.0).unwrap();
        let s = CodebookSurface::from_fn(g, 0.0, |_, _| Complex64::new(1.0, 0.0)).unwrap();
        assert!(matches!(
            codebook_to_modified(&s, 0.0, 1.0, &PricingOptions::default()),
            Err(Error::PiCheckFailed { .. })
        ));
    }

    #[test]
    fn calls_refuse_extrapolation() {
        let o = ModifiedPriceSlice::zero(1.0, vec![-1.0, 0.0, 1.0]);
        assert!(matches!(modified_to_calls(&o, 1.0, &[0.1]), Err(Error::Extrapolation { .. })));
        let c = modified_to_calls(&o, 1.0, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(c, vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn put_call_parity() {
        let opts = PricingOptions::default();
        let strikes: Vec<f64> = (0..11).map(|i| 0.6 + 0.1 * i as f64).collect();
        let calls = price_from_cumulant(bs_cum(0.3, 0.5), 1.0, &strikes, &opts).unwrap();
        for (k, c) in strikes.iter().zip(calls) {
            let put = c - 1.0 + k;
            assert!(put >= -1e-14 && put <= *k + 1e-14);
        }
    }

    #[test]
    fn pchip_exact_at_nodes_and_monotone() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [5.0, 4.0, 1.0, 0.9, 0.0];
        let p = Pchip::new(&x, &y).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(p.eval(*a), *b);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            let v = p.eval(i as f64 / 100.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn inversion_needs_three_maturities() {
        let p = PriceSurface::new(1.0, vec![0.5, 1.0, 1.5], vec![0.5, 1.0], vec![0.5, 0.1, 0.0, 0.5, 0.15, 0.01]).unwrap();
        assert!(matches!(surface_to_codebook(&p, 0.0, &InversionOptions::default()), Err(Error::Data(_))));
    }

    #[test]
    fn intrinsic_surface_inverts_to_zero() {
        let strikes: Vec<f64> = (-100..=100).map(|i| (i as f64 * 0.02).exp()).collect();
        let intrinsic: Vec<f64> = strikes.iter().map(|k| (1.0 - k).max(0.0)).collect();
        let prices: Vec<f64> = (0..3).flat_map(|_| intrinsic.clone()).collect();
        let p = PriceSurface::new(1.0, strikes, vec![0.1, 0.2, 0.3], prices).unwrap();
        let s = surface_to_codebook(&p, 0.0, &InversionOptions::default()).unwrap();
        assert!(s.values().iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn negative_time_value_is_rejected() {
        let strikes = vec![0.5, 1.0, 1.5];
        let prices = vec![0.4, 0.1, 0.0, 0.5, 0.1, 0.0, 0.5, 0.1, 0.0];
        let p = PriceSurface::new(1.0, strikes, vec![0.1, 0.2, 0.3], prices).unwrap();
        assert!(matches!(surface_to_codebook(&p, 0.0, &InversionOptions::default()), Err(Error::Data(_))));
    }
}
