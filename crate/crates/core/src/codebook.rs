//! Grid representation of the codebook `Psi_t(T, u)`.
//!
//! Values live on a uniform maturity grid `T_j = T_0 + j dT` and a symmetric
//! frequency grid `u_k = k du`, `k = -M..=M`. Every maturity integral is the exact
//! integral of the piecewise-linear interpolant in `T` (the trapezoid rule), so
//! integrals are additive in their limits and linear in the surface values.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub maturity_start: f64,
    pub maturity_step: f64,
    pub maturity_count: usize,
    pub frequency_step: f64,
    pub frequency_max: f64,
}

impl Default for GridSpec {
    /// `dT = 0.05` on `[0, 0.5]`, `du = 0.05` on `[-40, 40]`.
    fn default() -> Self {
        Self {
            maturity_start: 0.0,
            maturity_step: 0.05,
            maturity_count: 11,
            frequency_step: 0.05,
            frequency_max: 40.0,
        }
    }
}

impl GridSpec {
    pub fn new(maturity_step: f64, maturity_count: usize, frequency_step: f64, frequency_max: f64) -> Result<Self> {
        let g = Self { maturity_start: 0.0, maturity_step, maturity_count, frequency_step, frequency_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.maturity_step.is_finite() && self.maturity_step > 0.0) {
            return Err(Error::InvalidSpec(format!("maturity step must be > 0, got {}", self.maturity_step)));
        }
        if !(self.maturity_start.is_finite() && self.maturity_start >= 0.0) {
            return Err(Error::InvalidSpec(format!("maturity start must be >= 0, got {}", self.maturity_start)));
        }
        if self.maturity_count < 2 {
            return Err(Error::InvalidSpec("maturity grid needs at least two points".into()));
        }
        if !(self.frequency_step.is_finite() && self.frequency_step > 0.0) {
            return Err(Error::InvalidSpec(format!("frequency step must be > 0, got {}", self.frequency_step)));
        }
        let m = self.frequency_max / self.frequency_step;
        if !(m.is_finite() && m >= 1.0 - 1e-9) || (m - m.round()).abs() > 1e-6 {
            return Err(Error::InvalidSpec(format!(
                "frequency max {} must be a positive multiple of the step {}",
                self.frequency_max, self.frequency_step
            )));
        }
        Ok(())
    }

    /// `M`, the number of positive frequencies.
    pub fn half_width(&self) -> usize {
        (self.frequency_max / self.frequency_step).round() as usize
    }

    pub fn n_frequencies(&self) -> usize {
        2 * self.half_width() + 1
    }

    pub fn n_maturities(&self) -> usize {
        self.maturity_count
    }

    pub fn maturity(&self, j: usize) -> f64 {
        self.maturity_start + j as f64 * self.maturity_step
    }

    pub fn last_maturity(&self) -> f64 {
        self.maturity(self.maturity_count - 1)
    }

    pub fn maturities(&self) -> Vec<f64> {
        (0..self.maturity_count).map(|j| self.maturity(j)).collect()
    }

    /// Frequency at column `k` (column `M` is `u = 0`).
    pub fn frequency(&self, k: usize) -> f64 {
        (k as f64 - self.half_width() as f64) * self.frequency_step
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_frequencies()).map(|k| self.frequency(k)).collect()
    }

    pub fn zero_column(&self) -> usize {
        self.half_width()
    }

    /// Column index of a frequency that lies on the grid.
    pub fn frequency_index(&self, u: f64) -> Result<usize> {
        let pos = u / self.frequency_step + self.half_width() as f64;
        let k = pos.round();
        if (pos - k).abs() > 1e-6 || k < 0.0 || k as usize >= self.n_frequencies() {
            return Err(Error::OutOfRange {
                what: "frequency (must be a grid point)",
                value: u,
                min: -self.frequency_max,
                max: self.frequency_max,
            });
        }
        Ok(k as usize)
    }

    /// Row index of a maturity that lies on the grid.
    pub fn maturity_index(&self, t: f64) -> Option<usize> {
        let pos = (t - self.maturity_start) / self.maturity_step;
        let j = pos.round();
        if (pos - j).abs() <= ALIGN_TOL && j >= 0.0 && (j as usize) < self.maturity_count {
            Some(j as usize)
        } else {
            None
        }
    }

    /// Index of the cell `[T_j, T_{j+1}]` containing `t`, clamped to the grid.
    fn cell(&self, t: f64) -> usize {
        let pos = (t - self.maturity_start) / self.maturity_step;
        (pos.floor().max(0.0) as usize).min(self.maturity_count - 2)
    }

    fn check_maturity_range(&self, what: &'static str, t: f64) -> Result<()> {
        let lo = self.maturity_start;
        let hi = self.last_maturity();
        if !(t >= lo - ALIGN_TOL && t <= hi + ALIGN_TOL) {
            return Err(Error::OutOfRange { what, value: t, min: lo, max: hi });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrisation {
    /// Rows indexed by maturity `T`.
    Maturity,
    /// Rows indexed by time to maturity `x = T - t`.
    Musiela,
}

/// `Psi_t(T_j, u_k)`, row-major in `T` then `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSurface {
    grid: GridSpec,
    values: Vec<Complex64>,
    time: f64,
    mode: Parametrisation,
}

impl CodebookSurface {
    pub fn zeros(grid: GridSpec, time: f64) -> Result<Self> {
        grid.validate()?;
        Ok(Self {
            values: vec![ZERO; grid.n_maturities() * grid.n_frequencies()],
            grid,
            time,
            mode: Parametrisation::Maturity,
        })
    }

    /// Samples `f(T, u)` on the grid; the `u = 0` column is pinned to zero.
    pub fn from_fn(grid: GridSpec, time: f64, mut f: impl FnMut(f64, f64) -> Complex64) -> Result<Self> {
        let mut s = Self::zeros(grid, time)?;
        let nu = grid.n_frequencies();
        let zero = grid.zero_column();
        for j in 0..grid.n_maturities() {
            let t = grid.maturity(j);
            for k in 0..nu {
                if k != zero {
                    s.values[j * nu + k] = f(t, grid.frequency(k));
                }
            }
        }
        Ok(s)
    }

    /// Fallible variant of [`CodebookSurface::from_fn`].
    pub fn try_from_fn(
        grid: GridSpec,
        time: f64,
        mut f: impl FnMut(f64, f64) -> Result<Complex64>,
    ) -> Result<Self> {
        let mut s = Self::zeros(grid, time)?;
        let nu = grid.n_frequencies();
        let zero = grid.zero_column();
        for j in 0..grid.n_maturities() {
            let t = grid.maturity(j);
            for k in 0..nu {
                if k != zero {
                    s.values[j * nu + k] = f(t, grid.frequency(k))?;
                }
            }
        }
        Ok(s)
    }

    /// Builds a surface from raw row-major values (the `u = 0` column is pinned).
    pub fn from_values(grid: GridSpec, time: f64, mode: Parametrisation, mut values: Vec<Complex64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.n_maturities() * grid.n_frequencies() {
            return Err(Error::Data(format!(
                "expected {} values, got {}",
                grid.n_maturities() * grid.n_frequencies(),
                values.len()
            )));
        }
        let nu = grid.n_frequencies();
        for j in 0..grid.n_maturities() {
            values[j * nu + grid.zero_column()] = ZERO;
        }
        Ok(Self { grid, values, time, mode })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn mode(&self) -> Parametrisation {
        self.mode
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn get(&self, j: usize, k: usize) -> Complex64 {
        self.values[j * self.grid.n_frequencies() + k]
    }

    /// Writes one cell; writes to the `u = 0` column are ignored.
    pub fn set(&mut self, j: usize, k: usize, v: Complex64) {
        if k != self.grid.zero_column() {
            let nu = self.grid.n_frequencies();
            self.values[j * nu + k] = v;
        }
    }

    pub fn row(&self, j: usize) -> &[Complex64] {
        let nu = self.grid.n_frequencies();
        &self.values[j * nu..(j + 1) * nu]
    }

    /// Value at an arbitrary maturity inside the grid, linear in `T`.
    pub fn interpolate(&self, t: f64, k: usize) -> Complex64 {
        let j = self.grid.cell(t);
        let w = ((t - self.grid.maturity(j)) / self.grid.maturity_step).clamp(0.0, 1.0);
        self.get(j, k) * (1.0 - w) + self.get(j + 1, k) * w
    }

    /// Adds `scale * other` in place (grids must match).
    pub fn axpy(&mut self, scale: f64, other: &CodebookSurface) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Data("codebook grids differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Largest cell-wise modulus difference.
    pub fn max_abs_diff(&self, other: &CodebookSurface) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `∫_t^T Psi(r, u_k) dr` for column `k`.
    pub fn integrate_maturity_index(&self, t: f64, big_t: f64, k: usize) -> Result<Complex64> {
        self.grid.check_maturity_range("integration start", t)?;
        self.grid.check_maturity_range("integration end", big_t)?;
        if t > big_t + ALIGN_TOL {
            return Err(Error::OutOfRange { what: "integration start (must be <= T)", value: t, min: self.grid.maturity_start, max: big_t });
        }
        Ok(integrate_piecewise_linear(&self.grid, t, big_t, |j| self.get(j, k)))
    }

    /// `∫_t^T Psi(r, u) dr` for a grid frequency `u`.
    pub fn integrate_maturity(&self, t: f64, big_t: f64, u: f64) -> Result<Complex64> {
        let k = self.grid.frequency_index(u)?;
        self.integrate_maturity_index(t, big_t, k)
    }

    /// `u -> ∫_t^T Psi(r, u) dr` on the whole frequency grid.
    pub fn cumulant(&self, t: f64, big_t: f64) -> Result<Vec<Complex64>> {
        (0..self.grid.n_frequencies()).map(|k| self.integrate_maturity_index(t, big_t, k)).collect()
    }

    /// `‖Psi‖_{T,m} = ∫_0^T sup_{|u| <= m} |Psi(r, u)| dr` (trapezoid in `T`).
    pub fn seminorm(&self, big_t: f64, m: f64) -> Result<f64> {
        self.grid.check_maturity_range("seminorm horizon", big_t)?;
        if m > self.grid.frequency_max + 1e-9 || m < 0.0 {
            return Err(Error::OutOfRange { what: "seminorm frequency bound", value: m, min: 0.0, max: self.grid.frequency_max });
        }
        let sups = self.row_sups(m);
        let v = integrate_piecewise_linear(&self.grid, self.grid.maturity_start, big_t, |j| Complex64::new(sups[j], 0.0));
        Ok(v.re)
    }

    fn row_sups(&self, m: f64) -> Vec<f64> {
        let du = self.grid.frequency_step;
        (0..self.grid.n_maturities())
            .map(|j| {
                self.row(j)
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| self.grid.frequency(*k).abs() <= m + 1e-9 * du)
                    .map(|(_, v)| v.norm())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    fn shift_rows(&self) -> Result<usize> {
        if self.grid.maturity_start != 0.0 {
            return Err(Error::InvalidSpec("Musiela shifts need a maturity grid starting at 0".into()));
        }
        let pos = self.time / self.grid.maturity_step;
        if (pos - pos.round()).abs() > ALIGN_TOL || pos < -ALIGN_TOL {
            return Err(Error::Alignment { time: self.time, step: self.grid.maturity_step });
        }
        Ok(pos.round() as usize)
    }

    /// `Psǐ_t(x, u) := Psi_t(t + x, u)`; rows past the grid repeat the last row.
    pub fn to_musiela(&self) -> Result<CodebookSurface> {
        if self.mode != Parametrisation::Maturity {
            return Err(Error::InvalidSpec("surface is already in Musiela form".into()));
        }
        let s = self.shift_rows()?;
        let n = self.grid.n_maturities();
        let mut out = self.clone();
        out.mode = Parametrisation::Musiela;
        let nu = self.grid.n_frequencies();
        for j in 0..n {
            let src = (j + s).min(n - 1);
            out.values[j * nu..(j + 1) * nu].copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    /// Inverse of [`CodebookSurface::to_musiela`]; the frozen rows `T < t` take the `x = 0` row.
    pub fn from_musiela(&self) -> Result<CodebookSurface> {
        if self.mode != Parametrisation::Musiela {
            return Err(Error::InvalidSpec("surface is not in Musiela form".into()));
        }
        let s = self.shift_rows()?;
        let n = self.grid.n_maturities();
        let mut out = self.clone();
        out.mode = Parametrisation::Maturity;
        let nu = self.grid.n_frequencies();
        for j in 0..n {
            let src = j.saturating_sub(s);
            out.values[j * nu..(j + 1) * nu].copy_from_slice(self.row(src));
        }
        Ok(out)
    }
}

/// Exact integral over `[a, b]` of the piecewise-linear interpolant through `f(j)`.
pub(crate) fn integrate_piecewise_linear(
    grid: &GridSpec,
    a: f64,
    b: f64,
    f: impl Fn(usize) -> Complex64,
) -> Complex64 {
    if b <= a {
        return ZERO;
    }
    let h = grid.maturity_step;
    let start = grid.maturity_start;
    let first = grid.cell(a);
    let last = grid.cell(b);
    let mut acc = ZERO;
    for j in first..=last {
        let lo = grid.maturity(j);
        let p = a.max(lo);
        let q = b.min(lo + h);
        if q <= p {
            continue;
        }
        let (fj, fj1) = (f(j), f(j + 1));
        let at = |x: f64| {
            let w = (x - lo) / h;
            fj * (1.0 - w) + fj1 * w
        };
        acc += (q - p) * 0.5 * (at(p) + at(q));
    }
    let _ = start;
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PiViolationKind {
    /// `Re ∫ Psi > tol`
    PositiveRealPart,
    /// `|∫ Psi(., 0)| > tol`
    NonzeroAtOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiViolation {
    pub start: f64,
    pub end: f64,
    pub frequency: f64,
    pub value: f64,
    pub kind: PiViolationKind,
}

/// Outcome of [`pi_necessary_check`]. Only the first `MAX_LISTED` violations are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiReport {
    pub pairs_checked: usize,
    pub violation_count: usize,
    pub worst: f64,
    pub violations: Vec<PiViolation>,
}

impl PiReport {
    pub const MAX_LISTED: usize = 10_000;

    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::PiCheckFailed { violations: self.violation_count, worst: self.worst })
        }
    }
}

pub const DEFAULT_PI_TOL: f64 = 1e-10;

/// Necessary conditions for `u -> ∫_s^T Psi(r, u) dr` to lie in Pi, for all grid
/// pairs `t <= s <= T`: nonpositive real part and a vanishing value at `u = 0`.
/// An empty report does not certify membership.
pub fn pi_necessary_check(s: &CodebookSurface, t: f64, tol: f64) -> PiReport {
    pi_necessary_check_range(s, t, s.grid.last_maturity(), tol)
}

/// [`pi_necessary_check`] restricted to pairs inside `[t, end]`.
pub fn pi_necessary_check_range(s: &CodebookSurface, t: f64, end: f64, tol: f64) -> PiReport {
    let g = &s.grid;
    let t = t.max(g.maturity_start);
    let end = end.min(g.last_maturity());
    // node list: t itself, then every grid maturity in (t, end], then end
    let mut nodes = vec![t];
    for j in 0..g.n_maturities() {
        let tj = g.maturity(j);
        if tj > t + ALIGN_TOL && tj < end - ALIGN_TOL {
            nodes.push(tj);
        }
    }
    if end > t + ALIGN_TOL {
        nodes.push(end);
    }
    let nu = g.n_frequencies();
    let zero = g.zero_column();
    let mut report = PiReport { pairs_checked: 0, violation_count: 0, worst: 0.0, violations: Vec::new() };
    // cumulative integrals from t, per column
    let mut cum = vec![ZERO; nodes.len() * nu];
    for (n, w) in nodes.windows(2).enumerate() {
        for k in 0..nu {
            let inc = integrate_piecewise_linear(g, w[0], w[1], |j| s.get(j, k));
            cum[(n + 1) * nu + k] = cum[n * nu + k] + inc;
        }
    }
    for a in 0..nodes.len() {
        for b in (a + 1)..nodes.len() {
            report.pairs_checked += 1;
            for k in 0..nu {
                let v = cum[b * nu + k] - cum[a * nu + k];
                let (bad, kind, val) = if k == zero {
                    (v.norm() > tol, PiViolationKind::NonzeroAtOrigin, v.norm())
                } else {
                    (v.re > tol, PiViolationKind::PositiveRealPart, v.re)
                };
                if bad {
                    report.violation_count += 1;
                    report.worst = report.worst.max(val);
                    if report.violations.len() < PiReport::MAX_LISTED {
                        report.violations.push(PiViolation {
                            start: nodes[a],
                            end: nodes[b],
                            frequency: g.frequency(k),
                            value: val,
                            kind,
                        });
                    }
                }
            }
        }
    }
    report
}
