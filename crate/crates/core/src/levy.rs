//! Parametric Lévy-Khintchine triplets and their characteristic exponents.
//!
//! Exponents are normalised so that `E exp(iz L_1) = exp(psi(z))`. Triplets are
//! stored relative to the truncation function `h(x) = x 1{|x| <= 1}`; exponents
//! built with [`CharExponent::pi`] are evaluated in the compensated form
//! `-(u^2 + iu) c / 2 + ∫ (e^{iux} - 1 - iu (e^x - 1)) K(dx)`, which makes
//! `psi(-i) = 0` hold by construction.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Jump part of a Lévy triplet. All families have finite variation, so
/// `∫ (e^{izx} - 1) K(dx)` exists on the family strip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JumpSpec {
    None,
    /// Compound Poisson with `Exp(theta)` distributed positive jumps.
    CompoundPoissonExp { rate: f64, theta: f64 },
    /// Compound Poisson with finitely many jump sizes, given as `(size, probability)`.
    CompoundPoissonDiscrete { rate: f64, atoms: Vec<(f64, f64)> },
    /// Gamma process: `K(dx) = shape x^{-1} e^{-rate x} dx` on `x > 0`.
    Gamma { shape: f64, rate: f64 },
}

impl Default for JumpSpec {
    fn default() -> Self {
        JumpSpec::None
    }
}

impl JumpSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            JumpSpec::None => Ok(()),
            JumpSpec::CompoundPoissonExp { rate, theta } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::InvalidSpec(format!("jump rate must be >= 0, got {rate}")));
                }
                if !(theta.is_finite() && *theta > 0.0) {
                    return Err(Error::InvalidSpec(format!("theta must be > 0, got {theta}")));
                }
                Ok(())
            }
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::InvalidSpec(format!("jump rate must be >= 0, got {rate}")));
                }
                if atoms.is_empty() {
                    return Err(Error::InvalidSpec("discrete jump law needs at least one atom".into()));
                }
                let mut total = 0.0;
                for &(size, p) in atoms {
                    if !size.is_finite() || size == 0.0 {
                        return Err(Error::InvalidSpec(format!("atom size must be finite and nonzero, got {size}")));
                    }
                    if !(p.is_finite() && p >= 0.0) {
                        return Err(Error::InvalidSpec(format!("atom probability must be >= 0, got {p}")));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(format!("atom probabilities sum to {total}, expected 1")));
                }
                Ok(())
            }
            JumpSpec::Gamma { shape, rate } => {
                if !(shape.is_finite() && *shape > 0.0) {
                    return Err(Error::InvalidSpec(format!("gamma shape must be > 0, got {shape}")));
                }
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::InvalidSpec(format!("gamma rate must be > 0, got {rate}")));
                }
                Ok(())
            }
        }
    }

    /// True if the Lévy measure charges only `(0, ∞)`.
    pub fn is_positive(&self) -> bool {
        match self {
            JumpSpec::CompoundPoissonDiscrete { atoms, .. } => atoms.iter().all(|&(x, _)| x > 0.0),
            _ => true,
        }
    }

    pub fn is_none(&self) -> bool {
        match self {
            JumpSpec::None => true,
            JumpSpec::CompoundPoissonExp { rate, .. } | JumpSpec::CompoundPoissonDiscrete { rate, .. } => {
                *rate == 0.0
            }
            JumpSpec::Gamma { .. } => false,
        }
    }

    /// Lower bound of the admissible `Im z` (exclusive); `None` if unbounded.
    pub fn strip_lower(&self) -> Option<f64> {
        match self {
            JumpSpec::CompoundPoissonExp { theta, .. } => Some(-theta),
            JumpSpec::Gamma { rate, .. } => Some(-rate),
            _ => None,
        }
    }

    /// `∫ (e^{izx} - 1) K(dx)`, no domain check.
    pub(crate) fn transform(&self, z: Complex64) -> Complex64 {
        match self {
            JumpSpec::None => Complex64::new(0.0, 0.0),
            JumpSpec::CompoundPoissonExp { rate, theta } => *rate * I * z / (*theta - I * z),
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                let s: Complex64 = atoms.iter().map(|&(x, p)| p * ((I * z * x).exp() - 1.0)).sum();
                *rate * s
            }
            JumpSpec::Gamma { shape, rate } => -*shape * (1.0 - I * z / *rate).ln(),
        }
    }

    /// Derivative of [`JumpSpec::transform`] in `z`.
    pub(crate) fn transform_deriv(&self, z: Complex64) -> Complex64 {
        match self {
            JumpSpec::None => Complex64::new(0.0, 0.0),
            JumpSpec::CompoundPoissonExp { rate, theta } => {
                let d = *theta - I * z;
                *rate * I * *theta / (d * d)
            }
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                let s: Complex64 = atoms.iter().map(|&(x, p)| p * I * x * (I * z * x).exp()).sum();
                *rate * s
            }
            JumpSpec::Gamma { shape, rate } => I * *shape / (*rate - I * z),
        }
    }

    /// `∫ h(x) K(dx)` for `h(x) = x 1{|x| <= 1}`.
    pub(crate) fn truncated_mean(&self) -> f64 {
        match self {
            JumpSpec::None => 0.0,
            JumpSpec::CompoundPoissonExp { rate, theta } => {
                rate * (1.0 - (-theta).exp() * (1.0 + theta)) / theta
            }
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                rate * atoms.iter().filter(|(x, _)| x.abs() <= 1.0).map(|&(x, p)| x * p).sum::<f64>()
            }
            JumpSpec::Gamma { shape, rate } => shape * (1.0 - (-rate).exp()) / rate,
        }
    }

    /// `∫ x K(dx)`.
    pub fn mean(&self) -> f64 {
        match self {
            JumpSpec::None => 0.0,
            JumpSpec::CompoundPoissonExp { rate, theta } => rate / theta,
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                rate * atoms.iter().map(|&(x, p)| x * p).sum::<f64>()
            }
            JumpSpec::Gamma { shape, rate } => shape / rate,
        }
    }

    /// `∫ x^2 K(dx)`.
    pub fn second_moment(&self) -> f64 {
        match self {
            JumpSpec::None => 0.0,
            JumpSpec::CompoundPoissonExp { rate, theta } => 2.0 * rate / (theta * theta),
            JumpSpec::CompoundPoissonDiscrete { rate, atoms } => {
                rate * atoms.iter().map(|&(x, p)| x * x * p).sum::<f64>()
            }
            JumpSpec::Gamma { shape, rate } => shape / (rate * rate),
        }
    }

    /// `∫ (e^x - 1) K(dx)`, requires `∫_{x>1} e^x K(dx) < ∞`.
    pub fn exp_compensator(&self) -> Result<f64> {
        if let Some(lower) = self.strip_lower() {
            if lower >= -1.0 {
                return Err(Error::InvalidSpec(format!(
                    "jump law {self:?} has no exponential moment (needs a strip below Im z = -1)"
                )));
            }
        }
        Ok(self.transform(Complex64::new(0.0, -1.0)).re)
    }

    /// Superposition of two independent jump parts, when it stays in one family.
    pub fn compose(&self, other: &JumpSpec) -> Result<JumpSpec> {
        use JumpSpec::*;
        if self.is_none() {
            return Ok(other.clone());
        }
        if other.is_none() {
            return Ok(self.clone());
        }
        match (self, other) {
            (CompoundPoissonExp { rate: r1, theta: t1 }, CompoundPoissonExp { rate: r2, theta: t2 }) if t1 == t2 => {
                Ok(CompoundPoissonExp { rate: r1 + r2, theta: *t1 })
            }
            (CompoundPoissonDiscrete { rate: r1, atoms: a1 }, CompoundPoissonDiscrete { rate: r2, atoms: a2 }) => {
                let total = r1 + r2;
                let atoms = a1
                    .iter()
                    .map(|&(x, p)| (x, p * r1 / total))
                    .chain(a2.iter().map(|&(x, p)| (x, p * r2 / total)))
                    .collect();
                Ok(CompoundPoissonDiscrete { rate: total, atoms })
            }
            (Gamma { shape: s1, rate: r1 }, Gamma { shape: s2, rate: r2 }) if r1 == r2 => {
                Ok(Gamma { shape: s1 + s2, rate: *r1 })
            }
            _ => Err(Error::InvalidSpec(format!(
                "superposition of {self:?} and {other:?} leaves the parametric families"
            ))),
        }
    }
}

/// Lévy-Khintchine triplet `(b, c, K)` relative to `h(x) = x 1{|x| <= 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyTriplet {
    pub drift: f64,
    pub diffusion: f64,
    #[serde(default)]
    pub jumps: JumpSpec,
}

impl LevyTriplet {
    pub fn new(drift: f64, diffusion: f64, jumps: JumpSpec) -> Result<Self> {
        let t = Self { drift, diffusion, jumps };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.drift.is_finite() {
            return Err(Error::InvalidSpec(format!("drift must be finite, got {}", self.drift)));
        }
        if !(self.diffusion.is_finite() && self.diffusion >= 0.0) {
            return Err(Error::InvalidSpec(format!("diffusion must be >= 0, got {}", self.diffusion)));
        }
        self.jumps.validate()
    }

    /// Triplet of the sum of two independent Lévy processes.
    pub fn compose(&self, other: &LevyTriplet) -> Result<LevyTriplet> {
        LevyTriplet::new(
            self.drift + other.drift,
            self.diffusion + other.diffusion,
            self.jumps.compose(&other.jumps)?,
        )
    }
}

/// Set of `Im z` on which an exponent may be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    /// `lower < Im z` (`lower = None` means no bound).
    Strip { lower: Option<f64> },
    RealOnly,
}

impl Domain {
    pub fn contains(&self, z: Complex64) -> bool {
        match self {
            Domain::Strip { lower } => z.im.is_finite() && lower.map_or(true, |l| z.im > l),
            Domain::RealOnly => z.im == 0.0,
        }
    }

    fn describe(&self) -> String {
        match self {
            Domain::Strip { lower: Some(l) } => format!("Im z > {l}"),
            Domain::Strip { lower: None } => "whole plane".into(),
            Domain::RealOnly => "real axis only".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Form {
    /// `izb - z^2 c / 2 + ∫ (e^{izx} - 1 - iz h(x)) K(dx)`
    Truncated,
    /// `-(z^2 + iz) c / 2 + ∫ (e^{izx} - 1 - iz (e^x - 1)) K(dx)`
    Compensated,
}

/// Characteristic exponent of a parametric Lévy process.
#[derive(Debug, Clone, PartialEq)]
pub struct CharExponent {
    triplet: LevyTriplet,
    domain: Domain,
    pi_member: bool,
    form: Form,
    // ∫ h dK and ∫ (e^x - 1) dK, cached
    trunc_mean: f64,
    exp_comp: f64,
}

impl CharExponent {
    /// Exponent of a general triplet.
    pub fn new(triplet: LevyTriplet) -> Result<Self> {
        triplet.validate()?;
        let trunc_mean = triplet.jumps.truncated_mean();
        Ok(Self {
            domain: Domain::Strip { lower: triplet.jumps.strip_lower() },
            triplet,
            pi_member: false,
            form: Form::Truncated,
            trunc_mean,
            exp_comp: 0.0,
        })
    }

    /// Exponent in the martingale class: `psi(-i) = 0` by construction.
    pub fn pi(diffusion: f64, jumps: JumpSpec) -> Result<Self> {
        jumps.validate()?;
        if !(diffusion.is_finite() && diffusion >= 0.0) {
            return Err(Error::InvalidSpec(format!("diffusion must be >= 0, got {diffusion}")));
        }
        let exp_comp = jumps.exp_compensator()?;
        let trunc_mean = jumps.truncated_mean();
        let drift = -0.5 * diffusion - exp_comp + trunc_mean;
        Ok(Self {
            domain: Domain::Strip { lower: jumps.strip_lower() },
            triplet: LevyTriplet { drift, diffusion, jumps },
            pi_member: true,
            form: Form::Compensated,
            trunc_mean,
            exp_comp,
        })
    }

    /// Black-Scholes exponent `-(u^2 + iu) sigma^2 / 2`.
    pub fn black_scholes(sigma: f64) -> Result<Self> {
        Self::pi(sigma * sigma, JumpSpec::None)
    }

    /// Brownian motion with drift `drift` and volatility `sigma`.
    pub fn brownian(drift: f64, sigma: f64) -> Result<Self> {
        Self::new(LevyTriplet::new(drift, sigma * sigma, JumpSpec::None)?)
    }

    /// Subordinator with linear drift `drift_rate >= 0` and positive jumps.
    pub fn subordinator(jumps: JumpSpec, drift_rate: f64) -> Result<Self> {
        jumps.validate()?;
        if !jumps.is_positive() {
            return Err(Error::InvalidSpec("a subordinator needs positive jumps only".into()));
        }
        if !(drift_rate.is_finite() && drift_rate >= 0.0) {
            return Err(Error::InvalidSpec(format!("subordinator drift must be >= 0, got {drift_rate}")));
        }
        let trunc_mean = jumps.truncated_mean();
        Self::new(LevyTriplet::new(drift_rate + trunc_mean, 0.0, jumps)?)
    }

    pub fn triplet(&self) -> &LevyTriplet {
        &self.triplet
    }

    pub fn jumps(&self) -> &JumpSpec {
        &self.triplet.jumps
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pi_member(&self) -> bool {
        self.pi_member
    }

    /// Drift of the process without truncation (only meaningful for finite variation).
    pub fn linear_drift(&self) -> f64 {
        self.triplet.drift - self.trunc_mean
    }

    /// True if this is the exponent of a subordinator without diffusion.
    pub fn is_subordinator(&self) -> bool {
        self.triplet.diffusion == 0.0 && self.triplet.jumps.is_positive() && self.linear_drift() >= -1e-15
    }

    fn check(&self, z: Complex64) -> Result<()> {
        if self.domain.contains(z) {
            Ok(())
        } else {
            Err(Error::StripDomain { im: z.im, bound: self.domain.describe() })
        }
    }

    pub fn eval(&self, z: Complex64) -> Result<Complex64> {
        self.check(z)?;
        Ok(self.eval_unchecked(z))
    }

    pub fn eval_real(&self, u: f64) -> Complex64 {
        self.eval_unchecked(Complex64::new(u, 0.0))
    }

    pub(crate) fn eval_unchecked(&self, z: Complex64) -> Complex64 {
        let c = self.triplet.diffusion;
        let jumps = self.triplet.jumps.transform(z);
        match self.form {
            Form::Truncated => {
                I * z * (self.triplet.drift - self.trunc_mean) - 0.5 * c * z * z + jumps
            }
            Form::Compensated => -0.5 * c * (z * z + I * z) + jumps - I * z * self.exp_comp,
        }
    }

    /// `psi'(z)`.
    pub fn deriv(&self, z: Complex64) -> Result<Complex64> {
        self.check(z)?;
        Ok(self.deriv_unchecked(z))
    }

    pub(crate) fn deriv_unchecked(&self, z: Complex64) -> Complex64 {
        let c = self.triplet.diffusion;
        let jumps = self.triplet.jumps.transform_deriv(z);
        match self.form {
            Form::Truncated => I * (self.triplet.drift - self.trunc_mean) - c * z + jumps,
            Form::Compensated => -0.5 * c * (2.0 * z + I) + jumps - I * self.exp_comp,
        }
    }

    /// Sum of two independent exponents, keeping the compensated form when both are in Pi.
    pub fn compose(&self, other: &CharExponent) -> Result<CharExponent> {
        if self.pi_member && other.pi_member {
            let jumps = self.triplet.jumps.compose(&other.triplet.jumps)?;
            CharExponent::pi(self.triplet.diffusion + other.triplet.diffusion, jumps)
        } else {
            CharExponent::new(self.triplet.compose(&other.triplet)?)
        }
    }
}

/// `|psi(-i)|`: zero iff `exp` of the associated Lévy process is a martingale.
pub fn martingale_defect(exp: &CharExponent) -> Result<f64> {
    if exp.domain() == Domain::RealOnly {
        return Err(Error::UnsupportedDomain("martingale defect needs psi(-i); exponent is real-only".into()));
    }
    Ok(exp.eval(Complex64::new(0.0, -1.0))?.norm())
}

/// `psi(u) = -(u^2 + iu) c / 2 + ∫ (e^{iux} - 1 - iu (e^x - 1)) K(dx)`.
pub fn pi_exponent(diffusion: f64, jumps: JumpSpec) -> Result<CharExponent> {
    CharExponent::pi(diffusion, jumps)
}

/// Joint exponent `gamma(u, v)` of `(X^∥, M)` on `R x (R + i R_+)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum JointExponent {
    /// `gamma = 0`: no driver.
    #[default]
    Zero,
    /// `gamma(u, v) = -v^2 / 2`, a Brownian driver independent of `X`.
    BrownianSanity,
    /// `gamma(u, v) = eta(delta u + v) - iu eta(-delta i)`.
    Bns(BnsGamma),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnsGamma {
    eta: CharExponent,
    delta: f64,
    // eta(-delta i), real and <= 0
    eta_shift: f64,
}

impl BnsGamma {
    pub fn eta(&self) -> &CharExponent {
        &self.eta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `eta(-delta i)`.
    pub fn eta_shift(&self) -> f64 {
        self.eta_shift
    }

    /// `gamma(u, v)` with a complex first argument, used on the damped pricing line.
    pub fn eval_complex(&self, u: Complex64, v: Complex64) -> Result<Complex64> {
        Ok(self.eta.eval(self.delta * u + v)? - I * u * self.eta_shift)
    }
}

/// `gamma(u, v) = eta(delta u + v) - iu eta(-delta i)` for a pure-jump subordinator `eta`.
pub fn bns_gamma(eta: CharExponent, delta: f64) -> Result<JointExponent> {
    if !delta.is_finite() || delta > 0.0 {
        return Err(Error::InvalidSpec(format!("leverage delta must be <= 0, got {delta}")));
    }
    if !eta.is_subordinator() || eta.linear_drift().abs() > 1e-15 {
        return Err(Error::InvalidSpec("eta must be the exponent of a pure-jump subordinator".into()));
    }
    let eta_shift = eta.eval(Complex64::new(0.0, -delta))?.re;
    Ok(JointExponent::Bns(BnsGamma { eta, delta, eta_shift }))
}

impl JointExponent {
    fn check_v(v: Complex64) -> Result<()> {
        // Im v >= 0 up to rounding
        if v.im < -1e-12 * (1.0 + v.norm()) || !v.im.is_finite() {
            return Err(Error::Internal(format!("joint exponent evaluated at Im v = {} < 0", v.im)));
        }
        Ok(())
    }

    pub fn eval(&self, u: f64, v: Complex64) -> Result<Complex64> {
        Self::check_v(v)?;
        Ok(match self {
            JointExponent::Zero => Complex64::new(0.0, 0.0),
            JointExponent::BrownianSanity => -0.5 * v * v,
            JointExponent::Bns(g) => {
                g.eta.eval(g.delta * u + v)? - I * u * g.eta_shift
            }
        })
    }

    /// `∂_2 gamma(u, v)`.
    pub fn d2(&self, u: f64, v: Complex64) -> Result<Complex64> {
        Self::check_v(v)?;
        Ok(match self {
            JointExponent::Zero => Complex64::new(0.0, 0.0),
            JointExponent::BrownianSanity => -v,
            JointExponent::Bns(g) => g.eta.deriv(g.delta * u + v)?,
        })
    }

    /// `gamma(0, .)`, the exponent of the driver `M`, if it is a subordinator.
    pub fn driver(&self) -> Option<&CharExponent> {
        match self {
            JointExponent::Bns(g) => Some(&g.eta),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, JointExponent::Zero)
    }
}
