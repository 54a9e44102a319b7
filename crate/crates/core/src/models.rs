//! Worked model families: Black-Scholes (vanishing volatility), deterministic
//! kernels with their minimal codebook, and the BNS-type model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codebook::{pi_necessary_check, CodebookSurface, GridSpec, DEFAULT_PI_TOL};
use crate::dynamics::{gauss_legendre_nodes, BuildingBlocks, SubordinatorPath, Trajectory, VolKernel};
use crate::error::{Error, Result};
use crate::levy::{bns_gamma, BnsGamma, CharExponent, JointExponent, JumpSpec};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// `psi0(T, u) = -(iu + u^2) sigma^2 / 2` at every maturity.
pub fn black_scholes_codebook(sigma: f64, grid: GridSpec) -> Result<CodebookSurface> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidSpec(format!("sigma must be > 0, got {sigma}")));
    }
    let e = CharExponent::black_scholes(sigma)?;
    CodebookSurface::from_fn(grid, 0.0, |_, u| e.eval_real(u))
}

/// A maturity-independent codebook built from one exponent.
pub fn pii_codebook(psi: &CharExponent, grid: GridSpec) -> Result<CodebookSurface> {
    CodebookSurface::from_fn(grid, 0.0, |_, u| psi.eval_real(u))
}

/// Minimal codebook `mu(T, u) = gamma(u, -i ∫_0^T b̃(r, u) dr)` for a deterministic kernel
/// whose Musiela form does not depend on time.
pub fn min_compatible_codebook(vol: &VolKernel, gamma: &JointExponent, grid: GridSpec) -> Result<CodebookSurface> {
    if !vol.is_deterministic() {
        return Err(Error::InvalidSpec("the minimal codebook needs a deterministic kernel".into()));
    }
    let zero = CodebookSurface::zeros(grid, 0.0)?;
    let blocks = BuildingBlocks::new(0.0, zero.clone(), vol.clone(), gamma.clone())?;
    // ∫_0^T b̃ dr is the imaginary direction fed to gamma by the drift at t = 0
    let integral = kernel_integral_at_zero(&blocks, &zero)?;
    let nu = grid.n_frequencies();
    CodebookSurface::try_from_fn(grid, 0.0, |t, u| {
        let j = grid.maturity_index(t).expect("grid maturity");
        let k = grid.frequency_index(u)?;
        gamma.eval(u, -I * integral[j * nu + k])
    })
}

fn kernel_integral_at_zero(blocks: &BuildingBlocks, zero: &CodebookSurface) -> Result<Vec<Complex64>> {
    let g = zero.grid();
    let nu = g.n_frequencies();
    let mut out = vec![Complex64::new(0.0, 0.0); g.n_maturities() * nu];
    match &blocks.vol {
        VolKernel::Zero => {}
        VolKernel::DeterministicExp { phi, lambda } => {
            for j in 0..g.n_maturities() {
                let w = -(-lambda * g.maturity(j)).exp_m1() / lambda;
                for k in 0..nu {
                    out[j * nu + k] = crate::dynamics::truncate_b(phi.eval_real(g.frequency(k))) * w;
                }
            }
        }
        VolKernel::DeterministicTable(table) => {
            let tg = *table.grid();
            for j in 0..g.n_maturities() {
                for k in 0..nu {
                    let kt = tg.frequency_index(g.frequency(k))?;
                    out[j * nu + k] = crate::codebook::integrate_piecewise_linear(&tg, 0.0, g.maturity(j), |r| {
                        crate::dynamics::truncate_b(table.get(r, kt))
                    });
                }
            }
        }
        VolKernel::StateDependent(_) => unreachable!(),
    }
    Ok(out)
}

/// `phi(u) = -(u^2 + iu) / 2`.
pub fn bns_phi(u: Complex64) -> Complex64 {
    -0.5 * (u * u + I * u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnsParams {
    pub lambda: f64,
    pub delta: f64,
    /// Jump law of the subordinator `M`.
    pub eta: JumpSpec,
    /// Diffusion coefficient of the PII `L` (its exponent is in Pi).
    #[serde(default)]
    pub psi_l_diffusion: f64,
    /// Jump law of `L`.
    #[serde(default)]
    pub psi_l_jumps: JumpSpec,
    #[serde(default)]
    pub x0: f64,
}

impl BnsParams {
    /// `lambda = 1`, `delta = -0.5`, `eta` compound Poisson with rate 1 and mean jump 1/2,
    /// `L` Brownian with volatility 0.1.
    pub fn desk_preset() -> Self {
        Self {
            lambda: 1.0,
            delta: -0.5,
            eta: JumpSpec::CompoundPoissonExp { rate: 1.0, theta: 2.0 },
            psi_l_diffusion: 0.01,
            psi_l_jumps: JumpSpec::None,
            x0: 0.0,
        }
    }

    pub fn with_sigma_l(mut self, sigma_l: f64) -> Self {
        self.psi_l_diffusion = sigma_l * sigma_l;
        self
    }
}

/// BNS model with its closed-form codebook.
#[derive(Debug, Clone)]
pub struct BnsModel {
    params: BnsParams,
    eta: CharExponent,
    psi_l: CharExponent,
    gamma: BnsGamma,
}

impl BnsModel {
    pub fn new(params: BnsParams) -> Result<Self> {
        if !(params.lambda.is_finite() && params.lambda > 0.0) {
            return Err(Error::InvalidSpec(format!("lambda must be > 0, got {}", params.lambda)));
        }
        let eta = CharExponent::subordinator(params.eta.clone(), 0.0)?;
        let JointExponent::Bns(gamma) = bns_gamma(eta.clone(), params.delta)? else { unreachable!() };
        let psi_l = CharExponent::pi(params.psi_l_diffusion, params.psi_l_jumps.clone())?;
        Ok(Self { params, eta, psi_l, gamma })
    }

    pub fn params(&self) -> &BnsParams {
        &self.params
    }

    pub fn eta(&self) -> &CharExponent {
        &self.eta
    }

    pub fn psi_l(&self) -> &CharExponent {
        &self.psi_l
    }

    pub fn gamma(&self) -> JointExponent {
        JointExponent::Bns(self.gamma.clone())
    }

    pub fn lambda(&self) -> f64 {
        self.params.lambda
    }

    fn weight(&self, tau: f64) -> f64 {
        -(-self.params.lambda * tau).exp_m1() / self.params.lambda
    }

    /// `eta(delta u - i phi(u) (1 - e^{-lambda tau}) / lambda)`.
    fn eta_term(&self, u: Complex64, tau: f64) -> Result<Complex64> {
        self.eta.eval(self.params.delta * u - I * bns_phi(u) * self.weight(tau))
    }

    /// `mu(T, u)`, the minimal codebook of the BNS kernel.
    pub fn minimal(&self, big_t: f64, u: Complex64) -> Result<Complex64> {
        Ok(self.eta_term(u, big_t)? - I * u * self.gamma.eta_shift())
    }

    /// `psi0(T, u) = psi^L(u) + eta(delta u - i phi(u) (1 - e^{-lambda T}) / lambda) - iu eta(-delta i)`.
    pub fn psi0(&self, big_t: f64, u: Complex64) -> Result<Complex64> {
        Ok(self.psi_l.eval(u)? + self.minimal(big_t, u)?)
    }

    /// Local exponent of `X` given the variance factor `z`.
    pub fn local_exponent(&self, u: Complex64, z: f64) -> Result<Complex64> {
        Ok(self.psi_l.eval(u)? + bns_phi(u) * z + self.eta.eval(self.params.delta * u)? - I * u * self.gamma.eta_shift())
    }

    /// `Psi_t(T, u)` given `Z_{t ∧ T}`.
    pub fn codebook_value(&self, t: f64, big_t: f64, u: Complex64, z_at: f64) -> Result<Complex64> {
        let s = t.min(big_t);
        let drift = self.eta_term(u, big_t - s)? - self.eta_term(u, big_t)?;
        Ok(self.psi0(big_t, u)? + drift + bns_phi(u) * (-self.params.lambda * (big_t - s)).exp() * z_at)
    }

    /// Cumulant `∫_t^T Psi_t(r, u) dr` for complex `u`, given `Z_t`.
    pub fn cumulant(&self, t: f64, big_t: f64, z_t: f64, u: Complex64) -> Result<Complex64> {
        let tau = big_t - t;
        if tau < 0.0 {
            return Err(Error::OutOfRange { what: "maturity (must be >= t)", value: big_t, min: t, max: f64::INFINITY });
        }
        if tau == 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let linear = (self.psi_l.eval(u)? - I * u * self.gamma.eta_shift()) * tau;
        let z_part = bns_phi(u) * z_t * self.weight(tau);
        Ok(linear + z_part + self.integrate_eta(u, tau)?)
    }

    /// `∫_0^tau eta(delta u - i phi(u) (1 - e^{-lambda s}) / lambda) ds`, Gauss-Legendre on a mesh graded towards 0.
    fn integrate_eta(&self, u: Complex64, tau: f64) -> Result<Complex64> {
        let (x, w) = gauss_legendre_nodes(10);
        let mut edges = vec![0.0];
        edges.extend((0..=40).rev().map(|k| tau * 0.5f64.powi(k)));
        let mut acc = Complex64::new(0.0, 0.0);
        for e in edges.windows(2) {
            let (a, b) = (e[0], e[1]);
            let half = 0.5 * (b - a);
            for (xi, wi) in x.iter().zip(&w) {
                acc += half * wi * self.eta_term(u, a + half * (xi + 1.0))?;
            }
        }
        Ok(acc)
    }

    /// Building blocks `(x0, psi0, b, gamma)` on `grid`.
    pub fn blocks(&self, grid: GridSpec) -> Result<BuildingBlocks> {
        let psi0 = CodebookSurface::try_from_fn(grid, 0.0, |t, u| self.psi0(t, Complex64::new(u, 0.0)))?;
        pi_necessary_check(&psi0, 0.0, DEFAULT_PI_TOL).into_result()?;
        let vol = VolKernel::deterministic_exp(CharExponent::black_scholes(1.0)?, self.params.lambda)?;
        BuildingBlocks::new(self.params.x0, psi0, vol, self.gamma())
    }

    /// `Psi_t` on `grid`, with `z(s)` giving the variance factor `Z_s` for `s <= t`.
    pub fn closed_codebook(&self, grid: GridSpec, t: f64, z: impl Fn(f64) -> f64) -> Result<CodebookSurface> {
        let mut cache: Vec<Option<f64>> = vec![None; grid.n_maturities()];
        let zt = z(t);
        if zt < 0.0 {
            return Err(Error::InvalidSpec(format!("Z_t must be >= 0, got {zt}")));
        }
        CodebookSurface::try_from_fn(grid, t, |big_t, u| {
            let zs = if big_t >= t {
                zt
            } else {
                let j = grid.maturity_index(big_t).expect("grid maturity");
                *cache[j].get_or_insert_with(|| z(big_t))
            };
            self.codebook_value(t, big_t, Complex64::new(u, 0.0), zs)
        })
    }

    /// Closed-form trajectory along a subordinator path.
    pub fn closed_trajectory(&self, grid: GridSpec, path: &SubordinatorPath, times: &[f64]) -> Result<Trajectory> {
        let surfaces = times
            .iter()
            .map(|&t| self.closed_codebook(grid, t, |s| ou_level(path, self.params.lambda, s)))
            .collect::<Result<_>>()?;
        Ok(Trajectory { times: times.to_vec(), surfaces, residuals: Vec::new() })
    }
}

/// `Z_s = ∫_0^s e^{-lambda (s - r)} dM_r` with `Z_0 = 0`.
pub fn ou_level(path: &SubordinatorPath, lambda: f64, s: f64) -> f64 {
    let drift = path.drift_rate * (-(-lambda * s).exp_m1()) / lambda;
    drift + path.jumps_in(0.0, s).map(|&(t, x)| x * (-lambda * (s - t)).exp()).sum::<f64>()
}

/// Building blocks of the BNS model.
pub fn bns_blocks(p: &BnsParams, grid: GridSpec) -> Result<BuildingBlocks> {
    BnsModel::new(p.clone())?.blocks(grid)
}

/// Closed-form BNS codebook at time `t` along `path`.
pub fn bns_closed_codebook(model: &BnsModel, grid: GridSpec, t: f64, path: &SubordinatorPath) -> Result<CodebookSurface> {
    model.closed_codebook(grid, t, |s| ou_level(path, model.lambda(), s))
}

/// BNS blocks whose `psi0 = psi^L + mu - kappa Re mu` carries a positive real bump; the
/// resulting codebook leaves the admissible set once the first maturity expires.
pub fn constructed_violation_blocks(p: &BnsParams, grid: GridSpec, kappa: f64) -> Result<BuildingBlocks> {
    let model = BnsModel::new(p.clone())?;
    let mut blocks = model.blocks(grid)?;
    blocks.psi0 = CodebookSurface::try_from_fn(grid, 0.0, |t, u| {
        let u = Complex64::new(u, 0.0);
        let mu = model.minimal(t, u)?;
        Ok(model.psi_l().eval(u)? + mu - kappa * mu.re)
    })?;
    Ok(blocks)
}
