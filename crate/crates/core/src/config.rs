//! Run configuration shared by the command-line front-end and the bindings.

use serde::{Deserialize, Serialize};

use crate::codebook::GridSpec;
use crate::dynamics::{BuildingBlocks, SolverOptions, VolKernel};
use crate::error::{Error, Result};
use crate::levy::{bns_gamma, CharExponent, JointExponent, JumpSpec};
use crate::models::{black_scholes_codebook, min_compatible_codebook, pii_codebook, BnsModel, BnsParams};
use crate::pricing::{InversionOptions, PricingOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bs,
    Pii,
    Affine,
    Bns,
}

/// Exponent in Pi: `{diffusion, jumps}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSpec {
    #[serde(default)]
    pub diffusion: f64,
    #[serde(default)]
    pub jumps: JumpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceSection {
    /// Maturities to price; grid maturities if empty.
    pub maturities: Vec<f64>,
    /// Strikes; 21 points from `0.5 S` to `2 S` if empty.
    pub strikes: Vec<f64>,
    /// Write the modified price slices.
    pub slices: bool,
    pub options: PricingOptions,
}

impl Default for PriceSection {
    fn default() -> Self {
        Self { maturities: Vec::new(), strikes: Vec::new(), slices: true, options: PricingOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveSection {
    pub horizon: f64,
    /// Explicit jumps `(time, size)`; sampled from `eta` if absent.
    pub jumps: Option<Vec<(f64, f64)>>,
    pub solver: SolverOptions,
    /// Event-driven solver options (`solver` is used for Picard).
    pub event: SolverOptions,
    /// Largest sup-norm gap between the two solvers under `--solver both`.
    pub agreement_tol: f64,
}

impl Default for EvolveSection {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            jumps: None,
            solver: SolverOptions::default(),
            event: SolverOptions { tol: 1e-10, ..SolverOptions::default() },
            agreement_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub u_list: Vec<f64>,
    pub call_maturities: Vec<f64>,
    pub call_strikes: Vec<f64>,
    /// Price surface CSV audited instead of a model-generated one.
    pub surface: Option<String>,
    pub arbitrage_tol: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            paths: 100_000,
            steps: 100,
            horizon: 1.0,
            u_list: vec![0.5, 1.0, 2.0],
            call_maturities: vec![0.5, 0.75, 1.0],
            call_strikes: vec![0.9, 1.0, 1.1],
            surface: None,
            arbitrage_tol: crate::validation::STATIC_ARB_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundtripSection {
    pub pricing: PricingOptions,
    pub inversion: InversionOptions,
}

impl Default for RoundtripSection {
    fn default() -> Self {
        Self { pricing: PricingOptions::default(), inversion: InversionOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub eta: Option<JumpSpec>,
    #[serde(default, rename = "psiL")]
    pub psi_l: Option<PiSpec>,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "one")]
    pub spot: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub price: PriceSection,
    #[serde(default)]
    pub evolve: EvolveSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub roundtrip: RoundtripSection,
}

fn one() -> f64 {
    1.0
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.grid.maturity_start != 0.0 {
            return Err(Error::InvalidSpec("grid.maturity_start must be 0 for model runs".into()));
        }
        if !(self.spot > 0.0) {
            return Err(Error::InvalidSpec(format!("spot must be > 0, got {}", self.spot)));
        }
        let need = |name: &str, v: bool| -> Result<()> {
            if v {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("model {:?} needs `{name}`", self.model).to_lowercase()))
            }
        };
        match self.model {
            ModelKind::Bs => need("sigma", self.sigma.is_some())?,
            ModelKind::Pii => need("psiL", self.psi_l.is_some())?,
            ModelKind::Affine | ModelKind::Bns => {
                need("lambda", self.lambda.is_some())?;
                need("delta", self.delta.is_some())?;
                need("eta", self.eta.is_some())?;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// `psi^L`: the `psiL` entry, or Black-Scholes with `sigma` (zero if neither is given).
    pub fn psi_l(&self) -> Result<CharExponent> {
        match (&self.psi_l, self.sigma) {
            (Some(p), _) => CharExponent::pi(p.diffusion, p.jumps.clone()),
            (None, Some(s)) => CharExponent::black_scholes(s),
            (None, None) => CharExponent::pi(0.0, JumpSpec::None),
        }
    }

    pub fn bns_params(&self) -> Result<BnsParams> {
        let l = self.psi_l()?;
        Ok(BnsParams {
            lambda: self.lambda.ok_or_else(|| Error::InvalidSpec("missing lambda".into()))?,
            delta: self.delta.ok_or_else(|| Error::InvalidSpec("missing delta".into()))?,
            eta: self.eta.clone().ok_or_else(|| Error::InvalidSpec("missing eta".into()))?,
            psi_l_diffusion: l.triplet().diffusion,
            psi_l_jumps: l.jumps().clone(),
            x0: self.x0,
        })
    }

    pub fn bns_model(&self) -> Result<Option<BnsModel>> {
        match self.model {
            ModelKind::Bns => Ok(Some(BnsModel::new(self.bns_params()?)?)),
            _ => Ok(None),
        }
    }

    /// Model driving the Monte Carlo checks: BNS as configured, Black-Scholes and PII as BNS
    /// without a volatility driver. The affine model has no simulator.
    pub fn mc_model(&self) -> Result<BnsModel> {
        let quiet = |l: CharExponent| BnsParams {
            lambda: 1.0,
            delta: 0.0,
            eta: JumpSpec::CompoundPoissonExp { rate: 0.0, theta: 1.0 },
            psi_l_diffusion: l.triplet().diffusion,
            psi_l_jumps: l.jumps().clone(),
            x0: self.x0,
        };
        match self.model {
            ModelKind::Bns => BnsModel::new(self.bns_params()?),
            ModelKind::Bs | ModelKind::Pii => BnsModel::new(quiet(self.psi_l()?)),
            ModelKind::Affine => Err(Error::InvalidSpec("Monte Carlo checks support models bs, pii and bns".into())),
        }
    }

    /// Building blocks of the configured model on `grid`.
    pub fn blocks(&self) -> Result<BuildingBlocks> {
        let g = self.grid;
        match self.model {
            ModelKind::Bs => {
                let psi0 = black_scholes_codebook(self.sigma.unwrap_or_default(), g)?;
                BuildingBlocks::new(self.x0, psi0, VolKernel::Zero, JointExponent::Zero)
            }
            ModelKind::Pii => {
                let psi0 = pii_codebook(&self.psi_l()?, g)?;
                BuildingBlocks::new(self.x0, psi0, VolKernel::Zero, JointExponent::Zero)
            }
            ModelKind::Bns => self.bns_model()?.expect("bns").blocks(g),
            ModelKind::Affine => {
                // psiL for the level, sigma^2 phi for the kernel
                let p = self.bns_params()?;
                let scale = self.sigma.unwrap_or(1.0);
                let phi = CharExponent::black_scholes(scale)?;
                let vol = VolKernel::deterministic_exp(phi, p.lambda)?;
                let eta = CharExponent::subordinator(p.eta.clone(), 0.0)?;
                let gamma = bns_gamma(eta, p.delta)?;
                let mu = min_compatible_codebook(&vol, &gamma, g)?;
                let l = CharExponent::pi(p.psi_l_diffusion, p.psi_l_jumps.clone())?;
                let mut psi0 = pii_codebook(&l, g)?;
                psi0.axpy(1.0, &mu)?;
                BuildingBlocks::new(self.x0, psi0, vol, gamma)
            }
        }
    }
}
