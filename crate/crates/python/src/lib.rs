//! Python bindings: `import levy_codebook`.

use num_complex::Complex64;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use levy_codebook::config::RunConfig;
use levy_codebook::dynamics::{evolve_event_driven, evolve_picard, simulate_subordinator, SubordinatorPath};
use levy_codebook::models::{black_scholes_codebook, BnsModel, BnsParams};
use levy_codebook::pricing::{self, InversionOptions, PricingOptions};
use levy_codebook::validation::{static_arbitrage_report, tau_monitor_default, STATIC_ARB_TOL};
use levy_codebook::{CodebookSurface, Error, GridSpec, JumpSpec};

fn err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Maturity x frequency lattice.
#[pyclass(name = "Grid", module = "levy_codebook", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGrid(GridSpec);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(maturity_step: f64, maturity_count: usize, frequency_step: f64, frequency_max: f64) -> PyResult<Self> {
        GridSpec::new(maturity_step, maturity_count, frequency_step, frequency_max).map(Self).map_err(err)
    }

    fn maturities(&self) -> Vec<f64> {
        self.0.maturities()
    }

    fn frequencies(&self) -> Vec<f64> {
        self.0.frequencies()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.n_maturities(), self.0.n_frequencies())
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!(
            "Grid(maturity_step={}, maturity_count={}, frequency_step={}, frequency_max={})",
            g.maturity_step, g.maturity_count, g.frequency_step, g.frequency_max
        )
    }
}

/// A codebook surface at a fixed calendar time.
#[pyclass(name = "Codebook", module = "levy_codebook", frozen, from_py_object)]
#[derive(Clone)]
struct PyCodebook(CodebookSurface);

#[pymethods]
impl PyCodebook {
    #[staticmethod]
    fn black_scholes(sigma: f64, grid: PyGrid) -> PyResult<Self> {
        black_scholes_codebook(sigma, grid.0).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (grid, time = 0.0))]
    fn zeros(grid: PyGrid, time: f64) -> PyResult<Self> {
        CodebookSurface::zeros(grid.0, time).map(Self).map_err(err)
    }

    /// Rows are maturities, columns frequencies.
    #[staticmethod]
    #[pyo3(signature = (grid, values, time = 0.0))]
    fn from_rows(grid: PyGrid, values: Vec<Vec<Complex64>>, time: f64) -> PyResult<Self> {
        let (m, n) = (grid.0.n_maturities(), grid.0.n_frequencies());
        if values.len() != m || values.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err(format!("expected {m} rows of {n} values")));
        }
        CodebookSurface::from_fn(grid.0, time, |t, u| {
            let j = grid.0.maturity_index(t).expect("grid maturity");
            let k = grid.0.frequency_index(u).expect("grid frequency");
            values[j][k]
        })
        .map(Self)
        .map_err(err)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(*self.0.grid())
    }

    #[getter]
    fn time(&self) -> f64 {
        self.0.time()
    }

    fn get(&self, j: usize, k: usize) -> PyResult<Complex64> {
        let (m, n) = (self.0.grid().n_maturities(), self.0.grid().n_frequencies());
        if j >= m || k >= n {
            return Err(PyValueError::new_err(format!("index ({j}, {k}) outside {m} x {n}")));
        }
        Ok(self.0.get(j, k))
    }

    fn rows(&self) -> Vec<Vec<Complex64>> {
        (0..self.0.grid().n_maturities()).map(|j| self.0.row(j).to_vec()).collect()
    }

    /// Cumulant of `log S_T - log S_t` on the frequency grid.
    fn cumulant(&self, t: f64, maturity: f64) -> PyResult<Vec<Complex64>> {
        self.0.cumulant(t, maturity).map_err(err)
    }

    fn seminorm(&self, maturity: f64, m: f64) -> PyResult<f64> {
        self.0.seminorm(maturity, m).map_err(err)
    }

    fn max_abs_diff(&self, other: &PyCodebook) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn __repr__(&self) -> String {
        let g = self.0.grid();
        format!("Codebook(time={}, shape=({}, {}))", self.0.time(), g.n_maturities(), g.n_frequencies())
    }
}

/// Call prices, one row per maturity.
#[pyclass(name = "PriceSurface", module = "levy_codebook", frozen, from_py_object)]
#[derive(Clone)]
struct PyPriceSurface(pricing::PriceSurface);

#[pymethods]
impl PyPriceSurface {
    #[new]
    fn new(spot: f64, strikes: Vec<f64>, maturities: Vec<f64>, prices: Vec<Vec<f64>>) -> PyResult<Self> {
        if prices.len() != maturities.len() {
            return Err(PyValueError::new_err("one price row per maturity"));
        }
        let flat = prices.into_iter().flatten().collect();
        pricing::PriceSurface::new(spot, strikes, maturities, flat).map(Self).map_err(err)
    }

    #[getter]
    fn spot(&self) -> f64 {
        self.0.spot
    }

    #[getter]
    fn strikes(&self) -> Vec<f64> {
        self.0.strikes.clone()
    }

    #[getter]
    fn maturities(&self) -> Vec<f64> {
        self.0.maturities.clone()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.0.maturities.len()).map(|i| self.0.row(i).to_vec()).collect()
    }

    fn price(&self, i: usize, j: usize) -> PyResult<f64> {
        if i >= self.0.maturities.len() || j >= self.0.strikes.len() {
            return Err(PyValueError::new_err(format!("index ({i}, {j}) out of range")));
        }
        Ok(self.0.price(i, j))
    }

    fn __repr__(&self) -> String {
        format!("PriceSurface(spot={}, {} maturities x {} strikes)", self.0.spot, self.0.maturities.len(), self.0.strikes.len())
    }
}

/// Barndorff-Nielsen–Shephard model with compound-Poisson exponential jumps.
#[pyclass(name = "BnsModel", module = "levy_codebook", frozen)]
struct PyBnsModel(BnsModel);

#[pymethods]
impl PyBnsModel {
    #[new]
    #[pyo3(signature = (lam, delta, jump_rate, jump_mean, diffusion = 0.0, x0 = 0.0))]
    fn new(lam: f64, delta: f64, jump_rate: f64, jump_mean: f64, diffusion: f64, x0: f64) -> PyResult<Self> {
        let p = BnsParams {
            lambda: lam,
            delta,
            eta: JumpSpec::CompoundPoissonExp { rate: jump_rate, theta: jump_mean },
            psi_l_diffusion: diffusion,
            psi_l_jumps: JumpSpec::None,
            x0,
        };
        BnsModel::new(p).map(Self).map_err(err)
    }

    #[staticmethod]
    fn desk_preset() -> PyResult<Self> {
        BnsModel::new(BnsParams::desk_preset()).map(Self).map_err(err)
    }

    /// Initial codebook `psi_0(T, u)`.
    fn psi0(&self, maturity: f64, u: Complex64) -> PyResult<Complex64> {
        self.0.psi0(maturity, u).map_err(err)
    }

    fn cumulant(&self, t: f64, maturity: f64, z_t: f64, u: Complex64) -> PyResult<Complex64> {
        self.0.cumulant(t, maturity, z_t, u).map_err(err)
    }

    fn codebook(&self, grid: PyGrid) -> PyResult<PyCodebook> {
        self.0.blocks(grid.0).map(|b| PyCodebook(b.psi0)).map_err(err)
    }

    /// Call prices from the closed-form cumulant at time 0.
    #[pyo3(signature = (maturity, strikes, spot = None))]
    fn calls(&self, py: Python<'_>, maturity: f64, strikes: Vec<f64>, spot: Option<f64>) -> PyResult<Vec<f64>> {
        let spot = spot.unwrap_or_else(|| self.0.params().x0.exp());
        let m = &self.0;
        py.detach(|| {
            pricing::price_from_cumulant(|z| m.cumulant(0.0, maturity, 0.0, z), spot, &strikes, &PricingOptions::default())
        })
        .map_err(err)
    }
}

/// Calls on a maturity x strike grid from a codebook.
#[pyfunction]
#[pyo3(signature = (codebook, spot, maturities, strikes, control_variate = true))]
fn price(
    py: Python<'_>,
    codebook: &PyCodebook,
    spot: f64,
    maturities: Vec<f64>,
    strikes: Vec<f64>,
    control_variate: bool,
) -> PyResult<PyPriceSurface> {
    let opts = PricingOptions { control_variate, ..PricingOptions::default() };
    let s = &codebook.0;
    py.detach(|| pricing::price_codebook(s, spot, &maturities, &strikes, &opts))
        .map(|(p, _)| PyPriceSurface(p))
        .map_err(err)
}

/// Codebook -> prices -> codebook. Returns `(prices, recovered, max_interior_error)`.
#[pyfunction]
#[pyo3(signature = (codebook, spot = 1.0))]
fn round_trip(py: Python<'_>, codebook: &PyCodebook, spot: f64) -> PyResult<(PyPriceSurface, PyCodebook, f64)> {
    let s = &codebook.0;
    let r = py
        .detach(|| pricing::codebook_round_trip(s, spot, &PricingOptions::default(), &InversionOptions::default()))
        .map_err(err)?;
    Ok((PyPriceSurface(r.prices), PyCodebook(r.recovered), r.max_interior_error))
}

/// Inverts a price surface to a codebook at calendar time `time`.
#[pyfunction]
#[pyo3(signature = (prices, time = 0.0))]
fn invert(prices: &PyPriceSurface, time: f64) -> PyResult<PyCodebook> {
    pricing::surface_to_codebook(&prices.0, time, &InversionOptions::default()).map(PyCodebook).map_err(err)
}

/// Static-arbitrage audit: `{"passed": bool, "violations": [str]}`.
#[pyfunction]
#[pyo3(signature = (prices, tol = STATIC_ARB_TOL))]
fn static_arbitrage<'py>(py: Python<'py>, prices: &PyPriceSurface, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = static_arbitrage_report(&prices.0, tol).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("passed", r.passed)?;
    d.set_item("violations", r.violations)?;
    Ok(d)
}

/// Evolves the codebook of a JSON run configuration.
///
/// Returns `{"times", "codebooks", "residuals", "jumps", "tau"}`.
#[pyfunction]
#[pyo3(signature = (config, solver = "picard", seed = None))]
fn evolve<'py>(py: Python<'py>, config: &str, solver: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = RunConfig::from_json(config).map_err(err)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let run = || -> levy_codebook::Result<_> {
        let blocks = cfg.blocks()?;
        let horizon = cfg.evolve.horizon;
        let path = match (&cfg.evolve.jumps, blocks.gamma.driver()) {
            (Some(j), _) => SubordinatorPath::new(horizon, 0.0, j.clone())?,
            (None, Some(eta)) => simulate_subordinator(eta.jumps(), horizon, cfg.seed())?,
            (None, None) => SubordinatorPath::constant(horizon),
        };
        let traj = match solver {
            "picard" => evolve_picard(&blocks, &path, horizon, &cfg.evolve.solver)?,
            "event" => evolve_event_driven(&blocks, &path, horizon, &cfg.evolve.event)?,
            other => return Err(Error::InvalidSpec(format!("unknown solver {other:?}; expected picard or event"))),
        };
        let tau = tau_monitor_default(&traj, &blocks.gamma)?;
        Ok((traj, path, tau))
    };
    let (traj, path, tau) = py.detach(run).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("times", traj.times)?;
    d.set_item("codebooks", traj.surfaces.into_iter().map(PyCodebook).collect::<Vec<_>>())?;
    d.set_item("residuals", traj.residuals)?;
    d.set_item("jumps", path.jumps)?;
    d.set_item("tau", tau)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "levy_codebook")]
pub fn levy_codebook_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyPriceSurface>()?;
    m.add_class::<PyBnsModel>()?;
    m.add_function(wrap_pyfunction!(price, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(static_arbitrage, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
