use std::path::{Path, PathBuf};

use serde_json::json;

use levy_codebook::codebook::CodebookSurface;
use levy_codebook::config::RunConfig;
use levy_codebook::dynamics::{
    evolve_event_driven, evolve_picard, simulate_subordinator, BuildingBlocks, SubordinatorPath, Trajectory,
};
use levy_codebook::io::{read_price_surface, write_codebook, write_json, write_modified_slice, write_price_surface};
use levy_codebook::pricing::{codebook_round_trip, price_codebook, price_from_cumulant, PriceSurface};
use levy_codebook::validation::{
    check_conditional_expectation, check_martingale, simulate_bns, static_arbitrage_report, tau_monitor_default,
    CheckReport,
};

use crate::staging::Staging;
use crate::{Args, Failure, Solver};

fn default_strikes(spot: f64) -> Vec<f64> {
    (0..21).map(|i| spot * (0.5 + 0.075 * i as f64)).collect()
}

fn model_surface(cfg: &RunConfig, blocks: &BuildingBlocks) -> Result<(PriceSurface, Vec<levy_codebook::pricing::ModifiedPriceSlice>), Failure> {
    let maturities = if cfg.price.maturities.is_empty() { cfg.grid.maturities() } else { cfg.price.maturities.clone() };
    let strikes = if cfg.price.strikes.is_empty() { default_strikes(cfg.spot) } else { cfg.price.strikes.clone() };
    Ok(price_codebook(&blocks.psi0, cfg.spot, &maturities, &strikes, &cfg.price.options)?)
}

fn manifest(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "seed": cfg.seed(),
        "config": cfg,
        "result": extra,
    })
}

pub fn price(cfg: &RunConfig, args: &Args) -> Result<bool, Failure> {
    let blocks = cfg.blocks()?;
    let (surface, slices) = model_surface(cfg, &blocks)?;
    let mut out = Staging::new(&args.out)?;
    write_price_surface(&out.file("prices.csv")?, &surface)?;
    if cfg.price.slices {
        for (j, o) in slices.iter().enumerate() {
            write_modified_slice(&out.file(format!("slices/slice_{j:03}.csv"))?, o)?;
        }
    }
    let clipped: Vec<_> = slices.iter().map(|o| json!({"T": o.maturity, "clipped_fraction": o.clipped_fraction})).collect();
    write_json(&out.file("manifest.json")?, &manifest(cfg, "price", json!({ "slices": clipped })))?;
    out.commit()?;
    println!("priced {} maturities x {} strikes", surface.maturities.len(), surface.strikes.len());
    Ok(true)
}

/// Path of the driver: explicit jumps, a sample of `gamma(0, .)`, or no jumps.
fn driver_path(cfg: &RunConfig, blocks: &BuildingBlocks, horizon: f64) -> Result<SubordinatorPath, Failure> {
    if let Some(j) = &cfg.evolve.jumps {
        return Ok(SubordinatorPath::new(horizon, 0.0, j.clone())?);
    }
    match blocks.gamma.driver() {
        Some(eta) => Ok(simulate_subordinator(eta.jumps(), horizon, cfg.seed())?),
        None => Ok(SubordinatorPath::constant(horizon)),
    }
}

fn write_trajectory(out: &mut Staging, name: &str, traj: &Trajectory) -> Result<(), Failure> {
    for (i, s) in traj.surfaces.iter().enumerate() {
        write_codebook(&out.file(format!("checkpoints/{name}_{i:03}.csv"))?, s)?;
        out.file(format!("checkpoints/{name}_{i:03}.json"))?;
    }
    Ok(())
}

pub fn evolve(cfg: &RunConfig, args: &Args) -> Result<bool, Failure> {
    let blocks = cfg.blocks()?;
    let horizon = cfg.evolve.horizon;
    let path = driver_path(cfg, &blocks, horizon)?;
    let picard = matches!(args.solver, Solver::Picard | Solver::Both)
        .then(|| evolve_picard(&blocks, &path, horizon, &cfg.evolve.solver))
        .transpose()?;
    let event = matches!(args.solver, Solver::Event | Solver::Both)
        .then(|| evolve_event_driven(&blocks, &path, horizon, &cfg.evolve.event))
        .transpose()?;
    let agreement = match (&picard, &event) {
        (Some(a), Some(b)) => Some(a.max_abs_diff(b)),
        _ => None,
    };
    let main = picard.as_ref().or(event.as_ref()).expect("one solver ran");
    let tau = tau_monitor_default(main, &blocks.gamma)?;

    let mut out = Staging::new(&args.out)?;
    write_json(&out.file("path.json")?, &path)?;
    if let Some(t) = &picard {
        write_trajectory(&mut out, "picard", t)?;
    }
    if let Some(t) = &event {
        write_trajectory(&mut out, "event", t)?;
    }
    let passed = agreement.is_none_or(|a| a < cfg.evolve.agreement_tol);
    let result = json!({
        "solver": args.solver.name(),
        "checkpoints": main.times,
        "jumps": path.jumps.len(),
        "picard_residuals": picard.as_ref().map(|t| t.residuals.clone()),
        "agreement": agreement,
        "agreement_tol": cfg.evolve.agreement_tol,
        "tau": tau,
    });
    write_json(&out.file("manifest.json")?, &manifest(cfg, "evolve", result))?;
    out.commit()?;
    println!(
        "evolved to t = {horizon} ({} checkpoints, {} jumps); tau: {}",
        main.times.len(),
        path.jumps.len(),
        tau.map_or_else(|| "none".to_string(), |t| t.to_string())
    );
    if let Some(a) = agreement {
        println!("solver agreement: {a:.3e} ({})", if passed { "pass" } else { "FAIL" });
    }
    Ok(passed)
}

const ALL_CHECKS: [&str; 4] = ["cf", "martingale", "arbitrage", "tau"];

/// Relative paths are taken from the config file's directory.
fn resolve(p: &str, config_path: &Path) -> PathBuf {
    let p = PathBuf::from(p);
    match config_path.parent() {
        Some(d) if p.is_relative() => d.join(p),
        _ => p,
    }
}

/// Largest recording stride that hits every time in `times`.
fn record_stride(steps: usize, horizon: f64, times: &[f64]) -> usize {
    let dt = horizon / steps as f64;
    (1..=steps)
        .rev()
        .find(|r| {
            steps % r == 0
                && times.iter().all(|t| {
                    let q = t / (dt * *r as f64);
                    (q - q.round()).abs() < 1e-9
                })
        })
        .unwrap_or(1)
}

pub fn check(cfg: &RunConfig, args: &Args) -> Result<bool, Failure> {
    let chosen: Vec<String> = match &args.checks {
        Some(c) => c.iter().map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect(),
        None if cfg.check.surface.is_some() => vec!["arbitrage".into()],
        None => ALL_CHECKS.iter().map(|s| s.to_string()).collect(),
    };
    if let Some(bad) = chosen.iter().find(|c| !ALL_CHECKS.contains(&c.as_str())) {
        return Err(Failure::Usage(format!("unknown check {bad:?}; expected one of {}", ALL_CHECKS.join(", "))));
    }
    let wants = |name: &str| chosen.iter().any(|c| c == name);
    let c = &cfg.check;
    let mut report = CheckReport::new();
    let mut tau_out = None;

    if let Some(surface) = &c.surface {
        if chosen.iter().any(|c| c != "arbitrage") {
            return Err(Failure::Usage("a surface input supports only the arbitrage check".into()));
        }
        let p = read_price_surface(&resolve(surface, &args.config), cfg.spot)?;
        report.merge(static_arbitrage_report(&p, c.arbitrage_tol)?);
    } else {
        let blocks = cfg.blocks()?;
        if wants("cf") || wants("martingale") {
            let model = cfg.mc_model()?;
            let x0 = model.params().x0;
            let mut times = c.call_maturities.clone();
            times.push(c.horizon);
            let stride = record_stride(c.steps, c.horizon, &times);
            let paths = simulate_bns(&model, c.paths, c.steps, c.horizon, stride, cfg.seed())?;
            if wants("cf") {
                report.merge(check_conditional_expectation(&paths, &blocks.psi0, x0, &c.u_list, c.horizon)?);
            }
            if wants("martingale") {
                let spot = x0.exp();
                let mut calls = Vec::new();
                for &t in &c.call_maturities {
                    let prices = price_from_cumulant(|z| model.cumulant(0.0, t, 0.0, z), spot, &c.call_strikes, &cfg.price.options)?;
                    calls.extend(c.call_strikes.iter().zip(prices).map(|(&k, p)| (t, k, p)));
                }
                report.merge(check_martingale(&paths, x0, &calls)?);
            }
        }
        if wants("arbitrage") {
            let (p, _) = model_surface(cfg, &blocks)?;
            report.merge(static_arbitrage_report(&p, c.arbitrage_tol)?);
        }
        if wants("tau") {
            let horizon = cfg.evolve.horizon;
            let path = driver_path(cfg, &blocks, horizon)?;
            let traj = evolve_picard(&blocks, &path, horizon, &cfg.evolve.solver)?;
            let tau = tau_monitor_default(&traj, &blocks.gamma)?;
            let mut r = CheckReport::new();
            r.push(format!("tau-monitor up to t={horizon}"), if tau.is_some() { 1.0 } else { 0.0 }, None, 0.0);
            if let Some(t) = tau {
                r.violations.push(format!("codebook leaves the admissible set at t={t}"));
            }
            report.merge(r);
            tau_out = Some(tau);
        }
    }

    let table = report.table();
    let mut out = Staging::new(&args.out)?;
    std::fs::write(out.file("report.txt")?, &table)?;
    write_json(&out.file("report.json")?, &report)?;
    let tau_text = tau_out.map(|t| t.map_or_else(|| "none".to_string(), |v| v.to_string()));
    write_json(
        &out.file("manifest.json")?,
        &manifest(cfg, "check", json!({"checks": chosen, "passed": report.passed, "tau": tau_text})),
    )?;
    out.commit()?;
    print!("{table}");
    if let Some(t) = tau_text {
        println!("tau: {t}");
    }
    Ok(report.passed)
}

pub fn roundtrip(cfg: &RunConfig, args: &Args) -> Result<bool, Failure> {
    let blocks = cfg.blocks()?;
    let psi0: &CodebookSurface = &blocks.psi0;
    let r = codebook_round_trip(psi0, cfg.spot, &cfg.roundtrip.pricing, &cfg.roundtrip.inversion)?;
    let mut out = Staging::new(&args.out)?;
    write_price_surface(&out.file("prices.csv")?, &r.prices)?;
    write_codebook(&out.file("recovered.csv")?, &r.recovered)?;
    out.file("recovered.json")?;
    let result = json!({
        "max_interior_error": r.max_interior_error,
        "worst_cell": {"T": r.worst_cell.0, "u": r.worst_cell.1},
        "grid": cfg.grid,
    });
    write_json(&out.file("roundtrip.json")?, &result)?;
    write_json(&out.file("manifest.json")?, &manifest(cfg, "roundtrip", result))?;
    out.commit()?;
    println!("max interior-cell absolute error: {:.6e}", r.max_interior_error);
    Ok(true)
}
