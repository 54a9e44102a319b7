//! CSV and JSON formats for codebooks, price surfaces and modified price slices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookSurface, GridSpec, Parametrisation};
use crate::error::{Error, Result};
use crate::pricing::{ModifiedPriceSlice, PriceSurface};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSidecar {
    pub grid: GridSpec,
    pub time: f64,
    pub mode: Parametrisation,
}

/// Sidecar path next to a CSV file (`x.csv` -> `x.json`).
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `T,u,re,im` rows and the JSON sidecar.
pub fn write_codebook(path: &Path, s: &CodebookSurface) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "u", "re", "im"])?;
    let g = s.grid();
    for j in 0..g.n_maturities() {
        for k in 0..g.n_frequencies() {
            let v = s.get(j, k);
            w.write_record(&[
                format!("{}", g.maturity(j)),
                format!("{}", g.frequency(k)),
                format!("{:e}", v.re),
                format!("{:e}", v.im),
            ])?;
        }
    }
    w.flush()?;
    let side = CodebookSidecar { grid: *g, time: s.time(), mode: s.mode() };
    let f = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(f, &side)?;
    Ok(())
}

pub fn read_codebook(path: &Path) -> Result<CodebookSurface> {
    let side: CodebookSidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let g = side.grid;
    g.validate()?;
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["T", "u", "re", "im"] {
        return Err(Error::Data(format!("codebook header must be T,u,re,im, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut values = Vec::with_capacity(g.n_maturities() * g.n_frequencies());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("line {}: bad number in column {}", line + 2, i + 1)))
        };
        let (t, u) = (num(0)?, num(1)?);
        let idx = values.len();
        let (j, k) = (idx / g.n_frequencies(), idx % g.n_frequencies());
        if j >= g.n_maturities() || (t - g.maturity(j)).abs() > 1e-9 || (u - g.frequency(k)).abs() > 1e-9 {
            return Err(Error::Data(format!("line {}: (T, u) = ({t}, {u}) out of grid order", line + 2)));
        }
        values.push(Complex64::new(num(2)?, num(3)?));
    }
    CodebookSurface::from_values(g, side.time, side.mode, values)
}

/// Writes `T,K,C` rows.
pub fn write_price_surface(path: &Path, p: &PriceSurface) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "K", "C"])?;
    for (i, t) in p.maturities.iter().enumerate() {
        for (j, k) in p.strikes.iter().enumerate() {
            w.write_record(&[format!("{t}"), format!("{k}"), format!("{:e}", p.price(i, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `T,K,C` rows on a full maturity × strike grid.
pub fn read_price_surface(path: &Path, spot: f64) -> Result<PriceSurface> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["T", "K", "C"] {
        return Err(Error::Data(format!("price header must be T,K,C, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut vals = [0.0; 3];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = rec
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("line {}: bad number in column {}", line + 2, i + 1)))?;
        }
        rows.push((vals[0], vals[1], vals[2]));
    }
    let mut ts: Vec<f64> = rows.iter().map(|r| r.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut ks: Vec<f64> = rows.iter().map(|r| r.1).collect();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    if rows.len() != ts.len() * ks.len() {
        return Err(Error::Data("price surface must cover every (T, K) pair exactly once".into()));
    }
    let mut prices = vec![f64::NAN; rows.len()];
    for (t, k, c) in rows {
        let i = ts.iter().position(|v| *v == t).unwrap();
        let j = ks.iter().position(|v| *v == k).unwrap();
        prices[i * ks.len() + j] = c;
    }
    if prices.iter().any(|c| c.is_nan()) {
        return Err(Error::Data("price surface must cover every (T, K) pair exactly once".into()));
    }
    PriceSurface::new(spot, ks, ts, prices)
}

/// Writes `T,x,O` rows.
pub fn write_modified_slice(path: &Path, o: &ModifiedPriceSlice) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "T,x,O")?;
    for (x, v) in o.x.iter().zip(&o.values) {
        writeln!(w, "{},{},{:e}", o.maturity, x, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::new(0.1, 4, 0.5, 1.0).unwrap();
        let mut s = CodebookSurface::from_fn(g, 0.0, |t, u| Complex64::new(-u * u * (1.0 + t), 0.1 * u / 3.0)).unwrap();
        s.set_time(0.2);
        let p = dir.path().join("cb.csv");
        write_codebook(&p, &s).unwrap();
        let back = read_codebook(&p).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn price_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PriceSurface::new(1.0, vec![0.9, 1.0, 1.1], vec![0.5, 1.0], vec![0.12, 0.05, 0.01, 0.14, 0.08, 0.03]).unwrap();
        let f = dir.path().join("p.csv");
        write_price_surface(&f, &p).unwrap();
        assert_eq!(read_price_surface(&f, 1.0).unwrap(), p);
    }
}
