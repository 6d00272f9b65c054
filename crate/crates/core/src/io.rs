//! Dataset CSV files and run outputs.
//!
//! Datasets are long-format CSV, one product per row:
//! `market_id, firm_id, shares, prices, x0.., w0..`. Lines starting with `#`
//! carry `key=value` provenance and are skipped on load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, MarketData};
use crate::montecarlo::{elasticity_histogram, SimulationReport, SweepRow};

/// Ordered `key=value` pairs written at the top of every output file.
pub type Provenance = Vec<(String, String)>;

pub const REQUIRED_COLUMNS: [&str; 4] = ["market_id", "firm_id", "shares", "prices"];

/// Crate version plus the commit it was built from, when known.
pub fn build_id() -> String {
    match option_env!("BLPMLE_GIT_HASH") {
        Some(h) if !h.is_empty() => format!("{}+{h}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_provenance(out: &mut impl Write, path: &Path, provenance: &Provenance) -> Result<()> {
    for (k, v) in provenance {
        let v = v.replace('\n', " ");
        writeln!(out, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a dataset as CSV. Floats use shortest round-trip formatting, so
/// loading the file back reproduces the dataset exactly.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset, provenance: &Provenance) -> Result<()> {
    let mut out = create(path)?;
    write_provenance(&mut out, path, provenance)?;
    let (kd, ks) = (dataset.k_demand(), dataset.k_cost());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = REQUIRED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..kd).map(|k| format!("x{k}")));
    header.extend((0..ks).map(|k| format!("w{k}")));
    w.write_record(&header)?;
    for m in &dataset.markets {
        for j in 0..m.n_products() {
            let mut row = vec![
                m.market_id.to_string(),
                m.firm_ids[j].to_string(),
                m.shares[j].to_string(),
                m.prices[j].to_string(),
            ];
            row.extend(m.demand_chars.row(j).iter().map(|v| v.to_string()));
            row.extend(m.cost_chars.row(j).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Rows {
    id: i64,
    first_row: usize,
    firms: Vec<i64>,
    shares: Vec<f64>,
    prices: Vec<f64>,
    x: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

/// Load a dataset CSV. Markets appear in order of first occurrence. Schema
/// problems are reported with the 1-based data row (header excluded).
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let schema = |row: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        row,
        message,
    };
    let headers = reader.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut required = [0usize; 4];
    for (slot, name) in required.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = position(name).ok_or_else(|| schema(0, format!("missing required column {name:?}")))?;
    }
    let numbered = |prefix: char| -> Vec<usize> {
        (0..).map_while(|k| position(&format!("{prefix}{k}"))).collect()
    };
    let (x_cols, w_cols) = (numbered('x'), numbered('w'));
    if x_cols.is_empty() {
        return Err(schema(0, "missing required column \"x0\"".into()));
    }
    if w_cols.is_empty() {
        return Err(schema(0, "missing required column \"w0\"".into()));
    }

    let mut order: Vec<Rows> = Vec::new();
    let mut index: HashMap<i64, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| schema(row, e.to_string()))?;
        let field = |c: usize, name: &str| -> Result<&str> {
            record.get(c).ok_or_else(|| schema(row, format!("missing value for {name:?}")))
        };
        let float = |c: usize| -> Result<f64> {
            let name = &headers[c];
            let v = field(c, name)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| schema(row, format!("column {name:?}: {v:?} is not a finite number")))
        };
        let int = |c: usize| -> Result<i64> {
            let name = &headers[c];
            let v = field(c, name)?;
            v.parse::<i64>()
                .map_err(|_| schema(row, format!("column {name:?}: {v:?} is not an integer")))
        };
        let id = int(required[0])?;
        let slot = *index.entry(id).or_insert_with(|| {
            order.push(Rows {
                id,
                first_row: row,
                firms: Vec::new(),
                shares: Vec::new(),
                prices: Vec::new(),
                x: Vec::new(),
                w: Vec::new(),
            });
            order.len() - 1
        });
        let m = &mut order[slot];
        m.firms.push(int(required[1])?);
        m.shares.push(float(required[2])?);
        m.prices.push(float(required[3])?);
        m.x.push(x_cols.iter().map(|&c| float(c)).collect::<Result<_>>()?);
        m.w.push(w_cols.iter().map(|&c| float(c)).collect::<Result<_>>()?);
    }
    if order.is_empty() {
        return Err(schema(0, "no data rows".into()));
    }
    let markets = order
        .into_iter()
        .map(|m| {
            let n = m.shares.len();
            let x = DMatrix::from_fn(n, x_cols.len(), |j, k| m.x[j][k]);
            let w = DMatrix::from_fn(n, w_cols.len(), |j, k| m.w[j][k]);
            MarketData::new(m.id, x, w, DVector::from_vec(m.prices), DVector::from_vec(m.shares), m.firms)
                .map_err(|e| schema(m.first_row, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(markets)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, provenance: &Provenance, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut out = create(path)?;
    write_provenance(&mut out, path, provenance)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per replication and estimator.
pub fn write_replications_csv(path: &Path, report: &SimulationReport, provenance: &Provenance) -> Result<()> {
    let names = &report.parameter_names;
    let mut header = vec!["replication", "seed", "estimator", "converged"];
    let est: Vec<String> = names.iter().map(|n| format!("{n}_hat")).collect();
    let se: Vec<String> = names.iter().map(|n| format!("{n}_se")).collect();
    let fl: Vec<String> = names.iter().map(|n| format!("{n}_se_flagged")).collect();
    header.extend(est.iter().map(String::as_str));
    header.extend(se.iter().map(String::as_str));
    header.extend(fl.iter().map(String::as_str));
    header.extend(["elasticity_bias", "elasticity_abs_bias", "error"]);
    let rows = report
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.index.to_string(),
                r.seed.to_string(),
                r.estimator.to_string(),
                r.converged.to_string(),
            ];
            for k in 0..names.len() {
                row.push(fmt_opt(r.theta_hat.as_ref().map(|t| t[k])));
            }
            row.extend(r.standard_errors.iter().map(|v| fmt_opt(Some(*v).filter(|v| v.is_finite()))));
            row.extend(r.se_flagged.iter().map(|f| f.to_string()));
            row.push(fmt_opt(r.elasticity_bias));
            row.push(fmt_opt(r.elasticity_abs_bias));
            row.push(r.error.clone().unwrap_or_default());
            row
        })
        .collect();
    write_rows(path, provenance, &header, rows)
}

/// Scenario × estimator × parameter summary.
pub fn write_aggregate_csv(path: &Path, report: &SimulationReport, provenance: &Provenance) -> Result<()> {
    let header = [
        "scenario", "estimator", "parameter", "truth", "replications", "estimates", "mean_bias", "rmse",
        "mean_se", "coverage", "se_drop_rate", "mean_se_all", "coverage_all",
    ];
    let rows = report
        .parameters
        .iter()
        .map(|p| {
            vec![
                report.scenario.clone(),
                p.estimator.to_string(),
                p.parameter.clone(),
                p.truth.to_string(),
                p.replications.to_string(),
                p.estimates.to_string(),
                p.mean_bias.to_string(),
                p.rmse.to_string(),
                p.mean_se.to_string(),
                p.coverage.to_string(),
                p.se_drop_rate.to_string(),
                p.mean_se_all.to_string(),
                p.coverage_all.to_string(),
            ]
        })
        .collect();
    write_rows(path, provenance, &header, rows)
}

pub fn write_elasticity_histogram_csv(
    path: &Path,
    report: &SimulationReport,
    bins: usize,
    provenance: &Provenance,
) -> Result<()> {
    let rows = elasticity_histogram(report, bins)
        .into_iter()
        .map(|b| {
            vec![
                b.estimator.to_string(),
                b.metric,
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
            ]
        })
        .collect();
    write_rows(path, provenance, &["estimator", "metric", "lower", "upper", "count"], rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], provenance: &Provenance) -> Result<()> {
    let header = [
        "sigma_x", "log_det_sigma", "covariance_term", "jacobian_term", "total", "gmm_objective",
    ];
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.sigma_x.to_string(),
                fmt_opt(r.log_det_sigma),
                fmt_opt(r.covariance_term),
                fmt_opt(r.jacobian_term),
                fmt_opt(r.total),
                fmt_opt(r.gmm_objective),
            ]
        })
        .collect();
    write_rows(path, provenance, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{draw_scenario, ScenarioConfig, ScenarioName};

    #[test]
    fn dataset_round_trips_exactly() {
        let mut cfg = ScenarioConfig::preset(ScenarioName::LowCov, 2);
        cfg.n_markets = 3;
        let data = draw_scenario(&cfg).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let prov = vec![("scenario".to_string(), "low_cov".to_string())];
        write_dataset_csv(&path, &data, &prov).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back, data);
        let again = dir.path().join("e.csv");
        write_dataset_csv(&again, &back, &prov).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn schema_errors_name_columns_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "market_id,firm_id,prices,x0,w0\n0,0,1.0,1,1\n").unwrap();
        let msg = read_dataset_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("\"shares\""), "{msg}");

        std::fs::write(
            &path,
            "# note=x\nmarket_id,firm_id,shares,prices,x0,w0\n0,0,0.2,1.0,1,1\n0,1,abc,1.0,1,1\n",
        )
        .unwrap();
        match read_dataset_csv(&path).unwrap_err() {
            Error::Schema { row, message, .. } => {
                assert_eq!(row, 2);
                assert!(message.contains("shares"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
