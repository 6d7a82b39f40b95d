use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentOutput, ExperimentSpec, ResultRow, SCHEMA_VERSION};
use crate::error::Result;

/// Per-(structure, method, R, T, EB) aggregate over replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub experiment: String,
    pub structure: String,
    pub method: String,
    pub num_features: usize,
    pub temperature: f64,
    pub empirical_bayes: bool,
    pub succeeded: usize,
    pub failed: usize,
    pub elbo_mean: Option<f64>,
    pub elbo_p10: Option<f64>,
    pub elbo_p90: Option<f64>,
    pub lml_mean: Option<f64>,
    pub lml_p10: Option<f64>,
    pub lml_p90: Option<f64>,
    pub noise_variance_mean: Option<f64>,
}

/// Linear-interpolation percentile of an unsorted sample (`q` in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Groups rows by configuration and reports mean and 10th/90th percentiles.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (String, String, String, usize, u64, bool);
    let mut groups: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.experiment.clone(),
            r.structure.clone(),
            r.method.clone(),
            r.num_features,
            r.temperature.to_bits(),
            r.empirical_bayes,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(
            |((experiment, structure, method, num_features, t, eb), members)| {
                let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.is_ok()).collect();
                let elbo: Vec<f64> = ok.iter().filter_map(|r| r.elbo).collect();
                let lml: Vec<f64> = ok.iter().filter_map(|r| r.lml).collect();
                let noise: Vec<f64> = ok.iter().filter_map(|r| r.noise_variance).collect();
                SummaryRow {
                    schema_version: SCHEMA_VERSION,
                    experiment,
                    structure,
                    method,
                    num_features,
                    temperature: f64::from_bits(t),
                    empirical_bayes: eb,
                    succeeded: ok.len(),
                    failed: members.len() - ok.len(),
                    elbo_mean: mean(&elbo),
                    elbo_p10: percentile(&elbo, 0.1),
                    elbo_p90: percentile(&elbo, 0.9),
                    lml_mean: mean(&lml),
                    lml_p10: percentile(&lml, 0.1),
                    lml_p90: percentile(&lml, 0.9),
                    noise_variance_mean: mean(&noise),
                }
            },
        )
        .collect()
}

fn write_csv<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads result rows back from an experiment CSV.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

#[derive(Serialize)]
struct TraceRecord {
    schema_version: u32,
    iteration: usize,
    elbo: f64,
    lml: Option<f64>,
    noise_variance: f64,
    prior_scale: f64,
    lengthscale: f64,
    outputscale: f64,
    learning_rate: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    experiment: &'a str,
    package_version: &'static str,
    git_revision: Option<String>,
    config: &'a ExperimentSpec,
    dataset_seeds: Vec<u64>,
    rff_seeds: Vec<u64>,
    rows: usize,
    failed_rows: usize,
    files: Vec<String>,
}

fn git_revision() -> Option<String> {
    let out = Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Writes `<kind>.csv`, `<kind>_summary.csv`, curve and trace CSVs and
/// `<kind>_manifest.json` under `spec.out`. Returns the written paths.
pub fn write_outputs(spec: &ExperimentSpec, output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let dir = &spec.out;
    fs::create_dir_all(dir)?;
    let kind = spec.kind.as_str();
    let mut files = Vec::new();

    let rows_path = dir.join(format!("{kind}.csv"));
    write_csv(&rows_path, &output.rows)?;
    files.push(rows_path);

    let summary_path = dir.join(format!("{kind}_summary.csv"));
    write_csv(&summary_path, &summarize(&output.rows))?;
    files.push(summary_path);

    if !output.curves.is_empty() {
        let curve_dir = dir.join("curves");
        fs::create_dir_all(&curve_dir)?;
        for c in &output.curves {
            let p = curve_dir.join(format!("{}.csv", c.stem));
            write_csv(&p, &c.points)?;
            files.push(p);
        }
    }
    if !output.traces.is_empty() {
        let trace_dir = dir.join("traces");
        fs::create_dir_all(&trace_dir)?;
        for t in &output.traces {
            let records: Vec<TraceRecord> = t
                .entries
                .iter()
                .map(|e| TraceRecord {
                    schema_version: SCHEMA_VERSION,
                    iteration: e.iteration,
                    elbo: e.elbo,
                    lml: e.lml,
                    noise_variance: e.noise_variance,
                    prior_scale: e.prior_scale,
                    lengthscale: e.lengthscale,
                    outputscale: e.outputscale,
                    learning_rate: e.learning_rate,
                })
                .collect();
            let p = trace_dir.join(format!("{}.csv", t.stem));
            write_csv(&p, &records)?;
            files.push(p);
        }
    }

    let mut dataset_seeds: Vec<u64> = output.rows.iter().map(|r| r.dataset_seed).collect();
    dataset_seeds.sort_unstable();
    dataset_seeds.dedup();
    let mut rff_seeds: Vec<u64> = output.rows.iter().map(|r| r.rff_seed).collect();
    rff_seeds.sort_unstable();
    rff_seeds.dedup();
    let manifest_path = dir.join(format!("{kind}_manifest.json"));
    let rel = |p: &PathBuf| p.strip_prefix(dir).unwrap_or(p).display().to_string();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment: kind,
        package_version: env!("CARGO_PKG_VERSION"),
        git_revision: git_revision(),
        config: spec,
        dataset_seeds,
        rff_seeds,
        rows: output.rows.len(),
        failed_rows: output.failures(),
        files: files.iter().map(rel).collect(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    files.push(manifest_path);
    Ok(files)
}

/// A row whose ELBO exceeds its LML by more than the tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundViolation {
    /// 1-based data line number in the CSV.
    pub line: usize,
    pub structure: String,
    pub num_features: usize,
    pub temperature: f64,
    pub elbo: f64,
    pub lml: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BoundScan {
    pub checked: usize,
    pub skipped: usize,
    pub violations: Vec<BoundViolation>,
}

/// Checks `ELBO ≤ LML + tol · max(1, |LML|)` on every successful row fitted
/// at `T = 1`; tempered rows bound a different quantity and are skipped.
pub fn scan_bound(rows: &[ResultRow], tol: f64) -> BoundScan {
    let mut scan = BoundScan::default();
    for (i, r) in rows.iter().enumerate() {
        match (r.elbo, r.lml) {
            (Some(elbo), Some(lml)) if r.is_ok() && r.temperature == 1.0 => {
                scan.checked += 1;
                if elbo > lml + tol * lml.abs().max(1.0) {
                    scan.violations.push(BoundViolation {
                        line: i + 1,
                        structure: r.structure.clone(),
                        num_features: r.num_features,
                        temperature: r.temperature,
                        elbo,
                        lml,
                    });
                }
            }
            _ => scan.skipped += 1,
        }
    }
    scan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::{ExperimentKind, ExperimentSpec};
    use crate::vi::Structure;

    #[test]
    fn percentiles() {
        let v = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 0.5), Some(3.0));
        assert_eq!(percentile(&v, 1.0), Some(5.0));
        assert!((percentile(&v, 0.1).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn write_and_scan_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            n: 6,
            features: vec![8],
            structures: vec![Structure::Diagonal],
            max_iters: 10,
            lr_grid: vec![0.01],
            out: dir.path().to_path_buf(),
            ..ExperimentSpec::defaults(ExperimentKind::Fit)
        };
        let out = super::super::run_experiment(&spec).unwrap();
        let files = write_outputs(&spec, &out).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let rows = read_rows(&dir.path().join("fit.csv")).unwrap();
        assert_eq!(rows, out.rows);
        let header = std::fs::read_to_string(dir.path().join("fit.csv")).unwrap();
        assert!(
            header.starts_with("schema_version,experiment,dataset_seed,rff_seed,structure,method")
        );
        let scan = scan_bound(&rows, 1e-8);
        assert_eq!(scan.checked, 1);
        assert!(scan.violations.is_empty());
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("fit_manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["schema_version"], 1);
        assert_eq!(manifest["rows"], 1);
    }

    #[test]
    fn scan_flags_violations() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            n: 6,
            features: vec![8],
            structures: vec![Structure::Diagonal],
            max_iters: 5,
            lr_grid: vec![0.01],
            out: dir.path().to_path_buf(),
            ..ExperimentSpec::defaults(ExperimentKind::Fit)
        };
        let mut rows = super::super::run_experiment(&spec).unwrap().rows;
        rows[0].elbo = Some(rows[0].lml.unwrap() + 1.0);
        let scan = scan_bound(&rows, 1e-8);
        assert_eq!(scan.violations.len(), 1);
        assert_eq!(scan.violations[0].line, 1);
    }
}
