use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::generate_synthetic;
use crate::error::{Error, Result};
use crate::features::RffFeatureMap;
use crate::model::{predictive_posterior, Dataset};
use crate::optimize::{
    fit, fit_hyperparameters_lml, FitConfig, FitResult, FitStatus, PriorScaleMode, RankOneUpdate,
    TraceEntry,
};
use crate::vi::Structure;

/// Version of every CSV layout written by the harness.
pub const SCHEMA_VERSION: u32 = 1;

/// Points in each predictive curve.
pub const CURVE_POINTS: usize = 200;

pub const DEFAULT_FIG2_FEATURES: [usize; 7] = [16, 32, 64, 128, 256, 512, 1024];
pub const DEFAULT_TEMPERATURES: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Fig1,
    Fig2,
    Eb,
    Temper,
    Fit,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Fig2 => "fig2",
            ExperimentKind::Eb => "eb",
            ExperimentKind::Temper => "temper",
            ExperimentKind::Fit => "fit",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fig1" => Ok(ExperimentKind::Fig1),
            "fig2" => Ok(ExperimentKind::Fig2),
            "eb" => Ok(ExperimentKind::Eb),
            "temper" => Ok(ExperimentKind::Temper),
            "fit" | "custom" => Ok(ExperimentKind::Fit),
            other => Err(Error::InvalidArgument(format!(
                "unknown experiment `{other}`"
            ))),
        }
    }
}

/// Full description of one experiment run.
///
/// `replicates` counts dataset seeds (`seed`, `seed + 1`, ...) for every
/// experiment except `fig2`, where the dataset is fixed by `seed` and
/// `replicates` counts random-feature draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub n: usize,
    pub features: Vec<usize>,
    pub structures: Vec<Structure>,
    pub temperatures: Vec<f64>,
    pub replicates: usize,
    /// `None` runs both settings where the experiment compares them (`eb`).
    pub empirical_bayes: Option<bool>,
    pub eb_mode: PriorScaleMode,
    pub rank1_update: RankOneUpdate,
    pub epsilon: f64,
    pub lr_grid: Vec<f64>,
    pub max_iters: usize,
    pub out: PathBuf,
}

impl ExperimentSpec {
    /// Defaults for each experiment.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = FitConfig::<f64>::new(Structure::FullRank);
        let mut spec = Self {
            kind,
            seed: 0,
            n: 20,
            features: vec![1024],
            structures: Structure::ALL.to_vec(),
            temperatures: vec![1.0],
            replicates: 2,
            empirical_bayes: Some(false),
            eb_mode: PriorScaleMode::Closed,
            rank1_update: base.rank_one_update,
            epsilon: base.jitter,
            lr_grid: base.lr_grid,
            max_iters: base.max_iters,
            out: PathBuf::from("results"),
        };
        match kind {
            ExperimentKind::Fig1 => {}
            ExperimentKind::Fig2 => {
                spec.features = DEFAULT_FIG2_FEATURES.to_vec();
                spec.replicates = 100;
            }
            ExperimentKind::Eb => {
                spec.structures = vec![Structure::RankOne, Structure::FullRank];
                spec.empirical_bayes = None;
            }
            ExperimentKind::Temper => {
                spec.structures = vec![Structure::Diagonal, Structure::RankOne];
                spec.temperatures = DEFAULT_TEMPERATURES.to_vec();
            }
            ExperimentKind::Fit => {
                spec.replicates = 1;
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.features.is_empty() || self.features.contains(&0) {
            return bad("feature counts must be a non-empty list of positive integers");
        }
        if self.structures.is_empty() {
            return bad("structure list is empty");
        }
        if self.temperatures.is_empty()
            || self
                .temperatures
                .iter()
                .any(|&t| !(t > 0.0 && t.is_finite()))
        {
            return bad("temperatures must be a non-empty list of positive numbers");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        self.fit_config(Structure::Diagonal, 1.0, false, 0)
            .validate()
    }

    fn fit_config(
        &self,
        structure: Structure,
        temperature: f64,
        eb: bool,
        seed: u64,
    ) -> FitConfig<f64> {
        FitConfig {
            temperature,
            empirical_bayes: eb,
            prior_scale_mode: self.eb_mode,
            rank_one_update: self.rank1_update,
            max_iters: self.max_iters,
            lr_grid: self.lr_grid.clone(),
            jitter: self.epsilon,
            seed,
            trace_lml: self.kind == ExperimentKind::Eb,
            ..FitConfig::new(structure)
        }
    }

    fn eb_settings(&self) -> Vec<bool> {
        match self.empirical_bayes {
            Some(v) => vec![v],
            None => vec![true, false],
        }
    }

    /// Every fit this experiment performs, in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        let replicate_datasets = self.kind != ExperimentKind::Fig2;
        for rep in 0..self.replicates {
            let (dataset_seed, feature_replicate) = if replicate_datasets {
                (self.seed + rep as u64, 0)
            } else {
                (self.seed, rep as u64)
            };
            for &r in &self.features {
                let rff_seed = derive_seed(dataset_seed, r as u64, feature_replicate);
                for &t in &self.temperatures {
                    for &s in &self.structures {
                        for eb in self.eb_settings() {
                            // The EB comparison only needs the full-rank reference with EB on.
                            if self.kind == ExperimentKind::Eb && s == Structure::FullRank && !eb {
                                continue;
                            }
                            cells.push(Cell {
                                dataset_seed,
                                rff_seed,
                                num_features: r,
                                temperature: t,
                                method: Method::Elbo(s),
                                empirical_bayes: eb,
                            });
                        }
                    }
                }
                if matches!(self.kind, ExperimentKind::Fig1 | ExperimentKind::Eb) {
                    for eb in self.eb_settings() {
                        cells.push(Cell {
                            dataset_seed,
                            rff_seed,
                            num_features: r,
                            temperature: 1.0,
                            method: Method::TypeTwo,
                            empirical_bayes: eb,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// SplitMix64 finaliser, used to decorrelate seeds for different streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Feature-map seed for a dataset seed, feature count and replicate index.
pub fn derive_seed(dataset_seed: u64, num_features: u64, replicate: u64) -> u64 {
    mix(mix(mix(dataset_seed) ^ num_features) ^ replicate)
}

/// How a cell is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// ELBO maximisation with the given covariance structure.
    Elbo(Structure),
    /// Type-II maximum likelihood with the exact posterior.
    TypeTwo,
}

impl Method {
    pub fn structure_label(self) -> &'static str {
        match self {
            Method::Elbo(s) => s.as_str(),
            Method::TypeTwo => "exact",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Elbo(_) => "elbo",
            Method::TypeTwo => "lml",
        }
    }
}

/// One fit in an experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub dataset_seed: u64,
    pub rff_seed: u64,
    pub num_features: usize,
    pub temperature: f64,
    pub method: Method,
    pub empirical_bayes: bool,
}

impl Cell {
    /// File-name stem identifying the cell.
    pub fn stem(&self) -> String {
        format!(
            "d{}_{}_R{}_T{}_eb{}",
            self.dataset_seed,
            self.method.structure_label(),
            self.num_features,
            self.temperature,
            if self.empirical_bayes { "on" } else { "off" }
        )
    }
}

/// One row of an experiment CSV. Column order is part of the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub experiment: String,
    pub dataset_seed: u64,
    pub rff_seed: u64,
    pub structure: String,
    pub method: String,
    pub num_features: usize,
    pub temperature: f64,
    pub empirical_bayes: bool,
    pub status: String,
    pub elbo: Option<f64>,
    pub lml: Option<f64>,
    pub noise_variance: Option<f64>,
    pub prior_scale: Option<f64>,
    pub lengthscale: Option<f64>,
    pub outputscale: Option<f64>,
    pub alignment: Option<f64>,
    pub norm_gap: Option<f64>,
    pub train_mse: Option<f64>,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub noise_floor_hit: Option<bool>,
    pub ascent_violations: Option<usize>,
    pub wall_time_s: f64,
    pub error: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status != "failed"
    }

    fn sort_key(&self) -> (String, u64, usize, u64, String, String, u64, bool) {
        (
            self.experiment.clone(),
            self.dataset_seed,
            self.num_features,
            self.rff_seed,
            self.method.clone(),
            self.structure.clone(),
            self.temperature.to_bits(),
            self.empirical_bayes,
        )
    }
}

/// Predictive mean and a ±2σ band over a dense input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveCurve {
    pub stem: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub schema_version: u32,
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Optimisation trace of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTrace {
    pub stem: String,
    pub entries: Vec<TraceEntry<f64>>,
}

/// Everything an experiment produces before it is written to disk.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub curves: Vec<PredictiveCurve>,
    pub traces: Vec<CellTrace>,
}

impl ExperimentOutput {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Evenly spaced grid over `[min(x) − 1, max(x) + 1]`.
pub fn prediction_grid(data: &Dataset<f64>) -> Vec<f64> {
    let xs = data.inputs().column(0);
    let lo = xs.min() - 1.0;
    let hi = xs.max() + 1.0;
    (0..CURVE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64)
        .collect()
}

fn predictive_curve(
    stem: String,
    result: &FitResult<f64>,
    map: &RffFeatureMap<f64>,
    data: &Dataset<f64>,
) -> Result<PredictiveCurve> {
    let h = &result.hyperparameters;
    let points = prediction_grid(data)
        .into_iter()
        .map(|x| {
            let p =
                predictive_posterior(&result.posterior, map, &h.kernel, &[x], h.noise_variance)?;
            let half = 2.0 * p.variance.max(0.0).sqrt();
            Ok(CurvePoint {
                schema_version: SCHEMA_VERSION,
                x,
                mean: p.mean,
                lower: p.mean - half,
                upper: p.mean + half,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictiveCurve { stem, points })
}

struct CellOutcome {
    row: ResultRow,
    curve: Option<PredictiveCurve>,
    trace: Option<CellTrace>,
}

fn blank_row(spec: &ExperimentSpec, cell: &Cell) -> ResultRow {
    ResultRow {
        schema_version: SCHEMA_VERSION,
        experiment: spec.kind.as_str().to_string(),
        dataset_seed: cell.dataset_seed,
        rff_seed: cell.rff_seed,
        structure: cell.method.structure_label().to_string(),
        method: cell.method.label().to_string(),
        num_features: cell.num_features,
        temperature: cell.temperature,
        empirical_bayes: cell.empirical_bayes,
        status: "failed".to_string(),
        elbo: None,
        lml: None,
        noise_variance: None,
        prior_scale: None,
        lengthscale: None,
        outputscale: None,
        alignment: None,
        norm_gap: None,
        train_mse: None,
        learning_rate: None,
        iterations: None,
        noise_floor_hit: None,
        ascent_violations: None,
        wall_time_s: 0.0,
        error: String::new(),
    }
}

/// Fits one cell on an already generated dataset.
pub fn run_cell(
    spec: &ExperimentSpec,
    cell: &Cell,
    data: &Dataset<f64>,
) -> Result<(ResultRow, FitResult<f64>, RffFeatureMap<f64>)> {
    let start = Instant::now();
    let map = RffFeatureMap::sample(cell.rff_seed, data.input_dim(), cell.num_features)?;
    let init_seed = derive_seed(cell.rff_seed, 0x1417, 0);
    let result = match cell.method {
        Method::Elbo(s) => fit(
            data,
            &map,
            &spec.fit_config(s, cell.temperature, cell.empirical_bayes, init_seed),
        )?,
        Method::TypeTwo => fit_hyperparameters_lml(
            data,
            &map,
            &spec.fit_config(Structure::FullRank, 1.0, cell.empirical_bayes, init_seed),
        )?,
    };
    let h = &result.hyperparameters;
    let phi: DMatrix<f64> = map.design_matrix(data.inputs(), &h.kernel)?;
    let row = ResultRow {
        status: match result.status {
            FitStatus::Converged { .. } => "converged",
            FitStatus::MaxIterations => "max_iters",
        }
        .to_string(),
        elbo: Some(result.elbo),
        lml: Some(result.lml),
        noise_variance: Some(h.noise_variance),
        prior_scale: Some(h.prior_scale),
        lengthscale: Some(h.kernel.lengthscale),
        outputscale: Some(h.kernel.outputscale),
        alignment: result.collapse.map(|c| c.alignment),
        norm_gap: result.collapse.map(|c| c.norm_gap),
        train_mse: Some(result.train_mse(&phi, data.targets())),
        learning_rate: Some(result.learning_rate),
        iterations: Some(result.trace.len()),
        noise_floor_hit: Some(result.noise_floor_hit),
        ascent_violations: Some(result.ascent_violations),
        wall_time_s: start.elapsed().as_secs_f64(),
        ..blank_row(spec, cell)
    };
    Ok((row, result, map))
}

fn run_one(spec: &ExperimentSpec, cell: &Cell) -> CellOutcome {
    let start = Instant::now();
    let outcome = generate_synthetic::<f64>(cell.dataset_seed, spec.n).and_then(|data| {
        let (row, result, map) = run_cell(spec, cell, &data)?;
        let curve = match spec.kind {
            ExperimentKind::Fig2 => None,
            _ => Some(predictive_curve(
                format!("{}_{}", spec.kind, cell.stem()),
                &result,
                &map,
                &data,
            )?),
        };
        let trace = (spec.kind == ExperimentKind::Eb).then(|| CellTrace {
            stem: format!("{}_{}", spec.kind, cell.stem()),
            entries: result.trace.clone(),
        });
        Ok(CellOutcome { row, curve, trace })
    });
    outcome.unwrap_or_else(|e: Error| CellOutcome {
        row: ResultRow {
            wall_time_s: start.elapsed().as_secs_f64(),
            error: e.to_string(),
            ..blank_row(spec, cell)
        },
        curve: None,
        trace: None,
    })
}

/// Runs every cell of `spec` on the rayon pool. Failed cells become rows
/// with `status = failed`; rows are sorted by key.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let outcomes: Vec<CellOutcome> = spec.cells().par_iter().map(|c| run_one(spec, c)).collect();
    let mut out = ExperimentOutput::default();
    for o in outcomes {
        out.rows.push(o.row);
        out.curves.extend(o.curve);
        out.traces.extend(o.trace);
    }
    out.rows.sort_by_key(|r| r.sort_key());
    out.curves.sort_by(|a, b| a.stem.cmp(&b.stem));
    out.traces.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(out)
}
