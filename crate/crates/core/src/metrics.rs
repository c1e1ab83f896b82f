//! Per-iteration run records, cross-seed aggregation and CSV export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed record {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of the run log, written after every iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u64,
    /// Training-step clock after this iteration.
    pub training_steps: u64,
    pub gradient_updates: u64,
    pub target_timesteps: u64,
    pub collected_timesteps: u64,
    pub target_eval_return: Option<f64>,
    pub pop_mean_eval_return: Option<f64>,
    pub mean_pop_fitness: Option<f64>,
    pub fitness_list: Option<Vec<f64>>,
    pub f_target: Option<f64>,
    pub mean_action_discrepancy: Option<f64>,
    pub discrepancies: Option<Vec<f64>>,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub batch_target_count: u64,
    pub batch_population_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<IterationRow>,
}

pub const RECORD_FILE: &str = "record.jsonl";

impl RunRecord {
    pub fn new(seed: u64) -> Self {
        Self { seed, rows: Vec::new() }
    }

    /// Reads a JSON-lines record; the seed is not stored in the rows.
    pub fn load(path: &Path, seed: u64) -> Result<Self, MetricsError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(Self { seed, rows })
    }

    pub fn field_series(&self, field: Field) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| field.get(r).map(|v| (r.training_steps, v)))
            .collect()
    }
}

/// Appends rows to a JSON-lines file as the run progresses.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, row: &IterationRow) -> Result<(), MetricsError> {
        let line = serde_json::to_string(row).map_err(|e| MetricsError::Domain(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Scalar columns that can be aggregated across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Field {
    TargetEvalReturn,
    PopMeanEvalReturn,
    MeanPopFitness,
    FTarget,
    MeanActionDiscrepancy,
    CriticLoss,
    ActorObjective,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::TargetEvalReturn,
        Field::PopMeanEvalReturn,
        Field::MeanPopFitness,
        Field::FTarget,
        Field::MeanActionDiscrepancy,
        Field::CriticLoss,
        Field::ActorObjective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::TargetEvalReturn => "target_eval_return",
            Field::PopMeanEvalReturn => "pop_mean_eval_return",
            Field::MeanPopFitness => "mean_pop_fitness",
            Field::FTarget => "f_target",
            Field::MeanActionDiscrepancy => "mean_action_discrepancy",
            Field::CriticLoss => "critic_loss",
            Field::ActorObjective => "actor_objective",
        }
    }

    pub fn parse(name: &str) -> Option<Field> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn get(self, row: &IterationRow) -> Option<f64> {
        match self {
            Field::TargetEvalReturn => row.target_eval_return,
            Field::PopMeanEvalReturn => row.pop_mean_eval_return,
            Field::MeanPopFitness => row.mean_pop_fitness,
            Field::FTarget => row.f_target,
            Field::MeanActionDiscrepancy => row.mean_action_discrepancy,
            Field::CriticLoss => row.critic_loss,
            Field::ActorObjective => row.actor_objective,
        }
    }
}

/// Confidence level of the reported intervals.
pub const CI_LEVEL: f64 = 0.68;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

/// Two-sided t-interval half-width `t_{(1+level)/2, n-1} * sd / sqrt(n)`;
/// `None` for fewer than two values.
pub fn t_half_width(values: &[f64], level: f64) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Some(0.0);
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    Some(t.inverse_cdf(0.5 + level / 2.0) * (var / n as f64).sqrt())
}

/// Centered moving average; the window shrinks symmetrically at the edges.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..series.len())
        .map(|i| {
            let reach = half.min(i).min(series.len() - 1 - i);
            let slice = &series[i - reach..=i + reach];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub field: Field,
    /// Training-step grid taken from the first record.
    pub x: Vec<u64>,
    pub seeds: Vec<u64>,
    /// `per_seed[k][i]`: seed `k` at grid point `i`.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub ci_low: Option<Vec<f64>>,
    pub ci_high: Option<Vec<f64>>,
    pub window: usize,
}

/// Value of the point whose step is nearest to `x`; earlier point wins ties.
fn nearest(series: &[(u64, f64)], x: u64) -> f64 {
    let mut best = series[0];
    for &p in &series[1..] {
        if p.0.abs_diff(x) < best.0.abs_diff(x) {
            best = p;
        }
    }
    best.1
}

/// Aligns every record to the first record's training-step grid, averages
/// across seeds with a 68% t-interval, then smooths mean and bounds.
pub fn aggregate(records: &[RunRecord], field: Field, window: usize) -> Result<AggregateCurve, MetricsError> {
    let x: Vec<u64> = records
        .first()
        .map(|r| r.field_series(field).iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let mut per_seed = Vec::with_capacity(records.len());
    for record in records {
        let series = record.field_series(field);
        if series.is_empty() {
            if x.is_empty() {
                per_seed.push(Vec::new());
                continue;
            }
            return Err(MetricsError::Domain(format!(
                "seed {} has no `{}` values",
                record.seed,
                field.name()
            )));
        }
        per_seed.push(x.iter().map(|&step| nearest(&series, step)).collect::<Vec<_>>());
    }
    let column = |i: usize| per_seed.iter().map(|s| s[i]).collect::<Vec<f64>>();
    let raw_mean: Vec<f64> = (0..x.len())
        .map(|i| column(i).iter().sum::<f64>() / records.len() as f64)
        .collect();
    let (ci_low, ci_high) = if records.len() < 2 {
        if !x.is_empty() {
            log::warn!("single seed: `{}` curve has no confidence interval", field.name());
        }
        (None, None)
    } else {
        let half: Vec<f64> = (0..x.len())
            .map(|i| t_half_width(&column(i), CI_LEVEL).expect("two or more seeds"))
            .collect();
        let low: Vec<f64> = raw_mean.iter().zip(&half).map(|(m, h)| m - h).collect();
        let high: Vec<f64> = raw_mean.iter().zip(&half).map(|(m, h)| m + h).collect();
        (Some(smooth(&low, window)), Some(smooth(&high, window)))
    };
    Ok(AggregateCurve {
        field,
        x,
        seeds: records.iter().map(|r| r.seed).collect(),
        per_seed,
        mean: smooth(&raw_mean, window),
        ci_low,
        ci_high,
        window,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalPerformance {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub half_width: Option<f64>,
    /// Some seed had fewer evaluations than the window.
    pub truncated: bool,
}

/// Per seed, the maximum over the last `last` values of `field`; then the
/// cross-seed mean with a 68% t-interval.
pub fn final_performance(records: &[RunRecord], field: Field, last: usize) -> Result<FinalPerformance, MetricsError> {
    if records.is_empty() || last == 0 {
        return Err(MetricsError::Domain("no records or empty window".into()));
    }
    let mut per_seed = Vec::with_capacity(records.len());
    let mut truncated = false;
    for record in records {
        let series = record.field_series(field);
        if series.is_empty() {
            return Err(MetricsError::Domain(format!(
                "seed {} has no `{}` evaluations",
                record.seed,
                field.name()
            )));
        }
        truncated |= series.len() < last;
        let tail = &series[series.len().saturating_sub(last)..];
        per_seed.push(tail.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max));
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(FinalPerformance {
        half_width: t_half_width(&per_seed, CI_LEVEL),
        per_seed,
        mean,
        truncated,
    })
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub iteration: u64,
    pub training_steps: u64,
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Indices of bins that are strictly higher than both neighbours, with
    /// plateaus counted once at their left end.
    pub fn modes(&self) -> Vec<usize> {
        let c = &self.counts;
        let mut modes = Vec::new();
        let mut i = 0;
        while i < c.len() {
            let mut j = i;
            while j + 1 < c.len() && c[j + 1] == c[i] {
                j += 1;
            }
            let left_lower = i == 0 || c[i - 1] < c[i];
            let right_lower = j + 1 == c.len() || c[j + 1] < c[i];
            if c[i] > 0 && left_lower && right_lower {
                modes.push(i);
            }
            i = j + 1;
        }
        modes
    }
}

/// Histogram of the fitness list of the iteration nearest to `at_steps`.
pub fn fitness_snapshot(record: &RunRecord, at_steps: u64, bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::Domain("histogram needs at least one bin".into()));
    }
    let row = record
        .rows
        .iter()
        .filter(|r| r.fitness_list.as_ref().is_some_and(|f| !f.is_empty()))
        .min_by_key(|r| r.training_steps.abs_diff(at_steps))
        .ok_or_else(|| MetricsError::Domain("record holds no population fitness data".into()))?;
    let values = row.fitness_list.as_deref().unwrap_or_default();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram {
        iteration: row.iteration,
        training_steps: row.training_steps,
        edges,
        counts,
    })
}

/// Snapshot positions at one third, two thirds and the end of the clock.
pub fn snapshot_steps(total_training_steps: u64) -> [u64; 3] {
    [total_training_steps / 3, 2 * total_training_steps / 3, total_training_steps]
}

pub const ITERATION_COLUMNS: [&str; 17] = [
    "iteration",
    "training_steps",
    "gradient_updates",
    "target_timesteps",
    "collected_timesteps",
    "target_eval_return",
    "pop_mean_eval_return",
    "mean_pop_fitness",
    "f_target",
    "mean_action_discrepancy",
    "critic_loss",
    "actor_objective",
    "batch_target_count",
    "batch_population_count",
    "n_fitness",
    "fitness_list",
    "discrepancies",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined(v: &Option<Vec<f64>>) -> String {
    v.as_ref()
        .map(|xs| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

/// One CSV row per iteration. List columns are `;`-separated.
pub fn write_iterations_csv<W: Write>(record: &RunRecord, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ITERATION_COLUMNS)?;
    for r in &record.rows {
        w.write_record([
            r.iteration.to_string(),
            r.training_steps.to_string(),
            r.gradient_updates.to_string(),
            r.target_timesteps.to_string(),
            r.collected_timesteps.to_string(),
            opt(r.target_eval_return),
            opt(r.pop_mean_eval_return),
            opt(r.mean_pop_fitness),
            opt(r.f_target),
            opt(r.mean_action_discrepancy),
            opt(r.critic_loss),
            opt(r.actor_objective),
            r.batch_target_count.to_string(),
            r.batch_population_count.to_string(),
            r.fitness_list.as_ref().map_or(0, Vec::len).to_string(),
            joined(&r.fitness_list),
            joined(&r.discrepancies),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Columns: `training_steps,mean,ci_low,ci_high,seed_<s>...`.
pub fn write_aggregate_csv<W: Write>(curve: &AggregateCurve, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["training_steps".to_string(), "mean".into(), "ci_low".into(), "ci_high".into()];
    header.extend(curve.seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header)?;
    for i in 0..curve.x.len() {
        let mut row = vec![
            curve.x[i].to_string(),
            curve.mean[i].to_string(),
            opt(curve.ci_low.as_ref().map(|c| c[i])),
            opt(curve.ci_high.as_ref().map(|c| c[i])),
        ];
        row.extend(curve.per_seed.iter().map(|s| s[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn parse_f64(s: &str) -> Result<f64, MetricsError> {
    s.parse()
        .map_err(|_| MetricsError::Domain(format!("not a number: `{s}`")))
}

/// Inverse of [`write_aggregate_csv`].
pub fn read_aggregate_csv(path: &Path, field: Field, window: usize) -> Result<AggregateCurve, MetricsError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let seeds = headers
        .iter()
        .skip(4)
        .map(|h| {
            h.strip_prefix("seed_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MetricsError::Domain(format!("bad seed column `{h}`")))
        })
        .collect::<Result<Vec<u64>, _>>()?;
    let mut curve = AggregateCurve {
        field,
        x: Vec::new(),
        per_seed: vec![Vec::new(); seeds.len()],
        seeds,
        mean: Vec::new(),
        ci_low: None,
        ci_high: None,
        window,
    };
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        curve.x.push(
            rec[0]
                .parse()
                .map_err(|_| MetricsError::Domain(format!("bad step `{}`", &rec[0])))?,
        );
        curve.mean.push(parse_f64(&rec[1])?);
        if !rec[2].is_empty() {
            low.push(parse_f64(&rec[2])?);
            high.push(parse_f64(&rec[3])?);
        }
        for (k, s) in curve.per_seed.iter_mut().enumerate() {
            s.push(parse_f64(&rec[4 + k])?);
        }
    }
    if !low.is_empty() || (curve.x.is_empty() && curve.seeds.len() >= 2) {
        curve.ci_low = Some(low);
        curve.ci_high = Some(high);
    }
    Ok(curve)
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub crate_version: String,
    pub smoothing_window: usize,
    pub files: Vec<String>,
}

/// Seeds with a `seed_<n>/record.jsonl` under `run_dir`, ascending.
pub fn discover_seeds(run_dir: &Path) -> Result<Vec<u64>, MetricsError> {
    let mut seeds = Vec::new();
    for entry in fs::read_dir(run_dir).map_err(io_err(run_dir))? {
        let entry = entry.map_err(io_err(run_dir))?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if entry.path().join(RECORD_FILE).is_file() {
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn load_records(run_dir: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    discover_seeds(run_dir)?
        .into_iter()
        .map(|s| RunRecord::load(&seed_dir(run_dir, s).join(RECORD_FILE), s))
        .collect()
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<(), MetricsError>) -> Result<(), MetricsError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).map_err(io_err(path))
}

/// Writes `seed_<n>/iterations.csv` for every seed, `aggregate_<field>.csv`
/// for every field, and `manifest.json`. Returns the manifest.
pub fn export(run_dir: &Path, window: usize) -> Result<Manifest, MetricsError> {
    let records = load_records(run_dir)?;
    let mut files = Vec::new();
    for record in &records {
        let rel = format!("seed_{}/iterations.csv", record.seed);
        write_file(&run_dir.join(&rel), |buf| write_iterations_csv(record, buf))?;
        files.push(rel);
    }
    let mut curves = BTreeMap::new();
    for field in Field::ALL {
        let curve = match aggregate(&records, field, window) {
            Ok(c) => c,
            // A field only some seeds carry is skipped.
            Err(MetricsError::Domain(msg)) => {
                log::warn!("skipping `{}`: {msg}", field.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        curves.insert(field, curve);
    }
    for (field, curve) in &curves {
        let rel = format!("aggregate_{}.csv", field.name());
        write_file(&run_dir.join(&rel), |buf| write_aggregate_csv(curve, buf))?;
        files.push(rel);
    }
    let config_path = run_dir.join(CONFIG_FILE);
    let config_sha256 = if config_path.is_file() {
        let bytes = fs::read(&config_path).map_err(io_err(&config_path))?;
        Some(hex::encode(Sha256::digest(&bytes)))
    } else {
        None
    };
    let manifest = Manifest {
        config_sha256,
        seeds: records.iter().map(|r| r.seed).collect(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        smoothing_window: window,
        files,
    };
    let path = run_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| MetricsError::Domain(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_row(iteration: u64, steps: u64, value: f64) -> IterationRow {
        IterationRow {
            iteration,
            training_steps: steps,
            target_eval_return: Some(value),
            ..Default::default()
        }
    }

    fn record(seed: u64, points: &[(u64, f64)]) -> RunRecord {
        RunRecord {
            seed,
            rows: points
                .iter()
                .enumerate()
                .map(|(i, &(s, v))| eval_row(i as u64, s, v))
                .collect(),
        }
    }

    #[test]
    fn identical_seeds_have_zero_width() {
        let a = record(1, &[(10, 1.0), (20, 3.0), (30, 2.0)]);
        let b = RunRecord { seed: 2, ..a.clone() };
        let c = aggregate(&[a, b], Field::TargetEvalReturn, 1).unwrap();
        assert_eq!(c.mean, vec![1.0, 3.0, 2.0]);
        assert_eq!(c.ci_low.as_ref().unwrap(), &c.mean);
        assert_eq!(c.ci_high.as_ref().unwrap(), &c.mean);
    }

    #[test]
    fn two_seed_interval_uses_cauchy_quantile() {
        // With one degree of freedom the t distribution is Cauchy, whose
        // quantile is tan(pi (p - 1/2)); sd / sqrt(2) = 1 for {0, 2}.
        let expected = (std::f64::consts::PI * 0.34).tan();
        let a = record(1, &[(5, 0.0)]);
        let b = record(2, &[(5, 2.0)]);
        let c = aggregate(&[a, b], Field::TargetEvalReturn, 5).unwrap();
        assert_eq!(c.mean, vec![1.0]);
        let half = c.ci_high.unwrap()[0] - 1.0;
        assert!((half - expected).abs() < 1e-9, "{half} vs {expected}");
        assert!((1.0 - c.ci_low.unwrap()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn nearest_step_alignment() {
        let a = record(1, &[(100, 1.0), (200, 2.0)]);
        let b = record(2, &[(90, 10.0), (160, 20.0), (260, 30.0)]);
        let c = aggregate(&[a, b], Field::TargetEvalReturn, 1).unwrap();
        assert_eq!(c.x, vec![100, 200]);
        assert_eq!(c.per_seed[1], vec![10.0, 20.0]);
    }

    #[test]
    fn single_seed_has_no_interval() {
        let c = aggregate(&[record(3, &[(1, 4.0)])], Field::TargetEvalReturn, 5).unwrap();
        assert!(c.ci_low.is_none() && c.ci_high.is_none());
        assert_eq!(c.mean, vec![4.0]);
    }

    #[test]
    fn smoothing() {
        let s = [1.0, 2.0, 6.0, 2.0, 1.0];
        assert_eq!(smooth(&s, 1), s.to_vec());
        assert_eq!(smooth(&s, 3), vec![1.0, 3.0, 10.0 / 3.0, 3.0, 1.0]);
        assert_eq!(smooth(&s, 5), vec![1.0, 3.0, 12.0 / 5.0, 3.0, 1.0]);
        assert!(smooth(&[], 5).is_empty());
    }

    #[test]
    fn final_performance_monotone_and_constant() {
        let rising = record(1, &[(1, 1.0), (2, 2.0), (3, 5.0)]);
        let fp = final_performance(&[rising], Field::TargetEvalReturn, 100).unwrap();
        assert_eq!(fp.per_seed, vec![5.0]);
        assert!(fp.truncated);
        let c1 = record(1, &[(1, 7.0), (2, 7.0)]);
        let c2 = record(2, &[(1, 7.0), (2, 7.0)]);
        let fp = final_performance(&[c1, c2], Field::TargetEvalReturn, 2).unwrap();
        assert_eq!((fp.mean, fp.half_width), (7.0, Some(0.0)));
        assert!(!fp.truncated);
    }

    #[test]
    fn final_performance_hand_fixture() {
        // Last 3 of [4, 9, 1, 3, 2] -> max 3; last 3 of [0, 1, 8, 2, 6] -> 8.
        let a = record(1, &[(1, 4.0), (2, 9.0), (3, 1.0), (4, 3.0), (5, 2.0)]);
        let b = record(2, &[(1, 0.0), (2, 1.0), (3, 8.0), (4, 2.0), (5, 6.0)]);
        let fp = final_performance(&[a, b], Field::TargetEvalReturn, 3).unwrap();
        assert_eq!(fp.per_seed, vec![3.0, 8.0]);
        assert_eq!(fp.mean, 5.5);
        // sd = 5 / sqrt(2), half = t * 2.5.
        let expected = (std::f64::consts::PI * 0.34).tan() * 2.5;
        assert!((fp.half_width.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn final_performance_without_evaluations_fails() {
        let empty = RunRecord::new(1);
        assert!(final_performance(&[empty], Field::TargetEvalReturn, 100).is_err());
    }

    fn fitness_record(lists: &[(u64, Vec<f64>)]) -> RunRecord {
        RunRecord {
            seed: 0,
            rows: lists
                .iter()
                .enumerate()
                .map(|(i, (s, f))| IterationRow {
                    iteration: i as u64,
                    training_steps: *s,
                    fitness_list: Some(f.clone()),
                    ..Default::default()
                })
                .collect(),
        }
    }

    #[test]
    fn equal_fitness_fills_one_bin() {
        let r = fitness_record(&[(10, vec![3.0; 10])]);
        let h = fitness_snapshot(&r, 0, DEFAULT_HISTOGRAM_BINS).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 10);
    }

    #[test]
    fn bimodal_fixture_has_two_modes() {
        let mut f = vec![-10.0, -10.1, -9.9, -10.05, -9.95];
        f.extend([10.0, 10.1, 9.9, 10.05, 9.95]);
        let r = fitness_record(&[(0, vec![0.0]), (500, f)]);
        let h = fitness_snapshot(&r, 480, 20).unwrap();
        assert_eq!(h.training_steps, 500);
        assert_eq!(h.modes().len(), 2);
        assert!(h.modes()[0] < 3 && h.modes()[1] > 16);
    }

    #[test]
    fn snapshot_without_fitness_fails() {
        let r = record(1, &[(1, 1.0)]);
        assert!(fitness_snapshot(&r, 1, 20).is_err());
    }

    #[test]
    fn snapshot_steps_scale_with_clock() {
        assert_eq!(snapshot_steps(3_000_000), [1_000_000, 2_000_000, 3_000_000]);
        assert_eq!(snapshot_steps(50_000), [16_666, 33_333, 50_000]);
    }

    #[test]
    fn empty_run_exports_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = export(dir.path(), 5).unwrap();
        assert!(manifest.seeds.is_empty());
        let agg = fs::read_to_string(dir.path().join("aggregate_target_eval_return.csv")).unwrap();
        assert_eq!(agg, "training_steps,mean,ci_low,ci_high\n");

        let sd = seed_dir(dir.path(), 4);
        fs::create_dir(&sd).unwrap();
        fs::write(sd.join(RECORD_FILE), "").unwrap();
        export(dir.path(), 5).unwrap();
        let it = fs::read_to_string(sd.join("iterations.csv")).unwrap();
        assert_eq!(it, ITERATION_COLUMNS.join(",") + "\n");
    }

    fn write_record(dir: &Path, rec: &RunRecord) {
        let sd = seed_dir(dir, rec.seed);
        fs::create_dir_all(&sd).unwrap();
        let mut w = RecordWriter::create(&sd.join(RECORD_FILE)).unwrap();
        for row in &rec.rows {
            w.append(row).unwrap();
        }
    }

    #[test]
    fn export_is_idempotent_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = record(1, &[(10, 0.1), (20, 0.7), (35, -1.0 / 3.0)]);
        let b = record(2, &[(12, 0.3), (19, 0.2), (33, 1e-17)]);
        write_record(dir.path(), &a);
        write_record(dir.path(), &b);
        fs::write(dir.path().join(CONFIG_FILE), "algorithm = \"no_pop\"\n").unwrap();
        let m1 = export(dir.path(), 3).unwrap();
        let snapshot: Vec<Vec<u8>> = m1.files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        let m2 = export(dir.path(), 3).unwrap();
        assert_eq!(m1, m2);
        for (f, bytes) in m1.files.iter().zip(&snapshot) {
            assert_eq!(&fs::read(dir.path().join(f)).unwrap(), bytes, "{f}");
        }
        assert_eq!(m1.config_sha256.as_ref().unwrap().len(), 64);

        let loaded = load_records(dir.path()).unwrap();
        assert_eq!(loaded, vec![a.clone(), b.clone()]);
        let curve = aggregate(&loaded, Field::TargetEvalReturn, 3).unwrap();
        let back = read_aggregate_csv(&dir.path().join("aggregate_target_eval_return.csv"), Field::TargetEvalReturn, 3).unwrap();
        assert_eq!(back, curve);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let missing = Path::new("/nonexistent/erl-export");
        assert!(matches!(export(missing, 5), Err(MetricsError::Io { .. })));
    }
}
