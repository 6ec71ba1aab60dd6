//! Evaluation, loss-variance measurement, data-efficiency sweeps and
//! scaling-law fits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{anchor_losses, Direction, Over};
use crate::data::{EmbeddingCache, PairedDataset};
use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::trainer::{train, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: Option<String>,
    pub cache_hash: Option<String>,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_snapshot: serde_json::Value,
    pub series: Vec<SeriesPoint>,
    pub summary: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

/// JSON side of a report on disk; the series goes to a CSV file next to it.
#[derive(Serialize, Deserialize)]
struct ReportHeader {
    config_snapshot: serde_json::Value,
    summary: BTreeMap<String, f64>,
    provenance: Provenance,
}

impl ExperimentReport {
    pub fn new(config_snapshot: serde_json::Value, provenance: Provenance) -> Self {
        Self {
            config_snapshot,
            series: Vec::new(),
            summary: BTreeMap::new(),
            provenance,
        }
    }

    /// Append a point. Steps must not go backwards for a metric.
    pub fn record(&mut self, step: u64, metric: &str, value: f64) -> Result<()> {
        if let Some(last) = self.series.iter().rev().find(|p| p.metric == metric) {
            if step < last.step {
                return Err(Error::Argument(format!(
                    "metric {metric}: step {step} recorded after step {}",
                    last.step
                )));
            }
        }
        self.series.push(SeriesPoint {
            step,
            metric: metric.to_owned(),
            value,
        });
        self.summary.insert(metric.to_owned(), value);
        Ok(())
    }

    pub fn final_value(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        let header = ReportHeader {
            config_snapshot: self.config_snapshot.clone(),
            summary: self.summary.clone(),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&header)?)
    }

    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "metric", "value"])?;
        for p in &self.series {
            w.write_record([p.step.to_string(), p.metric.clone(), format_f64(p.value)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<dir>/<stem>.json` and `<dir>/<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.series_csv()?).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let header: ReportHeader = serde_json::from_str(&text)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut r = csv::Reader::from_path(&csv_path)?;
        let mut series = Vec::new();
        for row in r.deserialize() {
            let (step, metric, value): (u64, String, f64) = row?;
            series.push(SeriesPoint { step, metric, value });
        }
        Ok(Self {
            config_snapshot: header.config_snapshot,
            series,
            summary: header.summary,
            provenance: header.provenance,
        })
    }
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

/// Mean of image-to-text and text-to-image top-1 retrieval accuracy.
pub fn recall_at_1(s: &SimilarityMatrix) -> Result<f64> {
    let n = s.size();
    if n == 0 {
        return Err(Error::Argument("recall_at_1 of an empty matrix".into()));
    }
    let a = s.as_array();
    let rows = (0..n).filter(|&i| argmax_lowest(a.row(i).iter().copied()) == i).count();
    let cols = (0..n).filter(|&j| argmax_lowest(a.column(j).iter().copied()) == j).count();
    Ok((rows + cols) as f64 / (2 * n) as f64)
}

/// Clip `1 - recall` into the open unit interval for log-space fitting.
pub fn error_from_recall(recall: f64) -> f64 {
    (1.0 - recall).clamp(1e-6, 1.0 - 1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub image: MeanStd,
    pub text: MeanStd,
    pub per_image: Vec<f64>,
    pub per_text: Vec<f64>,
}

/// Per-anchor population variance of the pairwise loss over the anchor's
/// negatives, shifted by the reference when one is given.
pub fn loss_variance(target: &SimilarityMatrix, reference: Option<&SimilarityMatrix>) -> Result<VarianceSummary> {
    let n = target.size();
    if n < 3 {
        return Err(Error::Argument(format!(
            "loss_variance needs at least 2 negatives per anchor, got {}",
            n.saturating_sub(1)
        )));
    }
    let side = |dir: Direction| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                let (_, losses) = anchor_losses(target, reference, i, dir, Over::ExcludeAnchor)?;
                let m = losses.len() as f64;
                let mean = losses.iter().sum::<f64>() / m;
                Ok(losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / m)
            })
            .collect()
    };
    let per_image = side(Direction::ImageSide)?;
    let per_text = side(Direction::TextSide)?;
    Ok(VarianceSummary {
        image: MeanStd::of(&per_image),
        text: MeanStd::of(&per_text),
        per_image,
        per_text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub distill: bool,
    pub fraction: f64,
    pub n_train: usize,
    pub seeds: Vec<u64>,
    pub recall_at_1: Vec<f64>,
    pub objective: Vec<f64>,
    pub mean_recall_at_1: f64,
    pub mean_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub report: ExperimentReport,
}

impl SweepOutcome {
    pub fn row(&self, method: Method, fraction: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.fraction == fraction)
    }

    pub fn table_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "distill", "fraction", "n_train", "mean_recall_at_1", "mean_objective"])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_owned(),
                r.distill.to_string(),
                format_f64(r.fraction),
                r.n_train.to_string(),
                format_f64(r.mean_recall_at_1),
                format_f64(r.mean_objective),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Train one model per (config, fraction, seed); every config keeps its
/// iteration count, so compute per run does not depend on the fraction.
/// Runs execute in parallel and are assembled in input order.
pub fn data_efficiency_sweep(
    configs: &[TrainConfig],
    fractions: &[f64],
    seeds: &[u64],
    dataset: &PairedDataset,
    cache: Option<&EmbeddingCache>,
) -> Result<SweepOutcome> {
    if configs.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("sweep needs at least one method, fraction and seed".into()));
    }
    for c in configs {
        c.validate()?;
        for &f in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("fraction", format!("{f} is outside (0, 1]")));
            }
            let n = dataset.train_subset(f)?.len();
            if n < 2 * c.batch_size {
                return Err(Error::config(
                    "fraction",
                    format!("fraction {f} yields {n} pairs, fewer than 2 x batch_size = {}", 2 * c.batch_size),
                ));
            }
        }
    }
    let jobs: Vec<(usize, usize, u64)> = (0..configs.len())
        .flat_map(|c| (0..fractions.len()).flat_map(move |f| seeds.iter().map(move |&s| (c, f, s))))
        .collect();
    let results: Vec<Result<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(c, f, seed)| {
            let cfg = TrainConfig {
                fraction: fractions[f],
                seed,
                ..configs[c].clone()
            };
            let out = train(&cfg, dataset, cache)?;
            let recall = out.report.final_value("test_recall_at_1").unwrap_or(f64::NAN);
            let obj = out.report.final_value("objective").unwrap_or(f64::NAN);
            Ok((recall, obj))
        })
        .collect();

    let mut report = ExperimentReport::new(
        serde_json::json!({
            "configs": configs.iter().map(|c| c.resolved()).collect::<Vec<_>>(),
            "fractions": fractions,
            "seeds": seeds,
        }),
        Provenance {
            dataset_hash: Some(dataset.content_hash()),
            cache_hash: cache.map(|c| c.source_id.clone()),
            seed: seeds[0],
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    );
    let mut rows = Vec::new();
    let mut it = results.into_iter();
    for c in configs {
        for &f in fractions {
            let mut recall = Vec::new();
            let mut objective = Vec::new();
            for _ in seeds {
                let (r, o) = it.next().expect("one result per job")?;
                recall.push(r);
                objective.push(o);
            }
            let row = SweepRow {
                method: c.method,
                distill: c.distill,
                fraction: f,
                n_train: dataset.train_subset(f)?.len(),
                seeds: seeds.to_vec(),
                mean_recall_at_1: mean(&recall),
                mean_objective: mean(&objective),
                recall_at_1: recall,
                objective,
            };
            let label = format!("{}{}@{}", c.method, if c.distill { "+distill" } else { "" }, f);
            report.record(0, &format!("{label}/recall_at_1"), row.mean_recall_at_1)?;
            report.record(0, &format!("{label}/objective"), row.mean_objective)?;
            rows.push(row);
        }
    }
    Ok(SweepOutcome { rows, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub compute: f64,
    pub error: f64,
}

impl ScalingPoint {
    pub fn new(compute: f64, error: f64) -> Result<Self> {
        if !(compute > 0.0 && compute.is_finite()) {
            return Err(Error::Argument(format!("compute must be positive, got {compute}")));
        }
        if !(error > 0.0 && error.is_finite()) {
            return Err(Error::Argument(format!("error must be positive, got {error}")));
        }
        Ok(Self { compute, error })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub alpha: f64,
    pub beta: f64,
    /// RMS residual of `log E` around the fitted line.
    pub residual: f64,
}

impl ScalingFit {
    pub fn predict(&self, compute: f64) -> f64 {
        self.alpha * compute.powf(self.beta)
    }
}

/// Ordinary least squares of `log E` on `log C`, giving `E = α·C^β`.
pub fn fit_scaling_law(points: &[ScalingPoint]) -> Result<ScalingFit> {
    for p in points {
        ScalingPoint::new(p.compute, p.error)?;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.compute.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error.ln()).collect();
    let mut distinct = points.iter().map(|p| p.compute).collect::<Vec<_>>();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Argument(format!(
            "scaling fit needs at least 2 distinct compute values, got {}",
            distinct.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let beta = sxy / sxx;
    let log_alpha = my - beta * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (log_alpha + beta * x);
            r * r
        })
        .sum();
    Ok(ScalingFit {
        alpha: log_alpha.exp(),
        beta,
        residual: (sse / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGroup {
    pub compute: f64,
    pub errors: Vec<f64>,
}

/// Lowest error among the runs sharing each compute budget.
pub fn best_error_per_compute(groups: &[RunGroup]) -> Result<Vec<ScalingPoint>> {
    groups
        .iter()
        .map(|g| {
            let best = g
                .errors
                .iter()
                .copied()
                .min_by(f64::total_cmp)
                .ok_or_else(|| Error::Argument(format!("empty run group at compute {}", g.compute)))?;
            ScalingPoint::new(g.compute, best)
        })
        .collect()
}

/// Read `compute,error` rows (with a header) from a CSV file.
pub fn read_scaling_points(path: &Path) -> Result<Vec<ScalingPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let (compute, error): (f64, f64) = row?;
        out.push(ScalingPoint::new(compute, error)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub configs: Vec<TrainConfig>,
    pub embed_dims: Vec<usize>,
    /// Optimizer steps per budget; samples seen is `steps × batch_size`.
    pub steps: Vec<u64>,
    /// Dataset sizes, as fractions of the training split.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub method: Method,
    pub distill: bool,
    pub groups: Vec<RunGroup>,
    pub points: Vec<ScalingPoint>,
    pub fit: ScalingFit,
}

/// For every (model size, budget) train on each dataset size, keep the best
/// seed-averaged error, and fit one power law per method.
pub fn scaling_sweep(
    spec: &ScalingSpec,
    dataset: &PairedDataset,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<ScalingCurve>> {
    if spec.configs.is_empty()
        || spec.embed_dims.is_empty()
        || spec.steps.is_empty()
        || spec.fractions.is_empty()
        || spec.seeds.is_empty()
    {
        return Err(Error::Argument("scaling sweep needs non-empty grids".into()));
    }
    let mut jobs = Vec::new();
    for c in 0..spec.configs.len() {
        for &d in &spec.embed_dims {
            for &t in &spec.steps {
                for &f in &spec.fractions {
                    for &s in &spec.seeds {
                        jobs.push((c, d, t, f, s));
                    }
                }
            }
        }
    }
    let errors: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, d, t, f, s)| {
            let cfg = TrainConfig {
                embed_dim: d,
                iterations: t,
                fraction: f,
                seed: s,
                ..spec.configs[c].clone()
            };
            let out = train(&cfg, dataset, cache)?;
            let recall = out.report.final_value("test_recall_at_1").unwrap_or(0.0);
            Ok(error_from_recall(recall))
        })
        .collect();
    let mut it = errors.into_iter();
    let mut curves = Vec::new();
    for c in &spec.configs {
        let c = c.resolved();
        let mut groups = Vec::new();
        for &d in &spec.embed_dims {
            let params = (d * (dataset.d_x() + dataset.d_y())) as f64;
            for &t in &spec.steps {
                let run = TrainConfig { iterations: t, ..c.clone() };
                let samples = (run.total_steps() * c.batch_size as u64) as f64;
                let mut errs = Vec::new();
                for _ in &spec.fractions {
                    let mut per_seed = Vec::new();
                    for _ in &spec.seeds {
                        per_seed.push(it.next().expect("one result per job")?);
                    }
                    errs.push(mean(&per_seed));
                }
                groups.push(RunGroup {
                    compute: params * samples,
                    errors: errs,
                });
            }
        }
        let points = best_error_per_compute(&groups)?;
        let fit = fit_scaling_law(&points)?;
        curves.push(ScalingCurve {
            method: c.method,
            distill: c.distill,
            groups,
            points,
            fit,
        });
    }
    Ok(curves)
}

/// Two-column `x,y` CSV for plotting.
pub fn plot_data_csv(x_label: &str, y_label: &str, xy: &[(f64, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([x_label, y_label])?;
    for &(x, y) in xy {
        w.write_record([format_f64(x), format_f64(y)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes one `<method>_points.csv` and `<method>_fit.csv` per curve, in
/// log-log coordinates.
pub fn write_scaling_plot_data(dir: &Path, curves: &[ScalingCurve]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for curve in curves {
        let name = format!("{}{}", curve.method, if curve.distill { "_distill" } else { "" });
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.compute.log10(), p.error.log10())).collect();
        let fit: Vec<(f64, f64)> = curve
            .points
            .iter()
            .map(|p| (p.compute.log10(), curve.fit.predict(p.compute).log10()))
            .collect();
        let a = dir.join(format!("{name}_points.csv"));
        fs::write(&a, plot_data_csv("log10_compute", "log10_error", &pts)?).map_err(|e| Error::io(&a, e))?;
        let b = dir.join(format!("{name}_fit.csv"));
        fs::write(&b, plot_data_csv("log10_compute", "log10_error", &fit)?).map_err(|e| Error::io(&b, e))?;
    }
    Ok(())
}
