//! Curve comparison (RSE), Monte Carlo KL divergence between mixtures, empirical
//! CDFs, evaluation grids and metric export.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{normal_cdf, normal_pdf, sample, ConditionalErrorDist, GmmParams};

pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_KLD_SAMPLES: usize = 200_000;
const GRID_PAD_STDS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Pdf,
    Cdf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveGrid {
    pub kind: CurveKind,
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

impl CurveGrid {
    pub fn new(kind: CurveKind, x: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if x.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} grid points, {} values",
                x.len(),
                values.len()
            )));
        }
        if kind == CurveKind::Cdf {
            let slack = 1e-12;
            if values.iter().any(|v| !(-slack..=1.0 + slack).contains(v)) {
                return Err(Error::Metric("CDF values must lie in [0, 1]".into()));
            }
            if values.windows(2).any(|w| w[1] < w[0] - slack) {
                return Err(Error::Metric("CDF values must be nondecreasing".into()));
            }
        }
        Ok(Self { kind, x, values })
    }

    pub fn from_fn(kind: CurveKind, x: &[f64], f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(kind, x.to_vec(), x.iter().map(|&v| f(v)).collect())
    }
}

/// `Σ (f - f0)² / Σ (mean(f0) - f0)²`.
pub fn rse(f: &CurveGrid, f0: &CurveGrid) -> Result<f64> {
    if f.x != f0.x {
        return Err(Error::Metric(
            "curves are evaluated on different grids".into(),
        ));
    }
    let n = f0.values.len() as f64;
    let mean = f0.values.iter().sum::<f64>() / n;
    let den: f64 = f0.values.iter().map(|v| (mean - v).powi(2)).sum();
    if den.is_nan() || den <= 0.0 {
        return Err(Error::Metric(
            "benchmark curve is constant; RSE is undefined".into(),
        ));
    }
    let num: f64 = f
        .values
        .iter()
        .zip(&f0.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KldEstimate {
    /// Clamped at zero.
    pub value: f64,
    pub raw: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte Carlo `E_p[log p - log q]` from `samples` draws of `p`.
pub fn gmm_kld(p: &GmmParams, q: &GmmParams, samples: usize, seed: u64) -> Result<KldEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension(format!(
            "KLD between dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    if samples < 2 {
        return Err(Error::InvalidInput("KLD needs at least two samples".into()));
    }
    if p == q {
        return Ok(KldEstimate {
            value: 0.0,
            raw: 0.0,
            stderr: 0.0,
            samples,
        });
    }
    let draws = sample(p, samples, seed);
    let (ep, eq) = (p.evaluator()?, q.evaluator()?);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut row = vec![0.0; p.dim()];
    for n in 0..samples {
        row.iter_mut()
            .enumerate()
            .for_each(|(d, v)| *v = draws[(n, d)]);
        let diff = ep.logpdf(&row) - eq.logpdf(&row);
        let delta = diff - mean;
        mean += delta / (n + 1) as f64;
        m2 += delta * (diff - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(KldEstimate {
        value: mean.max(0.0),
        raw: mean,
        stderr: (var / samples as f64).sqrt(),
        samples,
    })
}

/// Fraction of `data` at or below each grid point.
pub fn empirical_cdf(data: &[f64], grid: &[f64]) -> Result<CurveGrid> {
    if data.is_empty() {
        return Err(Error::Metric("empirical CDF of empty data".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let values = grid
        .iter()
        .map(|&x| sorted.partition_point(|v| *v <= x) as f64 / n)
        .collect();
    CurveGrid::new(CurveKind::Cdf, grid.to_vec(), values)
}

/// Histogram density estimate on the grid, normalized to integrate to one.
pub fn empirical_pdf(data: &[f64], grid: &[f64]) -> Result<CurveGrid> {
    if data.is_empty() || grid.len() < 2 {
        return Err(Error::Metric(
            "empirical PDF needs data and at least two grid points".into(),
        ));
    }
    let bins = (data.len() as f64).sqrt().ceil().max(1.0) as usize;
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let width = ((hi - lo) / bins as f64).max(f64::EPSILON);
    let mut counts = vec![0usize; bins];
    for &v in data {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let scale = 1.0 / (data.len() as f64 * width);
    let values = grid
        .iter()
        .map(|&x| {
            if x < lo || x > hi {
                0.0
            } else {
                counts[(((x - lo) / width) as usize).min(bins - 1)] as f64 * scale
            }
        })
        .collect();
    CurveGrid::new(CurveKind::Pdf, grid.to_vec(), values)
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Grid over the range of all `columns`, padded by three pooled standard deviations.
pub fn evaluation_grid(columns: &[&[f64]], points: usize) -> Result<Vec<f64>> {
    let all: Vec<f64> = columns.iter().flat_map(|c| c.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Metric("evaluation grid needs data".into()));
    }
    let pooled = (columns
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| mean_std(c).1.powi(2))
        .sum::<f64>()
        / columns.iter().filter(|c| !c.is_empty()).count() as f64)
        .sqrt();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let pad = GRID_PAD_STDS * pooled.max(f64::EPSILON);
    Ok(linspace(lo - pad, hi + pad, points))
}

/// PDF and CDF of the mixture's marginal along dimension `d`.
pub fn marginal_curves(
    params: &GmmParams,
    d: usize,
    grid: &[f64],
) -> Result<(CurveGrid, CurveGrid)> {
    if d >= params.dim() {
        return Err(Error::Dimension(format!(
            "dimension {d} of a {}-dimensional mixture",
            params.dim()
        )));
    }
    let terms: Vec<(f64, f64, f64)> = (0..params.components())
        .map(|j| {
            (
                params.weights()[j],
                params.mean(j)[d],
                params.covariance(j)[(d, d)],
            )
        })
        .collect();
    let pdf = CurveGrid::from_fn(CurveKind::Pdf, grid, |x| {
        terms
            .iter()
            .map(|(w, m, v)| w * normal_pdf(x, *m, *v))
            .sum()
    })?;
    let cdf = CurveGrid::from_fn(CurveKind::Cdf, grid, |x| {
        terms
            .iter()
            .map(|(w, m, v)| w * normal_cdf(x, *m, *v))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    })?;
    Ok((pdf, cdf))
}

pub fn conditional_curves(
    dist: &ConditionalErrorDist,
    grid: &[f64],
) -> Result<(CurveGrid, CurveGrid)> {
    Ok((
        CurveGrid::from_fn(CurveKind::Pdf, grid, |z| dist.pdf(z))?,
        CurveGrid::from_fn(CurveKind::Cdf, grid, |z| dist.cdf(z).clamp(0.0, 1.0))?,
    ))
}

/// Per-dimension marginal RSEs of `fitted` against `benchmark` on data-driven grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalComparison {
    pub pdf_rse: Vec<f64>,
    pub cdf_rse: Vec<f64>,
}

impl MarginalComparison {
    pub fn max_pdf(&self) -> f64 {
        self.pdf_rse.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_cdf(&self) -> f64 {
        self.cdf_rse.iter().copied().fold(0.0, f64::max)
    }
}

pub fn compare_marginals(
    fitted: &GmmParams,
    benchmark: &GmmParams,
    data: &DMatrix<f64>,
    points: usize,
) -> Result<MarginalComparison> {
    if fitted.dim() != benchmark.dim() || data.ncols() != fitted.dim() {
        return Err(Error::Dimension(
            "mixtures and data disagree on dimension".into(),
        ));
    }
    let mut out = MarginalComparison {
        pdf_rse: Vec::new(),
        cdf_rse: Vec::new(),
    };
    for d in 0..fitted.dim() {
        let col: Vec<f64> = data.column(d).iter().copied().collect();
        let grid = evaluation_grid(&[&col], points)?;
        let (fp, fc) = marginal_curves(fitted, d, &grid)?;
        let (bp, bc) = marginal_curves(benchmark, d, &grid)?;
        out.pdf_rse.push(rse(&fp, &bp)?);
        out.cdf_rse.push(rse(&fc, &bc)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

/// Summary of relative errors `|est - exact| / |exact|` over the strict upper triangles.
pub fn inner_product_errors(
    estimates: &[DMatrix<f64>],
    exact: &[DMatrix<f64>],
) -> Result<ErrorSummary> {
    if estimates.len() != exact.len() {
        return Err(Error::Dimension(
            "estimate and exact Gram counts differ".into(),
        ));
    }
    let mut errs = Vec::new();
    for (e, x) in estimates.iter().zip(exact) {
        if e.shape() != x.shape() {
            return Err(Error::Dimension("Gram shapes differ".into()));
        }
        for a in 0..x.nrows() {
            for b in a + 1..x.ncols() {
                errs.push(((e[(a, b)] - x[(a, b)]) / x[(a, b)]).abs());
            }
        }
    }
    summarize(errs)
}

pub fn summarize(mut values: Vec<f64>) -> Result<ErrorSummary> {
    if values.is_empty() {
        return Err(Error::Metric("no values to summarize".into()));
    }
    values.sort_by(f64::total_cmp);
    let count = values.len();
    let median = if count % 2 == 1 {
        values[count / 2]
    } else {
        0.5 * (values[count / 2 - 1] + values[count / 2])
    };
    Ok(ErrorSummary {
        count,
        mean: values.iter().sum::<f64>() / count as f64,
        median,
        max: values[count - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub entries: Vec<MetricEntry>,
}

impl MetricBundle {
    pub fn push(&mut self, metric: impl Into<String>, value: f64, stderr: Option<f64>) {
        self.entries.push(MetricEntry {
            metric: metric.into(),
            value,
            stderr,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric)
            .map(|e| e.value)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value", "stderr"])?;
        for e in &self.entries {
            w.write_record([
                e.metric.clone(),
                format!("{:e}", e.value),
                e.stderr.map(|s| format!("{s:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
