use std::fs::File;
use std::io::BufWriter;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use ppdem_core::data_io::{partition_vertical, VerticalSlice, WideTable};
use ppdem_core::em::{fit, select_components, BicEntry, FitResult, InitRegistry};
use ppdem_core::gmm::{log_likelihood, GmmParams};
use ppdem_core::metrics::{
    compare_marginals, evaluation_grid, gmm_kld, marginal_curves, MetricBundle,
    DEFAULT_GRID_POINTS, DEFAULT_KLD_SAMPLES,
};
use ppdem_core::ppd_em::{ppd_em_fit, PpdTrace};
use ppdem_core::ppd_inner::{mean_relative_error, GramRequest, OwnedVector};
use ppdem_core::protocol::{
    FullProtocol, Transport, TransportContext, TransportRegistry, TransportReport,
};
use ppdem_core::rng::derive_indexed;
use ppdem_core::simnet::FailurePlan;
use ppdem_core::topology::Topology;

use crate::error::{CliError, CliResult};
use crate::output::{prepare_dir, write_json, Table, TidyCsv};
use crate::spec::{failure_plan, ExperimentSpec};
use crate::SpecArgs;

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Choose J by BIC over a range such as `1..6`.
    #[arg(long, value_parser = parse_range)]
    select_j: Option<RangeInclusive<usize>>,
    /// Write the message transcript as NDJSON (full protocol only).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Monte Carlo samples per KL divergence estimate.
    #[arg(long, default_value_t = DEFAULT_KLD_SAMPLES)]
    kld_samples: usize,
    /// Points per plotted curve.
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    points: usize,
}

pub fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..=")
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| format!("`{s}` is not a range like 1..6"))?;
    let lo: usize = a.trim().parse().map_err(|e| format!("range start: {e}"))?;
    let hi: usize = b.trim().parse().map_err(|e| format!("range end: {e}"))?;
    if lo == 0 || lo > hi {
        return Err(format!("range `{s}` must satisfy 1 <= start <= end"));
    }
    Ok(lo..=hi)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistributedSummary {
    pub mode: String,
    /// Fitted parameters of each node, in node order.
    pub params: Vec<GmmParams>,
    pub converged: bool,
    pub iterations: usize,
    pub nodes_agree: bool,
    pub trace: PpdTrace,
    pub report: TransportReport,
}

/// Everything `fit` produces, reloadable by `conditional`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitBundle {
    pub spec: ExperimentSpec,
    pub farms: usize,
    pub rows: usize,
    pub bic: Option<Vec<BicEntry>>,
    pub central: FitResult,
    pub distributed: DistributedSummary,
    pub metrics: MetricBundle,
}

impl FitBundle {
    pub fn load(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct Prepared {
    pub table: WideTable,
    pub truth: Option<GmmParams>,
    pub topology: Topology,
    pub slices: Vec<VerticalSlice>,
}

pub fn prepare(spec: &ExperimentSpec) -> CliResult<Prepared> {
    let (table, truth) = spec.load_data()?;
    if table.rows() <= spec.em.components {
        return Err(ppdem_core::Error::InvalidInput(format!(
            "{} rows cannot support {} components",
            table.rows(),
            spec.em.components
        ))
        .into());
    }
    let topology = spec.topology(table.farms())?;
    let slices = partition_vertical(&table);
    Ok(Prepared {
        table,
        truth,
        topology,
        slices,
    })
}

pub fn build_transport(
    spec: &ExperimentSpec,
    topology: &Topology,
    failures: &FailurePlan,
    audit: Option<&[Vec<Vec<f64>>]>,
) -> CliResult<Box<dyn Transport>> {
    let ctx = TransportContext {
        topology,
        failures,
        config: &spec.protocol,
        audit_columns: audit,
    };
    Ok(TransportRegistry::default().build(&spec.mode, &ctx)?)
}

pub fn run(args: &FitArgs) -> CliResult<()> {
    let mut spec = args.spec.resolve()?;
    if args.transcript.is_some() {
        if spec.mode != FullProtocol::NAME {
            return Err(CliError::Usage(
                "--transcript needs --mode full-protocol".into(),
            ));
        }
        spec.protocol.record_transcript = true;
    }
    let dir = prepare_dir(&spec.output)?;
    let prepared = prepare(&spec)?;
    let data = &prepared.table.data;
    let mut metrics = MetricBundle::default();

    let bic = match &args.select_j {
        Some(range) => {
            let candidates: Vec<usize> = range.clone().collect();
            let (entries, best) = select_components(data, &candidates, &spec.em)?;
            write_bic(&dir.join("bic.csv"), &entries, best)?;
            spec.em.components = entries[best].components;
            eprintln!("BIC selected J = {}", spec.em.components);
            Some(entries)
        }
        None => None,
    };
    metrics.push("components", spec.em.components as f64, None);

    let central = fit(data, &spec.em)?;

    let failures = failure_plan(&spec.cuts);
    for w in failures.validate(&prepared.topology) {
        eprintln!("warning: {w}");
    }
    let columns: Vec<Vec<Vec<f64>>> = prepared.slices.iter().map(VerticalSlice::columns).collect();
    let mut transport = build_transport(&spec, &prepared.topology, &failures, Some(&columns))?;
    let dist = ppd_em_fit(
        transport.as_mut(),
        &prepared.slices,
        &spec.em,
        &InitRegistry::default(),
    )?;
    if let Some(path) = &args.transcript {
        transport.export_transcript(&mut BufWriter::new(File::create(path)?))?;
    }

    let central_ll = *central
        .trace
        .log_likelihood
        .last()
        .expect("at least one e-step");
    let dist_ll = *dist
        .trace
        .em
        .log_likelihood
        .last()
        .expect("at least one e-step");
    metrics.push("central/log_likelihood", central_ll, None);
    metrics.push("central/iterations", central.iterations() as f64, None);
    metrics.push(
        "central/converged",
        f64::from(u8::from(central.converged)),
        None,
    );
    metrics.push("distributed/log_likelihood", dist_ll, None);
    metrics.push("distributed/iterations", dist.iterations() as f64, None);
    metrics.push(
        "distributed/converged",
        f64::from(u8::from(dist.converged)),
        None,
    );
    metrics.push(
        "distributed/nodes_agree",
        f64::from(u8::from(dist.nodes_agree())),
        None,
    );
    if let Some(truth) = &prepared.truth {
        metrics.push("truth/log_likelihood", log_likelihood(truth, data)?, None);
    }

    let mut worst_cdf: f64 = 0.0;
    let mut worst_pdf: f64 = 0.0;
    for (m, p) in dist.params.iter().enumerate() {
        let cmp = compare_marginals(p, &central.params, data, args.points)?;
        metrics.push(
            format!("node{}/marginal_cdf_rse_max", m + 1),
            cmp.max_cdf(),
            None,
        );
        metrics.push(
            format!("node{}/marginal_pdf_rse_max", m + 1),
            cmp.max_pdf(),
            None,
        );
        worst_cdf = worst_cdf.max(cmp.max_cdf());
        worst_pdf = worst_pdf.max(cmp.max_pdf());
    }
    metrics.push("marginal_cdf_rse_max", worst_cdf, None);
    metrics.push("marginal_pdf_rse_max", worst_pdf, None);

    let worst_kld = write_kld(
        &dir.join("kld.csv"),
        &dist.params,
        &central.params,
        args.kld_samples,
        spec.em.seed,
    )?;
    metrics.push("kld_max_between_nodes", worst_kld, None);

    let report = transport.report();
    metrics.push("messages", report.accounting.total.messages as f64, None);
    metrics.push("bytes", report.accounting.total.bytes as f64, None);
    if let Some(privacy) = &report.privacy {
        metrics.push("privacy/clean", f64::from(u8::from(privacy.clean)), None);
        metrics.push("privacy/violations", privacy.violations.len() as f64, None);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    if spec.mode == FullProtocol::NAME {
        let mre = power_inner_product_error(&spec, &prepared)?;
        metrics.push("inner_product_mean_relative_error", mre, None);
    }

    write_curves(
        &dir.join("curves.csv"),
        &prepared.table,
        &central.params,
        &dist.params,
        args.points,
    )?;
    write_trace(&dir.join("trace.csv"), &central, &dist.trace)?;
    metrics.write_csv(File::create(dir.join("metrics.csv"))?)?;

    let converged = dist.converged;
    let iterations = dist.iterations();
    let bundle = FitBundle {
        farms: prepared.table.farms(),
        rows: prepared.table.rows(),
        bic,
        central,
        distributed: DistributedSummary {
            mode: spec.mode.clone(),
            converged,
            iterations,
            nodes_agree: dist.nodes_agree(),
            params: dist.params,
            trace: dist.trace,
            report,
        },
        metrics,
        spec,
    };
    write_json(&dir.join("result.json"), &bundle)?;
    eprintln!(
        "{} fit: {iterations} iterations, converged {converged}, max marginal CDF RSE vs centralized {worst_cdf:.3e}",
        bundle.distributed.mode
    );
    if !converged {
        return Err(CliError::NotConverged(format!(
            "distributed EM stopped after {iterations} iterations without converging"
        )));
    }
    Ok(())
}

fn write_bic(path: &Path, entries: &[BicEntry], best: usize) -> CliResult<()> {
    let mut t = Table::create(
        path,
        &[
            "components",
            "log_likelihood",
            "parameters",
            "bic",
            "chosen",
        ],
    )?;
    for (i, e) in entries.iter().enumerate() {
        t.row(&[
            e.components.to_string(),
            format!("{:e}", e.log_likelihood),
            e.parameters.to_string(),
            format!("{:e}", e.bic),
            (i == best).to_string(),
        ])?;
    }
    t.finish()
}

/// Writes KL divergences between every ordered node pair and from each node to the
/// centralized fit; returns the largest node-pair value.
fn write_kld(
    path: &Path,
    nodes: &[GmmParams],
    central: &GmmParams,
    samples: usize,
    seed: u64,
) -> CliResult<f64> {
    let mut t = Table::create(path, &["from", "to", "kld", "stderr"])?;
    let mut worst: f64 = 0.0;
    let mut pair = 0u64;
    let mut estimate = |p: &GmmParams, q: &GmmParams| {
        pair += 1;
        if p == q {
            return Ok((0.0, 0.0));
        }
        gmm_kld(p, q, samples, derive_indexed(seed, "cli/kld", pair)).map(|k| (k.value, k.stderr))
    };
    for (a, p) in nodes.iter().enumerate() {
        for (b, q) in nodes.iter().enumerate() {
            if a == b {
                continue;
            }
            let (v, se) = estimate(p, q)?;
            worst = worst.max(v);
            t.row(&[
                (a + 1).to_string(),
                (b + 1).to_string(),
                format!("{v:e}"),
                format!("{se:e}"),
            ])?;
        }
        let (v, se) = estimate(p, central)?;
        t.row(&[
            (a + 1).to_string(),
            "central".into(),
            format!("{v:e}"),
            format!("{se:e}"),
        ])?;
    }
    t.finish()?;
    Ok(worst)
}

/// Mean relative error of the hashed Gram matrix of the power columns.
fn power_inner_product_error(spec: &ExperimentSpec, prepared: &Prepared) -> CliResult<f64> {
    let table = &prepared.table;
    let request = GramRequest {
        groups: 1,
        dim: table.farms(),
        rows: table.rows(),
        owned: (0..table.farms())
            .map(|m| {
                vec![OwnedVector {
                    group: 0,
                    index: m,
                    values: table.power(m),
                }]
            })
            .collect(),
    };
    let mut transport = build_transport(spec, &prepared.topology, &FailurePlan::none(), None)?;
    let grams = transport.gram("bench/inner-products", &request)?;
    Ok(mean_relative_error(&grams[0][0], &request.exact()[0]))
}

fn write_curves(
    path: &Path,
    table: &WideTable,
    central: &GmmParams,
    nodes: &[GmmParams],
    points: usize,
) -> CliResult<()> {
    let farms = table.farms();
    let mut out = TidyCsv::create(path)?;
    for (m, params) in nodes.iter().enumerate() {
        for (label, d) in [("power", m), ("forecast", farms + m)] {
            let column: Vec<f64> = table.data.column(d).iter().copied().collect();
            let grid = evaluation_grid(&[&column], points)?;
            let (cp, cc) = marginal_curves(central, d, &grid)?;
            let (dp, dc) = marginal_curves(params, d, &grid)?;
            out.curve(&cc, &format!("central/{label}/cdf"), Some(m + 1))?;
            out.curve(&dc, &format!("distributed/{label}/cdf"), Some(m + 1))?;
            out.curve(&cp, &format!("central/{label}/pdf"), Some(m + 1))?;
            out.curve(&dp, &format!("distributed/{label}/pdf"), Some(m + 1))?;
        }
    }
    out.finish()
}

fn write_trace(path: &Path, central: &FitResult, dist: &PpdTrace) -> CliResult<()> {
    let mut out = TidyCsv::create(path)?;
    for (i, ll) in central.trace.log_likelihood.iter().enumerate() {
        out.row(i as f64, *ll, "central/log_likelihood", None)?;
    }
    for (i, ll) in dist.em.log_likelihood.iter().enumerate() {
        out.row(i as f64, *ll, "distributed/log_likelihood", None)?;
    }
    for (i, v) in dist.log_likelihood_spread.iter().enumerate() {
        out.row(i as f64, *v, "distributed/log_likelihood_spread", None)?;
    }
    for (i, v) in dist.messages.iter().enumerate() {
        out.row(i as f64, *v as f64, "distributed/messages", None)?;
    }
    for (i, v) in dist.bytes.iter().enumerate() {
        out.row(i as f64, *v as f64, "distributed/bytes", None)?;
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse_inclusively() {
        assert_eq!(parse_range("1..6").unwrap(), 1..=6);
        assert_eq!(parse_range("2..=4").unwrap(), 2..=4);
        assert!(parse_range("0..3").is_err());
        assert!(parse_range("5..2").is_err());
        assert!(parse_range("six").is_err());
    }
}
