use clap::Args;

use ppdem_core::em::{fit, InitRegistry};
use ppdem_core::gmm::GmmParams;
use ppdem_core::metrics::{
    compare_marginals, evaluation_grid, marginal_curves, DEFAULT_GRID_POINTS,
};
use ppdem_core::ppd_em::{ppd_em_fit, PpdEmResult};
use ppdem_core::simnet::FailurePlan;
use ppdem_core::topology::{edge, Edge, Topology};
use ppdem_core::Error as CoreError;

use crate::error::{CliError, CliResult};
use crate::fit::{build_transport, prepare, Prepared};
use crate::output::{prepare_dir, Table, TidyCsv};
use crate::spec::{Cut, ExperimentSpec};
use crate::SpecArgs;

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Links to cut one at a time: `all`, an empty string, or a list like `1-3,2-5`.
    #[arg(long, default_value = "all")]
    edges: String,
    /// Tick from which each link stays cut.
    #[arg(long, default_value_t = 0)]
    tick: u64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    points: usize,
}

/// Zero-based links named by `spec`.
pub fn parse_edges(spec: &str, topology: &Topology) -> CliResult<Vec<Edge>> {
    match spec.trim() {
        "all" => Ok(topology.edges().iter().copied().collect()),
        "" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|item| {
                let c: Cut = item.trim().parse().map_err(CliError::Usage)?;
                Ok(edge(c.a - 1, c.b - 1))
            })
            .collect(),
    }
}

struct CutOutcome {
    label: String,
    status: &'static str,
    cdf: f64,
    pdf: f64,
    run: Option<PpdEmResult>,
    detail: String,
}

fn worst_rse(
    run: &PpdEmResult,
    baseline: &PpdEmResult,
    prepared: &Prepared,
    points: usize,
) -> CliResult<(f64, f64)> {
    let mut cdf: f64 = 0.0;
    let mut pdf: f64 = 0.0;
    for (p, b) in run.params.iter().zip(&baseline.params) {
        let cmp = compare_marginals(p, b, &prepared.table.data, points)?;
        cdf = cdf.max(cmp.max_cdf());
        pdf = pdf.max(cmp.max_pdf());
    }
    Ok((cdf, pdf))
}

fn distributed(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    failures: &FailurePlan,
) -> CliResult<PpdEmResult> {
    let mut transport = build_transport(spec, &prepared.topology, failures, None)?;
    Ok(ppd_em_fit(
        transport.as_mut(),
        &prepared.slices,
        &spec.em,
        &InitRegistry::default(),
    )?)
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let spec = args.spec.resolve()?;
    if !spec.cuts.is_empty() {
        eprintln!("warning: the sweep cuts one link at a time; configured cuts are ignored");
    }
    let dir = prepare_dir(&spec.output)?;
    let prepared = prepare(&spec)?;
    let topology = &prepared.topology;
    let edges = parse_edges(&args.edges, topology)?;

    let baseline = distributed(&spec, &prepared, &FailurePlan::none())?;
    let mut outcomes = vec![CutOutcome {
        label: "none".into(),
        status: "baseline",
        cdf: 0.0,
        pdf: 0.0,
        run: None,
        detail: String::new(),
    }];
    for e in edges {
        let label = format!("{}-{}", e.0 + 1, e.1 + 1);
        let skipped = |status: &'static str, detail: String| CutOutcome {
            label: label.clone(),
            status,
            cdf: f64::NAN,
            pdf: f64::NAN,
            run: None,
            detail,
        };
        if e.0 >= topology.nodes() || e.1 >= topology.nodes() || !topology.has_edge(e.0, e.1) {
            eprintln!("warning: ({label}) is not a link of the topology; skipped");
            outcomes.push(skipped("not-a-link", String::new()));
            continue;
        }
        if !topology.is_connected_without(&[e].into_iter().collect()) {
            eprintln!("warning: cutting ({label}) disconnects the graph; skipped");
            outcomes.push(skipped("disconnected", String::new()));
            continue;
        }
        match distributed(&spec, &prepared, &FailurePlan::cut_at([e], args.tick)) {
            Ok(run) => {
                let (cdf, pdf) = worst_rse(&run, &baseline, &prepared, args.points)?;
                eprintln!("cut ({label}): max marginal CDF RSE {cdf:.3e} vs no-failure run");
                outcomes.push(CutOutcome {
                    label,
                    status: "ok",
                    cdf,
                    pdf,
                    run: Some(run),
                    detail: String::new(),
                });
            }
            Err(CliError::Core(err)) if !matches!(err.root(), CoreError::Io(_)) => {
                eprintln!("warning: cut ({label}) failed: {err}");
                outcomes.push(skipped("error", err.to_string()));
            }
            Err(other) => return Err(other),
        }
    }

    let mut report = Table::create(
        &dir.join("sweep.csv"),
        &[
            "cut",
            "status",
            "max_cdf_rse",
            "max_pdf_rse",
            "iterations",
            "converged",
            "dropped_messages",
            "detail",
        ],
    )?;
    for o in &outcomes {
        let run = if o.status == "baseline" {
            Some(&baseline)
        } else {
            o.run.as_ref()
        };
        report.row(&[
            o.label.clone(),
            o.status.into(),
            format!("{:e}", o.cdf),
            format!("{:e}", o.pdf),
            run.map_or(String::new(), |r| r.iterations().to_string()),
            run.map_or(String::new(), |r| r.converged.to_string()),
            run.map_or(String::new(), |r| r.report.accounting.dropped.to_string()),
            format!("\"{}\"", o.detail.replace('"', "'")),
        ])?;
    }
    report.finish()?;

    let central = fit(&prepared.table.data, &spec.em)?;
    write_first_node_curves(
        &dir,
        &prepared,
        &central.params,
        &baseline,
        &outcomes,
        args.points,
    )?;

    if !baseline.converged {
        return Err(CliError::NotConverged(
            "the no-failure run did not converge".into(),
        ));
    }
    Ok(())
}

/// Node 1's marginal CDFs for the benchmark, the no-failure run and each cut.
fn write_first_node_curves(
    dir: &std::path::Path,
    prepared: &Prepared,
    central: &GmmParams,
    baseline: &PpdEmResult,
    outcomes: &[CutOutcome],
    points: usize,
) -> CliResult<()> {
    let table = &prepared.table;
    let mut out = TidyCsv::create(&dir.join("sweep_curves.csv"))?;
    for (label, d) in [("power", 0), ("forecast", table.farms())] {
        let column: Vec<f64> = table.data.column(d).iter().copied().collect();
        let grid = evaluation_grid(&[&column], points)?;
        out.curve(
            &marginal_curves(central, d, &grid)?.1,
            &format!("{label}/benchmark"),
            Some(1),
        )?;
        out.curve(
            &marginal_curves(&baseline.params[0], d, &grid)?.1,
            &format!("{label}/original"),
            Some(1),
        )?;
        for o in outcomes {
            if let Some(run) = &o.run {
                let series = format!("{label}/line {}", o.label);
                out.curve(
                    &marginal_curves(&run.params[0], d, &grid)?.1,
                    &series,
                    Some(1),
                )?;
            }
        }
    }
    out.finish()
}
