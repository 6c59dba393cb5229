use std::path::{Path, PathBuf};

use clap::Args;

use ppdem_core::gmm::derive_conditional;
use ppdem_core::metrics::{conditional_curves, evaluation_grid, rse, DEFAULT_GRID_POINTS};
use ppdem_core::Error as CoreError;

use crate::error::{CliError, CliResult};
use crate::fit::FitBundle;
use crate::output::{prepare_dir, Table, TidyCsv};

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("forecast").required(true).args(["at_row", "y0"])))]
pub struct ConditionalArgs {
    /// result.json written by `fit`.
    #[arg(long)]
    bundle: PathBuf,
    /// Condition on the forecasts of this data row (0-based).
    #[arg(long)]
    at_row: Option<usize>,
    /// Forecast vector, comma separated, or a file holding it.
    #[arg(long)]
    y0: Option<String>,
    /// Farms to report, 1-based and comma separated; all by default.
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    points: usize,
    /// Output directory; defaults to the bundle's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_forecasts(text: &str) -> CliResult<Vec<f64>> {
    text.split([',', ' ', '\t', '\n', '\r'])
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|_| {
                CliError::Core(CoreError::InvalidInput(format!(
                    "forecast `{s}` is not a number"
                )))
            })
        })
        .collect()
}

fn read_y0(arg: &str) -> CliResult<Vec<f64>> {
    let path = Path::new(arg);
    if path.is_file() {
        parse_forecasts(&std::fs::read_to_string(path)?)
    } else {
        parse_forecasts(arg)
    }
}

pub fn run(args: &ConditionalArgs) -> CliResult<()> {
    let bundle = FitBundle::load(&args.bundle)?;
    let (table, _) = bundle.spec.load_data()?;
    let farms = table.farms();
    let y0 = match (&args.y0, args.at_row) {
        (Some(text), _) => read_y0(text)?,
        (None, Some(row)) if row < table.rows() => table.forecast_row(row),
        (None, Some(row)) => {
            return Err(CoreError::Dimension(format!(
                "row {row} is outside the {} data rows",
                table.rows()
            ))
            .into())
        }
        (None, None) => unreachable!("clap requires one forecast source"),
    };
    if y0.len() != farms {
        return Err(CoreError::Dimension(format!(
            "forecast vector has length {} but there are {farms} farms",
            y0.len()
        ))
        .into());
    }
    let nodes: Vec<usize> = if args.nodes.is_empty() {
        (1..=farms).collect()
    } else {
        args.nodes.clone()
    };
    if let Some(&bad) = nodes.iter().find(|&&n| n == 0 || n > farms) {
        return Err(CoreError::Dimension(format!("node {bad} is outside 1..={farms}")).into());
    }

    let dir = match &args.out {
        Some(d) => prepare_dir(d)?,
        None => args
            .bundle
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let mut curves = TidyCsv::create(&dir.join("conditional.csv"))?;
    let mut table_out = Table::create(
        &dir.join("conditional_rse.csv"),
        &["node", "forecast", "cdf_rse", "pdf_rse"],
    )?;
    let central = &bundle.central.params;
    for &node in &nodes {
        let m = node - 1;
        let errors: Vec<f64> = table
            .power(m)
            .iter()
            .zip(table.forecast(m))
            .map(|(x, y)| x - y)
            .collect();
        let grid = evaluation_grid(&[&errors], args.points)?;
        let (cp, cc) = conditional_curves(&derive_conditional(central, m, &y0)?, &grid)?;
        let (dp, dc) = conditional_curves(
            &derive_conditional(&bundle.distributed.params[m], m, &y0)?,
            &grid,
        )?;
        curves.curve(&cc, "central/cdf", Some(node))?;
        curves.curve(&dc, "distributed/cdf", Some(node))?;
        curves.curve(&cp, "central/pdf", Some(node))?;
        curves.curve(&dp, "distributed/pdf", Some(node))?;
        let (cdf_rse, pdf_rse) = (rse(&dc, &cc)?, rse(&dp, &cp)?);
        table_out.row(&[
            node.to_string(),
            format!("{:e}", y0[m]),
            format!("{cdf_rse:e}"),
            format!("{pdf_rse:e}"),
        ])?;
        println!("node {node}: conditional CDF RSE {cdf_rse:.3e}, PDF RSE {pdf_rse:.3e}");
    }
    curves.finish()?;
    table_out.finish()
}
