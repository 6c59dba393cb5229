use std::path::PathBuf;

use clap::Args;

use ppdem_core::data_io::{make_synthetic, Manifest, SyntheticSource, WIND_LIKE};

use crate::error::CliResult;
use crate::output::{prepare_dir, write_json};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value = WIND_LIKE)]
    preset: String,
    #[arg(long, default_value_t = 9)]
    farms: usize,
    #[arg(long, default_value_t = 480)]
    hours: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

pub fn run(args: &GenDataArgs) -> CliResult<()> {
    let dir = prepare_dir(&args.out)?;
    let (table, truth) = make_synthetic(
        args.farms,
        args.hours,
        &SyntheticSource::Preset(args.preset.clone()),
        args.seed,
    )?;
    table.save_csv(&dir.join("data.csv"))?;
    Manifest::for_table(
        &table,
        Some(args.seed),
        Some(args.preset.clone()),
        "synthetic",
    )
    .save(&dir.join("manifest.json"))?;
    write_json(&dir.join("truth.json"), &truth)?;
    eprintln!(
        "wrote {} rows for {} farms to {}",
        table.rows(),
        table.farms(),
        dir.join("data.csv").display()
    );
    Ok(())
}
