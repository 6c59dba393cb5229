use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ppdem_core::metrics::CurveGrid;

use crate::error::CliResult;

/// Plot data in long form: one `(x, value, series, node)` row per point.
pub struct TidyCsv {
    out: BufWriter<File>,
}

impl TidyCsv {
    pub fn create(path: &Path) -> CliResult<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "x,value,series,node")?;
        Ok(Self { out })
    }

    /// `node` is 1-based; `None` leaves the column empty.
    pub fn row(&mut self, x: f64, value: f64, series: &str, node: Option<usize>) -> CliResult<()> {
        match node {
            Some(n) => writeln!(self.out, "{x:e},{value:e},{series},{n}")?,
            None => writeln!(self.out, "{x:e},{value:e},{series},")?,
        }
        Ok(())
    }

    pub fn curve(&mut self, curve: &CurveGrid, series: &str, node: Option<usize>) -> CliResult<()> {
        for (x, v) in curve.x.iter().zip(&curve.values) {
            self.row(*x, *v, series, node)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Plain CSV with a fixed header; fields are written as given.
pub struct Table {
    out: BufWriter<File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> CliResult<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, fields: &[String]) -> CliResult<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn prepare_dir(dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
