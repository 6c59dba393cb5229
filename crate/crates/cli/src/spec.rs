use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use ppdem_core::data_io::{
    load_csv, make_synthetic, CsvSchema, SyntheticSource, WideTable, WIND_LIKE,
};
use ppdem_core::em::EmConfig;
use ppdem_core::gmm::GmmParams;
use ppdem_core::protocol::{ExactOracle, FullProtocol, ProtocolConfig};
use ppdem_core::simnet::FailurePlan;
use ppdem_core::topology::{edge, Topology};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        capacities: Option<Vec<f64>>,
    },
    Preset {
        name: String,
        farms: usize,
        hours: usize,
        seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Preset {
            name: WIND_LIKE.into(),
            farms: 9,
            hours: 480,
            seed: 1,
        }
    }
}

/// A link cut written with 1-based node numbers, `"1-3@0"` cuts link (1,3) from tick 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cut {
    pub a: usize,
    pub b: usize,
    pub tick: u64,
}

impl FromStr for Cut {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (pair, tick) = match s.split_once('@') {
            Some((p, t)) => (
                p,
                t.trim()
                    .parse::<u64>()
                    .map_err(|e| format!("cut `{s}`: bad tick: {e}"))?,
            ),
            None => (s, 0),
        };
        let (a, b) = pair
            .split_once(['-', ','])
            .ok_or_else(|| format!("cut `{s}` must look like `1-3` or `1-3@5`"))?;
        let parse = |v: &str| -> Result<usize, String> {
            match v.trim().trim_matches(['(', ')']).parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("cut `{s}`: node numbers start at 1")),
                Ok(n) => Ok(n),
            }
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a == b {
            return Err(format!("cut `{s}` joins a node to itself"));
        }
        Ok(Cut {
            a: a.min(b),
            b: a.max(b),
            tick,
        })
    }
}

impl fmt::Display for Cut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}@{}", self.a, self.b, self.tick)
    }
}

impl Serialize for Cut {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cut {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub fn failure_plan(cuts: &[Cut]) -> FailurePlan {
    FailurePlan {
        cuts: cuts
            .iter()
            .map(|c| (edge(c.a - 1, c.b - 1), c.tick))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub data: DataSource,
    /// Edge-list or coordinate JSON with 0-based nodes; defaults to the 9-farm layout
    /// for nine farms and a ring otherwise.
    pub topology: Option<PathBuf>,
    pub em: EmConfig,
    pub mode: String,
    pub protocol: ProtocolConfig,
    pub cuts: Vec<Cut>,
    pub output: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            topology: None,
            em: EmConfig {
                seed: 1,
                ..EmConfig::default()
            },
            mode: ExactOracle::NAME.into(),
            protocol: ProtocolConfig {
                seed: 7,
                ..ProtocolConfig::default()
            },
            cuts: Vec::new(),
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.mode != ExactOracle::NAME && self.mode != FullProtocol::NAME {
            return Err(CliError::Usage(format!(
                "mode must be `{}` or `{}`, got `{}`",
                ExactOracle::NAME,
                FullProtocol::NAME,
                self.mode
            )));
        }
        if let Some(t) = &self.topology {
            if !t.exists() {
                return Err(CliError::Usage(format!(
                    "topology file {} does not exist",
                    t.display()
                )));
            }
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "data file {} does not exist",
                    path.display()
                )));
            }
        }
        self.em.validate()?;
        Ok(())
    }

    /// The dataset and, for synthetic data, the generating mixture.
    pub fn load_data(&self) -> CliResult<(WideTable, Option<GmmParams>)> {
        match &self.data {
            DataSource::Csv { path, capacities } => {
                let schema = CsvSchema {
                    capacities: capacities.clone(),
                };
                let (table, report) = load_csv(path, &schema)?;
                for w in &report.warnings {
                    eprintln!("warning: {w}");
                }
                Ok((table, None))
            }
            DataSource::Preset {
                name,
                farms,
                hours,
                seed,
            } => {
                let (table, truth) = make_synthetic(
                    *farms,
                    *hours,
                    &SyntheticSource::Preset(name.clone()),
                    *seed,
                )?;
                Ok((table, Some(truth)))
            }
        }
    }

    pub fn topology(&self, farms: usize) -> CliResult<Topology> {
        let topology = match &self.topology {
            Some(path) => Topology::load(path)?,
            None if farms == 9 => Topology::case_study(),
            None => Topology::ring(farms)?,
        };
        if topology.nodes() != farms {
            return Err(CliError::Core(ppdem_core::Error::Dimension(format!(
                "topology has {} nodes for {farms} farms",
                topology.nodes()
            ))));
        }
        Ok(topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuts_parse_one_based_and_round_trip() {
        let c: Cut = "3-1@4".parse().unwrap();
        assert_eq!(
            c,
            Cut {
                a: 1,
                b: 3,
                tick: 4
            }
        );
        assert_eq!(c.to_string().parse::<Cut>().unwrap(), c);
        assert_eq!(
            "(1,3)".parse::<Cut>().unwrap(),
            Cut {
                a: 1,
                b: 3,
                tick: 0
            }
        );
        assert!("0-2".parse::<Cut>().is_err());
        assert!("2-2".parse::<Cut>().is_err());
        assert!("12".parse::<Cut>().is_err());
        assert_eq!(failure_plan(&[c]).cuts, vec![((0, 2), 4)]);
    }

    #[test]
    fn spec_defaults_fill_missing_fields() {
        let spec: ExperimentSpec =
            serde_json::from_str(r#"{"mode": "full-protocol", "cuts": ["1-3"]}"#).unwrap();
        assert_eq!(spec.mode, "full-protocol");
        assert_eq!(spec.data, DataSource::default());
        assert_eq!(spec.cuts.len(), 1);
        let back: ExperimentSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn unknown_mode_is_a_usage_error() {
        let spec = ExperimentSpec {
            mode: "carrier-pigeon".into(),
            ..ExperimentSpec::default()
        };
        assert!(matches!(spec.validate(), Err(CliError::Usage(_))));
    }
}
