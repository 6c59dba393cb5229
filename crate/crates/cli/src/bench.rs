use std::path::PathBuf;

use clap::Args;

use ppdem_core::data_io::{make_synthetic, SyntheticSource, WideTable, WIND_LIKE};
use ppdem_core::ppd_inner::{mean_relative_error, GramRequest, HashConfig, OwnedVector};
use ppdem_core::ppd_sum::{simulate_ppd_sum, KeyRing, SumConfig, DEFAULT_KEY_BITS};
use ppdem_core::protocol::{FullProtocol, ProtocolConfig, Transport};
use ppdem_core::simnet::{FailurePlan, Network};
use ppdem_core::topology::{
    consensus_round, metropolis_weights, ConsensusState, Topology, DEFAULT_CONSENSUS_TOLERANCE,
};
use ppdem_core::Error as CoreError;

use crate::error::CliResult;
use crate::output::{prepare_dir, TidyCsv};

#[derive(Args, Debug, Clone)]
struct BenchData {
    #[arg(long, default_value = WIND_LIKE)]
    preset: String,
    #[arg(long, default_value_t = 9)]
    farms: usize,
    #[arg(long, default_value_t = 480)]
    hours: usize,
    /// Topology JSON; defaults to the 9-farm layout for nine farms and a ring otherwise.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl BenchData {
    fn table(&self, seed: u64) -> CliResult<WideTable> {
        Ok(make_synthetic(
            self.farms,
            self.hours,
            &SyntheticSource::Preset(self.preset.clone()),
            seed,
        )?
        .0)
    }

    fn topology(&self) -> CliResult<Topology> {
        let t = match &self.topology {
            Some(path) => Topology::load(path)?,
            None if self.farms == 9 => Topology::case_study(),
            None => Topology::ring(self.farms)?,
        };
        if t.nodes() != self.farms {
            return Err(CoreError::Dimension(format!(
                "topology has {} nodes for {} farms",
                t.nodes(),
                self.farms
            ))
            .into());
        }
        Ok(t)
    }
}

#[derive(Args, Debug)]
pub struct InnerProductArgs {
    #[command(flatten)]
    data: BenchData,
    /// Number of seeds; seed s draws dataset s and hash projections s.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Smallest hash length as a power of two.
    #[arg(long, default_value_t = 7)]
    min_exponent: u32,
    /// Largest hash length as a power of two.
    #[arg(long, default_value_t = 15)]
    max_exponent: u32,
    #[arg(long, default_value_t = 7)]
    protocol_seed: u64,
}

fn power_request(table: &WideTable) -> GramRequest {
    GramRequest {
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
    }
}

/// Mean relative error of hashed inner products of the power columns for each hash length.
pub fn inner_product(args: &InnerProductArgs) -> CliResult<()> {
    if args.min_exponent > args.max_exponent || args.max_exponent > 20 || args.seeds == 0 {
        return Err(CoreError::InvalidInput(
            "need 1 or more seeds and exponents with min <= max <= 20".into(),
        )
        .into());
    }
    let dir = prepare_dir(&args.data.out)?;
    let topology = args.data.topology()?;
    let mut out = TidyCsv::create(&dir.join("inner_product.csv"))?;
    let exponents: Vec<u32> = (args.min_exponent..=args.max_exponent).collect();
    let mut totals = vec![0.0; exponents.len()];
    for seed in 1..=args.seeds {
        let request = power_request(&args.data.table(seed)?);
        let exact = request.exact();
        for (k, &e) in exponents.iter().enumerate() {
            let bits = 1usize << e;
            let config = ProtocolConfig {
                hash: HashConfig { bits, seed },
                seed: args.protocol_seed,
                ..ProtocolConfig::default()
            };
            let mut transport =
                FullProtocol::new(Network::new(topology.clone(), FailurePlan::none()), config);
            let grams = transport.gram("bench/inner-products", &request)?;
            let err = mean_relative_error(&grams[0][0], &exact[0]);
            totals[k] += err;
            out.row(bits as f64, err, &format!("seed {seed}"), None)?;
        }
    }
    for (k, &e) in exponents.iter().enumerate() {
        let mean = totals[k] / args.seeds as f64;
        out.row((1usize << e) as f64, mean, "mean", None)?;
        println!("L = 2^{e:<2}  mean relative error {mean:.3e}");
    }
    out.finish()
}

#[derive(Args, Debug)]
pub struct SumArgs {
    #[command(flatten)]
    data: BenchData,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    /// Each farm contributes its power at this row (0-based).
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
    key_bits: usize,
    #[arg(long, default_value_t = DEFAULT_CONSENSUS_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 5)]
    seed: u64,
}

/// Every node's estimate of the sum after the encrypted round and each plain round.
pub fn sum(args: &SumArgs) -> CliResult<()> {
    let table = args.data.table(args.data_seed)?;
    if args.row >= table.rows() {
        return Err(CoreError::Dimension(format!(
            "row {} is outside the {} data rows",
            args.row,
            table.rows()
        ))
        .into());
    }
    let dir = prepare_dir(&args.data.out)?;
    let topology = args.data.topology()?;
    let nodes = topology.nodes();
    let weights = metropolis_weights(&topology);
    let locals: Vec<Vec<f64>> = (0..nodes)
        .map(|m| vec![table.data[(args.row, m)]])
        .collect();
    let truth: f64 = locals.iter().map(|v| v[0]).sum();

    let mut config = SumConfig {
        key_bits: args.key_bits,
        record_transcript: true,
        ..SumConfig::default()
    };
    config.consensus.tolerance = args.tolerance;
    let keys = KeyRing::generate(nodes, args.key_bits, args.seed)?;
    let mut net = Network::new(topology.clone(), FailurePlan::none());
    let outcome = simulate_ppd_sum(
        &mut net,
        "bench/sum",
        &locals,
        &weights,
        &keys,
        &config,
        args.seed,
    )?;

    let mut first = vec![Vec::new(); nodes];
    for t in &outcome.transcripts {
        first[t.node] = vec![weights.get(t.node, t.node) * locals[t.node][0] + t.neighbor_sum[0]];
    }
    let scale = nodes as f64;
    let active = topology.edges().clone();
    let mut out = TidyCsv::create(&dir.join("sum_trace.csv"))?;
    let mut state = ConsensusState::new(first)?;
    for round in 1..=outcome.rounds + 1 {
        if round > 1 {
            state = consensus_round(&state, &weights, &active);
        }
        out.row(round as f64, truth, "truth", None)?;
        for (m, v) in state.values.iter().enumerate() {
            let estimate = v[0] * scale;
            out.row(round as f64, estimate, "estimate", Some(m + 1))?;
            out.row(
                round as f64,
                (estimate - truth).abs(),
                "abs_error",
                Some(m + 1),
            )?;
        }
    }
    out.finish()?;

    let replay_gap = state
        .values
        .iter()
        .zip(&outcome.values)
        .map(|(r, s)| (r[0] * scale - s[0]).abs())
        .fold(0.0, f64::max);
    let worst = outcome
        .values
        .iter()
        .map(|v| (v[0] - truth).abs())
        .fold(0.0, f64::max);
    println!(
        "sum {truth:.12} reached by every node within {worst:.3e} after 1 encrypted and {} plain rounds (replay gap {replay_gap:.1e})",
        outcome.rounds
    );
    Ok(())
}
