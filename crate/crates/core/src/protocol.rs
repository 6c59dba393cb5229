//! Transports: how the distributed fitter obtains sums, broadcasts and Gram matrices.
//!
//! Two implementations are registered by name. `exact-oracle` computes every
//! aggregate directly (a test oracle with no privacy); `full-protocol` runs the
//! secure summation, consensus broadcasts and sign-hash inner products on the
//! network simulator.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppd_inner::{ppd_inner_products, GramRequest, HashConfig, ProjectionSet};
use crate::ppd_sum::{simulate_ppd_sum, KeyRing, SumConfig};
use crate::rng::derive_indexed;
use crate::simnet::{
    audit_privacy, Accounting, Barrier, ConsensusProgram, FailurePlan, MessageKind, Network,
    PrivacyReport, RawDataAuditor,
};
use crate::topology::{
    check_integer_payload, finish_broadcast, metropolis_weights, SpreadRule, Topology,
    WeightMatrix, INTEGER_SPREAD,
};

/// What a broadcast carries and how it is encoded on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    /// Public model statistics; each real travels exactly as two 32-bit words.
    Statistics,
    /// Vector norms; exact like `Statistics`.
    Norms,
    /// Sign-hash words, already integers.
    Hashes,
    /// Small integer tallies such as convergence votes.
    Votes,
}

impl Channel {
    pub fn kind(self) -> MessageKind {
        match self {
            Channel::Statistics | Channel::Votes => MessageKind::ConsensusValue,
            Channel::Norms => MessageKind::NormValue,
            Channel::Hashes => MessageKind::HashChunks,
        }
    }

    fn exact_reals(self) -> bool {
        matches!(self, Channel::Statistics | Channel::Norms)
    }
}

/// Splits every real into its high and low 32-bit halves.
pub fn encode_exact(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .flat_map(|v| {
            let bits = v.to_bits();
            [(bits >> 32) as f64, (bits & 0xffff_ffff) as f64]
        })
        .collect()
}

pub fn decode_exact(words: &[f64]) -> Result<Vec<f64>> {
    if !words.len().is_multiple_of(2) {
        return Err(Error::Dimension(
            "exact encoding has an odd number of words".into(),
        ));
    }
    words
        .chunks(2)
        .map(|w| {
            if w.iter()
                .any(|x| x.fract() != 0.0 || *x < 0.0 || *x > f64::from(u32::MAX))
            {
                return Err(Error::InvalidInput(format!("{w:?} are not 32-bit words")));
            }
            Ok(f64::from_bits(((w[0] as u64) << 32) | w[1] as u64))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub name: String,
    pub accounting: Accounting,
    pub privacy: Option<PrivacyReport>,
    pub warnings: Vec<String>,
    pub transcript_hash: Option<u64>,
}

pub trait Transport {
    fn name(&self) -> &'static str;
    fn nodes(&self) -> usize;
    /// Marks the start of an E-step; fresh keys are drawn per epoch.
    fn next_epoch(&mut self) -> Result<()> {
        Ok(())
    }
    /// Every node's estimate of the element-wise sum of the node vectors.
    fn sum(&mut self, phase: &str, locals: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>>;
    /// Every node's copy of the union of contributions with disjoint support.
    fn broadcast(
        &mut self,
        phase: &str,
        channel: Channel,
        contributions: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>>;
    /// Every node's Gram matrices for the request.
    fn gram(&mut self, phase: &str, request: &GramRequest) -> Result<Vec<Vec<DMatrix<f64>>>>;
    fn report(&self) -> TransportReport;
    /// Standard error of the angles behind [`Transport::gram`]; zero when exact.
    fn gram_error_bound(&self) -> f64 {
        0.0
    }
    fn export_transcript(&self, _out: &mut dyn Write) -> Result<()> {
        Ok(())
    }
}

fn check_shape(locals: &[Vec<f64>], nodes: usize) -> Result<usize> {
    if locals.len() != nodes {
        return Err(Error::Dimension(format!(
            "{} vectors for {nodes} nodes",
            locals.len()
        )));
    }
    let len = locals.first().map_or(0, Vec::len);
    if locals.iter().any(|v| v.len() != len) {
        return Err(Error::Dimension("node vectors differ in length".into()));
    }
    Ok(len)
}

fn direct_sum(locals: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for v in locals {
        total.iter_mut().zip(v).for_each(|(t, x)| *t += x);
    }
    total
}

/// Computes every aggregate directly and hands identical copies to all nodes.
pub struct ExactOracle {
    nodes: usize,
}

impl ExactOracle {
    pub const NAME: &'static str = "exact-oracle";

    pub fn new(nodes: usize) -> Self {
        Self { nodes }
    }
}

impl Transport for ExactOracle {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn nodes(&self) -> usize {
        self.nodes
    }

    fn sum(&mut self, _phase: &str, locals: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let len = check_shape(&locals, self.nodes)?;
        Ok(vec![direct_sum(&locals, len); self.nodes])
    }

    fn broadcast(
        &mut self,
        phase: &str,
        channel: Channel,
        contributions: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>> {
        if !channel.exact_reals() {
            check_integer_payload(&contributions)?;
        }
        self.sum(phase, contributions)
    }

    fn gram(&mut self, _phase: &str, request: &GramRequest) -> Result<Vec<Vec<DMatrix<f64>>>> {
        request.validate(self.nodes)?;
        Ok(vec![request.exact(); self.nodes])
    }

    fn report(&self) -> TransportReport {
        TransportReport {
            name: Self::NAME.into(),
            ..TransportReport::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub sum: SumConfig,
    pub hash: HashConfig,
    pub seed: u64,
    pub record_transcript: bool,
}

/// The secure protocol on the network simulator.
pub struct FullProtocol {
    net: Network,
    weights: WeightMatrix,
    config: ProtocolConfig,
    keys: Option<KeyRing>,
    epoch: u64,
    calls: u64,
    projections: Option<Arc<ProjectionSet>>,
}

impl FullProtocol {
    pub const NAME: &'static str = "full-protocol";

    pub fn new(net: Network, config: ProtocolConfig) -> Self {
        let weights = metropolis_weights(net.topology());
        Self {
            net,
            weights,
            config,
            keys: None,
            epoch: 0,
            calls: 0,
            projections: None,
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn keys(&mut self) -> Result<&KeyRing> {
        if self.keys.is_none() {
            let seed = derive_indexed(self.config.seed, "protocol/keys", self.epoch);
            self.keys = Some(KeyRing::generate(
                self.net.topology().nodes(),
                self.config.sum.key_bits,
                seed,
            )?);
        }
        Ok(self.keys.as_ref().expect("just generated"))
    }

    fn next_call_seed(&mut self) -> u64 {
        self.calls += 1;
        derive_indexed(self.config.seed, "protocol/call", self.calls)
    }

    fn projections(&mut self, rows: usize) -> Result<Arc<ProjectionSet>> {
        match &self.projections {
            Some(p) if p.rows() == rows && p.bits() == self.config.hash.bits => Ok(p.clone()),
            _ => {
                let p = Arc::new(ProjectionSet::new(
                    self.config.hash.seed,
                    rows,
                    self.config.hash.bits,
                )?);
                self.projections = Some(p.clone());
                Ok(p)
            }
        }
    }
}

impl Transport for FullProtocol {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn nodes(&self) -> usize {
        self.net.topology().nodes()
    }

    fn next_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        if !self.config.sum.reuse_keys {
            self.keys = None;
        }
        Ok(())
    }

    fn sum(&mut self, phase: &str, locals: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        check_shape(&locals, self.nodes())?;
        let seed = self.next_call_seed();
        self.keys()?;
        let keys = self.keys.as_ref().expect("generated above");
        let out = simulate_ppd_sum(
            &mut self.net,
            phase,
            &locals,
            &self.weights,
            keys,
            &self.config.sum,
            seed,
        )
        .map_err(|e| e.in_context(format!("summation {phase}")))?;
        Ok(out.values)
    }

    fn broadcast(
        &mut self,
        phase: &str,
        channel: Channel,
        contributions: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>> {
        let nodes = self.nodes();
        check_shape(&contributions, nodes)?;
        let payload: Vec<Vec<f64>> = if channel.exact_reals() {
            contributions.iter().map(|c| encode_exact(c)).collect()
        } else {
            check_integer_payload(&contributions)?;
            contributions
        };
        let mut programs: Vec<ConsensusProgram> = payload
            .into_iter()
            .enumerate()
            .map(|(m, init)| {
                ConsensusProgram::new(
                    init,
                    self.weights.get(m, m),
                    self.weights.neighbor_weights(m).to_vec(),
                    channel.kind(),
                )
            })
            .collect();
        let barrier = Barrier {
            tolerance: INTEGER_SPREAD,
            rule: SpreadRule::Absolute,
            max_rounds: self.config.sum.consensus.budget(self.net.topology()),
        };
        self.net
            .run(phase, &mut programs, Some(barrier))
            .map_err(|e| e.in_context(format!("broadcast {phase}")))?;
        programs
            .iter()
            .map(|p| {
                let words = finish_broadcast(p.value(), nodes, true)?;
                if channel.exact_reals() {
                    decode_exact(&words)
                } else {
                    Ok(words)
                }
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_context(format!("broadcast {phase}")))
    }

    fn gram(&mut self, phase: &str, request: &GramRequest) -> Result<Vec<Vec<DMatrix<f64>>>> {
        let gamma = self.projections(request.rows)?;
        ppd_inner_products(self, phase, request, &gamma)
    }

    fn report(&self) -> TransportReport {
        TransportReport {
            name: Self::NAME.into(),
            accounting: self.net.accounting().clone(),
            privacy: Some(audit_privacy(self.net.privacy_log())),
            warnings: self.net.warnings().to_vec(),
            transcript_hash: Some(self.net.transcript_hash()),
        }
    }

    fn gram_error_bound(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 / (self.config.hash.bits as f64).sqrt()
    }

    fn export_transcript(&self, out: &mut dyn Write) -> Result<()> {
        self.net.export_transcript(out)
    }
}

/// Everything a transport factory may need.
pub struct TransportContext<'a> {
    pub topology: &'a Topology,
    pub failures: &'a FailurePlan,
    pub config: &'a ProtocolConfig,
    /// Each node's private columns, enabling the send-time privacy auditor.
    pub audit_columns: Option<&'a [Vec<Vec<f64>>]>,
}

pub trait TransportFactory: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, ctx: &TransportContext<'_>) -> Result<Box<dyn Transport>>;
}

struct ExactOracleFactory;

impl TransportFactory for ExactOracleFactory {
    fn name(&self) -> &'static str {
        ExactOracle::NAME
    }

    fn build(&self, ctx: &TransportContext<'_>) -> Result<Box<dyn Transport>> {
        Ok(Box::new(ExactOracle::new(ctx.topology.nodes())))
    }
}

struct FullProtocolFactory;

impl TransportFactory for FullProtocolFactory {
    fn name(&self) -> &'static str {
        FullProtocol::NAME
    }

    fn build(&self, ctx: &TransportContext<'_>) -> Result<Box<dyn Transport>> {
        let mut net = Network::new(ctx.topology.clone(), ctx.failures.clone());
        if let Some(columns) = ctx.audit_columns {
            net = net.with_auditor(RawDataAuditor::new(columns)?);
        }
        if ctx.config.record_transcript {
            net = net.record_transcript();
        }
        Ok(Box::new(FullProtocol::new(net, ctx.config.clone())))
    }
}

pub struct TransportRegistry {
    factories: Vec<Box<dyn TransportFactory>>,
}

impl Default for TransportRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: Vec::new(),
        };
        r.register(Box::new(ExactOracleFactory));
        r.register(Box::new(FullProtocolFactory));
        r
    }
}

impl TransportRegistry {
    pub fn register(&mut self, factory: Box<dyn TransportFactory>) {
        self.factories.retain(|f| f.name() != factory.name());
        self.factories.push(factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.iter().map(|f| f.name()).collect()
    }

    pub fn build(&self, name: &str, ctx: &TransportContext<'_>) -> Result<Box<dyn Transport>> {
        self.factories
            .iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "transport",
                name: name.into(),
                known: self.names().join(", "),
            })?
            .build(ctx)
    }
}
