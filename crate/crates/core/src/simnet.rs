//! Deterministic tick-based message-passing simulator.
//!
//! Each call to [`Network::run`] executes one protocol instance over node programs.
//! A tick has three stages: messages sent at the previous tick are delivered (if
//! their link is still up) and handed to `on_receive`; the scheduler checks the
//! consensus barrier; then every node's `on_send` emits the messages for the next
//! tick. Messages may only travel over links active at the send tick.
//!
//! Every sent message is accounted (count and serialized bytes per phase and kind),
//! classified for the privacy log, folded into a transcript hash and, when an
//! auditor is attached, checked against the raw data of nodes other than the
//! receiver.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, PublicKey};
use crate::topology::{edge, spread, Edge, EdgeSet, SpreadRule, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    PublicKey,
    Ciphertext,
    MaskedSumRequest,
    MaskedSumReply,
    ConsensusValue,
    HashChunks,
    NormValue,
}

impl MessageKind {
    pub fn tag(self) -> &'static str {
        match self {
            MessageKind::PublicKey => "PUBLIC_KEY",
            MessageKind::Ciphertext => "CIPHERTEXT",
            MessageKind::MaskedSumRequest => "MASKED_SUM_REQUEST",
            MessageKind::MaskedSumReply => "MASKED_SUM_REPLY",
            MessageKind::ConsensusValue => "CONSENSUS_VALUE",
            MessageKind::HashChunks => "HASH_CHUNKS",
            MessageKind::NormValue => "NORM_VALUE",
        }
    }

    pub fn classification(self) -> Classification {
        match self {
            MessageKind::Ciphertext | MessageKind::MaskedSumRequest => Classification::Encrypted,
            MessageKind::MaskedSumReply => Classification::MaskedAggregate,
            MessageKind::PublicKey | MessageKind::ConsensusValue => Classification::PublicStatistic,
            MessageKind::HashChunks => Classification::Hash,
            MessageKind::NormValue => Classification::Norm,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Encrypted,
    MaskedAggregate,
    PublicStatistic,
    Hash,
    Norm,
}

#[derive(Clone, Debug)]
pub enum Payload {
    Empty,
    Reals(Arc<[f64]>),
    Ciphertexts(Arc<[Ciphertext]>),
    /// Masked plaintexts in `Z_n`.
    Integers(Arc<[BigUint]>),
    Key {
        owner: usize,
        key: Arc<PublicKey>,
    },
}

impl Payload {
    /// Serialized size: 8 bytes per real, length-prefixed big-endian integers.
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Empty => 0,
            Payload::Reals(v) => 8 * v.len(),
            Payload::Ciphertexts(v) => v.iter().map(Ciphertext::serialized_len).sum(),
            Payload::Integers(v) => v.iter().map(|x| 4 + x.to_bytes_be().len()).sum(),
            Payload::Key { key, .. } => 8 + key.to_bytes().len(),
        }
    }

    fn identity(&self) -> usize {
        match self {
            Payload::Empty => 0,
            Payload::Reals(v) => v.as_ptr() as usize,
            Payload::Ciphertexts(v) => v.as_ptr() as usize,
            Payload::Integers(v) => v.as_ptr() as usize,
            Payload::Key { key, .. } => Arc::as_ptr(key) as usize,
        }
    }

    fn digest(&self) -> u64 {
        let mut h = Digest::new();
        match self {
            Payload::Empty => {}
            Payload::Reals(v) => v.iter().for_each(|x| h.word(x.to_bits())),
            Payload::Ciphertexts(v) => v.iter().for_each(|c| {
                h.word(c.key_fingerprint());
                c.value().iter_u64_digits().for_each(|d| h.word(d));
            }),
            Payload::Integers(v) => v
                .iter()
                .for_each(|x| x.iter_u64_digits().for_each(|d| h.word(d))),
            Payload::Key { owner, key } => {
                h.word(*owner as u64);
                h.word(key.fingerprint());
            }
        }
        h.finish()
    }
}

/// Streaming 64-bit mixer used for transcript and payload digests.
#[derive(Clone, Copy, Debug)]
struct Digest(u64);

impl Digest {
    fn new() -> Self {
        Digest(0x243f_6a88_85a3_08d3)
    }

    fn word(&mut self, w: u64) {
        let mut z = self.0 ^ w.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        self.0 = z ^ (z >> 31);
    }

    fn finish(self) -> u64 {
        self.0
    }
}

/// A delivered message as seen by the receiving program.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub src: usize,
    pub kind: MessageKind,
    pub payload: Payload,
}

#[derive(Default)]
pub struct Outbox {
    sends: Vec<(usize, MessageKind, Payload)>,
}

impl Outbox {
    pub fn send(&mut self, dst: usize, kind: MessageKind, payload: Payload) {
        self.sends.push((dst, kind, payload));
    }
}

pub struct NodeContext<'a> {
    pub node: usize,
    /// Global tick.
    pub tick: u64,
    /// Ticks since this run started.
    pub local_tick: u64,
    /// Neighbors over links that are up at this tick, ascending.
    pub active_neighbors: &'a [usize],
}

/// One node's protocol state machine.
pub trait NodeProgram {
    fn on_receive(&mut self, ctx: &NodeContext<'_>, inbox: Vec<Envelope>) -> Result<()>;
    fn on_send(&mut self, ctx: &NodeContext<'_>, out: &mut Outbox) -> Result<()>;
    /// Current consensus estimate while the node is in a consensus stage.
    fn consensus_value(&self) -> Option<&[f64]> {
        None
    }
    /// Called when the scheduler's barrier finds all nodes in agreement.
    fn on_converged(&mut self) {}
    fn is_done(&self) -> bool;
}

/// Agreement test applied by the scheduler once every node exposes a consensus value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Barrier {
    pub tolerance: f64,
    pub rule: SpreadRule,
    pub max_rounds: usize,
}

/// Persistent link cuts: `(edge, tick)` removes the link from `tick` onward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailurePlan {
    pub cuts: Vec<(Edge, u64)>,
}

impl FailurePlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cut_at(edges: impl IntoIterator<Item = Edge>, tick: u64) -> Self {
        Self {
            cuts: edges.into_iter().map(|(a, b)| (edge(a, b), tick)).collect(),
        }
    }

    pub fn cut_by(&self, tick: u64) -> EdgeSet {
        self.cuts
            .iter()
            .filter(|(_, t)| *t <= tick)
            .map(|(e, _)| *e)
            .collect()
    }

    /// Warnings for cuts referencing missing links or disconnecting the graph.
    pub fn validate(&self, topology: &Topology) -> Vec<String> {
        let mut warnings = Vec::new();
        for (e, _) in &self.cuts {
            if !topology.has_edge(e.0, e.1) {
                warnings.push(format!(
                    "cut ({},{}) is not a link of the topology",
                    e.0, e.1
                ));
            }
        }
        let mut ticks: Vec<u64> = self.cuts.iter().map(|(_, t)| *t).collect();
        ticks.sort_unstable();
        ticks.dedup();
        for t in ticks {
            if !topology.is_connected_without(&self.cut_by(t)) {
                warnings.push(format!("disconnected from tick {t}"));
                break;
            }
        }
        warnings
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counter {
    pub messages: u64,
    pub bytes: u64,
}

impl Counter {
    fn add(&mut self, bytes: usize) {
        self.messages += 1;
        self.bytes += bytes as u64;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub total: Counter,
    pub per_phase: BTreeMap<String, Counter>,
    pub per_kind: BTreeMap<MessageKind, Counter>,
    /// Messages whose link was cut between sending and delivery.
    pub dropped: u64,
    pub ticks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub id: u64,
    pub tick: u64,
    pub src: usize,
    pub dst: usize,
    pub kind: MessageKind,
    pub classification: Classification,
    pub raw_data_exposed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub message_id: u64,
    pub src: usize,
    pub dst: usize,
    pub tick: u64,
    pub kind: MessageKind,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLog {
    pub records: Vec<PrivacyRecord>,
    pub violations: Vec<Violation>,
    /// Structural caveats, e.g. degree-1 nodes whose single neighbor can unmask them.
    pub caveats: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub clean: bool,
    pub total_messages: usize,
    pub per_kind: BTreeMap<MessageKind, usize>,
    pub per_classification: BTreeMap<Classification, usize>,
    pub violations: Vec<Violation>,
    pub caveats: Vec<String>,
}

/// Summarizes a privacy log; the report is clean when no message exposed raw data.
pub fn audit_privacy(log: &PrivacyLog) -> PrivacyReport {
    let mut per_kind = BTreeMap::new();
    let mut per_classification = BTreeMap::new();
    for r in &log.records {
        *per_kind.entry(r.kind).or_insert(0) += 1;
        *per_classification.entry(r.classification).or_insert(0) += 1;
    }
    let exposed = log.records.iter().any(|r| r.raw_data_exposed);
    PrivacyReport {
        clean: !exposed && log.violations.is_empty(),
        total_messages: log.records.len(),
        per_kind,
        per_classification,
        violations: log.violations.clone(),
        caveats: log.caveats.clone(),
    }
}

/// Index of every node's raw values for send-time auditing.
pub struct RawDataAuditor {
    /// Raw value bits mapped to the bitmask of owning nodes.
    owners: HashMap<u64, u64>,
    /// `(owner, column)` pairs for affine checks of row-length payloads.
    columns: Vec<(usize, Vec<f64>)>,
    rows: usize,
    cache: HashMap<usize, u64>,
}

const AFFINE_THRESHOLD: f64 = 1.0 - 1e-9;

impl RawDataAuditor {
    /// `columns[m]` holds node `m`'s private columns.
    pub fn new(columns: &[Vec<Vec<f64>>]) -> Result<Self> {
        if columns.len() > 64 {
            return Err(Error::InvalidInput(
                "the auditor supports at most 64 nodes".into(),
            ));
        }
        let mut owners = HashMap::new();
        let mut flat = Vec::new();
        let mut rows = 0;
        for (m, cols) in columns.iter().enumerate() {
            for c in cols {
                rows = c.len();
                for v in c {
                    if *v != 0.0 && *v != 1.0 {
                        *owners.entry(v.to_bits()).or_insert(0u64) |= 1 << m;
                    }
                }
                flat.push((m, c.clone()));
            }
        }
        Ok(Self {
            owners,
            columns: flat,
            rows,
            cache: HashMap::new(),
        })
    }

    fn reset_cache(&mut self) {
        self.cache.clear();
    }

    fn owner_mask(&mut self, values: &Arc<[f64]>) -> u64 {
        let key = values.as_ptr() as usize;
        if let Some(m) = self.cache.get(&key) {
            return *m;
        }
        let mut mask = 0;
        for v in values.iter() {
            if let Some(o) = self.owners.get(&v.to_bits()) {
                mask |= o;
            }
        }
        self.cache.insert(key, mask);
        mask
    }

    /// Describes how a payload sent to `dst` exposes another node's raw data, if it does.
    pub fn check(&mut self, payload: &Payload, dst: usize) -> Option<String> {
        let Payload::Reals(values) = payload else {
            return None;
        };
        let foreign = self.owner_mask(values) & !(1u64 << dst);
        if foreign != 0 {
            let nodes: Vec<usize> = (0..64).filter(|b| foreign & (1 << b) != 0).collect();
            return Some(format!("payload contains raw values of nodes {nodes:?}"));
        }
        if values.len() == self.rows && self.rows > 2 {
            for (owner, col) in &self.columns {
                if *owner != dst && abs_correlation(values, col) > AFFINE_THRESHOLD {
                    return Some(format!(
                        "payload is an affine image of a raw column of node {owner}"
                    ));
                }
            }
        }
        None
    }
}

fn abs_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).abs()
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    id: u64,
    tick: u64,
    phase: &'a str,
    src: usize,
    dst: usize,
    kind: MessageKind,
    bytes: usize,
    digest: String,
}

struct InFlight {
    src: usize,
    dst: usize,
    kind: MessageKind,
    payload: Payload,
}

/// The simulated network: topology, failure plan, clock and all logs.
pub struct Network {
    topology: Topology,
    failures: FailurePlan,
    tick: u64,
    next_id: u64,
    transcript: Digest,
    lines: Option<Vec<String>>,
    accounting: Accounting,
    privacy: PrivacyLog,
    auditor: Option<RawDataAuditor>,
    warnings: Vec<String>,
}

impl Network {
    pub fn new(topology: Topology, failures: FailurePlan) -> Self {
        let warnings = failures.validate(&topology);
        let caveats = (0..topology.nodes())
            .filter(|&m| topology.degree(m) == 1)
            .map(|m| {
                format!(
                    "node {m} has a single neighbor ({}), which learns its weighted local value in the first round",
                    topology.neighbors(m)[0]
                )
            })
            .collect();
        Self {
            topology,
            failures,
            tick: 0,
            next_id: 0,
            transcript: Digest::new(),
            lines: None,
            accounting: Accounting::default(),
            privacy: PrivacyLog {
                caveats,
                ..PrivacyLog::default()
            },
            auditor: None,
            warnings,
        }
    }

    pub fn with_auditor(mut self, auditor: RawDataAuditor) -> Self {
        self.auditor = Some(auditor);
        self
    }

    /// Keeps one NDJSON line per message for export.
    pub fn record_transcript(mut self) -> Self {
        self.lines = Some(Vec::new());
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn is_disconnected(&self) -> bool {
        self.warnings.iter().any(|w| w.starts_with("disconnected"))
    }

    pub fn accounting(&self) -> &Accounting {
        &self.accounting
    }

    pub fn privacy_log(&self) -> &PrivacyLog {
        &self.privacy
    }

    pub fn transcript_hash(&self) -> u64 {
        self.transcript.finish()
    }

    pub fn export_transcript(&self, out: &mut dyn Write) -> Result<()> {
        for line in self.lines.iter().flatten() {
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn active_edges_at(&self, tick: u64) -> EdgeSet {
        let cut = self.failures.cut_by(tick);
        self.topology.edges().difference(&cut).copied().collect()
    }

    fn active_neighbors(&self, active: &EdgeSet) -> Vec<Vec<usize>> {
        (0..self.topology.nodes())
            .map(|m| {
                self.topology
                    .neighbors(m)
                    .iter()
                    .copied()
                    .filter(|&i| active.contains(&edge(m, i)))
                    .collect()
            })
            .collect()
    }

    /// Runs one protocol instance to completion.
    pub fn run<P: NodeProgram>(
        &mut self,
        phase: &str,
        programs: &mut [P],
        barrier: Option<Barrier>,
    ) -> Result<()> {
        let m = self.topology.nodes();
        if programs.len() != m {
            return Err(Error::InvalidInput(format!(
                "{} programs for {m} nodes",
                programs.len()
            )));
        }
        let start = self.tick;
        let mut in_flight: Vec<InFlight> = Vec::new();
        let mut consensus_rounds = 0usize;
        let tick_limit = barrier.map_or(10_000, |b| b.max_rounds as u64 + 64);
        loop {
            let tick = self.tick;
            let local_tick = tick - start;
            if local_tick > tick_limit {
                return Err(Error::Simulation {
                    node: 0,
                    tick,
                    reason: format!("phase {phase} did not finish within {tick_limit} ticks"),
                });
            }
            let active = self.active_edges_at(tick);
            let neighbors = self.active_neighbors(&active);

            let mut inboxes: Vec<Vec<Envelope>> = vec![Vec::new(); m];
            for msg in in_flight.drain(..) {
                if active.contains(&edge(msg.src, msg.dst)) {
                    inboxes[msg.dst].push(Envelope {
                        src: msg.src,
                        kind: msg.kind,
                        payload: msg.payload,
                    });
                } else {
                    self.accounting.dropped += 1;
                }
            }
            for (node, inbox) in inboxes.into_iter().enumerate() {
                let ctx = NodeContext {
                    node,
                    tick,
                    local_tick,
                    active_neighbors: &neighbors[node],
                };
                programs[node]
                    .on_receive(&ctx, inbox)
                    .map_err(|e| sim_error(node, tick, e))?;
            }

            if let Some(b) = barrier {
                let values: Option<Vec<Vec<f64>>> = programs
                    .iter()
                    .map(|p| p.consensus_value().map(<[f64]>::to_vec))
                    .collect();
                if let Some(values) = values {
                    let s = spread(&values, b.rule);
                    if s < b.tolerance {
                        programs.iter_mut().for_each(NodeProgram::on_converged);
                    } else if consensus_rounds >= b.max_rounds {
                        return Err(Error::NonConvergence {
                            rounds: consensus_rounds,
                            residual: s,
                        });
                    } else {
                        consensus_rounds += 1;
                    }
                }
            }

            if let Some(a) = self.auditor.as_mut() {
                a.reset_cache();
            }
            let mut digests: HashMap<usize, u64> = HashMap::new();
            for node in 0..m {
                let ctx = NodeContext {
                    node,
                    tick,
                    local_tick,
                    active_neighbors: &neighbors[node],
                };
                let mut out = Outbox::default();
                programs[node]
                    .on_send(&ctx, &mut out)
                    .map_err(|e| sim_error(node, tick, e))?;
                for (dst, kind, payload) in out.sends {
                    if dst == node || !active.contains(&edge(node, dst)) {
                        return Err(Error::Simulation {
                            node,
                            tick,
                            reason: format!("{kind} to {dst} over a link that is not active"),
                        });
                    }
                    self.record(phase, tick, node, dst, kind, &payload, &mut digests);
                    in_flight.push(InFlight {
                        src: node,
                        dst,
                        kind,
                        payload,
                    });
                }
            }
            self.tick += 1;
            self.accounting.ticks += 1;
            if in_flight.is_empty() && programs.iter().all(NodeProgram::is_done) {
                return Ok(());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        phase: &str,
        tick: u64,
        src: usize,
        dst: usize,
        kind: MessageKind,
        payload: &Payload,
        digests: &mut HashMap<usize, u64>,
    ) {
        let id = self.next_id;
        self.next_id += 1;
        let bytes = payload.byte_len();
        self.accounting.total.add(bytes);
        self.accounting
            .per_phase
            .entry(phase.to_string())
            .or_default()
            .add(bytes);
        self.accounting.per_kind.entry(kind).or_default().add(bytes);

        let digest = *digests
            .entry(payload.identity())
            .or_insert_with(|| payload.digest());
        for w in [tick, src as u64, dst as u64, kind as u64, digest] {
            self.transcript.word(w);
        }

        let detail = self.auditor.as_mut().and_then(|a| a.check(payload, dst));
        if let Some(detail) = &detail {
            self.privacy.violations.push(Violation {
                message_id: id,
                src,
                dst,
                tick,
                kind,
                detail: detail.clone(),
            });
        }
        self.privacy.records.push(PrivacyRecord {
            id,
            tick,
            src,
            dst,
            kind,
            classification: kind.classification(),
            raw_data_exposed: detail.is_some(),
        });
        if let Some(lines) = self.lines.as_mut() {
            let line = TranscriptLine {
                id,
                tick,
                phase,
                src,
                dst,
                kind,
                bytes,
                digest: format!("{digest:016x}"),
            };
            lines.push(serde_json::to_string(&line).expect("plain struct serializes"));
        }
    }
}

fn sim_error(node: usize, tick: u64, e: Error) -> Error {
    match e {
        Error::Simulation { .. } => e,
        other => Error::Simulation {
            node,
            tick,
            reason: other.to_string(),
        },
    }
}

/// Plain synchronous consensus as a node program; also used for broadcasts.
pub struct ConsensusProgram {
    value: Vec<f64>,
    self_weight: f64,
    weights: Vec<(usize, f64)>,
    kind: MessageKind,
    started: bool,
    done: bool,
    pub rounds: usize,
}

impl ConsensusProgram {
    pub fn new(
        init: Vec<f64>,
        self_weight: f64,
        weights: Vec<(usize, f64)>,
        kind: MessageKind,
    ) -> Self {
        Self {
            value: init,
            self_weight,
            weights,
            kind,
            started: false,
            done: false,
            rounds: 0,
        }
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn into_value(self) -> Vec<f64> {
        self.value
    }
}

/// Applies a consensus update from delivered values (sorted by sender).
pub fn consensus_step(
    own: &[f64],
    self_weight: f64,
    weights: &[(usize, f64)],
    kind: MessageKind,
    inbox: &[Envelope],
) -> Result<Vec<f64>> {
    let mut received: Vec<(usize, &[f64])> = Vec::with_capacity(inbox.len());
    for env in inbox {
        match (&env.payload, env.kind == kind) {
            (Payload::Reals(v), true) if v.len() == own.len() => received.push((env.src, v)),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "unexpected {} from {} during consensus",
                    env.kind, env.src
                )))
            }
        }
    }
    received.sort_by_key(|(s, _)| *s);
    Ok(crate::topology::node_update(
        own,
        self_weight,
        weights,
        &received,
    ))
}

impl NodeProgram for ConsensusProgram {
    fn on_receive(&mut self, _ctx: &NodeContext<'_>, inbox: Vec<Envelope>) -> Result<()> {
        if self.started && !self.done {
            self.value = consensus_step(
                &self.value,
                self.self_weight,
                &self.weights,
                self.kind,
                &inbox,
            )?;
            self.rounds += 1;
        }
        Ok(())
    }

    fn on_send(&mut self, ctx: &NodeContext<'_>, out: &mut Outbox) -> Result<()> {
        if self.done {
            return Ok(());
        }
        self.started = true;
        let payload: Arc<[f64]> = Arc::from(self.value.as_slice());
        for &i in ctx.active_neighbors {
            out.send(i, self.kind, Payload::Reals(payload.clone()));
        }
        Ok(())
    }

    fn consensus_value(&self) -> Option<&[f64]> {
        (!self.done).then_some(self.value.as_slice())
    }

    fn on_converged(&mut self) {
        self.done = true;
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{consensus_round, metropolis_weights, ConsensusState};

    struct Silent;

    impl NodeProgram for Silent {
        fn on_receive(&mut self, _: &NodeContext<'_>, _: Vec<Envelope>) -> Result<()> {
            Ok(())
        }
        fn on_send(&mut self, _: &NodeContext<'_>, _: &mut Outbox) -> Result<()> {
            Ok(())
        }
        fn is_done(&self) -> bool {
            true
        }
    }

    /// Every node sends its raw column to node 0 once: the negative control.
    struct Gather {
        column: Vec<f64>,
        sent: bool,
    }

    impl NodeProgram for Gather {
        fn on_receive(&mut self, _: &NodeContext<'_>, _: Vec<Envelope>) -> Result<()> {
            Ok(())
        }
        fn on_send(&mut self, ctx: &NodeContext<'_>, out: &mut Outbox) -> Result<()> {
            if !self.sent && ctx.node != 0 && ctx.active_neighbors.contains(&0) {
                out.send(
                    0,
                    MessageKind::ConsensusValue,
                    Payload::Reals(Arc::from(self.column.as_slice())),
                );
            }
            self.sent = true;
            Ok(())
        }
        fn is_done(&self) -> bool {
            self.sent
        }
    }

    fn consensus_programs(t: &Topology, init: &[Vec<f64>]) -> Vec<ConsensusProgram> {
        let w = metropolis_weights(t);
        (0..t.nodes())
            .map(|m| {
                ConsensusProgram::new(
                    init[m].clone(),
                    w.get(m, m),
                    w.neighbor_weights(m).to_vec(),
                    MessageKind::ConsensusValue,
                )
            })
            .collect()
    }

    fn barrier() -> Barrier {
        Barrier {
            tolerance: 1e-10,
            rule: SpreadRule::Relative,
            max_rounds: 500,
        }
    }

    #[test]
    fn silent_program_stops_at_tick_zero() {
        let mut net = Network::new(Topology::path(3).unwrap(), FailurePlan::none());
        net.run("idle", &mut [Silent, Silent, Silent], None)
            .unwrap();
        assert_eq!(net.accounting().total.messages, 0);
        assert_eq!(net.tick(), 1);
        assert!(audit_privacy(net.privacy_log()).clean);
    }

    #[test]
    fn empty_log_is_clean() {
        let r = audit_privacy(&PrivacyLog::default());
        assert!(r.clean);
        assert_eq!(r.total_messages, 0);
    }

    #[test]
    fn simulated_consensus_matches_direct_rounds() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let init: Vec<Vec<f64>> = (0..9)
            .map(|m| vec![m as f64 * 0.37, 1.0 - m as f64])
            .collect();
        let mut progs = consensus_programs(&t, &init);
        let mut net = Network::new(t.clone(), FailurePlan::none());
        net.run("avg", &mut progs, Some(barrier())).unwrap();
        let rounds = progs[0].rounds;
        let mut s = ConsensusState::new(init).unwrap();
        for _ in 0..rounds {
            s = consensus_round(&s, &w, t.edges());
        }
        for (p, v) in progs.iter().zip(&s.values) {
            assert_eq!(p.value(), v.as_slice());
        }
        assert_eq!(net.accounting().total.messages, 60 * rounds as u64);
    }

    #[test]
    fn transcript_hash_is_deterministic() {
        let t = Topology::case_study();
        let init: Vec<Vec<f64>> = (0..9).map(|m| vec![m as f64]).collect();
        let run = || {
            let mut progs = consensus_programs(&t, &init);
            let mut net = Network::new(t.clone(), FailurePlan::none()).record_transcript();
            net.run("avg", &mut progs, Some(barrier())).unwrap();
            let mut buf = Vec::new();
            net.export_transcript(&mut buf).unwrap();
            (net.transcript_hash(), buf)
        };
        let (h1, b1) = run();
        let (h2, b2) = run();
        assert_eq!(h1, h2);
        assert_eq!(b1, b2);
        let first = String::from_utf8(b1).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(line["kind"], "CONSENSUS_VALUE");
    }

    #[test]
    fn cut_links_never_deliver_and_mass_is_conserved() {
        let t = Topology::case_study();
        let init: Vec<Vec<f64>> = (0..9).map(|m| vec![(m * m) as f64]).collect();
        let total: f64 = init.iter().map(|v| v[0]).sum();
        let cut = *t.edges().iter().next().unwrap();
        let mut progs = consensus_programs(&t, &init);
        let mut net = Network::new(t.clone(), FailurePlan::cut_at([cut], 3));
        net.run("avg", &mut progs, Some(barrier())).unwrap();
        for p in &progs {
            assert!((p.value()[0] * 9.0 - total).abs() < 1e-8);
        }
        assert_eq!(net.accounting().dropped, 2);
        let after: Vec<_> = net
            .privacy_log()
            .records
            .iter()
            .filter(|r| r.tick >= 3 && edge(r.src, r.dst) == cut)
            .collect();
        assert!(after.is_empty());
    }

    #[test]
    fn disconnecting_plan_is_tagged() {
        let t = Topology::path(3).unwrap();
        let net = Network::new(t, FailurePlan::cut_at([(0, 1)], 0));
        assert!(net.is_disconnected());
    }

    #[test]
    fn gather_fixture_is_flagged() {
        let t = Topology::complete(4).unwrap();
        let columns: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|m| {
                vec![(0..10)
                    .map(|n| 0.05 + 0.01 * (n as f64) + 0.1 * m as f64)
                    .collect()]
            })
            .collect();
        let mut progs: Vec<Gather> = columns
            .iter()
            .map(|c| Gather {
                column: c[0].clone(),
                sent: false,
            })
            .collect();
        let mut net = Network::new(t, FailurePlan::none())
            .with_auditor(RawDataAuditor::new(&columns).unwrap());
        net.run("gather", &mut progs, None).unwrap();
        let report = audit_privacy(net.privacy_log());
        assert!(!report.clean);
        assert_eq!(report.violations.len(), 3);
    }

    #[test]
    fn affine_images_are_flagged() {
        let col: Vec<f64> = (0..10).map(|n| 0.013 * n as f64 + 0.2).collect();
        let mut a = RawDataAuditor::new(&[vec![col.clone()], vec![vec![0.5; 10]]]).unwrap();
        let scaled: Arc<[f64]> = col.iter().map(|x| 3.0 * x - 0.7).collect();
        assert!(a.check(&Payload::Reals(scaled.clone()), 1).is_some());
        assert!(a.check(&Payload::Reals(scaled), 0).is_none());
    }

    #[test]
    fn sending_over_a_missing_link_is_an_error() {
        struct Bad;
        impl NodeProgram for Bad {
            fn on_receive(&mut self, _: &NodeContext<'_>, _: Vec<Envelope>) -> Result<()> {
                Ok(())
            }
            fn on_send(&mut self, ctx: &NodeContext<'_>, out: &mut Outbox) -> Result<()> {
                if ctx.node == 0 {
                    out.send(2, MessageKind::NormValue, Payload::Empty);
                }
                Ok(())
            }
            fn is_done(&self) -> bool {
                true
            }
        }
        let mut net = Network::new(Topology::path(3).unwrap(), FailurePlan::none());
        match net.run("bad", &mut [Bad, Bad, Bad], None) {
            Err(Error::Simulation {
                node: 0, tick: 0, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
