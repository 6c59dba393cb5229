//! Privacy-preserving distributed summation.
//!
//! The first consensus iteration is computed under Paillier encryption: every
//! neighbor `i` of node `m` encrypts `α_{m,i} l_i` under the key of `m`'s designated
//! neighbor `d(m)` (its lowest-indexed active neighbor), `m` multiplies the
//! ciphertexts together with an encrypted uniform mask, `d(m)` decrypts the masked
//! aggregate and `m` removes the mask. Later iterations are plain consensus rounds.
//!
//! Vector payloads are slot-packed; see [`SlotCodec`].

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigUint;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paillier::{
    keygen, sub_mod, uniform_mod, Ciphertext, CryptoError, FastEncryptor, FixedPointCodec,
    PaillierKeypair, PublicKey, SlotCodec,
};
use crate::rng::{derive_indexed, rng_indexed};
use crate::simnet::{
    Barrier, ConsensusProgram, Envelope, MessageKind, Network, NodeContext, NodeProgram, Outbox,
    Payload,
};
use crate::topology::{
    edge, run_consensus, ConsensusConfig, EdgeSet, SpreadRule, Topology, WeightMatrix,
};

pub const DEFAULT_KEY_BITS: usize = 512;

/// How node `m` draws its additive mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mask {
    /// Uniform over `Z_n`, i.e. the codec's full signed range.
    Uniform,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SumConfig {
    pub key_bits: usize,
    pub consensus: ConsensusConfig,
    /// Keep one keypair per node for every summation of a run instead of one per call.
    pub reuse_keys: bool,
    pub record_transcript: bool,
}

impl Default for SumConfig {
    fn default() -> Self {
        Self {
            key_bits: DEFAULT_KEY_BITS,
            consensus: ConsensusConfig::default(),
            reuse_keys: false,
            record_transcript: false,
        }
    }
}

/// One keypair per node.
#[derive(Clone, Debug)]
pub struct KeyRing {
    keys: Vec<Arc<PaillierKeypair>>,
}

impl KeyRing {
    pub fn generate(nodes: usize, bits: usize, seed: u64) -> Result<Self> {
        let keys = (0..nodes)
            .map(|m| keygen(bits, derive_indexed(seed, "ppd-sum/key", m as u64)).map(Arc::new))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { keys })
    }

    pub fn nodes(&self) -> usize {
        self.keys.len()
    }

    pub fn get(&self, m: usize) -> &Arc<PaillierKeypair> {
        &self.keys[m]
    }
}

/// What one node saw and produced during the encrypted first iteration.
#[derive(Clone, Debug)]
pub struct SecureRoundTranscript {
    pub node: usize,
    pub designated: usize,
    /// Per-plaintext masks in `Z_n` of the designated key.
    pub masks: Vec<BigUint>,
    pub neighbor_ciphertexts: Vec<(usize, Arc<[Ciphertext]>)>,
    pub aggregate: Vec<Ciphertext>,
    pub masked_sum: Vec<BigUint>,
    /// Unmasked `Σ_i α_{m,i} l_i` over neighbors whose share arrived.
    pub neighbor_sum: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SumOutcome {
    /// Per-node estimate of `Σ_m l_m`.
    pub values: Vec<Vec<f64>>,
    /// Plain consensus rounds after the encrypted one.
    pub rounds: usize,
    pub transcripts: Vec<SecureRoundTranscript>,
}

/// Result of the scalar secure local sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarRound {
    pub masked_sum: f64,
    pub mask: f64,
    pub value: f64,
}

/// Scalar form: aggregates neighbor ciphertexts (under `designated`'s key) with an
/// encrypted mask, lets the designated neighbor decrypt, and removes the mask.
pub fn secure_local_sum(
    neighbor_cts: &[Ciphertext],
    designated: &PaillierKeypair,
    mask: Mask,
    rng: &mut ChaCha20Rng,
) -> Result<ScalarRound> {
    if neighbor_cts.is_empty() {
        return Err(Error::InvalidInput(
            "secure local sum needs at least one neighbor".into(),
        ));
    }
    let pk = designated.public();
    let codec = FixedPointCodec::new(pk.n());
    let r = match mask {
        Mask::Uniform => uniform_mod(pk.n(), rng),
        Mask::Fixed(x) => codec.encode_real(x)?,
    };
    let enc_r = pk.encrypt(&r, rng)?;
    let aggregate = pk.add_ciphertexts(neighbor_cts.iter().chain(std::iter::once(&enc_r)))?;
    let masked = designated.decrypt(&aggregate)?;
    let unmasked = sub_mod(&masked, &r, pk.n());
    Ok(ScalarRound {
        masked_sum: codec.decode_real(&masked),
        mask: codec.decode_real(&r),
        value: codec.decode_real(&unmasked),
    })
}

/// Lowest-indexed neighbor; the "first neighbor" whose key protects the aggregate.
pub fn designated_neighbor(active_neighbors: &[usize]) -> Option<usize> {
    active_neighbors.iter().copied().min()
}

/// Per-node encryptors, created on first use of each key.
#[derive(Default)]
struct EncryptorCache {
    by_key: BTreeMap<u64, FastEncryptor>,
}

impl EncryptorCache {
    fn get(&mut self, key: &Arc<PublicKey>, rng: &mut ChaCha20Rng) -> &FastEncryptor {
        self.by_key
            .entry(key.fingerprint())
            .or_insert_with(|| FastEncryptor::new(key.clone(), rng))
    }
}

fn encrypt_share(
    enc: &FastEncryptor,
    alpha: f64,
    local: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<Ciphertext>> {
    let scaled: Vec<f64> = local.iter().map(|v| alpha * v).collect();
    let pts = SlotCodec::new(enc.public().n()).pack(&scaled)?;
    pts.iter()
        .map(|p| enc.encrypt(p, rng).map_err(Error::from))
        .collect()
}

fn masked_aggregate(
    enc: &FastEncryptor,
    shares: &[(usize, Arc<[Ciphertext]>)],
    len: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(Vec<Ciphertext>, Vec<BigUint>)> {
    let pk = enc.public();
    let count = SlotCodec::new(pk.n()).plaintexts_for(len);
    let mut aggregate = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for k in 0..count {
        let r = uniform_mod(pk.n(), rng);
        let enc_r = enc.encrypt(&r, rng)?;
        let mut parts = Vec::with_capacity(shares.len() + 1);
        for (src, cts) in shares {
            parts.push(cts.get(k).ok_or_else(|| {
                Error::from(CryptoError::Malformed(format!(
                    "share from {src} has {} ciphertexts",
                    cts.len()
                )))
            })?);
        }
        parts.push(&enc_r);
        aggregate.push(pk.add_ciphertexts(parts)?);
        masks.push(r);
    }
    Ok((aggregate, masks))
}

fn answer_request(keypair: &PaillierKeypair, request: &[Ciphertext]) -> Result<Vec<BigUint>> {
    request
        .iter()
        .map(|c| keypair.decrypt(c).map_err(Error::from))
        .collect()
}

fn unmask(n: &BigUint, reply: &[BigUint], masks: &[BigUint], len: usize) -> Result<Vec<f64>> {
    if reply.len() != masks.len() {
        return Err(CryptoError::Malformed(format!(
            "reply has {} plaintexts, expected {}",
            reply.len(),
            masks.len()
        ))
        .into());
    }
    let pts: Vec<BigUint> = reply
        .iter()
        .zip(masks)
        .map(|(c, r)| sub_mod(c, r, n))
        .collect();
    Ok(SlotCodec::new(n).unpack(&pts, len))
}

/// `G¹ = α_mm l_m + Ξ_m`, with the weight of every neighbor whose share did not
/// arrive applied to the node's own value.
fn first_iterate(
    local: &[f64],
    self_weight: f64,
    weights: &[(usize, f64)],
    arrived: &[usize],
    xi: &[f64],
) -> Vec<f64> {
    let mut coeff = self_weight;
    for (i, w) in weights {
        if !arrived.contains(i) {
            coeff += w;
        }
    }
    local.iter().zip(xi).map(|(l, x)| coeff * l + x).collect()
}

fn check_locals(locals: &[Vec<f64>], nodes: usize) -> Result<usize> {
    if locals.len() != nodes {
        return Err(Error::Dimension(format!(
            "{} local vectors for {nodes} nodes",
            locals.len()
        )));
    }
    let len = locals.first().map_or(0, Vec::len);
    if locals.iter().any(|l| l.len() != len) {
        return Err(Error::Dimension("local vectors differ in length".into()));
    }
    if locals.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("local values must be finite".into()));
    }
    Ok(len)
}

fn node_rng(seed: u64, m: usize) -> ChaCha20Rng {
    rng_indexed(seed, "ppd-sum/node", m as u64)
}

/// Direct (non-simulated) summation with fresh keys derived from `seed`.
pub fn ppd_sum(
    locals: &[Vec<f64>],
    topology: &Topology,
    weights: &WeightMatrix,
    config: &SumConfig,
    seed: u64,
) -> Result<SumOutcome> {
    let keys = KeyRing::generate(topology.nodes(), config.key_bits, seed)?;
    ppd_sum_with(
        locals,
        topology,
        weights,
        topology.edges(),
        &keys,
        config,
        seed,
    )
}

/// Direct summation over a fixed set of active links with the given keys.
pub fn ppd_sum_with(
    locals: &[Vec<f64>],
    topology: &Topology,
    weights: &WeightMatrix,
    active: &EdgeSet,
    keys: &KeyRing,
    config: &SumConfig,
    seed: u64,
) -> Result<SumOutcome> {
    let nodes = topology.nodes();
    let len = check_locals(locals, nodes)?;
    if nodes == 1 {
        return Ok(SumOutcome {
            values: locals.to_vec(),
            rounds: 0,
            transcripts: Vec::new(),
        });
    }
    let neighbors: Vec<Vec<usize>> = (0..nodes)
        .map(|m| {
            topology
                .neighbors(m)
                .iter()
                .copied()
                .filter(|&i| active.contains(&edge(m, i)))
                .collect()
        })
        .collect();
    let designated: Vec<usize> = neighbors
        .iter()
        .enumerate()
        .map(|(m, nb)| {
            designated_neighbor(nb)
                .ok_or_else(|| Error::Topology(format!("node {m} has no active neighbor")))
        })
        .collect::<Result<_>>()?;
    let mut rngs: Vec<ChaCha20Rng> = (0..nodes).map(|m| node_rng(seed, m)).collect();
    let mut caches: Vec<EncryptorCache> = (0..nodes).map(|_| EncryptorCache::default()).collect();

    let mut shares: Vec<Vec<(usize, Arc<[Ciphertext]>)>> = vec![Vec::new(); nodes];
    for i in 0..nodes {
        for &m in &neighbors[i] {
            let key = keys.get(designated[m]).public();
            let enc = caches[i].get(key, &mut rngs[i]);
            let cts = encrypt_share(enc, weights.get(m, i), &locals[i], &mut rngs[i])?;
            shares[m].push((i, cts.into()));
        }
    }
    for s in &mut shares {
        s.sort_by_key(|(src, _)| *src);
    }

    let mut first = Vec::with_capacity(nodes);
    let mut transcripts = Vec::new();
    for m in 0..nodes {
        let d = designated[m];
        let key = keys.get(d).public();
        let enc = caches[m].get(key, &mut rngs[m]);
        let (aggregate, masks) = masked_aggregate(enc, &shares[m], len, &mut rngs[m])?;
        let reply = answer_request(keys.get(d), &aggregate)?;
        let xi = unmask(key.n(), &reply, &masks, len)?;
        let arrived: Vec<usize> = shares[m].iter().map(|(s, _)| *s).collect();
        first.push(first_iterate(
            &locals[m],
            weights.get(m, m),
            weights.neighbor_weights(m),
            &arrived,
            &xi,
        ));
        if config.record_transcript {
            transcripts.push(SecureRoundTranscript {
                node: m,
                designated: d,
                masks,
                neighbor_ciphertexts: shares[m].clone(),
                aggregate,
                masked_sum: reply,
                neighbor_sum: xi,
            });
        }
    }

    let out = run_consensus(
        first,
        weights,
        active,
        config.consensus.tolerance,
        SpreadRule::Relative,
        config.consensus.budget(topology),
    )?;
    Ok(SumOutcome {
        values: scale(out.values, nodes),
        rounds: out.rounds,
        transcripts,
    })
}

fn scale(values: Vec<Vec<f64>>, nodes: usize) -> Vec<Vec<f64>> {
    values
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * nodes as f64).collect())
        .collect()
}

/// Node state machine for one summation on the simulator.
pub struct SumProgram {
    node: usize,
    local: Vec<f64>,
    self_weight: f64,
    weights: Vec<(usize, f64)>,
    keypair: Arc<PaillierKeypair>,
    rng: ChaCha20Rng,
    encryptors: EncryptorCache,
    neighbor_keys: BTreeMap<usize, Arc<PublicKey>>,
    designated: Option<usize>,
    wanted_keys: BTreeMap<usize, Arc<PublicKey>>,
    shares: Vec<(usize, Arc<[Ciphertext]>)>,
    masks: Vec<BigUint>,
    requests: Vec<(usize, Arc<[Ciphertext]>)>,
    consensus: Option<ConsensusProgram>,
    transcript: Option<SecureRoundTranscript>,
    record: bool,
}

impl SumProgram {
    pub fn new(
        node: usize,
        local: Vec<f64>,
        weights: &WeightMatrix,
        keypair: Arc<PaillierKeypair>,
        seed: u64,
        record: bool,
    ) -> Self {
        Self {
            node,
            local,
            self_weight: weights.get(node, node),
            weights: weights.neighbor_weights(node).to_vec(),
            keypair,
            rng: node_rng(seed, node),
            encryptors: EncryptorCache::default(),
            neighbor_keys: BTreeMap::new(),
            designated: None,
            wanted_keys: BTreeMap::new(),
            shares: Vec::new(),
            masks: Vec::new(),
            requests: Vec::new(),
            consensus: None,
            transcript: None,
            record,
        }
    }

    pub fn value(&self) -> Option<&[f64]> {
        self.consensus.as_ref().map(ConsensusProgram::value)
    }

    pub fn rounds(&self) -> usize {
        self.consensus.as_ref().map_or(0, |c| c.rounds)
    }

    fn weight_of(&self, i: usize) -> f64 {
        self.weights
            .iter()
            .find(|(j, _)| *j == i)
            .map_or(0.0, |(_, w)| *w)
    }

    fn unexpected(&self, env: &Envelope, stage: &str) -> Error {
        Error::InvalidInput(format!(
            "node {} got unexpected {} from {} at {stage}",
            self.node, env.kind, env.src
        ))
    }

    fn stage_receive(&mut self, tick: u64, inbox: Vec<Envelope>) -> Result<()> {
        let len = self.local.len();
        for env in inbox {
            match (tick, env.kind, &env.payload) {
                (1, MessageKind::PublicKey, Payload::Key { owner, key }) if *owner == env.src => {
                    self.neighbor_keys.insert(env.src, key.clone());
                }
                (2, MessageKind::PublicKey, Payload::Key { key, .. }) => {
                    self.wanted_keys.insert(env.src, key.clone());
                }
                (3, MessageKind::Ciphertext, Payload::Ciphertexts(cts)) => {
                    self.shares.push((env.src, cts.clone()))
                }
                (4, MessageKind::MaskedSumRequest, Payload::Ciphertexts(cts)) => {
                    self.requests.push((env.src, cts.clone()))
                }
                (5, MessageKind::MaskedSumReply, Payload::Integers(reply)) => {
                    let d = self.designated.expect("designated before reply");
                    let n = self.neighbor_keys[&d].n().clone();
                    let xi = unmask(&n, reply, &self.masks, len)?;
                    let arrived: Vec<usize> = self.shares.iter().map(|(s, _)| *s).collect();
                    let g1 =
                        first_iterate(&self.local, self.self_weight, &self.weights, &arrived, &xi);
                    if self.record {
                        if let Some(t) = self.transcript.as_mut() {
                            t.masked_sum = reply.to_vec();
                            t.neighbor_sum = xi;
                        }
                    }
                    self.consensus = Some(ConsensusProgram::new(
                        g1,
                        self.self_weight,
                        self.weights.clone(),
                        MessageKind::ConsensusValue,
                    ));
                }
                _ => return Err(self.unexpected(&env, "secure round")),
            }
        }
        if tick == 3 {
            self.shares.sort_by_key(|(s, _)| *s);
        }
        if tick == 5 && self.consensus.is_none() {
            return Err(Error::InvalidInput(format!(
                "node {} received no reply from its designated neighbor",
                self.node
            )));
        }
        Ok(())
    }
}

impl NodeProgram for SumProgram {
    fn on_receive(&mut self, ctx: &NodeContext<'_>, inbox: Vec<Envelope>) -> Result<()> {
        match (&mut self.consensus, ctx.local_tick) {
            (Some(c), t) if t > 5 => c.on_receive(ctx, inbox),
            _ => self.stage_receive(ctx.local_tick, inbox),
        }
    }

    fn on_send(&mut self, ctx: &NodeContext<'_>, out: &mut Outbox) -> Result<()> {
        match ctx.local_tick {
            0 => {
                let key = self.keypair.public().clone();
                for &i in ctx.active_neighbors {
                    out.send(
                        i,
                        MessageKind::PublicKey,
                        Payload::Key {
                            owner: self.node,
                            key: key.clone(),
                        },
                    );
                }
            }
            1 => {
                let d =
                    designated_neighbor(&self.neighbor_keys.keys().copied().collect::<Vec<_>>())
                        .ok_or_else(|| {
                            Error::Topology(format!("node {} received no neighbor key", self.node))
                        })?;
                self.designated = Some(d);
                let key = self.neighbor_keys[&d].clone();
                for &i in ctx.active_neighbors {
                    out.send(
                        i,
                        MessageKind::PublicKey,
                        Payload::Key {
                            owner: d,
                            key: key.clone(),
                        },
                    );
                }
            }
            2 => {
                let wanted: Vec<(usize, Arc<PublicKey>)> = self
                    .wanted_keys
                    .iter()
                    .map(|(m, k)| (*m, k.clone()))
                    .collect();
                for (m, key) in wanted {
                    if !ctx.active_neighbors.contains(&m) {
                        continue;
                    }
                    let alpha = self.weight_of(m);
                    let enc = self.encryptors.get(&key, &mut self.rng);
                    let cts = encrypt_share(enc, alpha, &self.local, &mut self.rng)?;
                    out.send(m, MessageKind::Ciphertext, Payload::Ciphertexts(cts.into()));
                }
            }
            3 => {
                let d = self.designated.expect("designated at tick 1");
                if !ctx.active_neighbors.contains(&d) {
                    return Err(Error::Topology(format!(
                        "designated neighbor {d} of node {} is unreachable",
                        self.node
                    )));
                }
                let key = self.neighbor_keys[&d].clone();
                let enc = self.encryptors.get(&key, &mut self.rng);
                let (aggregate, masks) =
                    masked_aggregate(enc, &self.shares, self.local.len(), &mut self.rng)?;
                self.masks = masks;
                if self.record {
                    self.transcript = Some(SecureRoundTranscript {
                        node: self.node,
                        designated: d,
                        masks: self.masks.clone(),
                        neighbor_ciphertexts: self.shares.clone(),
                        aggregate: aggregate.clone(),
                        masked_sum: Vec::new(),
                        neighbor_sum: Vec::new(),
                    });
                }
                out.send(
                    d,
                    MessageKind::MaskedSumRequest,
                    Payload::Ciphertexts(aggregate.into()),
                );
            }
            4 => {
                for (m, request) in std::mem::take(&mut self.requests) {
                    if !ctx.active_neighbors.contains(&m) {
                        return Err(Error::Topology(format!(
                            "client {m} of node {} is unreachable",
                            self.node
                        )));
                    }
                    let reply = answer_request(&self.keypair, &request)?;
                    out.send(
                        m,
                        MessageKind::MaskedSumReply,
                        Payload::Integers(reply.into()),
                    );
                }
            }
            _ => {
                if let Some(c) = self.consensus.as_mut() {
                    c.on_send(ctx, out)?;
                }
            }
        }
        Ok(())
    }

    fn consensus_value(&self) -> Option<&[f64]> {
        self.consensus
            .as_ref()
            .and_then(NodeProgram::consensus_value)
    }

    fn on_converged(&mut self) {
        if let Some(c) = self.consensus.as_mut() {
            c.on_converged();
        }
    }

    fn is_done(&self) -> bool {
        self.consensus.as_ref().is_some_and(NodeProgram::is_done)
    }
}

/// Runs one summation on the simulator; the result matches [`ppd_sum_with`] bit for bit
/// when no link fails during the run.
pub fn simulate_ppd_sum(
    net: &mut Network,
    phase: &str,
    locals: &[Vec<f64>],
    weights: &WeightMatrix,
    keys: &KeyRing,
    config: &SumConfig,
    seed: u64,
) -> Result<SumOutcome> {
    let nodes = net.topology().nodes();
    check_locals(locals, nodes)?;
    if nodes == 1 {
        return Ok(SumOutcome {
            values: locals.to_vec(),
            rounds: 0,
            transcripts: Vec::new(),
        });
    }
    let mut programs: Vec<SumProgram> = (0..nodes)
        .map(|m| {
            SumProgram::new(
                m,
                locals[m].clone(),
                weights,
                keys.get(m).clone(),
                seed,
                config.record_transcript,
            )
        })
        .collect();
    let barrier = Barrier {
        tolerance: config.consensus.tolerance,
        rule: SpreadRule::Relative,
        max_rounds: config.consensus.budget(net.topology()),
    };
    net.run(phase, &mut programs, Some(barrier))?;
    let rounds = programs[0].rounds();
    let mut values = Vec::with_capacity(nodes);
    let mut transcripts = Vec::new();
    for p in programs {
        values.push(p.value().expect("finished programs hold a value").to_vec());
        transcripts.extend(p.transcript);
    }
    Ok(SumOutcome {
        values: scale(values, nodes),
        rounds,
        transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::FixedPointCodec;
    use crate::rng::rng_for;
    use crate::simnet::{audit_privacy, FailurePlan, RawDataAuditor};
    use crate::topology::metropolis_weights;
    use rand::Rng;
    use std::sync::OnceLock;

    fn keys9() -> &'static KeyRing {
        static KEYS: OnceLock<KeyRing> = OnceLock::new();
        KEYS.get_or_init(|| KeyRing::generate(9, 512, 5).unwrap())
    }

    fn random_locals(nodes: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, "test/locals");
        (0..nodes)
            .map(|_| (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect()
    }

    #[test]
    fn fixed_mask_of_zero_values() {
        let kp = keys9().get(0);
        let codec = FixedPointCodec::new(kp.public().n());
        let mut rng = rng_for(1, "t");
        let cts: Vec<_> = (0..3)
            .map(|_| {
                kp.public()
                    .encrypt(&codec.encode_real(0.0).unwrap(), &mut rng)
                    .unwrap()
            })
            .collect();
        let r = secure_local_sum(&cts, kp, Mask::Fixed(7.25), &mut rng).unwrap();
        assert_eq!(r.masked_sum, 7.25);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn scalar_sum_matches_plaintext_for_three_neighbors() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let m = 0;
        let three = &t.neighbors(m)[..3];
        let kp = keys9().get(three[0]);
        let codec = FixedPointCodec::new(kp.public().n());
        let mut rng = rng_for(2, "t");
        let values: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut direct = 0.0;
        let cts: Vec<_> = three
            .iter()
            .map(|&i| {
                let x = w.get(m, i) * values[i];
                direct += x;
                kp.public()
                    .encrypt(&codec.encode_real(x).unwrap(), &mut rng)
                    .unwrap()
            })
            .collect();
        for mask in [Mask::Uniform, Mask::Fixed(3.5), Mask::Fixed(-1e6)] {
            let r = secure_local_sum(&cts, kp, mask, &mut rng).unwrap();
            assert!((r.value - direct).abs() <= 9.0 * 2f64.powi(-40), "{mask:?}");
        }
    }

    #[test]
    fn scalar_sum_rejects_empty_and_foreign_keys() {
        let mut rng = rng_for(3, "t");
        assert!(secure_local_sum(&[], keys9().get(0), Mask::Uniform, &mut rng).is_err());
        let other = keys9()
            .get(1)
            .public()
            .encrypt(&BigUint::from(1u8), &mut rng)
            .unwrap();
        match secure_local_sum(&[other], keys9().get(0), Mask::Uniform, &mut rng) {
            Err(Error::Crypto(CryptoError::KeyMismatch { .. })) => {}
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn zero_locals_sum_to_zero() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let out = ppd_sum_with(
            &vec![vec![0.0; 4]; 9],
            &t,
            &w,
            t.edges(),
            keys9(),
            &SumConfig::default(),
            1,
        )
        .unwrap();
        assert!(out.values.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn case_study_sum_is_exact_and_fast() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let locals = random_locals(9, 13, 4);
        let cfg = SumConfig {
            record_transcript: true,
            ..SumConfig::default()
        };
        let out = ppd_sum_with(&locals, &t, &w, t.edges(), keys9(), &cfg, 9).unwrap();
        for k in 0..13 {
            let truth: f64 = locals.iter().map(|l| l[k]).sum();
            for v in &out.values {
                assert!((v[k] - truth).abs() < 1e-8, "{} vs {truth}", v[k]);
            }
        }
        assert!(out.rounds <= 40, "{} rounds", out.rounds);
        for tr in &out.transcripts {
            let n = keys9().get(tr.designated).public().n();
            let recovered = unmask(n, &tr.masked_sum, &tr.masks, 13).unwrap();
            for k in 0..13 {
                let plain: f64 = t
                    .neighbors(tr.node)
                    .iter()
                    .map(|&i| w.get(tr.node, i) * locals[i][k])
                    .sum();
                assert!((recovered[k] - plain).abs() <= 9.0 * 2f64.powi(-40));
            }
            assert_eq!(tr.designated, t.neighbors(tr.node)[0]);
        }
    }

    #[test]
    fn matches_plaintext_consensus() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let locals = random_locals(9, 5, 6);
        let out = ppd_sum_with(
            &locals,
            &t,
            &w,
            t.edges(),
            keys9(),
            &SumConfig::default(),
            2,
        )
        .unwrap();
        let plain = run_consensus(
            locals.clone(),
            &w,
            t.edges(),
            1e-10,
            SpreadRule::Relative,
            500,
        )
        .unwrap();
        for (a, b) in out.values.iter().zip(&plain.values) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - 9.0 * y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn random_graphs_match_direct_sums() {
        for seed in 0..3 {
            let t = Topology::random_connected(6, 0.3, seed).unwrap();
            let w = metropolis_weights(&t);
            let keys = KeyRing::generate(6, 512, seed).unwrap();
            let locals = random_locals(6, 7, seed + 10);
            let cfg = SumConfig {
                consensus: ConsensusConfig {
                    max_rounds: Some(5000),
                    ..ConsensusConfig::default()
                },
                ..SumConfig::default()
            };
            let out = ppd_sum_with(&locals, &t, &w, t.edges(), &keys, &cfg, seed).unwrap();
            for k in 0..7 {
                let truth: f64 = locals.iter().map(|l| l[k]).sum();
                assert!(out.values.iter().all(|v| (v[k] - truth).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn single_node_returns_local() {
        let t = Topology::complete(1).unwrap();
        let w = metropolis_weights(&t);
        let keys = KeyRing { keys: Vec::new() };
        let out = ppd_sum_with(
            &[vec![2.5, -1.0]],
            &t,
            &w,
            t.edges(),
            &keys,
            &SumConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(out.values, vec![vec![2.5, -1.0]]);
    }

    #[test]
    fn degree_one_node_reveals_weighted_neighbor_value() {
        let t = Topology::path(3).unwrap();
        let w = metropolis_weights(&t);
        let keys = KeyRing::generate(3, 512, 8).unwrap();
        let locals = vec![vec![1.0], vec![2.0], vec![4.0]];
        let cfg = SumConfig {
            record_transcript: true,
            ..SumConfig::default()
        };
        let out = ppd_sum_with(&locals, &t, &w, t.edges(), &keys, &cfg, 3).unwrap();
        let tr = &out.transcripts[0];
        assert!((tr.neighbor_sum[0] - w.get(0, 1) * 2.0).abs() < 1e-9);
        let net = Network::new(t, FailurePlan::none());
        assert_eq!(net.privacy_log().caveats.len(), 2);
    }

    #[test]
    fn simulated_run_is_bitwise_identical_to_direct() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let locals = random_locals(9, 20, 12);
        let cfg = SumConfig::default();
        let direct = ppd_sum_with(&locals, &t, &w, t.edges(), keys9(), &cfg, 77).unwrap();
        let columns: Vec<Vec<Vec<f64>>> = locals.iter().map(|l| vec![l.clone()]).collect();
        let mut net = Network::new(t.clone(), FailurePlan::none())
            .with_auditor(RawDataAuditor::new(&columns).unwrap());
        let sim = simulate_ppd_sum(&mut net, "sum", &locals, &w, keys9(), &cfg, 77).unwrap();
        assert_eq!(direct.values, sim.values);
        assert_eq!(direct.rounds, sim.rounds);
        let report = audit_privacy(net.privacy_log());
        assert!(report.clean, "{:?}", report.violations);
        let acc = net.accounting();
        assert_eq!(acc.per_kind[&MessageKind::Ciphertext].messages, 60);
        assert_eq!(acc.per_kind[&MessageKind::MaskedSumRequest].messages, 9);
        assert_eq!(acc.per_kind[&MessageKind::MaskedSumReply].messages, 9);
        assert_eq!(acc.per_kind[&MessageKind::PublicKey].messages, 120);
    }

    #[test]
    fn simulated_cut_at_start_matches_direct_on_residual_graph() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let cut = (1, 3);
        assert!(t.has_edge(1, 3) || t.has_edge(3, 1));
        let active: EdgeSet = t
            .edges()
            .iter()
            .copied()
            .filter(|e| *e != edge(1, 3))
            .collect();
        let locals = random_locals(9, 6, 13);
        let cfg = SumConfig::default();
        let direct = ppd_sum_with(&locals, &t, &w, &active, keys9(), &cfg, 5).unwrap();
        let mut net = Network::new(t.clone(), FailurePlan::cut_at([cut], 0));
        let sim = simulate_ppd_sum(&mut net, "sum", &locals, &w, keys9(), &cfg, 5).unwrap();
        assert_eq!(direct.values, sim.values);
        for k in 0..6 {
            let truth: f64 = locals.iter().map(|l| l[k]).sum();
            assert!(sim.values.iter().all(|v| (v[k] - truth).abs() < 1e-8));
        }
    }

    #[test]
    fn mid_protocol_cut_conserves_the_sum() {
        let t = Topology::case_study();
        let w = metropolis_weights(&t);
        let locals = random_locals(9, 3, 14);
        let e = *t.edges().iter().next_back().unwrap();
        for tick in [3, 7] {
            let mut net = Network::new(t.clone(), FailurePlan::cut_at([e], tick));
            let sim = simulate_ppd_sum(
                &mut net,
                "sum",
                &locals,
                &w,
                keys9(),
                &SumConfig::default(),
                6,
            )
            .unwrap();
            for k in 0..3 {
                let truth: f64 = locals.iter().map(|l| l[k]).sum();
                assert!(
                    sim.values.iter().all(|v| (v[k] - truth).abs() < 1e-8),
                    "cut at {tick}"
                );
            }
        }
    }

    #[test]
    fn mask_choice_does_not_change_output() {
        let kp = keys9().get(2);
        let codec = FixedPointCodec::new(kp.public().n());
        let mut rng = rng_for(9, "t");
        let cts: Vec<_> = [0.5, -0.25]
            .iter()
            .map(|x| {
                kp.public()
                    .encrypt(&codec.encode_real(*x).unwrap(), &mut rng)
                    .unwrap()
            })
            .collect();
        let a = secure_local_sum(&cts, kp, Mask::Fixed(1.0), &mut rng).unwrap();
        let b = secure_local_sum(&cts, kp, Mask::Fixed(1000.0), &mut rng).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.value, 0.25);
    }
}
