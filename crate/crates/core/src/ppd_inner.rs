//! Inner products between vectors held by different nodes, estimated from sign
//! random projections. Each node hashes its vectors against a public projection set,
//! broadcasts the hash words and the vector norms, and every node then estimates all
//! pairwise angles from Hamming distances.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Channel, Transport};
use crate::rng::derive_seed;

pub const DEFAULT_HASH_BITS: usize = 2048;
const WORD_BITS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashConfig {
    pub bits: usize,
    pub seed: u64,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            bits: DEFAULT_HASH_BITS,
            seed: 0,
        }
    }
}

/// The public matrix `Γ` (rows × bits), regenerated from its seed by every node.
/// Column `l` is drawn from a ChaCha20 stream keyed by the seed with stream id `l`.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    seed: u64,
    rows: usize,
    bits: usize,
    columns: Vec<f64>,
}

impl ProjectionSet {
    pub fn new(seed: u64, rows: usize, bits: usize) -> Result<Self> {
        if rows == 0 || bits == 0 {
            return Err(Error::InvalidInput(
                "projection set needs rows >= 1 and bits >= 1".into(),
            ));
        }
        let key = derive_seed(seed, "ppd-inner/projection");
        let mut columns = Vec::with_capacity(rows * bits);
        for l in 0..bits {
            let mut rng = ChaCha20Rng::seed_from_u64(key);
            rng.set_stream(l as u64);
            columns.extend((0..rows).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        Ok(Self {
            seed,
            rows,
            bits,
            columns,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn column(&self, l: usize) -> &[f64] {
        &self.columns[l * self.rows..(l + 1) * self.rows]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignHash {
    words: Vec<u32>,
    bits: usize,
}

impl SignHash {
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn bit(&self, l: usize) -> bool {
        self.words[l / WORD_BITS] >> (l % WORD_BITS) & 1 == 1
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn to_chunks(&self) -> Vec<f64> {
        self.words.iter().map(|&w| f64::from(w)).collect()
    }

    pub fn from_chunks(chunks: &[f64], bits: usize) -> Result<Self> {
        if chunks.len() != bits.div_ceil(WORD_BITS) {
            return Err(Error::Dimension(format!(
                "{} chunks cannot hold {bits} bits",
                chunks.len()
            )));
        }
        let words = chunks
            .iter()
            .map(|&c| {
                if c.fract() == 0.0 && (0.0..=f64::from(u32::MAX)).contains(&c) {
                    Ok(c as u32)
                } else {
                    Err(Error::InvalidInput(format!(
                        "hash chunk {c} is not a 32-bit word"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { words, bits })
    }
}

/// Bit `l` is set when `pᵀγ_l >= 0`.
pub fn sign_hash(p: &[f64], gamma: &ProjectionSet) -> Result<SignHash> {
    if p.is_empty() {
        return Err(Error::InvalidInput(
            "cannot hash a zero-length vector".into(),
        ));
    }
    if p.len() != gamma.rows() {
        return Err(Error::Dimension(format!(
            "vector of length {} against projections of {} rows",
            p.len(),
            gamma.rows()
        )));
    }
    let mut words = vec![0u32; gamma.bits().div_ceil(WORD_BITS)];
    for l in 0..gamma.bits() {
        let dot: f64 = p.iter().zip(gamma.column(l)).map(|(a, b)| a * b).sum();
        if dot >= 0.0 {
            words[l / WORD_BITS] |= 1 << (l % WORD_BITS);
        }
    }
    Ok(SignHash {
        words,
        bits: gamma.bits(),
    })
}

pub fn hamming(a: &SignHash, b: &SignHash) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::Dimension(format!(
            "hash lengths {} and {} differ",
            a.bits, b.bits
        )));
    }
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

pub fn angle_from_hashes(a: &SignHash, b: &SignHash) -> Result<f64> {
    Ok(PI * f64::from(hamming(a, b)?) / a.bits as f64)
}

pub fn inner_product_from(beta: f64, norm_a: f64, norm_b: f64) -> f64 {
    norm_a * norm_b * beta.cos()
}

/// Symmetric Gram estimate with exact squared norms on the diagonal.
pub fn gram_from_hashes(hashes: &[SignHash], norms: &[f64]) -> Result<DMatrix<f64>> {
    let k = hashes.len();
    if norms.len() != k {
        return Err(Error::Dimension(format!(
            "{k} hashes but {} norms",
            norms.len()
        )));
    }
    let mut g = DMatrix::zeros(k, k);
    for a in 0..k {
        g[(a, a)] = norms[a] * norms[a];
        for b in a + 1..k {
            let v = inner_product_from(
                angle_from_hashes(&hashes[a], &hashes[b])?,
                norms[a],
                norms[b],
            );
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}

pub fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn exact_gram(vectors: &[&[f64]]) -> DMatrix<f64> {
    let k = vectors.len();
    DMatrix::from_fn(k, k, |a, b| {
        vectors[a].iter().zip(vectors[b]).map(|(x, y)| x * y).sum()
    })
}

/// A vector owned by one node, placed at `index` of Gram matrix `group`.
#[derive(Clone, Debug, PartialEq)]
pub struct OwnedVector {
    pub group: usize,
    pub index: usize,
    pub values: Vec<f64>,
}

/// Vectors to be compared: `groups` independent Gram matrices of size `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramRequest {
    pub groups: usize,
    pub dim: usize,
    pub rows: usize,
    /// `owned[m]` lists node `m`'s vectors.
    pub owned: Vec<Vec<OwnedVector>>,
}

impl GramRequest {
    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.owned.len() != nodes {
            return Err(Error::Dimension(format!(
                "{} owners for {nodes} nodes",
                self.owned.len()
            )));
        }
        let mut seen = vec![false; self.groups * self.dim];
        for v in self.owned.iter().flatten() {
            if v.group >= self.groups || v.index >= self.dim || v.values.len() != self.rows {
                return Err(Error::Dimension(format!(
                    "vector ({}, {}) of length {} does not fit the request",
                    v.group,
                    v.index,
                    v.values.len()
                )));
            }
            let slot = v.group * self.dim + v.index;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::InvalidInput(format!(
                    "vector ({}, {}) has two owners",
                    v.group, v.index
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidInput(
                "every Gram entry needs an owned vector".into(),
            ));
        }
        Ok(())
    }

    /// Exact Gram matrices; the oracle for the hashed estimate.
    pub fn exact(&self) -> Vec<DMatrix<f64>> {
        (0..self.groups)
            .map(|g| {
                let mut vs: Vec<&OwnedVector> = self
                    .owned
                    .iter()
                    .flatten()
                    .filter(|v| v.group == g)
                    .collect();
                vs.sort_by_key(|v| v.index);
                exact_gram(&vs.iter().map(|v| v.values.as_slice()).collect::<Vec<_>>())
            })
            .collect()
    }
}

/// Hash-based Gram estimates at every node: hashes and norms are computed locally and
/// disseminated with integer broadcasts; every node assembles the same matrices.
pub fn ppd_inner_products<T: Transport + ?Sized>(
    transport: &mut T,
    phase: &str,
    request: &GramRequest,
    gamma: &ProjectionSet,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let nodes = transport.nodes();
    request.validate(nodes)?;
    if gamma.rows() != request.rows {
        return Err(Error::Dimension(format!(
            "projections have {} rows, vectors {}",
            gamma.rows(),
            request.rows
        )));
    }
    let slots = request.groups * request.dim;
    let words = gamma.bits().div_ceil(WORD_BITS);
    let mut hash_payloads = vec![vec![0.0; slots * words]; nodes];
    let mut norm_payloads = vec![vec![0.0; slots]; nodes];
    for (m, owned) in request.owned.iter().enumerate() {
        for v in owned {
            let slot = v.group * request.dim + v.index;
            let h = sign_hash(&v.values, gamma)?;
            hash_payloads[m][slot * words..(slot + 1) * words].copy_from_slice(&h.to_chunks());
            norm_payloads[m][slot] = norm(&v.values);
        }
    }
    let hashes = transport.broadcast(&format!("{phase}/hashes"), Channel::Hashes, hash_payloads)?;
    let norms = transport.broadcast(&format!("{phase}/norms"), Channel::Norms, norm_payloads)?;
    hashes
        .iter()
        .zip(&norms)
        .map(|(h, nv)| {
            (0..request.groups)
                .map(|g| {
                    let base = g * request.dim;
                    let hs = (base..base + request.dim)
                        .map(|s| {
                            SignHash::from_chunks(&h[s * words..(s + 1) * words], gamma.bits())
                        })
                        .collect::<Result<Vec<_>>>()?;
                    gram_from_hashes(&hs, &nv[base..base + request.dim])
                })
                .collect()
        })
        .collect()
}

/// Mean of `|estimate - exact| / |exact|` over the strict upper triangle.
pub fn mean_relative_error(estimate: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    let k = exact.nrows();
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            total += ((estimate[(a, b)] - exact[(a, b)]) / exact[(a, b)]).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
