//! Distributed EM over vertically partitioned data.
//!
//! Node `m` owns the power column `m` and the forecast column `M + m`. Every node
//! keeps its own copy of the public parameters; the E-step obtains the Mahalanobis
//! terms from two batched secure summations and the M-step combines node-local
//! moments through exact broadcasts and Gram estimates, so the copies stay
//! byte-identical between iterations.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_io::VerticalSlice;
use crate::em::{
    assemble_params, min_eigenvalue, pool_initial, DistanceOracle, EmConfig, InitRegistry,
    Responsibilities, Trace, MONOTONE_SLACK,
};
use crate::error::{Error, Result};
use crate::gmm::{GaussianFactor, GmmParams, LN_2PI};
use crate::ppd_inner::{GramRequest, OwnedVector};
use crate::protocol::{Channel, Transport, TransportReport};

/// Smallest eigenvalue a Gram-assembled covariance may have before flooring.
pub const HASH_BUDGET_EIGENVALUE: f64 = -0.1;

/// The public per-component quantities every node derives from its copy of the parameters.
struct Precomputed {
    precision: Vec<DMatrix<f64>>,
    log_det: Vec<f64>,
    log_weight: Vec<f64>,
    means: Vec<DVector<f64>>,
}

impl Precomputed {
    fn new(params: &GmmParams) -> Result<Self> {
        let factors = params.factors()?;
        Ok(Self {
            precision: factors.iter().map(GaussianFactor::precision).collect(),
            log_det: factors.iter().map(GaussianFactor::log_det).collect(),
            log_weight: params.weights().iter().map(|w| w.ln()).collect(),
            means: params.means().to_vec(),
        })
    }
}

/// Node `m`'s share of row `i` of `Σ⁻¹ (x_n − μ)` for one component.
pub fn local_first_sum_term(
    slice: &VerticalSlice,
    precision: &DMatrix<f64>,
    mean: &DVector<f64>,
    n: usize,
    i: usize,
) -> f64 {
    let farms = precision.nrows() / 2;
    let m = slice.node;
    precision[(m, i)] * (slice.power[n] - mean[m])
        + precision[(farms + m, i)] * (slice.forecast[n] - mean[farms + m])
}

fn validate(slices: &[VerticalSlice], transport: &dyn Transport) -> Result<usize> {
    let rows = slices
        .first()
        .map(VerticalSlice::rows)
        .ok_or_else(|| Error::InvalidInput("no slices".into()))?;
    for (m, s) in slices.iter().enumerate() {
        if s.node != m {
            return Err(Error::InvalidInput(format!(
                "slice {m} belongs to node {}",
                s.node
            )));
        }
        if s.power.len() != rows || s.forecast.len() != rows {
            return Err(Error::Dimension(format!(
                "node {m} has {} rows, node 0 has {rows}",
                s.rows()
            )));
        }
        if s.power.iter().chain(&s.forecast).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "node {m} holds non-finite values"
            )));
        }
    }
    if transport.nodes() != slices.len() {
        return Err(Error::Dimension(format!(
            "transport has {} nodes for {} slices",
            transport.nodes(),
            slices.len()
        )));
    }
    Ok(rows)
}

/// Responsibilities and log-likelihood as seen by each node.
pub fn distributed_e_step(
    transport: &mut dyn Transport,
    slices: &[VerticalSlice],
    params: &[GmmParams],
) -> Result<Vec<(Responsibilities, f64)>> {
    let rows = validate(slices, transport)?;
    let farms = slices.len();
    let dim = 2 * farms;
    let comps = params[0].components();
    if params.len() != farms
        || params
            .iter()
            .any(|p| p.dim() != dim || p.components() != comps)
    {
        return Err(Error::Dimension(
            "parameter copies do not match the slices".into(),
        ));
    }
    let pre: Vec<Precomputed> = params.iter().map(Precomputed::new).collect::<Result<_>>()?;
    transport.next_epoch()?;

    let first: Vec<Vec<f64>> = slices
        .iter()
        .zip(&pre)
        .map(|(s, p)| {
            let mut out = Vec::with_capacity(comps * rows * dim);
            for j in 0..comps {
                for n in 0..rows {
                    out.extend(
                        (0..dim)
                            .map(|i| local_first_sum_term(s, &p.precision[j], &p.means[j], n, i)),
                    );
                }
            }
            out
        })
        .collect();
    let tau = transport
        .sum("e-step/tau", first)
        .map_err(|e| e.in_context("e-step first summation"))?;

    let second: Vec<Vec<f64>> = slices
        .iter()
        .zip(&pre)
        .zip(&tau)
        .map(|((s, p), t)| {
            let m = s.node;
            let mut out = Vec::with_capacity(comps * rows);
            for j in 0..comps {
                let mu = &p.means[j];
                for n in 0..rows {
                    let base = (j * rows + n) * dim;
                    out.push(
                        t[base + m] * (s.power[n] - mu[m])
                            + t[base + farms + m] * (s.forecast[n] - mu[farms + m]),
                    );
                }
            }
            out
        })
        .collect();
    let eps = transport
        .sum("e-step/epsilon", second)
        .map_err(|e| e.in_context("e-step second summation"))?;

    Ok(eps
        .iter()
        .zip(&pre)
        .map(|(e, p)| {
            let mut terms = vec![0.0; rows * comps];
            for n in 0..rows {
                for j in 0..comps {
                    terms[n * comps + j] = p.log_weight[j]
                        - 0.5 * e[j * rows + n]
                        - 0.5 * p.log_det[j]
                        - farms as f64 * LN_2PI;
                }
            }
            Responsibilities::from_log_terms(&terms, comps)
        })
        .collect())
}

/// New parameters at every node from each node's responsibilities.
pub fn distributed_m_step(
    transport: &mut dyn Transport,
    slices: &[VerticalSlice],
    resp: &[Responsibilities],
    floor: f64,
) -> Result<Vec<GmmParams>> {
    let rows = validate(slices, transport)?;
    let farms = slices.len();
    let dim = 2 * farms;
    let comps = resp[0].components();
    if resp.len() != farms
        || resp
            .iter()
            .any(|q| q.len() != rows || q.components() != comps)
    {
        return Err(Error::Dimension(
            "responsibilities do not match the slices".into(),
        ));
    }

    let mut weight_words = Vec::with_capacity(farms);
    let mut stat_words = Vec::with_capacity(farms);
    let mut owned = Vec::with_capacity(farms);
    for (s, q) in slices.iter().zip(resp) {
        let m = s.node;
        let masses = q.masses()?;
        let mut weights = vec![0.0; farms * comps];
        let mut stats = vec![0.0; comps * 2 * dim];
        let mut vectors = Vec::with_capacity(2 * comps);
        for (j, &mass) in masses.iter().enumerate() {
            weights[m * comps + j] = mass / rows as f64;
            let c = q.normalized(j, mass);
            for (k, col) in [(m, &s.power), (farms + m, &s.forecast)] {
                let mu: f64 = c.iter().zip(col.iter()).map(|(cn, v)| cn * v).sum();
                let var: f64 = c
                    .iter()
                    .zip(col.iter())
                    .map(|(cn, v)| cn * (v - mu) * (v - mu))
                    .sum();
                stats[j * 2 * dim + k] = mu;
                stats[j * 2 * dim + dim + k] = var;
                vectors.push(OwnedVector {
                    group: j,
                    index: k,
                    values: c
                        .iter()
                        .zip(col.iter())
                        .map(|(cn, v)| cn.sqrt() * (v - mu))
                        .collect(),
                });
            }
        }
        weight_words.push(weights);
        stat_words.push(stats);
        owned.push(vectors);
    }

    let weights_all = transport
        .broadcast("m-step/weights", Channel::Statistics, weight_words)
        .map_err(|e| e.in_context("m-step weights"))?;
    let stats_all = transport
        .broadcast("m-step/statistics", Channel::Statistics, stat_words)
        .map_err(|e| e.in_context("m-step statistics"))?;
    let request = GramRequest {
        groups: comps,
        dim,
        rows,
        owned,
    };
    let grams = transport
        .gram("m-step/gram", &request)
        .map_err(|e| e.in_context("m-step inner products"))?;

    (0..farms)
        .map(|node| {
            let w = &weights_all[node];
            let weights: Vec<f64> = (0..comps)
                .map(|j| (0..farms).map(|m| w[m * comps + j]).sum::<f64>() / farms as f64)
                .collect();
            let st = &stats_all[node];
            let mut means = Vec::with_capacity(comps);
            let mut covs = Vec::with_capacity(comps);
            for j in 0..comps {
                let block = &st[j * 2 * dim..(j + 1) * 2 * dim];
                means.push(DVector::from_column_slice(&block[..dim]));
                let mut cov = grams[node][j].clone();
                for k in 0..dim {
                    cov[(k, k)] = block[dim + k];
                }
                let cov = (&cov + cov.transpose()) * 0.5;
                let eigenvalue = min_eigenvalue(&cov);
                if eigenvalue < HASH_BUDGET_EIGENVALUE {
                    return Err(Error::HashBudget {
                        component: j,
                        eigenvalue,
                    });
                }
                covs.push(cov);
            }
            assemble_params(&weights, means, covs, floor)
        })
        .collect()
}

/// Squared row distances summed securely; each node reads its own view and
/// every sum is requested once per seed row.
struct SharedDistances<'a> {
    transport: &'a mut dyn Transport,
    slices: &'a [VerticalSlice],
    cache: &'a mut HashMap<usize, Vec<Vec<f64>>>,
    node: usize,
}

impl DistanceOracle for SharedDistances<'_> {
    fn rows(&self) -> usize {
        self.slices[0].rows()
    }

    fn squared_distances_to(&mut self, seed: usize) -> Result<Vec<f64>> {
        if !self.cache.contains_key(&seed) {
            let locals = self
                .slices
                .iter()
                .map(|s| {
                    (0..s.rows())
                        .map(|n| {
                            (s.power[n] - s.power[seed]).powi(2)
                                + (s.forecast[n] - s.forecast[seed]).powi(2)
                        })
                        .collect()
                })
                .collect();
            let sums = self
                .transport
                .sum(&format!("init/distances/{seed}"), locals)
                .map_err(|e| e.in_context("initial distances"))?;
            self.cache.insert(seed, sums);
        }
        Ok(self.cache[&seed][self.node].clone())
    }
}

/// Initial parameters at every node from the configured strategy.
pub fn distributed_initialize(
    transport: &mut dyn Transport,
    slices: &[VerticalSlice],
    config: &EmConfig,
    registry: &InitRegistry,
) -> Result<(Vec<GmmParams>, Vec<String>)> {
    validate(slices, transport)?;
    let strategy = registry.get(&config.init)?;
    let mut cache = HashMap::new();
    let mut labels = Vec::with_capacity(slices.len());
    for node in 0..slices.len() {
        let mut oracle = SharedDistances {
            transport: &mut *transport,
            slices,
            cache: &mut cache,
            node,
        };
        labels.push(strategy.partition(&mut oracle, config.components, config.seed)?);
    }
    let mut diagnostics = Vec::new();
    if labels.iter().any(|l| l != &labels[0]) {
        diagnostics.push("initial partitions differ between nodes".to_string());
    }
    let resp: Vec<Responsibilities> = labels
        .iter()
        .map(|l| Responsibilities::from_labels(l, config.components))
        .collect();
    let grouped = distributed_m_step(transport, slices, &resp, config.covariance_floor)?;
    let init = grouped
        .iter()
        .map(|g| pool_initial(g, config.covariance_floor))
        .collect::<Result<_>>()?;
    Ok((init, diagnostics))
}

/// Per-iteration log-likelihood with cumulative traffic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpdTrace {
    /// Node 0's log-likelihood sequence with the shared convergence diagnostics.
    pub em: Trace,
    /// Largest difference between any node's log-likelihood and node 0's, per iteration.
    pub log_likelihood_spread: Vec<f64>,
    pub messages: Vec<u64>,
    pub bytes: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PpdEmResult {
    /// Each node's fitted parameters.
    pub params: Vec<GmmParams>,
    pub trace: PpdTrace,
    pub converged: bool,
    /// Node 0's parameter sets, starting from the initialization.
    pub iterates: Vec<GmmParams>,
    pub report: TransportReport,
}

impl PpdEmResult {
    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    /// Whether every node holds exactly the same parameters.
    pub fn nodes_agree(&self) -> bool {
        self.params.iter().all(|p| p == &self.params[0])
    }
}

fn check_fit_input(slices: &[VerticalSlice], config: &EmConfig) -> Result<()> {
    config.validate()?;
    let rows = slices.first().map_or(0, VerticalSlice::rows);
    if rows <= config.components {
        return Err(Error::InvalidInput(format!(
            "need more rows ({rows}) than components ({})",
            config.components
        )));
    }
    Ok(())
}

/// Distributed EM with distributed initialization.
pub fn ppd_em_fit(
    transport: &mut dyn Transport,
    slices: &[VerticalSlice],
    config: &EmConfig,
    registry: &InitRegistry,
) -> Result<PpdEmResult> {
    check_fit_input(slices, config)?;
    let (init, diagnostics) = distributed_initialize(transport, slices, config, registry)?;
    let mut result = ppd_em_fit_from(transport, slices, init, config)?;
    result.trace.em.diagnostics.splice(0..0, diagnostics);
    Ok(result)
}

/// Distributed EM from given per-node initial parameters.
pub fn ppd_em_fit_from(
    transport: &mut dyn Transport,
    slices: &[VerticalSlice],
    init: Vec<GmmParams>,
    config: &EmConfig,
) -> Result<PpdEmResult> {
    check_fit_input(slices, config)?;
    let farms = slices.len();
    if init.len() != farms {
        return Err(Error::Dimension(format!(
            "{} initial parameter sets for {farms} nodes",
            init.len()
        )));
    }
    let mut params = init;
    let mut traces = vec![Trace::default(); farms];
    let mut trace = PpdTrace::default();
    let mut iterates = vec![params[0].clone()];
    let mut converged = false;
    let slack = MONOTONE_SLACK.max(10.0 * transport.gram_error_bound());
    for iteration in 0..=config.max_iterations {
        let estep = distributed_e_step(transport, slices, &params)
            .map_err(|e| e.in_context(format!("iteration {iteration}")))?;
        let votes: Vec<Vec<f64>> = estep
            .iter()
            .zip(traces.iter_mut())
            .enumerate()
            .map(|(m, ((_, ll), t))| {
                let mut v = vec![0.0; farms];
                v[m] = if t.record_with_slack(*ll, config.tolerance, slack) {
                    1.0
                } else {
                    0.0
                };
                v
            })
            .collect();
        let ll0 = estep[0].1;
        trace.log_likelihood_spread.push(
            estep
                .iter()
                .map(|(_, ll)| (ll - ll0).abs())
                .fold(0.0, f64::max),
        );
        let tally = transport
            .broadcast("convergence/votes", Channel::Votes, votes)
            .map_err(|e| e.in_context(format!("iteration {iteration} convergence vote")))?;
        let accounting = transport.report().accounting;
        trace.messages.push(accounting.total.messages);
        trace.bytes.push(accounting.total.bytes);
        if tally[0].iter().all(|v| *v == 1.0) {
            converged = true;
            break;
        }
        if iterates.len() > config.max_iterations {
            break;
        }
        let resp: Vec<Responsibilities> = estep.into_iter().map(|(q, _)| q).collect();
        params = distributed_m_step(transport, slices, &resp, config.covariance_floor)
            .map_err(|e| e.in_context(format!("iteration {iteration}")))?;
        iterates.push(params[0].clone());
    }
    let mut em = traces.swap_remove(0);
    if params.iter().any(|p| p != &params[0]) {
        em.diagnostics
            .push("nodes hold different parameters".into());
    }
    trace.em = em;
    Ok(PpdEmResult {
        params,
        trace,
        converged,
        iterates,
        report: transport.report(),
    })
}
