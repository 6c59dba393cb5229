//! Centralized EM on the stacked dataset, plus the initialization strategies shared
//! with the distributed fitter.
//!
//! Initialization only needs squared distances between rows, supplied through
//! [`DistanceOracle`]. The centralized oracle reads the data directly; the distributed
//! one sums node-local partial distances through the network, so both runs pick the
//! same seeds and start from the same parameters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{free_parameters, log_sum_exp, GmmParams};
use crate::rng;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_COVARIANCE_FLOOR: f64 = 1e-8;
pub const MONOTONE_SLACK: f64 = 1e-8;
const COLLAPSE_MASS: f64 = 1e-12;

/// `J x N` posterior component probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    values: DMatrix<f64>,
}

impl Responsibilities {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        for n in 0..values.ncols() {
            let s: f64 = values.column(n).sum();
            if (s - 1.0).abs() > 1e-12 || values.column(n).iter().any(|q| !(0.0..=1.0).contains(q))
            {
                return Err(Error::InvalidInput(format!(
                    "responsibility column {n} is not a distribution"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Hard assignment: `Q[j, n] = 1` iff `labels[n] == j`.
    pub fn from_labels(labels: &[usize], components: usize) -> Self {
        let mut values = DMatrix::zeros(components, labels.len());
        for (n, &j) in labels.iter().enumerate() {
            values[(j, n)] = 1.0;
        }
        Self { values }
    }

    /// Normalizes per-row log joint terms `ln w_j + ln N_j(x_n)` (an `N x J` slice in
    /// row-major order) and returns the responsibilities with the total log-likelihood.
    pub fn from_log_terms(log_terms: &[f64], components: usize) -> (Self, f64) {
        let n = log_terms.len() / components;
        let mut values = DMatrix::zeros(components, n);
        let mut ll = 0.0;
        for r in 0..n {
            let row = &log_terms[r * components..(r + 1) * components];
            let norm = log_sum_exp(row);
            ll += norm;
            for j in 0..components {
                values[(j, r)] = (row[j] - norm).exp();
            }
        }
        (Self { values }, ll)
    }

    pub fn components(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn get(&self, j: usize, n: usize) -> f64 {
        self.values[(j, n)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `N_j = sum_n Q[j, n]`, failing on collapsed components.
    pub fn masses(&self) -> Result<Vec<f64>> {
        (0..self.components())
            .map(|j| {
                let mass = self.values.row(j).sum();
                if mass < COLLAPSE_MASS {
                    Err(Error::ComponentCollapse { component: j, mass })
                } else {
                    Ok(mass)
                }
            })
            .collect()
    }

    /// `c_n = Q[j, n] / N_j` for one component.
    pub fn normalized(&self, j: usize, mass: f64) -> Vec<f64> {
        self.values.row(j).iter().map(|q| q / mass).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub components: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub covariance_floor: f64,
    pub seed: u64,
    pub init: String,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 3,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            covariance_floor: DEFAULT_COVARIANCE_FLOOR,
            seed: 0,
            init: KMeansPlusPlus::NAME.to_string(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidInput(
                "component count must be positive".into(),
            ));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if self.covariance_floor.is_nan() || self.covariance_floor < 0.0 {
            return Err(Error::InvalidInput(
                "covariance floor must be nonnegative".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "max iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_data(data: &DMatrix<f64>) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "data contains NaN or infinite values".into(),
        ));
    }
    Ok(())
}

/// Responsibilities and the log-likelihood of `params` on `data` (rows are observations).
pub fn e_step_with_likelihood(
    data: &DMatrix<f64>,
    params: &GmmParams,
) -> Result<(Responsibilities, f64)> {
    check_data(data)?;
    if data.ncols() != params.dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, mixture has dimension {}",
            data.ncols(),
            params.dim()
        )));
    }
    let eval = params.evaluator()?;
    let j = params.components();
    let mut terms = vec![0.0; data.nrows() * j];
    let mut row = vec![0.0; data.ncols()];
    for n in 0..data.nrows() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = data[(n, k)];
        }
        eval.joint_log_terms(&row, &mut terms[n * j..(n + 1) * j]);
    }
    Ok(Responsibilities::from_log_terms(&terms, j))
}

pub fn e_step(data: &DMatrix<f64>, params: &GmmParams) -> Result<Responsibilities> {
    Ok(e_step_with_likelihood(data, params)?.0)
}

/// Symmetrizes and raises every eigenvalue to at least `floor`.
pub fn condition_covariance(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(cov: &DMatrix<f64>) -> f64 {
    let sym = (cov + cov.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Builds validated parameters from raw moments, conditioning each covariance.
pub fn assemble_params(
    masses: &[f64],
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    floor: f64,
) -> Result<GmmParams> {
    let total: f64 = masses.iter().sum();
    let weights = masses.iter().map(|m| m / total).collect();
    let covs = covariances
        .iter()
        .map(|c| condition_covariance(c, floor))
        .collect();
    GmmParams::new(weights, means, covs)
}

pub fn m_step(data: &DMatrix<f64>, resp: &Responsibilities, floor: f64) -> Result<GmmParams> {
    check_data(data)?;
    if resp.len() != data.nrows() {
        return Err(Error::Dimension(format!(
            "{} responsibilities for {} rows",
            resp.len(),
            data.nrows()
        )));
    }
    let d = data.ncols();
    let masses = resp.masses()?;
    let mut means = Vec::with_capacity(masses.len());
    let mut covs = Vec::with_capacity(masses.len());
    for (j, &mass) in masses.iter().enumerate() {
        let c = resp.normalized(j, mass);
        let mut mu = DVector::zeros(d);
        for (n, cn) in c.iter().enumerate() {
            for k in 0..d {
                mu[k] += cn * data[(n, k)];
            }
        }
        let mut s = DMatrix::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (n, cn) in c.iter().enumerate() {
            for k in 0..d {
                diff[k] = data[(n, k)] - mu[k];
            }
            for a in 0..d {
                let f = cn * diff[a];
                for b in a..d {
                    s[(a, b)] += f * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        means.push(mu);
        covs.push(s);
    }
    assemble_params(&masses, means, covs, floor)
}

/// Squared Euclidean distances between observations, however they are obtained.
pub trait DistanceOracle {
    fn rows(&self) -> usize;
    /// Squared distance from every row to row `seed`.
    fn squared_distances_to(&mut self, seed: usize) -> Result<Vec<f64>>;
}

/// Distances computed from the full stacked data.
pub struct DataDistances<'a> {
    data: &'a DMatrix<f64>,
}

impl<'a> DataDistances<'a> {
    pub fn new(data: &'a DMatrix<f64>) -> Self {
        Self { data }
    }
}

impl DistanceOracle for DataDistances<'_> {
    fn rows(&self) -> usize {
        self.data.nrows()
    }

    fn squared_distances_to(&mut self, seed: usize) -> Result<Vec<f64>> {
        let d = self.data;
        Ok((0..d.nrows())
            .map(|n| {
                (0..d.ncols())
                    .map(|k| (d[(n, k)] - d[(seed, k)]).powi(2))
                    .sum()
            })
            .collect())
    }
}

/// Produces an initial hard partition of the rows into `components` groups.
pub trait InitStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn partition(
        &self,
        oracle: &mut dyn DistanceOracle,
        components: usize,
        seed: u64,
    ) -> Result<Vec<usize>>;
}

/// D^2-weighted seeding followed by nearest-seed assignment.
pub struct KMeansPlusPlus;

impl KMeansPlusPlus {
    pub const NAME: &'static str = "kmeans++";
}

impl InitStrategy for KMeansPlusPlus {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn partition(
        &self,
        oracle: &mut dyn DistanceOracle,
        components: usize,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let n = oracle.rows();
        let mut rng = rng::rng_for(seed, "init/kmeans++");
        let first = rng.gen_range(0..n);
        let mut dists = vec![oracle.squared_distances_to(first)?];
        let mut nearest = dists[0].clone();
        for _ in 1..components {
            let total: f64 = nearest.iter().sum();
            if total.is_nan() || total <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "only {} distinct rows; cannot seed {components} components",
                    dists.len()
                )));
            }
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while nearest[pick] <= 0.0 {
                pick -= 1;
            }
            let next = oracle.squared_distances_to(pick)?;
            for (a, b) in nearest.iter_mut().zip(&next) {
                *a = a.min(*b);
            }
            dists.push(next);
        }
        Ok((0..n)
            .map(|r| {
                let mut best = 0;
                for j in 1..components {
                    if dists[j][r] < dists[best][r] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Shuffled round-robin labels; every group is nonempty when `N >= J`.
pub struct RandomPartition;

impl RandomPartition {
    pub const NAME: &'static str = "random-partition";
}

impl InitStrategy for RandomPartition {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn partition(
        &self,
        oracle: &mut dyn DistanceOracle,
        components: usize,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let mut labels: Vec<usize> = (0..oracle.rows()).map(|r| r % components).collect();
        labels.shuffle(&mut rng::rng_for(seed, "init/random-partition"));
        Ok(labels)
    }
}

/// Initialization strategies selectable by name.
pub struct InitRegistry {
    entries: BTreeMap<&'static str, Box<dyn InitStrategy>>,
}

impl Default for InitRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Box::new(KMeansPlusPlus));
        r.register(Box::new(RandomPartition));
        r
    }
}

impl InitRegistry {
    pub fn register(&mut self, strategy: Box<dyn InitStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn InitStrategy> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "init strategy",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

/// Replaces fitted weights with uniform ones and every covariance with the
/// mass-weighted pool of the group covariances.
pub fn pool_initial(grouped: &GmmParams, floor: f64) -> Result<GmmParams> {
    let j = grouped.components();
    let d = grouped.dim();
    let mut pooled = DMatrix::zeros(d, d);
    for (w, s) in grouped.weights().iter().zip(grouped.covariances()) {
        pooled += s * *w;
    }
    let pooled = condition_covariance(&pooled, floor);
    GmmParams::new(
        vec![1.0 / j as f64; j],
        grouped.means().to_vec(),
        vec![pooled; j],
    )
}

/// Initial parameters from the configured strategy on the stacked data.
pub fn initialize(
    data: &DMatrix<f64>,
    config: &EmConfig,
    registry: &InitRegistry,
) -> Result<GmmParams> {
    let strategy = registry.get(&config.init)?;
    let labels = strategy.partition(
        &mut DataDistances::new(data),
        config.components,
        config.seed,
    )?;
    let resp = Responsibilities::from_labels(&labels, config.components);
    pool_initial(
        &m_step(data, &resp, config.covariance_floor)?,
        config.covariance_floor,
    )
}

/// Tracks the log-likelihood sequence and decides convergence the same way for
/// every fitter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub log_likelihood: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl Trace {
    /// Records the log-likelihood of the current parameters and reports whether the
    /// relative change from the previous one is within `tolerance`.
    pub fn record(&mut self, ll: f64, tolerance: f64) -> bool {
        self.record_with_slack(ll, tolerance, MONOTONE_SLACK)
    }

    /// As [`Trace::record`], reporting decreases only beyond `slack` relative.
    pub fn record_with_slack(&mut self, ll: f64, tolerance: f64, slack: f64) -> bool {
        let converged = match self.log_likelihood.last() {
            Some(&prev) => {
                if ll < prev - slack * prev.abs().max(1.0) {
                    self.diagnostics.push(format!(
                        "internal: log-likelihood decreased at iteration {} ({prev} -> {ll})",
                        self.log_likelihood.len()
                    ));
                }
                (ll - prev).abs() <= tolerance * prev.abs()
            }
            None => false,
        };
        self.log_likelihood.push(ll);
        converged
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.log_likelihood
            .windows(2)
            .all(|w| w[1] >= w[0] - slack * w[0].abs().max(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: GmmParams,
    pub trace: Trace,
    pub converged: bool,
    /// Parameter sets in order, starting from the initialization.
    #[serde(skip)]
    pub iterates: Vec<GmmParams>,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }
}

pub fn fit(data: &DMatrix<f64>, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    check_data(data)?;
    if data.nrows() <= config.components {
        return Err(Error::InvalidInput(format!(
            "need more rows ({}) than components ({})",
            data.nrows(),
            config.components
        )));
    }
    let init = initialize(data, config, &InitRegistry::default())?;
    fit_from(data, init, config)
}

/// EM from given initial parameters.
pub fn fit_from(data: &DMatrix<f64>, init: GmmParams, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    let mut params = init;
    let mut trace = Trace::default();
    let mut iterates = vec![params.clone()];
    let mut converged = false;
    for _ in 0..=config.max_iterations {
        let (resp, ll) = e_step_with_likelihood(data, &params)?;
        if trace.record(ll, config.tolerance) {
            converged = true;
            break;
        }
        if iterates.len() > config.max_iterations {
            break;
        }
        params = m_step(data, &resp, config.covariance_floor)?;
        iterates.push(params.clone());
    }
    Ok(FitResult {
        params,
        trace,
        converged,
        iterates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub components: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub parameters: usize,
}

/// Fits each candidate component count and scores it; returns the table and the
/// index of the minimum.
pub fn select_components(
    data: &DMatrix<f64>,
    candidates: &[usize],
    config: &EmConfig,
) -> Result<(Vec<BicEntry>, usize)> {
    let mut table = Vec::with_capacity(candidates.len());
    for &j in candidates {
        let cfg = EmConfig {
            components: j,
            ..config.clone()
        };
        let res = fit(data, &cfg)?;
        let ll = *res
            .trace
            .log_likelihood
            .last()
            .expect("at least one e-step");
        let k = free_parameters(j, data.ncols());
        table.push(BicEntry {
            components: j,
            bic: -2.0 * ll + k as f64 * (data.nrows() as f64).ln(),
            log_likelihood: ll,
            parameters: k,
        });
    }
    let best = (0..table.len())
        .min_by(|&a, &b| table[a].bic.total_cmp(&table[b].bic))
        .ok_or_else(|| Error::InvalidInput("no candidate component counts".into()))?;
    Ok((table, best))
}
