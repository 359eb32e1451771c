//! Ground-truth sparse graphs, precision matrices and observation samplers.
//!
//! Four families are supported:
//!
//! * `uniform-sparse`: `Θ = L Lᵀ` with a sparse unit lower-triangular `L`;
//!   this is the training prior.
//! * `small-world`: a Watts–Strogatz ring lattice with random rewiring,
//!   weighted and made diagonally dominant.
//! * `er-substitute`: Erdős–Rényi support with the same weighting; an
//!   independent code path used as the held-out test generator.
//! * `laplace`: `er-substitute` precisions with heavy-tailed observations
//!   drawn from an exponential scale mixture of Gaussians.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    back_substitute_transposed, empirical_covariance, partial_corr_from_precision, standardize,
    LinalgError, Matrix, SpdMatrix, SymmetricMatrix,
};
use crate::seed::{derive_rng, rng_from_seed};

/// Threshold below which a precision entry counts as structurally zero.
pub const SUPPORT_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("alpha calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("could not draw non-degenerate data after {0} attempts")]
    TooManyRetries(usize),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFamily {
    UniformSparse,
    SmallWorld,
    ErSubstitute,
    Laplace,
}

impl GraphFamily {
    pub fn tag(self) -> u8 {
        match self {
            GraphFamily::UniformSparse => 0,
            GraphFamily::SmallWorld => 1,
            GraphFamily::ErSubstitute => 2,
            GraphFamily::Laplace => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => GraphFamily::UniformSparse,
            1 => GraphFamily::SmallWorld,
            2 => GraphFamily::ErSubstitute,
            3 => GraphFamily::Laplace,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphFamily::UniformSparse => "uniform-sparse",
            GraphFamily::SmallWorld => "small-world",
            GraphFamily::ErSubstitute => "er-substitute",
            GraphFamily::Laplace => "laplace",
        }
    }
}

impl fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphFamily {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        [GraphFamily::UniformSparse, GraphFamily::SmallWorld, GraphFamily::ErSubstitute, GraphFamily::Laplace]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SimError::InvalidConfig(format!("unknown family {s:?}")))
    }
}

/// Observation distribution given a precision matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataDistribution {
    Gaussian,
    Laplace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub p: usize,
    pub n: usize,
    pub family: GraphFamily,
    /// Probability that an off-diagonal entry of `L` is zero (uniform-sparse).
    pub alpha: f64,
    /// Bound of the uniform weights.
    pub c: f64,
    /// Ring-lattice degree (small-world); must be even.
    pub neighbors: usize,
    /// Rewiring probability (small-world).
    pub rewire: f64,
    /// Edge probability (er-substitute, laplace).
    pub edge_prob: f64,
    /// Diagonal-dominance margin added to row absolute sums.
    pub margin: f64,
    pub draws_per_theta: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn uniform_sparse(p: usize, n: usize, alpha: f64, seed: u64) -> Self {
        Self {
            p,
            n,
            family: GraphFamily::UniformSparse,
            alpha,
            c: 0.5,
            neighbors: 2,
            rewire: 0.1,
            edge_prob: 0.05,
            margin: 0.1,
            draws_per_theta: 5,
            seed,
        }
    }

    /// Random-graph test scenario: Erdős–Rényi support at edge probability
    /// 0.06 (about 94% sparse), weights in ±0.15, dominance margin 0.1.
    /// These constants put glasso-CV at p = 39, n = 35 near AUC 0.65 and
    /// Prec@5% near 0.34.
    pub fn gaussian_random_graphs(p: usize, n: usize, seed: u64) -> Self {
        Self { c: 0.15, edge_prob: 0.06, margin: 0.1, ..Self::uniform_sparse(p, n, 0.0, seed) }
            .with_family(GraphFamily::ErSubstitute)
    }

    pub fn with_family(mut self, family: GraphFamily) -> Self {
        self.family = family;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.p < 2 {
            return bad(format!("p = {} (need at least 2)", self.p));
        }
        if self.n < 2 {
            return bad(format!("n = {} (need at least 2)", self.n));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c = {} (need c > 0)", self.c));
        }
        if self.draws_per_theta < 1 {
            return bad("draws_per_theta must be at least 1".into());
        }
        if !(self.margin > 0.0) {
            return bad(format!("margin = {} (need > 0)", self.margin));
        }
        match self.family {
            GraphFamily::UniformSparse => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return bad(format!("alpha = {} (need 0 < alpha < 1)", self.alpha));
                }
            }
            GraphFamily::SmallWorld => {
                if self.neighbors % 2 != 0 || self.neighbors == 0 || self.neighbors >= self.p {
                    return bad(format!("neighbors = {} (need even, 0 < k < p)", self.neighbors));
                }
                if !(0.0..=1.0).contains(&self.rewire) {
                    return bad(format!("rewire = {} (need 0 <= beta <= 1)", self.rewire));
                }
            }
            GraphFamily::ErSubstitute | GraphFamily::Laplace => {
                if !(0.0..=1.0).contains(&self.edge_prob) {
                    return bad(format!("edge_prob = {} (need 0 <= q <= 1)", self.edge_prob));
                }
            }
        }
        Ok(())
    }

    pub fn distribution(&self) -> DataDistribution {
        match self.family {
            GraphFamily::Laplace => DataDistribution::Laplace,
            _ => DataDistribution::Gaussian,
        }
    }
}

/// Undirected simple graph on `p` nodes, edges stored as sorted `(i, j)` with `i < j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSample {
    pub p: usize,
    pub edges: Vec<(usize, usize)>,
}

impl GraphSample {
    pub fn max_edges(&self) -> usize {
        self.p * (self.p - 1) / 2
    }

    pub fn density(&self) -> f64 {
        self.edges.len() as f64 / self.max_edges() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.p];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let mut a = vec![vec![false; self.p]; self.p];
        for &(i, j) in &self.edges {
            a[i][j] = true;
            a[j][i] = true;
        }
        a
    }

    /// Edge indicators in upper-triangle order.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.max_edges()];
        for &(i, j) in &self.edges {
            out[edge_index(self.p, i, j)] = true;
        }
        out
    }

    fn from_adjacency(adj: &[Vec<bool>]) -> Self {
        let p = adj.len();
        let edges = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).filter(|&(i, j)| adj[i][j]).collect();
        Self { p, edges }
    }
}

/// Position of edge `(i, j)`, `i < j`, in the row-major strict upper triangle.
#[inline]
pub fn edge_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < p);
    i * (2 * p - i - 1) / 2 + (j - i - 1)
}

/// Inverse of [`edge_index`].
pub fn edge_pair(p: usize, mut e: usize) -> (usize, usize) {
    for i in 0..p {
        let row = p - i - 1;
        if e < row {
            return (i, i + 1 + e);
        }
        e -= row;
    }
    panic!("edge index out of range for p = {p}");
}

#[derive(Clone, Debug)]
pub struct PrecisionSample {
    pub theta: SpdMatrix,
    pub graph: GraphSample,
    /// `|partial correlation|` off the diagonal, zero on it.
    pub soft_labels: SymmetricMatrix,
}

impl PrecisionSample {
    pub fn from_theta(theta: SpdMatrix) -> Self {
        let p = theta.dim();
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if theta.get(i, j).abs() > SUPPORT_EPS {
                    edges.push((i, j));
                }
            }
        }
        let pc = partial_corr_from_precision(theta.as_symmetric());
        let mut soft = Matrix::zeros(p, p);
        for &(i, j) in &edges {
            let v = pc.get(i, j).abs();
            soft[(i, j)] = v;
            soft[(j, i)] = v;
        }
        let soft_labels = SymmetricMatrix::new(soft).expect("filled symmetrically");
        Self { theta, graph: GraphSample { p, edges }, soft_labels }
    }

    pub fn p(&self) -> usize {
        self.theta.dim()
    }

    pub fn y_binary(&self) -> Vec<bool> {
        self.graph.indicator()
    }

    pub fn y_soft(&self) -> Vec<f64> {
        self.soft_labels.upper_values()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub sigma_hat: SymmetricMatrix,
    pub y_binary: Vec<bool>,
    pub y_soft: Vec<f64>,
}

impl TrainingExample {
    pub fn p(&self) -> usize {
        self.sigma_hat.dim()
    }
}

fn sample_weight<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    loop {
        let w = rng.gen_range(-c..c);
        if w.abs() > SUPPORT_EPS {
            return w;
        }
    }
}

/// Unit lower-triangular `L` with sparse off-diagonal, then `Θ = L Lᵀ`.
pub fn sample_sparse_precision<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> PrecisionSample {
    let p = cfg.p;
    let mut l = Matrix::identity(p);
    for i in 0..p {
        for j in 0..i {
            // draw both numbers unconditionally so the stream layout is alpha-independent
            let u: f64 = rng.gen();
            let w = sample_weight(cfg.c, rng);
            if u >= cfg.alpha {
                l[(i, j)] = w;
            }
        }
    }
    let theta = l.matmul(&l.transpose()).expect("square");
    let theta = SymmetricMatrix::symmetrize(&theta).expect("square");
    PrecisionSample::from_theta(SpdMatrix::new(theta).expect("unit lower-triangular factor is nonsingular"))
}

fn sparsity_of_llt(l: &Matrix) -> f64 {
    let p = l.rows();
    let mut zeros = 0usize;
    for i in 0..p {
        for j in i + 1..p {
            let v: f64 = (0..=i).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if v.abs() <= SUPPORT_EPS {
                zeros += 1;
            }
        }
    }
    zeros as f64 / (p * (p - 1) / 2) as f64
}

/// Bisection on `alpha` so that the mean sparsity of `L Lᵀ` over 100 draws
/// hits `target_sparsity` within 0.01.
///
/// The 100 draws reuse the same uniforms for every trial `alpha`, which makes
/// the estimated sparsity monotone in `alpha`.
pub fn calibrate_alpha<R: Rng + ?Sized>(p: usize, target_sparsity: f64, rng: &mut R) -> Result<f64> {
    const DRAWS: usize = 100;
    if !(target_sparsity > 0.5 && target_sparsity < 1.0) {
        return Err(SimError::CalibrationFailed(format!("target {target_sparsity} outside (0.5, 1)")));
    }
    if p < 2 {
        return Err(SimError::CalibrationFailed("p < 2".into()));
    }
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..DRAWS)
        .map(|_| {
            let m = p * (p - 1) / 2;
            let us = (0..m).map(|_| rng.gen::<f64>()).collect();
            let ws = (0..m).map(|_| sample_weight(0.5, rng)).collect();
            (us, ws)
        })
        .collect();
    let mean_sparsity = |alpha: f64| -> f64 {
        let mut total = 0.0;
        let mut l = Matrix::identity(p);
        for (us, ws) in &draws {
            let mut k = 0;
            for i in 0..p {
                for j in 0..i {
                    l[(i, j)] = if us[k] >= alpha { ws[k] } else { 0.0 };
                    k += 1;
                }
            }
            total += sparsity_of_llt(&l);
        }
        total / DRAWS as f64
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if mean_sparsity(lo) > target_sparsity {
        return Err(SimError::CalibrationFailed(format!("dense limit already sparser than {target_sparsity}")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_sparsity(mid) < target_sparsity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let candidates = [lo, hi];
    let best = candidates
        .into_iter()
        .map(|a| (a, mean_sparsity(a)))
        .min_by(|x, y| (x.1 - target_sparsity).abs().total_cmp(&(y.1 - target_sparsity).abs()))
        .expect("two candidates");
    if (best.1 - target_sparsity).abs() > 0.01 || !(best.0 > 0.0 && best.0 < 1.0) {
        return Err(SimError::CalibrationFailed(format!(
            "closest achievable sparsity {:.4} at alpha {:.6} misses target {target_sparsity} by more than 0.01",
            best.1, best.0
        )));
    }
    Ok(best.0)
}

/// Weights `Uniform(-c, c)` on edges, diagonal set to row absolute sum plus `margin`.
pub fn precision_from_graph<R: Rng + ?Sized>(graph: &GraphSample, c: f64, margin: f64, rng: &mut R) -> PrecisionSample {
    let p = graph.p;
    let mut theta = Matrix::zeros(p, p);
    for &(i, j) in &graph.edges {
        let w = sample_weight(c, rng);
        theta[(i, j)] = w;
        theta[(j, i)] = w;
    }
    for i in 0..p {
        let s: f64 = theta.row(i).iter().map(|v| v.abs()).sum();
        theta[(i, i)] = s + margin;
    }
    let theta = SymmetricMatrix::new(theta).expect("filled symmetrically");
    PrecisionSample::from_theta(SpdMatrix::new(theta).expect("strictly diagonally dominant"))
}

/// Watts–Strogatz graph: ring lattice of degree `k`, each lattice edge rewired
/// with probability `beta` to a uniformly chosen non-neighbor.
pub fn watts_strogatz<R: Rng + ?Sized>(p: usize, k: usize, beta: f64, rng: &mut R) -> GraphSample {
    let mut adj = vec![vec![false; p]; p];
    for u in 0..p {
        for s in 1..=k / 2 {
            let v = (u + s) % p;
            adj[u][v] = true;
            adj[v][u] = true;
        }
    }
    for s in 1..=k / 2 {
        for u in 0..p {
            let v = (u + s) % p;
            if !adj[u][v] || rng.gen::<f64>() >= beta {
                continue;
            }
            let candidates: Vec<usize> = (0..p).filter(|&w| w != u && !adj[u][w]).collect();
            if let Some(&w) = candidates.choose(rng) {
                adj[u][v] = false;
                adj[v][u] = false;
                adj[u][w] = true;
                adj[w][u] = true;
            }
        }
    }
    GraphSample::from_adjacency(&adj)
}

pub fn sample_small_world_precision<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> PrecisionSample {
    let graph = watts_strogatz(cfg.p, cfg.neighbors, cfg.rewire, rng);
    precision_from_graph(&graph, cfg.c, cfg.margin, rng)
}

pub fn erdos_renyi<R: Rng + ?Sized>(p: usize, q: f64, rng: &mut R) -> GraphSample {
    let mut edges = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if rng.gen::<f64>() < q {
                edges.push((i, j));
            }
        }
    }
    GraphSample { p, edges }
}

pub fn sample_er_substitute<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> PrecisionSample {
    let graph = erdos_renyi(cfg.p, cfg.edge_prob, rng);
    precision_from_graph(&graph, cfg.c, cfg.margin, rng)
}

/// Draws a precision matrix from the configured family.
pub fn sample_precision<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> PrecisionSample {
    match cfg.family {
        GraphFamily::UniformSparse => sample_sparse_precision(cfg, rng),
        GraphFamily::SmallWorld => sample_small_world_precision(cfg, rng),
        GraphFamily::ErSubstitute | GraphFamily::Laplace => sample_er_substitute(cfg, rng),
    }
}

fn gaussian_rows<R: Rng + ?Sized>(
    theta: &SpdMatrix,
    n: usize,
    rng: &mut R,
    mut scale: impl FnMut(&mut R) -> f64,
) -> Matrix {
    let p = theta.dim();
    let l = theta.cholesky_factor();
    let mut x = Matrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for r in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        back_substitute_transposed(l, &mut z);
        let s = scale(rng);
        for (dst, &v) in x.row_mut(r).iter_mut().zip(&z) {
            *dst = s * v;
        }
    }
    x
}

/// Rows i.i.d. `N(0, Θ⁻¹)` via `Lᵀ x = z`.
pub fn sample_gaussian<R: Rng + ?Sized>(theta: &SpdMatrix, n: usize, rng: &mut R) -> Matrix {
    gaussian_rows(theta, n, rng, |_| 1.0)
}

/// Rows `√w · s` with `s ~ N(0, Θ⁻¹)` and `w ~ Exp(1)`.
pub fn sample_laplace<R: Rng + ?Sized>(theta: &SpdMatrix, n: usize, rng: &mut R) -> Matrix {
    gaussian_rows(theta, n, rng, |r| {
        let w: f64 = Exp1.sample(r);
        w.sqrt()
    })
}

pub fn sample_data<R: Rng + ?Sized>(theta: &SpdMatrix, n: usize, dist: DataDistribution, rng: &mut R) -> Matrix {
    match dist {
        DataDistribution::Gaussian => sample_gaussian(theta, n, rng),
        DataDistribution::Laplace => sample_laplace(theta, n, rng),
    }
}

const MAX_DEGENERATE_RETRIES: usize = 10;

/// Standardized covariance of `n` fresh rows, redrawing degenerate samples.
pub fn draw_covariance<R: Rng + ?Sized>(
    theta: &SpdMatrix,
    n: usize,
    dist: DataDistribution,
    rng: &mut R,
) -> Result<SymmetricMatrix> {
    for _ in 0..MAX_DEGENERATE_RETRIES {
        match standardize(&sample_data(theta, n, dist, rng)) {
            Ok(z) => return Ok(empirical_covariance(&z)),
            Err(LinalgError::DegenerateColumn(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(SimError::TooManyRetries(MAX_DEGENERATE_RETRIES))
}

pub fn make_training_examples<R: Rng + ?Sized>(
    ps: &PrecisionSample,
    n: usize,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    make_examples_with(ps, n, draws, DataDistribution::Gaussian, rng)
}

pub fn make_examples_with<R: Rng + ?Sized>(
    ps: &PrecisionSample,
    n: usize,
    draws: usize,
    dist: DataDistribution,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    if draws < 1 {
        return Err(SimError::InvalidConfig("draws must be at least 1".into()));
    }
    let y_binary = ps.y_binary();
    let y_soft = ps.y_soft();
    (0..draws)
        .map(|_| {
            Ok(TrainingExample {
                sigma_hat: draw_covariance(&ps.theta, n, dist, rng)?,
                y_binary: y_binary.clone(),
                y_soft: y_soft.clone(),
            })
        })
        .collect()
}

/// Deterministic, random-access sequence of training examples.
///
/// Example `k` shares its precision matrix with the other draws of the same
/// `k / draws_per_theta` block, and is a pure function of `(seed, k)`.
#[derive(Clone, Debug)]
pub struct DatasetStream {
    cfg: GeneratorConfig,
    label: &'static str,
    next: u64,
}

impl DatasetStream {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        Self::with_label(cfg, "train")
    }

    /// Stream in a separate seed namespace (validation sets use `"val"`).
    pub fn with_label(cfg: GeneratorConfig, label: &'static str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, label, next: 0 })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn precision_at(&self, block: u64) -> PrecisionSample {
        let mut rng = derive_rng(self.cfg.seed, &format!("{}/theta", self.label), block);
        sample_precision(&self.cfg, &mut rng)
    }

    pub fn example_at(&self, k: u64) -> Result<TrainingExample> {
        let block = k / self.cfg.draws_per_theta as u64;
        let ps = self.precision_at(block);
        let mut rng = derive_rng(self.cfg.seed, &format!("{}/draw", self.label), k);
        let mut ex = make_examples_with(&ps, self.cfg.n, 1, self.cfg.distribution(), &mut rng)?;
        Ok(ex.pop().expect("one draw"))
    }

    pub fn take_examples(&mut self, count: usize) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::with_capacity(count);
        let dpt = self.cfg.draws_per_theta as u64;
        let mut cached: Option<(u64, PrecisionSample)> = None;
        for _ in 0..count {
            let k = self.next;
            let block = k / dpt;
            if cached.as_ref().map(|c| c.0) != Some(block) {
                cached = Some((block, self.precision_at(block)));
            }
            let ps = &cached.as_ref().expect("just set").1;
            let mut rng = derive_rng(self.cfg.seed, &format!("{}/draw", self.label), k);
            out.extend(make_examples_with(ps, self.cfg.n, 1, self.cfg.distribution(), &mut rng)?);
            self.next += 1;
        }
        Ok(out)
    }
}

impl Iterator for DatasetStream {
    type Item = Result<TrainingExample>;
    fn next(&mut self) -> Option<Self::Item> {
        let ex = self.example_at(self.next);
        self.next += 1;
        Some(ex)
    }
}

/// Draws `count` precision samples from the config's family in its own seed space.
pub fn sample_precisions(cfg: &GeneratorConfig, label: &str, count: usize) -> Vec<PrecisionSample> {
    (0..count as u64)
        .map(|k| {
            let mut rng = derive_rng(cfg.seed, label, k);
            sample_precision(cfg, &mut rng)
        })
        .collect()
}

/// One-shot random generator for callers that just need a seeded stream.
pub fn seeded(seed: u64) -> crate::seed::Rng {
    rng_from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, inverse_spd};

    fn rng(seed: u64) -> crate::seed::Rng {
        rng_from_seed(seed)
    }

    fn chain_theta() -> SpdMatrix {
        SpdMatrix::from_matrix(
            Matrix::from_rows(&[vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]]).unwrap(),
        )
        .unwrap()
    }

    fn sample_cov(x: &Matrix) -> Matrix {
        let n = x.rows() as f64;
        x.transpose().matmul(x).unwrap().scale(1.0 / n)
    }

    fn check_sample(ps: &PrecisionSample) {
        assert!(cholesky(ps.theta.as_symmetric()).is_ok());
        let p = ps.p();
        let support: Vec<(usize, usize)> = (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .filter(|&(i, j)| ps.theta.get(i, j).abs() > SUPPORT_EPS)
            .collect();
        assert_eq!(support, ps.graph.edges);
        for (y, s) in ps.y_binary().iter().zip(ps.y_soft()) {
            assert!((0.0..=1.0).contains(&s));
            if *y {
                assert!(s > 0.0);
            } else {
                assert!(s < SUPPORT_EPS);
            }
        }
    }

    #[test]
    fn edge_index_round_trip() {
        let p = 7;
        let mut k = 0;
        for i in 0..p {
            for j in i + 1..p {
                assert_eq!(edge_index(p, i, j), k);
                assert_eq!(edge_pair(p, k), (i, j));
                k += 1;
            }
        }
    }

    #[test]
    fn alpha_limit_gives_identity() {
        let cfg = GeneratorConfig { alpha: 1.0 - 1e-15, ..GeneratorConfig::uniform_sparse(10, 20, 0.5, 0) };
        let ps = sample_sparse_precision(&cfg, &mut rng(1));
        assert_eq!(ps.theta.as_matrix(), &Matrix::identity(10));
        assert!(ps.graph.edges.is_empty());
    }

    #[test]
    fn every_family_yields_valid_samples() {
        for family in [GraphFamily::UniformSparse, GraphFamily::SmallWorld, GraphFamily::ErSubstitute, GraphFamily::Laplace] {
            let cfg = GeneratorConfig::uniform_sparse(20, 15, 0.9, 0).with_family(family);
            for seed in 0..500 {
                check_sample(&sample_precision(&cfg, &mut rng(seed)));
            }
        }
    }

    #[test]
    fn calibrated_alpha_hits_sparsity_band() {
        let alpha = calibrate_alpha(39, 0.94, &mut rng(5)).unwrap();
        assert!(alpha > 0.0 && alpha < 1.0);
        let cfg = GeneratorConfig::uniform_sparse(39, 35, alpha, 0);
        let mut r = rng(77);
        let mean: f64 = (0..200).map(|_| sample_sparse_precision(&cfg, &mut r).graph.sparsity()).sum::<f64>() / 200.0;
        assert!((0.93..=0.95).contains(&mean), "mean sparsity {mean}");
    }

    #[test]
    fn larger_alpha_is_sparser() {
        let mut means = Vec::new();
        for alpha in [0.9, 0.95, 0.99] {
            let cfg = GeneratorConfig::uniform_sparse(39, 35, alpha, 0);
            let mut r = rng(8);
            means.push((0..100).map(|_| sample_sparse_precision(&cfg, &mut r).graph.sparsity()).sum::<f64>() / 100.0);
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn calibration_rejects_bad_targets() {
        assert!(calibrate_alpha(39, 0.3, &mut rng(0)).is_err());
        // 10 off-diagonal cells: a 0.999 mean is hard to bracket within 0.01
        match calibrate_alpha(5, 0.999, &mut rng(0)) {
            Ok(a) => assert!(a > 0.9),
            Err(SimError::CalibrationFailed(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    fn clustering(g: &GraphSample) -> f64 {
        let adj = g.adjacency();
        let mut total = 0.0;
        for u in 0..g.p {
            let nb: Vec<usize> = (0..g.p).filter(|&v| adj[u][v]).collect();
            if nb.len() < 2 {
                continue;
            }
            let mut links = 0;
            for a in 0..nb.len() {
                for b in a + 1..nb.len() {
                    if adj[nb[a]][nb[b]] {
                        links += 1;
                    }
                }
            }
            total += links as f64 / (nb.len() * (nb.len() - 1) / 2) as f64;
        }
        total / g.p as f64
    }

    #[test]
    fn small_world_lattice_and_rewiring() {
        let g = watts_strogatz(39, 4, 0.0, &mut rng(0));
        assert!(g.degrees().iter().all(|&d| d == 4));
        assert_eq!(g.edges.len(), 39 * 2);
        let c0 = clustering(&g);

        let mut r = rng(1);
        let mut mean_deg = 0.0;
        let mut mean_c = 0.0;
        for _ in 0..100 {
            let g = watts_strogatz(39, 4, 1.0, &mut r);
            assert_eq!(g.edges.len(), 78);
            mean_deg += g.degrees().iter().sum::<usize>() as f64 / 39.0;
            mean_c += clustering(&g);
        }
        assert!((mean_deg / 100.0 - 4.0).abs() < 1e-12);
        assert!(mean_c / 100.0 < c0);
    }

    #[test]
    fn er_edge_frequency_and_empty_limit() {
        let cfg = GeneratorConfig { edge_prob: 0.0, ..GeneratorConfig::uniform_sparse(10, 10, 0.5, 0) }
            .with_family(GraphFamily::ErSubstitute);
        let ps = sample_er_substitute(&cfg, &mut rng(0));
        assert!(ps.graph.edges.is_empty());
        assert!(ps.y_soft().iter().all(|&v| v == 0.0));

        let cfg = GeneratorConfig { edge_prob: 0.05, ..cfg };
        let mut r = rng(4);
        let freq: f64 = (0..200).map(|_| sample_er_substitute(&cfg, &mut r).graph.density()).sum::<f64>() / 200.0;
        let cfg39 = GeneratorConfig { p: 39, ..cfg.clone() };
        let freq39: f64 = (0..200).map(|_| sample_er_substitute(&cfg39, &mut r).graph.density()).sum::<f64>() / 200.0;
        assert!((freq - 0.05).abs() < 0.02, "{freq}");
        assert!((freq39 - 0.05).abs() < 0.02, "{freq39}");
    }

    fn triangles(g: &GraphSample) -> usize {
        let adj = g.adjacency();
        let mut t = 0;
        for &(i, j) in &g.edges {
            t += (j + 1..g.p).filter(|&k| adj[i][k] && adj[j][k]).count();
        }
        t
    }

    #[test]
    fn llt_fill_in_creates_more_triangles_than_er() {
        let alpha = calibrate_alpha(39, 0.94, &mut rng(2)).unwrap();
        let cfg = GeneratorConfig::uniform_sparse(39, 35, alpha, 0);
        let mut r = rng(3);
        let mut tri_llt = 0;
        let mut density = 0.0;
        for _ in 0..200 {
            let ps = sample_sparse_precision(&cfg, &mut r);
            tri_llt += triangles(&ps.graph);
            density += ps.graph.density();
        }
        let er = GeneratorConfig { edge_prob: density / 200.0, ..cfg }.with_family(GraphFamily::ErSubstitute);
        let tri_er: usize = (0..200).map(|_| triangles(&sample_er_substitute(&er, &mut r).graph)).sum();
        assert!(tri_llt > 2 * tri_er, "LLt {tri_llt} vs ER {tri_er}");
    }

    #[test]
    fn gaussian_sampler_matches_covariance() {
        let eye = SpdMatrix::new(SymmetricMatrix::identity(4)).unwrap();
        let x = sample_gaussian(&eye, 100_000, &mut rng(10));
        assert!(sample_cov(&x).max_abs_diff(&Matrix::identity(4)) < 0.02);

        let theta = chain_theta();
        let x = sample_gaussian(&theta, 100_000, &mut rng(11));
        let truth = inverse_spd(theta.as_symmetric()).unwrap();
        assert!(sample_cov(&x).max_abs_diff(&truth) < 0.02);

        let one = sample_gaussian(&theta, 1, &mut rng(12));
        assert_eq!(one.rows(), 1);
        assert!(one.check_finite().is_ok());
    }

    #[test]
    fn laplace_sampler_moments() {
        let eye = SpdMatrix::new(SymmetricMatrix::identity(3)).unwrap();
        let n = 200_000;
        let x = sample_laplace(&eye, n, &mut rng(20));
        assert!(sample_cov(&x).max_abs_diff(&Matrix::identity(3)) < 0.02);
        for j in 0..3 {
            let col = x.column(j);
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let m4 = col.iter().map(|v| v.powi(4)).sum::<f64>() / n as f64;
            // E[w²]·3 / E[w]² − 3 = 3 for an Exp(1) mixer
            let excess = m4 / (m2 * m2) - 3.0;
            assert!((excess - 3.0).abs() < 0.3, "excess kurtosis {excess}");
        }
        let theta = chain_theta();
        let x = sample_laplace(&theta, n, &mut rng(21));
        assert!(sample_cov(&x).max_abs_diff(&inverse_spd(theta.as_symmetric()).unwrap()) < 0.02);
    }

    #[test]
    fn training_examples_share_labels() {
        let cfg = GeneratorConfig::uniform_sparse(15, 35, 0.9, 0);
        let ps = sample_sparse_precision(&cfg, &mut rng(30));
        let ex = make_training_examples(&ps, 35, 5, &mut rng(31)).unwrap();
        assert_eq!(ex.len(), 5);
        for e in &ex {
            assert_eq!(e.y_binary, ex[0].y_binary);
            assert_eq!(e.y_soft, ex[0].y_soft);
            for i in 0..15 {
                assert!((e.sigma_hat.get(i, i) - 1.0).abs() < 1e-10);
            }
        }
        assert_ne!(ex[0].sigma_hat, ex[1].sigma_hat);

        let eye = PrecisionSample::from_theta(SpdMatrix::new(SymmetricMatrix::identity(5)).unwrap());
        let ex = make_training_examples(&eye, 10, 1, &mut rng(0)).unwrap();
        assert!(ex[0].y_soft.iter().all(|&v| v == 0.0));
        assert!(make_training_examples(&eye, 10, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn large_n_covariance_approaches_truth() {
        let theta = chain_theta();
        let ps = PrecisionSample::from_theta(theta.clone());
        let ex = make_training_examples(&ps, 100_000, 1, &mut rng(40)).unwrap();
        let corr = crate::linalg::correlation_from_covariance(&inverse_spd(theta.as_symmetric()).unwrap());
        assert!(ex[0].sigma_hat.max_abs_diff(&corr) < 0.02);
    }

    #[test]
    fn stream_is_deterministic_and_random_access() {
        let cfg = GeneratorConfig::uniform_sparse(12, 10, 0.9, 42);
        let a: Vec<_> = DatasetStream::new(cfg.clone()).unwrap().take(100).map(Result::unwrap).collect();
        let b = DatasetStream::new(cfg.clone()).unwrap().take_examples(100).unwrap();
        assert_eq!(a, b);
        let s = DatasetStream::new(cfg.clone()).unwrap();
        assert_eq!(s.example_at(57).unwrap(), a[57]);
        // draws of one block share labels
        assert_eq!(a[5].y_soft, a[9].y_soft);

        let other = DatasetStream::new(GeneratorConfig { seed: 43, ..cfg.clone() }).unwrap().next().unwrap().unwrap();
        assert_ne!(other, a[0]);
        let val = DatasetStream::with_label(cfg, "val").unwrap().next().unwrap().unwrap();
        assert_ne!(val.sigma_hat, a[0].sigma_hat);
    }

    #[test]
    fn config_validation() {
        let ok = GeneratorConfig::uniform_sparse(39, 35, 0.98, 0);
        assert!(ok.validate().is_ok());
        assert!(GeneratorConfig { alpha: 1.0, ..ok.clone() }.validate().is_err());
        assert!(GeneratorConfig { c: 0.0, ..ok.clone() }.validate().is_err());
        assert!(GeneratorConfig { draws_per_theta: 0, ..ok.clone() }.validate().is_err());
        let sw = ok.clone().with_family(GraphFamily::SmallWorld);
        assert!(GeneratorConfig { neighbors: 3, ..sw.clone() }.validate().is_err());
        assert!(GeneratorConfig { neighbors: 40, ..sw }.validate().is_err());
        assert!("small-world".parse::<GraphFamily>().is_ok());
        assert!("smallworld".parse::<GraphFamily>().is_err());
    }
}
