//! Classical estimators: graphical lasso (plain and cross-validated),
//! partial-correlation thresholding, Ledoit–Wolf shrinkage, and the
//! maximum-likelihood precision refit on a fixed support.

use log::debug;
use thiserror::Error;

use crate::infer::EdgeScoreMatrix;
use crate::linalg::{
    cholesky, empirical_covariance, inverse_spd, standardize, LinalgError, Matrix,
    SpdMatrix, SymmetricMatrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("did not converge after {iterations} sweeps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("support is infeasible: submatrix over ({0}, {1}) is singular")]
    InfeasibleSupport(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlassoOptions {
    /// Convergence threshold on the largest precision change over a sweep,
    /// relative to `max(1, max θᵢᵢ)`.
    pub tol: f64,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 200, inner_tol: 1e-9, inner_max_iter: 2000 }
    }
}

impl GlassoOptions {
    /// Tolerances for repeated-trial comparisons, in line with common
    /// production solvers: `1e-4` on both loops and at most 100 sweeps.
    pub fn benchmark() -> Self {
        Self { tol: 1e-4, max_iter: 100, inner_tol: 1e-4, inner_max_iter: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct GlassoResult {
    pub theta: SpdMatrix,
    /// `Θ⁻¹` as maintained by the solver.
    pub covariance: SymmetricMatrix,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective after each sweep.
    pub objective_trace: Vec<f64>,
}

impl GlassoResult {
    /// `|partial correlation|` of the estimated precision.
    pub fn edge_scores(&self) -> EdgeScoreMatrix {
        EdgeScoreMatrix::abs_partial_corr(self.theta.as_symmetric())
    }

    /// Largest violation of the stationarity conditions over off-diagonal pairs.
    pub fn kkt_residual(&self, sigma: &SymmetricMatrix) -> f64 {
        glasso_kkt_residual(&self.theta, sigma, self.lambda)
    }
}

/// `-log|Θ| + tr(Σ̂Θ) + λ Σ_{i≠j} |θᵢⱼ|`.
pub fn glasso_objective(theta: &SpdMatrix, sigma: &SymmetricMatrix, lambda: f64) -> f64 {
    let p = theta.dim();
    let mut tr = 0.0;
    let mut l1 = 0.0;
    for i in 0..p {
        for j in 0..p {
            tr += sigma.get(i, j) * theta.get(i, j);
            if i != j {
                l1 += theta.get(i, j).abs();
            }
        }
    }
    -theta.log_det() + tr + lambda * l1
}

/// Worst off-diagonal stationarity violation of `(Θ⁻¹ − Σ̂)`: on the support the
/// residual must equal `λ·sign(θᵢⱼ)`, elsewhere its magnitude must not exceed `λ`.
pub fn glasso_kkt_residual(theta: &SpdMatrix, sigma: &SymmetricMatrix, lambda: f64) -> f64 {
    let w = theta.inverse();
    let p = theta.dim();
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in i + 1..p {
            let g = w.get(i, j) - sigma.get(i, j);
            let t = theta.get(i, j);
            let v = if t != 0.0 { (g - lambda * t.signum()).abs() } else { (g.abs() - lambda).max(0.0) };
            worst = worst.max(v);
        }
    }
    worst
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Graphical lasso with the default inner tolerances.
pub fn graphical_lasso(sigma: &SymmetricMatrix, lambda: f64, tol: f64, max_iter: usize) -> Result<GlassoResult> {
    graphical_lasso_with(sigma, lambda, &GlassoOptions { tol, max_iter, ..GlassoOptions::default() }, None)
}

/// Column-wise block coordinate descent on the penalized likelihood.
///
/// Each column update minimizes the objective exactly over the column's
/// off-diagonal block and its diagonal entry: the off-diagonal block solves a
/// lasso with Hessian `s_jj · (Θ₋ⱼ)⁻¹`, and `Θ⁻¹` is kept current with a
/// rank-one update. The diagonal is not penalized. `warm` supplies a starting
/// `(Θ, Θ⁻¹)` pair.
pub fn graphical_lasso_with(
    sigma: &SymmetricMatrix,
    lambda: f64,
    opts: &GlassoOptions,
    warm: Option<(&SymmetricMatrix, &SymmetricMatrix)>,
) -> Result<GlassoResult> {
    let p = sigma.dim();
    if !(lambda >= 0.0) {
        return Err(BaselineError::InvalidArgument(format!("lambda = {lambda}")));
    }
    if let Some(i) = (0..p).find(|&i| !(sigma.get(i, i) > 0.0)) {
        return Err(BaselineError::InvalidArgument(format!("non-positive variance at {i}")));
    }
    if lambda == 0.0 {
        // unpenalized problem has a solution only for nonsingular Σ̂
        cholesky(sigma)?;
    }
    let (mut theta, mut w) = match warm {
        Some((t, c)) => (t.as_matrix().clone(), c.as_matrix().clone()),
        None => {
            let d = sigma.diag();
            (Matrix::from_diag(&d.iter().map(|v| 1.0 / v).collect::<Vec<_>>()), Matrix::from_diag(&d))
        }
    };

    let m = p - 1;
    let mut a = vec![0.0; m * m];
    let mut x = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut w12 = vec![0.0; m];
    let mut idx = vec![0usize; m];
    let mut active = Vec::with_capacity(m);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for sweep in 0..opts.max_iter {
        iterations = sweep + 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = if k < j { k } else { k + 1 };
            }
            let s22 = sigma.get(j, j);
            let w22 = w[(j, j)];
            for (k, &r) in idx.iter().enumerate() {
                w12[k] = w[(r, j)];
                b[k] = sigma.get(r, j);
                x[k] = theta[(r, j)];
            }
            // A = s22 · (W11 − w12 w12ᵀ / w22) = s22 · Θ11⁻¹
            for (r, &ri) in idx.iter().enumerate() {
                let wrow = w.row(ri);
                let arow = &mut a[r * m..(r + 1) * m];
                for (c, &ci) in idx.iter().enumerate() {
                    arow[c] = s22 * (wrow[ci] - w12[r] * w12[c] / w22);
                }
            }
            for r in 0..m {
                g[r] = crate::linalg::dot(&a[r * m..(r + 1) * m], &x);
            }
            // lasso: min ½ xᵀAx + bᵀx + λ‖x‖₁, full passes alternating with
            // passes over the nonzero coordinates until a full pass is quiet
            let mut passes = 0;
            while passes < opts.inner_max_iter {
                passes += 1;
                if cd_pass(&a, &b, &mut x, &mut g, lambda, 0..m) < opts.inner_tol {
                    break;
                }
                active.clear();
                active.extend((0..m).filter(|&k| x[k] != 0.0));
                while passes < opts.inner_max_iter {
                    passes += 1;
                    if cd_pass(&a, &b, &mut x, &mut g, lambda, active.iter().copied()) < opts.inner_tol {
                        break;
                    }
                }
            }
            // U = Θ11⁻¹ x = g / s22
            let u: Vec<f64> = g.iter().map(|v| v / s22).collect();
            let theta22 = 1.0 / s22 + crate::linalg::dot(&x, &u);
            max_change = max_change.max((theta22 - theta[(j, j)]).abs());
            theta[(j, j)] = theta22;
            for (k, &r) in idx.iter().enumerate() {
                max_change = max_change.max((x[k] - theta[(r, j)]).abs());
                theta[(r, j)] = x[k];
                theta[(j, r)] = x[k];
            }
            for (r, &ri) in idx.iter().enumerate() {
                for (c, &ci) in idx.iter().enumerate().skip(r) {
                    let v = a[r * m + c] / s22 + s22 * u[r] * u[c];
                    w[(ri, ci)] = v;
                    w[(ci, ri)] = v;
                }
                w[(ri, j)] = -s22 * u[r];
                w[(j, ri)] = -s22 * u[r];
            }
            w[(j, j)] = s22;
        }
        let theta_spd = SpdMatrix::new(SymmetricMatrix::new(theta.clone())?)?;
        trace.push(glasso_objective(&theta_spd, sigma, lambda));
        let scale = (0..p).fold(1.0f64, |m, i| m.max(theta[(i, i)]));
        if max_change < opts.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("graphical lasso at lambda {lambda:.4e} stopped after {iterations} sweeps without converging");
    }
    let theta = SpdMatrix::new(SymmetricMatrix::new(theta)?)?;
    Ok(GlassoResult {
        theta,
        covariance: SymmetricMatrix::new(w)?,
        lambda,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// One coordinate-descent pass of the lasso `½ xᵀAx + bᵀx + λ‖x‖₁` over
/// `coords`, keeping `g = A x` current. Returns the largest coordinate move.
fn cd_pass(a: &[f64], b: &[f64], x: &mut [f64], g: &mut [f64], lambda: f64, coords: impl Iterator<Item = usize>) -> f64 {
    let m = x.len();
    let mut delta = 0.0f64;
    for k in coords {
        let akk = a[k * m + k];
        let old = x[k];
        let r = -b[k] - (g[k] - akk * old);
        let new = soft_threshold(r, lambda) / akk;
        if new != old {
            let d = new - old;
            x[k] = new;
            // A is symmetric: column k equals row k
            for (gi, &ak) in g.iter_mut().zip(&a[k * m..(k + 1) * m]) {
                *gi += d * ak;
            }
            delta = delta.max(d.abs());
        }
    }
    delta
}

/// Solutions along a decreasing `λ` path, each warm-started from the previous one.
/// Results are returned in the order of `grid`.
pub fn graphical_lasso_path(sigma: &SymmetricMatrix, grid: &[f64], opts: &GlassoOptions) -> Result<Vec<GlassoResult>> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut out: Vec<Option<GlassoResult>> = vec![None; grid.len()];
    let mut prev: Option<(SymmetricMatrix, SymmetricMatrix)> = None;
    for k in order {
        let warm = prev.as_ref().map(|(t, w)| (t, w));
        let res = graphical_lasso_with(sigma, grid[k], opts, warm)?;
        prev = Some((res.theta.as_symmetric().clone(), res.covariance.clone()));
        out[k] = Some(res);
    }
    Ok(out.into_iter().map(|r| r.expect("every grid point solved")).collect())
}

/// `count` log-spaced values spanning `[lo, hi] · max |off-diagonal Σ̂|`.
pub fn default_lambda_grid(sigma: &SymmetricMatrix, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let p = sigma.dim();
    let mut max_off = 0.0f64;
    for i in 0..p {
        for j in i + 1..p {
            max_off = max_off.max(sigma.get(i, j).abs());
        }
    }
    let max_off = if max_off > 0.0 { max_off } else { 1.0 };
    if count == 1 {
        return vec![hi * max_off];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| max_off * (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

#[derive(Clone, Debug)]
pub struct GlassoCvResult {
    pub result: GlassoResult,
    pub grid: Vec<f64>,
    /// Mean held-out log-likelihood per grid point.
    pub cv_scores: Vec<f64>,
}

/// Cross-validated graphical lasso: contiguous folds, held-out Gaussian
/// log-likelihood as the selection score, refit on all rows.
pub fn graphical_lasso_cv(data: &Matrix, folds: usize, grid: &[f64], opts: &GlassoOptions) -> Result<GlassoCvResult> {
    let n = data.rows();
    if folds < 2 || folds > n {
        return Err(BaselineError::InvalidArgument(format!("{folds} folds for {n} rows")));
    }
    if grid.is_empty() {
        return Err(BaselineError::InvalidArgument("empty lambda grid".into()));
    }
    let x = standardize(data)?;
    let full = empirical_covariance(&x);
    let mut cv_scores = vec![0.0; grid.len()];
    if grid.len() > 1 {
        for f in 0..folds {
            let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
            let train_idx: Vec<usize> = (0..n).filter(|r| !(lo..hi).contains(r)).collect();
            let test_idx: Vec<usize> = (lo..hi).collect();
            let (train_cov, mean) = centered_covariance(&x.select_rows(&train_idx));
            let mut test = x.select_rows(&test_idx);
            for r in 0..test.rows() {
                for (v, m) in test.row_mut(r).iter_mut().zip(&mean) {
                    *v -= m;
                }
            }
            let path = graphical_lasso_path(&train_cov, grid, opts)?;
            for (score, res) in cv_scores.iter_mut().zip(&path) {
                *score += holdout_loglik(&res.theta, &test) / folds as f64;
            }
        }
    }
    let best = (0..grid.len())
        .max_by(|&a, &b| cv_scores[a].total_cmp(&cv_scores[b]).then(grid[a].total_cmp(&grid[b])))
        .expect("nonempty grid");
    let result = graphical_lasso_with(&full, grid[best], opts, None)?;
    Ok(GlassoCvResult { result, grid: grid.to_vec(), cv_scores })
}

/// Column-centered `(1/n) XᵀX` and the column means.
pub fn centered_covariance(x: &Matrix) -> (SymmetricMatrix, Vec<f64>) {
    let n = x.rows();
    let mean: Vec<f64> = (0..x.cols()).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_fn(n, x.cols(), |i, j| x[(i, j)] - mean[j]);
    (empirical_covariance(&centered), mean)
}

/// Ridge used when `Σ̂` is too close to singular to invert directly.
pub fn default_ridge(sigma: &SymmetricMatrix) -> f64 {
    1e-3 * sigma.trace() / sigma.dim() as f64
}

/// `|partial correlation|` of `Σ̂⁻¹`, regularized by `ridge · I` only when the
/// smallest Cholesky pivot of `Σ̂` is below `1e-8`.
pub fn threshold_partial_corr(sigma: &SymmetricMatrix, ridge: f64) -> EdgeScoreMatrix {
    let needs_ridge = match cholesky(sigma) {
        Ok(l) => l.diag().iter().any(|d| d * d < 1e-8),
        Err(_) => true,
    };
    let precision = if needs_ridge {
        let p = sigma.dim();
        let reg = sigma.as_matrix().add(&Matrix::identity(p).scale(ridge));
        inverse_spd(&SymmetricMatrix::new(reg).expect("symmetric plus diagonal"))
    } else {
        inverse_spd(sigma)
    };
    let precision = precision.expect("ridge-regularized covariance is positive definite");
    EdgeScoreMatrix::abs_partial_corr(&precision)
}

#[derive(Clone, Debug)]
pub struct LedoitWolf {
    pub covariance: SymmetricMatrix,
    pub shrinkage: f64,
}

impl LedoitWolf {
    pub fn edge_scores(&self) -> EdgeScoreMatrix {
        let precision = inverse_spd(&self.covariance).expect("shrunk covariance is positive definite");
        EdgeScoreMatrix::abs_partial_corr(&precision)
    }
}

/// Shrinks the sample covariance toward `(tr Σ̂ / p) · I` with the
/// Ledoit–Wolf optimal intensity.
pub fn ledoit_wolf(data: &Matrix) -> Result<LedoitWolf> {
    let (n, p) = (data.rows(), data.cols());
    if n < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: n }.into());
    }
    let (s, mean) = centered_covariance(data);
    let mu = s.trace() / p as f64;
    let frob2 = s.as_slice().iter().map(|v| v * v).sum::<f64>();
    // ‖S − μI‖²_F / p
    let d2 = (frob2 - 2.0 * mu * s.trace() + mu * mu * p as f64) / p as f64;
    let mut b2 = 0.0;
    let mut xc = vec![0.0; p];
    for r in 0..n {
        for (v, (x, m)) in xc.iter_mut().zip(data.row(r).iter().zip(&mean)) {
            *v = x - m;
        }
        let norm2: f64 = xc.iter().map(|v| v * v).sum();
        let quad = crate::linalg::dot(&xc, &s.matvec(&xc));
        // ‖x xᵀ − S‖²_F
        b2 += norm2 * norm2 - 2.0 * quad + frob2;
    }
    let b2 = b2 / (n as f64 * n as f64) / p as f64;
    let shrinkage = if d2 > 0.0 { (b2.min(d2) / d2).clamp(0.0, 1.0) } else { 1.0 };
    let cov = Matrix::from_fn(p, p, |i, j| {
        (1.0 - shrinkage) * s.get(i, j) + if i == j { shrinkage * mu } else { 0.0 }
    });
    Ok(LedoitWolf { covariance: SymmetricMatrix::symmetrize(&cov)?, shrinkage })
}

/// Edge set used as the sparsity pattern of a refit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportSet {
    pub p: usize,
    edges: Vec<(usize, usize)>,
}

impl SupportSet {
    pub fn new(p: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (i, j) in edges {
            if i == j || i >= p || j >= p {
                return Err(BaselineError::InvalidArgument(format!("edge ({i}, {j}) on {p} nodes")));
            }
            out.push((i.min(j), i.max(j)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { p, edges: out })
    }

    pub fn empty(p: usize) -> Self {
        Self { p, edges: Vec::new() }
    }

    pub fn complete(p: usize) -> Self {
        Self { p, edges: (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect() }
    }

    /// Top-`k` edges by score (ties by edge order).
    pub fn top_k(scores: &EdgeScoreMatrix, k: usize) -> Self {
        let p = scores.p();
        let ranked = crate::eval::metrics::ranking(&scores.upper_values());
        let edges = ranked.into_iter().take(k).map(|e| crate::graph_sim::edge_pair(p, e));
        Self::new(p, edges).expect("edge pairs are valid")
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

fn inv2(a: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det > 0.0) {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

/// Maximum-likelihood precision with zeros forced outside `support`, by
/// iterative proportional scaling over the diagonal singletons and the
/// support pairs.
///
/// Each step matches the marginal covariance of one clique to `Σ̂` exactly and
/// updates `Θ⁻¹` in `O(p²)`. Off-support entries of `Θ` are never written.
pub fn ml_precision_given_support(
    sigma: &SymmetricMatrix,
    support: &SupportSet,
    tol: f64,
    max_iter: usize,
) -> Result<SpdMatrix> {
    let p = sigma.dim();
    if support.p != p {
        return Err(BaselineError::InvalidArgument(format!("support on {} nodes, sigma is {p}x{p}", support.p)));
    }
    if let Some(i) = (0..p).find(|&i| !(sigma.get(i, i) > 0.0)) {
        return Err(BaselineError::InfeasibleSupport(i, i));
    }
    let d = sigma.diag();
    let mut theta = Matrix::from_diag(&d.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
    let mut w = Matrix::from_diag(&d);
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); p];
    for &(i, j) in support.edges() {
        by_row[i].push(j);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        for i in 0..p {
            // singleton {i}
            let wii = w[(i, i)];
            let s = sigma.get(i, i);
            theta[(i, i)] += 1.0 / s - 1.0 / wii;
            let coef = (s - wii) / (wii * wii);
            let wi: Vec<f64> = w.row(i).to_vec();
            for r in 0..p {
                let f = coef * wi[r];
                if f != 0.0 {
                    for (dst, &v) in w.row_mut(r).iter_mut().zip(&wi) {
                        *dst += f * v;
                    }
                }
            }
            for &j in &by_row[i] {
                let wcc = [[w[(i, i)], w[(i, j)]], [w[(j, i)], w[(j, j)]]];
                let scc = [[sigma.get(i, i), sigma.get(i, j)], [sigma.get(j, i), sigma.get(j, j)]];
                let sinv = inv2(scc).ok_or(BaselineError::InfeasibleSupport(i, j))?;
                let winv = inv2(wcc).ok_or(BaselineError::InfeasibleSupport(i, j))?;
                for a in 0..2 {
                    for b in 0..2 {
                        let (ra, rb) = ([i, j][a], [i, j][b]);
                        theta[(ra, rb)] += sinv[a][b] - winv[a][b];
                    }
                }
                // W += B (S_cc − W_cc) Bᵀ with B = W[:, c] W_cc⁻¹
                let diff = [[scc[0][0] - wcc[0][0], scc[0][1] - wcc[0][1]], [scc[1][0] - wcc[1][0], scc[1][1] - wcc[1][1]]];
                let bmat: Vec<[f64; 2]> = (0..p)
                    .map(|r| {
                        let (x, y) = (w[(r, i)], w[(r, j)]);
                        [x * winv[0][0] + y * winv[1][0], x * winv[0][1] + y * winv[1][1]]
                    })
                    .collect();
                let bd: Vec<[f64; 2]> = bmat
                    .iter()
                    .map(|bb| [bb[0] * diff[0][0] + bb[1] * diff[1][0], bb[0] * diff[0][1] + bb[1] * diff[1][1]])
                    .collect();
                for r in 0..p {
                    let row = w.row_mut(r);
                    let (u0, u1) = (bd[r][0], bd[r][1]);
                    for (c, dst) in row.iter_mut().enumerate() {
                        *dst += u0 * bmat[c][0] + u1 * bmat[c][1];
                    }
                }
            }
        }
        // re-anchor Θ⁻¹ to avoid drift in the incremental updates
        let sym = SymmetricMatrix::symmetrize(&theta)?;
        let inv = match inverse_spd(&sym) {
            Ok(inv) => inv,
            Err(_) => return Err(BaselineError::NotConverged { iterations: 0, residual: f64::INFINITY }),
        };
        w = inv.into_matrix();
        residual = (0..p)
            .map(|i| (w[(i, i)] - sigma.get(i, i)).abs())
            .chain(support.edges().iter().map(|&(i, j)| (w[(i, j)] - sigma.get(i, j)).abs()))
            .fold(0.0, f64::max);
        if residual <= tol {
            return Ok(SpdMatrix::new(sym)?);
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(BaselineError::NotConverged { iterations: max_iter, residual })
}

/// Mean Gaussian log-density of the rows of `test` under precision `Θ`.
pub fn holdout_loglik(theta: &SpdMatrix, test: &Matrix) -> f64 {
    let p = theta.dim();
    assert_eq!(test.cols(), p, "test data has {} columns for a {p}x{p} precision", test.cols());
    let half_logdet = 0.5 * theta.log_det();
    let c = 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln();
    let m = theta.as_matrix();
    let total: f64 = (0..test.rows())
        .map(|r| {
            let x = test.row(r);
            half_logdet - 0.5 * crate::linalg::dot(x, &m.matvec(x)) - c
        })
        .sum();
    total / test.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_sim::{sample_gaussian, sample_sparse_precision, GeneratorConfig};
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn chain_theta() -> SpdMatrix {
        SpdMatrix::from_matrix(
            Matrix::from_rows(&[vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]]).unwrap(),
        )
        .unwrap()
    }

    fn random_cov(p: usize, n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = rng_from_seed(seed);
        let cfg = GeneratorConfig::uniform_sparse(p, n, 0.7, seed);
        let ps = sample_sparse_precision(&cfg, &mut rng);
        let x = sample_gaussian(&ps.theta, n, &mut rng);
        empirical_covariance(&standardize(&x).unwrap())
    }

    /// Proximal gradient on the same objective, with backtracking to stay PD.
    fn proximal_gradient_oracle(sigma: &SymmetricMatrix, lambda: f64, iters: usize) -> f64 {
        let p = sigma.dim();
        let mut theta = Matrix::from_diag(&sigma.diag().iter().map(|v| 1.0 / v).collect::<Vec<_>>());
        let obj = |t: &Matrix| -> Option<f64> {
            let spd = SpdMatrix::new(SymmetricMatrix::symmetrize(t).ok()?).ok()?;
            Some(glasso_objective(&spd, sigma, lambda))
        };
        let mut f = obj(&theta).unwrap();
        let mut step = 1.0;
        for _ in 0..iters {
            let w = inverse_spd(&SymmetricMatrix::symmetrize(&theta).unwrap()).unwrap();
            let grad = sigma.as_matrix().sub(w.as_matrix());
            loop {
                let cand = Matrix::from_fn(p, p, |i, j| {
                    let z = theta[(i, j)] - step * grad[(i, j)];
                    if i == j {
                        z
                    } else {
                        soft_threshold(z, step * lambda)
                    }
                });
                match obj(&cand) {
                    Some(fc) if fc <= f + 1e-15 => {
                        theta = cand;
                        f = fc;
                        step *= 1.2;
                        break;
                    }
                    _ => step *= 0.5,
                }
                if step < 1e-14 {
                    return f;
                }
            }
        }
        f
    }

    #[test]
    fn unpenalized_solution_is_the_inverse() {
        let sigma = random_cov(6, 200, 1);
        let opts = GlassoOptions { tol: 1e-10, max_iter: 2000, inner_tol: 1e-12, inner_max_iter: 10_000 };
        let res = graphical_lasso_with(&sigma, 0.0, &opts, None).unwrap();
        assert!(res.converged);
        let inv = inverse_spd(&sigma).unwrap();
        assert!(res.theta.max_abs_diff(&inv) < 1e-6, "{}", res.theta.max_abs_diff(&inv));
    }

    #[test]
    fn large_lambda_gives_diagonal() {
        let sigma = random_cov(8, 30, 2);
        let max_off = sigma.upper_values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let res = graphical_lasso(&sigma, max_off, 1e-8, 200).unwrap();
        assert!(res.theta.upper_values().iter().all(|&v| v == 0.0));
        for i in 0..8 {
            assert!((res.theta.get(i, i) - 1.0 / sigma.get(i, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_input_without_penalty_is_rejected() {
        let sigma = random_cov(10, 5, 3);
        assert!(matches!(graphical_lasso(&sigma, 0.0, 1e-5, 10), Err(BaselineError::Linalg(_))));
    }

    #[test]
    fn objective_matches_proximal_gradient_oracle() {
        let sigma = random_cov(10, 15, 4);
        let lambda = 0.1;
        let opts = GlassoOptions { tol: 1e-10, max_iter: 1000, inner_tol: 1e-12, inner_max_iter: 10_000 };
        let res = graphical_lasso_with(&sigma, lambda, &opts, None).unwrap();
        let oracle = proximal_gradient_oracle(&sigma, lambda, 20_000);
        let ours = glasso_objective(&res.theta, &sigma, lambda);
        assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
        assert!(ours <= oracle + 1e-9);
    }

    #[test]
    fn kkt_and_monotone_objective() {
        for seed in 0..10 {
            let sigma = random_cov(12, 10, 10 + seed);
            let lambda = 0.05 + 0.02 * seed as f64;
            let tol = 1e-5;
            let res = graphical_lasso(&sigma, lambda, tol, 200).unwrap();
            assert!(res.converged);
            assert!(res.kkt_residual(&sigma) <= tol, "seed {seed}: {}", res.kkt_residual(&sigma));
            for w in res.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "objective increased: {w:?}");
            }
        }
    }

    #[test]
    fn warm_started_path_matches_cold_solves() {
        let sigma = random_cov(10, 8, 5);
        let grid = default_lambda_grid(&sigma, 5, 0.05, 1.0);
        let opts = GlassoOptions { tol: 1e-9, ..GlassoOptions::default() };
        let path = graphical_lasso_path(&sigma, &grid, &opts).unwrap();
        for (l, res) in grid.iter().zip(&path) {
            let cold = graphical_lasso_with(&sigma, *l, &opts, None).unwrap();
            assert!(res.theta.max_abs_diff(&cold.theta) < 1e-6);
        }
    }

    #[test]
    fn cv_with_single_lambda_equals_plain_fit() {
        let mut rng = rng_from_seed(6);
        let cfg = GeneratorConfig::uniform_sparse(8, 30, 0.8, 0);
        let ps = sample_sparse_precision(&cfg, &mut rng);
        let x = sample_gaussian(&ps.theta, 30, &mut rng);
        let opts = GlassoOptions::default();
        let cv = graphical_lasso_cv(&x, 5, &[0.2], &opts).unwrap();
        let sigma = empirical_covariance(&standardize(&x).unwrap());
        let plain = graphical_lasso_with(&sigma, 0.2, &opts, None).unwrap();
        assert_eq!(cv.result.theta.as_matrix(), plain.theta.as_matrix());
        assert!(graphical_lasso_cv(&x, 1, &[0.2], &opts).is_err());
        assert!(graphical_lasso_cv(&x, 5, &[], &opts).is_err());
    }

    #[test]
    fn thresholding_recovers_chain_at_large_n() {
        let theta = chain_theta();
        let x = sample_gaussian(&theta, 10_000, &mut rng_from_seed(7));
        let sigma = empirical_covariance(&standardize(&x).unwrap());
        let s = threshold_partial_corr(&sigma, default_ridge(&sigma));
        let top = SupportSet::top_k(&s, 2);
        assert_eq!(top.edges(), &[(0, 1), (1, 2)]);

        let eye = threshold_partial_corr(&SymmetricMatrix::identity(5), 1e-3);
        assert!(eye.upper_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thresholding_separates_edges_at_population_level() {
        let mut rng = rng_from_seed(8);
        let cfg = GeneratorConfig::uniform_sparse(15, 10, 0.85, 0);
        for _ in 0..20 {
            let ps = sample_sparse_precision(&cfg, &mut rng);
            let sigma = inverse_spd(ps.theta.as_symmetric()).unwrap();
            let scores = threshold_partial_corr(&sigma, 1e-3).upper_values();
            let truth = ps.y_binary();
            let min_true = scores.iter().zip(&truth).filter(|(_, &t)| t).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            let max_false = scores.iter().zip(&truth).filter(|(_, &t)| !t).map(|(s, _)| *s).fold(0.0, f64::max);
            assert!(min_true > max_false);
        }
    }

    #[test]
    fn ledoit_wolf_properties() {
        let mut rng = rng_from_seed(9);
        for _ in 0..200 {
            let n = rng.gen_range(3..20);
            let p = rng.gen_range(2..15);
            let x = Matrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
            let lw = ledoit_wolf(&x).unwrap();
            assert!((0.0..=1.0).contains(&lw.shrinkage));
            assert!(cholesky(&lw.covariance).is_ok(), "n {n} p {p} s {}", lw.shrinkage);
        }
        let eye_big = SpdMatrix::new(SymmetricMatrix::identity(10)).unwrap();
        let x = sample_gaussian(&eye_big, 50_000, &mut rng);
        // well-conditioned, n ≫ p: shrinkage toward the target should vanish
        let mixed = Matrix::from_fn(50_000, 10, |i, j| x[(i, j)] * (1.0 + j as f64));
        assert!(ledoit_wolf(&mixed).unwrap().shrinkage < 0.05);
        assert!(ledoit_wolf(&Matrix::zeros(1, 3)).is_err());
        // two centered rows are mirror images, so every outer product equals S
        let two = Matrix::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.0, 1.0, 3.0]]).unwrap();
        assert!(ledoit_wolf(&two).unwrap().shrinkage < 1e-12);
    }

    #[test]
    fn ips_saturated_and_independence_models() {
        let sigma = random_cov(6, 100, 11);
        let full = ml_precision_given_support(&sigma, &SupportSet::complete(6), 1e-10, 1000).unwrap();
        assert!(full.max_abs_diff(&inverse_spd(&sigma).unwrap()) < 1e-6);

        let empty = ml_precision_given_support(&sigma, &SupportSet::empty(6), 1e-10, 10).unwrap();
        for i in 0..6 {
            assert!((empty.get(i, i) - 1.0 / sigma.get(i, i)).abs() < 1e-12);
        }
        assert!(empty.upper_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ips_recovers_chain_precision() {
        let theta = chain_theta();
        let x = sample_gaussian(&theta, 10_000, &mut rng_from_seed(12));
        let (sigma, _) = centered_covariance(&x);
        let support = SupportSet::new(3, [(0, 1), (1, 2)]).unwrap();
        let fit = ml_precision_given_support(&sigma, &support, 1e-10, 1000).unwrap();
        assert_eq!(fit.get(0, 2), 0.0);
        assert!(fit.max_abs_diff(&theta) < 0.05, "{:?}", fit.as_matrix());
    }

    #[test]
    fn ips_moment_matching_on_sparse_support() {
        let sigma = random_cov(10, 40, 13);
        let support = SupportSet::new(10, [(0, 1), (1, 2), (2, 5), (3, 7), (0, 9), (4, 8)]).unwrap();
        let fit = ml_precision_given_support(&sigma, &support, 1e-8, 1000).unwrap();
        let w = fit.inverse();
        for i in 0..10 {
            assert!((w.get(i, i) - sigma.get(i, i)).abs() <= 1e-8);
            for j in i + 1..10 {
                if support.edges().contains(&(i, j)) {
                    assert!((w.get(i, j) - sigma.get(i, j)).abs() <= 1e-8);
                } else {
                    assert_eq!(fit.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn ips_rejects_singular_pair() {
        let sigma = SymmetricMatrix::new(
            Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let support = SupportSet::new(3, [(0, 1)]).unwrap();
        assert_eq!(
            ml_precision_given_support(&sigma, &support, 1e-8, 10).unwrap_err(),
            BaselineError::InfeasibleSupport(0, 1)
        );
    }

    #[test]
    fn holdout_loglik_cases() {
        let eye = SpdMatrix::new(SymmetricMatrix::identity(4)).unwrap();
        let v = holdout_loglik(&eye, &Matrix::zeros(1, 4));
        assert!((v + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        // the generating precision beats a misspecified sparse refit on fresh data
        let mut rng = rng_from_seed(14);
        let cfg = GeneratorConfig::uniform_sparse(10, 40, 0.6, 0);
        let mut wins = 0;
        for _ in 0..20 {
            let ps = sample_sparse_precision(&cfg, &mut rng);
            let train = sample_gaussian(&ps.theta, 40, &mut rng);
            let test = sample_gaussian(&ps.theta, 5000, &mut rng);
            let (s, _) = centered_covariance(&train);
            let refit = ml_precision_given_support(&s, &SupportSet::new(10, [(0, 1), (2, 3)]).unwrap(), 1e-8, 500).unwrap();
            if holdout_loglik(&ps.theta, &test) >= holdout_loglik(&refit, &test) {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }
}
