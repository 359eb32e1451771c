//! Edge scores and prediction with a trained network.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnet::{DNetError, DNetModel, Real, Tensor4};
use crate::eval::metrics::{median, ranking};
use crate::graph_sim::edge_pair;
use crate::linalg::{
    empirical_covariance, partial_corr_from_precision, standardize, LinalgError, Matrix, SymmetricMatrix,
};
use crate::seed::derive_rng;

/// Symmetric per-edge scores with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScoreMatrix(SymmetricMatrix);

impl EdgeScoreMatrix {
    /// Wraps `m`, forcing the diagonal to zero.
    pub fn new(mut m: SymmetricMatrix) -> Self {
        for i in 0..m.dim() {
            m.set(i, i, 0.0);
        }
        Self(m)
    }

    pub fn from_upper_values(p: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), p * (p - 1) / 2, "edge count for p = {p}");
        let mut m = Matrix::zeros(p, p);
        for (e, &v) in values.iter().enumerate() {
            let (i, j) = edge_pair(p, e);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        Self(SymmetricMatrix::new(m).expect("filled symmetrically"))
    }

    /// `|partial correlation|` implied by a precision matrix.
    pub fn abs_partial_corr(theta: &SymmetricMatrix) -> Self {
        let pc = partial_corr_from_precision(theta);
        let p = pc.dim();
        let m = Matrix::from_fn(p, p, |i, j| if i == j { 0.0 } else { pc.get(i, j).abs() });
        Self(SymmetricMatrix::new(m).expect("symmetric input"))
    }

    pub fn p(&self) -> usize {
        self.0.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    /// Strict upper triangle in edge order.
    pub fn upper_values(&self) -> Vec<f64> {
        self.0.upper_values()
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    /// Scores re-indexed so that entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(self.0.permuted(perm))
    }
}

/// Permutations used by [`predict_ensemble`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationSpec {
    pub count: usize,
    pub include_identity: bool,
    pub seed: u64,
}

impl Default for PermutationSpec {
    fn default() -> Self {
        Self { count: 20, include_identity: true, seed: 0 }
    }
}

impl PermutationSpec {
    /// The permutations themselves: identity first when included, the rest uniform.
    pub fn permutations(&self, p: usize) -> Vec<Vec<usize>> {
        let mut rng = derive_rng(self.seed, "permutation", 0);
        (0..self.count)
            .map(|k| {
                let mut perm: Vec<usize> = (0..p).collect();
                if !(k == 0 && self.include_identity) {
                    perm.shuffle(&mut rng);
                }
                perm
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Net(#[from] DNetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("permutation count must be at least 1")]
    NoPermutations,
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Number of covariances evaluated per forward call.
const PREDICT_BATCH: usize = 16;

/// Standardized empirical covariance of a data matrix.
pub fn covariance_of(data: &Matrix) -> Result<SymmetricMatrix> {
    Ok(empirical_covariance(&standardize(data)?))
}

/// Edge probabilities for several covariances of size `model.p_train()`.
pub fn predict_covariances<T: Real>(model: &DNetModel<T>, sigmas: &[&SymmetricMatrix]) -> Result<Vec<EdgeScoreMatrix>> {
    let p = model.p_train();
    let mut out = Vec::with_capacity(sigmas.len());
    for chunk in sigmas.chunks(PREDICT_BATCH) {
        if let Some(bad) = chunk.iter().find(|s| s.dim() != p) {
            return Err(InferError::ShapeMismatch(format!("{0}x{0} covariance for a {p}-node network", bad.dim())));
        }
        let y = model.predict(&Tensor4::from_covariances(chunk)?)?;
        for b in 0..chunk.len() {
            let m = Matrix::from_vec(p, p, y.slice_f64(b, 0))?;
            out.push(EdgeScoreMatrix::new(SymmetricMatrix::new(m)?));
        }
    }
    Ok(out)
}

/// Edge probabilities for a covariance with `p ≤ model.p_train()`, padding when smaller.
pub fn predict_covariance<T: Real>(model: &DNetModel<T>, sigma: &SymmetricMatrix) -> Result<EdgeScoreMatrix> {
    if sigma.dim() == model.p_train() {
        Ok(predict_covariances(model, &[sigma])?.pop().expect("one input"))
    } else {
        pad_and_predict(model, sigma)
    }
}

/// Standardize, covariance, network.
pub fn predict<T: Real>(model: &DNetModel<T>, data: &Matrix) -> Result<EdgeScoreMatrix> {
    if data.cols() > model.p_train() {
        return Err(InferError::ShapeMismatch(format!("{} variables for a {}-node network", data.cols(), model.p_train())));
    }
    predict_covariance(model, &covariance_of(data)?)
}

/// Embeds `sigma` in the top-left block of an identity of the network's size
/// and crops the prediction back.
pub fn pad_and_predict<T: Real>(model: &DNetModel<T>, sigma: &SymmetricMatrix) -> Result<EdgeScoreMatrix> {
    let (p, big) = (sigma.dim(), model.p_train());
    if p > big {
        return Err(InferError::ShapeMismatch(format!("{p}x{p} covariance exceeds the {big}-node network")));
    }
    let padded = pad_identity(sigma, big);
    let full = predict_covariances(model, &[&padded])?.pop().expect("one input");
    let idx: Vec<usize> = (0..p).collect();
    Ok(EdgeScoreMatrix::new(SymmetricMatrix::new(full.as_symmetric().submatrix(&idx))?))
}

pub fn pad_identity(sigma: &SymmetricMatrix, size: usize) -> SymmetricMatrix {
    let p = sigma.dim();
    let m = Matrix::from_fn(size, size, |i, j| {
        if i < p && j < p {
            sigma.get(i, j)
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    SymmetricMatrix::new(m).expect("block-diagonal embedding is symmetric")
}

/// Per-permutation predictions mapped back to the original variable order.
pub fn permuted_predictions<T: Real>(
    model: &DNetModel<T>,
    sigma: &SymmetricMatrix,
    spec: &PermutationSpec,
) -> Result<Vec<EdgeScoreMatrix>> {
    if spec.count == 0 {
        return Err(InferError::NoPermutations);
    }
    let p = sigma.dim();
    let perms = spec.permutations(p);
    // (P Σ Pᵀ)[a, b] = Σ[perm[a], perm[b]]
    let permuted: Vec<SymmetricMatrix> = perms.iter().map(|perm| sigma.permuted(perm)).collect();
    let preds = if p == model.p_train() {
        predict_covariances(model, &permuted.iter().collect::<Vec<_>>())?
    } else {
        permuted.iter().map(|s| pad_and_predict(model, s)).collect::<Result<Vec<_>>>()?
    };
    Ok(preds.iter().zip(&perms).map(|(pred, perm)| pred.permuted(&inverse_permutation(perm))).collect())
}

/// Average (or median) of the permuted predictions.
pub fn predict_ensemble<T: Real>(
    model: &DNetModel<T>,
    sigma: &SymmetricMatrix,
    spec: &PermutationSpec,
    aggregator: Aggregator,
) -> Result<EdgeScoreMatrix> {
    let members = permuted_predictions(model, sigma, spec)?;
    Ok(aggregate(&members, aggregator))
}

pub fn aggregate(members: &[EdgeScoreMatrix], aggregator: Aggregator) -> EdgeScoreMatrix {
    let p = members[0].p();
    let m = Matrix::from_fn(p, p, |i, j| {
        let vals: Vec<f64> = members.iter().map(|s| s.get(i, j)).collect();
        match aggregator {
            Aggregator::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            Aggregator::Median => median(&vals),
        }
    });
    EdgeScoreMatrix::new(SymmetricMatrix::new(m).expect("entrywise aggregate of symmetric matrices"))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &v) in perm.iter().enumerate() {
        inv[v] = k;
    }
    inv
}

/// Ranked edge list as CSV rows `i,j,score`.
pub fn write_edge_csv<W: std::io::Write>(scores: &EdgeScoreMatrix, mut w: W) -> std::io::Result<()> {
    let p = scores.p();
    writeln!(w, "i,j,score")?;
    for e in ranking(&scores.upper_values()) {
        let (i, j) = edge_pair(p, e);
        writeln!(w, "{i},{j},{}", scores.get(i, j))?;
    }
    Ok(())
}
