//! Held-out likelihood of maximum-likelihood refits on the top-k edges of
//! each method, as k grows.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::benchmark::{Method, MethodContext};
use super::EvalError;
use crate::baselines::{holdout_loglik, ml_precision_given_support, BaselineError, SupportSet};
use crate::graph_sim::PrecisionSample;
use crate::infer::covariance_of;
use crate::linalg::Matrix;
use crate::seed::{derive_rng, derive_seed};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug)]
pub struct CurveOptions {
    pub k_list: Vec<usize>,
    pub splits: usize,
    /// Rows used for edge selection and the refit; the rest are held out.
    pub selection_size: usize,
    pub ips_tol: f64,
    pub ips_max_iter: usize,
    pub seed: u64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self { k_list: vec![0, 10, 20, 40, 80], splits: 10, selection_size: 40, ips_tol: 1e-6, ips_max_iter: 500, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    /// Mean held-out log-likelihood per sample over the successful splits.
    pub mean_loglik: f64,
    pub splits: usize,
    /// Splits where the refit failed (infeasible or unconverged support).
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

/// Applies the selection rows' column means and scales to `rows`.
fn standardize_with(selection: &Matrix, rows: &Matrix) -> Result<Matrix> {
    let (n, p) = (selection.rows(), selection.cols());
    let mut out = rows.clone();
    for j in 0..p {
        let mean = (0..n).map(|r| selection[(r, j)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (selection[(r, j)] - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(EvalError::InvalidArgument(format!("column {j} is constant in the selection rows")));
        }
        let sd = var.sqrt();
        for r in 0..out.rows() {
            out[(r, j)] = (out[(r, j)] - mean) / sd;
        }
    }
    Ok(out)
}

fn rows_of(data: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), data.cols(), |r, c| data[(idx[r], c)])
}

/// For each random split, every method ranks edges on the selection rows;
/// the top-k edges define a support whose maximum-likelihood precision is
/// scored on the held-out rows. Refit failures are counted as missing points.
pub fn edge_selection_likelihood_curve(
    ctx: &MethodContext,
    data: &Matrix,
    truth: Option<&PrecisionSample>,
    methods: &[Method],
    opts: &CurveOptions,
) -> Result<Vec<CurveSeries>> {
    let n = data.rows();
    if opts.selection_size < 2 || opts.selection_size >= n {
        return Err(EvalError::InvalidArgument(format!(
            "selection size {} needs 2 <= size < n = {n}",
            opts.selection_size
        )));
    }
    if opts.splits < 1 || methods.is_empty() {
        return Err(EvalError::InvalidArgument("need at least one split and one method".into()));
    }
    let mut sums = vec![vec![(0.0, 0usize, 0usize); opts.k_list.len()]; methods.len()];
    for s in 0..opts.splits {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(opts.seed, "curve/split", s as u64));
        let selection = rows_of(data, &order[..opts.selection_size]);
        let held_out = standardize_with(&selection, &rows_of(data, &order[opts.selection_size..]))?;
        let sigma = covariance_of(&selection)?;
        for (mi, &m) in methods.iter().enumerate() {
            let scores = ctx.score(m, &selection, truth, derive_seed(opts.seed, "curve/method", s as u64))?;
            for (ki, &k) in opts.k_list.iter().enumerate() {
                let support = SupportSet::top_k(&scores, k);
                match ml_precision_given_support(&sigma, &support, opts.ips_tol, opts.ips_max_iter) {
                    Ok(theta) => {
                        let cell = &mut sums[mi][ki];
                        cell.0 += holdout_loglik(&theta, &held_out);
                        cell.1 += 1;
                    }
                    Err(BaselineError::InfeasibleSupport(..) | BaselineError::NotConverged { .. } | BaselineError::Linalg(_)) => {
                        sums[mi][ki].2 += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(methods
        .iter()
        .zip(sums)
        .map(|(m, row)| CurveSeries {
            method: m.name().to_string(),
            points: opts
                .k_list
                .iter()
                .zip(row)
                .map(|(&k, (sum, ok, missing))| CurvePoint {
                    k,
                    mean_loglik: if ok > 0 { sum / ok as f64 } else { f64::NAN },
                    splits: ok,
                    missing,
                })
                .collect(),
        })
        .collect())
}

/// `method,k,mean_loglik,splits,missing`, one row per curve point.
pub fn write_curve_csv<W: std::io::Write>(series: &[CurveSeries], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,k,mean_loglik,splits,missing")?;
    for s in series {
        for p in &s.points {
            writeln!(w, "{},{},{},{},{}", s.method, p.k, p.mean_loglik, p.splits, p.missing)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_sim::{sample_gaussian, sample_precision, GeneratorConfig, GraphFamily};

    fn problem(p: usize, n: usize, seed: u64) -> (PrecisionSample, Matrix) {
        let gen = GeneratorConfig { edge_prob: 0.08, c: 0.4, ..GeneratorConfig::uniform_sparse(p, n, 0.9, seed) }
            .with_family(GraphFamily::ErSubstitute);
        let mut rng = derive_rng(seed, "curve-test", 0);
        let ps = sample_precision(&gen, &mut rng);
        let x = sample_gaussian(&ps.theta, n, &mut rng);
        (ps, x)
    }

    #[test]
    fn empty_support_is_method_independent() {
        let (ps, x) = problem(12, 80, 1);
        let opts = CurveOptions { k_list: vec![0, 5], splits: 3, ..CurveOptions::default() };
        let ctx = MethodContext::new(None);
        let curves =
            edge_selection_likelihood_curve(&ctx, &x, Some(&ps), &[Method::Random, Method::PartialCorr, Method::Oracle], &opts)
                .unwrap();
        let k0: Vec<f64> = curves.iter().map(|c| c.points[0].mean_loglik).collect();
        assert!(k0.iter().all(|&v| v == k0[0]), "{k0:?}");
    }

    #[test]
    fn oracle_curve_dominates_random() {
        let ctx = MethodContext::new(None);
        let opts = CurveOptions { k_list: vec![5, 10, 20, 30], splits: 2, ..CurveOptions::default() };
        let (mut oracle, mut random) = (vec![0.0; 4], vec![0.0; 4]);
        for g in 0..20 {
            let (ps, x) = problem(15, 140, 100 + g);
            let c = edge_selection_likelihood_curve(&ctx, &x, Some(&ps), &[Method::Oracle, Method::Random], &opts).unwrap();
            for k in 0..4 {
                oracle[k] += c[0].points[k].mean_loglik;
                random[k] += c[1].points[k].mean_loglik;
            }
        }
        for k in 0..4 {
            assert!(oracle[k] > random[k], "k index {k}: {} vs {}", oracle[k], random[k]);
        }
    }

    #[test]
    fn protocol_curve_has_an_interior_maximum() {
        // 50 variables with 40 selection rows, as in the gene-expression setup
        let (ps, x) = problem(50, 140, 7);
        let true_edges = ps.graph.edges.len();
        let opts = CurveOptions {
            k_list: vec![0, true_edges / 2, true_edges, 3 * true_edges, 600],
            splits: 3,
            ..CurveOptions::default()
        };
        let c = edge_selection_likelihood_curve(&MethodContext::new(None), &x, Some(&ps), &[Method::Oracle], &opts).unwrap();
        let pts: Vec<f64> = c[0].points.iter().map(|p| p.mean_loglik).collect();
        let best = pts.iter().enumerate().filter(|(_, v)| v.is_finite()).max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(best > 0 && best < pts.len() - 1, "{pts:?}");
    }

    #[test]
    fn rejects_bad_selection_sizes() {
        let (ps, x) = problem(10, 30, 2);
        let ctx = MethodContext::new(None);
        for size in [1, 30, 31] {
            let opts = CurveOptions { selection_size: size, ..CurveOptions::default() };
            assert!(edge_selection_likelihood_curve(&ctx, &x, Some(&ps), &[Method::Oracle], &opts).is_err());
        }
    }

    #[test]
    fn csv_layout() {
        let s = vec![CurveSeries { method: "oracle".into(), points: vec![CurvePoint { k: 3, mean_loglik: -1.5, splits: 2, missing: 0 }] }];
        let mut buf = Vec::new();
        write_curve_csv(&s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "method,k,mean_loglik,splits,missing\noracle,3,-1.5,2,0\n");
    }
}
