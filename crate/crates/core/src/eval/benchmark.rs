//! Repeated-trial comparison of edge scorers on synthetic scenarios.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, calibration_error, mean_stderr, median, pearson, precision_at_fraction};
use super::EvalError;
use crate::baselines::{
    default_lambda_grid, default_ridge, graphical_lasso_cv, graphical_lasso_path, ledoit_wolf, threshold_partial_corr,
    GlassoOptions,
};
use crate::dnet::DNetModel;
use crate::graph_sim::{sample_data, sample_precision, GeneratorConfig, PrecisionSample};
use crate::infer::{covariance_of, inverse_permutation, predict_covariance, predict_ensemble, Aggregator, EdgeScoreMatrix, PermutationSpec};
use crate::linalg::{standardize, Matrix, SymmetricMatrix};
use crate::seed::derive_rng;

pub type Result<T> = std::result::Result<T, EvalError>;

/// An edge-scoring method under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Uniform random scores; the chance baseline.
    Random,
    /// Graphical lasso with the penalty chosen by cross-validated likelihood.
    GlassoCv,
    /// Graphical lasso with the penalty that maximizes AUC against the truth.
    GlassoOptimal,
    /// Absolute partial correlations of the (ridged) empirical covariance.
    #[serde(rename = "pcorr")]
    PartialCorr,
    LedoitWolf,
    DeepGraph,
    #[serde(rename = "deepgraph+perm")]
    DeepGraphPerm,
    /// True absolute partial correlations; an upper reference.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Random,
        Method::GlassoCv,
        Method::GlassoOptimal,
        Method::PartialCorr,
        Method::LedoitWolf,
        Method::DeepGraph,
        Method::DeepGraphPerm,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::GlassoCv => "glasso-cv",
            Method::GlassoOptimal => "glasso-optimal",
            Method::PartialCorr => "pcorr",
            Method::LedoitWolf => "ledoit-wolf",
            Method::DeepGraph => "deepgraph",
            Method::DeepGraphPerm => "deepgraph+perm",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::DeepGraph | Method::DeepGraphPerm)
    }

    pub fn needs_truth(self) -> bool {
        matches!(self, Method::GlassoOptimal | Method::Oracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Shared settings for every method in a comparison.
#[derive(Clone, Debug)]
pub struct MethodContext<'a> {
    pub model: Option<&'a DNetModel<f32>>,
    pub permutations: PermutationSpec,
    pub glasso: GlassoOptions,
    pub cv_folds: usize,
    pub lambda_grid_size: usize,
}

impl<'a> MethodContext<'a> {
    pub fn new(model: Option<&'a DNetModel<f32>>) -> Self {
        Self {
            model,
            permutations: PermutationSpec::default(),
            glasso: GlassoOptions::benchmark(),
            cv_folds: 5,
            lambda_grid_size: 20,
        }
    }

    /// Edge scores for one data set. `truth` is required by the methods that
    /// peek at the generating precision; `seed` drives the random scorer.
    pub fn score(&self, method: Method, data: &Matrix, truth: Option<&PrecisionSample>, seed: u64) -> Result<EdgeScoreMatrix> {
        let p = data.cols();
        let truth = || truth.ok_or(EvalError::MissingTruth(method.name()));
        let model = || self.model.ok_or(EvalError::MissingModel(method.name()));
        Ok(match method {
            Method::Random => {
                let mut rng = derive_rng(seed, "benchmark/random", 0);
                let values: Vec<f64> = (0..p * (p - 1) / 2).map(|_| rng.gen::<f64>()).collect();
                EdgeScoreMatrix::from_upper_values(p, &values)
            }
            Method::GlassoCv => {
                let sigma = covariance_of(data)?;
                let grid = default_lambda_grid(&sigma, self.lambda_grid_size, 0.01, 1.0);
                graphical_lasso_cv(data, self.cv_folds, &grid, &self.glasso)?.result.edge_scores()
            }
            Method::GlassoOptimal => {
                let truth = truth()?;
                let labels = truth.y_binary();
                let sigma = covariance_of(data)?;
                let grid = default_lambda_grid(&sigma, self.lambda_grid_size, 0.01, 1.0);
                let mut best: Option<(f64, EdgeScoreMatrix)> = None;
                for fit in graphical_lasso_path(&sigma, &grid, &self.glasso)? {
                    let scores = fit.edge_scores();
                    let a = auc(&scores.upper_values(), &labels)?;
                    if best.as_ref().map_or(true, |(b, _)| a > *b) {
                        best = Some((a, scores));
                    }
                }
                best.expect("grid is nonempty").1
            }
            Method::PartialCorr => {
                let sigma = covariance_of(data)?;
                threshold_partial_corr(&sigma, default_ridge(&sigma))
            }
            Method::LedoitWolf => ledoit_wolf(&standardize(data)?)?.edge_scores(),
            Method::DeepGraph => predict_covariance(model()?, &covariance_of(data)?)?,
            Method::DeepGraphPerm => {
                predict_ensemble(model()?, &covariance_of(data)?, &self.permutations, Aggregator::Mean)?
            }
            Method::Oracle => EdgeScoreMatrix::abs_partial_corr(truth()?.theta.as_symmetric()),
        })
    }
}

/// A data-generating setup evaluated over repeated independent trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub generator: GeneratorConfig,
    pub trials: usize,
    pub seed: u64,
    /// Edge fractions at which precision@k is reported.
    pub prec_fractions: Vec<f64>,
    pub ce_bins: usize,
}

impl Scenario {
    pub fn new(name: impl Into<String>, generator: GeneratorConfig, trials: usize, seed: u64) -> Self {
        Self { name: name.into(), generator, trials, seed, prec_fractions: vec![0.05], ce_bins: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.trials < 1 {
            return Err(EvalError::InvalidArgument("a scenario needs at least one trial".into()));
        }
        if self.ce_bins < 1 {
            return Err(EvalError::InvalidArgument("ce_bins must be at least 1".into()));
        }
        if let Some(f) = self.prec_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(EvalError::InvalidArgument(format!("precision fraction {f} outside (0, 1]")));
        }
        Ok(())
    }

    /// The graph and data of trial `t`, a pure function of the scenario seed and `t`.
    pub fn trial(&self, t: usize) -> (PrecisionSample, Matrix) {
        let mut rng = derive_rng(self.seed, "benchmark/trial", t as u64);
        let ps = sample_precision(&self.generator, &mut rng);
        let data = sample_data(&ps.theta, self.generator.n, self.generator.distribution(), &mut rng);
        (ps, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub fraction: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

/// Aggregated metrics of one method on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub scenario: String,
    pub auc: f64,
    pub auc_stderr: f64,
    pub prec_at_k: Vec<PrecisionAtK>,
    pub calibration_error: f64,
    pub calibration_error_stderr: f64,
    /// Median per-trial wall time.
    pub wall_seconds: f64,
    pub total_seconds: f64,
    /// Successful trials.
    pub trials: usize,
    pub failures: Vec<TrialFailure>,
    /// Per-trial AUCs in trial order, for paired comparisons.
    pub trial_aucs: Vec<f64>,
}

impl MetricRecord {
    pub fn prec_at(&self, fraction: f64) -> Option<&PrecisionAtK> {
        self.prec_at_k.iter().find(|p| (p.fraction - fraction).abs() < 1e-12)
    }
}

#[derive(Clone, Debug, Default)]
struct TrialMetrics {
    auc: f64,
    prec: Vec<f64>,
    ce: f64,
    seconds: f64,
}

fn evaluate_trial(ctx: &MethodContext, scenario: &Scenario, method: Method, t: usize) -> Result<TrialMetrics> {
    let (ps, data) = scenario.trial(t);
    let labels = ps.y_binary();
    let start = Instant::now();
    let scores = ctx.score(method, &data, Some(&ps), crate::seed::derive_seed(scenario.seed, "benchmark/method", t as u64))?;
    let seconds = start.elapsed().as_secs_f64();
    let values = scores.upper_values();
    let probs: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(TrialMetrics {
        auc: auc(&values, &labels)?,
        prec: scenario
            .prec_fractions
            .iter()
            .map(|&f| precision_at_fraction(&values, &labels, f))
            .collect::<std::result::Result<_, _>>()?,
        ce: calibration_error(&probs, &labels, scenario.ce_bins),
        seconds,
    })
}

/// Runs every method on every trial of the scenario. Trials are split over
/// `threads` worker threads; results are identical for any thread count
/// apart from the timings.
pub fn run_benchmark(ctx: &MethodContext, scenario: &Scenario, methods: &[Method], threads: usize) -> Result<Vec<MetricRecord>> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(EvalError::InvalidArgument("no methods to benchmark".into()));
    }
    if let Some(m) = methods.iter().find(|m| m.needs_model()) {
        let model = ctx.model.ok_or(EvalError::MissingModel(m.name()))?;
        if model.p_train() < scenario.generator.p {
            return Err(EvalError::InvalidArgument(format!(
                "{}-node network cannot score {}-node problems",
                model.p_train(),
                scenario.generator.p
            )));
        }
    }
    let threads = threads.max(1).min(scenario.trials);
    let mut per_trial: Vec<Vec<Result<TrialMetrics>>> = Vec::with_capacity(scenario.trials);
    if threads == 1 {
        for t in 0..scenario.trials {
            per_trial.push(methods.iter().map(|&m| evaluate_trial(ctx, scenario, m, t)).collect());
        }
    } else {
        let mut slots: Vec<Option<Vec<Result<TrialMetrics>>>> = (0..scenario.trials).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    s.spawn(move || {
                        (w..scenario.trials)
                            .step_by(threads)
                            .map(|t| (t, methods.iter().map(|&m| evaluate_trial(ctx, scenario, m, t)).collect::<Vec<_>>()))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (t, r) in h.join().expect("benchmark worker panicked") {
                    slots[t] = Some(r);
                }
            }
        });
        per_trial.extend(slots.into_iter().map(|s| s.expect("every trial assigned")));
    }
    Ok(methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            for (t, row) in per_trial.iter().enumerate() {
                match &row[mi] {
                    Ok(v) => ok.push(v.clone()),
                    Err(e) => failures.push(TrialFailure { trial: t, message: e.to_string() }),
                }
            }
            summarize(m.name(), &scenario.name, &scenario.prec_fractions, &ok, failures)
        })
        .collect())
}

fn summarize(method: &str, scenario: &str, fractions: &[f64], ok: &[TrialMetrics], failures: Vec<TrialFailure>) -> MetricRecord {
    let col = |f: &dyn Fn(&TrialMetrics) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
    let aucs = col(&|m| m.auc);
    let (auc, auc_stderr) = mean_stderr(&aucs);
    let (ce, ce_se) = mean_stderr(&col(&|m| m.ce));
    let seconds = col(&|m| m.seconds);
    MetricRecord {
        method: method.to_string(),
        scenario: scenario.to_string(),
        auc,
        auc_stderr,
        prec_at_k: fractions
            .iter()
            .enumerate()
            .map(|(k, &fraction)| {
                let (mean, stderr) = mean_stderr(&col(&|m| m.prec[k]));
                PrecisionAtK { fraction, mean, stderr }
            })
            .collect(),
        calibration_error: ce,
        calibration_error_stderr: ce_se,
        wall_seconds: if seconds.is_empty() { f64::NAN } else { median(&seconds) },
        total_seconds: seconds.iter().sum(),
        trials: ok.len(),
        failures,
        trial_aucs: aucs,
    }
}

/// Long-format CSV: `method,scenario,metric,mean,stderr,trials`.
pub fn write_report_csv<W: Write>(records: &[MetricRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "method,scenario,metric,mean,stderr,trials")?;
    for r in records {
        let mut row = |metric: &str, mean: f64, se: Option<f64>| {
            let se = se.map(|s| s.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{metric},{mean},{se},{}", r.method, r.scenario, r.trials)
        };
        row("auc", r.auc, Some(r.auc_stderr))?;
        for p in &r.prec_at_k {
            row(&format!("prec@{}", p.fraction), p.mean, Some(p.stderr))?;
        }
        row("ce", r.calibration_error, Some(r.calibration_error_stderr))?;
        row("wall_seconds_median", r.wall_seconds, None)?;
    }
    Ok(())
}

/// Agreement between the errors a network makes under different variable orderings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecorrelationReport {
    /// Mean over permutation pairs of the Pearson correlation of per-edge errors.
    pub mean_correlation: f64,
    pub mean_abs_error: f64,
    pub permutations: usize,
    pub examples: usize,
}

/// For each permutation, the per-edge error vector (prediction minus soft
/// label) over the whole test set; reports how correlated these vectors are.
pub fn permutation_error_correlation(
    model: &DNetModel<f32>,
    test_set: &[(SymmetricMatrix, Vec<f64>)],
    perms: &[Vec<usize>],
) -> Result<DecorrelationReport> {
    if perms.len() < 2 {
        return Err(EvalError::InvalidArgument("need at least two permutations".into()));
    }
    if test_set.is_empty() {
        return Err(EvalError::InvalidArgument("empty test set".into()));
    }
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); perms.len()];
    for (sigma, soft) in test_set {
        for (perm, err) in perms.iter().zip(errors.iter_mut()) {
            if perm.len() != sigma.dim() {
                return Err(EvalError::InvalidArgument(format!(
                    "permutation of length {} for a {}-node covariance",
                    perm.len(),
                    sigma.dim()
                )));
            }
            let pred = predict_covariance(model, &sigma.permuted(perm))?.permuted(&inverse_permutation(perm));
            let values = pred.upper_values();
            if values.len() != soft.len() {
                return Err(EvalError::InvalidArgument("soft labels do not match the covariance size".into()));
            }
            err.extend(values.iter().zip(soft).map(|(a, b)| a - b));
        }
    }
    let mut corr = Vec::new();
    for a in 0..errors.len() {
        for b in a + 1..errors.len() {
            corr.push(pearson(&errors[a], &errors[b])?);
        }
    }
    let total: usize = errors.iter().map(Vec::len).sum();
    let mae = errors.iter().flatten().map(|e| e.abs()).sum::<f64>() / total as f64;
    Ok(DecorrelationReport {
        mean_correlation: corr.iter().sum::<f64>() / corr.len() as f64,
        mean_abs_error: mae,
        permutations: perms.len(),
        examples: test_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnet::NetConfig;
    use crate::graph_sim::GraphFamily;
    use crate::seed::rng_from_seed;

    fn er_scenario(trials: usize, seed: u64) -> Scenario {
        let gen = GeneratorConfig::uniform_sparse(20, 30, 0.9, 0).with_family(GraphFamily::ErSubstitute);
        Scenario::new("er-20", GeneratorConfig { edge_prob: 0.1, c: 0.3, ..gen }, trials, seed)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("glasso".parse::<Method>().is_err());
    }

    #[test]
    fn random_scorer_is_at_chance() {
        let s = Scenario { prec_fractions: vec![0.05, 0.5], ..er_scenario(100, 1) };
        let ctx = MethodContext::new(None);
        let r = &run_benchmark(&ctx, &s, &[Method::Random], 1).unwrap()[0];
        assert!((r.auc - 0.5).abs() < 0.05, "{}", r.auc);
        let base: f64 = (0..s.trials).map(|t| {
            let y = s.trial(t).0.y_binary();
            y.iter().filter(|&&v| v).count() as f64 / y.len() as f64
        }).sum::<f64>() / s.trials as f64;
        for p in &r.prec_at_k {
            assert!((p.mean - base).abs() < 0.05, "prec {} vs base rate {base}", p.mean);
        }
        assert_eq!(r.trials, 100);
        assert!(r.failures.is_empty());
    }

    #[test]
    fn reports_are_reproducible_and_thread_independent() {
        let s = er_scenario(6, 2);
        let ctx = MethodContext::new(None);
        let methods = [Method::Random, Method::PartialCorr, Method::LedoitWolf, Method::GlassoCv, Method::Oracle];
        let strip = |mut v: Vec<MetricRecord>| {
            for r in &mut v {
                r.wall_seconds = 0.0;
                r.total_seconds = 0.0;
            }
            v
        };
        let a = strip(run_benchmark(&ctx, &s, &methods, 1).unwrap());
        let b = strip(run_benchmark(&ctx, &s, &methods, 1).unwrap());
        let c = strip(run_benchmark(&ctx, &s, &methods, 3).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn oracle_dominates_and_glasso_optimal_beats_cv() {
        let s = er_scenario(10, 3);
        let ctx = MethodContext::new(None);
        let r = run_benchmark(&ctx, &s, &[Method::Oracle, Method::GlassoCv, Method::GlassoOptimal], 1).unwrap();
        assert_eq!(r[0].auc, 1.0);
        // per trial, the AUC-optimal penalty cannot do worse than the grid
        // point cross-validation picked
        for (opt, cv) in r[2].trial_aucs.iter().zip(&r[1].trial_aucs) {
            assert!(opt >= cv, "{opt} < {cv}");
        }
    }

    #[test]
    fn standard_error_shrinks_with_trials() {
        let ctx = MethodContext::new(None);
        let se = |trials| run_benchmark(&ctx, &er_scenario(trials, 4), &[Method::PartialCorr], 1).unwrap()[0].auc_stderr;
        let ratio = se(25) / se(100);
        // 1/sqrt(trials) predicts 2; the two estimates are themselves noisy
        assert!((1.4..2.8).contains(&ratio), "{ratio}");
    }

    #[test]
    fn network_methods_need_a_model_of_sufficient_size() {
        let s = er_scenario(2, 5);
        let ctx = MethodContext::new(None);
        assert!(matches!(run_benchmark(&ctx, &s, &[Method::DeepGraph], 1), Err(EvalError::MissingModel(_))));
        let cfg = NetConfig { p: 10, depth: 3, feature_maps: 2, dilation_schedule: crate::dnet::DilationSchedule::Powers };
        let model = DNetModel::init(cfg, &mut rng_from_seed(0)).unwrap();
        let ctx = MethodContext::new(Some(&model));
        assert!(matches!(run_benchmark(&ctx, &s, &[Method::DeepGraph], 1), Err(EvalError::InvalidArgument(_))));
        assert!(run_benchmark(&ctx, &s, &[], 1).is_err());
    }

    #[test]
    fn network_methods_run_with_padding() {
        let s = er_scenario(3, 6);
        let cfg = NetConfig { p: 24, depth: 4, feature_maps: 3, dilation_schedule: crate::dnet::DilationSchedule::Powers };
        let model = DNetModel::init(cfg, &mut rng_from_seed(1)).unwrap();
        let mut ctx = MethodContext::new(Some(&model));
        ctx.permutations.count = 3;
        let r = run_benchmark(&ctx, &s, &[Method::DeepGraph, Method::DeepGraphPerm], 1).unwrap();
        assert!(r.iter().all(|m| m.trials == 3 && (0.0..=1.0).contains(&m.auc)));
    }

    #[test]
    fn csv_report_layout() {
        let s = er_scenario(3, 7);
        let r = run_benchmark(&MethodContext::new(None), &s, &[Method::Random], 1).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,scenario,metric,mean,stderr,trials");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("random,er-20,auc,"));
        assert!(lines[2].starts_with("random,er-20,prec@0.05,"));
        assert!(lines[4].starts_with("random,er-20,wall_seconds_median,"));
    }

    #[test]
    fn identical_permutations_give_perfectly_correlated_errors() {
        let cfg = NetConfig { p: 8, depth: 3, feature_maps: 3, dilation_schedule: crate::dnet::DilationSchedule::Powers };
        let model = DNetModel::init(cfg, &mut rng_from_seed(2)).unwrap();
        let gen = GeneratorConfig::uniform_sparse(8, 20, 0.7, 3);
        let mut stream = crate::graph_sim::DatasetStream::new(gen).unwrap();
        let test: Vec<_> = stream.take_examples(5).unwrap().into_iter().map(|e| (e.sigma_hat, e.y_soft)).collect();
        let id: Vec<usize> = (0..8).collect();
        let r = permutation_error_correlation(&model, &test, &[id.clone(), id.clone(), id]).unwrap();
        assert!((r.mean_correlation - 1.0).abs() < 1e-12);
        assert!(r.mean_abs_error > 0.0);
        let perms = PermutationSpec { count: 4, include_identity: true, seed: 9 }.permutations(8);
        let r = permutation_error_correlation(&model, &test, &perms).unwrap();
        assert!(r.mean_correlation <= 1.0 && r.mean_correlation > -1.0);
        assert!(permutation_error_correlation(&model, &test, &perms[..1]).is_err());
    }
}
