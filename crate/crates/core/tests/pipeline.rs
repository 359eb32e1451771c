//! End-to-end flow: stream examples, train a small network, persist it and
//! score held-out graphs through every inference path.

use std::sync::OnceLock;

use deepgraph::dnet::{DNetModel, DilationSchedule, NetConfig};
use deepgraph::eval::{auc, run_benchmark, Method, MethodContext, Scenario};
use deepgraph::graph_sim::{DatasetStream, GeneratorConfig};
use deepgraph::infer::{pad_and_predict, predict, predict_covariance, predict_ensemble, Aggregator, PermutationSpec};
use deepgraph::seed::rng_from_seed;
use deepgraph::train::{train_loop, TrainConfig};

fn generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig { c: 1.0, ..GeneratorConfig::uniform_sparse(8, 200, 0.8, seed) }
}

/// Trained once and shared by every test in this file.
fn trained() -> DNetModel<f32> {
    static MODEL: OnceLock<DNetModel<f32>> = OnceLock::new();
    MODEL.get_or_init(train_small).clone()
}

fn train_small() -> DNetModel<f32> {
    let cfg = NetConfig { p: 8, depth: 3, feature_maps: 8, dilation_schedule: DilationSchedule::Powers };
    let model = DNetModel::init(cfg, &mut rng_from_seed(1)).unwrap();
    let train = TrainConfig { lr: 0.01, max_examples: 8000, eval_every: 25, val_examples: 64, ..TrainConfig::default() };
    let (model, history) = train_loop(model, &mut DatasetStream::new(generator(2)).unwrap(), &train).unwrap();
    assert!(!history.rows.is_empty());
    model
}

#[test]
fn trained_network_round_trips_and_beats_chance() {
    let model = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.dgnn");
    model.save(&path).unwrap();
    let loaded: DNetModel<f32> = DNetModel::load(&path).unwrap();

    let test = DatasetStream::with_label(generator(3), "held-out").unwrap().take_examples(20).unwrap();
    let mut total = 0.0;
    for ex in &test {
        let a = predict_covariance(&model, &ex.sigma_hat).unwrap();
        let b = predict_covariance(&loaded, &ex.sigma_hat).unwrap();
        assert_eq!(a.upper_values(), b.upper_values());
        total += auc(&a.upper_values(), &ex.y_binary).unwrap();
    }
    assert!(total / 20.0 > 0.7, "mean held-out AUC {}", total / 20.0);
}

#[test]
fn inference_paths_agree() {
    let model = trained();
    let scenario = Scenario::new("s", generator(4), 1, 5);
    let (_, data) = scenario.trial(0);
    let direct = predict(&model, &data).unwrap();
    let sigma = deepgraph::infer::covariance_of(&data).unwrap();
    let identity_only = PermutationSpec { count: 1, include_identity: true, seed: 0 };
    assert_eq!(predict_ensemble(&model, &sigma, &identity_only, Aggregator::Mean).unwrap(), direct);
    assert_eq!(pad_and_predict(&model, &sigma).unwrap(), direct);

    let small = deepgraph::linalg::SymmetricMatrix::new(sigma.as_matrix().submatrix(&[0, 1, 2, 3, 4])).unwrap();
    let cropped = pad_and_predict(&model, &small).unwrap();
    assert_eq!(cropped.p(), 5);
    assert!(cropped.upper_values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn benchmark_ranks_the_trained_network_above_chance() {
    let model = trained();
    let ctx = MethodContext::new(Some(&model));
    let scenario = Scenario::new("small", generator(6), 40, 7);
    let recs = run_benchmark(&ctx, &scenario, &[Method::Random, Method::DeepGraph, Method::Oracle], 1).unwrap();
    let (random, net, oracle) = (&recs[0], &recs[1], &recs[2]);
    assert!(recs.iter().all(|r| r.failures.is_empty() && r.trials == 40));
    assert!((random.auc - 0.5).abs() < 0.1, "{}", random.auc);
    assert!(net.auc > random.auc + 0.15, "{} vs {}", net.auc, random.auc);
    assert_eq!(oracle.auc, 1.0);
}
