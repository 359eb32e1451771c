//! Optimization of the D-Net: cross-entropy against soft labels, ADAM,
//! streaming training with validation-based stopping, and fine-tuning.

use std::io::Write;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnet::{DNetError, DNetModel, Mode, Real, Tensor4};
use crate::eval::metrics::auc;
use crate::graph_sim::{edge_pair, DatasetStream, GraphFamily, PrecisionSample, SimError, TrainingExample};
use crate::seed::derive_rng;

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` inside the loss.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] DNetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("training diverged at step {step}: loss is {loss}")]
    DivergenceDetected { step: u64, loss: f64, history: TrainingHistory },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// `|partial correlation|` on true edges.
    Soft,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub val_examples: usize,
    /// Optimizer steps between validation passes.
    pub eval_every: u64,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub max_examples: u64,
    pub label_mode: LabelMode,
    /// Reset the head to the target prior before the first step.
    pub prior_head: bool,
    /// Root of the initialization seed space.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            val_examples: 256,
            eval_every: 200,
            patience: 10,
            min_delta: 1e-4,
            max_examples: 100_000,
            label_mode: LabelMode::Soft,
            prior_head: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.patience < 1 || self.eval_every < 1 {
            return Err(TrainError::InvalidConfig("batch_size, patience and eval_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        if self.val_examples < 1 {
            return Err(TrainError::InvalidConfig("val_examples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training targets for one precision sample, in edge order.
pub fn soft_labels(ps: &PrecisionSample, mode: LabelMode) -> Vec<f64> {
    match mode {
        LabelMode::Soft => ps.y_soft(),
        LabelMode::Binary => ps.y_binary().into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

fn example_targets(ex: &TrainingExample, mode: LabelMode) -> Vec<f64> {
    match mode {
        LabelMode::Soft => ex.y_soft.clone(),
        LabelMode::Binary => ex.y_binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

/// Stacks edge-order targets into symmetric `b × 1 × p × p` maps (zero diagonal).
pub fn target_tensor<T: Real>(targets: &[Vec<f64>], p: usize) -> Tensor4<T> {
    let mut t = Tensor4::zeros(targets.len(), 1, p, p);
    for (b, y) in targets.iter().enumerate() {
        for (e, &v) in y.iter().enumerate() {
            let (i, j) = edge_pair(p, e);
            let v = T::from_f64(v).expect("representable");
            t.set(b, 0, i, j, v);
            t.set(b, 0, j, i, v);
        }
    }
    t
}

/// Mean binary cross-entropy over the batch and all off-diagonal entries, and
/// its gradient with respect to `pred`.
pub fn cross_entropy_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> (f64, Tensor4<T>) {
    assert_eq!(pred.shape(), target.shape(), "prediction and target shapes differ");
    let [b, _, p, _] = pred.shape();
    let count = (b * p * (p - 1)) as f64;
    let mut grad = Tensor4::zeros(b, 1, p, p);
    let mut loss = 0.0;
    for bi in 0..b {
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    continue;
                }
                let yh = pred.get(bi, 0, i, j).to_f64().expect("finite").clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
                let y = target.get(bi, 0, i, j).to_f64().expect("finite");
                loss -= y * yh.ln() + (1.0 - y) * (1.0 - yh).ln();
                let g = (yh - y) / (yh * (1.0 - yh)) / count;
                grad.set(bi, 0, i, j, T::from_f64(g).expect("representable"));
            }
        }
    }
    (loss / count, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k].to_f64().expect("finite");
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        let step = state.lr * mh / (vh.sqrt() + state.eps);
        if step != 0.0 {
            params[k] = T::from_f64(params[k].to_f64().expect("finite") - step).expect("representable");
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub examples_seen: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Saturated,
    MaxExamples,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
    pub best_row: Option<usize>,
    pub stop: Option<StopReason>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,examples_seen,train_loss,val_loss,val_auc,wall_seconds")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.8},{:.8},{:.6},{:.3}",
                r.step, r.examples_seen, r.train_loss, r.val_loss, r.val_auc, r.wall_seconds
            )?;
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&HistoryRow> {
        self.best_row.map(|k| &self.rows[k])
    }
}

/// Held-out examples with precomputed input and target tensors.
pub struct ValidationSet<T: Real> {
    pub examples: Vec<TrainingExample>,
    inputs: Vec<Tensor4<T>>,
    targets: Vec<Tensor4<T>>,
}

const VAL_CHUNK: usize = 32;

impl<T: Real> ValidationSet<T> {
    pub fn new(examples: Vec<TrainingExample>, mode: LabelMode) -> Result<Self> {
        let p = examples.first().map(|e| e.p()).unwrap_or(0);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for chunk in examples.chunks(VAL_CHUNK) {
            let sig: Vec<_> = chunk.iter().map(|e| &e.sigma_hat).collect();
            inputs.push(Tensor4::from_covariances(&sig)?);
            let y: Vec<Vec<f64>> = chunk.iter().map(|e| example_targets(e, mode)).collect();
            targets.push(target_tensor(&y, p));
        }
        Ok(Self { examples, inputs, targets })
    }

    /// Mean loss and mean per-example AUC under eval-mode inference.
    pub fn evaluate(&self, model: &DNetModel<T>) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut aucs = Vec::new();
        for (k, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            let out = model.predict(x)?;
            loss += cross_entropy_loss(&out, y).0 * x.b as f64;
            for b in 0..x.b {
                let ex = &self.examples[k * VAL_CHUNK + b];
                let p = ex.p();
                let scores: Vec<f64> = (0..ex.y_binary.len())
                    .map(|e| {
                        let (i, j) = edge_pair(p, e);
                        out.get(b, 0, i, j).to_f64().expect("finite")
                    })
                    .collect();
                if let Ok(a) = auc(&scores, &ex.y_binary) {
                    aucs.push(a);
                }
            }
        }
        let mean_auc = if aucs.is_empty() { f64::NAN } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
        Ok((loss / self.examples.len() as f64, mean_auc))
    }
}

/// Zeroes the head weights and sets the head bias to the logit of the mean
/// target over `examples`, so the network starts as the best constant
/// predictor instead of spending its first steps walking the bias there.
pub fn set_prior_head<T: Real>(model: &mut DNetModel<T>, examples: &[TrainingExample], mode: LabelMode) {
    let (sum, count) = examples
        .iter()
        .map(|e| example_targets(e, mode))
        .fold((0.0, 0usize), |(s, c), y| (s + y.iter().sum::<f64>(), c + y.len()));
    let mean = if count > 0 { sum / count as f64 } else { 0.5 };
    let mean = mean.clamp(1e-4, 1.0 - 1e-4);
    let layout = model.layout().clone();
    let params = model.params_mut();
    params[layout.head_weight].iter_mut().for_each(|w| *w = T::zero());
    params[layout.head_bias] = T::from_f64((mean / (1.0 - mean)).ln()).expect("finite");
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut DNetModel<T>,
    adam: &mut AdamState,
    batch: &[TrainingExample],
    mode: LabelMode,
) -> Result<f64> {
    let p = model.p_train();
    let sig: Vec<_> = batch.iter().map(|e| &e.sigma_hat).collect();
    let x = Tensor4::from_covariances(&sig)?;
    let y: Vec<Vec<f64>> = batch.iter().map(|e| example_targets(e, mode)).collect();
    let target = target_tensor(&y, p);
    let (out, cache) = model.forward(&x, Mode::Train)?;
    let (loss, grad) = cross_entropy_loss(&out, &target);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = model.backward(&cache, &grad)?;
    model.update_running_stats(&cache)?;
    adam_step(model.params_mut(), &grads, adam);
    Ok(loss)
}

/// Streams fresh examples until validation loss stops improving or the
/// example budget is spent, returning the best-validation checkpoint.
pub fn train_loop<T: Real>(
    mut model: DNetModel<T>,
    stream: &mut DatasetStream,
    cfg: &TrainConfig,
) -> Result<(DNetModel<T>, TrainingHistory)> {
    cfg.validate()?;
    if stream.config().p != model.p_train() {
        return Err(TrainError::InvalidConfig(format!(
            "stream p = {} but network expects {}",
            stream.config().p,
            model.p_train()
        )));
    }
    let val_examples = DatasetStream::with_label(stream.config().clone(), "val")?.take_examples(cfg.val_examples)?;
    let val = ValidationSet::<T>::new(val_examples, cfg.label_mode)?;
    let mut adam = AdamState::new(model.num_params(), cfg.lr);
    let mut history = TrainingHistory::default();
    let start = Instant::now();
    let mut best: Option<(f64, DNetModel<T>)> = None;
    let mut bad_evals = 0;
    let (mut step, mut seen) = (0u64, 0u64);
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);
    let evaluate = |model: &DNetModel<T>,
                        step: u64,
                        seen: u64,
                        train_loss: f64,
                        history: &mut TrainingHistory,
                        best: &mut Option<(f64, DNetModel<T>)>|
     -> Result<bool> {
        let (val_loss, val_auc) = val.evaluate(model)?;
        history.rows.push(HistoryRow {
            step,
            examples_seen: seen,
            train_loss,
            val_loss,
            val_auc,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        info!("step {step} examples {seen}: train {train_loss:.5} val {val_loss:.5} auc {val_auc:.4}");
        let improved = match best {
            Some((b, _)) => val_loss < *b - cfg.min_delta,
            None => true,
        };
        if improved {
            *best = Some((val_loss, model.clone()));
            history.best_row = Some(history.rows.len() - 1);
        }
        Ok(improved)
    };
    while seen < cfg.max_examples {
        let take = (cfg.batch_size as u64).min(cfg.max_examples - seen) as usize;
        let batch = stream.take_examples(take)?;
        if step == 0 && cfg.prior_head {
            set_prior_head(&mut model, &batch, cfg.label_mode);
        }
        let loss = train_step(&mut model, &mut adam, &batch, cfg.label_mode)?;
        step += 1;
        seen += take as u64;
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { step, loss, history });
        }
        loss_acc += loss;
        loss_n += 1;
        if step % cfg.eval_every == 0 {
            let improved = evaluate(&model, step, seen, loss_acc / loss_n as f64, &mut history, &mut best)?;
            (loss_acc, loss_n) = (0.0, 0);
            bad_evals = if improved { 0 } else { bad_evals + 1 };
            if bad_evals >= cfg.patience {
                history.stop = Some(StopReason::Saturated);
                break;
            }
        }
    }
    if history.stop.is_none() {
        if loss_n > 0 {
            evaluate(&model, step, seen, loss_acc / loss_n as f64, &mut history, &mut best)?;
        }
        history.stop = Some(StopReason::MaxExamples);
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub small_world_examples: usize,
    pub uniform_examples: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self { batch_size: base.batch_size, lr: base.lr / 10.0, small_world_examples: 1000, uniform_examples: 1000, seed: 0 }
    }
}

/// Shuffled mixture of small-world examples and examples from `uniform`.
pub fn finetune_mixture(
    uniform: &crate::graph_sim::GeneratorConfig,
    ft: &FineTuneConfig,
) -> Result<Vec<TrainingExample>> {
    let mut sw_cfg = uniform.clone().with_family(GraphFamily::SmallWorld);
    sw_cfg.seed = ft.seed;
    let mut us_cfg = uniform.clone();
    us_cfg.seed = ft.seed;
    let mut out = DatasetStream::with_label(sw_cfg, "finetune/small-world")?.take_examples(ft.small_world_examples)?;
    out.extend(DatasetStream::with_label(us_cfg, "finetune/uniform")?.take_examples(ft.uniform_examples)?);
    out.shuffle(&mut derive_rng(ft.seed, "finetune/shuffle", 0));
    Ok(out)
}

/// One epoch over `mixture` with a fresh optimizer. Returns the updated model
/// and the number of examples consumed.
pub fn fine_tune<T: Real>(
    mut model: DNetModel<T>,
    mixture: &[TrainingExample],
    cfg: &FineTuneConfig,
    mode: LabelMode,
) -> Result<(DNetModel<T>, usize)> {
    if cfg.batch_size < 1 {
        return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut adam = AdamState::new(model.num_params(), cfg.lr);
    let mut consumed = 0;
    for (step, batch) in mixture.chunks(cfg.batch_size).enumerate() {
        let loss = train_step(&mut model, &mut adam, batch, mode)?;
        consumed += batch.len();
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { step: step as u64 + 1, loss, history: TrainingHistory::default() });
        }
    }
    Ok((model, consumed))
}
