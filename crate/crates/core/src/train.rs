//! Deterministic mini-batch training, metrics and gradient verification.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::nn::{softmax, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Only the adapter is updated when set.
    pub freeze_bfm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            schedule: LrSchedule::Cosine,
            seed: 0,
            freeze_bfm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EadError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EadError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(EadError::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One model input with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Matrix,
    pub label: usize,
    pub subject_id: String,
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(EadError::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub averaging: String,
}

impl MetricsReport {
    /// Support-weighted precision, recall and F1; classes never predicted score
    /// zero precision.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(EadError::Dimension("confusion matrix must be square and nonempty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(EadError::Domain("confusion matrix is empty".into()));
        }
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let support: u64 = confusion[c].iter().sum();
            if support == 0 {
                continue;
            }
            let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let tp = confusion[c][c] as f64;
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = tp / support as f64;
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let w = support as f64 / total as f64;
            precision += w * p;
            recall += w * r;
            f1 += w * f;
        }
        Ok(MetricsReport {
            accuracy: correct as f64 / total as f64,
            precision,
            recall,
            f1,
            confusion,
            averaging: "weighted".into(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(EadError::Dimension("truth and prediction lengths differ".into()));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(EadError::Domain(format!("class index out of range ({t}, {p})")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

/// Per-sample model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub subject_id: String,
}

pub fn predict(model: &Model, split: &[Example]) -> Result<Vec<Prediction>> {
    split
        .iter()
        .map(|ex| {
            let logits = model.logits(&ex.input)?;
            Ok(Prediction {
                label: ex.label,
                predicted: argmax(&logits),
                probabilities: softmax(&logits),
                subject_id: ex.subject_id.clone(),
            })
        })
        .collect()
}

/// Argmax predictions scored against the split's labels.
pub fn evaluate(model: &Model, split: &[Example]) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(EadError::Config("cannot evaluate an empty split".into()));
    }
    let preds = predict(model, split)?;
    let truth: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let guess: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    MetricsReport::from_predictions(&truth, &guess, model.num_classes())
}

/// Mean loss and accuracy without gradients.
pub fn loss_and_accuracy(model: &Model, split: &[Example]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in split {
        let logits = model.logits(&ex.input)?;
        loss += cross_entropy(&logits, ex.label)?.0;
        correct += usize::from(argmax(&logits) == ex.label);
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

/// CSV epoch log, one line per epoch after the header.
pub fn format_epoch_log(trace: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, n: usize) -> Self {
        Optimizer {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Updates `params[..limit]` in place.
    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64, limit: usize) {
        self.step += 1;
        match self.kind {
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
                let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
                for i in 0..limit {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + weight_decay * params[i]);
                }
            }
            OptimizerKind::Sgd => {
                for i in 0..limit {
                    params[i] -= lr * (grad[i] + weight_decay * params[i]);
                }
            }
        }
    }
}

fn scheduled_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let progress = step as f64 / total.max(1) as f64;
            cfg.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

/// Trains `model` on `train`, selecting the epoch with the best validation accuracy
/// (earliest on ties). The train set is reshuffled every epoch from `cfg.seed`.
pub fn train_loop(
    mut model: Model,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(EadError::Config("train and validation splits must be nonempty".into()));
    }
    let k = model.num_classes();
    if let Some(ex) = train.iter().chain(val).find(|e| e.label >= k) {
        return Err(EadError::Config(format!(
            "label {} exceeds the {k}-class head",
            ex.label
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = model.num_params();
    let limit = if cfg.freeze_bfm {
        model.num_adapter_params()
    } else {
        n_params
    };
    let mut opt = Optimizer::new(cfg.optimizer, n_params);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0; n_params];
            for &i in batch {
                let ex = &train[i];
                let sg = model.loss_and_grad(&ex.input, ex.label)?;
                if !sg.loss.is_finite() {
                    return Err(EadError::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b}"
                    )));
                }
                epoch_loss += sg.loss;
                epoch_correct += usize::from(argmax(&sg.logits) == ex.label);
                for (g, s) in grad.iter_mut().zip(&sg.grad) {
                    *g += s;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            let lr = scheduled_lr(cfg, step, total_steps);
            let mut flat = model.flatten();
            opt.apply(&mut flat, &grad, lr, cfg.weight_decay, limit);
            model.assign(&flat)?;
            step += 1;
        }
        let (val_loss, val_acc) = loss_and_accuracy(&model, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            train_acc: epoch_correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            record.train_loss,
            record.train_acc,
            val_loss,
            val_acc
        );
        trace.push(record);
        if best.as_ref().map_or(true, |(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        trace,
    })
}

/// A scalar function of a parameter vector with an analytic gradient.
pub trait Objective {
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, values: &[f64]) -> Result<()>;
    fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)>;
}

/// Cross-entropy of one labelled sample under a model.
pub struct SampleObjective<'a> {
    pub model: Model,
    pub input: &'a Matrix,
    pub label: usize,
}

impl Objective for SampleObjective<'_> {
    fn parameters(&self) -> Vec<f64> {
        self.model.flatten()
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        self.model.assign(values)
    }

    fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
        let sg = self.model.loss_and_grad(self.input, self.label)?;
        Ok((sg.loss, sg.grad))
    }
}

/// `sum(upstream ⊙ adapter(input))` for checking the adapter on its own.
pub struct AdapterObjective<'a> {
    pub adapter: crate::model::Adapter,
    pub input: &'a Matrix,
    pub upstream: &'a Matrix,
}

impl Objective for AdapterObjective<'_> {
    fn parameters(&self) -> Vec<f64> {
        self.adapter.params.flatten()
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        self.adapter.params.assign(values)
    }

    fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
        let a = &self.adapter;
        let y = crate::adapter::adapter_forward(self.input, &a.params, &a.config)?;
        let loss = crate::matrix::dot(y.as_slice(), self.upstream.as_slice());
        let (g, _) = crate::adapter::adapter_grad(self.input, &a.params, &a.config, self.upstream)?;
        Ok((loss, g.flatten()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
}

pub const FD_STEP: f64 = 1e-5;
/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences at `coordinates` random parameters (all of them if fewer)
/// against the analytic gradient.
pub fn gradient_check(
    objective: &mut dyn Objective,
    tolerance: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let base = objective.parameters();
    if base.is_empty() {
        return Ok(GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst_coordinate: None,
        });
    }
    let (_, analytic) = objective.loss_and_gradient()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if coordinates >= base.len() {
        (0..base.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, base.len(), coordinates).into_vec()
    };
    let mut worst = (0.0, None);
    let mut offending = Vec::new();
    let mut probe = base.clone();
    for &i in &chosen {
        probe[i] = base[i] + FD_STEP;
        objective.set_parameters(&probe)?;
        let up = objective.loss_and_gradient()?.0;
        probe[i] = base[i] - FD_STEP;
        objective.set_parameters(&probe)?;
        let down = objective.loss_and_gradient()?.0;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(i));
        }
        if err > tolerance {
            offending.push(i);
        }
    }
    objective.set_parameters(&base)?;
    if !offending.is_empty() {
        return Err(EadError::Verification {
            max_rel_err: worst.0,
            tolerance,
            offending,
        });
    }
    Ok(GradCheckReport {
        checked: chosen.len(),
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::bfm::BfmConfig;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_cost_log_k() {
        let (loss, grad) = cross_entropy(&[0.3; 40], 17).unwrap();
        assert!((loss - 40f64.ln()).abs() < 1e-12);
        assert!((loss - 3.6889).abs() < 1e-4);
        assert!((grad[17] + 1.0 - 1.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_costs_nothing() {
        let mut logits = vec![0.0; 5];
        logits[2] = 1e4;
        assert!(cross_entropy(&logits, 2).unwrap().0 <= 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_softmax() {
        let logits = [0.3, -1.2, 2.5, 0.0, 0.7, -0.4, 1.9];
        let (loss, grad) = cross_entropy(&logits, 4).unwrap();
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        assert!((loss + probs[4].ln()).abs() <= 1e-12);
        for (k, g) in grad.iter().enumerate() {
            let expect = probs[k] - if k == 4 { 1.0 } else { 0.0 };
            assert!((g - expect).abs() <= 1e-12);
        }
        assert!(grad.iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(EadError::Domain(_))));
    }

    #[test]
    fn hand_computed_confusion_metrics() {
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![2, 4]]).unwrap();
        // class 0: tp 3, predicted 5, support 4; class 1: tp 4, predicted 5, support 6
        let (p0, p1) = (3.0 / 5.0, 4.0 / 5.0);
        let (r0, r1) = (3.0 / 4.0, 4.0 / 6.0);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((r.accuracy - 0.7).abs() <= 1e-12);
        assert!((r.precision - (0.4 * p0 + 0.6 * p1)).abs() <= 1e-12);
        assert!((r.recall - (0.4 * r0 + 0.6 * r1)).abs() <= 1e-12);
        assert!((r.f1 - (0.4 * f(p0, r0) + 0.6 * f(p1, r1))).abs() <= 1e-12);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let r = MetricsReport::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        let r = MetricsReport::from_predictions(&[0, 1, 0, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.precision, 0.25);
    }

    proptest! {
        #[test]
        fn gradient_sums_to_zero(logits in prop::collection::vec(-30.0f64..30.0, 2..50), pick in 0usize..1000) {
            let label = pick % logits.len();
            let (_, grad) = cross_entropy(&logits, label).unwrap();
            prop_assert!(grad.iter().sum::<f64>().abs() <= 1e-12);
        }

        #[test]
        fn argmax_ignores_constant_shift(logits in prop::collection::vec(-10.0f64..10.0, 1..20), shift in -100.0f64..100.0) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            // shifting can merge near-ties through rounding; compare only clear winners
            let best = argmax(&logits);
            let margin = logits.iter().enumerate().filter(|(i, _)| *i != best)
                .map(|(_, v)| logits[best] - v).fold(f64::INFINITY, f64::min);
            prop_assume!(margin > 1e-9);
            prop_assert_eq!(argmax(&shifted), best);
        }

        #[test]
        fn accuracy_matches_counter(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..100)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let r = MetricsReport::from_predictions(&truth, &pred, 4).unwrap();
            let mut hits = 0;
            for (t, p) in truth.iter().zip(&pred) {
                if t == p { hits += 1; }
            }
            prop_assert_eq!(r.accuracy, hits as f64 / truth.len() as f64);
            for m in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    fn toy_examples(n: usize, shape: (usize, usize), k: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Example {
                input: Matrix::from_fn(shape.0, shape.1, |_, _| rng.gen_range(-1.0..1.0)),
                label: i % k,
                subject_id: format!("s{i}"),
            })
            .collect()
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = BfmConfig {
            embed_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            patch_len: 8,
            ..BfmConfig::desk(4, 32, 3)
        };
        Model::new(None, cfg, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = toy_examples(6, (4, 32), 3, 1);
        let model = tiny_model(2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train_loop(model.clone(), &data, &data, &cfg).unwrap();
        let before = model.flatten();
        let after = out.model.flatten();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn memorizes_a_single_sample() {
        let data = toy_examples(1, (4, 32), 3, 3);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        let out = train_loop(tiny_model(4), &data, &data, &cfg).unwrap();
        let last = out.trace.last().unwrap();
        assert!(last.val_loss < 1e-3, "loss {}", last.val_loss);
    }

    #[test]
    fn same_seed_same_trace() {
        let data = toy_examples(12, (4, 32), 3, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_loop(tiny_model(6), &data, &data[..4], &cfg).unwrap();
        let b = train_loop(tiny_model(6), &data, &data[..4], &cfg).unwrap();
        assert_eq!(format_epoch_log(&a.trace), format_epoch_log(&b.trace));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn empty_split_rejected() {
        let data = toy_examples(3, (4, 32), 3, 0);
        let err = train_loop(tiny_model(0), &data, &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, EadError::Config(_)));
        assert!(evaluate(&tiny_model(0), &[]).is_err());
    }

    #[test]
    fn initial_loss_near_log_k() {
        let data = toy_examples(64, (4, 32), 3, 8);
        let (loss, _) = loss_and_accuracy(&tiny_model(1), &data).unwrap();
        assert!((loss - 3f64.ln()).abs() <= 0.05, "loss {loss}");
    }

    #[test]
    fn gradient_check_full_model() {
        let adapter = AdapterConfig::default_for(3, 48, 4, 32).unwrap();
        let bfm = BfmConfig {
            embed_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            patch_len: 8,
            ..BfmConfig::desk(4, 32, 3)
        };
        let model = Model::new(Some(adapter), bfm, 3).unwrap();
        let x = toy_examples(1, (3, 48), 3, 2).remove(0).input;
        let mut obj = SampleObjective { model, input: &x, label: 1 };
        let report = gradient_check(&mut obj, 1e-4, 250, 0).unwrap();
        assert_eq!(report.checked, 250);
        assert!(report.max_rel_error <= 1e-4);
    }

    #[test]
    fn gradient_check_reports_wrong_gradients() {
        struct Wrong(Vec<f64>);
        impl Objective for Wrong {
            fn parameters(&self) -> Vec<f64> {
                self.0.clone()
            }
            fn set_parameters(&mut self, v: &[f64]) -> Result<()> {
                self.0 = v.to_vec();
                Ok(())
            }
            fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
                // d/dx x^2 is 2x, report 3x for the second coordinate
                let g = vec![2.0 * self.0[0], 3.0 * self.0[1]];
                Ok((self.0.iter().map(|v| v * v).sum(), g))
            }
        }
        match gradient_check(&mut Wrong(vec![1.0, 1.0]), 1e-4, 10, 0) {
            Err(EadError::Verification { offending, .. }) => assert_eq!(offending, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_model_passes_vacuously() {
        struct Empty;
        impl Objective for Empty {
            fn parameters(&self) -> Vec<f64> {
                Vec::new()
            }
            fn set_parameters(&mut self, _: &[f64]) -> Result<()> {
                Ok(())
            }
            fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
                Ok((0.0, Vec::new()))
            }
        }
        let r = gradient_check(&mut Empty, 1e-4, 200, 0).unwrap();
        assert_eq!(r.checked, 0);
    }
}
