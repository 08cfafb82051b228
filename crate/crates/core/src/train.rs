//! Cross-entropy training with SGD momentum: shuffled mini-batch epochs,
//! deterministic augmentation, and validation-accuracy model selection.

use crate::data::{augment, AugmentConfig, DataError, ImageSample};
use crate::models::{Model, ModelError};
use crate::seeding;
use crate::tensor::{Graph, TensorError, TensorId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{split} split is empty")]
    EmptyDataset { split: &'static str },
    #[error("optimizer state misaligned: parameter {name} has {param} values, gradient has {grad}")]
    GradShapeMismatch {
        name: String,
        param: usize,
        grad: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size; zero is allowed and leaves parameters untouched.
    pub learning_rate: f64,
    /// Momentum coefficient in [0, 1).
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub global_seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            global_seed: 0,
            augment: AugmentConfig::disabled(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Mean over the batch of -log softmax(logits)[label] (log-sum-exp form).
pub fn cross_entropy(graph: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<TensorId, TensorError> {
    graph.cross_entropy(logits, labels)
}

/// One velocity buffer per parameter, zero-initialized, shape-matched.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        OptimizerState {
            velocities: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

/// v <- mu * v + g; w <- w - lr * v, per parameter, in place.
pub fn sgd_momentum_step(
    model: &mut Model,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    learning_rate: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    for ((param, grad), velocity) in model.params_mut().iter_mut().zip(grads).zip(&mut state.velocities) {
        if grad.len() != param.value.numel() {
            return Err(TrainError::GradShapeMismatch {
                name: param.name.clone(),
                param: param.value.numel(),
                grad: grad.len(),
            });
        }
        let values = param.value.data_mut();
        for ((w, &g), v) in values.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = momentum * *v + g;
            *w -= learning_rate * *v;
        }
    }
    Ok(())
}

/// One pass over the training set: shuffle with a seed derived from
/// (global_seed, epoch), iterate mini-batches (the short final batch is
/// kept), augment when enabled, and take one optimizer step per batch.
/// Returns (sample-weighted mean loss, accuracy).
pub fn train_epoch(
    model: &mut Model,
    train: &[ImageSample],
    config: &TrainConfig,
    epoch: u64,
    state: &mut OptimizerState,
) -> Result<(f64, f64), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset { split: "train" });
    }
    let shuffle_seed = seeding::derive_seed(
        config.global_seed,
        &[seeding::fnv1a64(b"shuffle"), epoch],
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(config.batch_size) {
        let mut graph = Graph::new();
        let mut images = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &idx in batch {
            let sample = &train[idx];
            let pixels = if config.augment.enabled {
                augment(sample, &config.augment, epoch, config.global_seed)?.pixels
            } else {
                sample.pixels.clone()
            };
            images.push(graph.leaf(pixels));
            labels.push(sample.label.index());
        }
        let pass = model.forward(&mut graph, &images, true)?;
        let loss = graph.cross_entropy(pass.logits, &labels)?;
        graph.backward(loss)?;

        let logits = graph.data(pass.logits);
        let classes = model.num_classes();
        for (row, &label) in logits.chunks(classes).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        total_loss += graph.data(loss)[0] * batch.len() as f64;

        let grads: Vec<Vec<f64>> = pass
            .param_ids
            .iter()
            .map(|&id| graph.grad(id).expect("tracked parameter has grad").to_vec())
            .collect();
        sgd_momentum_step(model, &grads, state, config.learning_rate, config.momentum)?;
    }
    let n = train.len() as f64;
    Ok((total_loss / n, correct as f64 / n))
}

/// Loss and accuracy on a split without gradients or augmentation.
pub fn evaluate_split(model: &Model, samples: &[ImageSample]) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset { split: "evaluation" });
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for batch in samples.chunks(32) {
        let mut graph = Graph::new();
        let images: Vec<TensorId> = batch.iter().map(|s| graph.leaf(s.pixels.clone())).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
        let pass = model.forward(&mut graph, &images, false)?;
        let loss = graph.cross_entropy(pass.logits, &labels)?;
        total_loss += graph.data(loss)[0] * batch.len() as f64;
        let classes = model.num_classes();
        for (row, &label) in graph.data(pass.logits).chunks(classes).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok((total_loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Serializable training history; the best snapshot itself lives in
/// [`TrainReport::best_model`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: TrainHistory,
    pub best_model: Model,
}

/// Index of the maximum, earliest on ties (the model-selection rule).
pub fn argmax_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Run the full epoch loop, evaluating the validation split after each
/// epoch (never augmented) and snapshotting parameters at each new best
/// validation accuracy. Ties keep the earlier epoch.
pub fn fit(
    model: &mut Model,
    train: &[ImageSample],
    validation: &[ImageSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset { split: "train" });
    }
    if validation.is_empty() {
        return Err(TrainError::EmptyDataset { split: "validation" });
    }

    let mut state = OptimizerState::new(model);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best_model = model.clone();
    let mut val_accuracies = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (train_loss, train_accuracy) = train_epoch(model, train, config, epoch as u64, &mut state)?;
        let (val_loss, val_accuracy) = evaluate_split(model, validation)?;
        if epoch == 0 || val_accuracy > *val_accuracies.iter().max_by(|a: &&f64, b| a.total_cmp(b)).unwrap() {
            best_model = model.clone();
        }
        val_accuracies.push(val_accuracy);
        epochs.push(EpochStats { train_loss, train_accuracy, val_loss, val_accuracy });
    }
    let best_epoch = argmax_earliest(&val_accuracies);
    Ok(TrainReport { history: TrainHistory { epochs, best_epoch }, best_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassLabel, Split};
    use crate::models::{BasicCnnSpec, ModelSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn tiny_spec() -> ModelSpec {
        ModelSpec::BasicCnn(BasicCnnSpec { input_side: 8, num_classes: 5, widths: [2, 2, 2, 2] })
    }

    fn random_samples(n: usize, side: usize, seed: u64) -> Vec<ImageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let data: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
                ImageSample::new(
                    format!("s{i}"),
                    Tensor::new(vec![1, side, side], data).unwrap(),
                    ClassLabel::ALL[i % 5],
                    Split::Train,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 5]).unwrap());
        let loss = cross_entropy(&mut g, logits, &[0, 3, 4]).unwrap();
        assert!((g.data(loss)[0] - 5.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 5];
        data[2] = 1000.0;
        let logits = g.leaf(Tensor::new(vec![1, 5], data).unwrap());
        let loss = cross_entropy(&mut g, logits, &[2]).unwrap();
        assert!(g.data(loss)[0].abs() < 1e-9);
    }

    #[test]
    fn two_class_case_matches_direct_evaluation() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let loss = cross_entropy(&mut g, logits, &[0]).unwrap();
        let direct = -(1.0_f64.exp() / (1.0_f64.exp() + 2.0_f64.exp())).ln();
        assert!((g.data(loss)[0] - direct).abs() < 1e-12);
        assert!((g.data(loss)[0] - 1.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_is_positive_unless_one_hot_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let logits = g.leaf(Tensor::new(vec![2, 5], data).unwrap());
            let loss = cross_entropy(&mut g, logits, &[1, 3]).unwrap();
            assert!(g.data(loss)[0] > 0.0);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let labels = [4usize, 1];
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![2, 5], data.clone()).unwrap().with_grad());
        let loss = cross_entropy(&mut g, logits, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();

        for (b, &label) in labels.iter().enumerate() {
            let row = &data[b * 5..(b + 1) * 5];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for c in 0..5 {
                let softmax = (row[c] - max).exp() / sum;
                let onehot = if c == label { 1.0 } else { 0.0 };
                let expected = (softmax - onehot) / 2.0;
                assert!((grad[b * 5 + c] - expected).abs() < 1e-9);
            }
        }
    }

    fn one_param_model() -> Model {
        // Smallest valid model; we drive the optimizer directly on params.
        Model::build(tiny_spec(), 3).unwrap()
    }

    #[test]
    fn sgd_single_step_forced_values() {
        let mut model = one_param_model();
        let n0 = model.params()[0].value.numel();
        for p in model.params_mut() {
            p.value = Tensor::full(p.value.shape().to_vec(), 1.0).unwrap();
        }
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.5; p.value.numel()]).collect();
        let mut state = OptimizerState::new(&model);
        sgd_momentum_step(&mut model, &grads, &mut state, 0.1, 0.9).unwrap();
        assert_eq!(state.velocities[0], vec![0.5; n0]);
        for &w in model.params()[0].value.data() {
            assert!((w - 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_momentum_reduces_to_plain_sgd() {
        let mut model = one_param_model();
        for p in model.params_mut() {
            p.value = Tensor::full(p.value.shape().to_vec(), 2.0).unwrap();
        }
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![1.5; p.value.numel()]).collect();
        let mut state = OptimizerState::new(&model);
        sgd_momentum_step(&mut model, &grads, &mut state, 0.2, 0.0).unwrap();
        for &w in model.params()[0].value.data() {
            assert!((w - (2.0 - 0.2 * 1.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        // v1 = g, w1 = w0 - lr g; v2 = (1+mu) g, w2 = w0 - lr (2+mu) g.
        let (lr, mu, g, w0) = (0.05, 0.7, 0.3, 1.2);
        let mut model = one_param_model();
        for p in model.params_mut() {
            p.value = Tensor::full(p.value.shape().to_vec(), w0).unwrap();
        }
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![g; p.value.numel()]).collect();
        let mut state = OptimizerState::new(&model);
        sgd_momentum_step(&mut model, &grads, &mut state, lr, mu).unwrap();
        sgd_momentum_step(&mut model, &grads, &mut state, lr, mu).unwrap();
        let expected = w0 - lr * (2.0 + mu) * g;
        for &w in model.params()[0].value.data() {
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_recurrence_matches_closed_form_over_five_steps() {
        let (lr, mu, g, w0) = (0.01, 0.9, 0.4, 0.0);
        let mut model = one_param_model();
        for p in model.params_mut() {
            p.value = Tensor::full(p.value.shape().to_vec(), w0).unwrap();
        }
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![g; p.value.numel()]).collect();
        let mut state = OptimizerState::new(&model);
        for _ in 0..5 {
            sgd_momentum_step(&mut model, &grads, &mut state, lr, mu).unwrap();
        }
        // Closed form: v_k = g (1 - mu^k) / (1 - mu);
        // w_5 = w0 - lr g sum_{k=1..5} (1 - mu^k) / (1 - mu).
        let v5 = g * (1.0 - mu.powi(5)) / (1.0 - mu);
        let w5 = w0 - lr * g * (1..=5).map(|k| (1.0 - mu.powi(k)) / (1.0 - mu)).sum::<f64>();
        assert!((state.velocities[0][0] - v5).abs() < 1e-12);
        assert!((model.params()[0].value.data()[0] - w5).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut model = Model::build(tiny_spec(), 7).unwrap();
        let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.value.data().to_vec()).collect();
        let samples = random_samples(12, 8, 1);
        let config = TrainConfig { learning_rate: 0.0, epochs: 1, ..TrainConfig::default() };
        let mut state = OptimizerState::new(&model);
        train_epoch(&mut model, &samples, &config, 0, &mut state).unwrap();
        for (p, b) in model.params().iter().zip(&before) {
            assert_eq!(p.value.data(), b.as_slice());
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let samples = random_samples(10, 8, 2);
        let config = TrainConfig { epochs: 2, batch_size: 4, global_seed: 11, ..TrainConfig::default() };
        let run = || {
            let mut model = Model::build(tiny_spec(), 5).unwrap();
            let mut state = OptimizerState::new(&model);
            for e in 0..config.epochs {
                train_epoch(&mut model, &samples, &config, e as u64, &mut state).unwrap();
            }
            model.params().iter().flat_map(|p| p.value.data().to_vec().into_iter()).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_sample_overfits_in_most_seeds() {
        let mut wins = 0;
        for seed in 0..10 {
            let sample = &random_samples(1, 8, 100 + seed)[..];
            let mut model = Model::build(tiny_spec(), seed).unwrap();
            let config = TrainConfig { epochs: 25, batch_size: 1, global_seed: seed, ..TrainConfig::default() };
            let mut state = OptimizerState::new(&model);
            let (first, _) = train_epoch(&mut model, sample, &config, 0, &mut state).unwrap();
            let mut last = first;
            for e in 1..config.epochs {
                last = train_epoch(&mut model, sample, &config, e as u64, &mut state).unwrap().0;
            }
            if last < first {
                wins += 1;
            }
        }
        assert!(wins >= 9, "loss decreased in only {wins}/10 seeds");
    }

    #[test]
    fn small_step_does_not_increase_batch_loss() {
        let mut trials_ok = 0;
        for trial in 0..100u64 {
            let mut model = Model::build(tiny_spec(), trial).unwrap();
            let samples = random_samples(4, 8, 500 + trial);
            let batch_loss = |model: &Model| {
                let mut g = Graph::new();
                let imgs: Vec<TensorId> = samples.iter().map(|s| g.leaf(s.pixels.clone())).collect();
                let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
                let pass = model.forward(&mut g, &imgs, true).unwrap();
                let loss = g.cross_entropy(pass.logits, &labels).unwrap();
                g.backward(loss).unwrap();
                let grads: Vec<Vec<f64>> =
                    pass.param_ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
                (g.data(loss)[0], grads)
            };
            let (before, grads) = batch_loss(&model);
            let mut state = OptimizerState::new(&model);
            sgd_momentum_step(&mut model, &grads, &mut state, 1e-3, 0.0).unwrap();
            let (after, _) = batch_loss(&model);
            if after <= before {
                trials_ok += 1;
            }
        }
        assert!(trials_ok >= 95, "descent held in only {trials_ok}/100 trials");
    }

    #[test]
    fn tie_rule_keeps_earliest_epoch() {
        assert_eq!(argmax_earliest(&[0.5, 0.8, 0.8, 0.6]), 1);
        assert_eq!(argmax_earliest(&[0.2]), 0);
    }

    #[test]
    fn fit_single_epoch_returns_that_model() {
        let train = random_samples(10, 8, 3);
        let val = random_samples(5, 8, 4);
        let mut model = Model::build(tiny_spec(), 9).unwrap();
        let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let report = fit(&mut model, &train, &val, &config).unwrap();
        assert_eq!(report.history.best_epoch, 0);
        assert_eq!(report.history.epochs.len(), 1);
        for (a, b) in report.best_model.params().iter().zip(model.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn fit_rejects_empty_splits_and_bad_config() {
        let train = random_samples(4, 8, 3);
        let mut model = Model::build(tiny_spec(), 9).unwrap();
        assert!(matches!(
            fit(&mut model, &train, &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset { split: "validation" })
        ));
        assert!(matches!(
            fit(&mut model, &[], &train, &TrainConfig::default()),
            Err(TrainError::EmptyDataset { split: "train" })
        ));
        let bad = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        assert!(matches!(
            fit(&mut model, &train, &train, &bad),
            Err(TrainError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn fit_is_deterministic_end_to_end() {
        let train = random_samples(8, 8, 30);
        let val = random_samples(4, 8, 31);
        let config = TrainConfig { epochs: 2, batch_size: 4, global_seed: 77, ..TrainConfig::default() };
        let run = || {
            let mut model = Model::build(tiny_spec(), 21).unwrap();
            let report = fit(&mut model, &train, &val, &config).unwrap();
            (
                serde_json::to_string(&report.history).unwrap(),
                report
                    .best_model
                    .params()
                    .iter()
                    .flat_map(|p| p.value.data().to_vec().into_iter())
                    .collect::<Vec<f64>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
