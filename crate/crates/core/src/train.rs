//! Adam with decoupled weight decay, the epoch loop, and early stopping on
//! validation accuracy.
//!
//! Every sample in a batch gets its own tape, so per-sample work can run on
//! worker threads. Gradients are summed in batch order afterwards, which
//! keeps results bitwise reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, EncodedSample};
use crate::error::{Error, Result};
use crate::model::{forward, Mode, Model};
use crate::nn::{decays, derive_rng};
use crate::tensor::{Tape, Tensor};

const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning learning rate for large pretrained encoders.
    pub fn paper_scale() -> Self {
        TrainConfig {
            lr: 2e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && self.patience >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps_adam > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// First and second moment buffers, one per parameter tensor in visiting
/// order. Empty until the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// One AdamW update: `theta *= 1 - lr * wd` for matrices and kernels, then
/// the bias-corrected Adam step. `grads[i]` pairs with the `i`-th tensor.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.len()
        )));
    }
    if let Some(i) = (0..params.len()).find(|&i| grads[i].len() != params[i].numel()) {
        return Err(Error::Contract(format!(
            "gradient {i} has {} elements, parameter has {}",
            grads[i].len(),
            params[i].numel()
        )));
    }
    if state.t == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || (0..params.len()).any(|i| state.m[i].len() != params[i].numel()) {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decays(p.rank()) {
            1.0 - cfg.lr * cfg.weight_decay
        } else {
            1.0
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let decayed = *theta as f64 * shrink;
            *theta = (decayed - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam)) as f32;
        }
    }
    Ok(())
}

/// Cross-entropy loss and parameter gradients for one training sample, with
/// dropout drawn from a stream keyed on `(seed, epoch, index)`.
pub fn sample_gradients(
    model: &Model,
    sample: &EncodedSample,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.params.map(&mut |_, t| tape.param(t));
    let mut rng = derive_rng(seed, &[DROPOUT_STREAM, epoch as u64, index as u64]);
    let logits = forward(&mut tape, &vars, &model.config, &sample.input, true, &mut rng)?;
    let loss = tape.cross_entropy(logits, &[sample.label])?;
    tape.backward(loss)?;
    let mut grads = Vec::new();
    vars.visit(&mut |_, &v| {
        let g = tape
            .grad(v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
        grads.push(g);
    });
    Ok((tape.value(loss).data()[0] as f64, grads))
}

/// Summed loss and mean gradient over a batch of dataset indices.
pub fn batch_gradients(
    model: &Model,
    data: &[EncodedSample],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let per_sample: Vec<Result<(f64, Vec<Vec<f32>>)>> = batch
        .par_iter()
        .map(|&i| sample_gradients(model, &data[i], seed, epoch, i))
        .collect();
    let mut loss_sum = 0.0;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for r in per_sample {
        let (loss, grads) = r?;
        loss_sum += loss;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut mean = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let scale = 1.0 / batch.len() as f32;
    mean.iter_mut().flatten().for_each(|x| *x *= scale);
    Ok((loss_sum, mean))
}

/// One pass over `data` in the `(seed, epoch)` shuffle order. Returns the
/// mean per-sample loss.
pub fn train_epoch(
    model: &mut Model,
    data: &[EncodedSample],
    state: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut loss_sum = 0.0;
    for (b, batch) in batch_indices(data.len(), cfg.batch_size, cfg.seed, epoch)?
        .iter()
        .enumerate()
    {
        let (loss, grads) = match batch_gradients(model, data, batch, cfg.seed, epoch) {
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, batch: b }),
            other => other?,
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch, batch: b });
        }
        let mut params = Vec::new();
        model.params.visit_mut(&mut |_, t| params.push(t));
        adam_step(&mut params, &grads, state, cfg)?;
        loss_sum += loss;
    }
    Ok(loss_sum / data.len() as f64)
}

/// Eval-mode predicted labels, in input order.
pub fn predict_all(model: &Model, data: &[EncodedSample]) -> Result<Vec<usize>> {
    data.par_iter().map(|s| model.predict(&s.input)).collect()
}

pub fn accuracy(model: &Model, data: &[EncodedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot score an empty split".into()));
    }
    let preds = predict_all(model, data)?;
    let correct = preds.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Tracks the best validation accuracy; an epoch counts as an improvement
/// only if it is strictly better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        match self.best {
            Some((_, best)) if accuracy <= best => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, accuracy));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stop_reason: StopReason,
}

/// [`fit`] with a caller-supplied validation score, called after every
/// epoch with the current model and 1-based epoch number.
pub fn fit_with<V, E>(
    mut model: Model,
    train: &[EncodedSample],
    cfg: &TrainConfig,
    mut validate: V,
    mut on_epoch: E,
) -> Result<(Model, TrainReport)>
where
    V: FnMut(&Model, usize) -> Result<f64>,
    E: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(&mut model, train, &mut state, cfg, epoch)?;
        let val_accuracy = validate(&model, epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        };
        on_epoch(&record);
        epochs.push(record);
        if stopper.observe(epoch, val_accuracy) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_val_accuracy) = stopper.best().expect("at least one epoch ran");
    let report = TrainReport {
        mode: model.mode(),
        epochs,
        best_epoch,
        best_val_accuracy,
        stop_reason,
    };
    Ok((best, report))
}

/// Trains until validation accuracy stops improving for `patience` epochs
/// or `max_epochs` is reached, and returns the best-epoch model.
pub fn fit<E: FnMut(&EpochRecord)>(
    model: Model,
    train: &[EncodedSample],
    val: &[EncodedSample],
    cfg: &TrainConfig,
    on_epoch: E,
) -> Result<(Model, TrainReport)> {
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    fit_with(model, train, cfg, |m, _| accuracy(m, val), on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_encoder::{ImageEncoderConfig, StageSpec};
    use crate::model::{ModelInput, ModelSettings};
    use crate::text::{VocabConfig, Vocabulary};
    use crate::text_encoder::TextEncoderConfig;

    fn scalar_step(theta: &mut Tensor<f32>, g: f32, state: &mut AdamState, cfg: &TrainConfig) {
        adam_step(&mut [theta], &[vec![g]], state, cfg).unwrap();
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let cfg = TrainConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for g in [3.0f32, -0.002, 1e4] {
            let mut theta = Tensor::vector(vec![0.5f32]);
            let mut state = AdamState::default();
            scalar_step(&mut theta, g, &mut state, &cfg);
            let delta = theta.data()[0] as f64 - 0.5;
            assert!((delta + 0.01 * (g as f64).signum()).abs() < 1e-6, "{g}: {delta}");
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = Tensor::new([2, 2], vec![1.0f32, -2.0, 3.0, 0.5]).unwrap();
        let before = w.clone();
        let mut state = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut [&mut w], &[vec![0.0; 4]], &mut state, &cfg).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn descends_a_parabola() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut theta = Tensor::vector(vec![1.0f32]);
        let mut state = AdamState::default();
        for _ in 0..100 {
            let g = 2.0 * theta.data()[0];
            scalar_step(&mut theta, g, &mut state, &cfg);
        }
        assert!(theta.data()[0].abs() < 0.05, "{}", theta.data()[0]);
    }

    #[test]
    fn decay_shrinks_matrices_only() {
        let cfg = TrainConfig::default();
        let mut w = Tensor::new([2, 2], vec![1.0f32, -2.0, 3.0, 0.5]).unwrap();
        let mut b = Tensor::vector(vec![1.0f32, 2.0]);
        let mut state = AdamState::default();
        let mut prev = w.norm();
        for _ in 0..10 {
            adam_step(&mut [&mut w, &mut b], &[vec![0.0; 4], vec![0.0; 2]], &mut state, &cfg).unwrap();
            assert!(w.norm() < prev);
            prev = w.norm();
        }
        assert_eq!(b.data(), &[1.0, 2.0]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut w = Tensor::<f32>::zeros([2]);
        let mut state = AdamState::default();
        let cfg = TrainConfig::default();
        assert!(matches!(
            adam_step(&mut [&mut w], &[vec![0.0; 3]], &mut state, &cfg),
            Err(Error::Contract(_))
        ));
        assert!(matches!(adam_step(&mut [&mut w], &[], &mut state, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn scripted_early_stop() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (i, acc) in [0.5, 0.8, 0.8, 0.8, 0.9].into_iter().enumerate() {
            s.observe(i + 1, acc);
            if s.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best(), Some((2, 0.8)));
    }

    fn tiny_settings() -> ModelSettings {
        ModelSettings {
            text: TextEncoderConfig {
                vocab_size: 0,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 8,
                max_len: 5,
                dropout: 0.1,
            },
            image: ImageEncoderConfig {
                side: 4,
                stem_channels: 2,
                stages: vec![StageSpec::new(1, 3, 2)],
                d_out: 3,
            },
            pipeline: crate::image::ImagePipelineConfig {
                side: 4,
                ..Default::default()
            },
            d_hidden: 6,
            head_dropout: 0.2,
        }
    }

    /// Reviews `good ..` are genuine and `bad ..` fake, with images whose
    /// brightness agrees.
    fn separable(n: usize, mode: Mode) -> (Model, Vec<EncodedSample>) {
        let vocab = Vocabulary::build(&["good bad filler"], VocabConfig::default()).unwrap();
        let model = Model::init(mode, &tiny_settings(), vocab, &mut derive_rng(5, &[])).unwrap();
        let data = (0..n)
            .map(|i| {
                let label = i % 2;
                let text = if label == 1 { "good filler" } else { "bad filler" };
                let level = if label == 1 { 200 } else { 60 };
                let img = crate::image::RawImage::filled(4, 4, [level, level, level]).unwrap();
                EncodedSample {
                    id: format!("s{i}"),
                    input: model.prepare(Some(text), Some(&img)).unwrap(),
                    label,
                }
            })
            .collect();
        (model, data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data) = separable(10, Mode::Fused);
        let before = model.params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_epoch(&mut model, &data, &mut AdamState::default(), &cfg, 1).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn epoch_loss_is_reproducible() {
        let (model, data) = separable(12, Mode::Fused);
        let cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model.clone();
            let loss = train_epoch(&mut m, &data, &mut AdamState::default(), &cfg, 1).unwrap();
            (loss.to_bits(), m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_gradients_do_not_accumulate() {
        let (model, data) = separable(6, Mode::Fused);
        let a = batch_gradients(&model, &data, &[0, 1, 2], 1, 1).unwrap();
        let b = batch_gradients(&model, &data, &[0, 1, 2], 1, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_falls_on_separable_data() {
        let (model, data) = separable(64, Mode::Fused);
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let mut losses = Vec::new();
        let (_, report) = fit_with(model, &data, &cfg, |m, _| accuracy(m, &data), |r| losses.push(r.train_loss)).unwrap();
        assert_eq!(report.epochs.len(), 5);
        assert!(losses[4] < losses[0], "{losses:?}");
    }

    #[test]
    fn fit_returns_best_epoch_parameters() {
        let (model, data) = separable(8, Mode::TextOnly);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 10,
            patience: 2,
            ..TrainConfig::default()
        };
        let script = [0.5, 0.8, 0.8, 0.8];
        let mut snapshots = Vec::new();
        let (best, report) = fit_with(
            model,
            &data,
            &cfg,
            |m, epoch| {
                snapshots.push(m.params.clone());
                Ok(script[epoch - 1])
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(report.epochs.len(), 4);
        assert_eq!(report.best_epoch, 2);
        assert_eq!(report.stop_reason, StopReason::EarlyStop);
        assert_eq!(best.params, snapshots[1]);
        assert_ne!(best.params, snapshots[3]);
    }

    #[test]
    fn improving_run_hits_max_epochs() {
        let (model, data) = separable(4, Mode::TextOnly);
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 1,
            ..TrainConfig::default()
        };
        let (_, report) = fit_with(model, &data, &cfg, |_, e| Ok(e as f64 / 10.0), |_| {}).unwrap();
        assert_eq!(report.stop_reason, StopReason::MaxEpochs);
        assert_eq!(report.best_epoch, 3);
    }

    #[test]
    fn divergence_names_the_batch() {
        let (mut model, data) = separable(8, Mode::TextOnly);
        model.params.head.b2.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_epoch(&mut model, &data, &mut AdamState::default(), &cfg, 3).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 3, batch: 0 }), "{err}");
    }

    #[test]
    fn missing_inputs_are_contract_errors() {
        let (model, _) = separable(2, Mode::Fused);
        let bad = EncodedSample {
            id: "x".into(),
            input: ModelInput {
                review: None,
                image: None,
            },
            label: 0,
        };
        assert!(matches!(sample_gradients(&model, &bad, 0, 0, 0), Err(Error::Contract(_))));
    }
}
