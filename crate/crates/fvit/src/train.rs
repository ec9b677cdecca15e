//! Optimizer, schedule, training loop, evaluation and checkpointing.
//!
//! Determinism contract: given (seed, recipe, dataset), every run produces
//! identical metric records. Shuffles and augmentation/drop-path randomness
//! are re-derived from (seed, epoch), so resuming from an epoch-boundary
//! checkpoint continues the exact trajectory of an uninterrupted run.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::TensorTable;
use crate::data::{assemble_batch, AugmentFlags, LabeledDataset};
use crate::model::{Model, ModelConfig};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Decoupled-weight-decay Adam. Moments are kept per parameter in store
/// order; the decay term is applied separately from the adaptive update and
/// only to entries flagged for decay.
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: store
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.shape()))
                .collect(),
            v: store
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.shape()))
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` pairs with the i-th store entry; `None`
    /// leaves that parameter untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr_t: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension(format!(
                "gradient list covers {} parameters, store holds {}",
                grads.len(),
                store.len()
            )));
        }
        if lr_t < 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate must be >= 0, got {lr_t}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (
            T::from_f64(1.0 - self.beta1),
            T::from_f64(1.0 - self.beta2),
        );
        let lr = T::from_f64(lr_t);
        let eps = T::from_f64(self.eps);
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != store.value(id).shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    g.shape(),
                    store.entry(id).name,
                    store.value(id).shape()
                )));
            }
            let decay = store.entry(id).decay;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            let wd = T::from_f64(lr_t * self.weight_decay);
            let gd = g.data();
            for j in 0..gd.len() {
                m[j] = b1 * m[j] + ob1 * gd[j];
                v[j] = b2 * v[j] + ob2 * gd[j] * gd[j];
                let m_hat = m[j] * ibc1;
                let v_hat = v[j] * ibc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
                if decay {
                    p[j] = p[j] - wd * p[j];
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    assert!(warmup_steps < total_steps, "warmup must end before total");
    assert!(step <= total_steps, "step beyond schedule");
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 20,
            batch_size: 128,
            base_lr: 1e-3,
            warmup_epochs: 1,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            augment: AugmentFlags {
                hflip: true,
                pad_crop: true,
            },
        }
    }
}

pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub last_lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    /// The line-oriented metric record format.
    pub fn record(&self) -> String {
        format!(
            "epoch={} step={} lr={:.8} loss={:.6} acc={:.6}",
            self.epoch, self.steps, self.last_lr, self.mean_loss, self.accuracy
        )
    }
}

/// Model plus optimizer plus progress counters.
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(model: Model<f32>, weight_decay: f64) -> Self {
        let optimizer = AdamW::new(&model.store, weight_decay);
        TrainState {
            model,
            optimizer,
            epoch: 0,
            global_step: 0,
        }
    }
}

/// Gradients aligned to store order.
pub fn collect_param_grads<T: Scalar>(
    tape: &Tape<T>,
    grads: &Gradients<T>,
    store: &ParamStore<T>,
) -> Vec<Option<Tensor<T>>> {
    let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
    for &(ParamId(idx), var) in tape.bound_params() {
        out[idx] = grads.var(var).cloned();
    }
    out
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// One full shuffled pass over the dataset.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    state: &mut TrainState,
    ds: &LabeledDataset,
    recipe: &TrainRecipe,
    mean: &[f32; 3],
    std: &[f32; 3],
    total_steps: u64,
    warmup_steps: u64,
    mut on_step: Option<&mut dyn FnMut(u64, f64, f64)>,
) -> Result<EpochMetrics> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let epoch = state.epoch;
    let perm = crate::data::epoch_permutation(recipe.seed, epoch, ds.len());
    // One stream drives augmentation and drop-path for the whole epoch.
    let mut rng = ChaCha12Rng::seed_from_u64(
        recipe
            .seed
            .wrapping_add(0x5EED_0000)
            .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut last_lr = 0.0;
    for chunk in perm.chunks(recipe.batch_size) {
        let (images, labels) =
            assemble_batch(ds, chunk, recipe.augment, &mut rng, mean, std)?;
        let mut tape = Tape::new();
        let logits = state
            .model
            .forward(&mut tape, &images, true, &mut rng)?;
        let loss_var = ops::softmax_cross_entropy(
            &mut tape,
            logits,
            &labels,
            recipe.label_smoothing,
        )?;
        let loss = tape.value(loss_var).item()?.to_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} step {}",
                epoch + 1,
                state.global_step
            )));
        }
        let preds = argmax_rows(tape.value(logits));
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        seen += labels.len();
        loss_sum += loss * labels.len() as f64;

        let grads = tape.backward(loss_var)?;
        let param_grads = collect_param_grads(&tape, &grads, &state.model.store);
        let lr_t = cosine_lr(state.global_step, total_steps, warmup_steps, recipe.base_lr);
        state
            .optimizer
            .step(&mut state.model.store, &param_grads, lr_t)?;
        state.global_step += 1;
        last_lr = lr_t;
        if let Some(cb) = on_step.as_deref_mut() {
            cb(state.global_step, lr_t, loss);
        }
    }
    state.epoch += 1;
    Ok(EpochMetrics {
        epoch: state.epoch,
        steps: state.global_step,
        last_lr,
        mean_loss: loss_sum / seen as f64,
        accuracy: correct as f64 / seen as f64,
    })
}

/// Eval-mode pass over a dataset: top-1 accuracy and mean loss.
pub fn evaluate(
    model: &Model<f32>,
    ds: &LabeledDataset,
    batch_size: usize,
    mean: &[f32; 3],
    std: &[f32; 3],
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(batch_size) {
        let (images, labels) = assemble_batch(
            ds,
            chunk,
            AugmentFlags::default(),
            &mut rng,
            mean,
            std,
        )?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &images, false, &mut rng)?;
        let loss_var = ops::softmax_cross_entropy(&mut tape, logits, &labels, 0.0)?;
        loss_sum += tape.value(loss_var).item()?.to_f64() * labels.len() as f64;
        let preds = argmax_rows(tape.value(logits));
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((
        correct as f64 / ds.len() as f64,
        loss_sum / ds.len() as f64,
    ))
}

/// Serialize model + optimizer + progress counters.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let mut table = TensorTable::new();
    for (_, e) in state.model.store.iter() {
        table.insert(e.name.clone(), e.value.clone());
    }
    for (i, (_, e)) in state.model.store.iter().enumerate() {
        table.insert(format!("optim.m.{}", e.name), state.optimizer.m[i].clone());
        table.insert(format!("optim.v.{}", e.name), state.optimizer.v[i].clone());
    }
    table.insert(
        "meta.counters",
        Tensor::<f64>::from_vec(
            &[3],
            vec![
                state.optimizer.step_count() as f64,
                state.epoch as f64,
                state.global_step as f64,
            ],
        )?,
    );
    table.save(path)
}

/// Restore a training state saved by [`save_checkpoint`]. The model is
/// rebuilt from `config` and every tensor is restored by name.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    config: ModelConfig,
    weight_decay: f64,
) -> Result<TrainState> {
    let table = TensorTable::load(path)?;
    let mut model = Model::<f32>::build(config, 0)?;
    restore_model_params(&table, &mut model)?;
    let mut optimizer = AdamW::new(&model.store, weight_decay);
    for (i, (_, name)) in model
        .store
        .iter()
        .map(|(id, e)| (id, e.name.clone()))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
    {
        optimizer.m[i] = table.require::<f32>(&format!("optim.m.{name}"))?.clone();
        optimizer.v[i] = table.require::<f32>(&format!("optim.v.{name}"))?.clone();
    }
    let counters = table.require::<f64>("meta.counters")?;
    optimizer.step = counters.data()[0] as u64;
    let epoch = counters.data()[1] as usize;
    let global_step = counters.data()[2] as u64;
    Ok(TrainState {
        model,
        optimizer,
        epoch,
        global_step,
    })
}

/// Restore just the model parameters from a checkpoint table.
pub fn restore_model_params(table: &TensorTable, model: &mut Model<f32>) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let t = table.require::<f32>(&name)?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::Consistency(format!(
                "checkpoint tensor '{name}' shape {:?} does not match model {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    Ok(())
}
