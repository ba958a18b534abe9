//! Training loop: minibatch Adam with reduce-on-plateau learning rate,
//! best-validation weight retention, and Cartesian grid search.

use ndarray::{Array1, Array3, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::layers::NetFloat;
use super::model::{build_model, loss_and_grad, ArchConfig, Mode, Model, TargetMode};
use super::NnError;
use crate::util::derive_seed;

/// Anything that can hand out (features, scaled target) pairs by index.
/// Implementations must be thread-safe; batches are evaluated in parallel.
pub trait SampleSource<F>: Sync {
    fn len(&self) -> usize;
    fn sample(&self, idx: usize) -> (Array3<F>, Array1<F>);
}

/// In-memory source.
pub struct VecSource<F> {
    pub samples: Vec<(Array3<F>, Array1<F>)>,
}

impl<F: NdFloat> SampleSource<F> for VecSource<F> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, idx: usize) -> (Array3<F>, Array1<F>) {
        self.samples[idx].clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub l2_lambda: f64,
    /// Epochs without validation improvement before the LR is decayed.
    pub lr_patience: usize,
    pub lr_factor: f64,
    /// Training stops once the decayed LR falls below this.
    pub min_lr: f64,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            initial_lr: 1e-3,
            l2_lambda: 1e-4,
            lr_patience: 25,
            lr_factor: 0.5,
            min_lr: 1e-6,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Per-output-dimension train loss (joint mode tracks both targets).
    pub train_loss_per_target: Vec<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSignal {
    Continue,
    Stop,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Mean eval-mode loss over a source, reduced in index order.
pub fn eval_loss<F: NetFloat, S: SampleSource<F>>(
    model: &Model<F>,
    source: &S,
) -> f64 {
    let losses: Vec<f64> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = source.sample(i);
            let out = model.forward_eval(&x);
            loss_and_grad(&out, &y).0
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Trains in place. The model is left holding the best-validation weights;
/// the returned history has one entry per epoch. `on_epoch` can stop
/// training early (e.g. once an external criterion is met).
pub fn train<F, S, T>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    train_src: &S,
    val_src: &T,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats) -> TrainSignal,
) -> Result<Vec<EpochStats>, NnError>
where
    F: NetFloat + Send,
    S: SampleSource<F>,
    T: SampleSource<F>,
{
    if train_src.len() == 0 {
        return Err(NnError::EmptySplit("train"));
    }
    if val_src.len() == 0 {
        return Err(NnError::EmptySplit("val"));
    }
    let out_dim = model.output_dim();
    let mut lr = config.initial_lr;
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params_flat();
    let mut since_improve = 0usize;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = shuffled_indices(train_src.len(), derive_seed(config.seed, &format!("epoch:{epoch}")));
        let mut epoch_loss = 0.0;
        let mut epoch_loss_per_target = vec![0.0; out_dim];
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>, super::layers::Grads<F>)> = batch
                .par_iter()
                .map(|&idx| {
                    let (x, y) = train_src.sample(idx);
                    let dropout_seed = derive_seed(config.seed, &format!("do:{epoch}:{idx}"));
                    let (out, cache) = model.forward(&x, Mode::Train, dropout_seed);
                    let (loss, dout) = loss_and_grad(&out, &y);
                    let per_target: Vec<f64> = out
                        .iter()
                        .zip(y.iter())
                        .map(|(o, t)| (o.to_f64().unwrap_or(f64::NAN) - t.to_f64().unwrap_or(0.0)).powi(2))
                        .collect();
                    let grads = model.backward(&cache, dout, config.l2_lambda);
                    (loss, per_target, grads)
                })
                .collect();
            // Deterministic reduction: sum in batch order.
            let mut it = results.into_iter();
            let (loss0, per0, mut grads) = it.next().expect("nonempty batch");
            epoch_loss += loss0;
            for (acc, v) in epoch_loss_per_target.iter_mut().zip(per0.iter()) {
                *acc += v;
            }
            for (loss, per, g) in it {
                epoch_loss += loss;
                for (acc, v) in epoch_loss_per_target.iter_mut().zip(per.iter()) {
                    *acc += v;
                }
                grads.add_assign(&g);
            }
            grads.scale(super::layers::cast::<F>(1.0 / batch.len() as f64));
            adam.step(model, &grads, lr)?;
        }
        let n = train_src.len() as f64;
        let train_loss = epoch_loss / n;
        if !train_loss.is_finite() {
            return Err(NnError::Diverged { epoch, lr });
        }
        for v in epoch_loss_per_target.iter_mut() {
            *v /= n;
        }
        let val_loss = eval_loss(model, val_src);

        if val_loss < best_val {
            best_val = val_loss;
            best_params = model.params_flat();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= config.lr_patience {
                lr *= config.lr_factor;
                since_improve = 0;
            }
        }

        let stats = EpochStats {
            epoch,
            lr,
            train_loss,
            train_loss_per_target: epoch_loss_per_target,
            val_loss,
        };
        let signal = on_epoch(&stats);
        history.push(stats);
        if signal == TrainSignal::Stop || lr < config.min_lr {
            break;
        }
    }

    model.set_params_flat(&best_params);
    Ok(history)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAxes {
    pub batch_sizes: Vec<usize>,
    pub initial_lrs: Vec<f64>,
    pub l2_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    /// Every trained combination with its best validation loss.
    pub runs: Vec<(TrainConfig, f64)>,
    pub best: TrainConfig,
}

/// Full Cartesian product over the axes, each combination trained with a
/// reduced epoch budget and scored by best validation loss.
pub fn grid_search<F, S, T>(
    base: &TrainConfig,
    axes: &GridAxes,
    budget_epochs: usize,
    input_shape: (usize, usize, usize),
    target_mode: TargetMode,
    train_src: &S,
    val_src: &T,
) -> Result<GridResult, NnError>
where
    F: NetFloat + Send,
    S: SampleSource<F>,
    T: SampleSource<F>,
{
    assert!(
        !axes.batch_sizes.is_empty() && !axes.initial_lrs.is_empty() && !axes.l2_lambdas.is_empty(),
        "grid axes must be nonempty"
    );
    let mut runs = Vec::new();
    for &batch_size in &axes.batch_sizes {
        for &initial_lr in &axes.initial_lrs {
            for &l2_lambda in &axes.l2_lambdas {
                let config = TrainConfig {
                    epochs: budget_epochs,
                    batch_size,
                    initial_lr,
                    l2_lambda,
                    ..base.clone()
                };
                let mut model = build_model::<F>(
                    input_shape.0,
                    input_shape.1,
                    input_shape.2,
                    target_mode,
                    &config.arch,
                    config.seed,
                )?;
                let mut adam = Adam::new(&model);
                let history =
                    train(&mut model, &mut adam, train_src, val_src, &config, |_| {
                        TrainSignal::Continue
                    })?;
                let best_val =
                    history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
                runs.push((config, best_val));
            }
        }
    }
    let best = runs
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite val losses"))
        .expect("at least one run")
        .0
        .clone();
    Ok(GridResult { runs, best })
}
