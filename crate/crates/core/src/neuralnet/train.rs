use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, AdamHyper};
use super::network::{ClassProbs, Mode, Network};
use super::params::ModelParams;
use super::schedule::PlateauScheduler;
use super::{NetError, Result, TrainConfig};
use crate::Scalar;

/// Indexed collection of labeled exams whose tensors may be produced on
/// demand (rendered, read from disk, or held in memory).
pub trait ExamSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    /// Lead-major input tensor of exam `i`.
    fn input(&self, i: usize) -> Result<Vec<f32>>;
}

/// In-memory exam source.
#[derive(Clone, Debug, Default)]
pub struct VecSource {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl ExamSource for VecSource {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn input(&self, i: usize) -> Result<Vec<f32>> {
        Ok(self.inputs[i].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    /// The rate was cut after this epoch.
    pub lr_reduced: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters after the epoch with the lowest validation loss.
    pub params: ModelParams<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn load<T: Scalar, S: ExamSource + ?Sized>(src: &S, idx: &[usize]) -> Result<Vec<Vec<T>>> {
    idx.iter()
        .map(|&i| {
            Ok(src
                .input(i)?
                .into_iter()
                .map(|v| T::from_f32(v).unwrap_or(T::nan()))
                .collect())
        })
        .collect()
}

/// Eval-mode probabilities for every exam in `src`, in order.
pub fn predict<T: Scalar, S: ExamSource + ?Sized>(
    net: &Network,
    params: &ModelParams<T>,
    src: &S,
    batch_size: usize,
) -> Result<Vec<ClassProbs>> {
    let mut out = Vec::with_capacity(src.len());
    let all: Vec<usize> = (0..src.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let xs = load::<T, S>(src, chunk)?;
        let refs: Vec<&[T]> = xs.iter().map(Vec::as_slice).collect();
        out.extend(net.forward(params, &refs, Mode::Eval)?);
    }
    Ok(out)
}

/// Mean eval-mode cross-entropy over `src`.
pub fn mean_loss<T: Scalar, S: ExamSource + ?Sized>(
    net: &Network,
    params: &ModelParams<T>,
    src: &S,
    batch_size: usize,
) -> Result<f64> {
    if src.is_empty() {
        return Err(NetError::EmptySet("validation"));
    }
    let all: Vec<usize> = (0..src.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(batch_size.max(1)) {
        let xs = load::<T, S>(src, chunk)?;
        let refs: Vec<&[T]> = xs.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| src.label(i)).collect();
        total += net.loss(params, &refs, &labels, Mode::Eval)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / src.len() as f64)
}

/// Trains with eval-mode validation cross-entropy as the model-selection
/// criterion.
pub fn train<T: Scalar, S: ExamSource + ?Sized, V: ExamSource + ?Sized>(
    net: &Network,
    cfg: &TrainConfig,
    train_set: &S,
    val_set: &V,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if val_set.is_empty() {
        return Err(NetError::EmptySet("validation"));
    }
    let bs = cfg.batch_size;
    train_with_validator(
        net,
        cfg,
        train_set,
        |_, p| mean_loss(net, p, val_set, bs),
        progress,
    )
}

/// Training loop with a caller-supplied validation loss.
pub fn train_with_validator<T, S, F>(
    net: &Network,
    cfg: &TrainConfig,
    train_set: &S,
    mut validate: F,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    S: ExamSource + ?Sized,
    F: FnMut(usize, &ModelParams<T>) -> Result<f64>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NetError::EmptySet("training"));
    }
    let mut params = net.init_params::<T>(cfg.seed);
    let mut sched = PlateauScheduler::new(cfg);
    let mut best: Option<(usize, ModelParams<T>)> = None;
    let mut history = Vec::new();
    let hyper = AdamHyper::default();
    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs = load::<T, S>(train_set, chunk)?;
            let refs: Vec<&[T]> = xs.iter().map(Vec::as_slice).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let lg = net.loss_and_grad(
                &params,
                &refs,
                &labels,
                mix(cfg.seed, epoch as u64, bi as u64),
            )?;
            adam_update(&mut params, &lg.grads, lr, cfg.weight_decay, hyper)?;
            net.apply_running_stats(&mut params, &lg.stats);
            total += lg.loss.as_f64() * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = validate(epoch, &params)?;
        if !val_loss.is_finite() {
            return Err(NetError::NonFinite {
                index: epoch,
                layer: "validation loss".into(),
            });
        }
        let d = sched.observe(val_loss);
        if d.improved || best.is_none() {
            best = Some((epoch, params.clone()));
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved: d.improved,
            lr_reduced: d.lr_reduced,
        };
        progress(&rec);
        history.push(rec);
        if d.stop {
            break;
        }
    }
    let (best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
    })
}
