//! Training loop and the language-model weights it conditions on.

use diffcore::{Graph, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::objective::{total_loss, AdamW};
use crate::phantom::{generate_cases, Case, Grid, Manifest};
use crate::textenc::{assert_frozen, pretrain, FrozenLm, Vocabulary};

/// Pretrained language model, shared across every model that conditions on text.
#[derive(Clone, Debug)]
pub struct LmWeights {
    pub lm: FrozenLm,
    pub store: ParamStore<f32>,
}

impl LmWeights {
    /// Reads `lm_checkpoint` when set, otherwise pretrains from `lm_seed`.
    pub fn obtain(cfg: &ExperimentConfig) -> Result<Self> {
        let (lm, store) = match &cfg.lm_checkpoint {
            Some(path) => FrozenLm::read_checkpoint(path)?,
            None => {
                let (lm, store, _) = pretrain(&Vocabulary::clinical(), cfg.lm_config(), cfg.lm_sentences, cfg.lm_steps, cfg.lm_seed)?;
                (lm, store)
            }
        };
        if lm.config != cfg.lm_config() {
            return Err(Error::Config(format!("language model {:?} does not match the configured {:?}", lm.config, cfg.lm_config())));
        }
        Ok(Self { lm, store })
    }
}

/// Training cases: the manifest when given, else generated from `train_seed`.
pub fn training_cases(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    match &cfg.train_manifest {
        Some(p) => Manifest::read(p)?.load(),
        None => generate_cases(cfg.train_cases, cfg.train_seed, &cfg.grid_spec()),
    }
}

pub fn test_cases(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    match &cfg.test_manifest {
        Some(p) => Manifest::read(p)?.load(),
        None => generate_cases(cfg.test_cases, cfg.test_seed, &cfg.grid_spec()),
    }
}

/// Fresh model for the config with the pretrained language model loaded.
pub fn initial_model<T: Scalar>(cfg: &ExperimentConfig, lm: Option<&LmWeights>) -> Result<SegModel<T>> {
    let mut model = SegModel::new(cfg.model_config(), cfg.seed ^ 0x6d6f_6465_6c)?;
    if cfg.variant.uses_lm() {
        let lm = lm.ok_or_else(|| Error::Config(format!("variant {} needs a language model", cfg.variant)))?;
        model.load_lm(&lm.lm, &lm.store)?;
    }
    Ok(model)
}

fn to_tensor<T: Scalar>(v: &Grid<f32>) -> Vec<T> {
    v.data().iter().map(|&x| T::from_f64_lossy(x as f64)).collect()
}

/// Batch tensors for the given cases, each cropped at a random origin.
fn sample_batch<T: Scalar>(cfg: &ExperimentConfig, model: &SegModel<T>, cases: &[&Case], rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>, Vec<String>)> {
    let p = cfg.patch;
    let mut x = Vec::with_capacity(cases.len() * p.iter().product::<usize>());
    let mut y = Vec::with_capacity(x.capacity());
    let mut texts = Vec::with_capacity(cases.len());
    for c in cases {
        let d = c.intensity.dims();
        if (0..3).any(|a| d[a] < p[a]) {
            return Err(Error::Data(format!("case {} of size {d:?} is smaller than the patch {p:?}", c.id)));
        }
        let origin = [0, 1, 2].map(|a| rng.random_range(0..=d[a] - p[a]));
        x.extend(to_tensor::<T>(&c.intensity.crop(origin, p)));
        y.extend(c.mask.crop(origin, p).data().iter().map(|&b| if b != 0 { T::one() } else { T::zero() }));
        texts.push(model.render(&c.record, &cfg.omit));
    }
    let shape = [cases.len(), 1, p[0], p[1], p[2]];
    Ok((Tensor::new(&shape, x)?, Tensor::new(&shape, y)?, texts))
}

/// Trains `model` in place for `cfg.epochs` epochs and returns the per-epoch
/// mean loss. Cases are drawn from a shuffled order that is redrawn whenever it
/// runs out; an epoch is one pass over it unless `steps_per_epoch` fixes the
/// number of optimizer steps.
pub fn train_model<T: Scalar>(cfg: &ExperimentConfig, model: &mut SegModel<T>, cases: &[Case], rng: &mut ChaCha8Rng, step: &mut u64) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(Error::Data("no training cases".into()));
    }
    let weights = cfg.loss_weights();
    let mut opt = AdamW::<T>::new(cfg.lr, cfg.weight_decay);
    let steps = if cfg.steps_per_epoch > 0 { cfg.steps_per_epoch } else { cases.len().div_ceil(cfg.batch_size) };
    let (mut order, mut next) = (Vec::new(), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            if next == order.len() {
                order = (0..cases.len()).collect();
                order.shuffle(rng);
                next = 0;
            }
            let end = (next + cfg.batch_size).min(order.len());
            let batch: Vec<&Case> = order[next..end].iter().map(|&i| &cases[i]).collect();
            next = end;
            let (x, y, texts) = sample_batch(cfg, model, &batch, rng)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = model.forward(&mut g, xv, &texts)?;
            let loss = total_loss(&mut g, logits, &y, weights)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Degenerate(format!("loss became {value} at epoch {epoch}, step {step}")));
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads);
            *step += 1;
            sum += value;
        }
        log.push(sum / steps as f64);
    }
    Ok(log)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<f64>,
}

/// Full run: build the model, train on the configured fraction of `cases`, and
/// verify the language model came through bitwise unchanged.
pub fn train<T: Scalar>(cfg: &ExperimentConfig, cases: &[Case], lm: Option<&LmWeights>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model = initial_model::<T>(cfg, lm)?;
    let used = &cases[..cfg.training_count(cases.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let before = model.text.as_ref().map(|t| t.lm.snapshot(&model.store));
    let mut step = 0;
    let log = train_model(cfg, &mut model, used, &mut rng, &mut step)?;
    if let (Some(before), Some(text)) = (before, &model.text) {
        if !assert_frozen(&before, &text.lm.snapshot(&model.store)) {
            return Err(Error::Contract("language model parameters changed during training".into()));
        }
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { config: cfg.clone(), model, step, rng }, log })
}

/// Renders the loss log, one `epoch loss` line per epoch.
pub fn render_log(log: &[f64]) -> String {
    log.iter().enumerate().map(|(e, l)| format!("{} {l:.6}\n", e + 1)).collect()
}
