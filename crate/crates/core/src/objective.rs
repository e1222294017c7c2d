//! Segmentation loss, parameter partition and the optimizer.

use std::collections::BTreeMap;

use diffcore::{check_gradients, lit, DiffError, Gradients, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce >= 0.0 && self.dice >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got ce={} dice={}", self.ce, self.dice)));
        }
        if self.ce == 0.0 && self.dice == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

fn check_target<T: Scalar>(g: &Graph<T>, logits: Var, y: &Tensor<T>) -> Result<()> {
    if g.shape(logits) != y.shape() {
        return Err(Error::Contract(format!("logits {:?} and target {:?} differ", g.shape(logits), y.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy, as `softplus(z) − y·z`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y: &Tensor<T>) -> Result<Var> {
    check_target(g, logits, y)?;
    let yv = g.constant(y.clone());
    let sp = g.softplus(logits)?;
    let yz = g.mul(logits, yv)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean(per)?)
}

/// Soft Dice loss per sample (axis 0), averaged over the batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y: &Tensor<T>) -> Result<Var> {
    check_target(g, logits, y)?;
    let batch = y.shape().first().copied().unwrap_or(1);
    let yv = g.constant(y.clone());
    let p = g.sigmoid(logits)?;
    let py = g.mul(p, yv)?;
    let inter = g.sum_to(py, 1)?;
    let psum = g.sum_to(p, 1)?;
    let ysum: Vec<T> = y.data().chunks(y.len() / batch.max(1)).map(|c| c.iter().copied().sum()).collect();
    let ysum = g.constant(Tensor::new(&[batch], ysum)?);
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(psum, ysum)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    let neg = g.scale(m, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// `λ_ce·bce + λ_dice·dice`; a zero weight drops its term entirely.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, y: &Tensor<T>, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let mut terms = Vec::new();
    if w.ce > 0.0 {
        let l = bce_loss(g, logits, y)?;
        terms.push(if w.ce == 1.0 { l } else { g.scale(l, w.ce)? });
    }
    if w.dice > 0.0 {
        let l = dice_loss(g, logits, y)?;
        terms.push(if w.dice == 1.0 { l } else { g.scale(l, w.dice)? });
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Worst relative error between analytic and central-difference gradients of
/// [`total_loss`] with respect to the logits of a small random batch.
pub fn gradcheck_total_loss(seed: u64, w: LossWeights) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 1, 3, 3, 2];
    let z = Tensor::<f64>::uniform(&shape, -2.0, 2.0, &mut rng);
    let y = Tensor::from_fn(&shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    Ok(check_gradients(&[z], seed, |g, v| total_loss(g, v[0], &y, w).map_err(|e| DiffError::Contract(e.to_string())))?)
}

/// Role of a parameter, from its name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    LanguageModel,
    Prompt,
    Digits,
    Backbone,
    Alignment,
}

impl Role {
    pub fn of(name: &str) -> Option<Role> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "lm" => Role::LanguageModel,
            "prompt" => Role::Prompt,
            "digits" => Role::Digits,
            "unet" => Role::Backbone,
            "align" => Role::Alignment,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
}

/// Language-model parameters are frozen; everything else trains.
pub fn partition_params<T: Scalar>(store: &ParamStore<T>) -> Result<Partition> {
    let mut p = Partition::default();
    for (id, param) in store.iter() {
        match Role::of(&param.name) {
            Some(Role::LanguageModel) => p.frozen.push(id),
            Some(_) => p.trainable.push(id),
            None => return Err(Error::Contract(format!("parameter '{}' belongs to no partition", param.name))),
        }
    }
    Ok(p)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, betas: (0.9, 0.999), eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, wd, eps) = (lit::<T>(self.lr), lit::<T>(self.lr * self.weight_decay), lit::<T>(self.eps));
        let (b1t, b2t, c1t, c2t) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(c1), lit::<T>(c2));
        let (one_b1, one_b2) = (lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
        for (id, grad) in grads.params() {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let n = grad.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (i, (p, &gr)) in param.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = b1t * m[i] + one_b1 * gr;
                v[i] = b2t * v[i] + one_b2 * gr * gr;
                let mhat = m[i] / c1t;
                let vhat = v[i] / c2t;
                *p = *p - wd * *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_value(logits: Tensor<f64>, y: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let z = g.input(logits);
        let l = f(&mut g, z, &y).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::new(&[1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = loss_value(Tensor::zeros(&[1, 4]), y.clone(), bce_loss);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = y.map(|v| if v == 1.0 { 20.0 } else { -20.0 });
        assert!(loss_value(sat, y, bce_loss) < 1e-8);
        let one = loss_value(Tensor::full(&[1, 1], 1.0), Tensor::full(&[1, 1], 1.0), bce_loss);
        assert!((one - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let v = 1000;
        let ones = Tensor::full(&[1, v], 1.0);
        assert!(loss_value(Tensor::full(&[1, v], 40.0), ones.clone(), dice_loss) <= 1e-5);
        assert!((loss_value(Tensor::full(&[1, v], -40.0), ones.clone(), dice_loss) - 1.0).abs() < 1e-6);
        assert!((loss_value(Tensor::zeros(&[1, v]), ones, dice_loss) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_is_averaged_per_sample() {
        // sample 0 perfect, sample 1 empty prediction of a full target
        let mut z = vec![40.0; 8];
        z[4..].iter_mut().for_each(|v| *v = -40.0);
        let l = loss_value(Tensor::new(&[2, 4], z).unwrap(), Tensor::full(&[2, 4], 1.0), dice_loss);
        assert!((l - 0.5).abs() < 1e-5, "{l}");
    }

    #[test]
    fn weights_select_terms() {
        let z = Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let y = Tensor::new(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let only = |ce, dice| loss_value(z.clone(), y.clone(), move |g, l, t| total_loss(g, l, t, LossWeights { ce, dice }));
        assert_eq!(only(1.0, 0.0), loss_value(z.clone(), y.clone(), bce_loss));
        assert_eq!(only(0.0, 1.0), loss_value(z.clone(), y.clone(), dice_loss));
        let zero_logits = |w| loss_value(Tensor::zeros(&[1, 3]), Tensor::full(&[1, 3], 1.0), move |g, l, t| total_loss(g, l, t, w));
        let d = loss_value(Tensor::zeros(&[1, 3]), Tensor::full(&[1, 3], 1.0), dice_loss);
        assert!((zero_logits(LossWeights::default()) - (std::f64::consts::LN_2 + d)).abs() < 1e-12);
    }

    #[test]
    fn bad_weights_are_config_errors() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[1, 2]));
        let y = Tensor::zeros(&[1, 2]);
        assert!(matches!(total_loss(&mut g, z, &y, LossWeights { ce: -1.0, dice: 1.0 }), Err(Error::Config(_))));
        assert!(matches!(total_loss(&mut g, z, &y, LossWeights { ce: 0.0, dice: 0.0 }), Err(Error::Config(_))));
        assert!(matches!(bce_loss(&mut g, z, &Tensor::zeros(&[2, 1])), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            for w in [LossWeights::default(), LossWeights { ce: 0.3, dice: 2.0 }] {
                let err = gradcheck_total_loss(seed, w).unwrap();
                assert!(err < 1e-5, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn one_small_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::<f64>::new();
        let z = s.add("unet.z", Tensor::uniform(&[2, 1, 4, 4, 2], -1.0, 1.0, &mut rng));
        let y = Tensor::from_fn(&[2, 1, 4, 4, 2], |i| (i % 3 == 0) as u8 as f64);
        let loss = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let zv = g.param(s, z);
            let l = total_loss(&mut g, zv, &y, LossWeights::default()).unwrap();
            (g.value(l).data()[0], g.backward(l).unwrap())
        };
        let (before, grads) = loss(&s);
        AdamW::new(1e-4, 1e-2).step(&mut s, &grads);
        assert!(loss(&s).0 < before);
    }

    #[test]
    fn partition_rejects_unknown_roles() {
        let mut s = ParamStore::<f64>::new();
        s.add("lm.tok", Tensor::zeros(&[1]));
        s.add("unet.stem.w", Tensor::zeros(&[1]));
        let p = partition_params(&s).unwrap();
        assert_eq!((p.frozen.len(), p.trainable.len()), (1, 1));
        s.add("stray", Tensor::zeros(&[1]));
        assert!(partition_params(&s).is_err());
    }

    #[test]
    fn adamw_skips_frozen_and_moves_against_the_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("unet.a", Tensor::full(&[2], 1.0));
        let b = s.add("lm.b", Tensor::full(&[2], 1.0));
        s.set_frozen(b, true);
        let mut g = Graph::new();
        let (va, vb) = (g.param(&s, a), g.param(&s, b));
        let sum = g.add(va, vb).unwrap();
        let l = g.sum(sum).unwrap();
        let grads = g.backward(l).unwrap();
        let mut opt = AdamW::new(1e-2, 0.0);
        opt.step(&mut s, &grads);
        assert!(s.value(a).data().iter().all(|&v| v < 1.0));
        assert_eq!(s.value(b).data(), &[1.0, 1.0]);
    }
}
