//! Dice loss, Adam, plateau learning-rate schedule, k-fold splits and the
//! patch training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architectures::Network;
use crate::autograd::{BatchNormMode, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Added to the Dice denominator so empty patches stay defined.
pub const DICE_EPSILON: f64 = 1e-6;

/// Soft Dice loss on the tape with the default denominator guard.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    g.dice_loss(pred, target, DICE_EPSILON)
}

/// Soft Dice loss of plain buffers, accumulated in `f64`.
pub fn dice_loss_value<T: Scalar>(pred: &[T], target: &[T], eps: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "dice loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let (mut i, mut s, mut t) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(target) {
        let (p, g) = (p.as_f64(), g.as_f64());
        i += p * g;
        s += p * p;
        t += g * g;
    }
    let d = s + t + eps;
    if d <= 0.0 {
        return Err(Error::NonFinite("dice loss denominator is zero".into()));
    }
    Ok(1.0 - 2.0 * i / d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Applies one update in store order. Gradients are checked up front:
    /// a non-finite entry rejects the whole step without touching anything.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}` is not finite")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64();
                let mn = beta1 * mi.as_f64() + (1.0 - beta1) * gi;
                let vn = beta2 * vi.as_f64() + (1.0 - beta2) * gi * gi;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = T::from_f64(pi.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Cuts the learning rate when the best validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch. After `patience` consecutive epochs without a strict
    /// improvement of the best loss, the rate is multiplied by `factor` and
    /// the count starts over.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if !(loss < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.lr
    }

    /// Feeds a whole history and returns the resulting rate.
    pub fn replay(&mut self, history: &[f64]) -> f64 {
        for &l in history {
            self.observe(l);
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold<I> {
    pub train: Vec<I>,
    pub validation: Vec<I>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan<I> {
    pub k: usize,
    pub folds: Vec<Fold<I>>,
}

/// Shuffles the cases with `seed` and deals them into `k` contiguous
/// validation folds; the first `n % k` folds take one extra case.
pub fn kfold_split<I: Clone>(case_ids: &[I], k: usize, seed: u64) -> Result<FoldPlan<I>> {
    let n = case_ids.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} cases into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val: Vec<usize> = order[start..start + len].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + len..])
            .map(|&i| case_ids[i].clone())
            .collect();
        folds.push(Fold {
            train,
            validation: val.iter().map(|&i| case_ids[i].clone()).collect(),
        });
        start += len;
    }
    Ok(FoldPlan { k, folds })
}

/// One training example: input `[1, C, spatial..]`, binary target
/// `[1, 1, spatial..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Passes over the training set per epoch.
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Normalization used for validation passes.
    pub inference_norm: BatchNormMode,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 1,
            adam: AdamConfig::default(),
            plateau_patience: 20,
            plateau_factor: 0.1,
            inference_norm: BatchNormMode::Batch,
            seed: 0,
            checkpoint: None,
            loss_csv: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// One optimization step on one sample; returns the train-mode loss.
pub fn train_step<T: Scalar>(net: &mut Network<T>, adam: &mut Adam<T>, sample: &Sample<T>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(sample.input.clone());
    let fwd = net.forward(&mut g, x, BatchNormMode::Train)?;
    let loss = dice_loss(&mut g, fwd.output, &sample.target)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    g.backward(loss)?;
    let grads = fwd.bindings.gradients(&g);
    adam.step(&mut net.params, &grads)?;
    Ok(value)
}

/// Mean inference Dice loss over `samples`.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, samples: &[Sample<T>], norm: BatchNormMode) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = net.predict_with(&s.input, norm)?;
        total += dice_loss_value(p.data(), s.target.data(), DICE_EPSILON)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains with Adam and the plateau schedule, keeping the weights of the
/// epoch with the lowest validation loss (training loss when `val` is
/// empty). The kept weights are left in `net` and written to the configured
/// checkpoint; the loss curve goes to the configured CSV.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut schedule = PlateauSchedule::new(cfg.adam.lr, cfg.plateau_patience, cfg.plateau_factor);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = adam.lr();
        let mut sum = 0.0;
        let mut steps = 0;
        for _ in 0..cfg.steps_per_epoch {
            order.shuffle(&mut rng);
            for &i in &order {
                sum += train_step(net, &mut adam, &train[i]).map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    e => e,
                })?;
                steps += 1;
            }
        }
        let train_loss = sum / steps as f64;
        let val_loss = if val.is_empty() { train_loss } else { evaluate(net, val, cfg.inference_norm)? };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation loss is {val_loss}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        curve.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.params.clone()));
        }
        adam.set_lr(schedule.observe(val_loss));
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        net.params = params;
    }
    if let Some(path) = &cfg.checkpoint {
        net.save(path)?;
    }
    if let Some(path) = &cfg.loss_csv {
        std::fs::write(path, loss_csv(&curve))?;
    }
    Ok(TrainReport { curve, best_epoch })
}

/// Formats `x` with nine significant digits in plain decimal notation.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000000".into() } else { x.to_string() };
    }
    let decimals = (8 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn loss_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, sig9(e.train), sig9(e.val));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![1], vec![v]).unwrap());
        s
    }

    fn grad(v: f64) -> IndexMap<String, Tensor<f64>> {
        let mut m = IndexMap::new();
        m.insert("w".to_string(), Tensor::from_vec(vec![1], vec![v]).unwrap());
        m
    }

    #[test]
    fn adam_first_step() {
        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grad(1.0)).unwrap();
        let w = p.get("w").unwrap().data()[0];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((w + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_two_steps_follow_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g = 0.5;
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        });
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            adam.step(&mut p, &grad(g)).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_are_identity() {
        let mut p = scalar_store(0.25);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
        assert_eq!(adam.steps(), 1);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut p, &grad(3.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn plateau_boundaries() {
        let mut s = PlateauSchedule::new(1e-3, 20, 0.1);
        let decreasing: Vec<f64> = (0..50).map(|i| 1.0 / (i + 1) as f64).collect();
        assert_eq!(s.replay(&decreasing), 1e-3);

        let mut s = PlateauSchedule::new(1e-3, 20, 0.1);
        let mut h = vec![0.5; 20];
        h.push(0.4);
        assert_eq!(s.replay(&h), 1e-3);

        let mut s = PlateauSchedule::new(1e-3, 20, 0.1);
        assert_eq!(s.replay(&[0.5; 21]), 1e-4);
    }

    #[test]
    fn kfold_even_split() {
        let ids: Vec<u32> = (0..10).collect();
        let plan = kfold_split(&ids, 5, 7).unwrap();
        assert!(plan.folds.iter().all(|f| f.validation.len() == 2 && f.train.len() == 8));
        assert_eq!(plan, kfold_split(&ids, 5, 7).unwrap());
        assert!(kfold_split(&ids, 11, 0).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.5), "0.500000000");
        assert_eq!(sig9(12.25), "12.2500000");
        assert_eq!(sig9(0.000123456789123), "0.000123456789");
        assert_eq!(sig9(0.0), "0.00000000");
    }

    #[test]
    fn dice_value_matches_graph_op() {
        let p = [0.2f64, 0.9, 0.4, 0.0];
        let t = [0.0f64, 1.0, 1.0, 0.0];
        let mut g = Graph::new();
        let pv = g.input(Tensor::from_vec(vec![4], p.to_vec()).unwrap());
        let l = dice_loss(&mut g, pv, &Tensor::from_vec(vec![4], t.to_vec()).unwrap()).unwrap();
        assert_eq!(g.value(l).data()[0], dice_loss_value(&p, &t, DICE_EPSILON).unwrap());
    }
}
