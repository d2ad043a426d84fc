use super::{accumulate, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added to the variance before taking the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
    /// Normalize with the batch statistics, leaving the running averages
    /// untouched.
    Batch,
}

/// Per-channel running mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

pub(crate) struct BatchNormSaved<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    mode: BatchNormMode,
    /// Normalized input, kept only when a gradient is needed.
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    /// Per-channel batch normalization over every non-channel axis.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm needs a channel axis"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        if m == 0 {
            return Err(Error::shape("batch_norm over a zero-element channel"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must have length {c}, got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(format!(
                "running statistics hold {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let x = self.value(input).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            BatchNormMode::Train | BatchNormMode::Batch => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        s += x[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        q += x[base..base + inner]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                for ch in (0..c).filter(|_| mode == BatchNormMode::Train) {
                    let rm = running.mean[ch].as_f64();
                    let rv = running.var[ch].as_f64();
                    running.mean[ch] = T::from_f64(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mean[ch]);
                    running.var[ch] = T::from_f64(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * var[ch]);
                }
            }
            BatchNormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = running.mean[ch].as_f64();
                    var[ch] = running.var[ch].as_f64();
                }
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64(1.0 / (v + BN_EPSILON).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let rg = self.any_grad(&[input, gamma, beta]);
        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = if rg { vec![T::ZERO; x.len()] } else { Vec::new() };
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let (mu, inv, ga, be) = (mean_t[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in base..base + inner {
                    let h = (x[i] - mu) * inv;
                    out[i] = ga * h + be;
                    if rg {
                        xhat[i] = h;
                    }
                }
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm(BatchNormSaved {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            }),
        ))
    }
}

pub(super) fn backward<T: Scalar>(nodes: &mut [Node<T>], s: &BatchNormSaved<T>, grad: &[T]) {
    let shape = nodes[s.input.0].value.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let m = (n * inner) as f64;
    let gamma: Vec<T> = nodes[s.gamma.0].value.data().to_vec();

    // Per-channel reductions of dy and dy * xhat.
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let dy = grad[i].as_f64();
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * s.xhat[i].as_f64();
            }
        }
    }

    accumulate(nodes, s.beta, |_, db| {
        for ch in 0..c {
            db[ch] += T::from_f64(sum_dy[ch]);
        }
    });
    accumulate(nodes, s.gamma, |_, dg| {
        for ch in 0..c {
            dg[ch] += T::from_f64(sum_dy_xhat[ch]);
        }
    });
    accumulate(nodes, s.input, |_, dx| {
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                let scale = gamma[ch] * s.inv_std[ch];
                match s.mode {
                    BatchNormMode::Eval => {
                        for i in base..base + inner {
                            dx[i] += grad[i] * scale;
                        }
                    }
                    BatchNormMode::Train | BatchNormMode::Batch => {
                        let mean_dy = T::from_f64(sum_dy[ch] / m);
                        let mean_dy_xhat = T::from_f64(sum_dy_xhat[ch] / m);
                        for i in base..base + inner {
                            dx[i] += scale * (grad[i] - mean_dy - s.xhat[i] * mean_dy_xhat);
                        }
                    }
                }
            }
        }
    });
}
