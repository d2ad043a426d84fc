//! Named parameter storage and its binding onto a [`Graph`].

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{BatchNormMode, Graph, Padding, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Trainable tensors keyed by dotted name, in creation order, plus the
/// batch-norm running statistics keyed by layer prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    stats: IndexMap<String, RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            stats: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_stats(&mut self, prefix: impl Into<String>, stats: RunningStats<T>) {
        self.stats.insert(prefix.into(), stats);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn stats(&self, prefix: &str) -> Option<&RunningStats<T>> {
        self.stats.get(prefix)
    }

    pub fn stats_mut(&mut self, prefix: &str) -> Option<&mut RunningStats<T>> {
        self.stats.get_mut(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                            var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Convolution weight `[cout, cin, kernel..]` drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))` (Glorot), and a zero bias.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        out_channels: usize,
        in_channels: usize,
        kernel: &[usize],
        rng: &mut R,
    ) {
        let mut shape = vec![out_channels, in_channels];
        shape.extend_from_slice(kernel);
        let k: usize = kernel.iter().product();
        let limit = (6.0 / ((in_channels + out_channels) * k) as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&shape, -limit, limit, rng));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
    }

    /// Batch-norm scale 1, shift 0, running mean 0 and variance 1.
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.insert_stats(prefix, RunningStats::new(channels));
    }
}

/// Binds stored parameters onto one graph, each name at most once.
pub struct Binder<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    vars: IndexMap<String, Var>,
    mode: BatchNormMode,
    trainable: bool,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: BatchNormMode) -> Self {
        Self {
            store,
            vars: IndexMap::new(),
            mode,
            trainable: true,
        }
    }

    /// Binder whose parameters are constants on the tape, so no backward
    /// state is kept. `mode` must not be `Train`.
    pub fn inference(store: &'s mut ParamStore<T>, mode: BatchNormMode) -> Self {
        assert!(mode != BatchNormMode::Train, "inference never updates running statistics");
        Self {
            trainable: false,
            ..Self::new(store, mode)
        }
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.trainable {
            g.param(value)
        } else {
            g.input(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Convolution with `{prefix}.weight` / `{prefix}.bias`, unit stride.
    pub fn conv(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.weight"))?;
        let b = self.param(g, &format!("{prefix}.bias"))?;
        let spatial = g.shape(x).len().saturating_sub(2);
        g.conv(x, w, b, &vec![1; spatial], Padding::Same)
    }

    pub fn batch_norm(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        let stats = self
            .store
            .stats
            .get_mut(prefix)
            .ok_or_else(|| Error::invalid(format!("missing running statistics `{prefix}`")))?;
        g.batch_norm(x, gamma, beta, self.mode, stats)
    }

    pub fn finish(self) -> Bindings {
        Bindings { vars: self.vars }
    }
}

/// Parameter name to graph handle, in binding order.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient of every bound parameter after [`Graph::backward`].
    pub fn gradients<T: Scalar>(&self, g: &Graph<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), g.grad(v)))
            .collect()
    }
}
