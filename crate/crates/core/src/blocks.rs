//! Residual block and attention residual module.
//!
//! The residual block is the pre-activation bottleneck: three rounds of
//! batch norm, ReLU and convolution (1x1, 3x3, 1x1 per spatial axis, inner
//! width `out / 4`), added to the identity path. When the channel count
//! changes, the identity path is a 1x1 projection convolution.
//!
//! The attention module gates a trunk of stacked residual blocks with a
//! sigmoid soft mask: `(1 + S(x)) * F(x)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::Scalar;

/// Residual blocks stacked on the trunk branch of every attention module.
///
/// Tuned so the full-width networks land on their published parameter
/// budgets; see `architectures::count_parameters`.
pub const TRUNK_BLOCKS: usize = 6;

/// Ratio between a residual block's output width and its bottleneck width.
pub const BOTTLENECK_DIVISOR: usize = 4;

/// Kernel extent of the bottleneck convolution along every spatial axis.
pub const RESIDUAL_KERNEL: usize = 3;

/// Number of spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn rank(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }

    /// Cubic (or square) kernel extents.
    pub fn kernel(self, k: usize) -> Vec<usize> {
        vec![k; self.rank()]
    }

    fn kernel_volume(self, k: usize) -> usize {
        k.pow(self.rank() as u32)
    }
}

fn conv_count(dims: Dims, k: usize, cin: usize, cout: usize) -> usize {
    dims.kernel_volume(k) * cin * cout + cout
}

/// Pooling factor per spatial axis: 2 where the extent is even, 1 where the
/// axis has already collapsed to a single voxel. Odd extents above one are
/// rejected with the offending extent.
pub fn halving_factors(spatial: &[usize]) -> std::result::Result<Vec<usize>, usize> {
    spatial
        .iter()
        .map(|&e| match e {
            1 => Ok(1),
            e if e % 2 == 0 => Ok(2),
            e => Err(e),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dims: Dims,
}

impl ResidualBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, dims: Dims) -> Self {
        Self {
            in_channels,
            out_channels,
            dims,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        (self.out_channels / BOTTLENECK_DIVISOR).max(1)
    }

    pub fn uses_projection(&self) -> bool {
        self.in_channels != self.out_channels
    }

    pub fn param_count(&self) -> usize {
        let (cin, b, cout, d) = (
            self.in_channels,
            self.bottleneck_channels(),
            self.out_channels,
            self.dims,
        );
        let mut n = 2 * cin + conv_count(d, 1, cin, b);
        n += 2 * b + conv_count(d, RESIDUAL_KERNEL, b, b);
        n += 2 * b + conv_count(d, 1, b, cout);
        if self.uses_projection() {
            n += conv_count(d, 1, cin, cout);
        }
        n
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let (cin, b, cout, d) = (
            self.in_channels,
            self.bottleneck_channels(),
            self.out_channels,
            self.dims,
        );
        store.init_batch_norm(&format!("{prefix}.bn1"), cin);
        store.init_conv(&format!("{prefix}.conv1"), b, cin, &d.kernel(1), rng);
        store.init_batch_norm(&format!("{prefix}.bn2"), b);
        store.init_conv(&format!("{prefix}.conv2"), b, b, &d.kernel(RESIDUAL_KERNEL), rng);
        store.init_batch_norm(&format!("{prefix}.bn3"), b);
        store.init_conv(&format!("{prefix}.conv3"), cout, b, &d.kernel(1), rng);
        if self.uses_projection() {
            store.init_conv(&format!("{prefix}.proj"), cout, cin, &d.kernel(1), rng);
        }
    }

    /// Identity path plus the learned residual.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != self.dims.rank() + 2 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "{prefix}: residual block expects {} channels at spatial rank {}, got {shape:?}",
                self.in_channels,
                self.dims.rank()
            )));
        }
        let mut h = x;
        for stage in 1..=3 {
            h = b.batch_norm(g, &format!("{prefix}.bn{stage}"), h)?;
            h = g.relu(h);
            h = b.conv(g, &format!("{prefix}.conv{stage}"), h)?;
        }
        let identity = if self.uses_projection() {
            b.conv(g, &format!("{prefix}.proj"), x)?
        } else {
            x
        };
        g.add(identity, h)
    }
}

/// Encoder-decoder gate producing values in `[0, 1]` at the input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftMaskSpec {
    pub channels: usize,
    pub depth: usize,
    pub dims: Dims,
}

impl SoftMaskSpec {
    fn block(&self) -> ResidualBlockSpec {
        ResidualBlockSpec::new(self.channels, self.channels, self.dims)
    }

    pub fn param_count(&self) -> usize {
        3 * self.depth * self.block().param_count()
            + 2 * conv_count(self.dims, 1, self.channels, self.channels)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let block = self.block();
        for level in 0..self.depth {
            block.init(store, &format!("{prefix}.skip{level}"), rng);
            block.init(store, &format!("{prefix}.down{level}"), rng);
        }
        for level in (0..self.depth).rev() {
            block.init(store, &format!("{prefix}.up{level}"), rng);
        }
        let k = self.dims.kernel(1);
        store.init_conv(&format!("{prefix}.tail1"), self.channels, self.channels, &k, rng);
        store.init_conv(&format!("{prefix}.tail2"), self.channels, self.channels, &k, rng);
    }

    /// Spatial extents visited by the encoder, input level first.
    pub fn trace(&self, prefix: &str, spatial: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut levels = vec![spatial.to_vec()];
        for _ in 0..self.depth {
            let cur = levels.last().expect("non-empty");
            let f = halving_factors(cur).map_err(|extent| Error::Divisibility {
                entry: prefix.to_string(),
                extent,
            })?;
            levels.push(cur.iter().zip(&f).map(|(e, f)| e / f).collect());
        }
        Ok(levels)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let spatial = g.shape(x)[2..].to_vec();
        let levels = self.trace(prefix, &spatial)?;
        let block = self.block();
        let mut skips = Vec::with_capacity(self.depth);
        let mut factors = Vec::with_capacity(self.depth);
        let mut h = x;
        for level in 0..self.depth {
            skips.push(block.forward(g, b, &format!("{prefix}.skip{level}"), h)?);
            let f: Vec<usize> = levels[level]
                .iter()
                .zip(&levels[level + 1])
                .map(|(a, c)| a / c)
                .collect();
            h = g.max_pool(h, &f, &f)?;
            h = block.forward(g, b, &format!("{prefix}.down{level}"), h)?;
            factors.push(f);
        }
        for level in (0..self.depth).rev() {
            h = block.forward(g, b, &format!("{prefix}.up{level}"), h)?;
            h = g.upsample(h, &factors[level])?;
            h = g.add(h, skips[level])?;
        }
        h = b.conv(g, &format!("{prefix}.tail1"), h)?;
        h = b.conv(g, &format!("{prefix}.tail2"), h)?;
        Ok(g.sigmoid(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionModuleSpec {
    pub channels: usize,
    pub depth: usize,
    pub trunk_blocks: usize,
    pub dims: Dims,
}

impl AttentionModuleSpec {
    pub fn new(channels: usize, depth: usize, dims: Dims) -> Self {
        Self {
            channels,
            depth,
            trunk_blocks: TRUNK_BLOCKS,
            dims,
        }
    }

    pub fn soft_mask(&self) -> SoftMaskSpec {
        SoftMaskSpec {
            channels: self.channels,
            depth: self.depth,
            dims: self.dims,
        }
    }

    fn block(&self) -> ResidualBlockSpec {
        ResidualBlockSpec::new(self.channels, self.channels, self.dims)
    }

    pub fn param_count(&self) -> usize {
        self.trunk_blocks * self.block().param_count() + self.soft_mask().param_count()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        for i in 0..self.trunk_blocks {
            self.block().init(store, &format!("{prefix}.trunk{i}"), rng);
        }
        self.soft_mask().init(store, &format!("{prefix}.mask"), rng);
    }

    /// Trunk branch `F(x)`.
    pub fn trunk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for i in 0..self.trunk_blocks {
            h = self.block().forward(g, b, &format!("{prefix}.trunk{i}"), h)?;
        }
        Ok(h)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        self.forward_with_mask(g, b, prefix, x, None)
    }

    /// Like [`forward`](Self::forward), but a supplied `mask` replaces the
    /// soft-mask branch output.
    pub fn forward_with_mask<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        prefix: &str,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let trunk = self.trunk(g, b, prefix, x)?;
        let mask = match mask {
            Some(m) => m,
            None => self.soft_mask().forward(g, b, &format!("{prefix}.mask"), x)?,
        };
        attention_gate(g, trunk, mask)
    }
}

/// `(1 + mask) * trunk`, elementwise.
pub fn attention_gate<T: Scalar>(g: &mut Graph<T>, trunk: Var, mask: Var) -> Result<Var> {
    let gate = g.affine(mask, T::ONE, T::ONE);
    g.mul(gate, trunk)
}
