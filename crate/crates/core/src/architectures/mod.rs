//! The residual attention U-Net family: layer plans, shape tracing,
//! parameter counting and execution.

mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormMode, Graph, Var};
use crate::blocks::{halving_factors, AttentionModuleSpec, Dims, ResidualBlockSpec, TRUNK_BLOCKS};
use crate::error::{Error, Result};
use crate::params::{Binder, Bindings, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

/// Kernel extent of the stem, fusion and head convolutions.
pub const CONV_KERNEL: usize = 3;

/// Names accepted by [`NetworkSpec::build`], without width suffixes.
pub const NETWORK_NAMES: [&str; 3] = ["raunet1", "raunet2", "raunet_brain"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    /// Convolution over the channel concatenation of the sources.
    Conv { out_channels: usize },
    Pool,
    /// Residual block over the channel concatenation of the sources.
    Residual(ResidualBlockSpec),
    Attention(AttentionModuleSpec),
    /// Nearest upsampling to the spatial extents of entry `like`.
    Upsample { like: usize },
    /// Single-channel convolution followed by a sigmoid.
    SigmoidHead,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerEntry {
    /// Row label, e.g. `Res4` or `Pool2`.
    pub name: String,
    pub kind: LayerKind,
    /// Indices of earlier entries feeding this one. Two sources are
    /// concatenated along the channel axis.
    pub sources: Vec<usize>,
}

impl LayerEntry {
    /// Label as it appears in an architecture table (pools are unnumbered).
    pub fn table_label(&self) -> &str {
        match self.kind {
            LayerKind::Pool => "Pooling",
            _ => &self.name,
        }
    }

    /// Parameter-store prefix.
    pub fn prefix(&self) -> String {
        self.name.to_lowercase()
    }
}

/// Channel plan of one network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths {
    pub input: usize,
    pub stem: usize,
    /// Output channels of Res1..Res6.
    pub residual: [usize; 6],
}

impl Widths {
    fn reduced(&self, divisor: usize) -> Self {
        let d = |c: usize| (c / divisor).max(1);
        Self {
            input: self.input,
            stem: d(self.stem),
            residual: self.residual.map(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub dims: Dims,
    pub widths: Widths,
    pub trunk_blocks: usize,
    /// Input shape `[1, channels, spatial..]` the network is tabulated at.
    pub input_shape: Vec<usize>,
    pub entries: Vec<LayerEntry>,
}

impl NetworkSpec {
    /// Builds a named network. A base name may carry a `-d<k>` suffix
    /// dividing every width by `k` and a `-t<n>` suffix setting the number
    /// of trunk blocks per attention module, e.g. `raunet2-d8-t2`.
    pub fn build(name: &str) -> Result<Self> {
        let mut parts = name.split('-');
        let base = parts.next().unwrap_or_default();
        let (dims, widths, spatial): (Dims, Widths, Vec<usize>) = match base {
            "raunet1" => (
                Dims::Two,
                Widths {
                    input: 1,
                    stem: 16,
                    residual: [16, 32, 64, 128, 256, 256],
                },
                vec![256, 256],
            ),
            "raunet2" => (
                Dims::Three,
                Widths {
                    input: 1,
                    stem: 32,
                    residual: [32, 64, 128, 256, 512, 512],
                },
                vec![32, 224, 224],
            ),
            "raunet_brain" => (
                Dims::Three,
                Widths {
                    input: 4,
                    stem: 32,
                    residual: [64, 128, 256, 512, 512, 512],
                },
                vec![64, 64, 64],
            ),
            _ => return Err(Error::UnknownNetwork(name.to_string())),
        };
        let mut widths = widths;
        let mut trunk_blocks = TRUNK_BLOCKS;
        for part in parts {
            let parsed = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
            match (part.get(..1), part.get(1..).and_then(parsed)) {
                (Some("d"), Some(k)) => widths = widths.reduced(k),
                (Some("t"), Some(n)) => trunk_blocks = n,
                _ => return Err(Error::UnknownNetwork(name.to_string())),
            }
        }
        let mut input_shape = vec![1, widths.input];
        input_shape.extend(spatial);
        Ok(Self::assemble(name, dims, widths, trunk_blocks, input_shape))
    }

    /// A network with an arbitrary channel plan, for small experiments.
    pub fn custom(name: &str, dims: Dims, widths: Widths, trunk_blocks: usize, input_shape: Vec<usize>) -> Self {
        Self::assemble(name, dims, widths, trunk_blocks, input_shape)
    }

    fn assemble(name: &str, dims: Dims, widths: Widths, trunk_blocks: usize, input_shape: Vec<usize>) -> Self {
        let mut entries: Vec<LayerEntry> = Vec::with_capacity(28);
        let mut push = |name: String, kind: LayerKind, sources: Vec<usize>| {
            entries.push(LayerEntry { name, kind, sources });
            entries.len() - 1
        };
        let r = widths.residual;
        let input = push("Input".into(), LayerKind::Input, vec![]);
        let conv1 = push(
            "Conv1".into(),
            LayerKind::Conv {
                out_channels: widths.stem,
            },
            vec![input],
        );
        // Encoder: pool then residual block, five times, then a second
        // block at the bottleneck resolution.
        let mut levels = vec![conv1];
        let mut prev = conv1;
        let mut cin = widths.stem;
        for i in 0..5 {
            let pool = push(format!("Pool{}", i + 1), LayerKind::Pool, vec![prev]);
            prev = push(
                format!("Res{}", i + 1),
                LayerKind::Residual(ResidualBlockSpec::new(cin, r[i], dims)),
                vec![pool],
            );
            cin = r[i];
            levels.push(prev);
        }
        prev = push(
            "Res6".into(),
            LayerKind::Residual(ResidualBlockSpec::new(r[4], r[5], dims)),
            vec![prev],
        );
        cin = r[5];
        // levels = [Conv1, Res1, Res2, Res3, Res4, Res5]
        prev = push("Up1".into(), LayerKind::Upsample { like: levels[4] }, vec![prev]);
        for (step, depth) in (0..4).enumerate() {
            let level = 4 - step; // Res4, Res3, Res2, Res1
            let skip_channels = r[level - 1];
            let att = push(
                format!("Att{}", step + 1),
                LayerKind::Attention(AttentionModuleSpec {
                    channels: skip_channels,
                    depth,
                    trunk_blocks,
                    dims,
                }),
                vec![levels[level]],
            );
            prev = push(
                format!("Res{}", step + 7),
                LayerKind::Residual(ResidualBlockSpec::new(cin + skip_channels, skip_channels, dims)),
                vec![prev, att],
            );
            cin = skip_channels;
            prev = push(
                format!("Up{}", step + 2),
                LayerKind::Upsample {
                    like: levels[level - 1],
                },
                vec![prev],
            );
        }
        let conv2 = push(
            "Conv2".into(),
            LayerKind::Conv {
                out_channels: widths.stem,
            },
            vec![prev, conv1],
        );
        push("Conv3".into(), LayerKind::SigmoidHead, vec![conv2]);
        Self {
            name: name.to_string(),
            dims,
            widths,
            trunk_blocks,
            input_shape,
            entries,
        }
    }

    pub fn entry_index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Symbolic shape of every entry for an input of shape
    /// `[batch, channels, spatial..]`.
    pub fn trace_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let rank = self.dims.rank();
        if input_shape.len() != rank + 2 || input_shape[1] != self.widths.input || input_shape.contains(&0) {
            return Err(Error::shape(format!(
                "{} expects input [batch, {}, {rank} spatial extents], got {input_shape:?}",
                self.name, self.widths.input
            )));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let src = |i: usize| &shapes[entry.sources[i]];
            let with_channels = |s: &[usize], c: usize| {
                let mut s = s.to_vec();
                s[1] = c;
                s
            };
            let shape = match &entry.kind {
                LayerKind::Input => input_shape.to_vec(),
                LayerKind::Conv { out_channels } => with_channels(src(0), *out_channels),
                LayerKind::SigmoidHead => with_channels(src(0), 1),
                LayerKind::Residual(spec) => with_channels(src(0), spec.out_channels),
                LayerKind::Attention(spec) => {
                    spec.soft_mask().trace(&entry.name, &src(0)[2..])?;
                    src(0).clone()
                }
                LayerKind::Pool => {
                    let s = src(0);
                    let f = halving_factors(&s[2..]).map_err(|extent| Error::Divisibility {
                        entry: entry.name.clone(),
                        extent,
                    })?;
                    let mut out = s.clone();
                    for (o, f) in out[2..].iter_mut().zip(f) {
                        *o /= f;
                    }
                    out
                }
                LayerKind::Upsample { like } => {
                    let mut out = src(0).clone();
                    out[2..].copy_from_slice(&shapes[*like][2..]);
                    out
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        let k = self.dims.kernel(CONV_KERNEL).iter().product::<usize>();
        let mut channels = vec![0usize; self.entries.len()];
        let mut total = 0;
        for (i, entry) in self.entries.iter().enumerate() {
            let cin: usize = entry.sources.iter().map(|&s| channels[s]).sum();
            channels[i] = match &entry.kind {
                LayerKind::Input => self.widths.input,
                LayerKind::Conv { out_channels } => {
                    total += k * cin * out_channels + out_channels;
                    *out_channels
                }
                LayerKind::SigmoidHead => {
                    total += k * cin + 1;
                    1
                }
                LayerKind::Residual(spec) => {
                    total += spec.param_count();
                    spec.out_channels
                }
                LayerKind::Attention(spec) => {
                    total += spec.param_count();
                    cin
                }
                LayerKind::Pool | LayerKind::Upsample { .. } => cin,
            };
        }
        total
    }

    /// Freshly initialized parameters.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let kernel = self.dims.kernel(CONV_KERNEL);
        let mut store = ParamStore::new();
        let mut channels = vec![0usize; self.entries.len()];
        for (i, entry) in self.entries.iter().enumerate() {
            let cin: usize = entry.sources.iter().map(|&s| channels[s]).sum();
            let prefix = entry.prefix();
            channels[i] = match &entry.kind {
                LayerKind::Input => self.widths.input,
                LayerKind::Conv { out_channels } => {
                    store.init_conv(&prefix, *out_channels, cin, &kernel, rng);
                    *out_channels
                }
                LayerKind::SigmoidHead => {
                    store.init_conv(&prefix, 1, cin, &kernel, rng);
                    1
                }
                LayerKind::Residual(spec) => {
                    spec.init(&mut store, &prefix, rng);
                    spec.out_channels
                }
                LayerKind::Attention(spec) => {
                    spec.init(&mut store, &prefix, rng);
                    cin
                }
                LayerKind::Pool | LayerKind::Upsample { .. } => cin,
            };
        }
        store
    }
}

/// Renders a `[batch, channels, spatial..]` shape the way the architecture
/// tables print it: `256^2×16` in 2D, `224^2×32×1` (in-plane², depth,
/// channels) or `64^3×4` in 3D.
pub fn table_shape(shape: &[usize]) -> String {
    let c = shape[1];
    match &shape[2..] {
        [y, x] if y == x => format!("{x}^2×{c}"),
        [z, y, x] if z == y && y == x => format!("{x}^3×{c}"),
        [z, y, x] if y == x => format!("{x}^2×{z}×{c}"),
        spatial => {
            let parts: Vec<String> = spatial.iter().rev().map(usize::to_string).collect();
            format!("{}×{c}", parts.join("×"))
        }
    }
}

/// Result of one forward pass on a graph.
pub struct Forward {
    pub output: Var,
    /// One handle per [`LayerEntry`], in entry order.
    pub activations: Vec<Var>,
    pub bindings: Bindings,
}

/// A network specification with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let params = spec.init_params(rng);
        Self { spec, params }
    }

    /// Builds a named network initialized from `seed`.
    pub fn build(name: &str, seed: u64) -> Result<Self> {
        let spec = NetworkSpec::build(name)?;
        Ok(Self::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Runs the network on `input`, recording every operation on `g`.
    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, mode: BatchNormMode) -> Result<Forward> {
        let binder = Binder::new(&mut self.params, mode);
        run(&self.spec, g, binder, input)
    }

    /// Eval-mode probabilities for an input tensor, with no gradient state.
    /// Forward pass normalizing with the running statistics.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(input, BatchNormMode::Eval)
    }

    /// Forward pass with the given normalization (`Eval` or `Batch`).
    pub fn predict_with(&mut self, input: &Tensor<T>, norm: BatchNormMode) -> Result<Tensor<T>> {
        if norm == BatchNormMode::Train {
            return Err(Error::invalid("prediction cannot update running statistics"));
        }
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let binder = Binder::inference(&mut self.params, norm);
        let out = run(&self.spec, &mut g, binder, x)?.output;
        Ok(g.value(out).clone())
    }
}

fn run<T: Scalar>(spec: &NetworkSpec, g: &mut Graph<T>, mut b: Binder<T>, input: Var) -> Result<Forward> {
    let shape = g.shape(input).to_vec();
    let traced = spec.trace_shapes(&shape)?;
    let mut acts: Vec<Var> = Vec::with_capacity(spec.entries.len());
    for (i, entry) in spec.entries.iter().enumerate() {
        let prefix = entry.prefix();
        let x = match entry.sources.as_slice() {
            [] => input,
            [s] => acts[*s],
            [a, c] => g.concat_channels(acts[*a], acts[*c])?,
            _ => unreachable!("entries have at most two sources"),
        };
        let y = match &entry.kind {
            LayerKind::Input => input,
            LayerKind::Conv { .. } => b.conv(g, &prefix, x)?,
            LayerKind::SigmoidHead => {
                let logits = b.conv(g, &prefix, x)?;
                g.sigmoid(logits)
            }
            LayerKind::Residual(block) => block.forward(g, &mut b, &prefix, x)?,
            LayerKind::Attention(att) => att.forward(g, &mut b, &prefix, x)?,
            LayerKind::Pool => {
                let f: Vec<usize> = g.shape(x)[2..]
                    .iter()
                    .zip(&traced[i][2..])
                    .map(|(a, o)| a / o)
                    .collect();
                g.max_pool(x, &f, &f)?
            }
            LayerKind::Upsample { .. } => {
                let f: Vec<usize> = traced[i][2..]
                    .iter()
                    .zip(&g.shape(x)[2..])
                    .map(|(o, a)| o / a)
                    .collect();
                g.upsample(x, &f)?
            }
        };
        assert_eq!(g.shape(y), traced[i].as_slice(), "{}", entry.name);
        acts.push(y);
    }
    Ok(Forward {
        output: *acts.last().expect("network has entries"),
        activations: acts,
        bindings: b.finish(),
    })
}
