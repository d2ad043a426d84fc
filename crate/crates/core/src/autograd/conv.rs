//! 2D/3D convolution via im2col and GEMM.
//!
//! Both ranks run through one 3D code path: a 2D input `[n, c, h, w]` is
//! treated as `[n, c, 1, h, w]` with a kernel depth of one.

use super::{accumulate, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `kernel / 2` zeros on both sides; kernel extents must be odd.
    Same,
    /// No padding.
    Valid,
}

/// `floor((input + 2 * pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cols_rows(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    /// 1x1(x1) kernel with unit stride: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

pub(crate) struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Var,
    geom: Geometry,
}

fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    match v.len() {
        2 => [fill, v[0], v[1]],
        3 => [v[0], v[1], v[2]],
        _ => unreachable!("spatial rank checked by caller"),
    }
}

fn geometry(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: &[usize],
    padding: Padding,
) -> Result<Geometry> {
    let rank = input.len();
    if rank != 4 && rank != 5 {
        return Err(Error::shape(format!(
            "conv input must be rank 4 or 5, got {input:?}"
        )));
    }
    let spatial = rank - 2;
    if weight.len() != rank {
        return Err(Error::shape(format!(
            "conv kernel {weight:?} does not match input rank {rank}"
        )));
    }
    if weight[1] != input[1] {
        return Err(Error::shape(format!(
            "conv kernel expects {} input channels, input has {}",
            weight[1], input[1]
        )));
    }
    if bias != [weight[0]] {
        return Err(Error::shape(format!(
            "conv bias {bias:?} does not match {} output channels",
            weight[0]
        )));
    }
    if stride.len() != spatial || stride.contains(&0) {
        return Err(Error::shape(format!(
            "conv stride {stride:?} must have {spatial} positive entries"
        )));
    }
    let kernel = &weight[2..];
    let pad: Vec<usize> = match padding {
        Padding::Valid => vec![0; spatial],
        Padding::Same => {
            if kernel.iter().any(|k| k % 2 == 0) {
                return Err(Error::shape(format!(
                    "same padding needs odd kernel extents, got {kernel:?}"
                )));
            }
            kernel.iter().map(|k| k / 2).collect()
        }
    };
    let mut output = Vec::with_capacity(spatial);
    for a in 0..spatial {
        let o = conv_output_extent(input[2 + a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
            Error::shape(format!(
                "conv kernel {kernel:?} larger than padded input {:?}",
                &input[2..]
            ))
        })?;
        output.push(o);
    }
    Ok(Geometry {
        n: input[0],
        cin: input[1],
        cout: weight[0],
        input: lift3(&input[2..], 1),
        kernel: lift3(kernel, 1),
        stride: lift3(stride, 1),
        pad: lift3(&pad, 0),
        output: lift3(&output, 1),
    })
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let line = &mut dst[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                line.fill(T::ZERO);
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for (ox, d) in line.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                *d = if ix < 0 || ix >= iw as isize {
                                    T::ZERO
                                } else {
                                    xc[base + ix as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let line = &src[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for (ox, &v) in line.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dxc[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `input` `[n, cin, spatial..]` with `weight`
    /// `[cout, cin, kernel..]` plus a per-channel `bias`.
    pub fn conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: &[usize],
        padding: Padding,
    ) -> Result<Var> {
        let geom = geometry(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let (k, p) = (geom.cols_rows(), geom.out_volume());
        let in_stride = geom.cin * geom.in_volume();
        let mut out = vec![T::ZERO; geom.n * geom.cout * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; k * p]
        };
        for i in 0..geom.n {
            let xi = &x[i * in_stride..(i + 1) * in_stride];
            let oi = &mut out[i * geom.cout * p..(i + 1) * geom.cout * p];
            for (co, chunk) in oi.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
            let rhs: &[T] = if geom.is_pointwise() {
                xi
            } else {
                im2col(&geom, xi, &mut cols);
                &cols
            };
            T::gemm(
                geom.cout, k, p, T::ONE, w, k as isize, 1, rhs, p as isize, 1, T::ONE, oi,
                p as isize, 1,
            );
        }
        let mut shape = vec![geom.n, geom.cout];
        let spatial = self.shape(input).len() - 2;
        shape.extend_from_slice(&geom.output[3 - spatial..]);
        let out = Tensor::from_vec(shape, out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv(ConvSaved {
                input,
                weight,
                bias,
                geom,
            }),
        ))
    }
}

pub(super) fn backward<T: Scalar>(nodes: &mut [Node<T>], s: &ConvSaved, grad: &[T]) {
    let g = &s.geom;
    let (k, p) = (g.cols_rows(), g.out_volume());
    let in_stride = g.cin * g.in_volume();
    let out_stride = g.cout * p;

    if nodes[s.bias.0].requires_grad {
        accumulate(nodes, s.bias, |_, db| {
            for i in 0..g.n {
                for (co, chunk) in grad[i * out_stride..(i + 1) * out_stride]
                    .chunks(p)
                    .enumerate()
                {
                    db[co] += chunk.iter().fold(T::ZERO, |a, &v| a + v);
                }
            }
        });
    }

    if nodes[s.weight.0].requires_grad {
        let x = nodes[s.input.0].value.data().to_vec();
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; k * p]
        };
        accumulate(nodes, s.weight, |_, dw| {
            for i in 0..g.n {
                let xi = &x[i * in_stride..(i + 1) * in_stride];
                let rhs: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(g, xi, &mut cols);
                    &cols
                };
                let gi = &grad[i * out_stride..(i + 1) * out_stride];
                // dW (cout x k) += dY (cout x p) * cols^T (p x k)
                T::gemm(
                    g.cout, p, k, T::ONE, gi, p as isize, 1, rhs, 1, p as isize, T::ONE, dw,
                    k as isize, 1,
                );
            }
        });
    }

    if nodes[s.input.0].requires_grad {
        let w = nodes[s.weight.0].value.data().to_vec();
        let pointwise = g.is_pointwise();
        let mut dcols = if pointwise {
            Vec::new()
        } else {
            vec![T::ZERO; k * p]
        };
        accumulate(nodes, s.input, |_, dx| {
            for i in 0..g.n {
                let gi = &grad[i * out_stride..(i + 1) * out_stride];
                let dxi = &mut dx[i * in_stride..(i + 1) * in_stride];
                // dcols (k x p) = W^T (k x cout) * dY (cout x p)
                if pointwise {
                    T::gemm(
                        k, g.cout, p, T::ONE, &w, 1, k as isize, gi, p as isize, 1, T::ONE, dxi,
                        p as isize, 1,
                    );
                } else {
                    T::gemm(
                        k, g.cout, p, T::ONE, &w, 1, k as isize, gi, p as isize, 1, T::ZERO,
                        &mut dcols, p as isize, 1,
                    );
                    col2im(g, &dcols, dxi);
                }
            }
        });
    }
}
