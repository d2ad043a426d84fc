use super::{accumulate, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) struct MaxPoolSaved {
    input: Var,
    /// Flat input offset of the winning cell for every output cell.
    argmax: Vec<usize>,
}

pub(crate) struct UpsampleSaved {
    input: Var,
    factor: [usize; 3],
    input_spatial: [usize; 3],
}

fn spatial3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape.len() {
        4 => Ok([1, shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        _ => Err(Error::shape(format!(
            "pooling expects rank 4 or 5 input, got {shape:?}"
        ))),
    }
}

fn per_axis(v: &[usize], spatial: usize, what: &str) -> Result<[usize; 3]> {
    if v.len() != spatial || v.contains(&0) {
        return Err(Error::shape(format!(
            "{what} {v:?} must have {spatial} positive entries"
        )));
    }
    Ok(if spatial == 2 {
        [1, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    })
}

impl<T: Scalar> Graph<T> {
    /// Max pooling without padding. Ties go to the first cell in scan order.
    pub fn max_pool(&mut self, input: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [id, ih, iw] = spatial3(&shape)?;
        let spatial = shape.len() - 2;
        let [wd, wh, ww] = per_axis(window, spatial, "pool window")?;
        let [sd, sh, sw] = per_axis(stride, spatial, "pool stride")?;
        if wd > id || wh > ih || ww > iw {
            return Err(Error::shape(format!(
                "pool window {window:?} larger than spatial extents {:?}",
                &shape[2..]
            )));
        }
        let (od, oh, ow) = ((id - wd) / sd + 1, (ih - wh) / sh + 1, (iw - ww) / sw + 1);
        let planes = shape[0] * shape[1];
        let (iv, ov) = (id * ih * iw, od * oh * ow);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * ov);
        let mut argmax = Vec::with_capacity(planes * ov);
        for p in 0..planes {
            let base = p * iv;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = T::ZERO;
                        for dz in 0..wd {
                            for dy in 0..wh {
                                let row = base + ((oz * sd + dz) * ih + oy * sh + dy) * iw + ox * sw;
                                for dx in 0..ww {
                                    let v = x[row + dx];
                                    if best == usize::MAX || v > best_v {
                                        best = row + dx;
                                        best_v = v;
                                    }
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend_from_slice(&[od, oh, ow][3 - spatial..]);
        let out = Tensor::from_vec(out_shape, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::MaxPool(MaxPoolSaved { input, argmax })))
    }

    /// Nearest-neighbour upsampling by an integer factor per spatial axis.
    pub fn upsample(&mut self, input: Var, factor: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let input_spatial = spatial3(&shape)?;
        let spatial = shape.len() - 2;
        let factor = per_axis(factor, spatial, "upsample factor")?;
        let [id, ih, iw] = input_spatial;
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (id * fd, ih * fh, iw * fw);
        let planes = shape[0] * shape[1];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut line = Vec::with_capacity(ow);
        for p in 0..planes {
            let base = p * id * ih * iw;
            for oz in 0..od {
                for oy in 0..oh {
                    let row = base + ((oz / fd) * ih + oy / fh) * iw;
                    line.clear();
                    line.extend((0..ow).map(|ox| x[row + ox / fw]));
                    out.extend_from_slice(&line);
                }
            }
        }
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend_from_slice(&[od, oh, ow][3 - spatial..]);
        let out = Tensor::from_vec(out_shape, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            out,
            rg,
            Op::Upsample(UpsampleSaved {
                input,
                factor,
                input_spatial,
            }),
        ))
    }
}

pub(super) fn max_pool_backward<T: Scalar>(nodes: &mut [Node<T>], s: &MaxPoolSaved, grad: &[T]) {
    accumulate(nodes, s.input, |_, dx| {
        for (&idx, &up) in s.argmax.iter().zip(grad) {
            dx[idx] += up;
        }
    });
}

pub(super) fn upsample_backward<T: Scalar>(nodes: &mut [Node<T>], s: &UpsampleSaved, grad: &[T]) {
    let [id, ih, iw] = s.input_spatial;
    let [fd, fh, fw] = s.factor;
    let (od, oh, ow) = (id * fd, ih * fh, iw * fw);
    accumulate(nodes, s.input, |_, dx| {
        let planes = dx.len() / (id * ih * iw);
        let mut o = 0;
        for p in 0..planes {
            let base = p * id * ih * iw;
            for oz in 0..od {
                for oy in 0..oh {
                    let row = base + ((oz / fd) * ih + oy / fh) * iw;
                    for ox in 0..ow {
                        dx[row + ox / fw] += grad[o];
                        o += 1;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_window() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool(x, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_cell() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 3.0));
        let y = g.max_pool(x, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_nested_loop_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = Tensor::<f64>::randn(&[1, 2, 8, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(xt.clone());
        let y = g.max_pool(x, &[2, 2, 2], &[2, 2, 2]).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4, 4]);
        let out = g.value(y).data();
        for c in 0..2 {
            for z in 0..4 {
                for yy in 0..4 {
                    for xx in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = (((c * 8) + 2 * z + dz) * 8 + 2 * yy + dy) * 8 + 2 * xx + dx;
                                    m = m.max(xt.data()[i]);
                                }
                            }
                        }
                        assert_eq!(out[((c * 4 + z) * 4 + yy) * 4 + xx], m);
                    }
                }
            }
        }
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(g.max_pool(x, &[2, 2], &[2, 2]).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.upsample(x, &[2, 2]).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 4]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let id = g.upsample(x, &[1, 1]).unwrap();
        assert_eq!(g.value(id), g.value(x));
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.upsample(x, &[3, 2]).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).data(), &[6.0, 6.0]);
    }
}
