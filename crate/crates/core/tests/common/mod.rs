//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod tables;

use raunet::architectures::{Network, NetworkSpec, Widths};
use raunet::autograd::BatchNormMode;
use raunet::blocks::Dims;
use raunet::{Graph, Result, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar objective `Σ w ⊙ f(inputs)` with a fixed random weighting `w`.
fn objective<T: Scalar>(
    inputs: &[Tensor<T>],
    f: &impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("operator under test");
    let w = Tensor::<T>::randn(g.shape(out), 1.0, &mut rng(99));
    let wv = g.input(w);
    let prod = g.mul(out, wv).expect("same shape");
    let loss = g.sum(prod);
    let value = g.value(loss).data()[0].as_f64();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).expect("backward");
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).data().iter().map(|x| x.as_f64()).collect())
        .collect();
    (value, grads)
}

/// Worst relative error over all inputs between the tape gradient and a
/// central difference with step `h`, perturbing every element.
pub fn check_op<T: Scalar>(inputs: &[Tensor<T>], h: f64, f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>) -> f64 {
    let (_, analytic) = objective(inputs, &f, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let mut probe = inputs.to_vec();
            let x = probe[i].data()[j].as_f64();
            probe[i].data_mut()[j] = T::from_f64(x + h);
            let (up, _) = objective(&probe, &f, false);
            probe[i].data_mut()[j] = T::from_f64(x - h);
            let (down, _) = objective(&probe, &f, false);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Values spaced at least `gap` apart in magnitude from zero and from each
/// other, so kinks (ReLU, max) are not crossed by a step below `gap / 2`.
pub fn separated<T: Scalar>(shape: &[usize], gap: f64, seed: u64) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    v.shuffle(&mut rng(seed));
    Tensor::from_vec(shape.to_vec(), v.into_iter().map(T::from_f64).collect()).unwrap()
}

/// Tiny 2D network on `1 × 32 × 32` input.
pub fn tiny_2d() -> NetworkSpec {
    NetworkSpec::custom(
        "tiny2d",
        Dims::Two,
        Widths {
            input: 1,
            stem: 2,
            residual: [2, 4, 4, 4, 4, 4],
        },
        1,
        vec![1, 32, 32],
    )
}

/// Tiny 3D network on `1 × 16 × 16 × 8` (x, y, z) input.
pub fn tiny_3d() -> NetworkSpec {
    NetworkSpec::custom(
        "tiny3d",
        Dims::Three,
        Widths {
            input: 1,
            stem: 2,
            residual: [2, 2, 4, 4, 4, 4],
        },
        1,
        vec![1, 8, 16, 16],
    )
}

fn network_loss<T: Scalar>(net: &mut Network<T>, x: &Tensor<T>, target: &Tensor<T>, grads: bool) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let fwd = net.forward(&mut g, xv, BatchNormMode::Train).unwrap();
    let loss = g.dice_loss(fwd.output, target, 1e-6).unwrap();
    let value = g.value(loss).data()[0].as_f64();
    if !grads {
        return (value, Vec::new(), Vec::new());
    }
    g.backward(loss).unwrap();
    let gp = fwd.bindings.gradients(&g);
    let mut param_grad = Vec::new();
    for (name, _) in net.params.iter() {
        param_grad.extend(gp[name].data().iter().map(|v| v.as_f64()));
    }
    let input_grad = g.grad(xv).data().iter().map(|v| v.as_f64()).collect();
    (value, param_grad, input_grad)
}

/// Compares directional derivatives of the Dice loss of a whole network,
/// with respect to every parameter and the input jointly, against central
/// differences along `directions` random unit directions. The tape runs in
/// `T`; the differences are taken on the same weights in `f64` so that
/// single-precision rounding in the loss does not swamp the step. Returns
/// the relative error of the stacked directional derivatives.
pub fn check_network<T: Scalar>(spec: &NetworkSpec, h: f64, directions: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = Network::<T>::new(spec.clone(), &mut r);
    // Move off the initialization, where zero biases and betas put ReLUs
    // exactly on their kink.
    for (_, t) in net.params.iter_mut() {
        for v in t.data_mut() {
            *v = T::from_f64(v.as_f64() + 0.3 * Tensor::<T>::randn(&[1], 1.0, &mut r).data()[0].as_f64());
        }
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&spec.input_shape);
    let x = Tensor::<T>::randn(&shape, 1.0, &mut r);
    let mut tshape = shape.clone();
    tshape[1] = 1;
    let target = Tensor::<T>::uniform(&tshape, 0.0, 1.0, &mut r).map(|v| if v > T::from_f64(0.6) { T::ONE } else { T::ZERO });
    let (_, gp, gx) = network_loss(&mut net, &x, &target, true);

    let mut exact = Network::<f64> {
        spec: spec.clone(),
        params: net.params.cast(),
    };
    let base = exact.params.clone();
    let (x, target) = (x.cast::<f64>(), target.cast::<f64>());
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..directions {
        let dp: Vec<Tensor<f64>> = base.iter().map(|(_, t)| Tensor::randn(t.shape(), 1.0, &mut r)).collect();
        let dx = Tensor::<f64>::randn(x.shape(), 1.0, &mut r);
        let len = dp
            .iter()
            .chain(std::iter::once(&dx))
            .flat_map(|t| t.data().iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt();
        let dir: Vec<f64> = dp.iter().flat_map(|t| t.data().iter().map(|v| v / len)).collect();
        let dirx: Vec<f64> = dx.data().iter().map(|v| v / len).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        analytic.push(dot(&gp, &dir) + dot(&gx, &dirx));
        let mut eval = |s: f64| {
            exact.params = base.clone();
            let mut k = 0;
            for (_, t) in exact.params.iter_mut() {
                for v in t.data_mut() {
                    *v += s * dir[k];
                    k += 1;
                }
            }
            let xs = Tensor::from_vec(x.shape().to_vec(), x.data().iter().zip(&dirx).map(|(v, d)| v + s * d).collect()).unwrap();
            network_loss(&mut exact, &xs, &target, false).0
        };
        let up = eval(h);
        let down = eval(-h);
        numeric.push((up - down) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// Gradient check of every tape operator. Returns `(operator, relative
/// error)` pairs for the scalar type `T` at step `h`.
pub fn operator_suite<T: Scalar>(h: f64) -> Vec<(&'static str, f64)> {
    use raunet::autograd::{Padding, RunningStats};
    let mut r = rng(1);
    let mut randn = |shape: &[usize]| Tensor::<T>::randn(shape, 1.0, &mut r);
    let mut out = Vec::new();

    let conv2 = [randn(&[2, 2, 5, 4]), randn(&[3, 2, 3, 3]), randn(&[3])];
    out.push(("conv 2d same", check_op(&conv2, h, |g, v| g.conv(v[0], v[1], v[2], &[1, 1], Padding::Same))));
    let conv3 = [randn(&[1, 2, 3, 4, 5]), randn(&[2, 2, 3, 3, 3]), randn(&[2])];
    out.push(("conv 3d same", check_op(&conv3, h, |g, v| g.conv(v[0], v[1], v[2], &[1, 1, 1], Padding::Same))));
    let strided = [randn(&[1, 2, 7, 6]), randn(&[2, 2, 3, 2]), randn(&[2])];
    out.push(("conv 2d valid stride 2", check_op(&strided, h, |g, v| g.conv(v[0], v[1], v[2], &[2, 2], Padding::Valid))));
    let point = [randn(&[1, 3, 2, 3, 3]), randn(&[2, 3, 1, 1, 1]), randn(&[2])];
    out.push(("conv 3d pointwise", check_op(&point, h, |g, v| g.conv(v[0], v[1], v[2], &[1, 1, 1], Padding::Same))));

    let bn = [randn(&[2, 3, 3, 2]), randn(&[3]), randn(&[3])];
    for (name, mode) in [
        ("batch_norm train", BatchNormMode::Train),
        ("batch_norm batch", BatchNormMode::Batch),
        ("batch_norm eval", BatchNormMode::Eval),
    ] {
        out.push((
            name,
            check_op(&bn, h, |g, v| {
                let mut rs = RunningStats {
                    mean: vec![T::from_f64(0.3); 3],
                    var: vec![T::from_f64(1.7); 3],
                };
                g.batch_norm(v[0], v[1], v[2], mode, &mut rs)
            }),
        ));
    }

    out.push(("relu", check_op(&[separated::<T>(&[1, 2, 3, 3], 0.1, 2)], h, |g, v| Ok(g.relu(v[0])))));
    out.push(("sigmoid", check_op(&[randn(&[1, 2, 3, 3])], h, |g, v| Ok(g.sigmoid(v[0])))));
    let pair = [randn(&[1, 2, 3, 3]), randn(&[1, 2, 3, 3])];
    out.push(("add", check_op(&pair, h, |g, v| g.add(v[0], v[1]))));
    out.push(("mul", check_op(&pair, h, |g, v| g.mul(v[0], v[1]))));
    out.push(("affine", check_op(&pair[..1], h, |g, v| Ok(g.affine(v[0], T::from_f64(-1.5), T::ONE)))));
    let cat = [randn(&[2, 1, 2, 3]), randn(&[2, 3, 2, 3])];
    out.push(("concat_channels", check_op(&cat, h, |g, v| g.concat_channels(v[0], v[1]))));
    out.push(("sum", check_op(&pair[..1], h, |g, v| Ok(g.sum(v[0])))));
    out.push(("mean", check_op(&pair[..1], h, |g, v| Ok(g.mean(v[0])))));
    let target = Tensor::<T>::from_vec(vec![1, 1, 2, 3], [1.0, 0.0, 1.0, 1.0, 0.0, 0.0].map(T::from_f64).to_vec()).unwrap();
    let pred = Tensor::<T>::from_vec(vec![1, 1, 2, 3], [0.8, 0.3, 0.6, 0.9, 0.2, 0.4].map(T::from_f64).to_vec()).unwrap();
    out.push(("dice_loss", check_op(&[pred], h, |g, v| g.dice_loss(v[0], &target, 1e-6))));

    out.push(("max_pool 2d", check_op(&[separated::<T>(&[1, 2, 4, 6], 0.1, 3)], h, |g, v| g.max_pool(v[0], &[2, 2], &[2, 2]))));
    out.push(("max_pool 3d", check_op(&[separated::<T>(&[1, 1, 4, 4, 2], 0.1, 4)], h, |g, v| g.max_pool(v[0], &[2, 2, 1], &[2, 2, 1]))));
    out.push(("upsample 2d", check_op(&[randn(&[1, 2, 2, 3])], h, |g, v| g.upsample(v[0], &[2, 2]))));
    out.push(("upsample 3d", check_op(&[randn(&[1, 1, 2, 2, 2])], h, |g, v| g.upsample(v[0], &[2, 1, 2]))));
    out
}

use raunet::postprocess::VoteMode;
use raunet::{Mask, Volume};
use rand::Rng;
use std::collections::VecDeque;

/// Random binary mask; `density` is the foreground probability.
pub fn random_mask<R: Rng>(extents: [usize; 3], density: f64, r: &mut R) -> Mask {
    Volume::from_fn(extents, |_, _, _| u8::from(r.random_bool(density)))
}

/// Random extents with every axis in `1..=max`.
pub fn random_extents<R: Rng>(max: usize, r: &mut R) -> [usize; 3] {
    [0; 3].map(|_| r.random_range(1..=max))
}

fn neighbour_offsets(connectivity: usize) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let l1 = dx.abs() + dy.abs() + dz.abs();
                let keep = match connectivity {
                    6 => l1 == 1,
                    18 => l1 == 1 || l1 == 2,
                    _ => l1 > 0,
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill; components are numbered from 1 in the scan
/// order of their first voxel.
pub fn flood_fill(mask: &Mask, connectivity: usize) -> (Vec<u32>, u32) {
    let [nx, ny, nz] = mask.extents();
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let offsets = neighbour_offsets(connectivity);
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 || labels[idx(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                labels[idx(x, y, z)] = next;
                let mut queue = VecDeque::from([(x, y, z)]);
                while let Some((cx, cy, cz)) = queue.pop_front() {
                    for d in &offsets {
                        let (px, py, pz) = (cx as i64 + d[0], cy as i64 + d[1], cz as i64 + d[2]);
                        if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                            continue;
                        }
                        let (px, py, pz) = (px as usize, py as usize, pz as usize);
                        if mask.get(px, py, pz) != 0 && labels[idx(px, py, pz)] == 0 {
                            labels[idx(px, py, pz)] = next;
                            queue.push_back((px, py, pz));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

fn surface_points(mask: &Mask) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = mask.extents();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let exposed = neighbour_offsets(6).iter().any(|d| {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    q.iter().any(|&c| c < 0)
                        || q[0] >= nx as i64
                        || q[1] >= ny as i64
                        || q[2] >= nz as i64
                        || mask.get(q[0] as usize, q[1] as usize, q[2] as usize) == 0
                });
                if exposed {
                    out.push([x as f64, y as f64, z as f64]);
                }
            }
        }
    }
    out
}

/// All-pairs surface distances: `(ASSD, MSD, HD95)` over the pooled
/// directed distances, HD95 by linear interpolation at rank `0.95 (n - 1)`.
pub fn brute_surface(seg: &Mask, gt: &Mask, spacing: [f64; 3]) -> (f64, f64, f64) {
    let (a, b) = (surface_points(seg), surface_points(gt));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| (0..3).map(|k| ((p[k] - q[k]) * spacing[k]).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|p| nearest(p, &a))).collect();
    all.sort_by(f64::total_cmp);
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let hd95 = all[lo] + (all[hi] - all[lo]) * (rank - lo as f64);
    (assd, *all.last().unwrap(), hd95)
}

/// Per-voxel accumulation over the covering patches, visited in `(z, y, x)`
/// origin order.
pub fn dense_vote(patches: &[([usize; 3], Volume<f32>)], extents: [usize; 3], mode: VoteMode) -> Volume<f32> {
    let mut sorted: Vec<&([usize; 3], Volume<f32>)> = patches.iter().collect();
    sorted.sort_by_key(|(o, _)| (o[2], o[1], o[0]));
    Volume::from_fn(extents, |x, y, z| {
        let (mut sum, mut n) = (0.0f64, 0u32);
        for (o, p) in &sorted {
            let [sx, sy, sz] = p.extents();
            let inside = x >= o[0] && y >= o[1] && z >= o[2] && x < o[0] + sx && y < o[1] + sy && z < o[2] + sz;
            if inside {
                let v = p.get(x - o[0], y - o[1], z - o[2]);
                sum += match mode {
                    VoteMode::Mean => v as f64,
                    VoteMode::Majority(t) => f64::from(u8::from(v >= t)),
                };
                n += 1;
            }
        }
        (sum / n as f64) as f32
    })
}

/// CCL against flood fill on `n` random masks of up to `max`³ voxels,
/// cycling through 6, 18 and 26 connectivity. Returns the mismatches.
pub fn ccl_trials(n: usize, max: usize, seed: u64) -> usize {
    use raunet::postprocess::{connected_components, Connectivity};
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..n {
        let extents = random_extents(max, &mut r);
        let density = r.random_range(0.1..0.7);
        let mask = random_mask(extents, density, &mut r);
        let conn = [6, 18, 26][i % 3];
        let lv = connected_components(&mask, Connectivity::from_count(conn).unwrap());
        let (labels, count) = flood_fill(&mask, conn);
        if lv.labels.data() != labels.as_slice() || lv.count as u32 != count {
            bad += 1;
        }
    }
    bad
}

/// Largest absolute deviation of ASSD, MSD and HD95 from the all-pairs
/// oracle over `n` random nonempty mask pairs of up to `max`³ voxels with
/// random anisotropic spacing.
pub fn surface_trials(n: usize, max: usize, seed: u64) -> f64 {
    use raunet::metrics::surface_metrics;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let extents = random_extents(max, &mut r);
        let (da, db) = (r.random_range(0.05..0.6), r.random_range(0.05..0.6));
        let seg = random_mask(extents, da, &mut r);
        let gt = random_mask(extents, db, &mut r);
        if seg.count() == 0 || gt.count() == 0 {
            continue;
        }
        let spacing = [0; 3].map(|_| r.random_range(0.5..3.0));
        let got = surface_metrics(&seg, &gt, spacing).unwrap();
        let (assd, msd, hd95) = brute_surface(&seg, &gt, spacing);
        worst = worst
            .max((got.assd - assd).abs())
            .max((got.msd - msd).abs())
            .max((got.hd95 - hd95).abs());
        done += 1;
    }
    worst
}

/// vote_merge against per-voxel dense accumulation on `n` random tilings,
/// with the patch list shuffled. Returns the number of inexact results.
pub fn vote_trials(n: usize, seed: u64) -> usize {
    use rand::seq::SliceRandom;
    use raunet::postprocess::{tile_origins, vote_merge};
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..n {
        let extents = random_extents(14, &mut r);
        let patch = extents.map(|e| r.random_range(1..=e));
        let stride = patch.map(|p| r.random_range(1..=p));
        let mut patches: Vec<([usize; 3], Volume<f32>)> = tile_origins(extents, patch, stride)
            .unwrap()
            .into_iter()
            .map(|o| (o, Volume::from_fn(patch, |_, _, _| r.random::<f32>())))
            .collect();
        patches.shuffle(&mut r);
        let mode = if i % 2 == 0 { VoteMode::Mean } else { VoteMode::Majority(0.5) };
        let merged = vote_merge(&patches, extents, mode).unwrap();
        if merged.data() != dense_vote(&patches, extents, mode).data() {
            bad += 1;
        }
    }
    bad
}

/// Worst deviation from `VOE = 1 - Jaccard` and `Jaccard = DC / (2 - DC)`
/// over `n` random mask pairs (pairs where both are empty excluded).
pub fn identity_trials(n: usize, seed: u64) -> f64 {
    use raunet::metrics::overlap_metrics;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let extents = random_extents(10, &mut r);
        let (da, db) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let seg = random_mask(extents, da, &mut r);
        let gt = random_mask(extents, db, &mut r);
        if seg.count() == 0 && gt.count() == 0 {
            continue;
        }
        let o = overlap_metrics(&seg, &gt).unwrap();
        worst = worst
            .max((o.voe - (1.0 - o.jaccard)).abs())
            .max((o.jaccard - o.dc / (2.0 - o.dc)).abs());
        done += 1;
    }
    worst
}
