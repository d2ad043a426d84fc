//! Intensity windowing, normalization, resampling and patch sampling.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Sample;
use crate::volume::{Mask, Volume};

/// Default HU window.
pub const HU_WINDOW: (f32, f32) = (-100.0, 200.0);

/// Clamps every voxel to `[lo, hi]`.
pub fn hu_window(v: &Volume<f32>, lo: f32, hi: f32) -> Result<Volume<f32>> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("HU window needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(v.map(|x| x.clamp(lo, hi)))
}

/// Subtracts the mean, then maps `[min, max]` affinely onto `[0, 1]`.
/// A constant volume becomes all 0.5.
pub fn normalize(v: &Volume<f32>) -> Volume<f32> {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let centered: Vec<f64> = v.data().iter().map(|&x| x as f64 - mean).collect();
    let (lo, hi) = centered
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let data: Vec<f32> = if hi > lo {
        let scale = 1.0 / (hi - lo);
        centered.iter().map(|&x| ((x - lo) * scale) as f32).collect()
    } else {
        log::warn!("normalizing a constant volume; emitting 0.5 everywhere");
        vec![0.5; v.len()]
    };
    Volume::new(v.extents(), data)
        .expect("extents unchanged")
        .with_spacing(v.spacing())
}

/// Interpolation used by [`resample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    /// Intensities and probabilities.
    Trilinear,
    /// Label masks.
    Nearest,
}

/// Source coordinate of output index `i` under the corner-aligned mapping
/// `i * (n_in - 1) / (n_out - 1)`; both end voxels map onto each other.
#[inline]
pub fn source_coordinate(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

fn resampled_spacing(v_spacing: [f32; 3], from: [usize; 3], to: [usize; 3]) -> [f32; 3] {
    let mut s = v_spacing;
    for a in 0..3 {
        if from[a] > 1 && to[a] > 1 {
            s[a] = (s[a] as f64 * (from[a] - 1) as f64 / (to[a] - 1) as f64) as f32;
        }
    }
    s
}

/// Resamples to `extents` voxels per axis. Equal extents return an exact
/// copy.
pub fn resample(v: &Volume<f32>, extents: [usize; 3], mode: Interp) -> Result<Volume<f32>> {
    match mode {
        Interp::Nearest => resample_nearest(v, extents),
        Interp::Trilinear => resample_linear(v, extents),
    }
}

/// Separable linear interpolation along x, then y, then z, in `f64`.
pub fn resample_linear(v: &Volume<f32>, extents: [usize; 3]) -> Result<Volume<f32>> {
    if extents.contains(&0) {
        return Err(Error::invalid(format!("resample extents must be positive, got {extents:?}")));
    }
    let from = v.extents();
    if from == extents {
        return Ok(v.clone());
    }
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let mut dims = from;
    for axis in 0..3 {
        if dims[axis] == extents[axis] {
            continue;
        }
        let (n_in, n_out) = (dims[axis], extents[axis]);
        let stride: usize = dims[..axis].iter().product();
        let outer: usize = dims[axis + 1..].iter().product();
        let taps: Vec<(usize, usize, f64)> = (0..n_out)
            .map(|i| {
                let s = source_coordinate(i, n_in, n_out);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        let mut next = vec![0.0; stride * n_out * outer];
        for o in 0..outer {
            for (i, &(i0, i1, t)) in taps.iter().enumerate() {
                let dst = (o * n_out + i) * stride;
                let a = (o * n_in + i0) * stride;
                let b = (o * n_in + i1) * stride;
                for k in 0..stride {
                    let (va, vb) = (cur[a + k], cur[b + k]);
                    next[dst + k] = if t == 0.0 { va } else { va + (vb - va) * t };
                }
            }
        }
        cur = next;
        dims[axis] = n_out;
    }
    let data = cur.into_iter().map(|x| x as f32).collect();
    Ok(Volume::new(extents, data)?.with_spacing(resampled_spacing(v.spacing(), from, extents)))
}

/// Nearest-neighbour resampling; emits only values present in the input.
pub fn resample_nearest<T: Copy>(v: &Volume<T>, extents: [usize; 3]) -> Result<Volume<T>> {
    if extents.contains(&0) {
        return Err(Error::invalid(format!("resample extents must be positive, got {extents:?}")));
    }
    let from = v.extents();
    if from == extents {
        return Ok(v.clone());
    }
    let pick = |a: usize| -> Vec<usize> {
        (0..extents[a])
            .map(|i| {
                let s = source_coordinate(i, from[a], extents[a]);
                ((s + 0.5).floor() as usize).min(from[a] - 1)
            })
            .collect()
    };
    let (px, py, pz) = (pick(0), pick(1), pick(2));
    let out = Volume::from_fn(extents, |x, y, z| v.get(px[x], py[y], pz[z]));
    Ok(out.with_spacing(resampled_spacing(v.spacing(), from, extents)))
}

/// One axial slice prepared for the 2D localization network.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub z: usize,
    /// `size × size × 1` intensities.
    pub image: Volume<f32>,
    /// `size × size × 1` binary labels.
    pub mask: Mask,
}

impl SliceSample {
    pub fn to_sample(&self) -> Sample<f32> {
        let [nx, ny, _] = self.image.extents();
        Sample {
            input: Tensor::from_vec(vec![1, 1, ny, nx], self.image.data().to_vec()).expect("slice shape"),
            target: Tensor::from_vec(vec![1, 1, ny, nx], self.mask.to_f32().into_data()).expect("slice shape"),
        }
    }
}

/// Every slice containing foreground plus a seeded third (rounded) of the
/// slices without, each resampled in-plane to `size × size`. Returned in
/// ascending `z`.
pub fn slice_sampler_2d(v: &Volume<f32>, mask: &Mask, size: usize, seed: u64) -> Result<Vec<SliceSample>> {
    if !v.same_extents(mask) {
        return Err(Error::shape(format!(
            "image {:?} and mask {:?} differ",
            v.extents(),
            mask.extents()
        )));
    }
    let [nx, ny, nz] = v.extents();
    let (with, without): (Vec<usize>, Vec<usize>) = (0..nz).partition(|&z| mask.slice_z(z).iter().any(|&m| m != 0));
    let keep = (without.len() + 1) / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample_indices(&mut rng, without.len(), keep)
        .into_iter()
        .map(|i| without[i])
        .collect();
    chosen.extend(with);
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|z| {
            let image = v.crop([0, 0, z], [nx, ny, 1])?;
            let m = mask.crop([0, 0, z], [nx, ny, 1])?;
            Ok(SliceSample {
                z,
                image: resample_linear(&image, [size, size, 1])?,
                mask: resample_nearest(&m, [size, size, 1])?,
            })
        })
        .collect()
}

/// Which network a patch set feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Localization,
    Liver,
    Tumor,
    Brain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    /// One volume per input channel.
    pub channels: Vec<Volume<f32>>,
    pub label: Mask,
}

impl Patch {
    pub fn extents(&self) -> [usize; 3] {
        self.label.extents()
    }

    /// `[1, C, z, y, x]` input and `[1, 1, z, y, x]` target.
    pub fn to_sample(&self) -> Sample<f32> {
        let [nx, ny, nz] = self.extents();
        let mut data = Vec::with_capacity(self.channels.len() * nx * ny * nz);
        for c in &self.channels {
            data.extend_from_slice(c.data());
        }
        Sample {
            input: Tensor::from_vec(vec![1, self.channels.len(), nz, ny, nx], data).expect("patch shape"),
            target: self.label.to_f32().to_tensor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub stage: Stage,
    pub extents: [usize; 3],
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn samples(&self) -> Vec<Sample<f32>> {
        self.patches.iter().map(Patch::to_sample).collect()
    }
}

fn extract(channels: &[&Volume<f32>], label: &Mask, origin: [usize; 3], size: [usize; 3]) -> Result<Patch> {
    Ok(Patch {
        origin,
        channels: channels.iter().map(|c| c.crop(origin, size)).collect::<Result<_>>()?,
        label: label.crop(origin, size)?,
    })
}

/// `n` full-plane windows of `depth` consecutive slices at seeded origins
/// in `[0, M - depth]`. The volume is expected to be resampled in-plane to
/// the network's patch size already.
pub fn liver_patch_sampler(v: &Volume<f32>, mask: &Mask, depth: usize, n: usize, seed: u64) -> Result<PatchSet> {
    if !v.same_extents(mask) {
        return Err(Error::shape("image and mask extents differ"));
    }
    let [nx, ny, m] = v.extents();
    if m < depth {
        return Err(Error::invalid(format!(
            "volume has {m} slices, fewer than the {depth}-slice patch depth; pad the box to {depth} slices or skip this case"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [nx, ny, depth];
    let patches = (0..n)
        .map(|_| extract(&[v], mask, [0, 0, rng.random_range(0..=m - depth)], size))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        stage: Stage::Liver,
        extents: size,
        patches,
    })
}

/// Origin of a `size` patch roughly centred on `center`, shifted by up to a
/// quarter patch per axis and clamped into the volume. The centre voxel is
/// always inside the patch.
fn centred_origin<R: Rng>(center: [usize; 3], size: [usize; 3], extents: [usize; 3], rng: &mut R) -> [usize; 3] {
    let mut o = [0; 3];
    for a in 0..3 {
        let q = (size[a] / 4) as i64;
        let jitter = if q > 0 { rng.random_range(-q..=q) } else { 0 };
        let start = center[a] as i64 - (size[a] / 2) as i64 + jitter;
        o[a] = start.clamp(0, (extents[a] - size[a]) as i64) as usize;
    }
    o
}

fn coords(extents: [usize; 3], i: usize) -> [usize; 3] {
    let [nx, ny, _] = extents;
    [i % nx, (i / nx) % ny, i / (nx * ny)]
}

/// Draws `n` patch origins: `round(n * positive_fraction)` centred on
/// random positive voxels, the rest on random negative voxels.
fn mixed_origins(
    extents: [usize; 3],
    size: [usize; 3],
    positives: &[usize],
    negatives: &[usize],
    n: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<[usize; 3]>> {
    for a in 0..3 {
        if size[a] > extents[a] {
            return Err(Error::shape(format!(
                "patch {size:?} larger than volume {extents:?}"
            )));
        }
    }
    let mut n_pos = (n as f64 * positive_fraction).round() as usize;
    if positives.is_empty() {
        n_pos = 0;
    }
    if negatives.is_empty() {
        n_pos = n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|k| {
            let pool = if k < n_pos { positives } else { negatives };
            let c = coords(extents, pool[rng.random_range(0..pool.len())]);
            centred_origin(c, size, extents, &mut rng)
        })
        .collect())
}

/// `n` patches of `size` at native resolution, centred on tumour voxels or
/// on tumour-free liver voxels in the ratio `tumor_fraction`. Every patch
/// therefore intersects the liver.
pub fn tumor_patch_sampler(
    v: &Volume<f32>,
    liver: &Mask,
    tumor: &Mask,
    n: usize,
    size: [usize; 3],
    tumor_fraction: f64,
    seed: u64,
) -> Result<PatchSet> {
    if !v.same_extents(liver) || !v.same_extents(tumor) {
        return Err(Error::shape("image and mask extents differ"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (&l, &t)) in liver.data().iter().zip(tumor.data()).enumerate() {
        if t != 0 {
            pos.push(i);
        } else if l != 0 {
            neg.push(i);
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::EmptyMask("liver mask is empty; no candidate tumor patches".into()));
    }
    let origins = mixed_origins(v.extents(), size, &pos, &neg, n, tumor_fraction, seed)?;
    let patches = origins
        .into_iter()
        .map(|o| extract(&[v], tumor, o, size))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        stage: Stage::Tumor,
        extents: size,
        patches,
    })
}

/// Whole-tumour labels: necrosis/non-enhancing (1), edema (2) and
/// enhancing tumour (4) all become 1.
pub fn merge_tumor_labels(labels: &Mask) -> Mask {
    labels.map(|l| u8::from(matches!(l, 1 | 2 | 4)))
}

/// Min-max normalizes each modality, merges the labels and samples `n`
/// four-channel patches of `size`, tumour-centred and non-tumour in the
/// ratio `tumor_fraction`. Non-tumour centres are drawn from voxels where
/// any modality is above its minimum.
pub fn brats_prepare(
    modalities: &[Volume<f32>],
    labels: &Mask,
    n: usize,
    size: [usize; 3],
    tumor_fraction: f64,
    seed: u64,
) -> Result<(PatchSet, Mask)> {
    if modalities.len() != 4 {
        return Err(Error::invalid(format!("expected 4 modalities, got {}", modalities.len())));
    }
    if modalities.iter().any(|m| !m.same_extents(labels)) {
        return Err(Error::shape("modalities and labels must share extents"));
    }
    let normalized: Vec<Volume<f32>> = modalities.iter().map(normalize).collect();
    let whole = merge_tumor_labels(labels);
    let extents = labels.extents();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        if whole.data()[i] != 0 {
            pos.push(i);
        } else if normalized.iter().any(|m| m.data()[i] > 0.0) {
            neg.push(i);
        }
    }
    if pos.is_empty() && neg.is_empty() {
        neg = (0..labels.len()).collect();
    }
    let origins = mixed_origins(extents, size, &pos, &neg, n, tumor_fraction, seed)?;
    let refs: Vec<&Volume<f32>> = normalized.iter().collect();
    let patches = origins
        .into_iter()
        .map(|o| extract(&refs, &whole, o, size))
        .collect::<Result<_>>()?;
    Ok((
        PatchSet {
            stage: Stage::Brain,
            extents: size,
            patches,
        },
        whole,
    ))
}
