//! Three-stage liver and tumour segmentation: 2D slice localization, 3D
//! liver segmentation inside the located box, and 3D tumour extraction
//! restricted to the liver.

use crate::architectures::Network;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::postprocess::{binarize, bounding_box, keep_largest, mask_within, tile_origins, vote_merge, BoundaryBox};
use crate::preprocess::{
    hu_window, liver_patch_sampler, normalize, resample_linear, resample_nearest, slice_sampler_2d,
    tumor_patch_sampler, PatchSet, SliceSample,
};
use crate::tensor::Tensor;
use crate::volume::{Mask, Volume};

/// Windowing followed by normalization to `[0, 1]`.
pub fn prepare_volume(hu: &Volume<f32>, cfg: &PipelineConfig) -> Result<Volume<f32>> {
    Ok(normalize(&hu_window(hu, cfg.window_lo, cfg.window_hi)?))
}

/// Trained networks for every stage. Several liver or tumour networks are
/// averaged as an ensemble.
pub struct CascadeModels {
    pub localization: Network<f32>,
    pub liver: Vec<Network<f32>>,
    pub tumor: Vec<Network<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    /// Box found by the localization stage (margin included).
    pub liver_box: BoundaryBox,
    pub coarse_liver: Mask,
    pub liver: Mask,
    pub tumor: Mask,
}

fn crop_box<T: Copy>(v: &Volume<T>, b: &BoundaryBox) -> Result<Volume<T>> {
    v.crop(b.min, b.size())
}

/// Grows `b` to at least `size` voxels per axis, staying inside `extents`.
fn grow_box(b: &BoundaryBox, size: [usize; 3], extents: [usize; 3]) -> Result<BoundaryBox> {
    let mut out = *b;
    for a in 0..3 {
        if size[a] > extents[a] {
            return Err(Error::shape(format!(
                "patch {size:?} does not fit volume {extents:?}"
            )));
        }
        let have = b.max[a] - b.min[a] + 1;
        if have < size[a] {
            let extra = size[a] - have;
            let lo = b.min[a].saturating_sub(extra / 2);
            let lo = lo.min(extents[a] - size[a]);
            out.min[a] = lo;
            out.max[a] = lo + size[a] - 1;
        }
    }
    Ok(out)
}

/// Stage (a): slice-wise 2D probabilities at `loc_size`², resampled back,
/// thresholded, reduced to the largest 3D component and boxed with the
/// configured margin.
pub fn localize(vol: &Volume<f32>, net: &mut Network<f32>, cfg: &PipelineConfig) -> Result<(Mask, BoundaryBox)> {
    let [nx, ny, nz] = vol.extents();
    let s = cfg.loc_size;
    let mut prob = Volume::filled(vol.extents(), 0.0f32);
    for z in 0..nz {
        let slice = resample_linear(&vol.crop([0, 0, z], [nx, ny, 1])?, [s, s, 1])?;
        let input = Tensor::from_vec(vec![1, 1, s, s], slice.into_data())?;
        let out = net.predict_with(&input, cfg.inference_norm())?;
        let p = Volume::new([s, s, 1], out.into_data())?;
        prob.paste([0, 0, z], &resample_linear(&p, [nx, ny, 1])?)?;
    }
    let raw = binarize(&prob, cfg.threshold);
    let coarse = keep_largest(&raw, cfg.connectivity()).map_err(|_| {
        Error::EmptyMask("localization found no liver component; aborting the cascade".into())
    })?;
    let b = bounding_box(&coarse, cfg.margin)?;
    Ok((coarse.with_spacing(vol.spacing()), b))
}

/// Ensemble-averaged, vote-merged probabilities over a tiling of `input`.
fn tiled_probability(input: &Volume<f32>, nets: &mut [Network<f32>], patch: [usize; 3], cfg: &PipelineConfig) -> Result<Volume<f32>> {
    if nets.is_empty() {
        return Err(Error::invalid("no networks for this stage"));
    }
    let origins = tile_origins(input.extents(), patch, cfg.stride(patch))?;
    let mut pieces = Vec::with_capacity(origins.len() * nets.len());
    for o in origins {
        let x = input.crop(o, patch)?.to_tensor();
        for net in nets.iter_mut() {
            let p = Volume::from_tensor(&net.predict_with(&x, cfg.inference_norm())?)?;
            pieces.push((o, p));
        }
    }
    vote_merge(&pieces, input.extents(), cfg.vote_mode())
}

/// In-plane patch size and depth the liver box is resampled to: x and y go
/// to the patch size, z keeps its slice count unless shorter than a patch.
fn liver_grid(b: &BoundaryBox, cfg: &PipelineConfig) -> [usize; 3] {
    let [px, py, pz] = cfg.liver_patch;
    [px, py, b.size()[2].max(pz)]
}

/// Stage (b): liver probabilities inside the box, restored to native size,
/// thresholded and reduced to the largest component.
pub fn segment_liver(vol: &Volume<f32>, b: &BoundaryBox, nets: &mut [Network<f32>], cfg: &PipelineConfig) -> Result<Mask> {
    let roi = crop_box(vol, b)?;
    let grid = resample_linear(&roi, liver_grid(b, cfg))?;
    let prob = tiled_probability(&grid, nets, cfg.liver_patch, cfg)?;
    let back = resample_linear(&prob, b.size())?;
    let mut full = Volume::filled(vol.extents(), 0u8);
    full.paste(b.min, &binarize(&back, cfg.threshold))?;
    let liver = keep_largest(&full, cfg.connectivity())
        .map_err(|_| Error::EmptyMask("liver stage produced an empty mask".into()))?;
    Ok(liver.with_spacing(vol.spacing()))
}

/// Stage (c): tumour probabilities over the liver's box at native
/// resolution, thresholded and restricted to the liver.
pub fn segment_tumor(vol: &Volume<f32>, liver: &Mask, nets: &mut [Network<f32>], cfg: &PipelineConfig) -> Result<Mask> {
    let b = grow_box(&bounding_box(liver, 0)?, cfg.tumor_patch, vol.extents())?;
    let roi = crop_box(vol, &b)?;
    let prob = tiled_probability(&roi, nets, cfg.tumor_patch, cfg)?;
    let mut full = Volume::filled(vol.extents(), 0u8);
    full.paste(b.min, &binarize(&prob, cfg.threshold))?;
    Ok(mask_within(&full, liver)?.with_spacing(vol.spacing()))
}

/// Runs all three stages on a raw HU volume.
pub fn run_cascade(hu: &Volume<f32>, models: &mut CascadeModels, cfg: &PipelineConfig) -> Result<CascadeOutput> {
    let vol = prepare_volume(hu, cfg)?;
    let (coarse_liver, liver_box) = localize(&vol, &mut models.localization, cfg)?;
    log::info!("liver box {:?}..={:?}", liver_box.min, liver_box.max);
    let liver = segment_liver(&vol, &liver_box, &mut models.liver, cfg)?;
    let tumor = segment_tumor(&vol, &liver, &mut models.tumor, cfg)?;
    Ok(CascadeOutput {
        liver_box,
        coarse_liver,
        liver,
        tumor,
    })
}

/// Scores cascade masks against ground truth as rows `liver` and `tumor`.
pub fn evaluate_cascade(out: &CascadeOutput, liver_gt: &Mask, tumor_gt: &Mask) -> Result<EvalReport> {
    let mut r = EvalReport::new();
    r.add_case("liver", &out.liver, liver_gt)?;
    r.add_case("tumor", &out.tumor, tumor_gt)?;
    Ok(r)
}

/// Localization training slices from a prepared volume.
pub fn localization_samples(vol: &Volume<f32>, liver: &Mask, cfg: &PipelineConfig, seed: u64) -> Result<Vec<SliceSample>> {
    slice_sampler_2d(vol, liver, cfg.loc_size, seed)
}

/// Liver training windows: the ground-truth box (with margin) resampled
/// like stage (b) does at inference.
pub fn liver_samples(vol: &Volume<f32>, liver: &Mask, cfg: &PipelineConfig, seed: u64) -> Result<PatchSet> {
    let b = bounding_box(liver, cfg.margin)?;
    let grid = liver_grid(&b, cfg);
    let image = resample_linear(&crop_box(vol, &b)?, grid)?;
    let mask = resample_nearest(&crop_box(liver, &b)?, grid)?;
    liver_patch_sampler(&image, &mask, cfg.liver_patch[2], cfg.liver_patches, seed)
}

/// Tumour training patches at native resolution.
pub fn tumor_samples(vol: &Volume<f32>, liver: &Mask, tumor: &Mask, cfg: &PipelineConfig, seed: u64) -> Result<PatchSet> {
    tumor_patch_sampler(vol, liver, tumor, cfg.tumor_patches, cfg.tumor_patch, cfg.tumor_fraction, seed)
}
