//! Connected components, bounding boxes, patch tiling and vote merging.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Voxel neighbourhood used by [`connected_components`]. The 2D variants
/// connect voxels within the same axial slice only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connectivity {
    Four,
    Eight,
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        Ok(match n {
            4 => Self::Four,
            8 => Self::Eight,
            6 => Self::Six,
            18 => Self::Eighteen,
            26 => Self::TwentySix,
            _ => return Err(Error::invalid(format!("connectivity must be 4, 8, 6, 18 or 26, got {n}"))),
        })
    }

    pub fn count(self) -> usize {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    /// All neighbour offsets `(dx, dy, dz)`.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let (planar, max_nonzero) = match self {
            Self::Four => (true, 1),
            Self::Eight => (true, 2),
            Self::Six => (false, 1),
            Self::Eighteen => (false, 2),
            Self::TwentySix => (false, 3),
        };
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            if planar && dz != 0 {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels `1..=count` (0 is background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub labels: Volume<u32>,
    pub count: usize,
    pub connectivity: Connectivity,
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// Labels maximal connected foreground sets in order of their first voxel
/// in raster (x-fastest) order.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> LabelVolume {
    let [nx, ny, nz] = mask.extents();
    // Neighbours already visited in raster order.
    let back: Vec<[i64; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|&[dx, dy, dz]| (dz, dy, dx) < (0, 0, 0))
        .collect();
    let n = mask.len();
    let mut provisional = vec![u32::MAX; n];
    let mut parent: Vec<u32> = Vec::new();
    let m = mask.data();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if m[i] == 0 {
                    continue;
                }
                let mut mine = u32::MAX;
                for &[dx, dy, dz] in &back {
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 {
                        continue;
                    }
                    let j = mask.index(xx as usize, yy as usize, zz as usize);
                    let other = provisional[j];
                    if other == u32::MAX {
                        continue;
                    }
                    if mine == u32::MAX {
                        mine = find(&mut parent, other);
                    } else {
                        let (a, b) = (find(&mut parent, mine), find(&mut parent, other));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            mine = lo;
                        }
                    }
                }
                if mine == u32::MAX {
                    mine = parent.len() as u32;
                    parent.push(mine);
                }
                provisional[i] = mine;
            }
        }
    }
    let mut relabel = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = vec![0u32; n];
    for i in 0..n {
        if provisional[i] == u32::MAX {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        if relabel[root] == 0 {
            count += 1;
            relabel[root] = count;
        }
        labels[i] = relabel[root];
    }
    LabelVolume {
        labels: Volume::new(mask.extents(), labels)
            .expect("extents unchanged")
            .with_spacing(mask.spacing()),
        count: count as usize,
        connectivity,
    }
}

impl LabelVolume {
    /// Voxel count per label, index 0 being background.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.count + 1];
        for &l in self.labels.data() {
            s[l as usize] += 1;
        }
        s
    }
}

/// Mask of the component with the most voxels; ties keep the smaller label.
pub fn largest_component(lv: &LabelVolume) -> Result<Mask> {
    if lv.count == 0 {
        return Err(Error::EmptyMask("no foreground component to select".into()));
    }
    let sizes = lv.sizes();
    let mut best = 1;
    for l in 2..=lv.count {
        if sizes[l] > sizes[best] {
            best = l;
        }
    }
    Ok(lv.labels.map(|l| u8::from(l as usize == best)))
}

/// Labels `mask` and keeps its largest component.
pub fn keep_largest(mask: &Mask, connectivity: Connectivity) -> Result<Mask> {
    largest_component(&connected_components(mask, connectivity))
}

/// Inclusive voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundaryBox {
    pub fn size(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// Tight box around the foreground grown by `margin` voxels per axis and
/// clipped to the volume.
pub fn bounding_box(mask: &Mask, margin: usize) -> Result<BoundaryBox> {
    let [nx, ny, nz] = mask.extents();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            let row = mask.index(0, y, z);
            for (x, &v) in mask.data()[row..row + nx].iter().enumerate() {
                if v != 0 {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        min[a] = min[a].min(c);
                        max[a] = max[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask("bounding box of an empty mask".into()));
    }
    let ext = mask.extents();
    Ok(BoundaryBox {
        min: min.map(|m| m.saturating_sub(margin)),
        max: [0, 1, 2].map(|a| (max[a] + margin).min(ext[a] - 1)),
    })
}

/// Patch origins on a regular grid of `stride` with the final origin per
/// axis clamped so the last patch ends at the box boundary. Sorted by
/// `(z, y, x)`.
pub fn tile_origins(extents: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let mut axes: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > extents[a] {
            return Err(Error::shape(format!(
                "patch {patch:?} does not fit box {extents:?}"
            )));
        }
        if stride[a] == 0 {
            return Err(Error::invalid("tiling stride must be positive"));
        }
        let last = extents[a] - patch[a];
        let mut o = 0;
        while o < last {
            axes[a].push(o);
            o += stride[a];
        }
        axes[a].push(last);
    }
    let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// How overlapping patch predictions are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VoteMode {
    /// Per-voxel mean probability.
    Mean,
    /// Per-voxel fraction of covering patches at or above the threshold.
    Majority(f32),
}

/// Merges patch probabilities placed at their origins into one volume.
/// Patches are accumulated in `(z, y, x)` origin order (ties keep input
/// order) with `f64` sums, so the result does not depend on how the input
/// list was produced.
pub fn vote_merge(patches: &[([usize; 3], Volume<f32>)], extents: [usize; 3], mode: VoteMode) -> Result<Volume<f32>> {
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by_key(|&i| {
        let o = patches[i].0;
        (o[2], o[1], o[0])
    });
    let n: usize = extents.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut hits = vec![0u32; n];
    let out = Volume::filled(extents, 0.0f32);
    for i in order {
        let (o, p) = (&patches[i].0, &patches[i].1);
        let size = p.extents();
        if (0..3).any(|a| o[a] + size[a] > extents[a]) {
            return Err(Error::shape(format!(
                "patch at {o:?} of size {size:?} leaves box {extents:?}"
            )));
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = out.index(o[0], o[1] + y, o[2] + z);
                let src = p.index(0, y, z);
                for x in 0..size[0] {
                    let v = p.data()[src + x];
                    sum[dst + x] += match mode {
                        VoteMode::Mean => v as f64,
                        VoteMode::Majority(t) => f64::from(u8::from(v >= t)),
                    };
                    hits[dst + x] += 1;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        let [nx, ny, _] = extents;
        return Err(Error::invalid(format!(
            "voxel ({}, {}, {}) is not covered by any patch",
            i % nx,
            (i / nx) % ny,
            i / (nx * ny)
        )));
    }
    let data = sum.iter().zip(&hits).map(|(&s, &h)| (s / h as f64) as f32).collect();
    Volume::new(extents, data)
}

/// `1` where `p >= tau`.
pub fn binarize(prob: &Volume<f32>, tau: f32) -> Mask {
    prob.map(|p| u8::from(p >= tau))
}

/// Clears tumour voxels outside the liver.
pub fn mask_within(tumor: &Mask, liver: &Mask) -> Result<Mask> {
    if !tumor.same_extents(liver) {
        return Err(Error::shape("tumor and liver masks differ in extents"));
    }
    let data = tumor
        .data()
        .iter()
        .zip(liver.data())
        .map(|(&t, &l)| u8::from(t != 0 && l != 0))
        .collect();
    Ok(Volume::new(tumor.extents(), data)?.with_spacing(tumor.spacing()))
}
