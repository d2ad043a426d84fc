//! Overlap and surface-distance segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub seg: u64,
    pub gt: u64,
    pub intersection: u64,
    pub total: u64,
}

impl Counts {
    pub fn of(seg: &Mask, gt: &Mask) -> Result<Self> {
        if !seg.same_extents(gt) {
            return Err(Error::shape(format!(
                "segmentation {:?} and ground truth {:?} differ",
                seg.extents(),
                gt.extents()
            )));
        }
        let mut c = Counts {
            total: seg.len() as u64,
            ..Default::default()
        };
        for (&s, &g) in seg.data().iter().zip(gt.data()) {
            let (s, g) = (s != 0, g != 0);
            c.seg += u64::from(s);
            c.gt += u64::from(g);
            c.intersection += u64::from(s && g);
        }
        Ok(c)
    }

    fn add(self, o: Self) -> Self {
        Self {
            seg: self.seg + o.seg,
            gt: self.gt + o.gt,
            intersection: self.intersection + o.intersection,
            total: self.total + o.total,
        }
    }

    pub fn overlap(&self) -> Overlap {
        let (s, g, i, n) = (
            self.seg as f64,
            self.gt as f64,
            self.intersection as f64,
            self.total as f64,
        );
        let union = s + g - i;
        let dc = if s + g == 0.0 { 1.0 } else { 2.0 * i / (s + g) };
        let jaccard = if union == 0.0 { 1.0 } else { i / union };
        let nan_if_zero = |den: f64, num: f64| if den == 0.0 { f64::NAN } else { num / den };
        Overlap {
            dc,
            jaccard,
            voe: 1.0 - jaccard,
            rvd: nan_if_zero(g, s - g),
            sensitivity: nan_if_zero(g, i),
            specificity: nan_if_zero(n - g, n - union),
        }
    }
}

/// Overlap scores. Undefined ratios (empty ground truth for RVD and
/// sensitivity, full ground truth for specificity) are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dc: f64,
    pub jaccard: f64,
    pub voe: f64,
    /// `(|S| - |G|) / |G|`.
    pub rvd: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn overlap_metrics(seg: &Mask, gt: &Mask) -> Result<Overlap> {
    Ok(Counts::of(seg, gt)?.overlap())
}

/// Dice over the voxel counts pooled across all cases.
pub fn dice_global(cases: &[(&Mask, &Mask)]) -> Result<f64> {
    let mut total = Counts::default();
    for (s, g) in cases {
        total = total.add(Counts::of(s, g)?);
    }
    Ok(total.overlap().dc)
}

/// Foreground voxels with at least one background 6-neighbour; voxels on
/// the volume faces count as surface.
pub fn surface(mask: &Mask) -> Mask {
    let [nx, ny, nz] = mask.extents();
    Volume::from_fn(mask.extents(), |x, y, z| {
        if mask.get(x, y, z) == 0 {
            return 0;
        }
        let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        let bg = edge
            || mask.get(x - 1, y, z) == 0
            || mask.get(x + 1, y, z) == 0
            || mask.get(x, y - 1, z) == 0
            || mask.get(x, y + 1, z) == 0
            || mask.get(x, y, z - 1) == 0
            || mask.get(x, y, z + 1) == 0;
        u8::from(bg)
    })
    .with_spacing(mask.spacing())
}

/// Squared Euclidean distance (in mm², using the spacing) from every voxel
/// to the nearest nonzero voxel of `features`; infinite when there is none.
/// Exact, computed separably with lower envelopes of parabolas.
pub fn squared_distance_transform(features: &Mask, spacing: [f64; 3]) -> Volume<f64> {
    let ext = features.extents();
    let mut d: Vec<f64> = features
        .data()
        .iter()
        .map(|&f| if f != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let n_max = *ext.iter().max().expect("three axes");
    let mut f = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    for axis in 0..3 {
        let n = ext[axis];
        let stride: usize = ext[..axis].iter().product();
        let outer: usize = ext[axis + 1..].iter().product();
        let w = spacing[axis];
        for o in 0..outer {
            for k in 0..stride {
                let base = o * n * stride + k;
                for i in 0..n {
                    f[i] = d[base + i * stride];
                }
                envelope_1d(&f[..n], w, &mut out[..n], &mut v, &mut z);
                for i in 0..n {
                    d[base + i * stride] = out[i];
                }
            }
        }
    }
    Volume::new(ext, d).expect("extents unchanged")
}

/// One-dimensional squared distance transform of sampled function `f` at
/// positions `i * w`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * w;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let dx = pos(q) - pos(p);
        *o = dx * dx + f[p];
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub msd: f64,
    pub hd95: f64,
}

/// Percentile by linear interpolation between closest ranks: rank
/// `q * (n - 1)` over the sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// Distances from each surface voxel of one mask to the nearest surface
/// voxel of the other, in both directions.
pub fn directed_surface_distances(seg: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !seg.same_extents(gt) {
        return Err(Error::shape("segmentation and ground truth differ in extents"));
    }
    if seg.count() == 0 {
        return Err(Error::EmptyMask("segmentation mask is empty".into()));
    }
    if gt.count() == 0 {
        return Err(Error::EmptyMask("ground-truth mask is empty".into()));
    }
    let (ss, gs) = (surface(seg), surface(gt));
    let to_gt = squared_distance_transform(&gs, spacing);
    let to_seg = squared_distance_transform(&ss, spacing);
    let pick = |s: &Mask, d: &Volume<f64>| -> Vec<f64> {
        s.data()
            .iter()
            .zip(d.data())
            .filter(|(&m, _)| m != 0)
            .map(|(_, &d2)| d2.sqrt())
            .collect()
    };
    Ok((pick(&ss, &to_gt), pick(&gs, &to_seg)))
}

pub fn surface_metrics(seg: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<SurfaceDistances> {
    let (a, b) = directed_surface_distances(seg, gt, spacing)?;
    let mut all: Vec<f64> = a.into_iter().chain(b).collect();
    all.sort_by(f64::total_cmp);
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    Ok(SurfaceDistances {
        assd,
        msd: *all.last().expect("surfaces are nonempty"),
        hd95: percentile(&all, 0.95),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub case: String,
    pub overlap: Overlap,
    /// `None` when either mask is empty.
    pub surface: Option<SurfaceDistances>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CaseRow>,
    counts: Counts,
}

impl EvalReport {
    pub fn new() -> Self {
        Self {
            rows: Vec::new(),
            counts: Counts::default(),
        }
    }

    /// Scores one case; surface distances use the ground truth's spacing.
    pub fn add_case(&mut self, case: &str, seg: &Mask, gt: &Mask) -> Result<&CaseRow> {
        let counts = Counts::of(seg, gt)?;
        let spacing = gt.spacing().map(f64::from);
        let surface = if counts.seg > 0 && counts.gt > 0 {
            Some(surface_metrics(seg, gt, spacing)?)
        } else {
            None
        };
        self.counts = self.counts.add(counts);
        self.rows.push(CaseRow {
            case: case.to_string(),
            overlap: counts.overlap(),
            surface,
        });
        self.rows.sort_by(|a, b| a.case.cmp(&b.case));
        Ok(self.rows.iter().find(|r| r.case == case).expect("just inserted"))
    }

    /// Mean per-case Dice.
    pub fn dice_per_case(&self) -> f64 {
        self.rows.iter().map(|r| r.overlap.dc).sum::<f64>() / self.rows.len() as f64
    }

    /// Dice over pooled voxel counts.
    pub fn dice_global(&self) -> f64 {
        self.counts.overlap().dc
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,DC,Jaccard,VOE,RVD,ASSD,MSD,HD95,sensitivity,specificity\n");
        let cells = |r: &CaseRow| -> [f64; 9] {
            let o = r.overlap;
            let (a, m, h) = r.surface.map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.assd, s.msd, s.hd95));
            [o.dc, o.jaccard, o.voe, o.rvd, a, m, h, o.sensitivity, o.specificity]
        };
        let mut sums = [0.0; 9];
        let mut counts = [0usize; 9];
        for r in &self.rows {
            let c = cells(r);
            row(&mut s, &r.case, &c);
            for i in 0..9 {
                if c[i].is_finite() {
                    sums[i] += c[i];
                    counts[i] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..9)
            .map(|i| if counts[i] > 0 { sums[i] / counts[i] as f64 } else { f64::NAN })
            .collect();
        row(&mut s, "MEAN", &mean);
        let g = self.counts.overlap();
        let nan = f64::NAN;
        row(
            &mut s,
            "GLOBAL",
            &[g.dc, g.jaccard, g.voe, g.rvd, nan, nan, nan, g.sensitivity, g.specificity],
        );
        s
    }
}

impl Default for EvalReport {
    fn default() -> Self {
        Self::new()
    }
}

fn row(s: &mut String, name: &str, cells: &[f64]) {
    s.push_str(name);
    for c in cells {
        if c.is_finite() {
            let _ = write!(s, ",{c:.9}");
        } else {
            s.push_str(",NaN");
        }
    }
    s.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(bits: &[u8]) -> Mask {
        Volume::new([bits.len(), 1, 1], bits.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = line(&[0, 1, 1, 0]);
        let o = overlap_metrics(&m, &m).unwrap();
        assert_eq!((o.dc, o.voe, o.rvd), (1.0, 0.0, 0.0));
        let s = surface_metrics(&m, &m, [1.0; 3]).unwrap();
        assert_eq!((s.assd, s.msd), (0.0, 0.0));
    }

    #[test]
    fn set_count_example() {
        let o = overlap_metrics(&line(&[1, 1, 0]), &line(&[0, 1, 1])).unwrap();
        assert_eq!(o.dc, 0.5);
        assert!((o.jaccard - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_ground_truth() {
        let empty = line(&[0, 0]);
        let o = overlap_metrics(&empty, &empty).unwrap();
        assert_eq!(o.dc, 1.0);
        assert!(o.rvd.is_nan());
        let o = overlap_metrics(&line(&[1, 0]), &empty).unwrap();
        assert_eq!(o.dc, 0.0);
        assert!(matches!(
            surface_metrics(&line(&[1, 0]), &empty, [1.0; 3]),
            Err(Error::EmptyMask(msg)) if msg.contains("ground-truth")
        ));
    }

    #[test]
    fn offset_cubes() {
        let a = Volume::from_fn([10, 3, 3], |x, y, z| u8::from(x == 1 && y == 1 && z == 1));
        let b = Volume::from_fn([10, 3, 3], |x, y, z| u8::from(x == 4 && y == 1 && z == 1));
        let s = surface_metrics(&a, &b, [1.0; 3]).unwrap();
        assert_eq!(s.msd, 3.0);
        assert_eq!(s.assd, 3.0);
        let s2 = surface_metrics(&a, &b, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(s2.msd, 1.5);
    }

    #[test]
    fn distance_transform_one_line() {
        let f = line(&[0, 0, 1, 0, 0, 0]);
        let d = squared_distance_transform(&f, [1.0; 3]);
        assert_eq!(d.data(), &[4.0, 1.0, 0.0, 1.0, 4.0, 9.0]);
        let none = squared_distance_transform(&line(&[0, 0]), [1.0; 3]);
        assert!(none.data().iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert!((percentile(&v, 0.95) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn global_dice_pools_counts() {
        let a = line(&[1, 1, 0, 0]);
        let z = line(&[0, 0, 1, 1]);
        // One perfect case and one disjoint case of equal sizes.
        assert_eq!(dice_global(&[(&a, &a), (&a, &z)]).unwrap(), 0.5);
        assert_eq!(dice_global(&[(&a, &z), (&a, &a)]).unwrap(), 0.5);
    }

    #[test]
    fn report_csv_layout() {
        let mut r = EvalReport::new();
        let m = Volume::from_fn([4, 4, 4], |x, y, z| u8::from(x > 0 && x < 3 && y > 0 && y < 3 && z > 0 && z < 3));
        r.add_case("b", &m, &m).unwrap();
        r.add_case("a", &m, &m).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case,DC,Jaccard,VOE,RVD,ASSD,MSD,HD95,sensitivity,specificity");
        assert!(lines[1].starts_with("a,1.000000000,"));
        assert!(lines[3].starts_with("MEAN,"));
        assert!(lines[4].starts_with("GLOBAL,1.000000000"));
    }
}
