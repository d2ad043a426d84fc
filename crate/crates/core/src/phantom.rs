//! Synthetic CT-like volumes with analytic liver and tumour masks.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Voxels along x, y, z.
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// Liver ellipsoid centre and semi-axes, in voxel coordinates.
    pub liver_center: [f64; 3],
    pub liver_axes: [f64; 3],
    pub tumors: Vec<Sphere>,
    /// Rows `[start, end)` along y filled with bone.
    pub bone_rows: (usize, usize),
    pub hu_air: f32,
    pub hu_bone: f32,
    pub hu_liver: f32,
    pub hu_tumor: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// A 64 x 64 x 32 case with one tumour and a bone slab below the liver.
    fn default() -> Self {
        Self {
            extents: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            liver_center: [30.0, 30.0, 15.5],
            liver_axes: [20.0, 15.0, 11.0],
            tumors: vec![Sphere {
                center: [34.0, 28.0, 16.0],
                radius: 5.0,
            }],
            bone_rows: (54, 58),
            hu_air: -1000.0,
            hu_bone: 400.0,
            hu_liver: 45.0,
            hu_tumor: 0.0,
            noise_sigma: 5.0,
            seed: 0,
        }
    }
}

/// Generated case: intensities plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub hu: Volume<f32>,
    /// Liver including tumours.
    pub liver: Mask,
    pub tumor: Mask,
}

impl PhantomSpec {
    pub fn in_liver(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| {
                let d = (p[a] - self.liver_center[a]) / self.liver_axes[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    pub fn in_tumor(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        self.tumors.iter().any(|s| {
            (0..3).map(|a| (p[a] - s.center[a]).powi(2)).sum::<f64>() <= s.radius * s.radius
        })
    }

    fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::invalid("phantom extents must be positive"));
        }
        if self.liver_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("liver semi-axes must be positive"));
        }
        if self.tumors.iter().any(|s| !(s.radius > 0.0)) {
            return Err(Error::invalid("tumor radii must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Phantom> {
        self.validate()?;
        let [nx, ny, nz] = self.extents;
        let mut liver = Volume::filled(self.extents, 0u8);
        let mut tumor = Volume::filled(self.extents, 0u8);
        let mut hu = Volume::filled(self.extents, self.hu_air);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let l = self.in_liver(x, y, z);
                    let t = self.in_tumor(x, y, z);
                    if t && !l {
                        return Err(Error::invalid(format!(
                            "tumor voxel ({x}, {y}, {z}) lies outside the liver"
                        )));
                    }
                    let bone = (self.bone_rows.0..self.bone_rows.1).contains(&y);
                    if bone && l {
                        return Err(Error::invalid(format!("bone slab overlaps the liver at ({x}, {y}, {z})")));
                    }
                    let v = if t {
                        self.hu_tumor
                    } else if l {
                        self.hu_liver
                    } else if bone {
                        self.hu_bone
                    } else {
                        self.hu_air
                    };
                    hu.set(x, y, z, v);
                    liver.set(x, y, z, u8::from(l));
                    tumor.set(x, y, z, u8::from(t));
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0f32, self.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for v in hu.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let s = self.spacing;
        Ok(Phantom {
            hu: hu.with_spacing(s),
            liver: liver.with_spacing(s),
            tumor: tumor.with_spacing(s),
        })
    }

    /// `key = value` description for reproducing the case.
    pub fn sidecar(&self) -> String {
        let mut s = String::from("# synthetic phantom\n");
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let e = self.extents;
        let _ = writeln!(s, "extents = {},{},{}", e[0], e[1], e[2]);
        let sp = self.spacing;
        let _ = writeln!(s, "spacing = {},{},{}", sp[0], sp[1], sp[2]);
        let _ = writeln!(s, "liver_center = {}", list(&self.liver_center));
        let _ = writeln!(s, "liver_axes = {}", list(&self.liver_axes));
        for (i, t) in self.tumors.iter().enumerate() {
            let _ = writeln!(s, "tumor{i}_center = {}", list(&t.center));
            let _ = writeln!(s, "tumor{i}_radius = {}", t.radius);
        }
        let _ = writeln!(s, "bone_rows = {},{}", self.bone_rows.0, self.bone_rows.1);
        let _ = writeln!(s, "hu_air = {}", self.hu_air);
        let _ = writeln!(s, "hu_bone = {}", self.hu_bone);
        let _ = writeln!(s, "hu_liver = {}", self.hu_liver);
        let _ = writeln!(s, "hu_tumor = {}", self.hu_tumor);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}
