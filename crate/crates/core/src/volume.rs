//! Scalar 3D rasters and the RVOL file format.
//!
//! Voxels are stored x-fastest, z-slowest, so a volume maps directly onto a
//! `[1, 1, z, y, x]` tensor.
//!
//! RVOL layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 6     | magic `RVOL1\0` |
//! | 12    | `u32` extents x, y, z |
//! | 1     | dtype: 0 = `f32`, 1 = `u8` |
//! | 12    | `f32` spacing x, y, z in mm |
//! | ...   | raster |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const RVOL_MAGIC: &[u8; 6] = b"RVOL1\0";
pub const RVOL_HEADER_LEN: usize = 31;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<T>,
}

/// Binary mask or label raster.
pub type Mask = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn new(extents: [usize; 3], data: Vec<T>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::shape(format!("volume extents must be positive, got {extents:?}")));
        }
        let n = extents.iter().product::<usize>();
        if n != data.len() {
            return Err(Error::shape(format!(
                "volume {extents:?} needs {n} voxels, buffer holds {}",
                data.len()
            )));
        }
        Ok(Self {
            extents,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn filled(extents: [usize; 3], value: T) -> Self {
        assert!(!extents.contains(&0), "volume extents must be positive");
        Self {
            extents,
            spacing: [1.0; 3],
            data: vec![value; extents.iter().product()],
        }
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(!extents.contains(&0), "volume extents must be positive");
        let [nx, ny, nz] = extents;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self {
            extents,
            spacing: [1.0; 3],
            data,
        }
    }

    /// Voxel counts `[x, y, z]`.
    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Voxel size in mm along x, y, z.
    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) {
        self.spacing = spacing;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            extents: self.extents,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the block starting at `origin` with `size` voxels per axis.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.extents[a] {
                return Err(Error::shape(format!(
                    "crop {origin:?}+{size:?} outside volume {:?}",
                    self.extents
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let row = self.index(origin[0], y, z);
                data.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        Ok(Self {
            extents: size,
            spacing: self.spacing,
            data,
        })
    }

    /// Writes `block` into this volume at `origin`.
    pub fn paste(&mut self, origin: [usize; 3], block: &Self) -> Result<()> {
        let size = block.extents;
        for a in 0..3 {
            if origin[a] + size[a] > self.extents[a] {
                return Err(Error::shape(format!(
                    "paste {origin:?}+{size:?} outside volume {:?}",
                    self.extents
                )));
            }
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = self.index(origin[0], origin[1] + y, origin[2] + z);
                let src = block.index(0, y, z);
                self.data[dst..dst + size[0]].copy_from_slice(&block.data[src..src + size[0]]);
            }
        }
        Ok(())
    }

    /// Axial slice `z` as an x-fastest buffer of `nx * ny` values.
    pub fn slice_z(&self, z: usize) -> &[T] {
        let n = self.extents[0] * self.extents[1];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn same_extents<U>(&self, other: &Volume<U>) -> bool {
        self.extents == other.extents
    }
}

impl<T: Scalar> Volume<T> {
    /// `[1, 1, z, y, x]` tensor view of the raster.
    pub fn to_tensor(&self) -> Tensor<T> {
        let [nx, ny, nz] = self.extents;
        Tensor::from_vec(vec![1, 1, nz, ny, nx], self.data.clone()).expect("extents match buffer")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for a single-channel tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [1, 1, nz, ny, nx] => Self::new([*nx, *ny, *nz], t.data().to_vec()),
            s => Err(Error::shape(format!("expected a [1, 1, z, y, x] tensor, got {s:?}"))),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f32(&self) -> Volume<f32> {
        self.map(|v| if v != 0 { 1.0 } else { 0.0 })
    }
}

/// Element type of an RVOL raster.
pub trait RvolScalar: Copy {
    const DTYPE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl RvolScalar for f32 {
    const DTYPE: u8 = 0;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl RvolScalar for u8 {
    const DTYPE: u8 = 1;
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(b: &[u8]) -> Self {
        b[0]
    }
}

/// Parsed RVOL header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvolHeader {
    pub extents: [usize; 3],
    pub dtype: u8,
    pub spacing: [f32; 3],
}

impl RvolHeader {
    pub fn dtype_name(&self) -> &'static str {
        match self.dtype {
            0 => "f32",
            _ => "u8",
        }
    }
}

pub fn encode_rvol<T: RvolScalar>(v: &Volume<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(RVOL_HEADER_LEN + v.len() * T::SIZE);
    out.extend_from_slice(RVOL_MAGIC);
    for e in v.extents {
        let e = u32::try_from(e).map_err(|_| Error::format(format!("extent {e} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(T::DTYPE);
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &x in &v.data {
        x.put(&mut out);
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<RvolHeader> {
    if bytes.len() < RVOL_HEADER_LEN || &bytes[..6] != RVOL_MAGIC {
        return Err(Error::format("not an RVOL file (bad magic or short header)"));
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let f = |i: usize| f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let extents = [u(6), u(10), u(14)];
    let dtype = bytes[18];
    if dtype > 1 {
        return Err(Error::format(format!("unknown RVOL dtype {dtype}")));
    }
    if extents.contains(&0) {
        return Err(Error::format(format!("RVOL extents must be positive, got {extents:?}")));
    }
    Ok(RvolHeader {
        extents,
        dtype,
        spacing: [f(19), f(23), f(27)],
    })
}

pub fn decode_rvol<T: RvolScalar>(bytes: &[u8]) -> Result<Volume<T>> {
    let h = decode_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(Error::format(format!(
            "RVOL holds dtype {}, expected {}",
            h.dtype,
            T::DTYPE
        )));
    }
    let n: usize = h.extents.iter().product();
    let body = &bytes[RVOL_HEADER_LEN..];
    if body.len() != n * T::SIZE {
        return Err(Error::format(format!(
            "RVOL body has {} bytes, expected {}",
            body.len(),
            n * T::SIZE
        )));
    }
    let data = body.chunks_exact(T::SIZE).map(T::take).collect();
    Ok(Volume {
        extents: h.extents,
        spacing: h.spacing,
        data,
    })
}

pub fn write_rvol<T: RvolScalar>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_rvol(v)?)?;
    Ok(())
}

pub fn read_rvol<T: RvolScalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_rvol(&bytes)
}

/// Reads just the header of an RVOL file.
pub fn read_rvol_header(path: impl AsRef<Path>) -> Result<RvolHeader> {
    let mut bytes = [0u8; RVOL_HEADER_LEN];
    std::fs::File::open(path)?.read_exact(&mut bytes)?;
    decode_header(&bytes)
}
