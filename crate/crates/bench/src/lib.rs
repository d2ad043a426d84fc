//! Deterministic inputs for the kernel benchmarks.

use raunet::{Mask, Tensor};

/// Smooth pseudo-random values in [-1, 1].
pub fn wavy_tensor(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.618_034).sin()).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

/// Blobby mask with many components: a voxel is set when a product of
/// sines is positive.
pub fn blob_mask(extents: [usize; 3]) -> Mask {
    Mask::from_fn(extents, |x, y, z| {
        let v = (x as f32 * 0.7).sin() * (y as f32 * 0.5).sin() * (z as f32 * 0.9).sin();
        u8::from(v > 0.1)
    })
}
