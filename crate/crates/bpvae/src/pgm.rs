//! Binary PGM (P5) writing, for eyeballing images and reconstructions
//! without pulling in an image stack.

use std::io::Write;
use std::path::Path;

/// Writes one grayscale image. Values are clamped to [0, 1] and quantized
/// to 8 bits with round-to-nearest.
pub fn write_pgm(path: &Path, pixels: &[f32], h: usize, w: usize) -> std::io::Result<()> {
    assert_eq!(pixels.len(), h * w, "pixel count must match the extents");
    let mut out = Vec::with_capacity(32 + pixels.len());
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)
}

/// Stitches two equally tall images side by side with a one-pixel white
/// divider, the usual input-vs-reconstruction layout.
pub fn pair_image(a: &[f32], b: &[f32], h: usize, w: usize) -> Vec<f32> {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let out_w = 2 * w + 1;
    let mut out = vec![1.0f32; h * out_w];
    for r in 0..h {
        out[r * out_w..r * out_w + w].copy_from_slice(&a[r * w..(r + 1) * w]);
        out[r * out_w + w + 1..(r + 1) * out_w].copy_from_slice(&b[r * w..(r + 1) * w]);
    }
    out
}
