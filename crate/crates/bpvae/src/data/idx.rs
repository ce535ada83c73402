//! Readers for the two on-disk image formats.
//!
//! IDX: big-endian magic 0x00000803 (unsigned byte payload, rank 3), then
//! count, rows, cols as u32, then count*rows*cols raw bytes.
//!
//! RAWRGB: one ASCII header line `RAWRGB <count> <height> <width>\n`
//! followed by count images, each stored planar (all R bytes, all G, all B).
//!
//! Either path ends in the common pipeline: scale to [0,1], grayscale where
//! needed, bilinear resize to 32×32.

use super::{resize_bilinear, to_grayscale, DataError, ImageDataset, Source, Split, IMAGE_HW};
use std::fs;
use std::path::Path;

const IDX_MAGIC: u32 = 0x0000_0803;
const IDX_HEADER_LEN: usize = 16;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn format_err(path: &Path, offset: usize, reason: String) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        reason,
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("caller checked bounds"))
}

/// Loads at most `limit` images from an IDX unsigned-byte rank-3 file.
pub fn load_idx(path: &Path, limit: usize, name: &str, split: Split) -> Result<ImageDataset, DataError> {
    let bytes = read_file(path)?;
    if bytes.len() < IDX_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len(),
            format!("header needs {IDX_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_MAGIC {
        // Point at the specific header byte that breaks the contract.
        let (offset, reason) = if bytes[0] != 0 || bytes[1] != 0 {
            (0, "first two magic bytes must be zero".to_string())
        } else if bytes[2] != 0x08 {
            (2, format!("type byte 0x{:02x}, only unsigned byte (0x08) is supported", bytes[2]))
        } else {
            (3, format!("rank {} but image stacks have rank 3", bytes[3]))
        };
        return Err(format_err(path, offset, reason));
    }
    let count = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(format_err(
            path,
            4,
            format!("dimensions {count}x{rows}x{cols} must all be positive"),
        ));
    }
    let expected = IDX_HEADER_LEN + count * rows * cols;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {expected} bytes total, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            expected,
            format!("{} trailing bytes after declared payload", bytes.len() - expected),
        ));
    }

    let take = count.min(limit.max(1));
    let mut images = Vec::with_capacity(take * IMAGE_HW * IMAGE_HW);
    for i in 0..take {
        let start = IDX_HEADER_LEN + i * rows * cols;
        let gray: Vec<f32> = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        push_resized(&mut images, &gray, rows, cols);
    }
    ImageDataset::new(name, split, Source::Idx, images)
}

/// Loads at most `limit` images from a RAWRGB planar color file.
pub fn load_rawrgb(path: &Path, limit: usize, name: &str, split: Split) -> Result<ImageDataset, DataError> {
    let bytes = read_file(path)?;
    let newline = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| format_err(path, 0, "missing header line".to_string()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| format_err(path, 0, "header is not ASCII".to_string()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "RAWRGB" {
        return Err(format_err(
            path,
            0,
            format!("header must be 'RAWRGB <count> <height> <width>', got '{header}'"),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<usize, DataError> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(path, 0, format!("{what} '{s}' must be a positive integer")))
    };
    let count = parse(fields[1], "count")?;
    let height = parse(fields[2], "height")?;
    let width = parse(fields[3], "width")?;

    let payload_start = newline + 1;
    let per_image = 3 * height * width;
    let expected = payload_start + count * per_image;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {expected} bytes total, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            expected,
            format!("{} trailing bytes after declared payload", bytes.len() - expected),
        ));
    }

    let take = count.min(limit.max(1));
    let plane = height * width;
    let mut images = Vec::with_capacity(take * IMAGE_HW * IMAGE_HW);
    let mut interleaved = vec![0.0f32; plane * 3];
    for i in 0..take {
        let base = payload_start + i * per_image;
        for p in 0..plane {
            interleaved[3 * p] = bytes[base + p] as f32 / 255.0;
            interleaved[3 * p + 1] = bytes[base + plane + p] as f32 / 255.0;
            interleaved[3 * p + 2] = bytes[base + 2 * plane + p] as f32 / 255.0;
        }
        let gray = to_grayscale(&interleaved, height, width).expect("built with 3 channels");
        push_resized(&mut images, &gray, height, width);
    }
    ImageDataset::new(name, split, Source::Idx, images)
}

fn push_resized(images: &mut Vec<f32>, gray: &[f32], h: usize, w: usize) {
    if h == IMAGE_HW && w == IMAGE_HW {
        images.extend_from_slice(gray);
    } else {
        images.extend(resize_bilinear(gray, h, w, IMAGE_HW, IMAGE_HW));
    }
}
