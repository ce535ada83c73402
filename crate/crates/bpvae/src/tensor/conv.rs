//! Convolution geometry and the im2col/col2im rearrangements that let both
//! convolution directions run as matrix multiplies.

use super::TensorError;

/// Spatial padding policy for the forward convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; requires kernel <= input extent.
    Valid,
    /// Output extent is ceil(input / stride); the implied total padding must
    /// split evenly across both sides.
    Same,
}

/// Geometry shared by conv2d and conv2d_transpose nodes. For the transposed
/// direction the fields still describe the *underlying* forward convolution:
/// (ch_out, out_h, out_w) is the smaller map and (ch_in, in_h, in_w) is not
/// used; see `conv_transpose_geometry`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub ch_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub ch_out: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.ch_in * self.kernel * self.kernel
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<(), TensorError> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(TensorError::Unsupported {
            op,
            reason: format!("stride {stride} not supported (only 1 and 2)"),
        })
    }
}

/// Geometry for a forward convolution of (ch_in, in_h, in_w) with a square
/// kernel. `Same` padding follows the ceil(input/stride) convention and
/// rejects configurations whose total padding is odd.
pub(crate) fn conv_geometry(
    ch_in: usize,
    in_h: usize,
    in_w: usize,
    ch_out: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom, TensorError> {
    check_stride("conv2d", stride)?;
    let axis = |extent: usize| -> Result<(usize, usize), TensorError> {
        match padding {
            Padding::Valid => {
                if kernel > extent {
                    return Err(TensorError::Unsupported {
                        op: "conv2d",
                        reason: format!("kernel {kernel} exceeds input extent {extent} without padding"),
                    });
                }
                Ok(((extent - kernel) / stride + 1, 0))
            }
            Padding::Same => {
                let out = extent.div_ceil(stride);
                let needed = ((out - 1) * stride + kernel).saturating_sub(extent);
                if !needed.is_multiple_of(2) {
                    return Err(TensorError::Unsupported {
                        op: "conv2d",
                        reason: format!(
                            "same padding for extent {extent}, kernel {kernel}, stride {stride} \
                             needs {needed} total pad cells, which cannot split symmetrically"
                        ),
                    });
                }
                Ok((out, needed / 2))
            }
        }
    };
    let (out_h, pad_h) = axis(in_h)?;
    let (out_w, pad_w) = axis(in_w)?;
    if pad_h != pad_w {
        return Err(TensorError::Unsupported {
            op: "conv2d",
            reason: format!("asymmetric padding {pad_h}x{pad_w} not supported"),
        });
    }
    Ok(ConvGeom {
        ch_in,
        in_h,
        in_w,
        ch_out,
        out_h,
        out_w,
        kernel,
        stride,
        pad: pad_h,
    })
}

/// Geometry for a transposed convolution producing
/// out = (in - 1) * stride - 2 * pad + kernel per axis. The returned struct
/// describes the adjoint forward convolution: its input is the transposed
/// convolution's *output* map and its output is the transposed convolution's
/// *input* map, which is exactly the orientation im2col/col2im need.
pub(crate) fn conv_transpose_geometry(
    ch_in: usize,
    in_h: usize,
    in_w: usize,
    ch_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    check_stride("conv2d_transpose", stride)?;
    let expand = |extent: usize| -> Result<usize, TensorError> {
        let grown = (extent - 1) * stride + kernel;
        if grown < 2 * pad + 1 {
            return Err(TensorError::Unsupported {
                op: "conv2d_transpose",
                reason: format!(
                    "padding {pad} swallows the whole output for extent {extent}, \
                     kernel {kernel}, stride {stride}"
                ),
            });
        }
        Ok(grown - 2 * pad)
    };
    let big_h = expand(in_h)?;
    let big_w = expand(in_w)?;
    Ok(ConvGeom {
        ch_in: ch_out,
        in_h: big_h,
        in_w: big_w,
        ch_out: ch_in,
        out_h: in_h,
        out_w: in_w,
        kernel,
        stride,
        pad,
    })
}

/// Unfolds one (ch_in, in_h, in_w) sample into a (ch_in*k*k, out_h*out_w)
/// row-major patch matrix. Out-of-bounds taps read as zero.
pub(crate) fn im2col(g: &ConvGeom, src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), g.ch_in * g.in_h * g.in_w);
    debug_assert_eq!(dst.len(), g.patch_len() * g.out_spatial());
    let os = g.out_spatial();
    for c in 0..g.ch_in {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let out_row = &mut dst[row * os..(row + 1) * os];
                for oi in 0..g.out_h {
                    let si = (oi * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut out_row[oi * g.out_w..(oi + 1) * g.out_w];
                    if si < 0 || si >= g.in_h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[si as usize * g.in_w..(si as usize + 1) * g.in_w];
                    for (oj, cell) in seg.iter_mut().enumerate() {
                        let sj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *cell = if sj >= 0 && sj < g.in_w as isize {
                            src_row[sj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the
/// (ch_in, in_h, in_w) plane. The destination is accumulated, not overwritten.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_spatial());
    debug_assert_eq!(dst.len(), g.ch_in * g.in_h * g.in_w);
    let os = g.out_spatial();
    for c in 0..g.ch_in {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let col_row = &cols[row * os..(row + 1) * os];
                for oi in 0..g.out_h {
                    let si = (oi * g.stride + ki) as isize - g.pad as isize;
                    if si < 0 || si >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[si as usize * g.in_w..(si as usize + 1) * g.in_w];
                    let seg = &col_row[oi * g.out_w..(oi + 1) * g.out_w];
                    for (oj, &v) in seg.iter().enumerate() {
                        let sj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if sj >= 0 && sj < g.in_w as isize {
                            dst_row[sj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
