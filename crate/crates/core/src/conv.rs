//! Convolution, two ways: a direct nested-loop cross-correlation and the
//! Toeplitz (im2col) arrangement that turns it into one matrix product.
//!
//! Both routes share the same patch flattening order, (c_in, d_H, d_W),
//! which is also the file-format contract for flattened filters.

use crate::error::{Error, Result};
use crate::lie::{ExpmConfig, LieParams};
use crate::matrix::{Matrix, Tensor4};
use crate::weight::{apply_weight, build_weight, FilterSpec};

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub stride: usize,
    pub pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    /// Validates and derives output dimensions. The stride must divide the
    /// padded extent exactly so the derived dimensions are integral.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        d_h: usize,
        d_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeometry> {
        if c_in < 1 || h < 1 || w < 1 || c_out < 1 || d_h < 1 || d_w < 1 || stride < 1 {
            return Err(Error::InvalidDimensions {
                what: "conv geometry",
                detail: "all dimensions and the stride must be >= 1".to_string(),
            });
        }
        let span_h = (h + 2 * pad).checked_sub(d_h);
        let span_w = (w + 2 * pad).checked_sub(d_w);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidDimensions {
                    what: "conv geometry",
                    detail: format!("kernel {d_h}x{d_w} larger than padded input {h}x{w} pad {pad}"),
                })
            }
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::InvalidDimensions {
                what: "conv geometry",
                detail: format!(
                    "stride {stride} does not divide spans ({span_h}, {span_w}) evenly"
                ),
            });
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            d_h,
            d_w,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    pub fn out_dims(&self) -> (usize, usize, usize) {
        (self.c_out, self.h_out, self.w_out)
    }

    pub fn h_out(&self) -> usize {
        self.h_out
    }

    pub fn w_out(&self) -> usize {
        self.w_out
    }

    /// Length of one flattened receptive-field patch.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.d_h * self.d_w
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn check_image(&self, image: &Tensor4) -> Result<()> {
        let (_, c, h, w) = image.dims();
        if c != self.c_in || h != self.h || w != self.w {
            return Err(Error::InvalidDimensions {
                what: "conv input",
                detail: format!(
                    "image ({c}, {h}, {w}) does not match geometry ({}, {}, {})",
                    self.c_in, self.h, self.w
                ),
            });
        }
        Ok(())
    }
}

/// Direct cross-correlation, exactly the nested-sum definition (no kernel
/// flip), summed over input channels. Slow and obvious; the Toeplitz path is
/// tested against it.
pub fn conv_direct(image: &Tensor4, filters: &Tensor4, g: &ConvGeometry) -> Result<Tensor4> {
    g.check_image(image)?;
    let (fo, fi, fh, fw) = filters.dims();
    if fo != g.c_out || fi != g.c_in || fh != g.d_h || fw != g.d_w {
        return Err(Error::InvalidDimensions {
            what: "conv filters",
            detail: format!(
                "filters ({fo}, {fi}, {fh}, {fw}) do not match geometry ({}, {}, {}, {})",
                g.c_out, g.c_in, g.d_h, g.d_w
            ),
        });
    }
    let n = image.dims().0;
    let mut out = Tensor4::zeros(n, g.c_out, g.h_out, g.w_out);
    for img in 0..n {
        for o in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.d_h {
                            for kx in 0..g.d_w {
                                let iy = oy * g.stride + ky;
                                let ix = ox * g.stride + kx;
                                // positions inside the zero padding contribute nothing
                                if iy < g.pad || ix < g.pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - g.pad, ix - g.pad);
                                if iy >= g.h || ix >= g.w {
                                    continue;
                                }
                                acc += image.get(img, ci, iy, ix) * filters.get(o, ci, ky, kx);
                            }
                        }
                    }
                    out.set(img, o, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// The input rearranged so convolution becomes a single matrix product:
/// one row per output position, one column per patch element.
#[derive(Debug, Clone)]
pub struct ToeplitzMatrix {
    pub mat: Matrix,
    pub geometry: ConvGeometry,
    /// Number of images stacked in the rows.
    pub batch: usize,
}

/// Unrolls every receptive-field patch of `image` into a row. Rows are
/// ordered image-major, then row-major over output positions; columns follow
/// the (c_in, d_H, d_W) flattening shared with the filter layout.
pub fn im2col(image: &Tensor4, g: &ConvGeometry) -> Result<ToeplitzMatrix> {
    g.check_image(image)?;
    let n = image.dims().0;
    let rows = n * g.positions();
    let cols = g.patch_len();
    let mut mat = Matrix::zeros(rows, cols);
    for img in 0..n {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = (img * g.h_out + oy) * g.w_out + ox;
                let mut col = 0;
                for ci in 0..g.c_in {
                    for ky in 0..g.d_h {
                        for kx in 0..g.d_w {
                            let iy = oy * g.stride + ky;
                            let ix = ox * g.stride + kx;
                            let v = if iy < g.pad || ix < g.pad {
                                0.0
                            } else {
                                let (iy, ix) = (iy - g.pad, ix - g.pad);
                                if iy >= g.h || ix >= g.w {
                                    0.0
                                } else {
                                    image.get(img, ci, iy, ix)
                                }
                            };
                            mat.set(row, col, v);
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(ToeplitzMatrix { mat, geometry: *g, batch: n })
}

/// Adjoint of [`im2col`]: scatters patch-row gradients back onto the image.
pub fn col2im(d_mat: &Matrix, g: &ConvGeometry, batch: usize) -> Result<Tensor4> {
    if d_mat.rows() != batch * g.positions() || d_mat.cols() != g.patch_len() {
        return Err(Error::InvalidDimensions {
            what: "col2im input",
            detail: format!(
                "{}x{} does not match {} rows x {} cols",
                d_mat.rows(),
                d_mat.cols(),
                batch * g.positions(),
                g.patch_len()
            ),
        });
    }
    let mut out = Tensor4::zeros(batch, g.c_in, g.h, g.w);
    for img in 0..batch {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = (img * g.h_out + oy) * g.w_out + ox;
                let mut col = 0;
                for ci in 0..g.c_in {
                    for ky in 0..g.d_h {
                        for kx in 0..g.d_w {
                            let iy = oy * g.stride + ky;
                            let ix = ox * g.stride + kx;
                            if iy >= g.pad && ix >= g.pad {
                                let (iy, ix) = (iy - g.pad, ix - g.pad);
                                if iy < g.h && ix < g.w {
                                    out.add_at(img, ci, iy, ix, d_mat.get(row, col));
                                }
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reassembles per-position output rows into the activation tensor.
pub fn rows_to_tensor(y: &Matrix, g: &ConvGeometry, batch: usize) -> Result<Tensor4> {
    if y.rows() != batch * g.positions() || y.cols() != g.c_out {
        return Err(Error::InvalidDimensions {
            what: "conv output rows",
            detail: format!("{}x{} does not match geometry", y.rows(), y.cols()),
        });
    }
    let mut out = Tensor4::zeros(batch, g.c_out, g.h_out, g.w_out);
    for img in 0..batch {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = (img * g.h_out + oy) * g.w_out + ox;
                for o in 0..g.c_out {
                    out.set(img, o, oy, ox, y.get(row, o));
                }
            }
        }
    }
    Ok(out)
}

/// Unitary convolution: im2col, multiply by the rectangular unitary weight
/// (with row normalization in the Project case), reshape back.
pub fn unitary_conv_forward(
    image: &Tensor4,
    lp: &LieParams,
    spec: &FilterSpec,
    g: &ConvGeometry,
    cfg: &ExpmConfig,
) -> Result<Tensor4> {
    let (m, k) = spec.weight_shape();
    if m != g.patch_len() || k != g.c_out {
        return Err(Error::InvalidDimensions {
            what: "filter spec for convolution",
            detail: format!(
                "weight {m}x{k} does not match patch length {} and {} output channels",
                g.patch_len(),
                g.c_out
            ),
        });
    }
    let toeplitz = im2col(image, g)?;
    let weight = build_weight(lp, spec, cfg)?;
    let y = apply_weight(&weight, &toeplitz.mat)?;
    rows_to_tensor(&y, g, toeplitz.batch)
}
