//! Inner numeric loops behind the tape ops.
//!
//! These are plain functions over raw slices so the hot paths stay readable
//! and the compiler can vectorize the innermost loops (which all walk
//! contiguous memory in the width dimension). Shape checking happens in the
//! tape layer; these kernels trust their geometry arguments.

use crate::error::{Error, Result};
use crate::nd::scalar::Scalar;

/// Zero-padding mode for [`conv2d`](crate::nd::Tape::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero-pad so the output extent is `ceil(in/stride)` per axis.
    Same,
    /// No padding; output extent is `floor((in - k)/stride) + 1`.
    Valid,
}

/// Resolved convolution geometry shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub ih: usize,
    pub iw: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    /// Leading (top/left) zero padding; trailing padding is implicit.
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

fn same_axis(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

/// Validate shapes and compute output extents and padding.
pub fn conv_geometry(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: (usize, usize),
    pad: PadMode,
) -> Result<ConvGeom> {
    if x_shape.len() != 4 || k_shape.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects rank-4 input and kernel, got {x_shape:?} and {k_shape:?}"
        )));
    }
    let (batch, cin, ih, iw) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kcin, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 {
        return Err(Error::dim("conv2d stride must be positive".to_string()));
    }
    let (oh, ow, ph, pw) = match pad {
        PadMode::Same => {
            let (oh, ph) = same_axis(ih, kh, sh);
            let (ow, pw) = same_axis(iw, kw, sw);
            (oh, ow, ph, pw)
        }
        PadMode::Valid => {
            if kh > ih || kw > iw {
                return Err(Error::dim(format!(
                    "conv2d valid: kernel ({kh},{kw}) exceeds input ({ih},{iw})"
                )));
            }
            ((ih - kh) / sh + 1, (iw - kw) / sw + 1, 0, 0)
        }
    };
    Ok(ConvGeom {
        batch,
        cin,
        ih,
        iw,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        oh,
        ow,
    })
}

/// Range of output columns `ow` for which the input column
/// `ow*sw + kw_off - pw` lands inside `[0, iw)`.
fn ow_bounds(g: &ConvGeom, kw_off: usize) -> (usize, usize) {
    // ow*sw + kw_off - pw >= 0  =>  ow >= (pw - kw_off)/sw  (ceil)
    let lo = if kw_off >= g.pw {
        0
    } else {
        (g.pw - kw_off).div_ceil(g.sw)
    };
    // ow*sw + kw_off - pw <= iw-1  =>  ow <= (iw-1 + pw - kw_off)/sw  (floor)
    let hi_inc = (g.iw - 1 + g.pw).saturating_sub(kw_off) / g.sw;
    (lo.min(g.ow), (hi_inc + 1).min(g.ow))
}

/// out[b,co,oh,ow] = sum over ci,kh,kw of x[b,ci,oh*sh+kh-ph, ow*sw+kw-pw] * k[co,ci,kh,kw].
/// `out` must be zeroed by the caller.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], out: &mut [T]) {
    let x_plane = g.ih * g.iw;
    let o_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let out_base = (b * g.cout + co) * o_plane;
            for ci in 0..g.cin {
                let x_base = (b * g.cin + ci) * x_plane;
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for kh_off in 0..g.kh {
                    for kw_off in 0..g.kw {
                        let kv = k[k_base + kh_off * g.kw + kw_off];
                        let (w_lo, w_hi) = ow_bounds(g, kw_off);
                        for oh_i in 0..g.oh {
                            let ih_i = (oh_i * g.sh + kh_off) as isize - g.ph as isize;
                            if ih_i < 0 || ih_i >= g.ih as isize {
                                continue;
                            }
                            let x_row_base = x_base + ih_i as usize * g.iw;
                            let out_row = out_base + oh_i * g.ow;
                            for ow_i in w_lo..w_hi {
                                let iw_i = (ow_i * g.sw + kw_off) as isize - g.pw as isize;
                                out[out_row + ow_i] += kv * x[x_row_base + iw_i as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gx[b,ci,ih,iw] += sum over co,kh,kw of k[co,ci,kh,kw] * gout[b,co,oh,ow].
pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, k: &[T], gout: &[T], gx: &mut [T]) {
    let x_plane = g.ih * g.iw;
    let o_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gout_base = (b * g.cout + co) * o_plane;
            for ci in 0..g.cin {
                let gx_base = (b * g.cin + ci) * x_plane;
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for kh_off in 0..g.kh {
                    for kw_off in 0..g.kw {
                        let kv = k[k_base + kh_off * g.kw + kw_off];
                        let (w_lo, w_hi) = ow_bounds(g, kw_off);
                        for oh_i in 0..g.oh {
                            let ih_i = (oh_i * g.sh + kh_off) as isize - g.ph as isize;
                            if ih_i < 0 || ih_i >= g.ih as isize {
                                continue;
                            }
                            let gx_row_base = gx_base + ih_i as usize * g.iw;
                            let gout_row = gout_base + oh_i * g.ow;
                            for ow_i in w_lo..w_hi {
                                let iw_i = (ow_i * g.sw + kw_off) as isize - g.pw as isize;
                                gx[gx_row_base + iw_i as usize] += kv * gout[gout_row + ow_i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gk[co,ci,kh,kw] += sum over b,oh,ow of x[b,ci,...] * gout[b,co,oh,ow].
pub fn conv2d_backward_kernel<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T], gk: &mut [T]) {
    let x_plane = g.ih * g.iw;
    let o_plane = g.oh * g.ow;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gout_base = (b * g.cout + co) * o_plane;
            for ci in 0..g.cin {
                let x_base = (b * g.cin + ci) * x_plane;
                let k_base = (co * g.cin + ci) * g.kh * g.kw;
                for kh_off in 0..g.kh {
                    for kw_off in 0..g.kw {
                        let (w_lo, w_hi) = ow_bounds(g, kw_off);
                        let mut acc = T::ZERO;
                        for oh_i in 0..g.oh {
                            let ih_i = (oh_i * g.sh + kh_off) as isize - g.ph as isize;
                            if ih_i < 0 || ih_i >= g.ih as isize {
                                continue;
                            }
                            let x_row_base = x_base + ih_i as usize * g.iw;
                            let gout_row = gout_base + oh_i * g.ow;
                            for ow_i in w_lo..w_hi {
                                let iw_i = (ow_i * g.sw + kw_off) as isize - g.pw as isize;
                                acc += x[x_row_base + iw_i as usize] * gout[gout_row + ow_i];
                            }
                        }
                        gk[k_base + kh_off * g.kw + kw_off] += acc;
                    }
                }
            }
        }
    }
}

/// c[i,j] += sum over k of a[i,k] * b[k,j]; `c` pre-zeroed by the caller.
pub fn mm_forward<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, kk: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * kk..(i + 1) * kk];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (k, &av) in a_row.iter().enumerate() {
            let b_row = &b[k * n..(k + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// ga[i,k] += sum over j of gc[i,j] * b[k,j].
pub fn mm_grad_a<T: Scalar>(ga: &mut [T], gc: &[T], b: &[T], m: usize, kk: usize, n: usize) {
    for i in 0..m {
        let gc_row = &gc[i * n..(i + 1) * n];
        let ga_row = &mut ga[i * kk..(i + 1) * kk];
        for k in 0..kk {
            let b_row = &b[k * n..(k + 1) * n];
            let mut acc = T::ZERO;
            for j in 0..n {
                acc += gc_row[j] * b_row[j];
            }
            ga_row[k] += acc;
        }
    }
}

/// gb[k,j] += sum over i of a[i,k] * gc[i,j].
pub fn mm_grad_b<T: Scalar>(gb: &mut [T], gc: &[T], a: &[T], m: usize, kk: usize, n: usize) {
    for i in 0..m {
        let gc_row = &gc[i * n..(i + 1) * n];
        let a_row = &a[i * kk..(i + 1) * kk];
        for (k, &av) in a_row.iter().enumerate() {
            let gb_row = &mut gb[k * n..(k + 1) * n];
            for j in 0..n {
                gb_row[j] += av * gc_row[j];
            }
        }
    }
}

/// One axis of a bilinear resize: output index i draws from input indices
/// `(i0, i1)` with weights `(1-w, w)`.
#[derive(Debug, Clone, Copy)]
pub struct LinSample {
    pub i0: usize,
    pub i1: usize,
    pub w: f64,
}

/// Half-pixel-centers sampling table (the `align_corners=false` convention):
/// src = (dst + 0.5) * in/out - 0.5, clamped to the valid range. An identity
/// resize (n_in == n_out) yields exact unit weights.
pub fn linear_table(n_in: usize, n_out: usize) -> Vec<LinSample> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            LinSample {
                i0,
                i1,
                w: src - i0 as f64,
            }
        })
        .collect()
}
