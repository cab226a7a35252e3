//! Direct convolution kernels over three spatial axes.
//!
//! Layouts are `[N, C, D, H, W]` for activations and `[O, C, KD, KH, KW]` for
//! weights. Two-dimensional convolution runs through the same kernels with a
//! unit depth axis.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Range of output positions `o` for which `o * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Visits every (output row, input row) pairing for one kernel tap.
///
/// `f(out_row_offset, in_row_offset, ow_lo, ow_hi, iw_start)` is called once per
/// valid `(od, oh)` with the flat offsets of the output and input rows inside a
/// single channel plane.
#[inline]
fn for_each_row(g: &ConvGeom, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [id_, ih_, iw_] = g.input;
    let [od_, oh_, ow_] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let (d_lo, d_hi) = valid_range(od_, id_, kd, sd, pd);
    let (h_lo, h_hi) = valid_range(oh_, ih_, kh, sh, ph);
    let (w_lo, w_hi) = valid_range(ow_, iw_, kw, sw, pw);
    if w_lo >= w_hi {
        return;
    }
    let iw_start = w_lo * sw + kw - pw;
    for od in d_lo..d_hi {
        let id = od * sd + kd - pd;
        for oh in h_lo..h_hi {
            let ih = oh * sh + kh - ph;
            f((od * oh_ + oh) * ow_, (id * ih_ + ih) * iw_, w_lo, w_hi, iw_start);
        }
    }
}

/// Unfold `input` into a `[C * kvol, N * out_spatial]` patch matrix; taps that
/// fall into padding stay zero.
fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let cols_per_row = g.batch * out_sp;
    let sw = g.stride[2];
    let mut cols = vec![0.0; g.in_ch * g.kernel_volume() * cols_per_row];
    let mut k = 0;
    for c in 0..g.in_ch {
        for kd in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = &mut cols[k * cols_per_row..(k + 1) * cols_per_row];
                    for n in 0..g.batch {
                        let in_plane = &input[(n * g.in_ch + c) * in_sp..][..in_sp];
                        let dst_plane = &mut row[n * out_sp..(n + 1) * out_sp];
                        for_each_row(g, kd, kh, kw, |orow, irow, lo, hi, iw0| {
                            let dst = &mut dst_plane[orow + lo..orow + hi];
                            if sw == 1 {
                                dst.copy_from_slice(&in_plane[irow + iw0..irow + iw0 + (hi - lo)]);
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d = in_plane[irow + iw0 + j * sw];
                                }
                            }
                        });
                    }
                    k += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let in_sp = g.in_spatial();
    let out_sp = g.out_spatial();
    let cols_per_row = g.batch * out_sp;
    let sw = g.stride[2];
    let mut gin = vec![0.0; g.batch * g.in_ch * in_sp];
    let mut k = 0;
    for c in 0..g.in_ch {
        for kd in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let row = &cols[k * cols_per_row..(k + 1) * cols_per_row];
                    for n in 0..g.batch {
                        let gin_plane = &mut gin[(n * g.in_ch + c) * in_sp..][..in_sp];
                        let src_plane = &row[n * out_sp..(n + 1) * out_sp];
                        for_each_row(g, kd, kh, kw, |orow, irow, lo, hi, iw0| {
                            let src = &src_plane[orow + lo..orow + hi];
                            if sw == 1 {
                                let dst = &mut gin_plane[irow + iw0..irow + iw0 + (hi - lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            } else {
                                for (j, s) in src.iter().enumerate() {
                                    gin_plane[irow + iw0 + j * sw] += s;
                                }
                            }
                        });
                    }
                    k += 1;
                }
            }
        }
    }
    gin
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    // four independent accumulators let the loop vectorize
    let mut acc = [0.0; 4];
    let chunks = x.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += x[4 * i + l] * y[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..x.len() {
        tail += x[i] * y[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    const TILE: usize = 128;
    let out_sp = g.out_spatial();
    let np = g.batch * out_sp;
    let kdim = g.in_ch * g.kernel_volume();
    let cols = im2col(g, input);
    // [O, N * out_spatial], filled one column tile at a time so the
    // accumulators and the patch tile stay cache resident
    let mut flat = vec![0.0; g.out_ch * np];
    for j0 in (0..np).step_by(TILE) {
        let j1 = (j0 + TILE).min(np);
        for o in 0..g.out_ch {
            let acc = &mut flat[o * np + j0..o * np + j1];
            acc.iter_mut().for_each(|v| *v = bias[o]);
            for (k, &w) in weight[o * kdim..(o + 1) * kdim].iter().enumerate() {
                if w != 0.0 {
                    axpy(w, &cols[k * np + j0..k * np + j1], acc);
                }
            }
        }
    }
    let mut out = vec![0.0; g.batch * g.out_ch * out_sp];
    for o in 0..g.out_ch {
        for n in 0..g.batch {
            out[(n * g.out_ch + o) * out_sp..][..out_sp].copy_from_slice(&flat[o * np + n * out_sp..][..out_sp]);
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_sp = g.out_spatial();
    let np = g.batch * out_sp;
    let kdim = g.in_ch * g.kernel_volume();
    let cols = im2col(g, input);
    // grad_out regrouped as [O, N * out_spatial]
    let mut go = vec![0.0; g.out_ch * np];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            go[o * np + n * out_sp..][..out_sp].copy_from_slice(&grad_out[(n * g.out_ch + o) * out_sp..][..out_sp]);
        }
    }
    let gb: Vec<f64> = go.chunks(np).map(|r| r.iter().sum()).collect();
    let mut gw = vec![0.0; weight.len()];
    for o in 0..g.out_ch {
        let gro = &go[o * np..(o + 1) * np];
        for k in 0..kdim {
            gw[o * kdim + k] = dot(gro, &cols[k * np..(k + 1) * np]);
        }
    }
    let mut gcols = cols;
    for k in 0..kdim {
        let row = &mut gcols[k * np..(k + 1) * np];
        row.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.out_ch {
            let w = weight[o * kdim + k];
            if w != 0.0 {
                axpy(w, &go[o * np..(o + 1) * np], row);
            }
        }
    }
    (col2im(g, &gcols), gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..7 {
            for k in 0..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let kernel = k + 1;
                        let Some(out_len) = ConvGeom::out_extent(len, kernel, stride, pad) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(out_len, len, k, stride, pad);
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let p = (o * stride + k) as isize - pad as isize;
                                p >= 0 && (p as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "len={len} k={k} s={stride} p={pad}");
                    }
                }
            }
        }
    }
}
