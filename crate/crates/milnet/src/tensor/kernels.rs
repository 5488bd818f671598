//! Raw compute kernels shared by the tape's forward and backward passes.
//!
//! All loops keep the innermost index contiguous so the compiler can
//! vectorise them; accumulation order is fixed, which keeps results
//! bit-reproducible across runs on one machine.

use super::Element;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out[k,n] += a[m,k]ᵀ @ b[m,n]
pub fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &a_ri) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_ri * b_row[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]ᵀ
///
/// Goes through an explicit transpose of `b` so the accumulation loop stays
/// contiguous instead of becoming a strided reduction.
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, m, n, k, out);
}

/// Row-major transpose of an `[rows, cols]` matrix.
pub fn transpose<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Patch geometry for a same-padded stride-1 2-D convolution over a
/// channels-last `[B, H, W, C]` tensor.
#[derive(Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeom {
    pub fn pad_top(&self) -> usize {
        (self.kernel_h - 1) / 2
    }
    pub fn pad_left(&self) -> usize {
        (self.kernel_w - 1) / 2
    }
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Lay out every receptive field as one row: `[B*H*W, KH*KW*C]`, zero-filled
/// outside the input. The flattened kernel `[KH*KW*C, O]` is then a plain
/// matmul away from the convolution output.
pub fn im2col<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let plen = g.patch_len();
    let mut patches = vec![E::ZERO; g.positions() * plen];
    let (pt, pl) = (g.pad_top() as isize, g.pad_left() as isize);
    let row_stride = g.width * g.in_channels;
    for b in 0..g.batch {
        let x_base = b * g.height * row_stride;
        for h in 0..g.height {
            for w in 0..g.width {
                let row = ((b * g.height + h) * g.width + w) * plen;
                for kh in 0..g.kernel_h {
                    let sh = h as isize + kh as isize - pt;
                    if sh < 0 || sh >= g.height as isize {
                        continue;
                    }
                    for kw in 0..g.kernel_w {
                        let sw = w as isize + kw as isize - pl;
                        if sw < 0 || sw >= g.width as isize {
                            continue;
                        }
                        let src = x_base + sh as usize * row_stride + sw as usize * g.in_channels;
                        let dst = row + (kh * g.kernel_w + kw) * g.in_channels;
                        patches[dst..dst + g.in_channels]
                            .copy_from_slice(&x[src..src + g.in_channels]);
                    }
                }
            }
        }
    }
    patches
}

/// Scatter patch-space gradients back onto the input grid (inverse of
/// [`im2col`] up to summation over overlapping windows).
pub fn col2im_acc<E: Element>(dpatches: &[E], g: &ConvGeom, dx: &mut [E]) {
    let plen = g.patch_len();
    let (pt, pl) = (g.pad_top() as isize, g.pad_left() as isize);
    let row_stride = g.width * g.in_channels;
    for b in 0..g.batch {
        let x_base = b * g.height * row_stride;
        for h in 0..g.height {
            for w in 0..g.width {
                let row = ((b * g.height + h) * g.width + w) * plen;
                for kh in 0..g.kernel_h {
                    let sh = h as isize + kh as isize - pt;
                    if sh < 0 || sh >= g.height as isize {
                        continue;
                    }
                    for kw in 0..g.kernel_w {
                        let sw = w as isize + kw as isize - pl;
                        if sw < 0 || sw >= g.width as isize {
                            continue;
                        }
                        let dst = x_base + sh as usize * row_stride + sw as usize * g.in_channels;
                        let src = row + (kh * g.kernel_w + kw) * g.in_channels;
                        for c in 0..g.in_channels {
                            dx[dst + c] += dpatches[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `[B, H, W, C]` with window `(ph, pw)`
/// and stride equal to the window; trailing rows/columns that do not fill a
/// window are dropped. Returns the pooled values and, per output element,
/// the flat input index of the (first) maximum.
pub fn maxpool2d<E: Element>(
    x: &[E],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    ph: usize,
    pw: usize,
) -> (Vec<E>, Vec<usize>) {
    let oh = height / ph;
    let ow = width / pw;
    let mut out = vec![E::ZERO; batch * oh * ow * channels];
    let mut arg = vec![0usize; out.len()];
    let row_stride = width * channels;
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                for c in 0..channels {
                    let mut best_idx =
                        b * height * row_stride + (i * ph) * row_stride + (j * pw) * channels + c;
                    let mut best = x[best_idx];
                    for di in 0..ph {
                        for dj in 0..pw {
                            let idx = b * height * row_stride
                                + (i * ph + di) * row_stride
                                + (j * pw + dj) * channels
                                + c;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + i) * ow + j) * channels + c;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}
