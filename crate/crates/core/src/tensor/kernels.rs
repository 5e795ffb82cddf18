//! Slice-level kernels shared by [`Tensor`](super::Tensor) operations and the
//! layer implementations. Buffers are row-major and unchecked beyond debug
//! assertions; callers validate shapes.

/// Row-major matrix operand: `data` viewed as `rows x cols`, optionally
/// transposed on read.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical_dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` where `c` is `m x n` row-major.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.logical_dims();
    let (kb, n) = b.logical_dims();
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: pointers come from slices whose lengths were checked against
    // the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[c, h, w]` image into `[c * kh * kw, h * w]` columns for a
/// stride-1 "same" zero-padded convolution with odd kernel extents.
pub fn im2col_same(
    image: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    cols: &mut [f64],
) {
    debug_assert_eq!(image.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * h * w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ch in 0..c {
        let plane = &image[ch * hw..(ch + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kj as isize - pw as isize;
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_same`]: scatters (accumulates) columns back into an
/// image gradient.
pub fn col2im_same(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    image: &mut [f64],
) {
    debug_assert_eq!(image.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * h * w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut image[ch * hw..(ch + 1) * hw];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kj as isize - pw as isize;
                    for x in 0..w {
                        let sx = x as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` consecutive `h x w` planes.
/// `argmax` receives, per output cell, the flat index of the winner within
/// the input buffer. Ties go to the first position in row-major order.
pub fn maxpool2x2(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(input.len(), planes * h * w);
    debug_assert_eq!(out.len(), planes * oh * ow);
    debug_assert_eq!(argmax.len(), out.len());
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over each `cols`-wide row.
pub fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}
