//! Raw per-sample kernels on row-major planes.

/// Row-major matrix view for [`gemm`]: `rows x cols`, optionally stored transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    /// The transpose of a row-major `cols x rows` buffer.
    pub fn t(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta * c + a · b` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// `(c, h, w)` → `(c*k*k, h*w)` with zero "same" padding.
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    dst[..x_lo.min(w)].fill(0.0);
                    if x_hi > x_lo {
                        let s0 = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                    dst[x_hi.max(x_lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
pub(crate) fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dxo).max(0) as usize;
                    let x_hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                    if x_hi <= x_lo {
                        continue;
                    }
                    let s0 = (x_lo as isize + dxo) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// 3x3 depthwise conv with zero padding; `weights` is `(c, 9)`.
pub(crate) fn depthwise_forward(x: &[f32], c: usize, h: usize, w: usize, weights: &[f32], bias: &[f32], out: &mut [f32]) {
    let hw = h * w;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        dst.fill(bias[ch]);
        let k = &weights[ch * 9..ch * 9 + 9];
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = k[ky * 3 + kx];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xo in x_lo..x_hi {
                        drow[xo] += wv * srow[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; accumulates into `dw`, `db` and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f32],
    dout: &[f32],
    c: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let hw = h * w;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let g = &dout[ch * hw..(ch + 1) * hw];
        db[ch] += g.iter().sum::<f32>();
        for ky in 0..3 {
            for kx in 0..3 {
                let dy = ky as isize - 1;
                let dxo = kx as isize - 1;
                let wv = weights[ch * 9 + ky * 3 + kx];
                let mut acc = 0.0f32;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dxo).max(0) as usize;
                    let x_hi = (w as isize - dxo).min(w as isize) as usize;
                    let srow = sy as usize * w;
                    for xo in x_lo..x_hi {
                        acc += g[y * w + xo] * src[srow + (xo as isize + dxo) as usize];
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dplane = &mut dx[ch * hw..(ch + 1) * hw];
                        for xo in x_lo..x_hi {
                            dplane[srow + (xo as isize + dxo) as usize] += wv * g[y * w + xo];
                        }
                    }
                }
                dw[ch * 9 + ky * 3 + kx] += acc;
            }
        }
    }
}

/// 2x2 stride-2 max pool over `planes` planes; records flat argmax per output.
pub(crate) fn maxpool_forward(x: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &x[p * h * w..];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = (2 * y) * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * w + 2 * xo + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out[o] = src[best];
                argmax[o] = (p * h * w + best) as u32;
            }
        }
    }
}

/// Nearest-neighbour 2x upsample.
pub(crate) fn upsample_forward(x: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for y in 0..oh {
            let srow = &x[p * h * w + (y / 2) * w..][..w];
            let drow = &mut out[p * oh * ow + y * ow..][..ow];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
}

pub(crate) fn upsample_backward(dout: &[f32], planes: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for y in 0..oh {
            let grow = &dout[p * oh * ow + y * ow..][..ow];
            let drow = &mut dx[p * h * w + (y / 2) * w..][..w];
            for (xo, g) in grow.iter().enumerate() {
                drow[xo / 2] += *g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| (v as f32) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);
        // (a^T)^T via transposed view of a 3x2 buffer
        let at: Vec<f32> = (0..3).flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f32)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(Mat::t(&at, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c2);
        assert_eq!(c2, naive);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let y: Vec<f32> = (0..c * k * k * h * w).map(|i| ((i * 3 % 13) as f32) - 6.0).collect();
        let mut cols = vec![0.0; c * k * k * h * w];
        im2col(&x, c, h, w, k, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn maxpool_picks_largest() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let mut out = [0.0; 2];
        let mut arg = [0u32; 2];
        maxpool_forward(&x, 1, 2, 4, &mut out, &mut arg);
        assert_eq!(out, [5.0, 9.0]);
        assert_eq!(arg, [1, 6]);
    }
}
