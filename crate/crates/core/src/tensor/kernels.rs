//! Slice-level kernels shared by the tape operations.
//!
//! Every output element is accumulated in a fixed order, so results are
//! bit-reproducible for a given input.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut rows = c[..m * n].chunks_exact_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] = c0[j] + a0 * bv;
                c1[j] = c1[j] + a1 * bv;
                c2[j] = c2[j] + a2 * bv;
                c3[j] = c3[j] + a3 * bv;
            }
        }
        i += 4;
    }
    for c0 in rows {
        for p in 0..k {
            let a0 = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c0.iter_mut().zip(br) {
                *cv = *cv + a0 * bv;
            }
        }
        i += 1;
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m`.
pub fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let at = transpose(a, k, m);
    gemm_nn(m, n, k, &at, b, c);
}

/// `c[m×n] += a · bᵀ` where `b` is stored `n×k`.
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(b, n, k);
    gemm_nn(m, n, k, a, &bt, c);
}

/// Transpose of a `rows×cols` row-major matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    #[inline]
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one `[C, H, W]` image into `[C·K·K, OH·OW]` columns. Pointwise
/// convolutions return the input unchanged.
pub fn im2col<'a, T: Real>(x: &'a [T], d: &ConvDims) -> std::borrow::Cow<'a, [T]> {
    if d.is_pointwise() {
        return std::borrow::Cow::Borrowed(x);
    }
    let k = d.kernel;
    let p_out = d.out_h * d.out_w;
    let mut cols = vec![T::zero(); d.channels * k * k * p_out];
    for c in 0..d.channels {
        let plane = &x[c * d.height * d.width..(c + 1) * d.height * d.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p_out..(row + 1) * p_out];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki * d.dilation) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.height as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * d.width..(ih as usize + 1) * d.width];
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj * d.dilation) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.width as isize {
                            dst[oh * d.out_w + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    std::borrow::Cow::Owned(cols)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    if d.is_pointwise() {
        for (g, &v) in dx.iter_mut().zip(cols) {
            *g = *g + v;
        }
        return;
    }
    let k = d.kernel;
    let p_out = d.out_h * d.out_w;
    for c in 0..d.channels {
        let plane = &mut dx[c * d.height * d.width..(c + 1) * d.height * d.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p_out..(row + 1) * p_out];
                for oh in 0..d.out_h {
                    let ih = (oh * d.stride + ki * d.dilation) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.height as isize {
                        continue;
                    }
                    for ow in 0..d.out_w {
                        let iw = (ow * d.stride + kj * d.dilation) as isize - d.padding as isize;
                        if iw >= 0 && iw < d.width as isize {
                            let at = ih as usize * d.width + iw as usize;
                            plane[at] = plane[at] + src[oh * d.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel-center bilinear resize:
/// `(lower index, upper index, weight of upper)`.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_forward<T: Real>(
    x: &[T],
    out: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    if h == oh && w == ow {
        out.copy_from_slice(&x[..planes * h * w]);
        return;
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[i * ow + j] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
}

pub fn resize_backward<T: Real>(
    g: &[T],
    dx: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    if h == oh && w == ow {
        for (d, &v) in dx.iter_mut().zip(g) {
            *d = *d + v;
        }
        return;
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let gv = src[i * ow + j];
                let gt = gv * (T::one() - fy);
                let gb = gv * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * fx;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolDims {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Divide by the full window area rather than the in-bounds tap count.
    pub count_pad: bool,
}

impl PoolDims {
    pub fn new(
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        count_pad: bool,
    ) -> Option<Self> {
        let span_h = (height + 2 * padding).checked_sub(kernel)?;
        let span_w = (width + 2 * padding).checked_sub(kernel)?;
        Some(Self {
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
            count_pad,
        })
    }

    fn window(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let end = start + self.kernel as isize;
        (
            start.max(0) as usize,
            (end.min(extent as isize)).max(0) as usize,
        )
    }

    fn divisor(&self, rows: (usize, usize), cols: (usize, usize)) -> usize {
        if self.count_pad {
            self.kernel * self.kernel
        } else {
            (rows.1 - rows.0) * (cols.1 - cols.0)
        }
    }
}

pub fn avg_pool_forward<T: Real>(x: &[T], out: &mut [T], planes: usize, d: &PoolDims) {
    let (h, w) = (d.height, d.width);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..d.out_h {
            let rows = d.window(oy, h);
            for ox in 0..d.out_w {
                let cols = d.window(ox, w);
                let mut acc = T::zero();
                for y in rows.0..rows.1 {
                    for x in cols.0..cols.1 {
                        acc = acc + src[y * w + x];
                    }
                }
                out[(p * d.out_h + oy) * d.out_w + ox] = acc / T::of(d.divisor(rows, cols) as f64);
            }
        }
    }
}

pub fn avg_pool_backward<T: Real>(g: &[T], dx: &mut [T], planes: usize, d: &PoolDims) {
    let (h, w) = (d.height, d.width);
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..d.out_h {
            let rows = d.window(oy, h);
            for ox in 0..d.out_w {
                let cols = d.window(ox, w);
                let gv = g[(p * d.out_h + oy) * d.out_w + ox] / T::of(d.divisor(rows, cols) as f64);
                for y in rows.0..rows.1 {
                    for x in cols.0..cols.1 {
                        dst[y * w + x] = dst[y * w + x] + gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_odd_sizes() {
        let (m, n, k) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, n, k, &transpose(&a, m, k), &b, &mut c2);
        assert_eq!(c, c2);
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &transpose(&b, k, n), &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn resize_taps_clamp_at_borders() {
        let taps = resize_taps(2, 4);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }

    #[test]
    fn pool_exclusive_padding_keeps_constants() {
        let d = PoolDims::new(5, 5, 3, 1, 1, false).unwrap();
        let x = vec![2.0f64; 25];
        let mut out = vec![0.0; 25];
        avg_pool_forward(&x, &mut out, 1, &d);
        assert!(out.iter().all(|&v| v == 2.0));
    }
}
