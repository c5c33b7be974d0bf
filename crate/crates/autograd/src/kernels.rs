//! Raw numeric kernels on row-major `f64` buffers.

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `small` viewed inside `big` (rank of `big`), with 0 on
/// broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let offset = rank - small.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= small[i];
    }
    strides
}

/// Calls `f(big_index, small_index)` for every element of `big` in row-major
/// order, where `small_index` is the position `small` broadcasts to.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = big.iter().product();
    if total == 0 {
        return;
    }
    let strides = broadcast_strides(small, big);
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    // The innermost axis is handled as a tight loop.
    let inner = big[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut small_off = 0usize;
    let mut flat = 0usize;
    loop {
        let mut s = small_off;
        for _ in 0..inner {
            f(flat, s);
            flat += 1;
            s += inner_stride;
        }
        // advance outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            small_off += strides[axis];
            if idx[axis] < big[axis] {
                break;
            }
            small_off -= strides[axis] * big[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn expand(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; to.iter().product()];
    for_each_broadcast(from, to, |o, s| out[o] = src[s]);
    out
}

/// Sums `src` (shaped `from`) down to `to`, the inverse of [`expand`].
pub(crate) fn sum_to(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; to.iter().product()];
    for_each_broadcast(to, from, |i, o| out[o] += src[i]);
    out
}

/// Elementwise binary op with broadcasting to `out_shape`.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    if b.len() == 1 && a_shape == out_shape {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b_shape == out_shape {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let mut ai = vec![0usize; n];
    for_each_broadcast(a_shape, out_shape, |o, s| ai[o] = s);
    let mut out = vec![0.0; n];
    for_each_broadcast(b_shape, out_shape, |o, s| out[o] = f(a[ai[o]], b[s]));
    out
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Output rows processed per im2col chunk, bounding scratch memory.
    fn rows_per_chunk(&self) -> usize {
        const BUDGET: usize = 1 << 21;
        (BUDGET / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Unfolds output rows `[r0, r1)` of one sample into a `[C*kh*kw, rows*out_w]`
/// matrix.
fn im2col(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, cols: &mut [f64]) {
    let p = (r1 - r0) * g.out_w;
    let (s, pad) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut d = 0;
                for oy in r0..r1 {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= g.height as isize {
                        dst[d..d + g.out_w].fill(0.0);
                        d += g.out_w;
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s - pad + kj as isize;
                        dst[d] = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                        d += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
fn col2im(cols: &[f64], g: &ConvGeom, r0: usize, r1: usize, x: &mut [f64]) {
    let p = (r1 - r0) * g.out_w;
    let (s, pad) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                let mut d = 0;
                for oy in r0..r1 {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= g.height as isize {
                        d += g.out_w;
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[d];
                        }
                        d += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `C[m,n] = alpha * A[m,k] B[k,n] + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the index bounds of all three operands were checked above
    // against their slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// y[N,O,oh,ow] = conv(x[N,C,H,W], w[O,C,kh,kw]).
pub(crate) fn conv2d(x: &[f64], batch: usize, w: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let plane = g.out_h * g.out_w;
    let k = g.patch_len();
    let mut y = vec![0.0; batch * out_ch * plane];
    let rows = g.rows_per_chunk();
    let mut cols = vec![0.0; k * rows * g.out_w];
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let yn = &mut y[n * out_ch * plane..(n + 1) * out_ch * plane];
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + rows).min(g.out_h);
            let p = (r1 - r0) * g.out_w;
            im2col(xn, g, r0, r1, &mut cols[..k * p]);
            gemm(
                out_ch,
                k,
                p,
                w,
                k,
                1,
                &cols[..k * p],
                p,
                1,
                0.0,
                &mut yn[r0 * g.out_w..],
                plane,
            );
            r0 = r1;
        }
    }
    y
}

/// Adjoint of [`conv2d`] in its input: gx[N,C,H,W] from gy[N,O,oh,ow].
pub(crate) fn conv2d_input_grad(gy: &[f64], batch: usize, w: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let plane = g.out_h * g.out_w;
    let k = g.patch_len();
    let mut gx = vec![0.0; batch * in_sz];
    let rows = g.rows_per_chunk();
    let mut cols = vec![0.0; k * rows * g.out_w];
    for n in 0..batch {
        let gyn = &gy[n * out_ch * plane..(n + 1) * out_ch * plane];
        let gxn = &mut gx[n * in_sz..(n + 1) * in_sz];
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + rows).min(g.out_h);
            let p = (r1 - r0) * g.out_w;
            // cols[K,p] = W^T[K,O] gy[O,p]
            gemm(
                k,
                out_ch,
                p,
                w,
                1,
                k,
                &gyn[r0 * g.out_w..],
                plane,
                1,
                0.0,
                &mut cols[..k * p],
                p,
            );
            col2im(&cols[..k * p], g, r0, r1, gxn);
            r0 = r1;
        }
    }
    gx
}

/// Gradient of [`conv2d`] in its weights: gw[O,C,kh,kw].
pub(crate) fn conv2d_weight_grad(x: &[f64], batch: usize, gy: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let plane = g.out_h * g.out_w;
    let k = g.patch_len();
    let mut gw = vec![0.0; out_ch * k];
    let rows = g.rows_per_chunk();
    let mut cols = vec![0.0; k * rows * g.out_w];
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let gyn = &gy[n * out_ch * plane..(n + 1) * out_ch * plane];
        let mut r0 = 0;
        while r0 < g.out_h {
            let r1 = (r0 + rows).min(g.out_h);
            let p = (r1 - r0) * g.out_w;
            im2col(xn, g, r0, r1, &mut cols[..k * p]);
            // gw[O,K] += gy[O,p] cols^T[p,K]
            gemm(
                out_ch,
                p,
                k,
                &gyn[r0 * g.out_w..],
                plane,
                1,
                &cols[..k * p],
                1,
                p,
                1.0,
                &mut gw,
                k,
            );
            r0 = r1;
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; out_ch * g.out_h * g.out_w];
        for o in 0..out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += w[((o * g.channels + c) * g.kh + ki) * g.kw + kj]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    y[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64)
            .map(|i| {
                let v = (i.wrapping_mul(2654435761).wrapping_add(salt * 97)) % 1000;
                v as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(c, h, w, k, s, p) in &[
            (3, 9, 7, 3, 1, 1),
            (2, 10, 10, 4, 2, 1),
            (4, 8, 11, 7, 1, 3),
            (1, 5, 5, 3, 2, 0),
        ] {
            let g = ConvGeom::new(c, h, w, k, k, s, p).unwrap();
            let x = pseudo(c * h * w, 1);
            let wt = pseudo(5 * c * k * k, 2);
            let fast = conv2d(&x, 1, &wt, 5, &g);
            let slow = naive_conv(&x, &wt, 5, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_and_weight_grads_are_adjoint() {
        // <conv(x, w), gy> == <x, conv^T(gy, w)> == <w, wgrad(x, gy)>
        let g = ConvGeom::new(3, 9, 8, 4, 4, 2, 1).unwrap();
        let x = pseudo(2 * 3 * 9 * 8, 3);
        let w = pseudo(4 * 3 * 16, 4);
        let gy = pseudo(2 * 4 * g.out_h * g.out_w, 5);
        let y = conv2d(&x, 2, &w, 4, &g);
        let gx = conv2d_input_grad(&gy, 2, &w, 4, &g);
        let gw = conv2d_weight_grad(&x, 2, &gy, 4, &g);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &gy);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-9);
        assert!((lhs - dot(&w, &gw)).abs() < 1e-9);
    }

    #[test]
    fn broadcast_sum_round_trip() {
        let src = vec![1.0, 2.0, 3.0];
        let e = expand(&src, &[1, 3, 1], &[2, 3, 2]);
        assert_eq!(e, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(sum_to(&e, &[2, 3, 2], &[1, 3, 1]), vec![4.0, 8.0, 12.0]);
        assert_eq!(sum_to(&e, &[2, 3, 2], &[]), vec![24.0]);
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4, 3, 2]), None);
    }
}
